//! Annealing machinery: step weights for the particle flow and the nested
//! generator loop, initial-weight selection, noise ladders and Langevin
//! step sizes.

use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ScheduleKind {
    AnnealedGeometric,
    Constant,
    ReverseGeometric,
}

/// Positive per-step weights `w[1..M]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightSchedule {
    weights: Vec<f64>,
    kind: ScheduleKind,
}

impl WeightSchedule {
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn first(&self) -> f64 {
        self.weights[0]
    }

    pub fn last(&self) -> f64 {
        *self.weights.last().expect("non-empty")
    }

    /// Weight for 1-based step `m`.
    pub fn at(&self, m: usize) -> f64 {
        self.weights[m - 1]
    }

    /// Ratio between consecutive weights, `w[m] / w[m+1]`.
    pub fn ratios(&self) -> Vec<f64> {
        self.weights.windows(2).map(|w| w[0] / w[1]).collect()
    }
}

/// Geometric decay from `w_first` to `w_last` over `m` steps with the
/// uniform ratio `(w_last / w_first)^(1 / (m - 1))`.
pub fn geometric_schedule(m: usize, w_first: f64, w_last: f64) -> Result<WeightSchedule> {
    if m < 2 {
        return Err(Error::Invalid(format!(
            "geometric schedule needs at least 2 steps, got {m}"
        )));
    }
    if !(w_last > 0.0) || !(w_first > w_last) || !w_first.is_finite() {
        return Err(Error::Invalid(format!(
            "geometric schedule needs w_first > w_last > 0, got ({w_first}, {w_last})"
        )));
    }
    let r = (w_last / w_first).powf(1.0 / (m - 1) as f64);
    let mut weights: Vec<f64> = (0..m).map(|i| w_first * r.powi(i as i32)).collect();
    weights[m - 1] = w_last;
    Ok(WeightSchedule {
        weights,
        kind: ScheduleKind::AnnealedGeometric,
    })
}

pub fn constant_schedule(m: usize, w: f64) -> Result<WeightSchedule> {
    if m < 1 || !(w > 0.0) {
        return Err(Error::Invalid(format!(
            "constant schedule needs m >= 1 and w > 0, got ({m}, {w})"
        )));
    }
    Ok(WeightSchedule {
        weights: vec![w; m],
        kind: ScheduleKind::Constant,
    })
}

/// The same weights in increasing order. Applying it twice restores the
/// original schedule.
pub fn reverse_schedule(s: &WeightSchedule) -> WeightSchedule {
    let mut weights = s.weights.clone();
    weights.reverse();
    let kind = match s.kind {
        ScheduleKind::AnnealedGeometric => ScheduleKind::ReverseGeometric,
        ScheduleKind::ReverseGeometric => ScheduleKind::AnnealedGeometric,
        ScheduleKind::Constant => ScheduleKind::Constant,
    };
    WeightSchedule { weights, kind }
}

/// Reverse geometric schedule rising from `w_low` to `w_high`.
pub fn reverse_geometric(m: usize, w_low: f64, w_high: f64) -> Result<WeightSchedule> {
    Ok(reverse_schedule(&geometric_schedule(m, w_high, w_low)?))
}

/// Distance buckets for choosing the first annealed weight.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightThresholds {
    /// `(upper distance bound, weight)`, sorted by bound.
    pub buckets: Vec<(f64, f64)>,
    /// Weight used above the largest bound.
    pub above: f64,
}

impl Default for WeightThresholds {
    fn default() -> Self {
        Self {
            buckets: vec![(200.0, 1.0)],
            above: 20.0,
        }
    }
}

/// Larger median pairwise distance between data and initial samples calls
/// for a larger first weight.
pub fn initial_weight_from_distance(d2: f64, thresholds: &WeightThresholds) -> f64 {
    thresholds
        .buckets
        .iter()
        .find(|(bound, _)| d2 <= *bound)
        .map_or(thresholds.above, |&(_, w)| w)
}

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

/// Probability mass of the noise-ladder overlap criterion at ratio `gamma`
/// for data dimension `dim`.
pub fn gamma_criterion(dim: usize, gamma: f64) -> f64 {
    let a = (2.0 * dim as f64).sqrt() * (gamma - 1.0);
    normal_cdf(a + 3.0 * gamma) - normal_cdf(a - 3.0 * gamma)
}

/// Solves `gamma_criterion(dim, gamma) = 0.5` for `gamma` in `(0, 1)` by bisection.
pub fn select_gamma(dim: usize, tolerance: f64) -> Result<f64> {
    if dim < 1 {
        return Err(Error::Invalid("select_gamma needs dim >= 1".into()));
    }
    let f = |g: f64| gamma_criterion(dim, g) - 0.5;
    let (mut lo, mut hi) = (1e-12, 1.0);
    if f(lo).signum() == f(hi).signum() {
        return Err(Error::Invalid(format!("no sign change on (0, 1) for dim {dim}")));
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        let v = f(mid);
        if v.abs() <= tolerance && hi - lo < 1e-9 {
            return Ok(mid);
        }
        if v < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let mid = 0.5 * (lo + hi);
    if f(mid).abs() <= tolerance {
        Ok(mid)
    } else {
        Err(Error::Invalid(format!("bisection did not reach tolerance {tolerance}")))
    }
}

/// Strictly decreasing geometric noise levels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SigmaLadder {
    sigmas: Vec<f64>,
    gamma: f64,
}

impl SigmaLadder {
    /// `levels` noise scales starting at `sigma_first`, each `gamma` times the previous.
    pub fn geometric(sigma_first: f64, gamma: f64, levels: usize) -> Result<Self> {
        if !(sigma_first > 0.0) || !(gamma > 0.0 && gamma < 1.0) || levels < 1 {
            return Err(Error::Invalid(format!(
                "sigma ladder needs sigma_first > 0, gamma in (0,1), levels >= 1; got ({sigma_first}, {gamma}, {levels})"
            )));
        }
        let sigmas = (0..levels).map(|i| sigma_first * gamma.powi(i as i32)).collect();
        Ok(Self { sigmas, gamma })
    }

    /// Ladder through both endpoints.
    pub fn between(sigma_first: f64, sigma_last: f64, levels: usize) -> Result<Self> {
        if levels < 2 || !(sigma_first > sigma_last) || !(sigma_last > 0.0) {
            return Err(Error::Invalid(
                "sigma ladder needs sigma_first > sigma_last > 0 and levels >= 2".into(),
            ));
        }
        let gamma = (sigma_last / sigma_first).powf(1.0 / (levels - 1) as f64);
        let mut s = Self::geometric(sigma_first, gamma, levels)?;
        s.sigmas[levels - 1] = sigma_last;
        Ok(s)
    }

    /// Explicit levels; must be strictly decreasing with a constant ratio.
    pub fn from_sigmas(sigmas: Vec<f64>) -> Result<Self> {
        if sigmas.is_empty() || sigmas.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::Invalid("sigmas must be positive and non-empty".into()));
        }
        if sigmas.len() == 1 {
            return Ok(Self { sigmas, gamma: 0.5 });
        }
        let gamma = sigmas[1] / sigmas[0];
        let ok = sigmas
            .windows(2)
            .all(|w| w[1] < w[0] && ((w[1] / w[0]) - gamma).abs() <= 1e-12 * gamma.max(1.0));
        if !ok {
            return Err(Error::Invalid("sigmas must decrease geometrically".into()));
        }
        Ok(Self { sigmas, gamma })
    }

    pub fn sigmas(&self) -> &[f64] {
        &self.sigmas
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn len(&self) -> usize {
        self.sigmas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sigmas.is_empty()
    }
}

/// Per-level Langevin step sizes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlphaLadder {
    pub alphas: Vec<f64>,
    pub epsilon: f64,
}

/// `alpha_i = epsilon * sigma_i^2 / sigma_L^2`.
pub fn alpha_ladder(sigmas: &SigmaLadder, epsilon: f64) -> Result<AlphaLadder> {
    if !(epsilon > 0.0) {
        return Err(Error::Invalid(format!("epsilon must be positive, got {epsilon}")));
    }
    let last = *sigmas.sigmas().last().expect("non-empty ladder");
    let alphas = sigmas
        .sigmas()
        .iter()
        .map(|s| epsilon * ((s * s) / (last * last)))
        .collect();
    Ok(AlphaLadder { alphas, epsilon })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn geometric_examples() {
        let s = geometric_schedule(15, 1.0, 0.01).unwrap();
        let r = 0.01f64.powf(1.0 / 14.0);
        assert!((r - 0.71969).abs() < 1e-5);
        assert!((s.at(2) - r).abs() < 1e-15);
        assert_eq!(s.first(), 1.0);
        assert_eq!(s.last(), 0.01);
        assert_eq!(geometric_schedule(2, 20.0, 1.0).unwrap().weights(), &[20.0, 1.0]);
        assert_eq!(geometric_schedule(3, 4.0, 1.0).unwrap().weights(), &[4.0, 2.0, 1.0]);
    }

    #[test]
    fn geometric_rejects_bad_endpoints() {
        assert!(geometric_schedule(5, 1.0, 1.0).is_err());
        assert!(geometric_schedule(5, 0.01, 1.0).is_err());
        assert!(geometric_schedule(1, 2.0, 1.0).is_err());
        assert!(geometric_schedule(5, 1.0, 0.0).is_err());
    }

    #[test]
    fn reverse_examples() {
        let s = geometric_schedule(3, 4.0, 1.0).unwrap();
        let r = reverse_schedule(&s);
        assert_eq!(r.weights(), &[1.0, 2.0, 4.0]);
        assert_eq!(r.kind(), ScheduleKind::ReverseGeometric);
        assert_eq!(reverse_schedule(&r), s);
        let long = reverse_schedule(&geometric_schedule(15, 1.0, 0.01).unwrap());
        assert_eq!(long.first(), 0.01);
        assert_eq!(long.last(), 1.0);
    }

    #[test]
    fn initial_weight_table() {
        let t = WeightThresholds::default();
        assert_eq!(initial_weight_from_distance(125.0, &t), 1.0);
        assert_eq!(initial_weight_from_distance(520.0, &t), 20.0);
        assert_eq!(initial_weight_from_distance(62.0, &t), 1.0);
        assert_eq!(initial_weight_from_distance(515.0, &t), 20.0);
    }

    #[test]
    fn gamma_criterion_at_one() {
        for d in [1, 2, 10, 3072] {
            assert!((gamma_criterion(d, 1.0) - 0.9973).abs() < 1e-4);
        }
    }

    #[test]
    fn select_gamma_is_self_certifying() {
        for d in [1, 2, 3, 64, 3072] {
            let g = select_gamma(d, 1e-6).unwrap();
            assert!(g > 0.0 && g < 1.0);
            assert!((gamma_criterion(d, g) - 0.5).abs() <= 1e-6);
            // increasing around the solution
            let probes: Vec<f64> = (0..=20)
                .map(|i| gamma_criterion(d, g * (0.99 + 0.001 * i as f64)))
                .collect();
            assert!(probes.windows(2).all(|w| w[1] > w[0]), "dim {d}");
        }
    }

    #[test]
    fn alpha_examples() {
        let s = SigmaLadder::from_sigmas(vec![1.0, 0.5, 0.25]).unwrap();
        let a = alpha_ladder(&s, 0.1).unwrap();
        assert_eq!(a.alphas, vec![1.6, 0.4, 0.1]);
        let one = alpha_ladder(&SigmaLadder::from_sigmas(vec![3.0]).unwrap(), 0.2).unwrap();
        assert_eq!(one.alphas, vec![0.2]);
        assert!(alpha_ladder(&s, 0.0).is_err());
    }

    #[test]
    fn ladder_validation() {
        assert!(SigmaLadder::from_sigmas(vec![1.0, 0.5, 0.3]).is_err());
        assert!(SigmaLadder::from_sigmas(vec![1.0, 2.0]).is_err());
        let l = SigmaLadder::between(8.0, 0.01, 10).unwrap();
        assert_eq!(l.sigmas()[9], 0.01);
        assert_eq!(l.len(), 10);
    }

    proptest! {
        #[test]
        fn geometric_ratio_constant(m in 2usize..40, hi in 0.02f64..50.0, frac in 0.001f64..0.99) {
            let lo = hi * frac;
            let s = geometric_schedule(m, hi, lo).unwrap();
            let r = s.ratios();
            prop_assert!(r.iter().all(|v| *v > 1.0));
            prop_assert!(r.iter().all(|v| (v - r[0]).abs() <= 1e-12 * r[0]));
            let mut a = s.weights().to_vec();
            let mut b = reverse_schedule(&s).weights().to_vec();
            a.sort_by(f64::total_cmp);
            b.sort_by(f64::total_cmp);
            prop_assert_eq!(a, b);
        }

        #[test]
        fn alphas_decrease(first in 0.1f64..20.0, gamma in 0.1f64..0.95, levels in 1usize..15, eps in 1e-6f64..1.0) {
            let s = SigmaLadder::geometric(first, gamma, levels).unwrap();
            let a = alpha_ladder(&s, eps).unwrap();
            prop_assert!(a.alphas.windows(2).all(|w| w[1] < w[0]));
            prop_assert_eq!(*a.alphas.last().unwrap(), eps);
        }

        #[test]
        fn initial_weight_monotone(a in 0.0f64..1000.0, b in 0.0f64..1000.0) {
            let t = WeightThresholds::default();
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(initial_weight_from_distance(lo, &t) <= initial_weight_from_distance(hi, &t));
        }
    }
}
