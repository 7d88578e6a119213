//! Plain and annealed Langevin dynamics over analytic or
//! discriminator-derived score oracles.

use crate::distributions::{GaussianComponent, GaussianMixture};
use crate::error::{Error, Result};
use crate::models::{AnalyticDiscriminator, Critic, Discriminator};
use crate::numerics::{Rng, Tensor};
use crate::parallel::Execution;
use crate::schedules::{AlphaLadder, SigmaLadder};

/// Default divergence bound on `|x|`.
pub const DIVERGENCE_BOUND: f64 = 1e3;

#[derive(Debug, Clone, PartialEq)]
pub enum ScoreOracle {
    Analytic(GaussianMixture),
    /// `grad_x [log p_* - log p_g]`.
    DiscDifference(AnalyticDiscriminator),
    /// Input gradient of a trained discriminator.
    TrainedDisc(Discriminator),
}

impl ScoreOracle {
    pub fn dim(&self) -> usize {
        match self {
            ScoreOracle::Analytic(m) => m.dim(),
            ScoreOracle::DiscDifference(d) => d.p_star.dim(),
            ScoreOracle::TrainedDisc(d) => d.dim(),
        }
    }

    pub fn score_point(&self, x: &[f64]) -> Result<Vec<f64>> {
        match self {
            ScoreOracle::Analytic(m) => Ok(m.score_point(x)),
            ScoreOracle::DiscDifference(d) => single(d, x),
            ScoreOracle::TrainedDisc(d) => single(d, x),
        }
    }

    pub fn score(&self, x: &Tensor) -> Result<Tensor> {
        match self {
            ScoreOracle::Analytic(m) => m.score(x),
            ScoreOracle::DiscDifference(d) => Ok(d.values_and_input_grads(x)?.1),
            ScoreOracle::TrainedDisc(d) => Ok(d.values_and_input_grads(x)?.1),
        }
    }
}

fn single(c: &dyn Critic, x: &[f64]) -> Result<Vec<f64>> {
    let t = Tensor::new(vec![1, x.len()], x.to_vec())?;
    Ok(c.values_and_input_grads(&t)?.1.into_data())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChainConfig {
    /// Steps per level (`K`).
    pub steps: usize,
    pub epsilon: f64,
    /// Present for the annealed sampler only.
    pub ladder: Option<AlphaLadder>,
    pub prior: GaussianComponent,
    pub chains: usize,
    pub bound: f64,
    pub execution: Execution,
}

impl ChainConfig {
    pub fn new(prior: GaussianComponent, chains: usize, steps: usize, epsilon: f64) -> Self {
        Self {
            steps,
            epsilon,
            ladder: None,
            prior,
            chains,
            bound: DIVERGENCE_BOUND,
            execution: Execution::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps < 1 || !(self.epsilon >= 0.0) || !(self.bound > 0.0) {
            return Err(Error::Invalid(format!(
                "chain config needs K >= 1, epsilon >= 0 and a positive bound; got K={} epsilon={}",
                self.steps, self.epsilon
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamplerOutput {
    /// Final points of the chains that stayed bounded, in chain order.
    pub points: Tensor,
    pub kept: Vec<usize>,
    pub diverged: usize,
    /// `(step size, steps)` per level as actually run.
    pub levels: Vec<(f64, usize)>,
}

enum ChainEnd {
    Done(Vec<f64>),
    Diverged,
}

fn run_chain(oracles: &[&ScoreOracle], sizes: &[f64], cfg: &ChainConfig, rng: &mut Rng) -> Result<ChainEnd> {
    let d = cfg.prior.dim();
    let mut x = vec![0.0; d];
    cfg.prior.sample_into(rng, &mut x);
    for (oracle, &a) in oracles.iter().zip(sizes) {
        let noise = (2.0 * a).sqrt();
        for _ in 0..cfg.steps {
            let s = oracle.score_point(&x)?;
            for j in 0..d {
                x[j] += a * s[j] + noise * rng.normal();
            }
            let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
            if !(norm <= cfg.bound) {
                return Ok(ChainEnd::Diverged);
            }
        }
    }
    Ok(ChainEnd::Done(x))
}

fn run_chains(oracles: &[&ScoreOracle], sizes: &[f64], cfg: &ChainConfig, rng: &Rng) -> Result<SamplerOutput> {
    cfg.validate()?;
    let d = cfg.prior.dim();
    if let Some(o) = oracles.iter().find(|o| o.dim() != d) {
        return Err(crate::error::shape_err("score oracle width", d, o.dim()));
    }
    let ends = cfg.execution.map(cfg.chains, |i| {
        let mut r = rng.split("chain", i as u64);
        run_chain(oracles, sizes, cfg, &mut r)
    });
    let mut data = Vec::with_capacity(cfg.chains * d);
    let mut kept = Vec::with_capacity(cfg.chains);
    let mut diverged = 0;
    for (i, end) in ends.into_iter().enumerate() {
        match end? {
            ChainEnd::Done(x) => {
                data.extend(x);
                kept.push(i);
            }
            ChainEnd::Diverged => diverged += 1,
        }
    }
    if diverged > 0 {
        log::warn!("{diverged} of {} chains left |x| <= {}", cfg.chains, cfg.bound);
    }
    Ok(SamplerOutput {
        points: Tensor::new(vec![kept.len(), d], data)?,
        kept,
        diverged,
        levels: sizes.iter().map(|&a| (a, cfg.steps)).collect(),
    })
}

/// `x <- x + eps * s(x) + sqrt(2 eps) z` for `K` steps per chain.
pub fn langevin(oracle: &ScoreOracle, cfg: &ChainConfig, rng: &mut Rng) -> Result<SamplerOutput> {
    if cfg.ladder.is_some() {
        return Err(Error::Invalid("plain Langevin takes no step-size ladder".into()));
    }
    let base = Rng::new(rng.next_u64());
    run_chains(&[oracle], &[cfg.epsilon], cfg, &base)
}

/// `K` steps at each level with step size `alpha_i`, using `oracles[i]`.
pub fn annealed_langevin(oracles: &[ScoreOracle], cfg: &ChainConfig, rng: &mut Rng) -> Result<SamplerOutput> {
    let ladder = cfg
        .ladder
        .as_ref()
        .ok_or_else(|| Error::Invalid("annealed Langevin needs a step-size ladder".into()))?;
    if ladder.alphas.len() != oracles.len() {
        return Err(Error::Invalid(format!(
            "{} oracles for {} noise levels",
            oracles.len(),
            ladder.alphas.len()
        )));
    }
    let refs: Vec<&ScoreOracle> = oracles.iter().collect();
    let base = Rng::new(rng.next_u64());
    run_chains(&refs, &ladder.alphas, cfg, &base)
}

/// Exact score of `mix` convolved with `N(0, sigma^2 I)`.
pub fn smoothed_score(mix: &GaussianMixture, sigma: f64, x: &Tensor) -> Result<Tensor> {
    if !(sigma >= 0.0) {
        return Err(Error::Invalid(format!("sigma must be non-negative, got {sigma}")));
    }
    if sigma == 0.0 {
        return mix.score(x);
    }
    mix.inflate(sigma)?.score(x)
}

/// One analytic oracle per noise level: `mix` smoothed by each `sigma_i`.
pub fn smoothed_oracles(mix: &GaussianMixture, sigmas: &SigmaLadder) -> Result<Vec<ScoreOracle>> {
    sigmas
        .sigmas()
        .iter()
        .map(|&s| Ok(ScoreOracle::Analytic(mix.inflate(s)?)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedules::alpha_ladder;

    fn standard() -> ScoreOracle {
        ScoreOracle::Analytic(GaussianMixture::single(GaussianComponent::standard(2)))
    }

    #[test]
    fn zero_score_single_step_is_noise() {
        let zero = ScoreOracle::DiscDifference(
            AnalyticDiscriminator::new(
                GaussianMixture::single(GaussianComponent::standard(2)),
                GaussianMixture::single(GaussianComponent::standard(2)),
            )
            .unwrap(),
        );
        let prior = GaussianComponent::isotropic(vec![0.0, 0.0], 1e-150, 1.0).unwrap();
        let mut cfg = ChainConfig::new(prior, 2000, 1, 0.5);
        cfg.execution = Execution::Sequential;
        let out = langevin(&zero, &cfg, &mut Rng::new(1)).unwrap();
        let var = out.points.data().iter().map(|v| v * v).sum::<f64>() / out.points.len() as f64;
        assert!((var - 1.0).abs() < 0.1, "{var}");
    }

    #[test]
    fn zero_epsilon_at_stationary_point() {
        let prior = GaussianComponent::isotropic(vec![0.0, 0.0], 1e-150, 1.0).unwrap();
        let cfg = ChainConfig::new(prior, 3, 10, 0.0);
        let out = langevin(&standard(), &cfg, &mut Rng::new(2)).unwrap();
        assert!(out.points.max_abs() < 1e-140);
    }

    #[test]
    fn stationary_moments() {
        let cfg = ChainConfig::new(
            GaussianComponent::isotropic(vec![3.0, -3.0], 1.0, 1.0).unwrap(),
            10_000,
            1000,
            0.01,
        );
        let out = langevin(&standard(), &cfg, &mut Rng::new(3)).unwrap();
        let n = out.points.rows() as f64;
        for j in 0..2 {
            let col: Vec<f64> = out.points.iter_rows().map(|r| r[j]).collect();
            let mean = col.iter().sum::<f64>() / n;
            let m2 = col.iter().map(|v| v * v).sum::<f64>() / n;
            assert!(mean.abs() < 0.05, "{mean}");
            // Standard error of the second moment is sqrt(2/n).
            assert!((m2 - 1.0).abs() < 3.0 * (2.0 / n).sqrt(), "{m2}");
        }
    }

    #[test]
    fn parallel_and_sequential_agree() {
        let mut cfg = ChainConfig::new(GaussianComponent::standard(2), 64, 20, 0.05);
        let a = langevin(&standard(), &cfg, &mut Rng::new(4)).unwrap();
        cfg.execution = Execution::Sequential;
        let b = langevin(&standard(), &cfg, &mut Rng::new(4)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn divergent_chains_are_dropped() {
        let mut cfg = ChainConfig::new(GaussianComponent::standard(2), 20, 200, 3.0);
        cfg.bound = 50.0;
        let out = langevin(&standard(), &cfg, &mut Rng::new(5)).unwrap();
        assert_eq!(out.diverged + out.kept.len(), 20);
        assert!(out.diverged > 0);
    }

    #[test]
    fn single_level_matches_plain() {
        let sig = SigmaLadder::from_sigmas(vec![0.7]).unwrap();
        let mut cfg = ChainConfig::new(GaussianComponent::standard(2), 16, 30, 0.02);
        let plain = langevin(&standard(), &cfg, &mut Rng::new(6)).unwrap();
        cfg.ladder = Some(alpha_ladder(&sig, 0.02).unwrap());
        let ann = annealed_langevin(&[standard()], &cfg, &mut Rng::new(6)).unwrap();
        assert_eq!(plain.points, ann.points);
        assert!(langevin(&standard(), &cfg, &mut Rng::new(6)).is_err());
    }

    #[test]
    fn levels_follow_alpha_ladder() {
        let sig = SigmaLadder::from_sigmas(vec![1.0, 0.5, 0.25]).unwrap();
        let ladder = alpha_ladder(&sig, 0.1).unwrap();
        let mut cfg = ChainConfig::new(GaussianComponent::standard(2), 4, 7, 0.1);
        cfg.ladder = Some(ladder.clone());
        let mix = GaussianMixture::single(GaussianComponent::standard(2));
        let out = annealed_langevin(&smoothed_oracles(&mix, &sig).unwrap(), &cfg, &mut Rng::new(7)).unwrap();
        assert_eq!(out.levels, ladder.alphas.iter().map(|&a| (a, 7)).collect::<Vec<_>>());
        assert!(annealed_langevin(&smoothed_oracles(&mix, &sig).unwrap()[..2], &cfg, &mut Rng::new(7)).is_err());
    }

    #[test]
    fn smoothed_score_cases() {
        let mix = GaussianMixture::isotropic(&[vec![1.0, 0.0], vec![-2.0, 1.0]], 0.4).unwrap();
        let x = Rng::new(8).normal_matrix(10, 2);
        assert_eq!(smoothed_score(&mix, 0.0, &x).unwrap(), mix.score(&x).unwrap());
        assert_eq!(
            smoothed_score(&mix, 0.3, &x).unwrap(),
            mix.inflate(0.3).unwrap().score(&x).unwrap()
        );

        let std = GaussianMixture::single(GaussianComponent::standard(2));
        let s = smoothed_score(&std, 1.0, &x).unwrap();
        assert!(s.zip_map(&x, |a, b| a + b / 2.0).max_abs() < 1e-14);

        let inflated = mix.inflate(0.5).unwrap();
        let s = smoothed_score(&mix, 0.5, &x).unwrap();
        for (r, row) in x.iter_rows().enumerate() {
            for j in 0..2 {
                let h = 1e-5;
                let mut up = row.to_vec();
                up[j] += h;
                let mut dn = row.to_vec();
                dn[j] -= h;
                let fd = (inflated.log_pdf_point(&up) - inflated.log_pdf_point(&dn)) / (2.0 * h);
                assert!((fd - s.row(r)[j]).abs() < 1e-5);
            }
        }
        assert!(smoothed_score(&mix, -1.0, &x).is_err());
    }
}
