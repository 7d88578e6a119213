//! Analytic Gaussian-mixture targets: densities, scores, sampling and
//! closed-form Gaussian KL.

use std::f64::consts::PI;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::numerics::{Rng, Tensor};

/// One weighted Gaussian with cached factorizations.
#[derive(Debug, Clone)]
pub struct GaussianComponent {
    mean: DVector<f64>,
    cov: DMatrix<f64>,
    weight: f64,
    chol: Cholesky<f64, Dyn>,
    precision: DMatrix<f64>,
    log_det: f64,
}

impl PartialEq for GaussianComponent {
    fn eq(&self, other: &Self) -> bool {
        self.mean == other.mean && self.cov == other.cov && self.weight == other.weight
    }
}

impl GaussianComponent {
    pub fn new(mean: Vec<f64>, cov: DMatrix<f64>, weight: f64) -> Result<Self> {
        let d = mean.len();
        if d == 0 || cov.nrows() != d || cov.ncols() != d {
            return Err(shape_err(
                "GaussianComponent covariance",
                format!("{d}x{d}"),
                format!("{}x{}", cov.nrows(), cov.ncols()),
            ));
        }
        if !(weight > 0.0 && weight <= 1.0) {
            return Err(Error::Invalid(format!("component weight {weight} outside (0, 1]")));
        }
        let asym = (&cov - cov.transpose()).abs().max();
        if asym > 1e-12 {
            return Err(Error::LinAlg(format!(
                "covariance not symmetric (max asymmetry {asym:e})"
            )));
        }
        let chol =
            Cholesky::new(cov.clone()).ok_or_else(|| Error::LinAlg("covariance is not positive definite".into()))?;
        let precision = chol.inverse();
        let log_det = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        Ok(Self {
            mean: DVector::from_vec(mean),
            cov,
            weight,
            chol,
            precision,
            log_det,
        })
    }

    /// `N(mean, sigma^2 I)`.
    pub fn isotropic(mean: Vec<f64>, sigma: f64, weight: f64) -> Result<Self> {
        if !(sigma > 0.0) {
            return Err(Error::Invalid(format!("standard deviation {sigma} must be positive")));
        }
        let d = mean.len();
        Self::new(mean, DMatrix::identity(d, d) * (sigma * sigma), weight)
    }

    /// `N(0, I_d)`.
    pub fn standard(d: usize) -> Self {
        Self::isotropic(vec![0.0; d], 1.0, 1.0).expect("valid")
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn cov(&self) -> &DMatrix<f64> {
        &self.cov
    }

    pub fn precision(&self) -> &DMatrix<f64> {
        &self.precision
    }

    pub fn weight(&self) -> f64 {
        self.weight
    }

    pub fn log_det(&self) -> f64 {
        self.log_det
    }

    /// Lower Cholesky factor of the covariance.
    pub fn chol_lower(&self) -> DMatrix<f64> {
        self.chol.l()
    }

    pub fn with_weight(&self, weight: f64) -> Result<Self> {
        Self::new(self.mean.as_slice().to_vec(), self.cov.clone(), weight)
    }

    /// Same mean, covariance inflated by `sigma^2 I`.
    pub fn inflate(&self, sigma: f64) -> Result<Self> {
        let d = self.dim();
        Self::new(
            self.mean.as_slice().to_vec(),
            &self.cov + DMatrix::identity(d, d) * (sigma * sigma),
            self.weight,
        )
    }

    /// Log density of the (unweighted) Gaussian at `x`.
    pub fn log_density(&self, x: &[f64]) -> f64 {
        let diff = DVector::from_column_slice(x) - &self.mean;
        let q = diff.dot(&(&self.precision * &diff));
        -0.5 * (self.dim() as f64 * (2.0 * PI).ln() + self.log_det + q)
    }

    /// `Sigma^{-1} (mu - x)`.
    pub fn score_point(&self, x: &[f64]) -> DVector<f64> {
        let diff = &self.mean - DVector::from_column_slice(x);
        &self.precision * diff
    }

    pub fn sample_into(&self, rng: &mut Rng, out: &mut [f64]) {
        let d = self.dim();
        let z = DVector::from_iterator(d, (0..d).map(|_| rng.normal()));
        let x = &self.mean + self.chol.l() * z;
        out.copy_from_slice(x.as_slice());
    }
}

/// Closed-form `KL(p || q)` between Gaussians.
pub fn kl_gaussians(p: &GaussianComponent, q: &GaussianComponent) -> f64 {
    let d = p.dim() as f64;
    let diff = q.mean() - p.mean();
    let tr = (q.precision() * p.cov()).trace();
    let quad = diff.dot(&(q.precision() * &diff));
    (0.5 * (tr + quad - d + q.log_det() - p.log_det())).max(0.0)
}

/// Finite mixture of Gaussians with weights summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMixture {
    components: Vec<GaussianComponent>,
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

impl GaussianMixture {
    pub fn new(components: Vec<GaussianComponent>) -> Result<Self> {
        let first = components
            .first()
            .ok_or_else(|| Error::Invalid("mixture needs at least one component".into()))?;
        let d = first.dim();
        if let Some(c) = components.iter().find(|c| c.dim() != d) {
            return Err(shape_err("mixture component dimension", d, c.dim()));
        }
        let total: f64 = components.iter().map(|c| c.weight).sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::Invalid(format!("mixture weights sum to {total}, not 1")));
        }
        Ok(Self { components })
    }

    pub fn single(c: GaussianComponent) -> Self {
        let c = c.with_weight(1.0).expect("component already valid");
        Self { components: vec![c] }
    }

    /// Equal-weight isotropic mixture at the given centers.
    pub fn isotropic(centers: &[Vec<f64>], sigma: f64) -> Result<Self> {
        let w = 1.0 / centers.len().max(1) as f64;
        let comps = centers
            .iter()
            .map(|m| GaussianComponent::isotropic(m.clone(), sigma, w))
            .collect::<Result<Vec<_>>>()?;
        // equal weights may miss 1 by an ulp or two; renormalize the last
        Self::new(comps).or_else(|_| {
            let mut comps = centers
                .iter()
                .map(|m| GaussianComponent::isotropic(m.clone(), sigma, w))
                .collect::<Result<Vec<_>>>()?;
            let rest: f64 = comps[..comps.len() - 1].iter().map(|c| c.weight).sum();
            let last = comps.pop().expect("non-empty");
            comps.push(last.with_weight(1.0 - rest)?);
            Self::new(comps)
        })
    }

    pub fn components(&self) -> &[GaussianComponent] {
        &self.components
    }

    pub fn dim(&self) -> usize {
        self.components[0].dim()
    }

    pub fn len(&self) -> usize {
        self.components.len()
    }

    pub fn is_empty(&self) -> bool {
        self.components.is_empty()
    }

    fn check(&self, x: &Tensor) -> Result<()> {
        if x.shape().len() != 2 || x.cols() != self.dim() {
            return Err(shape_err(
                "mixture point batch",
                format!("[n, {}]", self.dim()),
                format!("{:?}", x.shape()),
            ));
        }
        Ok(())
    }

    fn weighted_logs(&self, x: &[f64]) -> Vec<f64> {
        self.components
            .iter()
            .map(|c| c.weight.ln() + c.log_density(x))
            .collect()
    }

    pub fn log_pdf_point(&self, x: &[f64]) -> f64 {
        log_sum_exp(&self.weighted_logs(x))
    }

    /// Posterior component probabilities at `x`.
    pub fn responsibilities(&self, x: &[f64]) -> Vec<f64> {
        let l = self.weighted_logs(x);
        let z = log_sum_exp(&l);
        l.iter().map(|v| (v - z).exp()).collect()
    }

    pub fn score_point(&self, x: &[f64]) -> Vec<f64> {
        let r = self.responsibilities(x);
        let mut s = DVector::zeros(self.dim());
        for (c, g) in self.components.iter().zip(r) {
            if g > 0.0 {
                s += c.score_point(x) * g;
            }
        }
        s.as_slice().to_vec()
    }

    /// Exact log density for each row of `x`.
    pub fn log_pdf(&self, x: &Tensor) -> Result<Vec<f64>> {
        self.check(x)?;
        Ok(x.iter_rows().map(|r| self.log_pdf_point(r)).collect())
    }

    /// `grad_x log p(x)` for each row of `x`.
    pub fn score(&self, x: &Tensor) -> Result<Tensor> {
        self.check(x)?;
        let data = x.iter_rows().flat_map(|r| self.score_point(r)).collect();
        Tensor::new(x.shape().to_vec(), data)
    }

    /// Mixture convolved with `N(0, sigma^2 I)`.
    pub fn inflate(&self, sigma: f64) -> Result<Self> {
        Ok(Self {
            components: self
                .components
                .iter()
                .map(|c| c.inflate(sigma))
                .collect::<Result<Vec<_>>>()?,
        })
    }

    /// Draws `n` points; also returns the generating component of each.
    pub fn sample(&self, n: usize, rng: &mut Rng) -> (Tensor, Vec<usize>) {
        let d = self.dim();
        let mut data = vec![0.0; n * d];
        let mut labels = Vec::with_capacity(n);
        for row in data.chunks_mut(d) {
            let u = rng.uniform();
            let mut acc = 0.0;
            let mut k = self.components.len() - 1;
            for (i, c) in self.components.iter().enumerate() {
                acc += c.weight;
                if u < acc {
                    k = i;
                    break;
                }
            }
            self.components[k].sample_into(rng, row);
            labels.push(k);
        }
        (Tensor::new(vec![n, d], data).expect("consistent"), labels)
    }

    /// Mean and covariance of the whole mixture.
    pub fn moments(&self) -> (DVector<f64>, DMatrix<f64>) {
        let d = self.dim();
        let mut mean = DVector::zeros(d);
        for c in &self.components {
            mean += c.mean() * c.weight;
        }
        let mut cov = DMatrix::zeros(d, d);
        for c in &self.components {
            let dm = c.mean() - &mean;
            cov += (c.cov() + &dm * dm.transpose()) * c.weight;
        }
        (mean, cov)
    }

    /// Single Gaussian with the mixture's first two moments.
    pub fn moment_match(&self) -> Result<GaussianComponent> {
        let (m, c) = self.moments();
        let c = (&c + c.transpose()) * 0.5;
        GaussianComponent::new(m.as_slice().to_vec(), c, 1.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum DatasetKind {
    /// `modes` components evenly spaced on a circle of `radius`.
    Ring,
    /// `modes x modes` lattice with `radius` as spacing, centered at the origin.
    Grid,
    /// Single component `N((radius, 0), sigma^2 I)`; the reference start is `N(0, I)`.
    TwoGaussian,
    /// Explicit isotropic components `(x, y, sigma, weight)`.
    Custom(Vec<[f64; 4]>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub kind: DatasetKind,
    pub modes: usize,
    pub radius: f64,
    pub sigma: f64,
    pub samples: usize,
    pub seed: u64,
}

impl DatasetSpec {
    pub fn ring(modes: usize, radius: f64, sigma: f64) -> Self {
        Self {
            kind: DatasetKind::Ring,
            modes,
            radius,
            sigma,
            samples: 10_000,
            seed: 0,
        }
    }

    pub fn grid(n: usize, spacing: f64, sigma: f64) -> Self {
        Self {
            kind: DatasetKind::Grid,
            modes: n,
            radius: spacing,
            sigma,
            samples: 10_000,
            seed: 0,
        }
    }

    pub fn two_gaussian(offset: f64) -> Self {
        Self {
            kind: DatasetKind::TwoGaussian,
            modes: 1,
            radius: offset,
            sigma: 1.0,
            samples: 10_000,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.modes == 0 {
            return Err(Error::Invalid("dataset mode count must be at least 1".into()));
        }
        if !(self.sigma > 0.0) {
            return Err(Error::Invalid("dataset standard deviation must be positive".into()));
        }
        Ok(())
    }

    /// The exact generating law described by this spec.
    pub fn mixture(&self) -> Result<GaussianMixture> {
        self.validate()?;
        match &self.kind {
            DatasetKind::Ring => {
                let k = self.modes;
                let centers: Vec<Vec<f64>> = (0..k)
                    .map(|i| {
                        let t = 2.0 * PI * i as f64 / k as f64;
                        vec![self.radius * t.cos(), self.radius * t.sin()]
                    })
                    .collect();
                GaussianMixture::isotropic(&centers, self.sigma)
            }
            DatasetKind::Grid => {
                let n = self.modes;
                let off = (n as f64 - 1.0) / 2.0;
                let centers: Vec<Vec<f64>> = (0..n * n)
                    .map(|i| {
                        let (a, b) = (i / n, i % n);
                        vec![(a as f64 - off) * self.radius, (b as f64 - off) * self.radius]
                    })
                    .collect();
                GaussianMixture::isotropic(&centers, self.sigma)
            }
            DatasetKind::TwoGaussian => Ok(GaussianMixture::single(GaussianComponent::isotropic(
                vec![self.radius, 0.0],
                self.sigma,
                1.0,
            )?)),
            DatasetKind::Custom(parts) => GaussianMixture::new(
                parts
                    .iter()
                    .map(|p| GaussianComponent::isotropic(vec![p[0], p[1]], p[2], p[3]))
                    .collect::<Result<Vec<_>>>()?,
            ),
        }
    }
}

/// Draws `spec.samples` points and returns them with their generating mixture.
pub fn make_dataset(spec: &DatasetSpec, rng: &mut Rng) -> Result<(Tensor, GaussianMixture)> {
    let truth = spec.mixture()?;
    let (x, _) = truth.sample(spec.samples, rng);
    Ok((x, truth))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn std2() -> GaussianMixture {
        GaussianMixture::single(GaussianComponent::standard(2))
    }

    fn pt(v: &[f64]) -> Tensor {
        Tensor::matrix(1, v.len(), v.to_vec()).unwrap()
    }

    #[test]
    fn standard_normal_log_pdf_at_origin() {
        let l = std2().log_pdf(&pt(&[0.0, 0.0])).unwrap()[0];
        assert_abs_diff_eq!(l, -(2.0 * PI).ln(), epsilon = 1e-14);
        assert_abs_diff_eq!(l, -1.8379, epsilon = 1e-4);
    }

    #[test]
    fn symmetric_mixture_equal_at_both_means() {
        let m = GaussianMixture::isotropic(&[vec![-1.5, 0.0], vec![1.5, 0.0]], 0.4).unwrap();
        let l = m
            .log_pdf(&Tensor::from_rows(&[[-1.5, 0.0], [1.5, 0.0]]).unwrap())
            .unwrap();
        assert_abs_diff_eq!(l[0], l[1], epsilon = 1e-14);
        let s = m.score(&pt(&[0.0, 0.0])).unwrap();
        assert!(s.max_abs() < 1e-14);
    }

    #[test]
    fn density_integrates_to_one_on_a_grid() {
        let m = GaussianMixture::new(vec![
            GaussianComponent::new(
                vec![0.5, -0.3],
                DMatrix::from_row_slice(2, 2, &[0.6, 0.2, 0.2, 0.4]),
                0.3,
            )
            .unwrap(),
            GaussianComponent::isotropic(vec![-1.0, 1.0], 0.5, 0.7).unwrap(),
        ])
        .unwrap();
        let (lo, hi, n) = (-6.0, 6.0, 400);
        let h = (hi - lo) / n as f64;
        let mut total = 0.0;
        for i in 0..n {
            for j in 0..n {
                let x = [lo + (i as f64 + 0.5) * h, lo + (j as f64 + 0.5) * h];
                total += m.log_pdf_point(&x).exp() * h * h;
            }
        }
        assert!((total - 1.0).abs() < 1e-3, "integral {total}");
    }

    #[test]
    fn gaussian_score_is_minus_x() {
        let s = std2().score(&pt(&[0.3, -1.7])).unwrap();
        assert_eq!(s.data(), &[-0.3, 1.7]);
    }

    #[test]
    fn kl_closed_forms() {
        let p = GaussianComponent::standard(2);
        assert_eq!(kl_gaussians(&p, &p), 0.0);
        let q = GaussianComponent::isotropic(vec![1.0, 0.0], 1.0, 1.0).unwrap();
        assert_abs_diff_eq!(kl_gaussians(&q, &p), 0.5, epsilon = 1e-14);
    }

    #[test]
    fn anisotropic_kl_matches_monte_carlo() {
        let p = GaussianComponent::new(
            vec![0.3, -0.2],
            DMatrix::from_row_slice(2, 2, &[1.5, 0.4, 0.4, 0.7]),
            1.0,
        )
        .unwrap();
        let q = GaussianComponent::new(
            vec![-0.5, 0.4],
            DMatrix::from_row_slice(2, 2, &[0.8, -0.2, -0.2, 1.2]),
            1.0,
        )
        .unwrap();
        let mut rng = Rng::new(99);
        let n = 1_000_000;
        let mut x = [0.0; 2];
        let mut acc = 0.0;
        for _ in 0..n {
            p.sample_into(&mut rng, &mut x);
            acc += p.log_density(&x) - q.log_density(&x);
        }
        let mc = acc / n as f64;
        let exact = kl_gaussians(&p, &q);
        assert!((mc - exact).abs() / exact < 0.01, "mc {mc} vs {exact}");
    }

    #[test]
    fn ring_and_grid_construction() {
        let ring = DatasetSpec::ring(8, 2.0, 0.05).mixture().unwrap();
        assert_eq!(ring.len(), 8);
        assert_abs_diff_eq!(ring.components()[0].mean()[0], 2.0);
        assert_abs_diff_eq!(ring.components()[0].mean()[1], 0.0);
        let grid = DatasetSpec::grid(5, 1.0, 0.05).mixture().unwrap();
        assert_eq!(grid.len(), 25);
        assert_eq!(grid.components()[0].mean().as_slice(), &[-2.0, -2.0]);
    }

    #[test]
    fn ring_sample_mean_near_origin() {
        let mut spec = DatasetSpec::ring(8, 2.0, 0.05);
        spec.samples = 100_000;
        let (x, _) = make_dataset(&spec, &mut Rng::new(4)).unwrap();
        let m = x.sum_rows().scale(1.0 / x.rows() as f64);
        assert!(m.data().iter().all(|v| v.abs() < 0.02), "{:?}", m.data());
    }

    #[test]
    fn occupancy_matches_weights() {
        let m = GaussianMixture::new(vec![
            GaussianComponent::isotropic(vec![0.0, 0.0], 1.0, 0.2).unwrap(),
            GaussianComponent::isotropic(vec![3.0, 0.0], 1.0, 0.5).unwrap(),
            GaussianComponent::isotropic(vec![0.0, 3.0], 1.0, 0.3).unwrap(),
        ])
        .unwrap();
        let n = 100_000;
        let (_, labels) = m.sample(n, &mut Rng::new(8));
        for (k, c) in m.components().iter().enumerate() {
            let frac = labels.iter().filter(|&&l| l == k).count() as f64 / n as f64;
            let se = (c.weight() * (1.0 - c.weight()) / n as f64).sqrt();
            assert!((frac - c.weight()).abs() < 3.0 * se, "component {k}: {frac}");
        }
    }

    #[test]
    fn invalid_inputs_rejected() {
        assert!(GaussianComponent::new(
            vec![0.0, 0.0],
            DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.4, 1.0]),
            1.0
        )
        .is_err());
        assert!(GaussianComponent::new(
            vec![0.0, 0.0],
            DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]),
            1.0
        )
        .is_err());
        assert!(GaussianMixture::new(vec![]).is_err());
        assert!(GaussianMixture::new(vec![GaussianComponent::isotropic(vec![0.0], 1.0, 0.5).unwrap()]).is_err());
        assert!(DatasetSpec::ring(0, 1.0, 0.1).mixture().is_err());
        assert!(std2().log_pdf(&Tensor::zeros(&[2, 3])).is_err());
    }

    #[test]
    fn moments_of_ring() {
        let ring = DatasetSpec::ring(8, 2.0, 0.05).mixture().unwrap();
        let (m, c) = ring.moments();
        assert!(m.norm() < 1e-12);
        assert_abs_diff_eq!(c[(0, 0)], 2.0025, epsilon = 1e-12);
        assert_abs_diff_eq!(c[(0, 1)], 0.0, epsilon = 1e-12);
    }
}
