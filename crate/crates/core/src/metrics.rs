//! Desk-scale evaluation: Fréchet distance between Gaussian fits, mode
//! coverage, median pairwise distances and score-difference fields.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::distributions::{GaussianComponent, GaussianMixture};
use crate::error::{shape_err, Error, Result};
use crate::models::Critic;
use crate::numerics::{Rng, Tensor};

/// Eigenvalue floor applied to fitted covariances.
pub const EIGEN_CLAMP: f64 = 1e-10;

/// Moment-matched Gaussian.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianFit {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

fn clamp_psd(c: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (c + c.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let vals = eig.eigenvalues.map(|v| v.max(EIGEN_CLAMP));
    let m = &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose();
    (&m + m.transpose()) * 0.5
}

impl GaussianFit {
    /// Sample mean and (1/n) covariance of the rows of `x`.
    pub fn from_points(x: &Tensor) -> Result<Self> {
        let (n, d) = (x.rows(), x.cols());
        if n == 0 || x.shape().len() != 2 {
            return Err(Error::Invalid("Gaussian fit needs at least one point".into()));
        }
        let mut mean = DVector::zeros(d);
        for r in x.iter_rows() {
            mean += DVector::from_column_slice(r);
        }
        mean /= n as f64;
        let mut cov = DMatrix::zeros(d, d);
        for r in x.iter_rows() {
            let dv = DVector::from_column_slice(r) - &mean;
            cov += &dv * dv.transpose();
        }
        cov /= n as f64;
        Ok(Self {
            mean,
            cov: clamp_psd(&cov),
        })
    }

    pub fn from_mixture(m: &GaussianMixture) -> Self {
        let (mean, cov) = m.moments();
        Self {
            mean,
            cov: clamp_psd(&cov),
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn to_component(&self) -> Result<GaussianComponent> {
        GaussianComponent::new(self.mean.as_slice().to_vec(), self.cov.clone(), 1.0)
    }
}

fn psd_sqrt(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let scale = eig.eigenvalues.iter().fold(1.0f64, |a, v| a.max(v.abs()));
    if eig.eigenvalues.iter().any(|&v| v < -1e-9 * scale) {
        return Err(Error::LinAlg("matrix is not positive semi-definite".into()));
    }
    let vals = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose())
}

/// Squared 2-Wasserstein distance between two Gaussian fits.
pub fn frechet_gaussian(a: &GaussianFit, b: &GaussianFit) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(shape_err("frechet_gaussian dimension", a.dim(), b.dim()));
    }
    let ra = psd_sqrt(&a.cov)?;
    let inner = &ra * &b.cov * &ra;
    let cross = psd_sqrt(&inner)?;
    let d = (&a.mean - &b.mean).norm_squared() + a.cov.trace() + b.cov.trace() - 2.0 * cross.trace();
    Ok(d.max(0.0))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModeReport {
    pub total_modes: usize,
    pub covered: usize,
    /// Fraction of samples within the quality radius of any mode.
    pub quality: f64,
    /// Per-mode fraction of samples assigned to and within radius of that mode.
    pub occupancy: Vec<f64>,
}

/// Nearest-mode assignment of every sample with coverage and quality counts.
pub fn mode_report(samples: &Tensor, truth: &GaussianMixture, quality_radius_sigmas: f64) -> Result<ModeReport> {
    if !(quality_radius_sigmas > 0.0) {
        return Err(Error::Invalid("quality radius multiplier must be positive".into()));
    }
    if samples.cols() != truth.dim() {
        return Err(shape_err("mode_report samples", truth.dim(), samples.cols()));
    }
    let comps = truth.components();
    let radii: Vec<f64> = comps
        .iter()
        .map(|c| quality_radius_sigmas * (c.cov().trace() / c.dim() as f64).sqrt())
        .collect();
    let mut inside = vec![0usize; comps.len()];
    for r in samples.iter_rows() {
        let (k, dist) = comps
            .iter()
            .enumerate()
            .map(|(k, c)| {
                let d2: f64 = r.iter().zip(c.mean().iter()).map(|(a, b)| (a - b) * (a - b)).sum();
                (k, d2.sqrt())
            })
            .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)))
            .expect("non-empty mixture");
        if dist <= radii[k] {
            inside[k] += 1;
        }
    }
    let n = samples.rows();
    let need = 20usize.max((0.01 * n as f64).ceil() as usize);
    let covered = inside.iter().filter(|&&c| c >= need).count();
    let nf = n.max(1) as f64;
    Ok(ModeReport {
        total_modes: comps.len(),
        covered,
        quality: inside.iter().sum::<usize>() as f64 / nf,
        occupancy: inside.iter().map(|&c| c as f64 / nf).collect(),
    })
}

/// Pair budget above which distances are subsampled.
pub const MAX_PAIRS: usize = 1_000_000;

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Median Euclidean distance within `a`, or across `a` and `b`.
pub fn median_pairwise(a: &Tensor, b: Option<&Tensor>, rng: &mut Rng) -> Result<f64> {
    let mut d = Vec::new();
    match b {
        None => {
            let n = a.rows();
            if n < 2 {
                return Err(Error::Invalid("median_pairwise needs at least two points".into()));
            }
            let pairs = n * (n - 1) / 2;
            if pairs <= MAX_PAIRS {
                for i in 0..n {
                    for j in i + 1..n {
                        d.push(dist(a.row(i), a.row(j)));
                    }
                }
            } else {
                for _ in 0..MAX_PAIRS {
                    let i = rng.below(n);
                    let mut j = rng.below(n - 1);
                    if j >= i {
                        j += 1;
                    }
                    d.push(dist(a.row(i), a.row(j)));
                }
            }
        }
        Some(b) => {
            let (n, m) = (a.rows(), b.rows());
            if n == 0 || m == 0 {
                return Err(Error::Invalid("median_pairwise needs non-empty sets".into()));
            }
            if b.cols() != a.cols() {
                return Err(shape_err("median_pairwise dimension", a.cols(), b.cols()));
            }
            if n * m <= MAX_PAIRS {
                for i in 0..n {
                    for j in 0..m {
                        d.push(dist(a.row(i), b.row(j)));
                    }
                }
            } else {
                for _ in 0..MAX_PAIRS {
                    d.push(dist(a.row(rng.below(n)), b.row(rng.below(m))));
                }
            }
        }
    }
    Ok(median(d))
}

/// Regular 2-D evaluation grid, traversed row-major (y outer, x inner).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    pub nx: usize,
    pub ny: usize,
    pub xmin: f64,
    pub xmax: f64,
    pub ymin: f64,
    pub ymax: f64,
}

impl GridSpec {
    pub fn new(nx: usize, ny: usize, (xmin, xmax): (f64, f64), (ymin, ymax): (f64, f64)) -> Self {
        Self {
            nx,
            ny,
            xmin,
            xmax,
            ymin,
            ymax,
        }
    }

    fn coord(lo: f64, hi: f64, n: usize, i: usize) -> f64 {
        if n <= 1 {
            lo
        } else {
            lo + (hi - lo) * i as f64 / (n - 1) as f64
        }
    }

    pub fn points(&self) -> Tensor {
        let mut data = Vec::with_capacity(2 * self.nx * self.ny);
        for j in 0..self.ny {
            let y = Self::coord(self.ymin, self.ymax, self.ny, j);
            for i in 0..self.nx {
                data.push(Self::coord(self.xmin, self.xmax, self.nx, i));
                data.push(y);
            }
        }
        Tensor::new(vec![self.nx * self.ny, 2], data).expect("consistent")
    }
}

/// Gradient field of a critic next to the reference score difference.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreField {
    pub grid: GridSpec,
    pub points: Tensor,
    /// `grad_x D(x)` per node.
    pub grads: Tensor,
    /// `score(truth, x) - score(fit, x)` per node.
    pub reference: Tensor,
    pub mean_gap: f64,
}

/// Evaluates `critic`'s input gradient against `score(truth) - score(fit)`
/// over `grid` and reports the mean L2 gap.
pub fn score_diff_field(
    critic: &dyn Critic,
    truth: &GaussianMixture,
    fit: &GaussianMixture,
    grid: GridSpec,
) -> Result<ScoreField> {
    let points = grid.points();
    let (_, grads) = critic.values_and_input_grads(&points)?;
    let reference = truth.score(&points)?.zip_map(&fit.score(&points)?, |a, b| a - b);
    let n = points.rows().max(1) as f64;
    let mean_gap = grads
        .iter_rows()
        .zip(reference.iter_rows())
        .map(|(g, r)| dist(g, r))
        .sum::<f64>()
        / n;
    Ok(ScoreField {
        grid,
        points,
        grads,
        reference,
        mean_gap,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distributions::DatasetSpec;
    use crate::models::{AnalyticDiscriminator, Discriminator};
    use crate::numerics::Rng;
    use proptest::prelude::{prop_assert, prop_assert_eq, proptest, Strategy};

    fn fit(mean: [f64; 2], cov: [f64; 4]) -> GaussianFit {
        GaussianFit {
            mean: DVector::from_column_slice(&mean),
            cov: DMatrix::from_row_slice(2, 2, &cov),
        }
    }

    #[test]
    fn frechet_examples() {
        let a = fit([0.0, 0.0], [1.0, 0.0, 0.0, 1.0]);
        assert!(frechet_gaussian(&a, &a).unwrap().abs() < 1e-12);
        let b = fit([3.0, 4.0], [1.0, 0.0, 0.0, 1.0]);
        assert!((frechet_gaussian(&a, &b).unwrap() - 25.0).abs() < 1e-12);
        // 1-D closed form (s1 - s2)^2 embedded on the diagonal
        let c = fit([0.0, 0.0], [4.0, 0.0, 0.0, 1.0]);
        assert!((frechet_gaussian(&a, &c).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn fit_matches_sample_moments() {
        let x = Tensor::from_rows(&[[0.0, 0.0], [2.0, 0.0], [0.0, 2.0], [2.0, 2.0]]).unwrap();
        let f = GaussianFit::from_points(&x).unwrap();
        assert_eq!(f.mean.as_slice(), &[1.0, 1.0]);
        assert!((f.cov[(0, 0)] - 1.0).abs() < 1e-12 && f.cov[(0, 1)].abs() < 1e-12);
    }

    #[test]
    fn mode_report_examples() {
        let ring = DatasetSpec::ring(8, 2.0, 0.05).mixture().unwrap();
        let means: Vec<Vec<f64>> = ring.components().iter().map(|c| c.mean().as_slice().to_vec()).collect();
        let mut rows = Vec::new();
        for _ in 0..30 {
            rows.extend(means.iter().cloned());
        }
        let at_means = Tensor::from_rows(&rows).unwrap();
        let r = mode_report(&at_means, &ring, 3.0).unwrap();
        assert_eq!((r.covered, r.total_modes), (8, 8));
        assert_eq!(r.quality, 1.0);

        let collapsed = Tensor::from_rows(&vec![means[3].clone(); 240]).unwrap();
        assert_eq!(mode_report(&collapsed, &ring, 3.0).unwrap().covered, 1);

        let (truth_samples, _) = ring.sample(10_000, &mut Rng::new(1));
        let r = mode_report(&truth_samples, &ring, 3.0).unwrap();
        assert!(r.quality >= 0.98, "quality {}", r.quality);
        assert_eq!(r.covered, 8);
    }

    #[test]
    fn median_pairwise_examples() {
        let mut rng = Rng::new(0);
        let x = Tensor::from_rows(&[[0.0], [1.0], [3.0]]).unwrap();
        assert_eq!(median_pairwise(&x, None, &mut rng).unwrap(), 2.0);
        let z = Tensor::zeros(&[5, 2]);
        assert_eq!(median_pairwise(&z, Some(&z), &mut rng).unwrap(), 0.0);
        assert!(median_pairwise(&Tensor::zeros(&[1, 2]), None, &mut rng).is_err());
    }

    #[test]
    fn analytic_critic_has_zero_gap() {
        let truth = GaussianMixture::isotropic(&[vec![1.0, 0.0], vec![-1.0, 1.0]], 0.6).unwrap();
        let fit = GaussianMixture::single(GaussianComponent::standard(2));
        let d = AnalyticDiscriminator::new(truth.clone(), fit.clone()).unwrap();
        let f = score_diff_field(&d, &truth, &fit, GridSpec::new(21, 21, (-2.0, 3.0), (-2.0, 2.0))).unwrap();
        assert!(f.mean_gap <= 1e-12);
        assert_eq!(f.points.rows(), 441);
        assert_eq!(f.points.row(1), &[-1.75, -2.0]);
    }

    #[test]
    fn random_critic_reports_gap() {
        let truth = GaussianMixture::single(GaussianComponent::isotropic(vec![1.0, 0.0], 1.0, 1.0).unwrap());
        let fit = GaussianMixture::single(GaussianComponent::standard(2));
        let d = Discriminator::new(&[2, 8, 1], 1e-3, &mut Rng::new(3));
        let f = score_diff_field(&d, &truth, &fit, GridSpec::new(5, 5, (-1.0, 1.0), (-1.0, 1.0))).unwrap();
        assert!(f.mean_gap.is_finite() && f.mean_gap > 0.0);
    }

    fn arb_fit() -> impl Strategy<Value = GaussianFit> {
        (-3.0f64..3.0, -3.0f64..3.0, 0.1f64..3.0, 0.1f64..3.0, -0.9f64..0.9).prop_map(|(m0, m1, s0, s1, rho)| {
            let c = rho * s0 * s1;
            fit([m0, m1], [s0 * s0, c, c, s1 * s1])
        })
    }

    proptest! {
        #[test]
        fn frechet_symmetric_nonnegative(a in arb_fit(), b in arb_fit()) {
            let ab = frechet_gaussian(&a, &b).unwrap();
            let ba = frechet_gaussian(&b, &a).unwrap();
            prop_assert!(ab >= 0.0);
            prop_assert!((ab - ba).abs() <= 1e-8 * (1.0 + ab));
            prop_assert!(frechet_gaussian(&a, &a).unwrap() < 1e-8);
        }

        #[test]
        fn coverage_permutation_invariant(seed in 0u64..1000) {
            let ring = DatasetSpec::ring(8, 2.0, 0.05).mixture().unwrap();
            let mut rng = Rng::new(seed);
            let (x, _) = ring.sample(400, &mut rng);
            let perm = rng.permutation(400);
            let a = mode_report(&x, &ring, 3.0).unwrap();
            let b = mode_report(&x.select_rows(&perm), &ring, 3.0).unwrap();
            prop_assert_eq!(a.covered, b.covered);
        }

        #[test]
        fn median_rigid_invariant(seed in 0u64..1000, angle in 0.0f64..6.3, tx in -5.0f64..5.0, ty in -5.0f64..5.0) {
            let mut rng = Rng::new(seed);
            let a = rng.normal_matrix(40, 2);
            let b = rng.normal_matrix(30, 2);
            let (c, s) = (angle.cos(), angle.sin());
            let mv = |t: &Tensor| {
                let rows: Vec<[f64; 2]> = t.iter_rows().map(|r| [c * r[0] - s * r[1] + tx, s * r[0] + c * r[1] + ty]).collect();
                Tensor::from_rows(&rows).unwrap()
            };
            let d1 = median_pairwise(&a, Some(&b), &mut rng).unwrap();
            let d2 = median_pairwise(&mv(&a), Some(&mv(&b)), &mut rng).unwrap();
            prop_assert!((d1 - d2).abs() < 1e-9);
            let w1 = median_pairwise(&a, None, &mut rng).unwrap();
            let w2 = median_pairwise(&mv(&a), None, &mut rng).unwrap();
            prop_assert!((w1 - w2).abs() < 1e-9);
        }
    }
}
