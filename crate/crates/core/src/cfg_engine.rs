//! Composite functional gradient training with annealed step weights.
//!
//! Particles drawn from the generator are pushed along
//! `eta_flow * w_m * delta_m(x) * phi0(grad_x D_m(x))` for `M` steps while the
//! discriminator is refreshed between steps; the generator is then
//! distilled onto the moved particles.

use nalgebra::{DMatrix, DVector};

use crate::distributions::{kl_gaussians, GaussianComponent, GaussianMixture};
use crate::error::{Error, Result};
use crate::metrics::GaussianFit;
use crate::models::{distill_step, logistic_disc_update, AnalyticDiscriminator, Critic, Discriminator, Generator};
use crate::numerics::{Rng, Tensor};
use crate::schedules::WeightSchedule;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DeltaMode {
    Constant(f64),
    /// `s * k f''(k)` with `k = exp(-D)` and `f = -ln`, i.e. `s * exp(D)`.
    Computed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phi0 {
    Identity,
    Sign,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CfgConfig {
    /// Flow steps per epoch (`M`).
    pub steps: usize,
    /// Discriminator updates per flow step (`U`).
    pub disc_updates: usize,
    /// Particles per epoch (`N`).
    pub examples: usize,
    pub batch: usize,
    pub eta_flow: f64,
    pub schedule: WeightSchedule,
    pub delta_mode: DeltaMode,
    pub s_scale: f64,
    pub phi0: Phi0,
    /// Optimizer passes over the collected pairs when distilling.
    pub distill_passes: usize,
    /// Upper clamp for computed `delta_m`.
    pub delta_cap: f64,
}

impl CfgConfig {
    pub fn new(schedule: WeightSchedule) -> Self {
        Self {
            steps: schedule.len(),
            disc_updates: 1,
            examples: 640,
            batch: 64,
            eta_flow: 0.25,
            schedule,
            delta_mode: DeltaMode::Constant(1.0),
            s_scale: 1.0,
            phi0: Phi0::Identity,
            distill_passes: 5,
            delta_cap: 1e6,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Invalid(m));
        if self.steps < 1 || self.disc_updates < 1 {
            return bad("CFG needs M >= 1 and U >= 1".into());
        }
        if !(self.examples >= self.batch && self.batch >= 1) {
            return bad(format!(
                "CFG needs N >= B >= 1, got N={} B={}",
                self.examples, self.batch
            ));
        }
        if self.schedule.len() != self.steps {
            return bad(format!(
                "schedule length {} differs from M={}",
                self.schedule.len(),
                self.steps
            ));
        }
        if !(self.eta_flow.is_finite() && self.eta_flow >= 0.0) || !(self.s_scale > 0.0) {
            return bad("eta_flow must be non-negative and s_scale positive".into());
        }
        Ok(())
    }
}

/// Latent codes with the points they currently map to.
#[derive(Debug, Clone, PartialEq)]
pub struct ParticleSet {
    pub z: Tensor,
    pub x: Tensor,
    /// Number of flow steps applied so far.
    pub m: usize,
}

impl ParticleSet {
    pub fn new(z: Tensor, x: Tensor) -> Result<Self> {
        if z.rows() != x.rows() {
            return Err(Error::Invalid(format!("{} latents for {} points", z.rows(), x.rows())));
        }
        Ok(Self { z, x, m: 0 })
    }

    pub fn len(&self) -> usize {
        self.x.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.rows() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub m: usize,
    pub weight: f64,
    pub mean_move_norm: f64,
    /// Moment-fit KL to the reference after the step, when available.
    pub kl: Option<f64>,
    /// Rows whose computed delta hit the cap.
    pub delta_clamped: usize,
    pub displacement: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowTrace {
    pub x0: Tensor,
    pub x_final: Tensor,
    pub planned_steps: usize,
    pub steps: Vec<StepRecord>,
    pub disc_loss: Vec<f64>,
    pub distill_loss: Option<f64>,
}

/// Per-row step multiplier.
pub fn delta_m(d_values: &[f64], mode: DeltaMode, s_scale: f64, cap: f64) -> (Vec<f64>, usize) {
    match mode {
        DeltaMode::Constant(v) => (vec![s_scale * v; d_values.len()], 0),
        DeltaMode::Computed => {
            let mut clamped = 0;
            let out = d_values
                .iter()
                .map(|&d| {
                    let v = s_scale * d.exp();
                    if v > cap || !v.is_finite() {
                        clamped += 1;
                        cap
                    } else {
                        v
                    }
                })
                .collect();
            (out, clamped)
        }
    }
}

/// One Euler move of every particle along the weighted critic gradient.
pub fn flow_step(p: &mut ParticleSet, critic: &dyn Critic, w_m: f64, cfg: &CfgConfig) -> Result<StepRecord> {
    if p.m >= cfg.steps {
        return Err(Error::Invalid(format!(
            "particles already at step {} of {}",
            p.m, cfg.steps
        )));
    }
    let (values, grads) = critic.values_and_input_grads(&p.x)?;
    let (delta, delta_clamped) = delta_m(&values, cfg.delta_mode, cfg.s_scale, cfg.delta_cap);
    let d = p.x.cols();
    let mut disp = Tensor::zeros(p.x.shape());
    let mut norm_sum = 0.0;
    for (i, &di) in delta.iter().enumerate() {
        let c = cfg.eta_flow * w_m * di;
        let g = grads.row(i);
        let row = disp.row_mut(i);
        for j in 0..d {
            let dir = match cfg.phi0 {
                Phi0::Identity => g[j],
                Phi0::Sign => {
                    if g[j] > 0.0 {
                        1.0
                    } else if g[j] < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }
                }
            };
            row[j] = c * dir;
        }
        norm_sum += row.iter().map(|v| v * v).sum::<f64>().sqrt();
    }
    if !disp.is_finite() {
        return Err(Error::NonFinite(format!("flow move at step {}", p.m + 1)));
    }
    p.x.add_assign(&disp);
    p.m += 1;
    Ok(StepRecord {
        m: p.m,
        weight: w_m,
        mean_move_norm: norm_sum / p.len().max(1) as f64,
        kl: None,
        delta_clamped,
        displacement: disp,
    })
}

fn fit_kl(x: &Tensor, reference: &GaussianComponent) -> Option<f64> {
    GaussianFit::from_points(x)
        .and_then(|f| f.to_component())
        .ok()
        .map(|c| kl_gaussians(&c, reference))
}

/// One epoch: draw `N` particles from `G`, flow them `M` steps with `U`
/// discriminator refreshes before each step, then distill `G` onto the
/// endpoints.
pub fn run_cfg_epoch(
    g: &mut Generator,
    d: &mut Discriminator,
    data: &Tensor,
    cfg: &CfgConfig,
    rng: &mut Rng,
) -> Result<FlowTrace> {
    cfg.validate()?;
    if data.rows() < cfg.batch {
        return Err(Error::Invalid(format!(
            "{} data rows for batch {}",
            data.rows(),
            cfg.batch
        )));
    }
    let reference = GaussianFit::from_points(data)?.to_component().ok();
    let z = g.latents(cfg.examples, rng);
    let x0 = g.generate(&z)?;
    let mut particles = ParticleSet::new(z, x0.clone())?;
    let mut steps = Vec::with_capacity(cfg.steps);
    let mut disc_loss = Vec::with_capacity(cfg.steps * cfg.disc_updates);
    for m in 1..=cfg.steps {
        for _ in 0..cfg.disc_updates {
            let real = data.select_rows(&rng.indices(data.rows(), cfg.batch));
            let fake = particles.x.select_rows(&rng.indices(particles.len(), cfg.batch));
            disc_loss.push(logistic_disc_update(d, &real, &fake)?);
        }
        let mut rec = flow_step(&mut particles, d, cfg.schedule.at(m), cfg)?;
        rec.kl = reference.as_ref().and_then(|r| fit_kl(&particles.x, r));
        steps.push(rec);
    }
    let mut last = 0.0;
    for _ in 0..cfg.distill_passes {
        let perm = rng.permutation(particles.len());
        for chunk in perm.chunks(cfg.batch) {
            last = distill_step(g, &particles.z.select_rows(chunk), &particles.x.select_rows(chunk))?;
        }
    }
    Ok(FlowTrace {
        x0,
        x_final: particles.x,
        planned_steps: cfg.steps,
        steps,
        disc_loss,
        distill_loss: (cfg.distill_passes > 0).then_some(last),
    })
}

/// Sum of all recorded moves, per particle.
pub fn accumulated_displacement(trace: &FlowTrace) -> Result<Tensor> {
    if trace.steps.len() != trace.planned_steps {
        return Err(Error::Invalid(format!(
            "trace holds {} of {} steps",
            trace.steps.len(),
            trace.planned_steps
        )));
    }
    let mut acc = Tensor::zeros(trace.x0.shape());
    for s in &trace.steps {
        acc.add_assign(&s.displacement);
    }
    Ok(acc)
}

/// Draws `n` points whose sample mean and (1/n) covariance equal those of
/// `g` exactly, up to rounding.
pub fn standardized_sample(g: &GaussianComponent, n: usize, rng: &mut Rng) -> Result<Tensor> {
    let d = g.dim();
    if n <= d {
        return Err(Error::Invalid(format!("need more than {d} particles")));
    }
    let raw = rng.normal_matrix(n, d);
    let fit = GaussianFit::from_points(&raw)?;
    let lc = nalgebra::Cholesky::new(fit.cov.clone())
        .ok_or_else(|| Error::LinAlg("degenerate particle covariance".into()))?
        .l();
    let lc_inv = lc
        .try_inverse()
        .ok_or_else(|| Error::LinAlg("singular particle covariance".into()))?;
    let map: DMatrix<f64> = g.chol_lower() * lc_inv;
    let mut out = Vec::with_capacity(n * d);
    for r in raw.iter_rows() {
        let v: DVector<f64> = g.mean() + &map * (DVector::from_column_slice(r) - &fit.mean);
        out.extend_from_slice(v.as_slice());
    }
    Tensor::new(vec![n, d], out)
}

/// Reference Gaussian used for divergence reporting against `target`.
fn target_reference(target: &GaussianMixture) -> Result<GaussianComponent> {
    if target.len() == 1 {
        target.components()[0].with_weight(1.0)
    } else {
        target.moment_match()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParticleFlowOutcome {
    /// KL of the moment fit to the target reference, before the first step
    /// and after every step.
    pub kl: Vec<f64>,
    pub particles: Tensor,
}

/// Flows i.i.d. draws from `start` with the analytic critic
/// `log p_target - log p_fit`, where `p_fit` is the moment-matched Gaussian
/// of the current particles, scaling step `m` by `weights[m]`.
pub fn analytic_particle_flow(
    start: &GaussianComponent,
    target: &GaussianMixture,
    weights: &[f64],
    eta_flow: f64,
    particles: usize,
    rng: &mut Rng,
) -> Result<ParticleFlowOutcome> {
    if particles <= start.dim() {
        return Err(Error::Invalid(format!("need more than {} particles", start.dim())));
    }
    let mut x = Tensor::zeros(&[particles, start.dim()]);
    for i in 0..particles {
        start.sample_into(rng, x.row_mut(i));
    }
    flow_particles(x, target, weights, eta_flow)
}

fn flow_particles(
    mut x: Tensor,
    target: &GaussianMixture,
    weights: &[f64],
    eta_flow: f64,
) -> Result<ParticleFlowOutcome> {
    let reference = target_reference(target)?;
    let particles = x.rows();
    let z = Tensor::zeros(&[particles, 0]);
    let mut kl = Vec::with_capacity(weights.len() + 1);
    let mut fit = GaussianFit::from_points(&x)?.to_component()?;
    kl.push(kl_gaussians(&fit, &reference));
    let mut cfg = CfgConfig::new(crate::schedules::constant_schedule(1, 1.0)?);
    cfg.eta_flow = eta_flow;
    for &w in weights {
        let critic = AnalyticDiscriminator::new(target.clone(), GaussianMixture::single(fit.clone()))?;
        let mut p = ParticleSet::new(z.clone(), x)?;
        flow_step(&mut p, &critic, w, &cfg)?;
        x = p.x;
        fit = GaussianFit::from_points(&x)?.to_component()?;
        kl.push(kl_gaussians(&fit, &reference));
    }
    Ok(ParticleFlowOutcome { kl, particles: x })
}

/// Unweighted flow along `score(target) - score(fit)`; returns the KL curve
/// (`steps + 1` values, starting from the initial fit). The particles start
/// with exactly the moments of `start`, so the curve carries no sampling error.
pub fn ideal_score_flow(
    start: &GaussianComponent,
    target: &GaussianMixture,
    steps: usize,
    eta_flow: f64,
    particles: usize,
    rng: &mut Rng,
) -> Result<Vec<f64>> {
    if steps < 1 {
        return Err(Error::Invalid("ideal_score_flow needs at least one step".into()));
    }
    let x = standardized_sample(start, particles, rng)?;
    Ok(flow_particles(x, target, &vec![1.0; steps], eta_flow)?.kl)
}
