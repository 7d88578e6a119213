//! Alternating (CTS), nested (NTS) and nested-annealed (NATS) GAN training
//! over the original, least-squares, Wasserstein and hinge objectives.
//!
//! Every objective is minimized. The annealed weight multiplies the raw
//! discriminator output inside the generator objective.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{disc_value_and_input_grad, Discriminator, Generator};
use crate::numerics::{collect_grads, sigmoid, softplus, NetParams, Rng, Tape, Tensor, Var};
use crate::schedules::{constant_schedule, WeightSchedule};

/// Weight-clipping bound applied after each Wasserstein discriminator step.
pub const WGAN_CLIP: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GanLoss {
    Original,
    Lsgan,
    Wgan,
    Hinge,
}

impl GanLoss {
    pub const ALL: [GanLoss; 4] = [GanLoss::Original, GanLoss::Lsgan, GanLoss::Wgan, GanLoss::Hinge];

    pub fn name(self) -> &'static str {
        match self {
            GanLoss::Original => "original",
            GanLoss::Lsgan => "lsgan",
            GanLoss::Wgan => "wgan",
            GanLoss::Hinge => "hinge",
        }
    }
}

impl std::str::FromStr for GanLoss {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        GanLoss::ALL
            .into_iter()
            .find(|l| l.name() == s)
            .ok_or_else(|| Error::Invalid(format!("unknown loss `{s}` (expected original, lsgan, wgan or hinge)")))
    }
}

impl std::fmt::Display for GanLoss {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Generator objective and its derivative with respect to each `d_out` entry.
fn gen_terms(loss: GanLoss, d_out: &[f64], w: f64) -> (f64, Vec<f64>) {
    let n = d_out.len() as f64;
    let mut value = 0.0;
    let grad = d_out
        .iter()
        .map(|&d| {
            let wd = w * d;
            match loss {
                GanLoss::Original => {
                    value += softplus(-wd);
                    -w * sigmoid(-wd) / n
                }
                GanLoss::Lsgan => {
                    value += 0.5 * (wd - 1.0) * (wd - 1.0);
                    w * (wd - 1.0) / n
                }
                GanLoss::Wgan | GanLoss::Hinge => {
                    value -= wd;
                    -w / n
                }
            }
        })
        .collect();
    (value / n, grad)
}

/// Discriminator objective with derivatives for the real and fake entries.
fn disc_terms(loss: GanLoss, d_real: &[f64], d_fake: &[f64]) -> (f64, Vec<f64>, Vec<f64>) {
    let nr = d_real.len() as f64;
    let nf = d_fake.len() as f64;
    let (mut lr, mut lf) = (0.0, 0.0);
    let gr = d_real
        .iter()
        .map(|&d| match loss {
            GanLoss::Original => {
                lr += softplus(-d);
                -sigmoid(-d) / nr
            }
            GanLoss::Lsgan => {
                lr += 0.5 * (d - 1.0) * (d - 1.0);
                (d - 1.0) / nr
            }
            GanLoss::Wgan => {
                lr -= d;
                -1.0 / nr
            }
            GanLoss::Hinge => {
                lr += (1.0 - d).max(0.0);
                if d < 1.0 {
                    -1.0 / nr
                } else {
                    0.0
                }
            }
        })
        .collect();
    let gf = d_fake
        .iter()
        .map(|&d| match loss {
            GanLoss::Original => {
                lf += softplus(d);
                sigmoid(d) / nf
            }
            GanLoss::Lsgan => {
                lf += 0.5 * d * d;
                d / nf
            }
            GanLoss::Wgan => {
                lf += d;
                1.0 / nf
            }
            GanLoss::Hinge => {
                lf += (1.0 + d).max(0.0);
                if d > -1.0 {
                    1.0 / nf
                } else {
                    0.0
                }
            }
        })
        .collect();
    (lr / nr + lf / nf, gr, gf)
}

/// Generator objective on the weighted discriminator output `w * d_out`.
pub fn gen_loss(loss: GanLoss, d_out: &[f64], w: f64) -> f64 {
    gen_terms(loss, d_out, w).0
}

pub fn disc_loss(loss: GanLoss, d_real: &[f64], d_fake: &[f64]) -> f64 {
    disc_terms(loss, d_real, d_fake).0
}

#[derive(Debug, Clone, PartialEq)]
pub struct NatsConfig {
    /// Outer iterations (`N`).
    pub outer: usize,
    /// Discriminator steps per phase (`K`).
    pub disc_steps: usize,
    /// Nesting depth (`N_d`).
    pub nested: usize,
    pub schedule: WeightSchedule,
    pub loss: GanLoss,
    pub batch: usize,
    /// Use weight 1 at every level (plain nested scheme).
    pub nts: bool,
}

impl NatsConfig {
    pub fn new(loss: GanLoss, schedule: WeightSchedule) -> Self {
        Self {
            outer: 1000,
            disc_steps: 1,
            nested: schedule.len(),
            schedule,
            loss,
            batch: 64,
            nts: false,
        }
    }

    /// Alternating configuration: one level with weight 1.
    pub fn cts(loss: GanLoss) -> Self {
        Self::new(loss, constant_schedule(1, 1.0).expect("length 1 schedule"))
    }

    pub fn validate(&self) -> Result<()> {
        if self.nested < 1 || self.disc_steps < 1 || self.batch < 1 {
            return Err(Error::Invalid("NATS needs N_d >= 1, K >= 1 and B >= 1".into()));
        }
        if self.schedule.len() != self.nested {
            return Err(Error::Invalid(format!(
                "schedule length {} differs from N_d={}",
                self.schedule.len(),
                self.nested
            )));
        }
        Ok(())
    }

    fn weight(&self, j: usize) -> f64 {
        if self.nts {
            1.0
        } else {
            self.schedule.at(j)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Disc,
    Gen,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub phase: Phase,
    /// 1-based outer iteration.
    pub outer: usize,
    /// 1-based nesting level.
    pub nested: usize,
    /// 1-based step within the phase.
    pub sub_step: usize,
    pub weight: f64,
    pub loss: f64,
}

/// Append-only record of every optimizer step taken.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ScheduleTrace {
    entries: Vec<TraceEntry>,
}

impl ScheduleTrace {
    pub fn entries(&self) -> &[TraceEntry] {
        &self.entries
    }

    fn push(&mut self, e: TraceEntry) {
        self.entries.push(e);
    }

    /// Entries of one outer iteration.
    pub fn outer(&self, i: usize) -> impl Iterator<Item = &TraceEntry> {
        self.entries.iter().filter(move |e| e.outer == i)
    }

    /// Compact phase string such as `"DGDG"`.
    pub fn phases(&self) -> String {
        self.entries
            .iter()
            .map(|e| match e.phase {
                Phase::Disc => 'D',
                Phase::Gen => 'G',
            })
            .collect()
    }

    /// Per nesting level: (discriminator phases, generator steps) in outer iteration `i`.
    pub fn level_counts(&self, i: usize) -> Vec<(usize, usize)> {
        let levels = self.outer(i).map(|e| e.nested).max().unwrap_or(0);
        let mut out = vec![(0, 0); levels];
        for e in self.outer(i) {
            match e.phase {
                Phase::Disc if e.sub_step == 1 => out[e.nested - 1].0 += 1,
                Phase::Disc => {}
                Phase::Gen => out[e.nested - 1].1 += 1,
            }
        }
        out
    }
}

/// One discriminator step; returns the pre-step loss.
pub fn disc_step(d: &mut Discriminator, loss: GanLoss, real: &Tensor, fake: &Tensor) -> Result<f64> {
    if real.rows() == 0 || fake.rows() == 0 {
        return Err(Error::Invalid("discriminator step needs non-empty batches".into()));
    }
    let mut tape = Tape::new();
    let params = d.net.bind(&mut tape);
    let xr = tape.leaf(real.clone());
    let xf = tape.leaf(fake.clone());
    let dr = d.net.forward_with(&mut tape, &params, xr)?;
    let df = d.net.forward_with(&mut tape, &params, xf)?;
    let (value, gr, gf) = disc_terms(loss, tape.value(dr).data(), tape.value(df).data());
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("{loss} discriminator loss")));
    }
    let adj_r = tape.backward(dr, &Tensor::new(vec![gr.len(), 1], gr)?)?;
    let adj_f = tape.backward(df, &Tensor::new(vec![gf.len(), 1], gf)?)?;
    let mut grads = collect_grads(&adj_r, &params);
    for (g, h) in grads.iter_mut().zip(collect_grads(&adj_f, &params)) {
        g.add_assign(&h);
    }
    d.apply_grads(&grads)?;
    if loss == GanLoss::Wgan {
        d.net.clip(WGAN_CLIP);
    }
    Ok(value)
}

struct GenPass {
    tape: Tape,
    g_params: Vec<Var>,
    x: Var,
    d_out: Var,
}

fn gen_forward(g: &Generator, d: &NetParams, z: &Tensor) -> Result<GenPass> {
    let mut tape = Tape::new();
    let g_params = g.net.bind(&mut tape);
    let d_params = d.bind(&mut tape);
    let zv = tape.leaf(z.clone());
    let x = g.net.forward_with(&mut tape, &g_params, zv)?;
    let d_out = d.forward_with(&mut tape, &d_params, x)?;
    Ok(GenPass {
        tape,
        g_params,
        x,
        d_out,
    })
}

/// Generator parameter gradients of the weighted objective plus the loss value.
pub fn gen_gradients(
    g: &Generator,
    d: &Discriminator,
    loss: GanLoss,
    z: &Tensor,
    w: f64,
) -> Result<(f64, Vec<Tensor>)> {
    let pass = gen_forward(g, &d.net, z)?;
    let (value, seed) = gen_terms(loss, pass.tape.value(pass.d_out).data(), w);
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("{loss} generator loss")));
    }
    let adj = pass
        .tape
        .backward(pass.d_out, &Tensor::new(vec![seed.len(), 1], seed)?)?;
    Ok((value, collect_grads(&adj, &pass.g_params)))
}

/// One generator step at weight `w`; returns the pre-step loss.
pub fn gen_step(g: &mut Generator, d: &Discriminator, loss: GanLoss, z: &Tensor, w: f64) -> Result<f64> {
    if !(w > 0.0) {
        return Err(Error::Invalid(format!("generator weight must be positive, got {w}")));
    }
    let (value, grads) = gen_gradients(g, d, loss, z, w)?;
    g.apply_grads(&grads)?;
    Ok(value)
}

/// Nested training; the hook runs after every outer iteration with its
/// 1-based index.
pub fn run_nats_with(
    g: &mut Generator,
    d: &mut Discriminator,
    data: &Tensor,
    cfg: &NatsConfig,
    rng: &mut Rng,
    mut hook: impl FnMut(usize, &Generator, &Discriminator) -> Result<()>,
) -> Result<ScheduleTrace> {
    cfg.validate()?;
    if data.rows() == 0 {
        return Err(Error::Invalid("empty training data".into()));
    }
    let mut trace = ScheduleTrace::default();
    for i in 1..=cfg.outer {
        for j in 1..=cfg.nested {
            for k in 1..=cfg.disc_steps {
                let real = data.select_rows(&rng.indices(data.rows(), cfg.batch.min(data.rows())));
                let fake = g.sample(cfg.batch, rng)?;
                let loss = disc_step(d, cfg.loss, &real, &fake)?;
                trace.push(TraceEntry {
                    phase: Phase::Disc,
                    outer: i,
                    nested: j,
                    sub_step: k,
                    weight: 1.0,
                    loss,
                });
            }
            let w = cfg.weight(j);
            for s in 1..=j {
                let z = g.latents(cfg.batch, rng);
                let loss = gen_step(g, d, cfg.loss, &z, w)?;
                trace.push(TraceEntry {
                    phase: Phase::Gen,
                    outer: i,
                    nested: j,
                    sub_step: s,
                    weight: w,
                    loss,
                });
            }
        }
        hook(i, g, d)?;
    }
    Ok(trace)
}

pub fn run_nats(
    g: &mut Generator,
    d: &mut Discriminator,
    data: &Tensor,
    cfg: &NatsConfig,
    rng: &mut Rng,
) -> Result<ScheduleTrace> {
    run_nats_with(g, d, data, cfg, rng, |_, _, _| Ok(()))
}

/// Alternating scheme: `K` discriminator steps then one generator step at
/// weight 1. The nesting fields of `cfg` are ignored.
pub fn run_cts_with(
    g: &mut Generator,
    d: &mut Discriminator,
    data: &Tensor,
    cfg: &NatsConfig,
    rng: &mut Rng,
    hook: impl FnMut(usize, &Generator, &Discriminator) -> Result<()>,
) -> Result<ScheduleTrace> {
    let flat = NatsConfig {
        nested: 1,
        schedule: constant_schedule(1, 1.0)?,
        nts: false,
        ..cfg.clone()
    };
    run_nats_with(g, d, data, &flat, rng, hook)
}

pub fn run_cts(
    g: &mut Generator,
    d: &mut Discriminator,
    data: &Tensor,
    cfg: &NatsConfig,
    rng: &mut Rng,
) -> Result<ScheduleTrace> {
    run_cts_with(g, d, data, cfg, rng, |_, _, _| Ok(()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct FieldCheckReport {
    /// `grad[-w D(G(z))]` against `w * grad[-D(G(z))]`.
    pub param_rel_error: f64,
    /// Sample-space direction of the weighted objective against `w * grad_x D`.
    pub sample_rel_error: f64,
    /// `J_G^T (w grad_x D)` against the weighted parameter gradient.
    pub pullback_rel_error: f64,
    /// Per-sample direction `w * grad_x D(G(z))`.
    pub direction: Tensor,
}

impl FieldCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.param_rel_error
            .max(self.sample_rel_error)
            .max(self.pullback_rel_error)
    }
}

fn rel_diff(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let den = a
        .iter()
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt()
        .max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    if den == 0.0 {
        num
    } else {
        num / den
    }
}

fn flat(ts: &[Tensor]) -> Vec<f64> {
    ts.iter().flat_map(|t| t.data().iter().copied()).collect()
}

/// Checks that the weighted Wasserstein generator field is `w` times the
/// unweighted one, in parameter space and in sample space.
pub fn nats_gradient_field_check(g: &Generator, d: &Discriminator, z: &Tensor, w: f64) -> Result<FieldCheckReport> {
    let n = z.rows() as f64;
    let (_, weighted) = gen_gradients(g, d, GanLoss::Wgan, z, w)?;
    let (_, unit) = gen_gradients(g, d, GanLoss::Wgan, z, 1.0)?;
    let scaled: Vec<f64> = flat(&unit).iter().map(|v| w * v).collect();
    let param_rel_error = rel_diff(&flat(&weighted), &scaled);

    // Sample-space field of the weighted objective: -(n) * dL/dx.
    let pass = gen_forward(g, &d.net, z)?;
    let (_, seed) = gen_terms(GanLoss::Wgan, pass.tape.value(pass.d_out).data(), w);
    let adj = pass
        .tape
        .backward(pass.d_out, &Tensor::new(vec![seed.len(), 1], seed)?)?;
    let induced = adj.wrt(pass.x).scale(-n);
    let x = pass.tape.value(pass.x).clone();
    let (_, grad_x) = disc_value_and_input_grad(d, &x)?;
    let direction = grad_x.scale(w);
    let sample_rel_error = rel_diff(induced.data(), direction.data());

    // Pull the direction back through G alone.
    let mut tape = Tape::new();
    let gp = g.net.bind(&mut tape);
    let zv = tape.leaf(z.clone());
    let out = g.net.forward_with(&mut tape, &gp, zv)?;
    let pulled = collect_grads(&tape.backward(out, &direction.scale(-1.0 / n))?, &gp);
    let pullback_rel_error = rel_diff(&flat(&pulled), &flat(&weighted));

    Ok(FieldCheckReport {
        param_rel_error,
        sample_rel_error,
        pullback_rel_error,
        direction,
    })
}
