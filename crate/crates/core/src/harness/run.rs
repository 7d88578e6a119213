//! Experiment orchestration: one engine run per seed, metrics rows, model
//! snapshots, field dumps and a manifest written last.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::cfg_engine::{analytic_particle_flow, run_cfg_epoch};
use crate::distributions::{kl_gaussians, make_dataset, GaussianComponent, GaussianMixture};
use crate::error::{Error, Result};
use crate::gan_engine::{run_cts_with, run_nats_with, GanLoss};
use crate::metrics::{frechet_gaussian, mode_report, score_diff_field, GaussianFit, GridSpec};
use crate::models::{logistic_disc_update, AnalyticDiscriminator, Critic, Discriminator, Generator};
use crate::numerics::{grad_check_batch, random_case, NetParams, OptimizerState, Rng, Tensor};
use crate::parallel::Execution;
use crate::samplers::{annealed_langevin, langevin, smoothed_oracles, ChainConfig, ScoreOracle};
use crate::schedules::{alpha_ladder, select_gamma, ScheduleKind, SigmaLadder};

use super::artifacts::{blob_hash, field_dump, Manifest, ManifestEntry};
use super::config::{emit_config, num, EngineSection, RunConfig, Scheme};
use super::record::{write_records, MetricsRecord};

/// Environment variable capping how many seeds run at once.
pub const THREADS_ENV: &str = "CFG_ANNEAL_THREADS";
pub const METRICS_FILE: &str = "metrics.csv";
pub const MANIFEST_FILE: &str = "manifest.json";

/// Generator weights plus its latent width, as stored on disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorSnapshot {
    pub latent_dim: usize,
    pub net: NetParams,
}

impl GeneratorSnapshot {
    pub fn into_generator(self) -> Result<Generator> {
        if self.net.input_width() != self.latent_dim {
            return Err(Error::Invalid(
                "snapshot latent width disagrees with its network".into(),
            ));
        }
        let opt = OptimizerState::adam(1e-3, &self.net);
        Ok(Generator::from_net(self.net, opt))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    pub dir: PathBuf,
    pub rows: Vec<MetricsRecord>,
    /// Seeds whose engine failed, with the error text.
    pub aborted: Vec<(u64, String)>,
    pub manifest: Manifest,
}

impl RunOutcome {
    /// 0 when every seed finished, 2 otherwise.
    pub fn exit_code(&self) -> i32 {
        if self.aborted.is_empty() {
            0
        } else {
            2
        }
    }
}

#[derive(Default)]
struct SeedOutput {
    rows: Vec<MetricsRecord>,
    files: Vec<(String, String)>,
}

/// Everything an evaluation needs about the target.
struct Target {
    mixture: GaussianMixture,
    fit: GaussianFit,
    reference: GaussianComponent,
}

impl Target {
    fn new(mixture: GaussianMixture) -> Result<Self> {
        let reference = if mixture.len() == 1 {
            mixture.components()[0].with_weight(1.0)?
        } else {
            mixture.moment_match()?
        };
        Ok(Self {
            fit: GaussianFit::from_mixture(&mixture),
            mixture,
            reference,
        })
    }
}

struct Scores {
    frechet: f64,
    kl: f64,
    covered: usize,
    quality: f64,
}

fn score_samples(x: &Tensor, target: &Target, radius: f64) -> Result<Scores> {
    let fit = GaussianFit::from_points(x)?;
    let report = mode_report(x, &target.mixture, radius)?;
    Ok(Scores {
        frechet: frechet_gaussian(&fit, &target.fit)?,
        kl: kl_gaussians(&fit.to_component()?, &target.reference),
        covered: report.covered,
        quality: report.quality,
    })
}

fn points_csv(x: &Tensor) -> String {
    let mut s = String::from("x,y\n");
    for r in x.iter_rows() {
        s.push_str(&r.iter().map(|v| num(*v)).collect::<Vec<_>>().join(","));
        s.push('\n');
    }
    s
}

fn json<T: Serialize>(v: &T) -> Result<String> {
    Ok(serde_json::to_string_pretty(v)? + "\n")
}

fn is_eval_point(i: usize, last: usize, every: usize) -> bool {
    i.is_multiple_of(every) || i == last
}

struct Ctx<'a> {
    cfg: &'a RunConfig,
    seed: u64,
    start: Instant,
}

impl Ctx<'_> {
    fn row(&self, iteration: usize) -> MetricsRecord {
        MetricsRecord {
            run_id: self.cfg.run.id.clone(),
            seed: self.seed,
            iteration,
            wall_ms: self.cfg.run.timing.then(|| self.start.elapsed().as_millis() as u64),
            ..Default::default()
        }
    }

    fn path(&self, name: &str) -> String {
        format!("seed-{}/{name}", self.seed)
    }
}

fn fill(row: &mut MetricsRecord, s: &Scores) {
    row.frechet = Some(s.frechet);
    row.kl = Some(s.kl);
    row.modes_covered = Some(s.covered);
    row.quality = Some(s.quality);
}

fn schedule_name(kind: ScheduleKind) -> &'static str {
    match kind {
        ScheduleKind::AnnealedGeometric => "annealed",
        ScheduleKind::Constant => "constant",
        ScheduleKind::ReverseGeometric => "reverse",
    }
}

/// Critic gradient field against the score gap to a Gaussian fit of `x`.
fn critic_field(critic: &dyn Critic, target: &Target, x: &Tensor, grid: GridSpec) -> Result<(f64, String)> {
    let fit = GaussianMixture::single(GaussianFit::from_points(x)?.to_component()?);
    let field = score_diff_field(critic, &target.mixture, &fit, grid)?;
    Ok((field.mean_gap, field_dump(&field.grid, &field.points, &field.grads)?))
}

fn run_seed(cfg: &RunConfig, seed: u64, out: &mut SeedOutput) -> Result<()> {
    let ctx = Ctx {
        cfg,
        seed,
        start: Instant::now(),
    };
    let mut rng = Rng::new(seed);
    let radius = cfg.run.quality_radius;
    let every = cfg.run.eval_every;
    match &cfg.engine {
        EngineSection::Flow(f) => {
            let target = Target::new(cfg.data.dataset().mixture()?)?;
            let start = GaussianComponent::isotropic(f.start_mean.clone(), f.start_sigma, 1.0)?;
            let sched = f.schedule.build(f.steps)?;
            let flow = analytic_particle_flow(&start, &target.mixture, sched.weights(), f.eta, f.particles, &mut rng)?;
            for (m, kl) in flow.kl.iter().enumerate() {
                if m == 0 || is_eval_point(m, f.steps, every) {
                    let mut row = ctx.row(m);
                    row.scheme = schedule_name(sched.kind()).into();
                    row.m = Some(f.steps);
                    row.kl = Some(*kl);
                    if m == f.steps {
                        let s = score_samples(&flow.particles, &target, radius)?;
                        row.frechet = Some(s.frechet);
                        row.modes_covered = Some(s.covered);
                        row.quality = Some(s.quality);
                    }
                    out.rows.push(row);
                }
            }
            out.files.push((ctx.path("particles.csv"), points_csv(&flow.particles)));
        }
        EngineSection::TrainCfg(c) => {
            let engine = c.engine()?;
            let (data, truth) = make_dataset(&cfg.data.dataset(), &mut Rng::new(cfg.data.seed))?;
            let target = Target::new(truth)?;
            let mut g = Generator::new(&cfg.model.gen_widths, cfg.model.lr_g, &mut rng);
            let mut d = Discriminator::new(&cfg.model.disc_widths, cfg.model.lr_d, &mut rng);
            let mut last_field = None;
            for epoch in 1..=c.epochs {
                run_cfg_epoch(&mut g, &mut d, &data, &engine, &mut rng)?;
                if is_eval_point(epoch, c.epochs, every) {
                    let x = g.sample(cfg.run.eval_samples, &mut rng.split("eval", epoch as u64))?;
                    let mut row = ctx.row(epoch);
                    row.scheme = format!("cfg-{}", schedule_name(engine.schedule.kind()));
                    row.m = Some(engine.steps);
                    fill(&mut row, &score_samples(&x, &target, radius)?);
                    let (gap, dump) = critic_field(&d, &target, &x, cfg.grid)?;
                    row.score_gap = Some(gap);
                    last_field = Some(dump);
                    out.rows.push(row);
                }
            }
            out.files.push((
                ctx.path("generator.json"),
                json(&GeneratorSnapshot {
                    latent_dim: g.latent_dim,
                    net: g.net.clone(),
                })?,
            ));
            out.files.push((ctx.path("discriminator.json"), json(&d.net)?));
            if let Some(f) = last_field {
                out.files.push((ctx.path("field.txt"), f));
            }
        }
        EngineSection::TrainGan(n) => {
            let engine = n.engine()?;
            let (data, truth) = make_dataset(&cfg.data.dataset(), &mut Rng::new(cfg.data.seed))?;
            let target = Target::new(truth)?;
            let mut g = Generator::new(&cfg.model.gen_widths, cfg.model.lr_g, &mut rng);
            let mut d = Discriminator::new(&cfg.model.disc_widths, cfg.model.lr_d, &mut rng);
            let mut last_field = None;
            let mut hook = |i: usize, g: &Generator, d: &Discriminator| -> Result<()> {
                if !is_eval_point(i, n.outer, every) {
                    return Ok(());
                }
                let x = g.sample(cfg.run.eval_samples, &mut Rng::new(seed).split("eval", i as u64))?;
                let mut row = ctx.row(i);
                row.scheme = n.scheme.name().into();
                row.loss = n.loss.name().into();
                row.n_d = Some(n.effective_n_d());
                fill(&mut row, &score_samples(&x, &target, radius)?);
                let (gap, dump) = critic_field(d, &target, &x, cfg.grid)?;
                // Only the logistic objective's optimum is a log density ratio.
                if n.loss == GanLoss::Original {
                    row.score_gap = Some(gap);
                }
                last_field = Some(dump);
                out.rows.push(row);
                Ok(())
            };
            if n.scheme == Scheme::Cts {
                run_cts_with(&mut g, &mut d, &data, &engine, &mut rng, &mut hook)?;
            } else {
                run_nats_with(&mut g, &mut d, &data, &engine, &mut rng, &mut hook)?;
            }
            out.files.push((
                ctx.path("generator.json"),
                json(&GeneratorSnapshot {
                    latent_dim: g.latent_dim,
                    net: g.net.clone(),
                })?,
            ));
            out.files.push((ctx.path("discriminator.json"), json(&d.net)?));
            if let Some(f) = last_field {
                out.files.push((ctx.path("field.txt"), f));
            }
        }
        EngineSection::SampleLangevin(l) => {
            let target = Target::new(cfg.data.dataset().mixture()?)?;
            let mut chain = ChainConfig::new(l.prior()?, l.chains, l.steps, l.epsilon);
            chain.bound = l.bound;
            let (result, total) = if l.levels == 0 {
                (
                    langevin(&ScoreOracle::Analytic(target.mixture.clone()), &chain, &mut rng)?,
                    l.steps,
                )
            } else {
                let gamma = match l.gamma {
                    Some(g) => g,
                    None => select_gamma(target.mixture.dim(), 1e-12)?,
                };
                let sigmas = SigmaLadder::geometric(l.sigma_first, gamma, l.levels)?;
                chain.ladder = Some(alpha_ladder(&sigmas, l.epsilon)?);
                (
                    annealed_langevin(&smoothed_oracles(&target.mixture, &sigmas)?, &chain, &mut rng)?,
                    l.steps * l.levels,
                )
            };
            let mut row = ctx.row(total);
            row.scheme = if l.levels == 0 { "langevin" } else { "annealed-langevin" }.into();
            if result.points.rows() > 0 {
                fill(&mut row, &score_samples(&result.points, &target, radius)?);
            }
            out.rows.push(row);
            out.files.push((ctx.path("samples.csv"), points_csv(&result.points)));
            if result.diverged > 0 {
                return Err(Error::NonFinite(format!(
                    "{} of {} chains diverged",
                    result.diverged, l.chains
                )));
            }
        }
        EngineSection::Eval(e) => {
            let target = Target::new(cfg.data.dataset().mixture()?)?;
            let text = std::fs::read_to_string(&e.generator)?;
            let g = serde_json::from_str::<GeneratorSnapshot>(&text)?.into_generator()?;
            let x = g.sample(cfg.run.eval_samples, &mut rng)?;
            let mut row = ctx.row(0);
            row.scheme = "eval".into();
            fill(&mut row, &score_samples(&x, &target, radius)?);
            out.rows.push(row);
        }
        EngineSection::DumpField(f) => {
            let target = Target::new(cfg.data.dataset().mixture()?)?;
            let reference = GaussianMixture::single(GaussianComponent::isotropic(
                f.reference_mean.clone(),
                f.reference_sigma,
                1.0,
            )?);
            let field = if f.train_steps == 0 {
                let critic = AnalyticDiscriminator::new(target.mixture.clone(), reference.clone())?;
                score_diff_field(&critic, &target.mixture, &reference, cfg.grid)?
            } else {
                let mut d = Discriminator::new(&cfg.model.disc_widths, cfg.model.lr_d, &mut rng);
                for _ in 0..f.train_steps {
                    let (real, _) = target.mixture.sample(f.batch, &mut rng);
                    let (fake, _) = reference.sample(f.batch, &mut rng);
                    logistic_disc_update(&mut d, &real, &fake)?;
                }
                out.files.push((ctx.path("discriminator.json"), json(&d.net)?));
                score_diff_field(&d, &target.mixture, &reference, cfg.grid)?
            };
            let mut row = ctx.row(f.train_steps);
            row.scheme = if f.train_steps == 0 { "analytic" } else { "logistic" }.into();
            row.score_gap = Some(field.mean_gap);
            out.rows.push(row);
            out.files.push((
                ctx.path("field.txt"),
                field_dump(&field.grid, &field.points, &field.grads)?,
            ));
        }
        EngineSection::GradCheck(gc) => {
            let mut table = String::from("net,widths,checked,max_rel_error,passed\n");
            let cases: Vec<(NetParams, Tensor)> = (0..gc.nets)
                .map(|i| random_case(&mut rng.split("net", i as u64), gc.max_depth, gc.max_width, gc.batch))
                .collect();
            let reports = grad_check_batch(&cases, gc.tol, Execution::Parallel);
            let mut failed = 0;
            for (i, ((net, _), report)) in cases.iter().zip(&reports).enumerate() {
                failed += usize::from(!report.passed());
                let mut widths = vec![net.input_width().to_string()];
                widths.extend(net.layers.iter().map(|l| l.bias.len().to_string()));
                table.push_str(&format!(
                    "{i},{},{},{},{}\n",
                    widths.join("-"),
                    report.checked,
                    num(report.max_rel_error),
                    report.passed()
                ));
            }
            out.files.push((ctx.path("gradcheck.csv"), table));
            if failed > 0 {
                return Err(Error::Invalid(format!(
                    "gradient check failed on {failed} of {} nets",
                    gc.nets
                )));
            }
        }
    }
    Ok(())
}

fn thread_cap() -> Option<usize> {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse().ok())
        .filter(|n: &usize| *n > 0)
}

/// Runs every seed of `cfg` and writes its artifacts under `cfg.run.out`.
///
/// A failing seed is recorded and skipped; its partial artifacts are still
/// written. Identical configs produce identical bytes unless `run.timing`
/// is set.
pub fn run_experiment(cfg: &RunConfig) -> Result<RunOutcome> {
    cfg.validate()?;
    let dir = PathBuf::from(&cfg.run.out);
    std::fs::create_dir_all(&dir)?;
    let seeds = &cfg.run.seeds;
    let results = Execution::Parallel.with_threads(thread_cap(), || {
        Execution::Parallel.map(seeds.len(), |i| run_seed_catching(cfg, seeds[i]))
    });
    let mut rows = Vec::new();
    let mut files = Vec::new();
    let mut aborted = Vec::new();
    for (&seed, (res, partial)) in seeds.iter().zip(results) {
        rows.extend(partial.rows);
        files.extend(partial.files);
        if let Err(e) = res {
            log::debug!("seed {seed} aborted: {e}");
            aborted.push((seed, e.to_string()));
        }
    }
    let mut entries = Vec::new();
    let mut csv = Vec::new();
    write_records(&mut csv, &rows)?;
    files.insert(
        0,
        (
            METRICS_FILE.to_string(),
            String::from_utf8(csv).expect("csv output is UTF-8"),
        ),
    );
    for (rel, text) in &files {
        let path = dir.join(rel);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(&path, text)?;
        entries.push(ManifestEntry {
            path: rel.clone(),
            bytes: text.len() as u64,
            hash: blob_hash(text.as_bytes()),
        });
    }
    entries.sort_by(|a, b| a.path.cmp(&b.path));
    let manifest = Manifest {
        run_id: cfg.run.id.clone(),
        kind: cfg.kind().name().into(),
        config: emit_config(cfg),
        seeds: seeds.clone(),
        aborted: aborted.iter().map(|(s, _)| *s).collect(),
        files: entries,
    };
    std::fs::write(dir.join(MANIFEST_FILE), json(&manifest)?)?;
    Ok(RunOutcome {
        dir,
        rows,
        aborted,
        manifest,
    })
}

/// Keeps whatever a seed produced before failing.
fn run_seed_catching(cfg: &RunConfig, seed: u64) -> (Result<()>, SeedOutput) {
    let mut out = SeedOutput::default();
    let res = run_seed(cfg, seed, &mut out);
    (res, out)
}

/// Rechecks every file listed in `dir`'s manifest; returns the paths whose
/// bytes no longer match.
pub fn verify_manifest(dir: &Path) -> Result<Vec<String>> {
    let manifest: Manifest = serde_json::from_str(&std::fs::read_to_string(dir.join(MANIFEST_FILE))?)?;
    let mut bad = Vec::new();
    for e in &manifest.files {
        match std::fs::read(dir.join(&e.path)) {
            Ok(bytes) if blob_hash(&bytes) == e.hash => {}
            _ => bad.push(e.path.clone()),
        }
    }
    Ok(bad)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    Ok(serde_json::from_str(&std::fs::read_to_string(
        dir.join(MANIFEST_FILE),
    )?)?)
}
