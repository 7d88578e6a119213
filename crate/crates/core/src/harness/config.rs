//! Line-oriented experiment configuration.
//!
//! ```text
//! # comment
//! run.kind = train-gan
//! run.seeds = 1, 2, 3
//! data.target = ring(8, 2, 0.05)
//! nats.schedule = geometric(1, 0.01)
//! ```
//!
//! Values are numbers, booleans, bare words, quoted strings, number lists
//! (`1, 2, 3` or `[1, 2, 3]`) or calls (`geometric(1, 0.01)`).

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::cfg_engine::{CfgConfig, DeltaMode, Phi0};
use crate::distributions::{DatasetSpec, GaussianComponent};
use crate::error::{Error, Result};
use crate::gan_engine::{GanLoss, NatsConfig};
use crate::metrics::GridSpec;
use crate::schedules::{constant_schedule, geometric_schedule, reverse_schedule, WeightSchedule};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ExperimentKind {
    Flow,
    TrainCfg,
    TrainGan,
    SampleLangevin,
    Eval,
    DumpField,
    GradCheck,
}

impl ExperimentKind {
    pub const ALL: [ExperimentKind; 7] = [
        ExperimentKind::Flow,
        ExperimentKind::TrainCfg,
        ExperimentKind::TrainGan,
        ExperimentKind::SampleLangevin,
        ExperimentKind::Eval,
        ExperimentKind::DumpField,
        ExperimentKind::GradCheck,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::Flow => "flow",
            ExperimentKind::TrainCfg => "train-cfg",
            ExperimentKind::TrainGan => "train-gan",
            ExperimentKind::SampleLangevin => "sample-langevin",
            ExperimentKind::Eval => "eval",
            ExperimentKind::DumpField => "dump-field",
            ExperimentKind::GradCheck => "grad-check",
        }
    }

    /// Section holding this kind's engine settings.
    pub fn section(self) -> &'static str {
        match self {
            ExperimentKind::Flow => "flow",
            ExperimentKind::TrainCfg => "cfg",
            ExperimentKind::TrainGan => "nats",
            ExperimentKind::SampleLangevin => "langevin",
            ExperimentKind::Eval => "eval",
            ExperimentKind::DumpField => "field",
            ExperimentKind::GradCheck => "gradcheck",
        }
    }

    fn uses_data(self) -> bool {
        self != ExperimentKind::GradCheck
    }

    fn uses_model(self) -> bool {
        matches!(
            self,
            ExperimentKind::TrainCfg | ExperimentKind::TrainGan | ExperimentKind::DumpField
        )
    }

    fn uses_grid(self) -> bool {
        matches!(
            self,
            ExperimentKind::TrainCfg | ExperimentKind::TrainGan | ExperimentKind::DumpField
        )
    }
}

impl std::str::FromStr for ExperimentKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Invalid(format!("unknown experiment kind `{s}`")))
    }
}

impl std::fmt::Display for ExperimentKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Weight schedule shape; the length comes from the engine section.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ScheduleSpec {
    Geometric(f64, f64),
    Constant(f64),
    /// The geometric schedule from `a` to `b`, run backwards.
    Reverse(f64, f64),
}

impl ScheduleSpec {
    pub fn build(&self, len: usize) -> Result<WeightSchedule> {
        match *self {
            ScheduleSpec::Geometric(a, b) => geometric_schedule(len, a, b),
            ScheduleSpec::Constant(a) => constant_schedule(len, a),
            ScheduleSpec::Reverse(a, b) => Ok(reverse_schedule(&geometric_schedule(len, a, b)?)),
        }
    }

    fn emit(&self) -> String {
        match *self {
            ScheduleSpec::Geometric(a, b) => format!("geometric({}, {})", num(a), num(b)),
            ScheduleSpec::Constant(a) => format!("constant({})", num(a)),
            ScheduleSpec::Reverse(a, b) => format!("reverse({}, {})", num(a), num(b)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TargetSpec {
    Ring {
        modes: usize,
        radius: f64,
        sigma: f64,
    },
    Grid {
        n: usize,
        spacing: f64,
        sigma: f64,
    },
    /// `N((offset, 0), I)`.
    TwoGaussian {
        offset: f64,
    },
}

impl TargetSpec {
    fn emit(&self) -> String {
        match *self {
            TargetSpec::Ring { modes, radius, sigma } => format!("ring({modes}, {}, {})", num(radius), num(sigma)),
            TargetSpec::Grid { n, spacing, sigma } => format!("grid({n}, {}, {})", num(spacing), num(sigma)),
            TargetSpec::TwoGaussian { offset } => format!("two_gaussian({})", num(offset)),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSection {
    pub kind: ExperimentKind,
    pub id: String,
    pub seeds: Vec<u64>,
    pub out: String,
    /// Evaluate every this many outer iterations, plus the final one.
    pub eval_every: usize,
    pub eval_samples: usize,
    pub quality_radius: f64,
    /// Fill the wall-clock column; off by default so outputs are byte-stable.
    pub timing: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataSection {
    pub target: TargetSpec,
    pub samples: usize,
    pub seed: u64,
}

impl DataSection {
    pub fn dataset(&self) -> DatasetSpec {
        let mut spec = match self.target {
            TargetSpec::Ring { modes, radius, sigma } => DatasetSpec::ring(modes, radius, sigma),
            TargetSpec::Grid { n, spacing, sigma } => DatasetSpec::grid(n, spacing, sigma),
            TargetSpec::TwoGaussian { offset } => DatasetSpec::two_gaussian(offset),
        };
        spec.samples = self.samples;
        spec.seed = self.seed;
        spec
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSection {
    pub gen_widths: Vec<usize>,
    pub disc_widths: Vec<usize>,
    pub lr_g: f64,
    pub lr_d: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowSection {
    pub start_mean: Vec<f64>,
    pub start_sigma: f64,
    pub steps: usize,
    pub eta: f64,
    pub particles: usize,
    pub schedule: ScheduleSpec,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CfgSection {
    pub epochs: usize,
    pub steps: usize,
    pub disc_updates: usize,
    pub examples: usize,
    pub batch: usize,
    pub eta_flow: f64,
    pub schedule: ScheduleSpec,
    pub delta: DeltaMode,
    pub s_scale: f64,
    pub phi0: Phi0,
    pub distill_passes: usize,
    pub delta_cap: f64,
}

impl CfgSection {
    pub fn engine(&self) -> Result<CfgConfig> {
        let mut c = CfgConfig::new(self.schedule.build(self.steps)?);
        c.disc_updates = self.disc_updates;
        c.examples = self.examples;
        c.batch = self.batch;
        c.eta_flow = self.eta_flow;
        c.delta_mode = self.delta;
        c.s_scale = self.s_scale;
        c.phi0 = self.phi0;
        c.distill_passes = self.distill_passes;
        c.delta_cap = self.delta_cap;
        c.validate()?;
        Ok(c)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scheme {
    Cts,
    Nts,
    Nats,
}

impl Scheme {
    pub fn name(self) -> &'static str {
        match self {
            Scheme::Cts => "cts",
            Scheme::Nts => "nts",
            Scheme::Nats => "nats",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NatsSection {
    pub scheme: Scheme,
    pub loss: GanLoss,
    pub outer: usize,
    pub disc_steps: usize,
    pub n_d: usize,
    pub schedule: ScheduleSpec,
    pub batch: usize,
}

impl NatsSection {
    pub fn engine(&self) -> Result<NatsConfig> {
        let mut c = NatsConfig::new(self.loss, self.schedule.build(self.n_d)?);
        c.outer = self.outer;
        c.disc_steps = self.disc_steps;
        c.batch = self.batch;
        c.nts = self.scheme == Scheme::Nts;
        c.validate()?;
        Ok(c)
    }

    /// Nesting depth actually run.
    pub fn effective_n_d(&self) -> usize {
        if self.scheme == Scheme::Cts {
            1
        } else {
            self.n_d
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LangevinSection {
    pub chains: usize,
    pub steps: usize,
    pub epsilon: f64,
    /// 0 runs plain Langevin.
    pub levels: usize,
    pub sigma_first: f64,
    /// `None` picks the ratio from the dimension.
    pub gamma: Option<f64>,
    pub prior_mean: Vec<f64>,
    pub prior_sigma: f64,
    pub bound: f64,
}

impl LangevinSection {
    pub fn prior(&self) -> Result<GaussianComponent> {
        GaussianComponent::isotropic(self.prior_mean.clone(), self.prior_sigma, 1.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSection {
    /// JSON generator snapshot written by a training run.
    pub generator: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FieldSection {
    /// Logistic discriminator steps; 0 uses the analytic discriminator.
    pub train_steps: usize,
    pub reference_mean: Vec<f64>,
    pub reference_sigma: f64,
    pub batch: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckSection {
    pub nets: usize,
    pub tol: f64,
    pub batch: usize,
    pub max_width: usize,
    pub max_depth: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub enum EngineSection {
    Flow(FlowSection),
    TrainCfg(CfgSection),
    TrainGan(NatsSection),
    SampleLangevin(LangevinSection),
    Eval(EvalSection),
    DumpField(FieldSection),
    GradCheck(GradCheckSection),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub run: RunSection,
    pub data: DataSection,
    pub model: ModelSection,
    pub grid: GridSpec,
    pub engine: EngineSection,
}

impl RunConfig {
    /// Defaults for `kind`.
    pub fn defaults(kind: ExperimentKind) -> Self {
        let target = match kind {
            ExperimentKind::Flow | ExperimentKind::DumpField => TargetSpec::TwoGaussian { offset: 1.0 },
            ExperimentKind::SampleLangevin => TargetSpec::Ring {
                modes: 2,
                radius: 4.0,
                sigma: 0.1,
            },
            _ => TargetSpec::Ring {
                modes: 8,
                radius: 2.0,
                sigma: 0.05,
            },
        };
        let engine = match kind {
            ExperimentKind::Flow => EngineSection::Flow(FlowSection {
                start_mean: vec![0.0, 0.0],
                start_sigma: 1.0,
                steps: 15,
                eta: 0.25,
                particles: 640,
                schedule: ScheduleSpec::Geometric(20.0, 1.0),
            }),
            ExperimentKind::TrainCfg => EngineSection::TrainCfg(CfgSection {
                epochs: 200,
                steps: 15,
                disc_updates: 1,
                examples: 640,
                batch: 64,
                eta_flow: 0.25,
                schedule: ScheduleSpec::Geometric(1.0, 0.01),
                delta: DeltaMode::Constant(1.0),
                s_scale: 1.0,
                phi0: Phi0::Identity,
                distill_passes: 5,
                delta_cap: 1e6,
            }),
            ExperimentKind::TrainGan => EngineSection::TrainGan(NatsSection {
                scheme: Scheme::Nats,
                loss: GanLoss::Original,
                outer: 2000,
                disc_steps: 1,
                n_d: 4,
                schedule: ScheduleSpec::Geometric(1.0, 0.01),
                batch: 64,
            }),
            ExperimentKind::SampleLangevin => EngineSection::SampleLangevin(LangevinSection {
                chains: 5000,
                steps: 100,
                epsilon: 5e-7,
                levels: 10,
                sigma_first: 8.0,
                gamma: None,
                prior_mean: vec![8.0, 0.0],
                prior_sigma: 1.0,
                bound: crate::samplers::DIVERGENCE_BOUND,
            }),
            ExperimentKind::Eval => EngineSection::Eval(EvalSection {
                generator: "generator.json".into(),
            }),
            ExperimentKind::DumpField => EngineSection::DumpField(FieldSection {
                train_steps: 2000,
                reference_mean: vec![0.0, 0.0],
                reference_sigma: 1.0,
                batch: 256,
            }),
            ExperimentKind::GradCheck => EngineSection::GradCheck(GradCheckSection {
                nets: 100,
                tol: 1e-4,
                batch: 4,
                max_width: 8,
                max_depth: 3,
            }),
        };
        Self {
            run: RunSection {
                kind,
                id: kind.name().into(),
                seeds: vec![1],
                out: "out".into(),
                eval_every: 50,
                eval_samples: 10_000,
                quality_radius: 3.0,
                timing: false,
            },
            data: DataSection {
                target,
                samples: 10_000,
                seed: 0,
            },
            model: ModelSection {
                gen_widths: vec![2, 64, 64, 2],
                disc_widths: vec![2, 64, 64, 1],
                lr_g: 2e-4,
                lr_d: 2e-4,
            },
            grid: GridSpec::new(21, 21, (-3.0, 3.0), (-3.0, 3.0)),
            engine,
        }
    }

    pub fn kind(&self) -> ExperimentKind {
        self.run.kind
    }

    /// Semantic checks that need the whole config.
    pub fn validate(&self) -> Result<()> {
        let cfg_err = |key: &str, message: String| {
            Err(Error::Config {
                key: key.into(),
                message,
            })
        };
        if self.run.seeds.is_empty() {
            return cfg_err("run.seeds", "at least one seed is required".into());
        }
        let mut seen = std::collections::HashSet::new();
        if let Some(s) = self.run.seeds.iter().find(|s| !seen.insert(**s)) {
            return cfg_err("run.seeds", format!("seed {s} listed twice"));
        }
        if self.run.eval_every == 0 {
            return cfg_err("run.eval_every", "must be at least 1".into());
        }
        if !(self.run.quality_radius > 0.0) {
            return cfg_err("run.quality_radius", "must be positive".into());
        }
        if self.run.id.is_empty() || self.run.id.contains(['/', ',', '"']) {
            return cfg_err("run.id", "must be non-empty without `/`, `,` or `\"`".into());
        }
        if self.kind().uses_data() {
            self.data.dataset().validate().map_err(|e| Error::Config {
                key: "data.target".into(),
                message: e.to_string(),
            })?;
            if self.data.samples == 0 {
                return cfg_err("data.samples", "must be at least 1".into());
            }
        }
        let dim = 2;
        if self.kind().uses_model() {
            let m = &self.model;
            if m.gen_widths.len() < 2 || m.gen_widths.last() != Some(&dim) || m.gen_widths.contains(&0) {
                return cfg_err(
                    "model.gen_widths",
                    format!("needs >= 2 positive widths ending in {dim}"),
                );
            }
            if m.disc_widths.len() < 2
                || m.disc_widths[0] != dim
                || m.disc_widths.last() != Some(&1)
                || m.disc_widths.contains(&0)
            {
                return cfg_err(
                    "model.disc_widths",
                    format!("needs >= 2 positive widths from {dim} to 1"),
                );
            }
            if !(m.lr_g > 0.0) || !(m.lr_d > 0.0) {
                return cfg_err("model.lr_g", "learning rates must be positive".into());
            }
        }
        if self.kind().uses_grid()
            && (self.grid.nx == 0
                || self.grid.ny == 0
                || !(self.grid.xmax >= self.grid.xmin)
                || !(self.grid.ymax >= self.grid.ymin))
        {
            return cfg_err("grid", "needs nx, ny >= 1 and a finite non-empty box".into());
        }
        let sec = |k: &str| format!("{}.{k}", self.kind().section());
        match &self.engine {
            EngineSection::Flow(f) => {
                if f.start_mean.len() != dim {
                    return cfg_err(&sec("start_mean"), format!("needs {dim} entries"));
                }
                if f.steps == 0 || f.particles <= dim || !(f.start_sigma > 0.0) || !(f.eta >= 0.0) {
                    return cfg_err(
                        &sec("steps"),
                        "needs steps >= 1, particles > dim, start_sigma > 0, eta >= 0".into(),
                    );
                }
                f.schedule.build(f.steps).map_err(|e| Error::Config {
                    key: sec("schedule"),
                    message: e.to_string(),
                })?;
            }
            EngineSection::TrainCfg(c) => {
                c.engine().map_err(|e| Error::Config {
                    key: sec("steps"),
                    message: e.to_string(),
                })?;
                if self.model.gen_widths[0] == 0 {
                    return cfg_err("model.gen_widths", "latent width must be positive".into());
                }
            }
            EngineSection::TrainGan(n) => {
                if n.outer == 0 {
                    return cfg_err(&sec("outer"), "must be at least 1".into());
                }
                n.engine().map_err(|e| Error::Config {
                    key: sec("n_d"),
                    message: e.to_string(),
                })?;
            }
            EngineSection::SampleLangevin(l) => {
                if l.prior_mean.len() != dim {
                    return cfg_err(&sec("prior_mean"), format!("needs {dim} entries"));
                }
                if l.chains == 0 || l.steps == 0 || !(l.epsilon > 0.0) || !(l.prior_sigma > 0.0) || !(l.bound > 0.0) {
                    return cfg_err(
                        &sec("steps"),
                        "needs chains, steps >= 1 and positive epsilon, prior_sigma, bound".into(),
                    );
                }
                if l.levels > 0 && !(l.sigma_first > 0.0) {
                    return cfg_err(&sec("sigma_first"), "must be positive".into());
                }
                if let Some(g) = l.gamma {
                    if !(g > 0.0 && g < 1.0) {
                        return cfg_err(&sec("gamma"), "must lie in (0, 1)".into());
                    }
                }
            }
            EngineSection::Eval(e) => {
                if e.generator.is_empty() {
                    return cfg_err(&sec("generator"), "path required".into());
                }
            }
            EngineSection::DumpField(f) => {
                if f.reference_mean.len() != dim || !(f.reference_sigma > 0.0) || f.batch == 0 {
                    return cfg_err(
                        &sec("reference_mean"),
                        format!("needs {dim} entries, positive sigma and batch"),
                    );
                }
            }
            EngineSection::GradCheck(g) => {
                if g.nets == 0 || g.batch == 0 || g.max_width == 0 || g.max_depth == 0 || !(g.tol > 0.0) {
                    return cfg_err(
                        &sec("nets"),
                        "needs positive nets, batch, max_width, max_depth, tol".into(),
                    );
                }
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------- values

#[derive(Debug, Clone, PartialEq)]
enum Value {
    Number(String),
    Bool(bool),
    Word(String),
    Str(String),
    List(Vec<String>),
    Call(String, Vec<String>),
}

#[derive(Debug, Clone)]
struct Entry {
    line: usize,
    column: usize,
    value: Value,
}

fn is_word(s: &str) -> bool {
    let mut ch = s.chars();
    matches!(ch.next(), Some(c) if c.is_ascii_alphabetic() || c == '_')
        && ch.all(|c| c.is_ascii_alphanumeric() || "_-./".contains(c))
}

fn is_number(s: &str) -> bool {
    !s.is_empty() && s.parse::<f64>().is_ok() && !s.chars().any(|c| c.is_ascii_alphabetic() && c != 'e' && c != 'E')
}

fn perr(line: usize, column: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        line,
        column,
        message: message.into(),
    }
}

fn parse_value(text: &str, line: usize, column: usize) -> Result<Value> {
    let t = text.trim();
    if t.is_empty() {
        return Err(perr(line, column, "missing value"));
    }
    if let Some(rest) = t.strip_prefix('"') {
        let mut out = String::new();
        let mut chars = rest.chars();
        while let Some(c) = chars.next() {
            match c {
                '"' => {
                    let tail: String = chars.collect();
                    if !tail.trim().is_empty() {
                        return Err(perr(line, column, format!("unexpected `{}` after string", tail.trim())));
                    }
                    return Ok(Value::Str(out));
                }
                '\\' => match chars.next() {
                    Some(e @ ('"' | '\\')) => out.push(e),
                    _ => return Err(perr(line, column, "only \\\" and \\\\ escapes are supported")),
                },
                c => out.push(c),
            }
        }
        return Err(perr(line, column, "unterminated string"));
    }
    if let Some(open) = t.find('(') {
        let name = t[..open].trim();
        if !is_word(name) {
            return Err(perr(line, column, format!("bad call name `{name}`")));
        }
        let inner = t[open + 1..]
            .strip_suffix(')')
            .ok_or_else(|| perr(line, column + t.len() - 1, "expected `)` at end of value"))?;
        let args = split_numbers(inner, line, column + open + 1)?;
        return Ok(Value::Call(name.into(), args));
    }
    if let Some(inner) = t.strip_prefix('[') {
        let inner = inner
            .strip_suffix(']')
            .ok_or_else(|| perr(line, column + t.len() - 1, "expected `]` at end of list"))?;
        return Ok(Value::List(split_numbers(inner, line, column + 1)?));
    }
    if t.contains(',') {
        return Ok(Value::List(split_numbers(t, line, column)?));
    }
    match t {
        "true" => return Ok(Value::Bool(true)),
        "false" => return Ok(Value::Bool(false)),
        _ => {}
    }
    if is_number(t) {
        return Ok(Value::Number(t.into()));
    }
    if is_word(t) {
        return Ok(Value::Word(t.into()));
    }
    Err(perr(line, column, format!("cannot read value `{t}`")))
}

fn split_numbers(s: &str, line: usize, column: usize) -> Result<Vec<String>> {
    if s.trim().is_empty() {
        return Ok(Vec::new());
    }
    let mut out = Vec::new();
    let mut col = column;
    for part in s.split(',') {
        let p = part.trim();
        if !is_number(p) {
            return Err(perr(
                line,
                col + part.len() - part.trim_start().len(),
                format!("expected a number, found `{p}`"),
            ));
        }
        out.push(p.to_string());
        col += part.len() + 1;
    }
    Ok(out)
}

/// Strips a `#` comment that is not inside a quoted string.
fn strip_comment(line: &str) -> &str {
    let mut in_str = false;
    let mut escaped = false;
    for (i, c) in line.char_indices() {
        match c {
            '\\' if in_str && !escaped => {
                escaped = true;
                continue;
            }
            '"' if !escaped => in_str = !in_str,
            '#' if !in_str => return &line[..i],
            _ => {}
        }
        escaped = false;
    }
    line
}

fn tokenize(text: &str) -> Result<BTreeMap<String, Entry>> {
    let mut entries: BTreeMap<String, Entry> = BTreeMap::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let body = strip_comment(raw);
        if body.trim().is_empty() {
            continue;
        }
        let eq = body.find('=').ok_or_else(|| {
            perr(
                line,
                body.len() - body.trim_start().len() + 1,
                "expected `section.key = value`",
            )
        })?;
        let key_text = &body[..eq];
        let key = key_text.trim();
        let key_col = key_text.len() - key_text.trim_start().len() + 1;
        let parts: Vec<&str> = key.split('.').collect();
        if parts.len() != 2 || !parts.iter().all(|p| is_word(p) && !p.contains(['.', '/'])) {
            return Err(perr(line, key_col, format!("bad key `{key}`, expected `section.key`")));
        }
        let value_text = &body[eq + 1..];
        let value_col = eq + 2 + (value_text.len() - value_text.trim_start().len());
        let value = parse_value(value_text, line, value_col)?;
        if let Some(prev) = entries.get(key) {
            return Err(Error::Config {
                key: key.into(),
                message: format!("duplicate key on lines {} and {line}", prev.line),
            });
        }
        entries.insert(
            key.into(),
            Entry {
                line,
                column: value_col,
                value,
            },
        );
    }
    Ok(entries)
}

// --------------------------------------------------------------- readers

struct Reader<'a> {
    key: &'a str,
    e: &'a Entry,
}

impl Reader<'_> {
    fn err(&self, message: impl std::fmt::Display) -> Error {
        Error::Config {
            key: self.key.into(),
            message: format!("line {}, column {}: {message}", self.e.line, self.e.column),
        }
    }

    fn f64(&self) -> Result<f64> {
        match &self.e.value {
            Value::Number(n) => n.parse().map_err(|_| self.err("expected a number")),
            _ => Err(self.err("expected a number")),
        }
    }

    fn u64(&self) -> Result<u64> {
        match &self.e.value {
            Value::Number(n) => n
                .parse()
                .map_err(|_| self.err(format!("expected a non-negative integer, found `{n}`"))),
            _ => Err(self.err("expected a non-negative integer")),
        }
    }

    fn usize(&self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| self.err("integer too large"))
    }

    fn bool(&self) -> Result<bool> {
        match self.e.value {
            Value::Bool(b) => Ok(b),
            _ => Err(self.err("expected true or false")),
        }
    }

    fn string(&self) -> Result<String> {
        match &self.e.value {
            Value::Str(s) | Value::Word(s) => Ok(s.clone()),
            Value::Number(n) => Ok(n.clone()),
            _ => Err(self.err("expected a string")),
        }
    }

    fn items(&self) -> Result<Vec<String>> {
        match &self.e.value {
            Value::List(v) => Ok(v.clone()),
            Value::Number(n) => Ok(vec![n.clone()]),
            _ => Err(self.err("expected a comma-separated number list")),
        }
    }

    fn f64_list(&self) -> Result<Vec<f64>> {
        self.items()?
            .iter()
            .map(|s| s.parse().map_err(|_| self.err(format!("bad number `{s}`"))))
            .collect()
    }

    fn usize_list(&self) -> Result<Vec<usize>> {
        self.items()?
            .iter()
            .map(|s| s.parse().map_err(|_| self.err(format!("bad integer `{s}`"))))
            .collect()
    }

    fn u64_list(&self) -> Result<Vec<u64>> {
        self.items()?
            .iter()
            .map(|s| s.parse().map_err(|_| self.err(format!("bad seed `{s}`"))))
            .collect()
    }

    fn call(&self) -> Result<(&str, Vec<f64>)> {
        match &self.e.value {
            Value::Call(name, args) => {
                let nums = args
                    .iter()
                    .map(|s| s.parse::<f64>().map_err(|_| self.err(format!("bad number `{s}`"))))
                    .collect::<Result<Vec<_>>>()?;
                Ok((name, nums))
            }
            _ => Err(self.err("expected a call such as `geometric(1, 0.01)`")),
        }
    }

    fn arity(&self, name: &str, args: &[f64], n: usize) -> Result<()> {
        if args.len() != n {
            return Err(self.err(format!("`{name}` takes {n} arguments, got {}", args.len())));
        }
        Ok(())
    }

    fn count(&self, v: f64) -> Result<usize> {
        if v >= 0.0 && v.fract() == 0.0 && v < 1e15 {
            Ok(v as usize)
        } else {
            Err(self.err(format!("expected a whole number, found {v}")))
        }
    }

    fn schedule(&self) -> Result<ScheduleSpec> {
        let (name, a) = self.call()?;
        match name {
            "geometric" => self.arity(name, &a, 2).map(|_| ScheduleSpec::Geometric(a[0], a[1])),
            "constant" => self.arity(name, &a, 1).map(|_| ScheduleSpec::Constant(a[0])),
            "reverse" => self.arity(name, &a, 2).map(|_| ScheduleSpec::Reverse(a[0], a[1])),
            _ => Err(self.err(format!("unknown schedule `{name}` (geometric, constant or reverse)"))),
        }
    }

    fn target(&self) -> Result<TargetSpec> {
        let (name, a) = self.call()?;
        match name {
            "ring" => {
                self.arity(name, &a, 3)?;
                Ok(TargetSpec::Ring {
                    modes: self.count(a[0])?,
                    radius: a[1],
                    sigma: a[2],
                })
            }
            "grid" => {
                self.arity(name, &a, 3)?;
                Ok(TargetSpec::Grid {
                    n: self.count(a[0])?,
                    spacing: a[1],
                    sigma: a[2],
                })
            }
            "two_gaussian" => {
                self.arity(name, &a, 1)?;
                Ok(TargetSpec::TwoGaussian { offset: a[0] })
            }
            _ => Err(self.err(format!("unknown target `{name}` (ring, grid or two_gaussian)"))),
        }
    }

    fn delta(&self) -> Result<DeltaMode> {
        match &self.e.value {
            Value::Word(w) if w == "computed" => Ok(DeltaMode::Computed),
            Value::Call(..) => {
                let (name, a) = self.call()?;
                if name != "constant" {
                    return Err(self.err("expected `computed` or `constant(value)`"));
                }
                self.arity(name, &a, 1)?;
                Ok(DeltaMode::Constant(a[0]))
            }
            _ => Err(self.err("expected `computed` or `constant(value)`")),
        }
    }

    fn word<T>(&self, options: &[(&str, T)]) -> Result<T>
    where
        T: Copy,
    {
        let s = self.string()?;
        options.iter().find(|(n, _)| *n == s).map(|(_, v)| *v).ok_or_else(|| {
            let names: Vec<&str> = options.iter().map(|(n, _)| *n).collect();
            self.err(format!("unknown value `{s}` (expected one of {})", names.join(", ")))
        })
    }
}

/// Parses and validates a config; `run.kind` is required.
pub fn parse_config(text: &str) -> Result<RunConfig> {
    parse_config_for(text, None)
}

/// Like [`parse_config`], but `kind` fills in a missing `run.kind` and must
/// agree with one that is present.
pub fn parse_config_for(text: &str, kind: Option<ExperimentKind>) -> Result<RunConfig> {
    let entries = tokenize(text)?;
    let declared = match entries.get("run.kind") {
        Some(e) => Some(
            Reader { key: "run.kind", e }
                .string()?
                .parse::<ExperimentKind>()
                .map_err(|err| Error::Config {
                    key: "run.kind".into(),
                    message: format!("line {}: {err}", e.line),
                })?,
        ),
        None => None,
    };
    let kind = match (declared, kind) {
        (Some(a), Some(b)) if a != b => {
            return Err(Error::Config {
                key: "run.kind".into(),
                message: format!(
                    "line {}: config declares `{a}` but `{b}` was requested",
                    entries["run.kind"].line
                ),
            })
        }
        (Some(a), _) | (None, Some(a)) => a,
        (None, None) => {
            return Err(Error::Config {
                key: "run.kind".into(),
                message: "missing required key".into(),
            })
        }
    };
    let mut cfg = RunConfig::defaults(kind);
    for (key, e) in &entries {
        let r = Reader { key, e };
        let (section, field) = key.split_once('.').expect("tokenizer checked the key shape");
        let handled = apply(&mut cfg, section, field, &r)?;
        if !handled {
            let where_ = if section == kind.section()
                || ["run", "data", "model", "grid"].contains(&section)
                || ExperimentKind::ALL.iter().all(|k| k.section() != section)
            {
                "unknown key".to_string()
            } else {
                format!("section `{section}` does not apply to `{kind}` runs")
            };
            return Err(Error::Config {
                key: key.clone(),
                message: format!("line {}: {where_}", e.line),
            });
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn apply(cfg: &mut RunConfig, section: &str, field: &str, r: &Reader<'_>) -> Result<bool> {
    let kind = cfg.run.kind;
    match section {
        "run" => match field {
            "kind" => {}
            "id" => cfg.run.id = r.string()?,
            "seeds" => cfg.run.seeds = r.u64_list()?,
            "out" => cfg.run.out = r.string()?,
            "eval_every" => cfg.run.eval_every = r.usize()?,
            "eval_samples" => cfg.run.eval_samples = r.usize()?,
            "quality_radius" => cfg.run.quality_radius = r.f64()?,
            "timing" => cfg.run.timing = r.bool()?,
            _ => return Ok(false),
        },
        "data" if kind.uses_data() => match field {
            "target" => cfg.data.target = r.target()?,
            "samples" => cfg.data.samples = r.usize()?,
            "seed" => cfg.data.seed = r.u64()?,
            _ => return Ok(false),
        },
        "model" if kind.uses_model() => match field {
            "gen_widths" => cfg.model.gen_widths = r.usize_list()?,
            "disc_widths" => cfg.model.disc_widths = r.usize_list()?,
            "lr_g" => cfg.model.lr_g = r.f64()?,
            "lr_d" => cfg.model.lr_d = r.f64()?,
            _ => return Ok(false),
        },
        "grid" if kind.uses_grid() => match field {
            "nx" => cfg.grid.nx = r.usize()?,
            "ny" => cfg.grid.ny = r.usize()?,
            "xmin" => cfg.grid.xmin = r.f64()?,
            "xmax" => cfg.grid.xmax = r.f64()?,
            "ymin" => cfg.grid.ymin = r.f64()?,
            "ymax" => cfg.grid.ymax = r.f64()?,
            _ => return Ok(false),
        },
        s if s == kind.section() => return apply_engine(&mut cfg.engine, field, r),
        _ => return Ok(false),
    }
    Ok(true)
}

fn apply_engine(engine: &mut EngineSection, field: &str, r: &Reader<'_>) -> Result<bool> {
    match engine {
        EngineSection::Flow(f) => match field {
            "start_mean" => f.start_mean = r.f64_list()?,
            "start_sigma" => f.start_sigma = r.f64()?,
            "steps" => f.steps = r.usize()?,
            "eta" => f.eta = r.f64()?,
            "particles" => f.particles = r.usize()?,
            "schedule" => f.schedule = r.schedule()?,
            _ => return Ok(false),
        },
        EngineSection::TrainCfg(c) => match field {
            "epochs" => c.epochs = r.usize()?,
            "steps" => c.steps = r.usize()?,
            "disc_updates" => c.disc_updates = r.usize()?,
            "examples" => c.examples = r.usize()?,
            "batch" => c.batch = r.usize()?,
            "eta_flow" => c.eta_flow = r.f64()?,
            "schedule" => c.schedule = r.schedule()?,
            "delta" => c.delta = r.delta()?,
            "s_scale" => c.s_scale = r.f64()?,
            "phi0" => c.phi0 = r.word(&[("identity", Phi0::Identity), ("sign", Phi0::Sign)])?,
            "distill_passes" => c.distill_passes = r.usize()?,
            "delta_cap" => c.delta_cap = r.f64()?,
            _ => return Ok(false),
        },
        EngineSection::TrainGan(n) => match field {
            "scheme" => n.scheme = r.word(&[("cts", Scheme::Cts), ("nts", Scheme::Nts), ("nats", Scheme::Nats)])?,
            "loss" => {
                n.loss = r.word(&[
                    ("original", GanLoss::Original),
                    ("lsgan", GanLoss::Lsgan),
                    ("wgan", GanLoss::Wgan),
                    ("hinge", GanLoss::Hinge),
                ])?
            }
            "outer" => n.outer = r.usize()?,
            "disc_steps" => n.disc_steps = r.usize()?,
            "n_d" => n.n_d = r.usize()?,
            "schedule" => n.schedule = r.schedule()?,
            "batch" => n.batch = r.usize()?,
            _ => return Ok(false),
        },
        EngineSection::SampleLangevin(l) => match field {
            "chains" => l.chains = r.usize()?,
            "steps" => l.steps = r.usize()?,
            "epsilon" => l.epsilon = r.f64()?,
            "levels" => l.levels = r.usize()?,
            "sigma_first" => l.sigma_first = r.f64()?,
            "gamma" => {
                l.gamma = match &r.e.value {
                    Value::Word(w) if w == "auto" => None,
                    _ => Some(r.f64()?),
                }
            }
            "prior_mean" => l.prior_mean = r.f64_list()?,
            "prior_sigma" => l.prior_sigma = r.f64()?,
            "bound" => l.bound = r.f64()?,
            _ => return Ok(false),
        },
        EngineSection::Eval(e) => match field {
            "generator" => e.generator = r.string()?,
            _ => return Ok(false),
        },
        EngineSection::DumpField(f) => match field {
            "train_steps" => f.train_steps = r.usize()?,
            "reference_mean" => f.reference_mean = r.f64_list()?,
            "reference_sigma" => f.reference_sigma = r.f64()?,
            "batch" => f.batch = r.usize()?,
            _ => return Ok(false),
        },
        EngineSection::GradCheck(g) => match field {
            "nets" => g.nets = r.usize()?,
            "tol" => g.tol = r.f64()?,
            "batch" => g.batch = r.usize()?,
            "max_width" => g.max_width = r.usize()?,
            "max_depth" => g.max_depth = r.usize()?,
            _ => return Ok(false),
        },
    }
    Ok(true)
}

// ------------------------------------------------------------------ emit

/// Shortest text that parses back to exactly `v`.
pub(crate) fn num(v: f64) -> String {
    let a = v.abs();
    if v == 0.0 || (1e-5..1e15).contains(&a) {
        format!("{v}")
    } else {
        format!("{v:e}")
    }
}

fn list<T: std::fmt::Display>(v: &[T]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(", ")
}

fn flist(v: &[f64]) -> String {
    v.iter().map(|x| num(*x)).collect::<Vec<_>>().join(", ")
}

fn quote(s: &str) -> String {
    if is_word(s) && !["true", "false", "auto", "computed"].contains(&s) {
        s.to_string()
    } else {
        format!("\"{}\"", s.replace('\\', "\\\\").replace('"', "\\\""))
    }
}

/// Writes every setting, defaults included, in a fixed order.
pub fn emit_config(cfg: &RunConfig) -> String {
    let mut o = String::new();
    let mut put = |k: &str, v: String| {
        let _ = writeln!(o, "{k} = {v}");
    };
    let r = &cfg.run;
    put("run.kind", r.kind.name().into());
    put("run.id", quote(&r.id));
    put("run.seeds", list(&r.seeds));
    put("run.out", quote(&r.out));
    put("run.eval_every", r.eval_every.to_string());
    put("run.eval_samples", r.eval_samples.to_string());
    put("run.quality_radius", num(r.quality_radius));
    put("run.timing", r.timing.to_string());
    let kind = r.kind;
    if kind.uses_data() {
        put("data.target", cfg.data.target.emit());
        put("data.samples", cfg.data.samples.to_string());
        put("data.seed", cfg.data.seed.to_string());
    }
    if kind.uses_model() {
        put("model.gen_widths", list(&cfg.model.gen_widths));
        put("model.disc_widths", list(&cfg.model.disc_widths));
        put("model.lr_g", num(cfg.model.lr_g));
        put("model.lr_d", num(cfg.model.lr_d));
    }
    if kind.uses_grid() {
        let g = &cfg.grid;
        put("grid.nx", g.nx.to_string());
        put("grid.ny", g.ny.to_string());
        put("grid.xmin", num(g.xmin));
        put("grid.xmax", num(g.xmax));
        put("grid.ymin", num(g.ymin));
        put("grid.ymax", num(g.ymax));
    }
    let s = kind.section();
    let k = |f: &str| format!("{s}.{f}");
    match &cfg.engine {
        EngineSection::Flow(f) => {
            put(&k("start_mean"), flist(&f.start_mean));
            put(&k("start_sigma"), num(f.start_sigma));
            put(&k("steps"), f.steps.to_string());
            put(&k("eta"), num(f.eta));
            put(&k("particles"), f.particles.to_string());
            put(&k("schedule"), f.schedule.emit());
        }
        EngineSection::TrainCfg(c) => {
            put(&k("epochs"), c.epochs.to_string());
            put(&k("steps"), c.steps.to_string());
            put(&k("disc_updates"), c.disc_updates.to_string());
            put(&k("examples"), c.examples.to_string());
            put(&k("batch"), c.batch.to_string());
            put(&k("eta_flow"), num(c.eta_flow));
            put(&k("schedule"), c.schedule.emit());
            put(
                &k("delta"),
                match c.delta {
                    DeltaMode::Computed => "computed".into(),
                    DeltaMode::Constant(v) => format!("constant({})", num(v)),
                },
            );
            put(&k("s_scale"), num(c.s_scale));
            put(
                &k("phi0"),
                match c.phi0 {
                    Phi0::Identity => "identity",
                    Phi0::Sign => "sign",
                }
                .into(),
            );
            put(&k("distill_passes"), c.distill_passes.to_string());
            put(&k("delta_cap"), num(c.delta_cap));
        }
        EngineSection::TrainGan(n) => {
            put(&k("scheme"), n.scheme.name().into());
            put(&k("loss"), n.loss.name().into());
            put(&k("outer"), n.outer.to_string());
            put(&k("disc_steps"), n.disc_steps.to_string());
            put(&k("n_d"), n.n_d.to_string());
            put(&k("schedule"), n.schedule.emit());
            put(&k("batch"), n.batch.to_string());
        }
        EngineSection::SampleLangevin(l) => {
            put(&k("chains"), l.chains.to_string());
            put(&k("steps"), l.steps.to_string());
            put(&k("epsilon"), num(l.epsilon));
            put(&k("levels"), l.levels.to_string());
            put(&k("sigma_first"), num(l.sigma_first));
            put(&k("gamma"), l.gamma.map_or("auto".into(), num));
            put(&k("prior_mean"), flist(&l.prior_mean));
            put(&k("prior_sigma"), num(l.prior_sigma));
            put(&k("bound"), num(l.bound));
        }
        EngineSection::Eval(e) => put(&k("generator"), quote(&e.generator)),
        EngineSection::DumpField(f) => {
            put(&k("train_steps"), f.train_steps.to_string());
            put(&k("reference_mean"), flist(&f.reference_mean));
            put(&k("reference_sigma"), num(f.reference_sigma));
            put(&k("batch"), f.batch.to_string());
        }
        EngineSection::GradCheck(g) => {
            put(&k("nets"), g.nets.to_string());
            put(&k("tol"), num(g.tol));
            put(&k("batch"), g.batch.to_string());
            put(&k("max_width"), g.max_width.to_string());
            put(&k("max_depth"), g.max_depth.to_string());
        }
    }
    o
}

/// Dataset identity used to check that runs are comparable.
pub(crate) fn data_signature(cfg: &RunConfig) -> String {
    format!(
        "{} samples={} seed={}",
        cfg.data.target.emit(),
        cfg.data.samples,
        cfg.data.seed
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_flow_config() {
        let cfg = parse_config("run.kind = flow\n").unwrap();
        assert_eq!(cfg, RunConfig::defaults(ExperimentKind::Flow));
        let text = emit_config(&cfg);
        assert!(text.contains("flow.schedule = geometric(20, 1)"));
        assert!(text.contains("run.eval_every = 50"));
    }

    #[test]
    fn nats_schedule_from_n_d() {
        let cfg = parse_config("run.kind = train-gan\nnats.schedule = geometric(1, 0.01)\nnats.n_d = 4\n").unwrap();
        let EngineSection::TrainGan(n) = &cfg.engine else {
            panic!()
        };
        let engine = n.engine().unwrap();
        assert_eq!(engine.schedule, geometric_schedule(4, 1.0, 0.01).unwrap());
        assert_eq!(engine.schedule.len(), 4);
    }

    #[test]
    fn duplicate_key_names_both_lines() {
        let err = parse_config("run.kind = flow\n# c\nflow.steps = 3\nflow.steps = 4\n").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("lines 3 and 4"), "{msg}");
    }

    #[test]
    fn unknown_key_reports_line() {
        let msg = parse_config("run.kind = flow\n\nflow.stepz = 3\n")
            .unwrap_err()
            .to_string();
        assert!(msg.contains("flow.stepz") && msg.contains("line 3"), "{msg}");
        let msg = parse_config("run.kind = flow\nnats.outer = 3\n")
            .unwrap_err()
            .to_string();
        assert!(msg.contains("line 2") && msg.contains("does not apply"), "{msg}");
    }

    #[test]
    fn parse_errors_carry_position() {
        match parse_config("run.kind = flow\nflow.steps 3\n").unwrap_err() {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            e => panic!("{e}"),
        }
        match parse_config("run.kind = flow\nflow.schedule = geometric(1, x)\n").unwrap_err() {
            Error::Parse { line, column, .. } => assert_eq!((line, column), (2, 30)),
            e => panic!("{e}"),
        }
        assert!(parse_config("flow.steps = 3\n").is_err());
        assert!(parse_config("run.kind = flow\nrun.id = \"open\n").is_err());
    }

    #[test]
    fn semantic_errors() {
        for bad in [
            "run.kind = train-gan\nnats.n_d = 0\n",
            "run.kind = flow\nflow.start_mean = 1, 2, 3\n",
            "run.kind = train-gan\nmodel.disc_widths = 2, 8, 2\n",
            "run.kind = train-gan\nrun.seeds = 1, 1\n",
            "run.kind = flow\nrun.eval_every = 0\n",
            "run.kind = sample-langevin\nlangevin.gamma = 1.5\n",
            "run.kind = flow\ndata.target = ring(2.5, 1, 1)\n",
        ] {
            assert!(matches!(parse_config(bad), Err(Error::Config { .. })), "{bad}");
        }
    }

    #[test]
    fn kind_override_must_agree() {
        assert!(parse_config_for("", Some(ExperimentKind::GradCheck)).is_ok());
        assert!(parse_config_for("run.kind = flow\n", Some(ExperimentKind::Eval)).is_err());
    }

    #[test]
    fn round_trip_every_kind() {
        for kind in ExperimentKind::ALL {
            let cfg = RunConfig::defaults(kind);
            let back = parse_config(&emit_config(&cfg)).unwrap();
            assert_eq!(back, cfg, "{kind}");
        }
        let text = "run.kind = train-cfg\nrun.id = \"a b\"\nrun.seeds = 3, 18446744073709551615\ncfg.delta = computed\ncfg.phi0 = sign\ncfg.schedule = reverse(1, 0.01)\ncfg.eta_flow = 1.2345678901234567e-7 # tiny\nrun.out = \"dir # not a comment\"\n";
        let cfg = parse_config(text).unwrap();
        assert_eq!(cfg.run.seeds, vec![3, u64::MAX]);
        assert_eq!(cfg.run.out, "dir # not a comment");
        assert_eq!(parse_config(&emit_config(&cfg)).unwrap(), cfg);
    }

    #[test]
    fn bracketed_lists() {
        let cfg = parse_config("run.kind = train-gan\nrun.seeds = [4, 5]\nmodel.gen_widths = [2, 8, 2]\n").unwrap();
        assert_eq!(cfg.run.seeds, vec![4, 5]);
        assert_eq!(cfg.model.gen_widths, vec![2, 8, 2]);
        assert_eq!(
            parse_config("run.kind = flow\nrun.seeds = [7]\n").unwrap().run.seeds,
            vec![7]
        );
        let err = parse_config("run.kind = flow\nrun.seeds = [1, 2\n")
            .unwrap_err()
            .to_string();
        assert!(err.contains("line 2") && err.contains(']'), "{err}");
    }

    #[test]
    fn number_formatting_round_trips() {
        for v in [0.0, 1.0, -2.5, 1e-4, 1e-5, 3.3e-9, 1e20, 0.1 + 0.2, f64::MIN_POSITIVE] {
            assert_eq!(num(v).parse::<f64>().unwrap(), v, "{}", num(v));
        }
    }
}
