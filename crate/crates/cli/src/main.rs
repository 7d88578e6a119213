use std::path::PathBuf;
use std::process::ExitCode;

use cfg_anneal::harness::{
    compare_runs, emit_config, format_ranking, parse_config_for, run_experiment, Aggregation, ExperimentKind, Metric,
    RunConfig,
};
use clap::{Args, Parser, Subcommand};

/// Annealed functional-gradient GAN laboratory on analytic 2-D targets.
#[derive(Parser)]
#[command(name = "cfg-anneal", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Particle flow under the analytic optimal discriminator.
    Flow(Common),
    /// Composite functional gradient training.
    TrainCfg(Common),
    /// Alternating, nested or nested-annealed GAN training.
    TrainGan(Common),
    /// Plain or annealed Langevin sampling.
    SampleLangevin(Common),
    /// Metrics for a saved generator snapshot.
    Eval(Common),
    /// Discriminator gradient field against the analytic score gap.
    DumpField(Common),
    /// Finite-difference check of the autodiff on random networks.
    GradCheck(Common),
    /// Rank finished runs by their final evaluation.
    Compare(CompareArgs),
}

#[derive(Args)]
struct Common {
    /// Config file (`section.key = value` lines); defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Comma-separated seeds, overriding `run.seeds`.
    #[arg(long, value_delimiter = ',')]
    seed: Vec<u64>,
    /// Output directory, overriding `run.out`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Only report errors.
    #[arg(long)]
    quiet: bool,
}

#[derive(Args)]
struct CompareArgs {
    /// Run output directories.
    #[arg(required = true)]
    runs: Vec<PathBuf>,
    #[arg(long, default_value = "frechet")]
    metric: String,
    /// `median` or `min` over seeds.
    #[arg(long, default_value = "median")]
    agg: String,
    #[arg(long)]
    quiet: bool,
}

const EXIT_CONFIG: u8 = 1;
const EXIT_RUNTIME: u8 = 2;

fn load(kind: ExperimentKind, args: &Common) -> Result<RunConfig, String> {
    let text = match &args.config {
        Some(p) => std::fs::read_to_string(p).map_err(|e| format!("cannot read {}: {e}", p.display()))?,
        None => String::new(),
    };
    let mut cfg = parse_config_for(&text, Some(kind)).map_err(|e| e.to_string())?;
    if !args.seed.is_empty() {
        cfg.run.seeds = args.seed.clone();
    }
    if let Some(out) = &args.out {
        cfg.run.out = out.to_string_lossy().into_owned();
    }
    cfg.validate().map_err(|e| e.to_string())?;
    Ok(cfg)
}

fn run(kind: ExperimentKind, args: Common) -> ExitCode {
    let cfg = match load(kind, &args) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_CONFIG);
        }
    };
    if !args.quiet {
        print!("{}", emit_config(&cfg));
    }
    let outcome = match run_experiment(&cfg) {
        Ok(o) => o,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_RUNTIME);
        }
    };
    for (seed, err) in &outcome.aborted {
        eprintln!("seed {seed} aborted: {err}");
    }
    if !args.quiet {
        for seed in &cfg.run.seeds {
            if let Some(r) = outcome.rows.iter().rfind(|r| r.seed == *seed) {
                let show = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.6}"));
                println!(
                    "seed {seed}: iteration {} frechet {} kl {} modes {} quality {} score_gap {}",
                    r.iteration,
                    show(r.frechet),
                    show(r.kl),
                    r.modes_covered.map_or("-".to_string(), |m| m.to_string()),
                    show(r.quality),
                    show(r.score_gap),
                );
            }
        }
        println!("wrote {}", outcome.dir.display());
    }
    ExitCode::from(outcome.exit_code() as u8)
}

fn compare(args: CompareArgs) -> ExitCode {
    let parsed = args
        .metric
        .parse::<Metric>()
        .and_then(|m| args.agg.parse::<Aggregation>().map(|a| (m, a)));
    let (metric, agg) = match parsed {
        Ok(v) => v,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_CONFIG);
        }
    };
    match compare_runs(&args.runs, metric, agg) {
        Ok(rows) => {
            if !args.quiet {
                print!("{}", format_ranking(&rows));
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_RUNTIME)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let quiet = match &cli.command {
        Command::Compare(a) => a.quiet,
        Command::Flow(a)
        | Command::TrainCfg(a)
        | Command::TrainGan(a)
        | Command::SampleLangevin(a)
        | Command::Eval(a)
        | Command::DumpField(a)
        | Command::GradCheck(a) => a.quiet,
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(if quiet { "error" } else { "warn" }))
        .init();
    match cli.command {
        Command::Flow(a) => run(ExperimentKind::Flow, a),
        Command::TrainCfg(a) => run(ExperimentKind::TrainCfg, a),
        Command::TrainGan(a) => run(ExperimentKind::TrainGan, a),
        Command::SampleLangevin(a) => run(ExperimentKind::SampleLangevin, a),
        Command::Eval(a) => run(ExperimentKind::Eval, a),
        Command::DumpField(a) => run(ExperimentKind::DumpField, a),
        Command::GradCheck(a) => run(ExperimentKind::GradCheck, a),
        Command::Compare(a) => compare(a),
    }
}
