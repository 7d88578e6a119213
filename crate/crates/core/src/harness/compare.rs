//! Ranking of finished runs by a final-evaluation metric.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

use super::config::{data_signature, parse_config};
use super::record::{read_records, MetricsRecord};
use super::run::{read_manifest, METRICS_FILE};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    Frechet,
    Kl,
    ModesCovered,
    Quality,
    ScoreGap,
}

impl Metric {
    fn get(self, r: &MetricsRecord) -> Option<f64> {
        match self {
            Metric::Frechet => r.frechet,
            Metric::Kl => r.kl,
            Metric::ModesCovered => r.modes_covered.map(|v| v as f64),
            Metric::Quality => r.quality,
            Metric::ScoreGap => r.score_gap,
        }
    }

    pub fn higher_is_better(self) -> bool {
        matches!(self, Metric::ModesCovered | Metric::Quality)
    }
}

impl std::str::FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "frechet" => Metric::Frechet,
            "kl" => Metric::Kl,
            "modes_covered" => Metric::ModesCovered,
            "quality" => Metric::Quality,
            "score_gap" => Metric::ScoreGap,
            _ => return Err(Error::Invalid(format!("unknown metric `{s}`"))),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Aggregation {
    Median,
    Min,
}

impl std::str::FromStr for Aggregation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "median" => Ok(Aggregation::Median),
            "min" => Ok(Aggregation::Min),
            _ => Err(Error::Invalid(format!("unknown aggregation `{s}` (median or min)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankRow {
    pub rank: usize,
    /// Scheme, loss and nesting depth.
    pub label: String,
    pub runs: Vec<String>,
    pub seeds: usize,
    pub value: f64,
}

fn label(r: &MetricsRecord) -> String {
    let mut s = r.scheme.clone();
    if !r.loss.is_empty() {
        s.push_str(&format!(" loss={}", r.loss));
    }
    if let Some(n) = r.n_d {
        s.push_str(&format!(" n_d={n}"));
    }
    if let Some(m) = r.m {
        s.push_str(&format!(" m={m}"));
    }
    s
}

fn aggregate(mut v: Vec<f64>, agg: Aggregation) -> f64 {
    v.sort_by(f64::total_cmp);
    match agg {
        Aggregation::Min => v[0],
        Aggregation::Median => {
            let n = v.len();
            if n % 2 == 1 {
                v[n / 2]
            } else {
                0.5 * (v[n / 2 - 1] + v[n / 2])
            }
        }
    }
}

/// Final evaluation per seed, grouped by scheme label and aggregated,
/// best first. `aggregation` min means best-of-seeds for
/// higher-is-better metrics.
pub fn compare_runs<P: AsRef<Path>>(dirs: &[P], metric: Metric, aggregation: Aggregation) -> Result<Vec<RankRow>> {
    if dirs.is_empty() {
        return Err(Error::Invalid("compare needs at least one run".into()));
    }
    let mut reference: Option<(String, usize, String)> = None;
    let mut groups: BTreeMap<String, (Vec<String>, Vec<f64>)> = BTreeMap::new();
    for dir in dirs {
        let dir = dir.as_ref();
        let manifest = read_manifest(dir)?;
        let cfg = parse_config(&manifest.config)?;
        let sig = (data_signature(&cfg), cfg.run.eval_every, manifest.run_id.clone());
        match &reference {
            None => reference = Some(sig),
            Some((data, every, first)) => {
                if *data != sig.0 || *every != sig.1 {
                    return Err(Error::Invalid(format!(
                        "run `{}` is not comparable with `{first}`: dataset or evaluation cadence differs",
                        sig.2
                    )));
                }
            }
        }
        let rows = read_records(std::fs::File::open(dir.join(METRICS_FILE))?)?;
        let mut finals: BTreeMap<u64, &MetricsRecord> = BTreeMap::new();
        for r in &rows {
            if finals.get(&r.seed).is_none_or(|f| r.iteration >= f.iteration) {
                finals.insert(r.seed, r);
            }
        }
        for r in finals.values() {
            let Some(v) = metric.get(r) else { continue };
            let g = groups.entry(label(r)).or_default();
            if !g.0.contains(&manifest.run_id) {
                g.0.push(manifest.run_id.clone());
            }
            g.1.push(if metric.higher_is_better() { -v } else { v });
        }
    }
    let mut out: Vec<RankRow> = groups
        .into_iter()
        .map(|(label, (runs, vals))| {
            let seeds = vals.len();
            let v = aggregate(vals, aggregation);
            RankRow {
                rank: 0,
                label,
                runs,
                seeds,
                value: if metric.higher_is_better() { -v } else { v },
            }
        })
        .collect();
    out.sort_by(|a, b| {
        let ord = a.value.total_cmp(&b.value);
        if metric.higher_is_better() { ord.reverse() } else { ord }.then_with(|| a.label.cmp(&b.label))
    });
    for (i, r) in out.iter_mut().enumerate() {
        r.rank = i + 1;
    }
    Ok(out)
}

pub fn format_ranking(rows: &[RankRow]) -> String {
    let mut s = String::from("rank\tvalue\tseeds\tgroup\truns\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{}\t{:.6}\t{}\t{}\t{}",
            r.rank,
            r.value,
            r.seeds,
            r.label,
            r.runs.join(",")
        );
    }
    s
}
