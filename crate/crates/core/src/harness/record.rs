//! Per-evaluation metrics rows and their CSV form.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Column order of every metrics CSV.
pub const CSV_COLUMNS: [&str; 13] = [
    "run_id",
    "seed",
    "iteration",
    "scheme",
    "loss",
    "n_d",
    "m",
    "frechet",
    "kl",
    "modes_covered",
    "quality",
    "score_gap",
    "wall_ms",
];

/// One evaluation event. Fields that do not apply to a run are empty.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub run_id: String,
    pub seed: u64,
    pub iteration: usize,
    pub scheme: String,
    pub loss: String,
    pub n_d: Option<usize>,
    pub m: Option<usize>,
    pub frechet: Option<f64>,
    pub kl: Option<f64>,
    pub modes_covered: Option<usize>,
    pub quality: Option<f64>,
    pub score_gap: Option<f64>,
    pub wall_ms: Option<u64>,
}

/// Writes a header and `rows` in order.
pub fn write_records<W: Write>(out: W, rows: &[MetricsRecord]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    w.write_record(CSV_COLUMNS)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads rows back, rejecting any header other than [`CSV_COLUMNS`].
pub fn read_records<R: Read>(input: R) -> Result<Vec<MetricsRecord>> {
    let mut r = csv::Reader::from_reader(input);
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header != CSV_COLUMNS {
        return Err(Error::Invalid(format!("unexpected metrics header {header:?}")));
    }
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}
