//! Field dumps, model snapshots and the run manifest.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::metrics::{GridSpec, ScoreField};
use crate::numerics::Tensor;

use super::config::num;

/// Text dump of a 2-D vector field on `grid`: a `FIELD v1` header then one
/// `x y gx gy` line per node, row-major.
pub fn field_dump(grid: &GridSpec, points: &Tensor, vectors: &Tensor) -> Result<String> {
    let n = grid.nx * grid.ny;
    if points.shape() != [n, 2] || vectors.shape() != [n, 2] {
        return Err(Error::Invalid(format!(
            "field dump needs {n} two-dimensional nodes, got points {:?} and vectors {:?}",
            points.shape(),
            vectors.shape()
        )));
    }
    let mut s = format!(
        "FIELD v1 {} {} {} {} {} {}\n",
        grid.nx,
        grid.ny,
        num(grid.xmin),
        num(grid.xmax),
        num(grid.ymin),
        num(grid.ymax)
    );
    for (p, v) in points.iter_rows().zip(vectors.iter_rows()) {
        let _ = writeln!(s, "{} {} {} {}", num(p[0]), num(p[1]), num(v[0]), num(v[1]));
    }
    Ok(s)
}

/// Dump of a critic's gradient field.
pub fn score_field_dump(field: &ScoreField) -> Result<String> {
    field_dump(&field.grid, &field.points, &field.grads)
}

/// A parsed field dump.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldDump {
    pub grid: GridSpec,
    pub points: Tensor,
    pub vectors: Tensor,
}

pub fn parse_field_dump(text: &str) -> Result<FieldDump> {
    let bad = |line: usize, m: &str| Error::Parse {
        line,
        column: 1,
        message: m.to_string(),
    };
    let mut lines = text.lines();
    let head: Vec<&str> = lines.next().unwrap_or("").split_whitespace().collect();
    if head.len() != 8 || head[0] != "FIELD" || head[1] != "v1" {
        return Err(bad(1, "expected `FIELD v1 nx ny xmin xmax ymin ymax`"));
    }
    let int = |s: &str| s.parse::<usize>().map_err(|_| bad(1, "bad grid size"));
    let flt = |s: &str| s.parse::<f64>().map_err(|_| bad(1, "bad grid bound"));
    let grid = GridSpec::new(
        int(head[2])?,
        int(head[3])?,
        (flt(head[4])?, flt(head[5])?),
        (flt(head[6])?, flt(head[7])?),
    );
    let (mut p, mut v) = (Vec::new(), Vec::new());
    for (i, l) in lines.enumerate() {
        let vals = l
            .split_whitespace()
            .map(|t| t.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| bad(i + 2, "bad number"))?;
        if vals.len() != 4 {
            return Err(bad(i + 2, "expected `x y gx gy`"));
        }
        p.extend_from_slice(&vals[..2]);
        v.extend_from_slice(&vals[2..]);
    }
    let n = p.len() / 2;
    if n != grid.nx * grid.ny {
        return Err(bad(1, "node count does not match the grid"));
    }
    Ok(FieldDump {
        grid,
        points: Tensor::new(vec![n, 2], p)?,
        vectors: Tensor::new(vec![n, 2], v)?,
    })
}

/// Git-style object hash: SHA-256 over `blob <len>\0` followed by the bytes.
pub fn blob_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    hex::encode(h.finalize())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub bytes: u64,
    pub hash: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub run_id: String,
    pub kind: String,
    /// Emitted config text.
    pub config: String,
    pub seeds: Vec<u64>,
    pub aborted: Vec<u64>,
    /// Every output file except the manifest, sorted by path.
    pub files: Vec<ManifestEntry>,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dump_header_and_rows() {
        let grid = GridSpec::new(2, 1, (-1.0, 1.0), (0.5, 0.5));
        let pts = grid.points();
        let vecs = Tensor::from_rows(&[[0.25, -1.0], [1e-9, 3.0]]).unwrap();
        let text = field_dump(&grid, &pts, &vecs).unwrap();
        assert_eq!(text, "FIELD v1 2 1 -1 1 0.5 0.5\n-1 0.5 0.25 -1\n1 0.5 1e-9 3\n");
        let back = parse_field_dump(&text).unwrap();
        assert_eq!((back.grid, back.points, back.vectors), (grid, pts, vecs));
        assert!(field_dump(&grid, &Tensor::zeros(&[3, 2]), &Tensor::zeros(&[3, 2])).is_err());
        assert!(parse_field_dump("FIELD v2 1 1 0 0 0 0\n0 0 0 0\n").is_err());
    }

    #[test]
    fn blob_hash_known_value() {
        // `git hash-object --object-format=sha256` of an empty file.
        assert_eq!(
            blob_hash(b""),
            "473a0f4c3be8a93681a267e3b1e9a7dcda1185436fe141f7749120a303721813"
        );
    }
}
