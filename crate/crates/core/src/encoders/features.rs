//! Precomputed-feature files.
//!
//! JSON lines, one record per line:
//!
//! ```text
//! {"id":"s0","modality":"video","shape":[3,4],"data":[0.1, ...]}
//! ```
//!
//! `data` is row-major `f32` with `shape[0] * shape[1]` entries. Files written
//! by [`write_feature_file`] are named by the SHA-256 of their contents.

use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::Modality;
use crate::autodiff::Matrix;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureRecord {
    pub id: String,
    pub modality: Modality,
    pub shape: [usize; 2],
    pub data: Vec<f32>,
}

impl FeatureRecord {
    pub fn from_matrix(id: impl Into<String>, modality: Modality, m: &Matrix) -> Self {
        Self {
            id: id.into(),
            modality,
            shape: [m.nrows(), m.ncols()],
            data: m.iter().map(|&v| v as f32).collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let [rows, cols] = self.shape;
        if rows == 0 || cols == 0 {
            return Err(Error::record(&self.id, "feature shape must be positive"));
        }
        if rows * cols != self.data.len() {
            return Err(Error::record(
                &self.id,
                format!(
                    "shape {rows}×{cols} needs {} values, found {}",
                    rows * cols,
                    self.data.len()
                ),
            ));
        }
        if self.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::record(&self.id, "non-finite feature value"));
        }
        Ok(())
    }

    pub fn to_matrix(&self) -> Matrix {
        Matrix::from_shape_vec(
            (self.shape[0], self.shape[1]),
            self.data.iter().map(|&v| v as f64).collect(),
        )
        .expect("validated shape")
    }
}

pub fn read_feature_file(path: &Path) -> Result<Vec<FeatureRecord>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: FeatureRecord = serde_json::from_str(&line).map_err(|e| {
            Error::invalid(format!("{}:{}: {e}", path.display(), lineno + 1))
        })?;
        rec.validate()?;
        out.push(rec);
    }
    Ok(out)
}

/// Write `records` into `dir` under a content-addressed name and return the
/// file name. Rewriting identical content is a no-op.
pub fn write_feature_file(dir: &Path, records: &[FeatureRecord]) -> Result<String> {
    let mut body = String::new();
    for rec in records {
        body.push_str(&serde_json::to_string(rec).expect("record serializes"));
        body.push('\n');
    }
    let name = format!("{}.jsonl", hex::encode(Sha256::digest(body.as_bytes())));
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join(&name);
    if !path.exists() {
        fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
    }
    Ok(name)
}
