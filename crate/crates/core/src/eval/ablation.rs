//! Codebook dimension and size grid.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::write_file;
use crate::{Error, Result};

/// Measurements of one trained cell.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub reconstruction: f64,
    pub perplexity: f64,
    pub pass1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub d_h: usize,
    pub k: usize,
    pub result: Option<CellResult>,
    pub error: Option<String>,
}

pub fn validate_grid(dims: &[usize], sizes: &[usize]) -> Result<()> {
    let mut errors = Vec::new();
    if dims.is_empty() {
        errors.push("ablation dims must be non-empty".into());
    }
    if sizes.is_empty() {
        errors.push("ablation sizes must be non-empty".into());
    }
    if dims.contains(&0) {
        errors.push("ablation dims must be positive".into());
    }
    if sizes.iter().any(|&k| k < 2) {
        errors.push("ablation sizes must be at least 2".into());
    }
    if errors.is_empty() {
        Ok(())
    } else {
        Err(Error::Config(errors))
    }
}

/// Runs `cell` for every `(d_h, K)` in row-major order. A failing cell is
/// recorded and the grid continues.
pub fn run_ablation_grid(
    dims: &[usize],
    sizes: &[usize],
    mut cell: impl FnMut(usize, usize) -> Result<CellResult>,
) -> Result<Vec<AblationRow>> {
    validate_grid(dims, sizes)?;
    let mut rows = Vec::with_capacity(dims.len() * sizes.len());
    for &d_h in dims {
        for &k in sizes {
            let row = match cell(d_h, k) {
                Ok(r) => AblationRow { d_h, k, result: Some(r), error: None },
                Err(e) => {
                    log::warn!("ablation cell d_h={d_h} K={k} failed: {e}");
                    AblationRow { d_h, k, result: None, error: Some(e.to_string()) }
                }
            };
            rows.push(row);
        }
    }
    Ok(rows)
}

pub fn write_csv(path: &Path, rows: &[AblationRow]) -> Result<()> {
    let mut out = String::from("d_h,K,reconstruction,perplexity,pass1,error\n");
    for r in rows {
        match (&r.result, &r.error) {
            (Some(c), _) => {
                out.push_str(&format!("{},{},{},{},{},\n", r.d_h, r.k, c.reconstruction, c.perplexity, c.pass1))
            }
            (None, e) => {
                out.push_str(&format!("{},{},,,,\"{}\"\n", r.d_h, r.k, e.as_deref().unwrap_or("").replace('"', "\"\"")))
            }
        }
    }
    write_file(path, out.as_bytes())
}
