use serde::Serialize;

use super::{weight_gradient_correlation, SparsifierConfig, SparsityPattern};
use crate::error::{Error, Result};
use crate::tensor::{gemm, MacCounter, Matrix};

#[derive(Clone, Debug, Serialize)]
pub struct UnitNorm {
    pub index: usize,
    pub norm: f64,
    pub kept: bool,
}

/// One selection group: a region of slices (coarse), a slice of tiles
/// (fine) or all columns (top-k, identity).
#[derive(Clone, Debug, Serialize)]
pub struct GroupStats {
    pub group: usize,
    pub units: Vec<UnitNorm>,
    pub kept_norm: f64,
    pub removed_norm: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct SparsifyReport {
    pub config: SparsifierConfig,
    pub pattern: SparsityPattern,
    pub sparsity: f64,
    /// Share of the squared Frobenius norm that survives.
    pub retained_energy: f64,
    pub groups: Vec<GroupStats>,
    /// Correlation of `dnet_sparse^T x` with `dnet^T x` when `x` is given.
    pub weight_gradient_correlation: Option<f64>,
}

fn block_norm(m: &Matrix<f64>, rows: std::ops::Range<usize>, cols: std::ops::Range<usize>) -> f64 {
    rows.flat_map(|r| cols.clone().map(move |c| (r, c)))
        .map(|(r, c)| m[(r, c)] * m[(r, c)])
        .sum::<f64>()
        .sqrt()
}

fn group(index: usize, units: Vec<UnitNorm>) -> GroupStats {
    let energy = |kept: bool| units.iter().filter(|u| u.kept == kept).map(|u| u.norm * u.norm).sum::<f64>().sqrt();
    GroupStats {
        group: index,
        kept_norm: energy(true),
        removed_norm: energy(false),
        units,
    }
}

/// Sparsifies `dnet` (`N x 4H`) and reports per-unit norms. `input`, when
/// given, is the layer input `x` (`N x D`) used for the correlation.
pub fn sparsify_report(dnet: &Matrix<f64>, config: &SparsifierConfig, input: Option<&Matrix<f64>>) -> Result<SparsifyReport> {
    let (n, cols) = dnet.shape();
    config.validate(n, cols)?;
    let g = config.apply(dnet.clone())?;
    let pattern = g.pattern.clone().unwrap_or(SparsityPattern::Identity { rows: n, cols });
    let column_group = |keep: &dyn Fn(usize) -> bool| {
        let units = (0..cols)
            .map(|c| UnitNorm {
                index: c,
                norm: block_norm(dnet, 0..n, c..c + 1),
                kept: keep(c),
            })
            .collect();
        vec![group(0, units)]
    };
    let groups = match &pattern {
        SparsityPattern::Identity { .. } => column_group(&|_| true),
        SparsityPattern::ColumnTopK { kept, .. } => column_group(&|c| kept.binary_search(&c).is_ok()),
        SparsityPattern::Coarse { slice_width, region, kept, .. } => kept
            .iter()
            .enumerate()
            .map(|(ri, offs)| {
                let units = (0..*region)
                    .map(|o| {
                        let start = (ri * region + o) * slice_width;
                        UnitNorm {
                            index: o,
                            norm: block_norm(dnet, 0..n, start..start + slice_width),
                            kept: offs.contains(&o),
                        }
                    })
                    .collect();
                group(ri, units)
            })
            .collect(),
        SparsityPattern::Fine { tile_rows, tile_cols, kept, .. } => kept
            .iter()
            .enumerate()
            .map(|(si, tiles)| {
                let units = (0..n / tile_rows)
                    .map(|t| UnitNorm {
                        index: t,
                        norm: block_norm(dnet, t * tile_rows..(t + 1) * tile_rows, si * tile_cols..(si + 1) * tile_cols),
                        kept: tiles.contains(&t),
                    })
                    .collect();
                group(si, units)
            })
            .collect(),
    };
    let total = dnet.sum_squares();
    let expanded = g.expand();
    let retained_energy = if total == 0.0 { 1.0 } else { expanded.sum_squares() / total };
    let weight_gradient_correlation = match input {
        None => None,
        Some(x) => {
            if x.rows() != n {
                return Err(Error::shape("sparsify_report", "dnet", dnet.shape(), "x", x.shape()));
            }
            let mut sparse = Matrix::zeros(cols, x.cols());
            let mut dense = Matrix::zeros(cols, x.cols());
            gemm(&expanded, x, &mut sparse, true, false, &mut MacCounter::new())?;
            gemm(dnet, x, &mut dense, true, false, &mut MacCounter::new())?;
            Some(weight_gradient_correlation(&sparse, &dense)?)
        }
    };
    Ok(SparsifyReport {
        config: *config,
        sparsity: pattern.sparsity(),
        pattern,
        retained_energy,
        groups,
        weight_gradient_correlation,
    })
}

/// Whitespace-separated numbers, one matrix row per non-empty line.
pub fn parse_matrix_text(text: &str) -> Result<Matrix<f64>> {
    let mut data = Vec::new();
    let mut rows = 0;
    let mut cols = None;
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let row = line
            .split_whitespace()
            .map(|t| t.parse::<f64>().map_err(|e| Error::Format(format!("line {}: {t:?}: {e}", i + 1))))
            .collect::<Result<Vec<_>>>()?;
        match cols {
            None => cols = Some(row.len()),
            Some(c) if c != row.len() => {
                return Err(Error::Format(format!("line {} has {} values, expected {c}", i + 1, row.len())))
            }
            _ => {}
        }
        data.extend(row);
        rows += 1;
    }
    let cols = cols.ok_or_else(|| Error::Format("matrix file holds no rows".into()))?;
    Matrix::from_vec(rows, cols, data)
}

impl SparsifyReport {
    pub fn summary(&self) -> String {
        use std::fmt::Write;
        let mut s = self.pattern.describe();
        let _ = writeln!(s, "retained energy {:.6}", self.retained_energy);
        for g in &self.groups {
            let _ = write!(s, "group {}: kept norm {:.6}, removed norm {:.6} |", g.group, g.kept_norm, g.removed_norm);
            for u in &g.units {
                let _ = write!(s, " {}{}:{:.4}", if u.kept { "+" } else { "-" }, u.index, u.norm);
            }
            s.push('\n');
        }
        if let Some(c) = self.weight_gradient_correlation {
            let _ = writeln!(s, "weight gradient correlation {c:.6}");
        }
        s
    }
}
