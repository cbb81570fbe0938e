//! Gate-gradient sparsifiers: coarse slice/region removal, fine tile
//! removal, the unified top-k column baseline and the identity.
//!
//! Selection ranks blocks by L2 norm; equal norms keep the lower index. An
//! all-zero region still loses exactly `S` slices (the highest-index ones),
//! so the enforced sparsity never depends on the data.

mod codec;
mod pattern;
mod report;
mod select;

use serde::{Deserialize, Serialize};

pub use codec::{decode_index, embed_index, CoarseGeometry, INDEX_BITS};
pub use pattern::SparsityPattern;
pub use report::{parse_matrix_text, sparsify_report, GroupStats, SparsifyReport, UnitNorm};
pub use select::{coarse_sparsify, fine_sparsify, meprop_topk};

use crate::error::{Error, Result};
use crate::tensor::{Matrix, Scalar};

/// Sparsifier choice and geometry.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum SparsifierConfig {
    Identity,
    Coarse {
        slice_width: usize,
        region: usize,
        removed: usize,
        #[serde(default)]
        embed_index: bool,
    },
    Fine {
        tile_rows: usize,
        tile_cols: usize,
        keep: usize,
    },
    ColumnTopK {
        k: usize,
    },
}

impl SparsifierConfig {
    /// Coarse method with P = 4.
    pub fn coarse(region: usize, removed: usize) -> Self {
        SparsifierConfig::Coarse {
            slice_width: 4,
            region,
            removed,
            embed_index: false,
        }
    }

    /// Fine method with My = 8, Mx = 4.
    pub fn fine(keep: usize) -> Self {
        SparsifierConfig::Fine {
            tile_rows: 8,
            tile_cols: 4,
            keep,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            SparsifierConfig::Identity => "identity",
            SparsifierConfig::Coarse { .. } => "coarse",
            SparsifierConfig::Fine { .. } => "fine",
            SparsifierConfig::ColumnTopK { .. } => "column-topk",
        }
    }

    pub fn is_identity(&self) -> bool {
        matches!(self, SparsifierConfig::Identity)
    }

    /// Checks that the geometry fits an `N x 4H` gate gradient.
    pub fn validate(&self, batch: usize, gate_width: usize) -> Result<()> {
        match *self {
            SparsifierConfig::Identity => Ok(()),
            SparsifierConfig::Coarse { slice_width, region, removed, embed_index } => {
                select::check_coarse(gate_width, slice_width, region, removed)?;
                if embed_index && region > 1 << INDEX_BITS {
                    return Err(Error::Capacity { region, bits: INDEX_BITS });
                }
                Ok(())
            }
            SparsifierConfig::Fine { tile_rows, tile_cols, keep } => {
                select::check_fine(batch, gate_width, tile_rows, tile_cols, keep)
            }
            SparsifierConfig::ColumnTopK { k } => {
                if k == 0 || k > gate_width {
                    Err(Error::Parameter(format!("top-k needs 1 <= k <= {gate_width}, got {k}")))
                } else {
                    Ok(())
                }
            }
        }
    }

    /// Sparsity this configuration enforces on an `N x 4H` gate gradient.
    pub fn sparsity(&self, batch: usize, gate_width: usize) -> f64 {
        match *self {
            SparsifierConfig::Identity => 0.0,
            SparsifierConfig::Coarse { region, removed, .. } => removed as f64 / region as f64,
            SparsifierConfig::Fine { tile_rows, keep, .. } => 1.0 - (keep * tile_rows) as f64 / batch as f64,
            SparsifierConfig::ColumnTopK { k } => 1.0 - k as f64 / gate_width as f64,
        }
    }

    /// Sparsifies one timestep's gate gradient.
    pub fn apply<T: Scalar>(&self, dnet: Matrix<T>) -> Result<GateGradient<T>> {
        match *self {
            SparsifierConfig::Identity => Ok(GateGradient::dense(dnet)),
            SparsifierConfig::Coarse { slice_width, region, removed, embed_index: embed } => {
                let g = coarse_sparsify(&dnet, slice_width, region, removed)?;
                if !embed {
                    return Ok(g);
                }
                let pattern = g.pattern.expect("coarse sparsifier sets a pattern");
                let embedded = embed_index(&g.dnet, &pattern)?;
                let geometry = CoarseGeometry::of(&pattern).expect("coarse pattern");
                let decoded = decode_index(&embedded, &geometry)?;
                debug_assert_eq!(decoded, pattern);
                Ok(GateGradient {
                    dnet: embedded,
                    pattern: Some(decoded),
                })
            }
            SparsifierConfig::Fine { tile_rows, tile_cols, keep } => fine_sparsify(&dnet, tile_rows, tile_cols, keep),
            SparsifierConfig::ColumnTopK { k } => meprop_topk(&dnet, k),
        }
    }
}

/// Gate gradient for one timestep. Coarse patterns store only the kept
/// slices (compacted left); every other kind stores the full `N x 4H`
/// matrix with removed entries set to zero.
#[derive(Clone, Debug, PartialEq)]
pub struct GateGradient<T: Scalar> {
    pub dnet: Matrix<T>,
    pub pattern: Option<SparsityPattern>,
}

impl<T: Scalar> GateGradient<T> {
    pub fn dense(dnet: Matrix<T>) -> Self {
        GateGradient { dnet, pattern: None }
    }

    pub fn is_compact(&self) -> bool {
        matches!(self.pattern, Some(SparsityPattern::Coarse { .. }))
    }

    /// Shape of the full gate gradient.
    pub fn full_shape(&self) -> (usize, usize) {
        match &self.pattern {
            Some(p) => p.shape(),
            None => self.dnet.shape(),
        }
    }

    /// Zero-filled `N x 4H` matrix equivalent to this gradient.
    pub fn expand(&self) -> Matrix<T> {
        match &self.pattern {
            Some(p @ SparsityPattern::Coarse { .. }) => {
                let (rows, cols) = p.shape();
                let kept = p.kept_columns().expect("coarse pattern");
                let mut full = Matrix::zeros(rows, cols);
                for r in 0..rows {
                    let src = self.dnet.row(r);
                    let dst = full.row_mut(r);
                    for (&c, &x) in kept.iter().zip(src) {
                        dst[c] = x;
                    }
                }
                full
            }
            _ => self.dnet.clone(),
        }
    }

    /// Adds the column sums of the (zero-filled) gradient to `db`.
    pub fn accumulate_bias(&self, db: &mut [T]) -> Result<()> {
        let (_, cols) = self.full_shape();
        if db.len() != cols {
            return Err(Error::shape("bias gradient", "db", (1, db.len()), "dnet", self.full_shape()));
        }
        let sums = self.dnet.column_sums();
        match &self.pattern {
            Some(p @ SparsityPattern::Coarse { .. }) => {
                let kept = p.kept_columns().expect("coarse pattern");
                for (&c, s) in kept.iter().zip(sums) {
                    db[c] += s;
                }
            }
            _ => {
                for (d, s) in db.iter_mut().zip(sums) {
                    *d += s;
                }
            }
        }
        Ok(())
    }
}

/// Normalized inner product `<a, b> / (|a| |b|)`, clamped to [-1, 1].
pub fn weight_gradient_correlation<T: Scalar>(dw_sparse: &Matrix<T>, dw_dense: &Matrix<T>) -> Result<f64> {
    if dw_sparse.shape() != dw_dense.shape() {
        return Err(Error::shape(
            "weight_gradient_correlation",
            "dw_sparse",
            dw_sparse.shape(),
            "dw_dense",
            dw_dense.shape(),
        ));
    }
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (&a, &b) in dw_sparse.data().iter().zip(dw_dense.data()) {
        let (a, b) = (a.to_f64(), b.to_f64());
        dot += a * b;
        na += a * a;
        nb += b * b;
    }
    if na == 0.0 || nb == 0.0 {
        return Err(Error::UndefinedCorrelation);
    }
    Ok((dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0))
}
