use super::gemm::{gemm, gemm_gather, View};
use super::{MacCounter, Matrix, Scalar};
use crate::error::{Error, Result};
use crate::sparsify::{GateGradient, SparsityPattern};

/// Which backward product a gate-gradient GEMM computes.
///
/// * `Dx`, `DhPrev`: `out (N x K) += dnet (N x 4H) * other (4H x K)` with
///   `other` = W or U.
/// * `DW`, `DU`: `out (4H x K) += dnet^T (4H x N) * other (N x K)` with
///   `other` = x_t or h_{t-1}.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GemmMode {
    Dx,
    DhPrev,
    DW,
    DU,
}

impl GemmMode {
    pub const ALL: [GemmMode; 4] = [GemmMode::Dx, GemmMode::DhPrev, GemmMode::DW, GemmMode::DU];

    pub fn is_weight_gradient(self) -> bool {
        matches!(self, GemmMode::DW | GemmMode::DU)
    }
}

fn check_dims<T: Scalar>(
    op: &'static str,
    mode: GemmMode,
    full: (usize, usize),
    other: &Matrix<T>,
    out: &Matrix<T>,
) -> Result<()> {
    let (n, gates) = full;
    let (other_ok, out_shape) = if mode.is_weight_gradient() {
        (other.rows() == n, (gates, other.cols()))
    } else {
        (other.rows() == gates, (n, other.cols()))
    };
    if !other_ok {
        return Err(Error::shape(op, "dnet", full, "other", other.shape()));
    }
    if out.shape() != out_shape {
        return Err(Error::shape(op, "expected output", out_shape, "accumulate_into", out.shape()));
    }
    Ok(())
}

/// Coarse-pattern GEMM on a compacted gate gradient. Only kept slices take
/// part; the result equals the dense GEMM on the zero-filled gradient.
pub fn gemm_slice_skipped<T: Scalar>(
    dnet_compact: &Matrix<T>,
    pattern: &SparsityPattern,
    other: &Matrix<T>,
    mode: GemmMode,
    out: &mut Matrix<T>,
    macs: &mut MacCounter,
) -> Result<()> {
    let SparsityPattern::Coarse { .. } = pattern else {
        return Err(Error::Geometry(format!("slice-skipped GEMM needs a coarse pattern, got {}", pattern.kind())));
    };
    let full = pattern.shape();
    let kept = pattern.kept_columns().expect("coarse pattern");
    if dnet_compact.shape() != (full.0, kept.len()) {
        return Err(Error::shape(
            "gemm_slice_skipped",
            "dnet_compact",
            dnet_compact.shape(),
            "pattern (rows, kept columns)",
            (full.0, kept.len()),
        ));
    }
    check_dims("gemm_slice_skipped", mode, full, other, out)?;
    let (n, gates) = full;
    let k_out = other.cols();
    let compact_cols: Vec<usize> = (0..kept.len()).collect();
    let batch_rows: Vec<usize> = (0..n).collect();
    if mode.is_weight_gradient() {
        gemm_gather(
            View::of(dnet_compact, true),
            &compact_cols,
            &batch_rows,
            View::of(other, false),
            &batch_rows,
            k_out,
            out,
            &kept,
        );
    } else {
        gemm_gather(
            View::of(dnet_compact, false),
            &batch_rows,
            &compact_cols,
            View::of(other, false),
            &kept,
            k_out,
            out,
            &batch_rows,
        );
    }
    macs.record((n * gates * k_out) as u64, (n * kept.len() * k_out) as u64);
    Ok(())
}

/// Fine-pattern GEMM on a zero-masked gate gradient. Removed tiles are
/// skipped; the result equals the dense GEMM on the same matrix.
pub fn gemm_tile_skipped<T: Scalar>(
    dnet: &Matrix<T>,
    pattern: &SparsityPattern,
    other: &Matrix<T>,
    mode: GemmMode,
    out: &mut Matrix<T>,
    macs: &mut MacCounter,
) -> Result<()> {
    let SparsityPattern::Fine { rows, cols, tile_rows, tile_cols, kept, .. } = pattern else {
        return Err(Error::Geometry(format!("tile-skipped GEMM needs a fine pattern, got {}", pattern.kind())));
    };
    let (rows, cols, tile_rows, tile_cols) = (*rows, *cols, *tile_rows, *tile_cols);
    if rows % tile_rows != 0 || cols % tile_cols != 0 {
        return Err(Error::Geometry(format!(
            "{rows}x{cols} gate gradient is not divisible into {tile_rows}x{tile_cols} tiles"
        )));
    }
    if dnet.shape() != (rows, cols) {
        return Err(Error::shape("gemm_tile_skipped", "dnet", dnet.shape(), "pattern", (rows, cols)));
    }
    check_dims("gemm_tile_skipped", mode, (rows, cols), other, out)?;
    let k_out = other.cols();
    let mut executed = 0usize;
    if mode.is_weight_gradient() {
        // One call per slice: its columns become output rows, kept batch
        // rows form the contraction.
        for (s, tiles) in kept.iter().enumerate() {
            if tiles.is_empty() {
                continue;
            }
            let slice_cols: Vec<usize> = (s * tile_cols..(s + 1) * tile_cols).collect();
            let batch: Vec<usize> = tiles
                .iter()
                .flat_map(|&t| t * tile_rows..(t + 1) * tile_rows)
                .collect();
            gemm_gather(
                View::of(dnet, true),
                &slice_cols,
                &batch,
                View::of(other, false),
                &batch,
                k_out,
                out,
                &slice_cols,
            );
            executed += tile_cols * batch.len() * k_out;
        }
    } else {
        // One call per row block: its kept slices form the contraction.
        for block in 0..rows / tile_rows {
            let gate_cols: Vec<usize> = kept
                .iter()
                .enumerate()
                .filter(|(_, tiles)| tiles.binary_search(&block).is_ok())
                .flat_map(|(s, _)| s * tile_cols..(s + 1) * tile_cols)
                .collect();
            if gate_cols.is_empty() {
                continue;
            }
            let block_rows: Vec<usize> = (block * tile_rows..(block + 1) * tile_rows).collect();
            gemm_gather(
                View::of(dnet, false),
                &block_rows,
                &gate_cols,
                View::of(other, false),
                &gate_cols,
                k_out,
                out,
                &block_rows,
            );
            executed += tile_rows * gate_cols.len() * k_out;
        }
    }
    macs.record((rows * cols * k_out) as u64, executed as u64);
    Ok(())
}

/// Column top-k GEMM on a zero-masked gate gradient; only kept columns take
/// part.
pub fn gemm_column_skipped<T: Scalar>(
    dnet: &Matrix<T>,
    pattern: &SparsityPattern,
    other: &Matrix<T>,
    mode: GemmMode,
    out: &mut Matrix<T>,
    macs: &mut MacCounter,
) -> Result<()> {
    let SparsityPattern::ColumnTopK { rows, cols, kept, .. } = pattern else {
        return Err(Error::Geometry(format!(
            "column-skipped GEMM needs a column top-k pattern, got {}",
            pattern.kind()
        )));
    };
    if dnet.shape() != (*rows, *cols) {
        return Err(Error::shape("gemm_column_skipped", "dnet", dnet.shape(), "pattern", (*rows, *cols)));
    }
    check_dims("gemm_column_skipped", mode, (*rows, *cols), other, out)?;
    let k_out = other.cols();
    let batch: Vec<usize> = (0..*rows).collect();
    if mode.is_weight_gradient() {
        gemm_gather(View::of(dnet, true), kept, &batch, View::of(other, false), &batch, k_out, out, kept);
    } else {
        gemm_gather(View::of(dnet, false), &batch, kept, View::of(other, false), kept, k_out, out, &batch);
    }
    macs.record((rows * cols * k_out) as u64, (rows * kept.len() * k_out) as u64);
    Ok(())
}

/// Dispatches a backward product on whatever representation `grad` holds.
pub fn gemm_gate<T: Scalar>(
    grad: &GateGradient<T>,
    other: &Matrix<T>,
    mode: GemmMode,
    out: &mut Matrix<T>,
    macs: &mut MacCounter,
) -> Result<()> {
    match &grad.pattern {
        None | Some(SparsityPattern::Identity { .. }) => {
            check_dims("gemm_gate", mode, grad.dnet.shape(), other, out)?;
            gemm(&grad.dnet, other, out, mode.is_weight_gradient(), false, macs)
        }
        Some(p @ SparsityPattern::Coarse { .. }) => gemm_slice_skipped(&grad.dnet, p, other, mode, out, macs),
        Some(p @ SparsityPattern::Fine { .. }) => gemm_tile_skipped(&grad.dnet, p, other, mode, out, macs),
        Some(p @ SparsityPattern::ColumnTopK { .. }) => gemm_column_skipped(&grad.dnet, p, other, mode, out, macs),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sparsify::SparsifierConfig;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix<f32> {
        Matrix::from_fn(r, c, |_, _| rng.gen_range(-1.0..1.0))
    }

    fn dense_reference(full: &Matrix<f32>, other: &Matrix<f32>, mode: GemmMode, init: &Matrix<f32>) -> Matrix<f32> {
        let mut out = init.clone();
        gemm(full, other, &mut out, mode.is_weight_gradient(), false, &mut MacCounter::new()).unwrap();
        out
    }

    fn other_for(rng: &mut ChaCha8Rng, mode: GemmMode, n: usize, gates: usize, k: usize) -> Matrix<f32> {
        if mode.is_weight_gradient() {
            random(rng, n, k)
        } else {
            random(rng, gates, k)
        }
    }

    fn out_for(rng: &mut ChaCha8Rng, mode: GemmMode, n: usize, gates: usize, k: usize) -> Matrix<f32> {
        if mode.is_weight_gradient() {
            random(rng, gates, k)
        } else {
            random(rng, n, k)
        }
    }

    #[test]
    fn slice_skipped_keeping_everything_is_plain_gemm() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let dnet = random(&mut rng, 8, 32);
        let g = SparsifierConfig::coarse(8, 0).apply(dnet.clone()).unwrap();
        for mode in GemmMode::ALL {
            let other = other_for(&mut rng, mode, 8, 32, 5);
            let init = out_for(&mut rng, mode, 8, 32, 5);
            let mut out = init.clone();
            gemm_gate(&g, &other, mode, &mut out, &mut MacCounter::new()).unwrap();
            assert_eq!(out, dense_reference(&dnet, &other, mode, &init), "{mode:?}");
        }
    }

    #[test]
    fn slice_skipped_half_macs() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let dnet = random(&mut rng, 8, 32);
        let g = SparsifierConfig::coarse(8, 4).apply(dnet).unwrap();
        let w = random(&mut rng, 32, 6);
        let mut out = Matrix::zeros(8, 6);
        let mut macs = MacCounter::new();
        gemm_gate(&g, &w, GemmMode::Dx, &mut out, &mut macs).unwrap();
        assert_eq!(macs.executed_macs * 2, macs.dense_macs);
    }

    #[test]
    fn slice_skipped_matches_zero_expansion() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let dnet = random(&mut rng, 8, 16);
        let g = SparsifierConfig::coarse(4, 2).apply(dnet).unwrap();
        let full = g.expand();
        for mode in GemmMode::ALL {
            let other = other_for(&mut rng, mode, 8, 16, 7);
            let init = out_for(&mut rng, mode, 8, 16, 7);
            let mut out = init.clone();
            gemm_gate(&g, &other, mode, &mut out, &mut MacCounter::new()).unwrap();
            assert_eq!(out, dense_reference(&full, &other, mode, &init), "{mode:?}");
        }
    }

    #[test]
    fn tile_skipped_matches_zero_expansion() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let dnet = random(&mut rng, 16, 8);
        let g = SparsifierConfig::fine(1).apply(dnet).unwrap();
        for mode in GemmMode::ALL {
            let other = other_for(&mut rng, mode, 16, 8, 3);
            let init = out_for(&mut rng, mode, 16, 8, 3);
            let mut out = init.clone();
            let mut macs = MacCounter::new();
            gemm_gate(&g, &other, mode, &mut out, &mut macs).unwrap();
            assert_eq!(out, dense_reference(&g.dnet, &other, mode, &init), "{mode:?}");
            assert_eq!(macs.executed_macs * 2, macs.dense_macs);
        }
    }

    #[test]
    fn tile_skipped_all_kept_and_large_geometry() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let dnet = random(&mut rng, 64, 32);
        let all = SparsifierConfig::fine(8).apply(dnet.clone()).unwrap();
        let w = random(&mut rng, 32, 9);
        let mut out = Matrix::zeros(64, 9);
        gemm_gate(&all, &w, GemmMode::Dx, &mut out, &mut MacCounter::new()).unwrap();
        assert_eq!(out, dense_reference(&dnet, &w, GemmMode::Dx, &Matrix::zeros(64, 9)));

        let half = SparsifierConfig::fine(4).apply(dnet).unwrap();
        let mut macs = MacCounter::new();
        let mut out = Matrix::zeros(64, 9);
        gemm_gate(&half, &w, GemmMode::Dx, &mut out, &mut macs).unwrap();
        assert_eq!(macs.executed_macs * 2, macs.dense_macs);
    }

    #[test]
    fn column_skipped_matches_masked_dense() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let dnet = random(&mut rng, 4, 16);
        let g = SparsifierConfig::ColumnTopK { k: 8 }.apply(dnet).unwrap();
        for mode in GemmMode::ALL {
            let other = other_for(&mut rng, mode, 4, 16, 5);
            let init = out_for(&mut rng, mode, 4, 16, 5);
            let mut out = init.clone();
            let mut macs = MacCounter::new();
            gemm_gate(&g, &other, mode, &mut out, &mut macs).unwrap();
            assert_eq!(out, dense_reference(&g.dnet, &other, mode, &init));
            assert_eq!(macs.ratio(), 0.5);
        }
    }

    #[test]
    fn geometry_mismatches_are_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let g = SparsifierConfig::coarse(4, 2).apply(random(&mut rng, 8, 16)).unwrap();
        let wrong = random(&mut rng, 15, 3);
        let mut out = Matrix::zeros(8, 3);
        assert!(gemm_gate(&g, &wrong, GemmMode::Dx, &mut out, &mut MacCounter::new()).is_err());
        let fine = SparsifierConfig::fine(1).apply(random(&mut rng, 16, 8)).unwrap();
        let p = fine.pattern.clone().unwrap();
        let w = random(&mut rng, 8, 3);
        assert!(gemm_slice_skipped(&fine.dnet, &p, &w, GemmMode::Dx, &mut Matrix::zeros(16, 3), &mut MacCounter::new()).is_err());
        let bad = SparsityPattern::Fine { rows: 12, cols: 8, tile_rows: 8, tile_cols: 4, keep: 1, kept: vec![vec![0], vec![0]] };
        let d = random(&mut rng, 12, 8);
        let err = gemm_tile_skipped(&d, &bad, &w, GemmMode::Dx, &mut Matrix::zeros(12, 3), &mut MacCounter::new());
        assert!(matches!(err, Err(Error::Geometry(_))));
    }
}
