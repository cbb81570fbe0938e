use super::{GateGradient, SparsityPattern};
use crate::error::{Error, Result};
use crate::tensor::{Matrix, Scalar};

/// Indices of the `keep` largest norms, ascending. Equal norms keep the
/// lower index.
pub(crate) fn keep_largest<T: Scalar>(norms: &[T], keep: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..norms.len()).collect();
    order.sort_by(|&a, &b| norms[b].total_cmp(&norms[a]).then(a.cmp(&b)));
    let mut kept = order[..keep].to_vec();
    kept.sort_unstable();
    kept
}

/// L2 norm of the `rows x width` block at (`r0`, `c0`), summed row-major.
pub(crate) fn block_norm<T: Scalar>(m: &Matrix<T>, r0: usize, rows: usize, c0: usize, width: usize) -> T {
    let mut acc = T::ZERO;
    for r in r0..r0 + rows {
        for &x in &m.row(r)[c0..c0 + width] {
            acc += x * x;
        }
    }
    acc.sqrt()
}

pub(crate) fn check_coarse(cols: usize, slice_width: usize, region: usize, removed: usize) -> Result<()> {
    if slice_width == 0 || region == 0 {
        return Err(Error::Geometry("slice width and region size must be positive".into()));
    }
    if cols % slice_width != 0 {
        return Err(Error::Geometry(format!(
            "gate width {cols} is not divisible by slice width {slice_width}"
        )));
    }
    let slices = cols / slice_width;
    if slices % region != 0 {
        return Err(Error::Geometry(format!(
            "{slices} slices cannot be grouped into regions of {region}"
        )));
    }
    if removed >= region {
        return Err(Error::Geometry(format!(
            "cannot remove {removed} of {region} slices per region"
        )));
    }
    Ok(())
}

pub(crate) fn check_fine(rows: usize, cols: usize, tile_rows: usize, tile_cols: usize, keep: usize) -> Result<()> {
    if tile_rows == 0 || tile_cols == 0 {
        return Err(Error::Geometry("tile dimensions must be positive".into()));
    }
    if rows % tile_rows != 0 {
        return Err(Error::Geometry(format!(
            "batch {rows} is not divisible by tile rows {tile_rows}"
        )));
    }
    if cols % tile_cols != 0 {
        return Err(Error::Geometry(format!(
            "gate width {cols} is not divisible by tile columns {tile_cols}"
        )));
    }
    if keep > rows / tile_rows {
        return Err(Error::Geometry(format!(
            "cannot keep {keep} of {} tiles per slice",
            rows / tile_rows
        )));
    }
    Ok(())
}

/// Removes the `removed` lowest-norm slices of every region and compacts the
/// surviving slices to the left.
pub fn coarse_sparsify<T: Scalar>(
    dnet: &Matrix<T>,
    slice_width: usize,
    region: usize,
    removed: usize,
) -> Result<GateGradient<T>> {
    let (rows, cols) = dnet.shape();
    check_coarse(cols, slice_width, region, removed)?;
    let slices = cols / slice_width;
    let norms: Vec<T> = (0..slices)
        .map(|s| block_norm(dnet, 0, rows, s * slice_width, slice_width))
        .collect();
    let kept: Vec<Vec<usize>> = norms
        .chunks(region)
        .map(|region_norms| keep_largest(region_norms, region - removed))
        .collect();
    let pattern = SparsityPattern::Coarse {
        rows,
        cols,
        slice_width,
        region,
        removed,
        kept,
    };
    let kept_cols = pattern.kept_columns().expect("coarse pattern is column granular");
    let compact = Matrix::from_fn(rows, kept_cols.len(), |r, c| dnet[(r, kept_cols[c])]);
    Ok(GateGradient {
        dnet: compact,
        pattern: Some(pattern),
    })
}

/// Keeps the `keep` highest-norm `tile_rows x tile_cols` tiles of every
/// `rows x tile_cols` slice and zeroes the rest in place.
pub fn fine_sparsify<T: Scalar>(
    dnet: &Matrix<T>,
    tile_rows: usize,
    tile_cols: usize,
    keep: usize,
) -> Result<GateGradient<T>> {
    let (rows, cols) = dnet.shape();
    check_fine(rows, cols, tile_rows, tile_cols, keep)?;
    let tiles = rows / tile_rows;
    let mut masked = dnet.clone();
    let mut kept = Vec::with_capacity(cols / tile_cols);
    for s in 0..cols / tile_cols {
        let c0 = s * tile_cols;
        let norms: Vec<T> = (0..tiles)
            .map(|t| block_norm(dnet, t * tile_rows, tile_rows, c0, tile_cols))
            .collect();
        let keep_tiles = keep_largest(&norms, keep);
        for t in 0..tiles {
            if keep_tiles.binary_search(&t).is_err() {
                for r in t * tile_rows..(t + 1) * tile_rows {
                    masked.row_mut(r)[c0..c0 + tile_cols].fill(T::ZERO);
                }
            }
        }
        kept.push(keep_tiles);
    }
    Ok(GateGradient {
        dnet: masked,
        pattern: Some(SparsityPattern::Fine {
            rows,
            cols,
            tile_rows,
            tile_cols,
            keep,
            kept,
        }),
    })
}

/// Unified top-k: keeps the `k` columns with the largest L2 norm over the
/// batch and zeroes the rest.
pub fn meprop_topk<T: Scalar>(dnet: &Matrix<T>, k: usize) -> Result<GateGradient<T>> {
    let (rows, cols) = dnet.shape();
    if k == 0 || k > cols {
        return Err(Error::Parameter(format!("top-k needs 1 <= k <= {cols}, got {k}")));
    }
    let mut sq = vec![T::ZERO; cols];
    for r in 0..rows {
        for (acc, &x) in sq.iter_mut().zip(dnet.row(r)) {
            *acc += x * x;
        }
    }
    let norms: Vec<T> = sq.into_iter().map(T::sqrt).collect();
    let kept = keep_largest(&norms, k);
    let mut keep_mask = vec![false; cols];
    for &c in &kept {
        keep_mask[c] = true;
    }
    let mut masked = dnet.clone();
    for r in 0..rows {
        for (x, &keep) in masked.row_mut(r).iter_mut().zip(&keep_mask) {
            if !keep {
                *x = T::ZERO;
            }
        }
    }
    Ok(GateGradient {
        dnet: masked,
        pattern: Some(SparsityPattern::ColumnTopK { rows, cols, k, kept }),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Column block `[4s, 4s+4)` of a 2x16 matrix with slice norm `norms[s]`.
    fn slices_with_norms(norms: &[f64]) -> Matrix<f64> {
        // Each slice holds a single nonzero entry equal to its norm.
        Matrix::from_fn(2, 4 * norms.len(), |r, c| {
            if r == 0 && c % 4 == 0 {
                norms[c / 4]
            } else {
                0.0
            }
        })
    }

    #[test]
    fn coarse_keeps_largest_slices() {
        let m = slices_with_norms(&[1.0, 3.0, 2.0, 4.0]);
        let g = coarse_sparsify(&m, 4, 4, 2).unwrap();
        match g.pattern.as_ref().unwrap() {
            SparsityPattern::Coarse { kept, .. } => assert_eq!(kept, &vec![vec![1, 3]]),
            p => panic!("unexpected {p:?}"),
        }
        assert_eq!(g.dnet.shape(), (2, 8));
        assert_eq!(g.dnet[(0, 0)], 3.0);
        assert_eq!(g.dnet[(0, 4)], 4.0);
    }

    #[test]
    fn coarse_half_per_region() {
        let m = Matrix::<f64>::from_fn(4, 64, |r, c| ((r * 64 + c) as f64 * 0.37).sin());
        let g = coarse_sparsify(&m, 4, 8, 4).unwrap();
        let p = g.pattern.unwrap();
        if let SparsityPattern::Coarse { kept, .. } = &p {
            assert!(kept.iter().all(|k| k.len() == 4));
        }
        assert_eq!(p.sparsity(), 0.5);
        assert_eq!(g.dnet.cols(), 32);
    }

    #[test]
    fn coarse_without_removal_is_identity() {
        let m = Matrix::<f32>::from_fn(3, 16, |r, c| (r + c) as f32);
        let g = coarse_sparsify(&m, 4, 4, 0).unwrap();
        assert_eq!(g.dnet, m);
    }

    #[test]
    fn coarse_all_zero_region_removes_highest_indices() {
        let m = Matrix::<f64>::zeros(2, 16);
        let g = coarse_sparsify(&m, 4, 4, 3).unwrap();
        match g.pattern.unwrap() {
            SparsityPattern::Coarse { kept, .. } => assert_eq!(kept, vec![vec![0]]),
            _ => unreachable!(),
        }
    }

    #[test]
    fn coarse_geometry_errors() {
        let m = Matrix::<f64>::zeros(2, 18);
        assert!(matches!(coarse_sparsify(&m, 4, 4, 2), Err(Error::Geometry(_))));
        let m = Matrix::<f64>::zeros(2, 24);
        assert!(matches!(coarse_sparsify(&m, 4, 4, 2), Err(Error::Geometry(_))));
        assert!(matches!(coarse_sparsify(&m, 4, 6, 6), Err(Error::Geometry(_))));
    }

    #[test]
    fn fine_keeps_stronger_tile() {
        // 16x4 slice: tile 0 has norm 5, tile 1 has norm 1.
        let m = Matrix::<f64>::from_fn(16, 4, |r, c| match (r, c) {
            (0, 0) => 3.0,
            (1, 1) => 4.0,
            (8, 0) => 1.0,
            _ => 0.0,
        });
        let g = fine_sparsify(&m, 8, 4, 1).unwrap();
        assert_eq!(g.dnet[(0, 0)], 3.0);
        assert_eq!(g.dnet[(8, 0)], 0.0);
        match g.pattern.unwrap() {
            SparsityPattern::Fine { kept, .. } => assert_eq!(kept, vec![vec![0]]),
            _ => unreachable!(),
        }
    }

    #[test]
    fn fine_large_geometry_and_identity() {
        let m = Matrix::<f32>::from_fn(64, 32, |r, c| ((r * 31 + c * 7) % 13) as f32 - 6.0);
        let g = fine_sparsify(&m, 8, 4, 4).unwrap();
        assert_eq!(g.pattern.as_ref().unwrap().sparsity(), 0.5);
        let all = fine_sparsify(&m, 8, 4, 8).unwrap();
        assert_eq!(all.dnet, m);
        assert!(matches!(fine_sparsify(&m, 5, 4, 1), Err(Error::Geometry(_))));
        assert!(matches!(fine_sparsify(&m, 8, 3, 1), Err(Error::Geometry(_))));
        assert!(matches!(fine_sparsify(&m, 8, 4, 9), Err(Error::Geometry(_))));
    }

    #[test]
    fn topk_keeps_strongest_columns() {
        let m = Matrix::<f64>::from_rows(&[&[2.0, 9.0, 4.0]]);
        let g = meprop_topk(&m, 2).unwrap();
        assert_eq!(g.dnet, Matrix::from_rows(&[&[0.0, 9.0, 4.0]]));
        match g.pattern.unwrap() {
            SparsityPattern::ColumnTopK { kept, .. } => assert_eq!(kept, vec![1, 2]),
            _ => unreachable!(),
        }
        assert!(matches!(meprop_topk(&m, 0), Err(Error::Parameter(_))));
        assert!(matches!(meprop_topk(&m, 4), Err(Error::Parameter(_))));
        assert_eq!(meprop_topk(&m, 3).unwrap().dnet, m);
    }

    #[test]
    fn topk_half_of_gate_width() {
        let h = 8;
        let m = Matrix::<f64>::from_fn(4, 4 * h, |r, c| (r as f64 + 1.0) * (c as f64 - 11.5));
        let g = meprop_topk(&m, 2 * h).unwrap();
        assert_eq!(g.pattern.unwrap().sparsity(), 0.5);
    }
}
