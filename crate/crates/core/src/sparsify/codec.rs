//! Offset-index embedding in the low mantissa bits of a compacted coarse
//! gate gradient.
//!
//! Every element of a kept slice carries that slice's offset inside its
//! sparsifying region in its `INDEX_BITS` least significant mantissa bits,
//! so the pattern can be recovered from the matrix alone. For normal `f32`
//! values the relative perturbation is below `31 * 2^-23 < 2^-18`. Zero and
//! subnormal elements are overwritten the same way; the bound does not hold
//! for them.

use serde::{Deserialize, Serialize};

use super::select::check_coarse;
use super::SparsityPattern;
use crate::error::{Error, Result};
use crate::tensor::{Matrix, Scalar};

/// Mantissa bits reserved for one offset.
pub const INDEX_BITS: u32 = 5;
const INDEX_MASK: u64 = (1 << INDEX_BITS) - 1;

/// Geometry needed to decode an embedded coarse pattern.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CoarseGeometry {
    pub rows: usize,
    pub cols: usize,
    pub slice_width: usize,
    pub region: usize,
    pub removed: usize,
}

impl CoarseGeometry {
    pub fn of(pattern: &SparsityPattern) -> Option<Self> {
        match *pattern {
            SparsityPattern::Coarse { rows, cols, slice_width, region, removed, .. } => Some(CoarseGeometry {
                rows,
                cols,
                slice_width,
                region,
                removed,
            }),
            _ => None,
        }
    }

    fn compact_cols(&self) -> usize {
        let regions = self.cols / self.slice_width / self.region;
        regions * (self.region - self.removed) * self.slice_width
    }
}

fn check_capacity(region: usize) -> Result<()> {
    if region > 1 << INDEX_BITS {
        return Err(Error::Capacity {
            region,
            bits: INDEX_BITS,
        });
    }
    Ok(())
}

#[inline]
fn with_index<T: Scalar>(x: T, offset: usize) -> T {
    T::from_bits_u64((x.to_bits_u64() & !INDEX_MASK) | offset as u64)
}

#[inline]
fn index_of<T: Scalar>(x: T) -> usize {
    (x.to_bits_u64() & INDEX_MASK) as usize
}

/// Writes each kept slice's region offset into the low mantissa bits of
/// every element of that slice.
pub fn embed_index<T: Scalar>(compact: &Matrix<T>, pattern: &SparsityPattern) -> Result<Matrix<T>> {
    let SparsityPattern::Coarse { rows, slice_width, region, removed, kept, .. } = pattern else {
        return Err(Error::Parameter(format!(
            "index embedding needs a coarse pattern, got {}",
            pattern.kind()
        )));
    };
    check_capacity(*region)?;
    pattern.validate()?;
    let per_region = region - removed;
    let expected = (*rows, kept.len() * per_region * slice_width);
    if compact.shape() != expected {
        return Err(Error::shape("embed_index", "compact", compact.shape(), "pattern", expected));
    }
    let offsets: Vec<usize> = kept.iter().flatten().copied().collect();
    let mut out = compact.clone();
    for r in 0..*rows {
        for (c, x) in out.row_mut(r).iter_mut().enumerate() {
            *x = with_index(*x, offsets[c / slice_width]);
        }
    }
    Ok(out)
}

/// Recovers the coarse pattern from an embedded matrix. All elements of a
/// slice must agree on the offset.
pub fn decode_index<T: Scalar>(embedded: &Matrix<T>, geometry: &CoarseGeometry) -> Result<SparsityPattern> {
    let CoarseGeometry { rows, cols, slice_width, region, removed } = *geometry;
    check_coarse(cols, slice_width, region, removed)?;
    check_capacity(region)?;
    let expected = (rows, geometry.compact_cols());
    if embedded.shape() != expected {
        return Err(Error::shape("decode_index", "embedded", embedded.shape(), "geometry", expected));
    }
    let slices = expected.1 / slice_width;
    let mut offsets = Vec::with_capacity(slices);
    for s in 0..slices {
        let c0 = s * slice_width;
        let first = index_of(embedded[(0, c0)]);
        for r in 0..rows {
            for &x in &embedded.row(r)[c0..c0 + slice_width] {
                if index_of(x) != first {
                    return Err(Error::Corruption(format!(
                        "compact slice {s}: element in row {r} encodes {} but slice starts with {first}",
                        index_of(x)
                    )));
                }
            }
        }
        offsets.push(first);
    }
    let per_region = region - removed;
    let kept: Vec<Vec<usize>> = offsets.chunks(per_region).map(<[usize]>::to_vec).collect();
    for (r, offs) in kept.iter().enumerate() {
        let increasing = offs.windows(2).all(|w| w[0] < w[1]);
        if !increasing || offs.iter().any(|&o| o >= region) {
            return Err(Error::Corruption(format!(
                "region {r} decodes to invalid offsets {offs:?}"
            )));
        }
    }
    Ok(SparsityPattern::Coarse {
        rows,
        cols,
        slice_width,
        region,
        removed,
        kept,
    })
}
