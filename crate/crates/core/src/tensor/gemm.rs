use std::sync::atomic::{AtomicUsize, Ordering};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{MacCounter, Matrix, Scalar};
use crate::error::{Error, Result};

/// Output tile computed by one micro-kernel invocation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TileShape {
    pub rows: usize,
    pub cols: usize,
}

impl TileShape {
    /// Mirrors the fine-grained submatrix geometry (8x4).
    pub const DEFAULT: TileShape = TileShape { rows: 8, cols: 4 };
    pub const SUPPORTED: [TileShape; 5] = [
        TileShape { rows: 4, cols: 4 },
        TileShape { rows: 8, cols: 4 },
        TileShape { rows: 4, cols: 8 },
        TileShape { rows: 8, cols: 8 },
        TileShape { rows: 16, cols: 4 },
    ];
}

impl std::str::FromStr for TileShape {
    type Err = Error;
    /// Parses `ROWSxCOLS`, e.g. `8x4`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Parameter(format!("tile shape {s:?} is not of the form ROWSxCOLS"));
        let (r, c) = s.split_once('x').ok_or_else(bad)?;
        Ok(TileShape {
            rows: r.trim().parse().map_err(|_| bad())?,
            cols: c.trim().parse().map_err(|_| bad())?,
        })
    }
}

impl std::fmt::Display for TileShape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}", self.rows, self.cols)
    }
}

static TILE: AtomicUsize = AtomicUsize::new((8 << 16) | 4);

/// Sets the process-wide output tile. Results do not depend on it; only
/// speed does.
pub fn set_tile_shape(shape: TileShape) -> Result<()> {
    if !TileShape::SUPPORTED.contains(&shape) {
        return Err(Error::Parameter(format!(
            "unsupported tile shape {}x{}; supported: 4x4, 8x4, 4x8, 8x8, 16x4",
            shape.rows, shape.cols
        )));
    }
    TILE.store((shape.rows << 16) | shape.cols, Ordering::Relaxed);
    Ok(())
}

pub fn tile_shape() -> TileShape {
    let v = TILE.load(Ordering::Relaxed);
    TileShape {
        rows: v >> 16,
        cols: v & 0xffff,
    }
}

/// Logical (possibly transposed) read-only view of a row-major buffer.
#[derive(Clone, Copy)]
pub(crate) struct View<'a, T> {
    data: &'a [T],
    ld: usize,
    transposed: bool,
}

impl<'a, T: Scalar> View<'a, T> {
    pub(crate) fn of(m: &'a Matrix<T>, transposed: bool) -> Self {
        View {
            data: m.data(),
            ld: m.cols(),
            transposed,
        }
    }

    #[inline(always)]
    fn at(&self, r: usize, c: usize) -> T {
        if self.transposed {
            self.data[c * self.ld + r]
        } else {
            self.data[r * self.ld + c]
        }
    }
}

/// Gathered GEMM shared by the dense and pattern-aware kernels:
///
/// `out[out_rows[r], j] += sum_t a(a_rows[r], a_ks[t]) * b(b_ks[t], j)`
///
/// for every `r` and `j < n`, with `t` ascending. Output row panels are
/// independent and may be computed on different threads.
pub(crate) fn gemm_gather<T: Scalar>(
    a: View<'_, T>,
    a_rows: &[usize],
    a_ks: &[usize],
    b: View<'_, T>,
    b_ks: &[usize],
    n: usize,
    out: &mut Matrix<T>,
    out_rows: &[usize],
) {
    debug_assert_eq!(a_ks.len(), b_ks.len());
    debug_assert_eq!(a_rows.len(), out_rows.len());
    debug_assert!(n <= out.cols());
    if a_rows.is_empty() || n == 0 {
        return;
    }
    match tile_shape() {
        TileShape { rows: 4, cols: 4 } => run::<T, 4, 4>(a, a_rows, a_ks, b, b_ks, n, out, out_rows),
        TileShape { rows: 4, cols: 8 } => run::<T, 4, 8>(a, a_rows, a_ks, b, b_ks, n, out, out_rows),
        TileShape { rows: 8, cols: 8 } => run::<T, 8, 8>(a, a_rows, a_ks, b, b_ks, n, out, out_rows),
        TileShape { rows: 16, cols: 4 } => {
            run::<T, 16, 4>(a, a_rows, a_ks, b, b_ks, n, out, out_rows)
        }
        _ => run::<T, 8, 4>(a, a_rows, a_ks, b, b_ks, n, out, out_rows),
    }
}

#[allow(clippy::too_many_arguments)]
fn run<T: Scalar, const MR: usize, const NR: usize>(
    a: View<'_, T>,
    a_rows: &[usize],
    a_ks: &[usize],
    b: View<'_, T>,
    b_ks: &[usize],
    n: usize,
    out: &mut Matrix<T>,
    out_rows: &[usize],
) {
    let kk = a_ks.len();
    let col_panels = n.div_ceil(NR);

    // B packed as [col panel][t][NR], zero padded past n.
    let mut bp = vec![T::ZERO; col_panels * kk * NR];
    for jp in 0..col_panels {
        let panel = &mut bp[jp * kk * NR..(jp + 1) * kk * NR];
        for (t, &k) in b_ks.iter().enumerate() {
            for jj in 0..NR {
                let j = jp * NR + jj;
                if j < n {
                    panel[t * NR + jj] = b.at(k, j);
                }
            }
        }
    }

    let ldc = out.cols();
    let out_ref: &Matrix<T> = out;
    let panels: Vec<Vec<T>> = a_rows
        .par_chunks(MR)
        .zip(out_rows.par_chunks(MR))
        .map(|(rows, orows)| {
            let mr = rows.len();
            // A packed as [t][MR], zero padded past the panel's last row.
            let mut ap = vec![T::ZERO; kk * MR];
            for (t, &k) in a_ks.iter().enumerate() {
                for (ii, &r) in rows.iter().enumerate() {
                    ap[t * MR + ii] = a.at(r, k);
                }
            }
            let mut buf = Vec::with_capacity(mr * n);
            for &orow in orows {
                buf.extend_from_slice(&out_ref.data()[orow * ldc..orow * ldc + n]);
            }
            for jp in 0..col_panels {
                let j0 = jp * NR;
                let nr = NR.min(n - j0);
                let mut acc = [[T::ZERO; NR]; MR];
                for ii in 0..mr {
                    acc[ii][..nr].copy_from_slice(&buf[ii * n + j0..ii * n + j0 + nr]);
                }
                micro_kernel::<T, MR, NR>(&ap, &bp[jp * kk * NR..(jp + 1) * kk * NR], &mut acc);
                for ii in 0..mr {
                    buf[ii * n + j0..ii * n + j0 + nr].copy_from_slice(&acc[ii][..nr]);
                }
            }
            buf
        })
        .collect();

    let data = out.data_mut();
    for (chunk, buf) in out_rows.chunks(MR).zip(panels) {
        for (ii, &orow) in chunk.iter().enumerate() {
            data[orow * ldc..orow * ldc + n].copy_from_slice(&buf[ii * n..(ii + 1) * n]);
        }
    }
}

#[inline(always)]
fn micro_kernel<T: Scalar, const MR: usize, const NR: usize>(
    ap: &[T],
    bp: &[T],
    acc: &mut [[T; NR]; MR],
) {
    for (a, b) in ap.chunks_exact(MR).zip(bp.chunks_exact(NR)) {
        for i in 0..MR {
            let ai = a[i];
            for j in 0..NR {
                acc[i][j] = acc[i][j] + ai * b[j];
            }
        }
    }
}

/// `out += op(a) * op(b)`; records `m*n*k` dense and executed MACs.
pub fn gemm<T: Scalar>(
    a: &Matrix<T>,
    b: &Matrix<T>,
    out: &mut Matrix<T>,
    transpose_a: bool,
    transpose_b: bool,
    macs: &mut MacCounter,
) -> Result<()> {
    let (m, k) = if transpose_a {
        (a.cols(), a.rows())
    } else {
        a.shape()
    };
    let (kb, n) = if transpose_b {
        (b.cols(), b.rows())
    } else {
        b.shape()
    };
    if k != kb {
        return Err(Error::shape("gemm", "a", a.shape(), "b", b.shape()));
    }
    if out.shape() != (m, n) {
        return Err(Error::shape("gemm", "op(a)*op(b)", (m, n), "accumulate_into", out.shape()));
    }
    let rows: Vec<usize> = (0..m).collect();
    let ks: Vec<usize> = (0..k).collect();
    gemm_gather(
        View::of(a, transpose_a),
        &rows,
        &ks,
        View::of(b, transpose_b),
        &ks,
        n,
        out,
        &rows,
    );
    let total = (m * n * k) as u64;
    macs.record(total, total);
    Ok(())
}
