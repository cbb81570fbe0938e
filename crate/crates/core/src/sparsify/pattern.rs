use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which parts of an `N x 4H` gate gradient survived sparsification.
///
/// `rows`/`cols` always describe the full (uncompacted) gate gradient.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum SparsityPattern {
    Identity {
        rows: usize,
        cols: usize,
    },
    /// Slices of `slice_width` consecutive columns, grouped into regions of
    /// `region` slices; `kept[r]` lists the kept offsets inside region `r`.
    Coarse {
        rows: usize,
        cols: usize,
        slice_width: usize,
        region: usize,
        removed: usize,
        kept: Vec<Vec<usize>>,
    },
    /// Slices of `tile_cols` columns split into `tile_rows x tile_cols`
    /// tiles; `kept[s]` lists the kept tile rows of slice `s`.
    Fine {
        rows: usize,
        cols: usize,
        tile_rows: usize,
        tile_cols: usize,
        keep: usize,
        kept: Vec<Vec<usize>>,
    },
    /// Whole columns shared across the minibatch.
    ColumnTopK {
        rows: usize,
        cols: usize,
        k: usize,
        kept: Vec<usize>,
    },
}

fn strictly_increasing_below(idx: &[usize], bound: usize) -> bool {
    idx.windows(2).all(|w| w[0] < w[1]) && idx.iter().all(|&i| i < bound)
}

impl SparsityPattern {
    pub fn kind(&self) -> &'static str {
        match self {
            SparsityPattern::Identity { .. } => "identity",
            SparsityPattern::Coarse { .. } => "coarse",
            SparsityPattern::Fine { .. } => "fine",
            SparsityPattern::ColumnTopK { .. } => "column-topk",
        }
    }

    /// Shape of the full gate gradient this pattern applies to.
    pub fn shape(&self) -> (usize, usize) {
        match *self {
            SparsityPattern::Identity { rows, cols }
            | SparsityPattern::Coarse { rows, cols, .. }
            | SparsityPattern::Fine { rows, cols, .. }
            | SparsityPattern::ColumnTopK { rows, cols, .. } => (rows, cols),
        }
    }

    /// Kept and total removal units (slices, tiles or columns).
    pub fn kept_units(&self) -> (usize, usize) {
        match self {
            SparsityPattern::Identity { .. } => (1, 1),
            SparsityPattern::Coarse { cols, slice_width, kept, .. } => {
                (kept.iter().map(Vec::len).sum(), cols / slice_width)
            }
            SparsityPattern::Fine { rows, tile_rows, kept, .. } => {
                (kept.iter().map(Vec::len).sum(), kept.len() * (rows / tile_rows))
            }
            SparsityPattern::ColumnTopK { cols, kept, .. } => (kept.len(), *cols),
        }
    }

    /// Fraction of the gate gradient removed, from the geometry alone.
    pub fn sparsity(&self) -> f64 {
        match *self {
            SparsityPattern::Identity { .. } => 0.0,
            SparsityPattern::Coarse { region, removed, .. } => removed as f64 / region as f64,
            SparsityPattern::Fine { rows, tile_rows, keep, .. } => {
                1.0 - (keep * tile_rows) as f64 / rows as f64
            }
            SparsityPattern::ColumnTopK { cols, k, .. } => 1.0 - k as f64 / cols as f64,
        }
    }

    /// Global indices of kept columns for column-granular patterns
    /// (identity, coarse, column top-k), ascending.
    pub fn kept_columns(&self) -> Option<Vec<usize>> {
        match self {
            SparsityPattern::Identity { cols, .. } => Some((0..*cols).collect()),
            SparsityPattern::Coarse { slice_width, region, kept, .. } => Some(
                kept.iter()
                    .enumerate()
                    .flat_map(|(r, offs)| {
                        offs.iter().flat_map(move |&o| {
                            let start = (r * region + o) * slice_width;
                            start..start + slice_width
                        })
                    })
                    .collect(),
            ),
            SparsityPattern::ColumnTopK { kept, .. } => Some(kept.clone()),
            SparsityPattern::Fine { .. } => None,
        }
    }

    /// Whether element `(r, c)` of the full gate gradient survives.
    pub fn keeps(&self, r: usize, c: usize) -> bool {
        match self {
            SparsityPattern::Identity { .. } => true,
            SparsityPattern::Coarse { slice_width, region, kept, .. } => {
                let slice = c / slice_width;
                kept[slice / region].binary_search(&(slice % region)).is_ok()
            }
            SparsityPattern::Fine { tile_rows, tile_cols, kept, .. } => {
                kept[c / tile_cols].binary_search(&(r / tile_rows)).is_ok()
            }
            SparsityPattern::ColumnTopK { kept, .. } => kept.binary_search(&c).is_ok(),
        }
    }

    /// Checks the structural invariants of the pattern.
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Geometry(msg));
        match self {
            SparsityPattern::Identity { .. } => Ok(()),
            SparsityPattern::Coarse { cols, slice_width, region, removed, kept, .. } => {
                if *slice_width == 0 || *region == 0 || cols % slice_width != 0 {
                    return bad(format!("{cols} columns not divisible into slices of {slice_width}"));
                }
                let slices = cols / slice_width;
                if slices % region != 0 || kept.len() != slices / region || removed >= region {
                    return bad(format!(
                        "{slices} slices, region {region}, removed {removed}, {} regions recorded",
                        kept.len()
                    ));
                }
                for (r, offs) in kept.iter().enumerate() {
                    if offs.len() != region - removed || !strictly_increasing_below(offs, *region) {
                        return bad(format!("region {r} has invalid kept offsets {offs:?}"));
                    }
                }
                Ok(())
            }
            SparsityPattern::Fine { rows, cols, tile_rows, tile_cols, keep, kept } => {
                if *tile_rows == 0 || *tile_cols == 0 || rows % tile_rows != 0 || cols % tile_cols != 0
                {
                    return bad(format!(
                        "{rows}x{cols} not divisible into {tile_rows}x{tile_cols} tiles"
                    ));
                }
                let tiles = rows / tile_rows;
                if kept.len() != cols / tile_cols || *keep > tiles {
                    return bad(format!("fine pattern keeps {keep} of {tiles} tiles"));
                }
                for (s, rows_kept) in kept.iter().enumerate() {
                    if rows_kept.len() != *keep || !strictly_increasing_below(rows_kept, tiles) {
                        return bad(format!("slice {s} has invalid kept tiles {rows_kept:?}"));
                    }
                }
                Ok(())
            }
            SparsityPattern::ColumnTopK { cols, k, kept, .. } => {
                if kept.len() != *k || !strictly_increasing_below(kept, *cols) {
                    return bad(format!("column top-k keeps invalid columns {kept:?}"));
                }
                Ok(())
            }
        }
    }

    /// Human-readable multi-line dump.
    pub fn describe(&self) -> String {
        use std::fmt::Write;
        let mut s = String::new();
        let (rows, cols) = self.shape();
        let (kept, total) = self.kept_units();
        let _ = writeln!(
            s,
            "{} pattern on {rows}x{cols}: kept {kept}/{total} units, sparsity {:.4}",
            self.kind(),
            self.sparsity()
        );
        match self {
            SparsityPattern::Identity { .. } => {}
            SparsityPattern::Coarse { slice_width, region, removed, kept, .. } => {
                let _ = writeln!(s, "P={slice_width} R={region} S={removed}");
                for (r, offs) in kept.iter().enumerate() {
                    let _ = writeln!(s, "region {r}: kept slices {offs:?}");
                }
            }
            SparsityPattern::Fine { tile_rows, tile_cols, keep, kept, .. } => {
                let _ = writeln!(s, "My={tile_rows} Mx={tile_cols} K={keep}");
                for (sl, tiles) in kept.iter().enumerate() {
                    let _ = writeln!(s, "slice {sl}: kept tiles {tiles:?}");
                }
            }
            SparsityPattern::ColumnTopK { k, kept, .. } => {
                let _ = writeln!(s, "k={k}");
                let _ = writeln!(s, "kept columns {kept:?}");
            }
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn coarse() -> SparsityPattern {
        SparsityPattern::Coarse {
            rows: 2,
            cols: 32,
            slice_width: 4,
            region: 4,
            removed: 2,
            kept: vec![vec![1, 3], vec![0, 2]],
        }
    }

    #[test]
    fn coarse_columns_and_membership() {
        let p = coarse();
        p.validate().unwrap();
        assert_eq!(
            p.kept_columns().unwrap(),
            vec![4, 5, 6, 7, 12, 13, 14, 15, 16, 17, 18, 19, 24, 25, 26, 27]
        );
        assert!(p.keeps(0, 5));
        assert!(!p.keeps(1, 8));
        assert_eq!(p.sparsity(), 0.5);
        assert_eq!(p.kept_units(), (4, 8));
    }

    #[test]
    fn validation_rejects_bad_offsets() {
        let mut p = coarse();
        if let SparsityPattern::Coarse { kept, .. } = &mut p {
            kept[0] = vec![3, 1];
        }
        assert!(p.validate().is_err());
        let fine = SparsityPattern::Fine {
            rows: 16,
            cols: 8,
            tile_rows: 8,
            tile_cols: 4,
            keep: 1,
            kept: vec![vec![0], vec![2]],
        };
        assert!(fine.validate().is_err());
    }

    #[test]
    fn serializes_as_tagged_record() {
        let p = coarse();
        let json = serde_json::to_string(&p).unwrap();
        assert!(json.starts_with(r#"{"kind":"coarse""#), "{json}");
        let back: SparsityPattern = serde_json::from_str(&json).unwrap();
        assert_eq!(back, p);
    }
}
