//! Index maps for [`Tape::gather`](crate::Tape::gather): layout changes between NCHW maps,
//! token sequences, shifted windows, patches and scan orders.
//!
//! Token tensors are `(N, H*W, C)` with tokens in row-major spatial order.

use std::sync::Arc;

pub type Index = Arc<Vec<u32>>;

fn idx(v: usize) -> u32 {
    u32::try_from(v).expect("tensor too large for u32 indexing")
}

/// Inverse of a permutation index.
pub fn invert(perm: &[u32]) -> Index {
    let mut inv = vec![0u32; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p as usize] = idx(i);
    }
    Arc::new(inv)
}

/// `(N, C, H, W)` to `(N, H*W, C)`.
pub fn nchw_to_tokens(n: usize, c: usize, h: usize, w: usize) -> Index {
    let mut out = Vec::with_capacity(n * c * h * w);
    for b in 0..n {
        for p in 0..h * w {
            for ch in 0..c {
                out.push(idx((b * c + ch) * h * w + p));
            }
        }
    }
    Arc::new(out)
}

/// `(N, H*W, C)` to `(N, C, H, W)`.
pub fn tokens_to_nchw(n: usize, c: usize, h: usize, w: usize) -> Index {
    let mut out = Vec::with_capacity(n * c * h * w);
    for b in 0..n {
        for ch in 0..c {
            for p in 0..h * w {
                out.push(idx((b * h * w + p) * c + ch));
            }
        }
    }
    Arc::new(out)
}

/// Partition `(N, H*W, C)` tokens into `(N * nW, ws*ws, C)` windows after a cyclic shift
/// of the map by `-shift` along both axes.
pub fn window_partition(n: usize, h: usize, w: usize, c: usize, ws: usize, shift: usize) -> Index {
    assert!(h % ws == 0 && w % ws == 0, "window {ws} does not tile {h}x{w}");
    let mut out = Vec::with_capacity(n * h * w * c);
    for b in 0..n {
        for wy in 0..h / ws {
            for wx in 0..w / ws {
                for ty in 0..ws {
                    for tx in 0..ws {
                        let y = (wy * ws + ty + shift) % h;
                        let x = (wx * ws + tx + shift) % w;
                        for ch in 0..c {
                            out.push(idx(((b * h + y) * w + x) * c + ch));
                        }
                    }
                }
            }
        }
    }
    Arc::new(out)
}

/// `(N, 1, H, W)` image to `(N, (H/p)*(W/p), p*p)` flattened patches.
pub fn patchify(n: usize, h: usize, w: usize, p: usize) -> Index {
    assert!(h % p == 0 && w % p == 0, "patch {p} does not tile {h}x{w}");
    let (gh, gw) = (h / p, w / p);
    let mut out = Vec::with_capacity(n * h * w);
    for b in 0..n {
        for py in 0..gh {
            for px in 0..gw {
                for dy in 0..p {
                    for dx in 0..p {
                        out.push(idx((b * h + py * p + dy) * w + px * p + dx));
                    }
                }
            }
        }
    }
    Arc::new(out)
}

/// Concatenated 2x2 neighbourhoods: `(N, H*W, C)` to `(N, (H/2)*(W/2), 4C)` in the order
/// (0,0), (1,0), (0,1), (1,1) as (dy, dx).
pub fn merge_2x2(n: usize, h: usize, w: usize, c: usize) -> Index {
    assert!(h % 2 == 0 && w % 2 == 0, "patch merge needs even map, got {h}x{w}");
    let mut out = Vec::with_capacity(n * h * w * c);
    for b in 0..n {
        for y in 0..h / 2 {
            for x in 0..w / 2 {
                for (dy, dx) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
                    for ch in 0..c {
                        out.push(idx(((b * h + 2 * y + dy) * w + 2 * x + dx) * c + ch));
                    }
                }
            }
        }
    }
    Arc::new(out)
}

/// Spatial unfolding: `(N, H*W, f*f*C)` to `(N, (fH)*(fW), C)`, where channel block
/// `(sy * f + sx)` of a token becomes sub-pixel `(sy, sx)`.
pub fn expand_subpixels(n: usize, h: usize, w: usize, f: usize, c: usize) -> Index {
    let (ho, wo) = (h * f, w * f);
    let mut out = Vec::with_capacity(n * ho * wo * c);
    for b in 0..n {
        for y in 0..ho {
            for x in 0..wo {
                let tok = (b * h + y / f) * w + x / f;
                let sub = (y % f) * f + x % f;
                for ch in 0..c {
                    out.push(idx((tok * f * f + sub) * c + ch));
                }
            }
        }
    }
    Arc::new(out)
}

/// Columns `[start, start + len)` of the last dimension of a `(rows, d)` tensor.
pub fn slice_last(rows: usize, d: usize, start: usize, len: usize) -> Index {
    assert!(start + len <= d, "slice {start}..{} out of {d}", start + len);
    let mut out = Vec::with_capacity(rows * len);
    for r in 0..rows {
        for j in start..start + len {
            out.push(idx(r * d + j));
        }
    }
    Arc::new(out)
}

/// Traversal order of a 2-D token map flattened into a sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScanOrder {
    RowForward,
    RowBackward,
    ColForward,
    ColBackward,
}

impl ScanOrder {
    pub const ALL: [ScanOrder; 4] = [
        ScanOrder::RowForward,
        ScanOrder::RowBackward,
        ScanOrder::ColForward,
        ScanOrder::ColBackward,
    ];

    /// `seq[t]` = row-major position visited at step `t`.
    pub fn positions(self, h: usize, w: usize) -> Vec<usize> {
        let l = h * w;
        let col = |t: usize| (t % h) * w + t / h;
        match self {
            ScanOrder::RowForward => (0..l).collect(),
            ScanOrder::RowBackward => (0..l).rev().collect(),
            ScanOrder::ColForward => (0..l).map(col).collect(),
            ScanOrder::ColBackward => (0..l).rev().map(col).collect(),
        }
    }

    /// Reorders `(N, H*W, C)` tokens into this scan order.
    pub fn gather_index(self, n: usize, h: usize, w: usize, c: usize) -> Index {
        let pos = self.positions(h, w);
        let l = h * w;
        let mut out = Vec::with_capacity(n * l * c);
        for b in 0..n {
            for &p in &pos {
                for ch in 0..c {
                    out.push(idx((b * l + p) * c + ch));
                }
            }
        }
        Arc::new(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn is_permutation(p: &[u32]) -> bool {
        let mut seen = vec![false; p.len()];
        p.iter().all(|&i| !std::mem::replace(&mut seen[i as usize], true))
    }

    #[test]
    fn layouts_are_permutations() {
        assert!(is_permutation(&nchw_to_tokens(2, 3, 4, 5)));
        assert!(is_permutation(&window_partition(2, 8, 8, 3, 4, 2)));
        assert!(is_permutation(&merge_2x2(1, 4, 6, 2)));
        assert!(is_permutation(&expand_subpixels(1, 2, 3, 4, 2)));
        assert!(is_permutation(&patchify(2, 8, 4, 4)));
        for o in ScanOrder::ALL {
            assert!(is_permutation(&o.gather_index(2, 3, 4, 2)));
        }
    }

    #[test]
    fn token_round_trip() {
        let a = nchw_to_tokens(2, 3, 4, 5);
        let b = tokens_to_nchw(2, 3, 4, 5);
        let composed: Vec<u32> = b.iter().map(|&i| a[i as usize]).collect();
        assert_eq!(composed, (0..120).collect::<Vec<u32>>());
        assert_eq!(*invert(&a), *b);
    }

    #[test]
    fn window_shift_wraps() {
        // 4x4 map, window 2, shift 1: first window starts at (1,1).
        let p = window_partition(1, 4, 4, 1, 2, 1);
        assert_eq!(&p[..4], &[5, 6, 9, 10]);
        // last window wraps around both edges
        assert_eq!(&p[12..], &[15, 12, 3, 0]);
    }

    #[test]
    fn column_scan_order() {
        assert_eq!(ScanOrder::ColForward.positions(2, 3), vec![0, 3, 1, 4, 2, 5]);
        assert_eq!(ScanOrder::ColBackward.positions(2, 3), vec![5, 2, 4, 1, 3, 0]);
    }
}
