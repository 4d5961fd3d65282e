//! Pixel-grid / superpixel-grid correspondence.
//!
//! A pixel `(y, x)` on an `h×w` feature grid belongs to superpixel cell
//! `(y / r, x / r)`. Its neighbor set `N_i` is that cell followed by the cell's
//! Moore ring in row-major order, clipped to the `sh×sw` superpixel grid. The
//! window `W_p` of a superpixel is the set of pixels whose `N_i` contains it.

use crate::error::{Error, Result};

/// Upper bound on `|N_i|` (the containing cell plus its eight neighbors).
pub const MAX_NEIGHBORS: usize = 9;

/// Sentinel stored in unused neighbor slots.
pub const NO_SUPERPIXEL: u32 = u32::MAX;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GridSpec {
    pub h: usize,
    pub w: usize,
    pub sh: usize,
    pub sw: usize,
    pub r: usize,
}

impl GridSpec {
    pub fn new(h: usize, w: usize, r: usize) -> Result<Self> {
        if r < 2 {
            return Err(Error::Grid(format!("superpixel ratio must be >= 2, got {r}")));
        }
        if h < r || w < r {
            return Err(Error::Grid(format!(
                "pixel grid {h}x{w} smaller than superpixel ratio {r}"
            )));
        }
        Ok(Self {
            h,
            w,
            sh: h.div_ceil(r),
            sw: w.div_ceil(r),
            r,
        })
    }

    pub fn pixels(&self) -> usize {
        self.h * self.w
    }

    pub fn superpixels(&self) -> usize {
        self.sh * self.sw
    }

    /// Superpixel cell containing pixel index `i`.
    pub fn containing(&self, i: usize) -> usize {
        let (y, x) = (i / self.w, i % self.w);
        (y / self.r) * self.sw + x / self.r
    }
}

/// `N_i` for every pixel, laid out as `MAX_NEIGHBORS` slots per pixel. Valid
/// entries occupy the leading slots.
#[derive(Clone, Debug)]
pub struct NeighborMap {
    slots: Vec<u32>,
    counts: Vec<u8>,
}

impl NeighborMap {
    pub fn neighbors(&self, i: usize) -> &[u32] {
        &self.slots[i * MAX_NEIGHBORS..i * MAX_NEIGHBORS + self.counts[i] as usize]
    }

    /// All nine slots of pixel `i`, including unused ones.
    pub fn slots(&self, i: usize) -> &[u32] {
        &self.slots[i * MAX_NEIGHBORS..(i + 1) * MAX_NEIGHBORS]
    }

    pub fn count(&self, i: usize) -> usize {
        self.counts[i] as usize
    }

    /// Flat `[pixels, MAX_NEIGHBORS]` validity mask.
    pub fn mask(&self) -> Vec<bool> {
        self.slots.iter().map(|&s| s != NO_SUPERPIXEL).collect()
    }
}

/// `W_p` for every superpixel, as `(pixel, slot)` pairs in ascending pixel
/// order, where `slot` is the position of `p` within that pixel's `N_i`.
#[derive(Clone, Debug)]
pub struct WindowMap {
    windows: Vec<Vec<(u32, u8)>>,
}

impl WindowMap {
    pub fn window(&self, p: usize) -> &[(u32, u8)] {
        &self.windows[p]
    }

    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }
}

/// A grid together with its neighbor and window maps. Immutable once built.
#[derive(Clone, Debug)]
pub struct Grid {
    pub spec: GridSpec,
    pub neighbors: NeighborMap,
    pub windows: WindowMap,
}

impl Grid {
    pub fn build(h: usize, w: usize, r: usize) -> Result<Self> {
        let spec = GridSpec::new(h, w, r)?;
        let n = spec.pixels();
        let mut slots = vec![NO_SUPERPIXEL; n * MAX_NEIGHBORS];
        let mut counts = vec![0u8; n];
        let mut windows = vec![Vec::new(); spec.superpixels()];
        for i in 0..n {
            let (y, x) = (i / w, i % w);
            let (py, px) = ((y / r) as isize, (x / r) as isize);
            let mut k = 0;
            let mut put = |cy: isize, cx: isize| {
                if cy < 0 || cx < 0 || cy >= spec.sh as isize || cx >= spec.sw as isize {
                    return;
                }
                let p = cy as usize * spec.sw + cx as usize;
                slots[i * MAX_NEIGHBORS + k] = p as u32;
                windows[p].push((i as u32, k as u8));
                k += 1;
            };
            put(py, px);
            for dy in -1..=1 {
                for dx in -1..=1 {
                    if dy != 0 || dx != 0 {
                        put(py + dy, px + dx);
                    }
                }
            }
            counts[i] = k as u8;
        }
        Ok(Self {
            spec,
            neighbors: NeighborMap { slots, counts },
            windows: WindowMap { windows },
        })
    }

    pub fn pixels(&self) -> usize {
        self.spec.pixels()
    }

    pub fn superpixels(&self) -> usize {
        self.spec.superpixels()
    }
}

/// Per-head hard assignment: pixel → superpixel index.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HardAssignment {
    pub heads: usize,
    pub pixels: usize,
    /// `[heads, pixels]`.
    pub labels: Vec<u32>,
}

impl HardAssignment {
    pub fn head(&self, h: usize) -> &[u32] {
        &self.labels[h * self.pixels..(h + 1) * self.pixels]
    }
}

/// Argmax over each pixel's valid neighbor slots, per head. `weights` is laid
/// out `[heads, pixels, MAX_NEIGHBORS]`. Ties go to the earliest slot, so the
/// containing superpixel wins a uniform row.
pub fn hard_assign(weights: &[f32], heads: usize, grid: &Grid) -> HardAssignment {
    let n = grid.pixels();
    let mut labels = Vec::with_capacity(heads * n);
    for h in 0..heads {
        for i in 0..n {
            let row = &weights[(h * n + i) * MAX_NEIGHBORS..];
            let nb = grid.neighbors.neighbors(i);
            let mut best = 0;
            for j in 1..nb.len() {
                if row[j] > row[best] {
                    best = j;
                }
            }
            labels.push(nb[best]);
        }
    }
    HardAssignment {
        heads,
        pixels: n,
        labels,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn corner_pixel_has_four_neighbors_on_2x2() {
        let g = Grid::build(8, 8, 4).unwrap();
        assert_eq!((g.spec.sh, g.spec.sw), (2, 2));
        assert_eq!(g.neighbors.neighbors(0), &[0, 1, 2, 3]);
    }

    #[test]
    fn every_window_covers_all_pixels_on_2x2() {
        let g = Grid::build(8, 8, 4).unwrap();
        for p in 0..4 {
            let pix: Vec<u32> = g.windows.window(p).iter().map(|&(i, _)| i).collect();
            assert_eq!(pix, (0..64).collect::<Vec<u32>>());
        }
    }

    #[test]
    fn interior_pixel_has_nine_neighbors() {
        let g = Grid::build(12, 12, 4).unwrap();
        let i = 5 * 12 + 5;
        let nb = g.neighbors.neighbors(i);
        assert_eq!(nb.len(), 9);
        assert_eq!(nb[0], 4);
        assert_eq!(&nb[1..], &[0, 1, 2, 3, 5, 6, 7, 8]);
    }

    #[test]
    fn rejects_small_grids() {
        assert!(matches!(Grid::build(3, 8, 4), Err(Error::Grid(_))));
        assert!(matches!(Grid::build(8, 8, 1), Err(Error::Grid(_))));
    }

    #[test]
    fn ceil_semantics_for_ragged_extents() {
        let g = Grid::build(10, 9, 4).unwrap();
        assert_eq!((g.spec.sh, g.spec.sw), (3, 3));
        // bottom-right pixel sits in the truncated corner cell
        assert_eq!(g.spec.containing(10 * 9 - 1), 8);
    }

    #[test]
    fn uniform_row_assigns_containing_cell() {
        let g = Grid::build(12, 12, 4).unwrap();
        let n = g.pixels();
        let mut w = vec![0.0f32; n * MAX_NEIGHBORS];
        for i in 0..n {
            let c = g.neighbors.count(i);
            for j in 0..c {
                w[i * MAX_NEIGHBORS + j] = 1.0 / c as f32;
            }
        }
        let a = hard_assign(&w, 1, &g);
        for i in 0..n {
            assert_eq!(a.labels[i] as usize, g.spec.containing(i));
        }
    }

    #[test]
    fn one_hot_row_selects_that_superpixel() {
        let g = Grid::build(12, 12, 4).unwrap();
        let n = g.pixels();
        let mut w = vec![0.0f32; n * MAX_NEIGHBORS];
        let i = 5 * 12 + 5;
        w[i * MAX_NEIGHBORS + 7] = 1.0;
        let a = hard_assign(&w, 1, &g);
        assert_eq!(a.labels[i], g.neighbors.neighbors(i)[7]);
    }
}
