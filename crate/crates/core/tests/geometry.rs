use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use spformer::geometry::{hard_assign, Grid, MAX_NEIGHBORS, NO_SUPERPIXEL};

/// Checks duality and the neighborhood invariants of one grid; returns the
/// number of (pixel, superpixel) incidences.
pub fn check_grid(h: usize, w: usize, r: usize) -> Result<usize, String> {
    let grid = Grid::build(h, w, r).map_err(|e| e.to_string())?;
    let spec = grid.spec;
    if (spec.sh, spec.sw) != (h.div_ceil(r), w.div_ceil(r)) {
        return Err(format!("{h}x{w}/{r}: superpixel grid {}x{}", spec.sh, spec.sw));
    }
    let mut incidences = 0;
    let mut windows_of = vec![0usize; h * w];
    for i in 0..h * w {
        let (y, x) = (i / w, i % w);
        let (cy, cx) = (y / r, x / r);
        let nb = grid.neighbors.neighbors(i);
        // expected: the containing cell, then its clipped Moore ring
        let mut want = vec![(cy * spec.sw + cx) as u32];
        for dy in -1isize..=1 {
            for dx in -1isize..=1 {
                let (py, px) = (cy as isize + dy, cx as isize + dx);
                if (dy, dx) != (0, 0) && py >= 0 && px >= 0 && (py as usize) < spec.sh && (px as usize) < spec.sw {
                    want.push((py as usize * spec.sw + px as usize) as u32);
                }
            }
        }
        if nb != want.as_slice() {
            return Err(format!("{h}x{w}/{r}: N_{i} = {nb:?}, expected {want:?}"));
        }
        let interior = cy > 0 && cx > 0 && cy + 1 < spec.sh && cx + 1 < spec.sw;
        if interior != (nb.len() == 9) {
            return Err(format!(
                "{h}x{w}/{r}: pixel {i} interior={interior} but |N_i|={}",
                nb.len()
            ));
        }
        if grid.neighbors.slots(i)[nb.len()..].iter().any(|&s| s != NO_SUPERPIXEL) {
            return Err(format!("{h}x{w}/{r}: unused slots of pixel {i} not empty"));
        }
        incidences += nb.len();
    }
    let mut window_total = 0;
    for p in 0..spec.superpixels() {
        let win = grid.windows.window(p);
        if win.windows(2).any(|e| e[0].0 >= e[1].0) {
            return Err(format!("{h}x{w}/{r}: W_{p} not strictly ascending"));
        }
        if win.len() > 9 * r * r {
            return Err(format!("{h}x{w}/{r}: |W_{p}| = {}", win.len()));
        }
        for &(i, j) in win {
            // i ∈ W_p ⇒ p ∈ N_i
            if grid.neighbors.neighbors(i as usize).get(j as usize) != Some(&(p as u32)) {
                return Err(format!("{h}x{w}/{r}: {i} ∈ W_{p} but {p} ∉ N_{i}"));
            }
            windows_of[i as usize] += 1;
        }
        window_total += win.len();
    }
    // every window entry maps to a distinct incidence (p, i, slot); equal
    // totals make that map a bijection, so p ∈ N_i ⇒ i ∈ W_p as well
    if window_total != incidences {
        return Err(format!("{h}x{w}/{r}: window sizes do not add up"));
    }
    if windows_of.iter().any(|&k| k == 0 || k > MAX_NEIGHBORS) {
        return Err(format!("{h}x{w}/{r}: a pixel is in 0 or more than 9 windows"));
    }
    Ok(incidences)
}

#[test]
fn duality_holds_on_every_grid_up_to_64() {
    for r in [2, 4, 8] {
        for h in 4..=64 {
            for w in 4..=64 {
                if h < r || w < r {
                    assert!(Grid::build(h, w, r).is_err());
                    continue;
                }
                check_grid(h, w, r).unwrap();
            }
        }
    }
}

#[test]
fn documented_small_grids() {
    let g = Grid::build(8, 8, 4).unwrap();
    assert_eq!((g.spec.sh, g.spec.sw), (2, 2));
    let mut nb = g.neighbors.neighbors(0).to_vec();
    assert_eq!(nb[0], 0);
    nb.sort_unstable();
    assert_eq!(nb, [0, 1, 2, 3]);
    for p in 0..4 {
        assert_eq!(g.windows.window(p).len(), 64);
    }
    let g = Grid::build(12, 12, 4).unwrap();
    assert_eq!(g.neighbors.count(5 * 12 + 5), 9);
    assert_eq!(g.neighbors.count(0), 4);
    let g = Grid::build(56, 56, 4).unwrap();
    assert!((0..g.superpixels()).all(|p| g.windows.window(p).len() <= 144));
    assert!((0..g.superpixels()).any(|p| g.windows.window(p).len() == 144));
}

#[test]
fn containing_cell_minimizes_center_distance() {
    for r in [2usize, 3, 4, 8] {
        for h in r..=40 {
            let cells = h.div_ceil(r);
            for y in 0..h {
                let dist = |py: usize| (y as f64 + 0.5 - r as f64 * (py as f64 + 0.5)).abs();
                let best = (0..cells).min_by(|&a, &b| dist(a).total_cmp(&dist(b))).unwrap();
                assert_eq!(dist(best), dist(y / r), "y={y} r={r}");
            }
        }
    }
}

#[test]
fn hard_assignment_matches_exhaustive_scan() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..30 {
        let r = rng.gen_range(2..5);
        let (h, w) = (rng.gen_range(r..20), rng.gen_range(r..20));
        let heads = rng.gen_range(1..4);
        let grid = Grid::build(h, w, r).unwrap();
        let n = grid.pixels();
        let mut weights = vec![0.0f32; heads * n * MAX_NEIGHBORS];
        for hd in 0..heads {
            for i in 0..n {
                let k = grid.neighbors.count(i);
                let row: Vec<f32> = (0..k).map(|_| rng.gen()).collect();
                let z: f32 = row.iter().sum();
                for j in 0..k {
                    weights[(hd * n + i) * MAX_NEIGHBORS + j] = row[j] / z;
                }
            }
        }
        let hard = hard_assign(&weights, heads, &grid);
        for hd in 0..heads {
            for i in 0..n {
                let nb = grid.neighbors.neighbors(i);
                let row = &weights[(hd * n + i) * MAX_NEIGHBORS..];
                let mut best = (f32::NEG_INFINITY, 0);
                for (j, &p) in nb.iter().enumerate() {
                    if row[j] > best.0 {
                        best = (row[j], p);
                    }
                }
                assert_eq!(hard.head(hd)[i], best.1);
                assert!(nb.contains(&hard.head(hd)[i]));
            }
        }
    }
}
