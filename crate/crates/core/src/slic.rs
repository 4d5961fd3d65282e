//! SLIC superpixels: k-means in joint CIELAB + image-plane space with a
//! restricted search window, followed by connectivity enforcement.
//!
//! The distance between a pixel and a center is
//! `D² = d_lab² + (m / S)² · d_xy²` with grid interval `S = sqrt(HW / K)`.
//! During assignment a pixel keeps its current center unless a center whose
//! `2S×2S` search window covers it is strictly closer, so every iteration is
//! a descent step on `Σ D²`.

use crate::error::{Error, Result};
use crate::netpbm::GrayImage;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SlicParams {
    /// Requested number of segments.
    pub segments: usize,
    /// Compactness `m`.
    pub compactness: f64,
    pub iterations: usize,
}

impl Default for SlicParams {
    fn default() -> Self {
        Self {
            segments: 196,
            compactness: 10.0,
            iterations: 10,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SlicLabels {
    pub width: usize,
    pub height: usize,
    /// Segment id per pixel in `[0, segments)`, row-major.
    pub labels: Vec<u32>,
    /// Number of segments after connectivity enforcement.
    pub segments: usize,
    pub requested: usize,
    pub iterations: usize,
    /// `Σ D²` after initialization and after every iteration.
    pub costs: Vec<f64>,
}

impl SlicLabels {
    /// 16-bit label map.
    pub fn to_pgm(&self) -> Result<GrayImage> {
        if self.segments > 65536 {
            return Err(Error::Format("too many segments for a 16-bit map".into()));
        }
        GrayImage::new(
            self.width,
            self.height,
            65535,
            self.labels.iter().map(|&l| l as u16).collect(),
        )
    }
}

fn srgb_to_linear(c: f64) -> f64 {
    if c <= 0.04045 {
        c / 12.92
    } else {
        ((c + 0.055) / 1.055).powf(2.4)
    }
}

fn lab_f(t: f64) -> f64 {
    const DELTA: f64 = 6.0 / 29.0;
    if t > DELTA * DELTA * DELTA {
        t.cbrt()
    } else {
        t / (3.0 * DELTA * DELTA) + 4.0 / 29.0
    }
}

/// sRGB in `[0, 1]` to CIELAB under the D65 white point.
pub fn srgb_to_lab(rgb: [f64; 3]) -> [f64; 3] {
    let [r, g, b] = rgb.map(srgb_to_linear);
    let x = 0.412_456_4 * r + 0.357_576_1 * g + 0.180_437_5 * b;
    let y = 0.212_672_9 * r + 0.715_152_2 * g + 0.072_175_0 * b;
    let z = 0.019_333_9 * r + 0.119_192_0 * g + 0.950_304_1 * b;
    let (fx, fy, fz) = (lab_f(x / 0.950_47), lab_f(y), lab_f(z / 1.088_83));
    [116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)]
}

/// Converts a `[3, H, W]` sRGB tensor in `[0, 1]` to CIELAB.
pub fn image_to_lab(image: &Tensor<f32>) -> Result<Tensor<f32>> {
    let [3, h, w] = image.shape()[..] else {
        return Err(Error::shape("image_to_lab", format!("{:?}", image.shape())));
    };
    let n = h * w;
    let src = image.data();
    let mut out = vec![0.0f32; 3 * n];
    for i in 0..n {
        let lab = srgb_to_lab([src[i] as f64, src[n + i] as f64, src[2 * n + i] as f64]);
        for c in 0..3 {
            out[c * n + i] = lab[c] as f32;
        }
    }
    Tensor::new(&[3, h, w], out)
}

/// Grid of `rows × cols` initial centers with `rows·cols ≤ k`, as many as
/// possible, preferring near-square cells.
fn seed_grid(h: usize, w: usize, k: usize) -> (usize, usize) {
    let mut best = (1, 1);
    let mut best_key = (0usize, f64::INFINITY);
    for rows in 1..=h.min(k) {
        let cols = (k / rows).min(w);
        if cols == 0 {
            continue;
        }
        let aspect = ((h as f64 / rows as f64) / (w as f64 / cols as f64)).ln().abs();
        let key = (rows * cols, aspect);
        if key.0 > best_key.0 || (key.0 == best_key.0 && key.1 < best_key.1 - 1e-12) {
            best = (rows, cols);
            best_key = key;
        }
    }
    best
}

#[derive(Clone, Copy, Debug)]
struct Center {
    lab: [f64; 3],
    y: f64,
    x: f64,
}

struct Plane<'a> {
    h: usize,
    w: usize,
    lab: &'a [f32],
}

impl Plane<'_> {
    fn lab(&self, i: usize) -> [f64; 3] {
        let n = self.h * self.w;
        [self.lab[i] as f64, self.lab[n + i] as f64, self.lab[2 * n + i] as f64]
    }

    fn gradient(&self, y: usize, x: usize) -> f64 {
        let at = |yy: usize, xx: usize| self.lab(yy * self.w + xx);
        let sq = |a: [f64; 3], b: [f64; 3]| (0..3).map(|c| (a[c] - b[c]).powi(2)).sum::<f64>();
        let (x0, x1) = (x.saturating_sub(1), (x + 1).min(self.w - 1));
        let (y0, y1) = (y.saturating_sub(1), (y + 1).min(self.h - 1));
        sq(at(y, x1), at(y, x0)) + sq(at(y1, x), at(y0, x))
    }
}

fn dist2(c: &Center, lab: [f64; 3], y: usize, x: usize, spatial: f64) -> f64 {
    let dl: f64 = (0..3).map(|k| (lab[k] - c.lab[k]).powi(2)).sum();
    let dy = y as f64 - c.y;
    let dx = x as f64 - c.x;
    dl + spatial * (dy * dy + dx * dx)
}

fn total_cost(plane: &Plane, centers: &[Center], labels: &[u32], spatial: f64) -> f64 {
    labels
        .iter()
        .enumerate()
        .map(|(i, &l)| dist2(&centers[l as usize], plane.lab(i), i / plane.w, i % plane.w, spatial))
        .sum()
}

/// Segments a `[3, H, W]` CIELAB image.
pub fn slic_segment(lab: &Tensor<f32>, params: &SlicParams) -> Result<SlicLabels> {
    let [3, h, w] = lab.shape()[..] else {
        return Err(Error::shape(
            "slic",
            format!("expected [3, H, W], got {:?}", lab.shape()),
        ));
    };
    let k = params.segments;
    if k == 0 || k > h * w {
        return Err(Error::Config(format!(
            "SLIC needs 1 <= K <= {} pixels, got K={k}",
            h * w
        )));
    }
    if params.iterations == 0 {
        return Err(Error::Config("SLIC needs at least one iteration".into()));
    }
    if !(params.compactness.is_finite() && params.compactness >= 0.0) {
        return Err(Error::Config("compactness must be finite and nonnegative".into()));
    }
    let plane = Plane { h, w, lab: lab.data() };
    let n = h * w;
    let step = ((n as f64) / k as f64).sqrt();
    let spatial = (params.compactness / step).powi(2);

    let (rows, cols) = seed_grid(h, w, k);
    let mut centers = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            let cy = ((r as f64 + 0.5) * h as f64 / rows as f64) as usize;
            let cx = ((c as f64 + 0.5) * w as f64 / cols as f64) as usize;
            let (mut by, mut bx, mut bg) = (cy, cx, f64::INFINITY);
            for y in cy.saturating_sub(1)..=(cy + 1).min(h - 1) {
                for x in cx.saturating_sub(1)..=(cx + 1).min(w - 1) {
                    let gval = plane.gradient(y, x);
                    if gval < bg {
                        (by, bx, bg) = (y, x, gval);
                    }
                }
            }
            centers.push(Center {
                lab: plane.lab(by * w + bx),
                y: by as f64,
                x: bx as f64,
            });
        }
    }
    // initial assignment: the grid cell each pixel falls in
    let mut labels: Vec<u32> = (0..n)
        .map(|i| {
            let r = (i / w) * rows / h;
            let c = (i % w) * cols / w;
            (r * cols + c) as u32
        })
        .collect();
    let mut costs = vec![total_cost(&plane, &centers, &labels, spatial)];

    let reach = step.ceil() as isize;
    let mut dist = vec![0.0f64; n];
    for _ in 0..params.iterations {
        for (i, d) in dist.iter_mut().enumerate() {
            *d = dist2(&centers[labels[i] as usize], plane.lab(i), i / w, i % w, spatial);
        }
        for (ci, c) in centers.iter().enumerate() {
            let (cy, cx) = (c.y.round() as isize, c.x.round() as isize);
            let y0 = (cy - reach).max(0) as usize;
            let y1 = (cy + reach).min(h as isize - 1) as usize;
            let x0 = (cx - reach).max(0) as usize;
            let x1 = (cx + reach).min(w as isize - 1) as usize;
            for y in y0..=y1 {
                for x in x0..=x1 {
                    let i = y * w + x;
                    let d = dist2(c, plane.lab(i), y, x, spatial);
                    if d < dist[i] {
                        dist[i] = d;
                        labels[i] = ci as u32;
                    }
                }
            }
        }
        let mut sums = vec![[0.0f64; 6]; centers.len()];
        for (i, &l) in labels.iter().enumerate() {
            let lab = plane.lab(i);
            let s = &mut sums[l as usize];
            s[0] += lab[0];
            s[1] += lab[1];
            s[2] += lab[2];
            s[3] += (i / w) as f64;
            s[4] += (i % w) as f64;
            s[5] += 1.0;
        }
        for (c, s) in centers.iter_mut().zip(&sums) {
            if s[5] > 0.0 {
                c.lab = [s[0] / s[5], s[1] / s[5], s[2] / s[5]];
                c.y = s[3] / s[5];
                c.x = s[4] / s[5];
            }
        }
        costs.push(total_cost(&plane, &centers, &labels, spatial));
    }

    let min_size = (n / (4 * k)).max(1);
    let (labels, segments) = enforce_connectivity(&labels, h, w, min_size);
    Ok(SlicLabels {
        width: w,
        height: h,
        labels,
        segments,
        requested: k,
        iterations: params.iterations,
        costs,
    })
}

const UNSET: u32 = u32::MAX;

fn neighbors4(i: usize, h: usize, w: usize) -> impl Iterator<Item = usize> {
    let (y, x) = (i / w, i % w);
    [
        (y > 0).then(|| i - w),
        (x > 0).then(|| i - 1),
        (x + 1 < w).then(|| i + 1),
        (y + 1 < h).then(|| i + w),
    ]
    .into_iter()
    .flatten()
}

/// 4-connected components of equal labels: component id per pixel and the
/// size of every component.
pub fn components(labels: &[u32], h: usize, w: usize) -> (Vec<u32>, Vec<usize>) {
    let n = h * w;
    let mut comp = vec![UNSET; n];
    let mut sizes = Vec::new();
    let mut stack = Vec::new();
    for start in 0..n {
        if comp[start] != UNSET {
            continue;
        }
        let id = sizes.len() as u32;
        comp[start] = id;
        stack.push(start);
        let mut size = 0;
        while let Some(i) = stack.pop() {
            size += 1;
            for j in neighbors4(i, h, w) {
                if comp[j] == UNSET && labels[j] == labels[start] {
                    comp[j] = id;
                    stack.push(j);
                }
            }
        }
        sizes.push(size);
    }
    (comp, sizes)
}

/// Makes every segment 4-connected and at least `min_size` pixels (unless a
/// single segment remains), then relabels densely in raster order.
fn enforce_connectivity(labels: &[u32], h: usize, w: usize, min_size: usize) -> (Vec<u32>, usize) {
    let n = h * w;
    let (comp, sizes) = components(labels, h, w);
    // keep the largest component of every label; everything else is orphaned
    let max_label = labels.iter().copied().max().unwrap_or(0) as usize;
    let mut keep: Vec<Option<u32>> = vec![None; max_label + 1];
    let mut comp_label = vec![0u32; sizes.len()];
    for i in 0..n {
        comp_label[comp[i] as usize] = labels[i];
    }
    for (cid, &l) in comp_label.iter().enumerate() {
        let slot = &mut keep[l as usize];
        if slot.is_none_or(|k| sizes[cid] > sizes[k as usize]) {
            *slot = Some(cid as u32);
        }
    }
    let mut out: Vec<u32> = (0..n)
        .map(|i| {
            if keep[labels[i] as usize] == Some(comp[i]) {
                labels[i]
            } else {
                UNSET
            }
        })
        .collect();
    let mut seg_size = vec![0usize; max_label + 1];
    for &l in &out {
        if l != UNSET {
            seg_size[l as usize] += 1;
        }
    }
    // orphans join the largest adjacent labeled segment, one ring at a time
    loop {
        let (ocomp, osizes) = components(&out, h, w);
        let mut best: Vec<Option<u32>> = vec![None; osizes.len()];
        let mut any = false;
        for i in 0..n {
            if out[i] != UNSET {
                continue;
            }
            any = true;
            let c = ocomp[i] as usize;
            for j in neighbors4(i, h, w) {
                let l = out[j];
                if l == UNSET {
                    continue;
                }
                let better = match best[c] {
                    None => true,
                    Some(b) => {
                        (seg_size[l as usize], std::cmp::Reverse(l)) > (seg_size[b as usize], std::cmp::Reverse(b))
                    }
                };
                if better {
                    best[c] = Some(l);
                }
            }
        }
        if !any {
            break;
        }
        for i in 0..n {
            if out[i] == UNSET {
                if let Some(l) = best[ocomp[i] as usize] {
                    out[i] = l;
                    seg_size[l as usize] += 1;
                }
            }
        }
    }
    // small segments merge into their largest neighbor
    loop {
        let present: Vec<usize> = (0..seg_size.len()).filter(|&l| seg_size[l] > 0).collect();
        if present.len() <= 1 {
            break;
        }
        let Some(&small) = present
            .iter()
            .filter(|&&l| seg_size[l] < min_size)
            .min_by_key(|&&l| (seg_size[l], l))
        else {
            break;
        };
        let mut target: Option<u32> = None;
        for i in 0..n {
            if out[i] as usize != small {
                continue;
            }
            for j in neighbors4(i, h, w) {
                let l = out[j];
                if l as usize == small {
                    continue;
                }
                let better = match target {
                    None => true,
                    Some(t) => {
                        (seg_size[l as usize], std::cmp::Reverse(l)) > (seg_size[t as usize], std::cmp::Reverse(t))
                    }
                };
                if better {
                    target = Some(l);
                }
            }
        }
        let t = target.expect("a segment of a connected grid has a neighbor");
        for l in out.iter_mut() {
            if *l as usize == small {
                *l = t;
            }
        }
        seg_size[t as usize] += seg_size[small];
        seg_size[small] = 0;
    }
    let mut remap = vec![UNSET; seg_size.len()];
    let mut next = 0u32;
    for l in out.iter_mut() {
        let r = &mut remap[*l as usize];
        if *r == UNSET {
            *r = next;
            next += 1;
        }
        *l = *r;
    }
    (out, next as usize)
}
