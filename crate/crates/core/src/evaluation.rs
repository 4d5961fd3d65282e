//! Superpixel quality and robustness protocols.
//!
//! Quality follows the majority-label upper bound: every segment predicts the
//! ground-truth label carrying most of its vote mass, predictions are spread
//! back to pixels through the (soft or hard) assignment, per-head results are
//! averaged, and the argmax is scored against the ground truth.

use std::fmt::Write as _;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{HardAssignment, MAX_NEIGHBORS, NO_SUPERPIXEL};
use crate::model::{argmax, Model};
use crate::sca::AssociationMap;
use crate::tensor::Tensor;

/// Ground-truth value excluded from votes and metrics.
pub const IGNORE_LABEL: u32 = 255;

/// Per-head weighted membership of every pixel in a few candidate segments.
#[derive(Clone, Debug, PartialEq)]
pub struct Partition {
    pub heads: usize,
    pub height: usize,
    pub width: usize,
    pub segments: usize,
    /// Candidate slots per pixel.
    pub slots: usize,
    /// `[pixels, slots]` segment ids, `NO_SUPERPIXEL` for unused slots.
    pub ids: Vec<u32>,
    /// `[heads, pixels, slots]` weights; zero on unused slots.
    pub weights: Vec<f32>,
}

impl Partition {
    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    /// One hard label map per head.
    pub fn from_labels(height: usize, width: usize, heads: &[Vec<u32>]) -> Result<Self> {
        let n = height * width;
        let first = heads
            .first()
            .ok_or_else(|| Error::Config("at least one label map is required".into()))?;
        if heads.iter().any(|h| h.len() != n) {
            return Err(Error::shape("partition", format!("label maps must have {n} entries")));
        }
        if heads.len() == 1 {
            let segments = first.iter().max().map_or(0, |&m| m as usize + 1);
            return Ok(Self {
                heads: 1,
                height,
                width,
                segments,
                slots: 1,
                ids: first.clone(),
                weights: vec![1.0; n],
            });
        }
        // heads disagree on membership: one slot per head, weighted only for
        // the head it belongs to
        let k = heads.len();
        let mut ids = vec![NO_SUPERPIXEL; n * k];
        let mut weights = vec![0.0f32; k * n * k];
        for (h, labels) in heads.iter().enumerate() {
            for (i, &l) in labels.iter().enumerate() {
                ids[i * k + h] = l;
                weights[(h * n + i) * k + h] = 1.0;
            }
        }
        let segments = heads.iter().flat_map(|h| h.iter()).max().map_or(0, |&m| m as usize + 1);
        Ok(Self {
            heads: k,
            height,
            width,
            segments,
            slots: k,
            ids,
            weights,
        })
    }

    pub fn from_hard(a: &HardAssignment, height: usize, width: usize) -> Result<Self> {
        let heads: Vec<Vec<u32>> = (0..a.heads).map(|h| a.head(h).to_vec()).collect();
        let mut p = Self::from_labels(height, width, &heads)?;
        p.segments = p.segments.max(1);
        Ok(p)
    }

    /// Soft association on the pixel-feature grid.
    pub fn from_association(a: &AssociationMap) -> Self {
        let n = a.pixels();
        let mut ids = Vec::with_capacity(n * MAX_NEIGHBORS);
        for i in 0..n {
            ids.extend_from_slice(a.grid.neighbors.slots(i));
        }
        Self {
            heads: a.heads,
            height: a.grid.spec.h,
            width: a.grid.spec.w,
            segments: a.grid.superpixels(),
            slots: MAX_NEIGHBORS,
            ids,
            weights: a.weights.clone(),
        }
    }

    /// Regular grid of `cell×cell` patches (ragged at the far edges).
    pub fn patch_grid(height: usize, width: usize, cell: usize) -> Result<Self> {
        if cell == 0 {
            return Err(Error::Config("patch size must be positive".into()));
        }
        let cols = width.div_ceil(cell);
        let labels = (0..height * width)
            .map(|i| ((i / width) / cell * cols + (i % width) / cell) as u32)
            .collect();
        Self::from_labels(height, width, &[labels])
    }

    /// Nearest-neighbor resampling of the membership rows to `H×W`.
    pub fn resize(&self, height: usize, width: usize) -> Self {
        let n = height * width;
        let k = self.slots;
        let src = |y: usize, x: usize| (y * self.height / height) * self.width + x * self.width / width;
        let mut ids = Vec::with_capacity(n * k);
        let mut weights = vec![0.0f32; self.heads * n * k];
        for y in 0..height {
            for x in 0..width {
                let s = src(y, x);
                ids.extend_from_slice(&self.ids[s * k..(s + 1) * k]);
            }
        }
        let sn = self.pixels();
        for h in 0..self.heads {
            for y in 0..height {
                for x in 0..width {
                    let s = src(y, x);
                    let d = y * width + x;
                    weights[(h * n + d) * k..(h * n + d + 1) * k]
                        .copy_from_slice(&self.weights[(h * sn + s) * k..(h * sn + s + 1) * k]);
                }
            }
        }
        Self {
            heads: self.heads,
            height,
            width,
            segments: self.segments,
            slots: k,
            ids,
            weights,
        }
    }
}

/// Nearest-neighbor downsampling of a label map.
pub fn downsample_labels(labels: &[u32], height: usize, width: usize, out_h: usize, out_w: usize) -> Vec<u32> {
    let mut out = Vec::with_capacity(out_h * out_w);
    for y in 0..out_h {
        let sy = ((2 * y + 1) * height / (2 * out_h)).min(height - 1);
        for x in 0..out_w {
            let sx = ((2 * x + 1) * width / (2 * out_w)).min(width - 1);
            out.push(labels[sy * width + sx]);
        }
    }
    out
}

/// Where ground truth and assignment meet.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Alignment {
    /// Evaluate at ground-truth resolution, resampling the assignment.
    #[default]
    Upscale,
    /// Evaluate on the assignment's grid, downsampling the ground truth.
    Downsample,
}

#[derive(Clone, Debug, PartialEq)]
pub struct QualityReport {
    pub method: String,
    /// Per class id; `None` when the class is absent from the ground truth.
    pub iou: Vec<Option<f64>>,
    pub acc: Vec<Option<f64>>,
    pub miou: f64,
    pub macc: f64,
    pub classes: usize,
    pub pixels: usize,
    /// mIoU of the best single head.
    pub best_head_miou: f64,
}

impl QualityReport {
    /// `key=value` lines.
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "method={}", self.method);
        let _ = writeln!(s, "miou={:.6}", self.miou);
        let _ = writeln!(s, "macc={:.6}", self.macc);
        let _ = writeln!(s, "best_head_miou={:.6}", self.best_head_miou);
        let _ = writeln!(s, "classes={}", self.classes);
        let _ = writeln!(s, "pixels={}", self.pixels);
        for (c, (iou, acc)) in self.iou.iter().zip(&self.acc).enumerate() {
            if let (Some(iou), Some(acc)) = (iou, acc) {
                let _ = writeln!(s, "class{c}.iou={iou:.6}");
                let _ = writeln!(s, "class{c}.acc={acc:.6}");
            }
        }
        s
    }

    /// Single-line record.
    pub fn to_record(&self) -> String {
        format!(
            "method={} miou={:.6} macc={:.6} best_head_miou={:.6} classes={} pixels={}",
            self.method, self.miou, self.macc, self.best_head_miou, self.classes, self.pixels
        )
    }
}

/// Confusion matrix over `classes` labels plus a trailing "no prediction"
/// column.
#[derive(Clone, Debug, PartialEq)]
pub struct Confusion {
    pub classes: usize,
    /// `[gt, pred]` counts, `classes + 1` columns per row.
    pub counts: Vec<u64>,
}

impl Confusion {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * (classes + 1)],
        }
    }

    pub fn add(&mut self, gt: u32, pred: Option<u32>) {
        let col = pred.map_or(self.classes, |p| p as usize);
        self.counts[gt as usize * (self.classes + 1) + col] += 1;
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * (self.classes + 1) + pred]
    }

    pub fn merge(&mut self, other: &Confusion) {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }

    /// Per-class IoU and accuracy (`None` for classes absent from the ground
    /// truth) and their means over present classes.
    pub fn metrics(&self) -> (Vec<Option<f64>>, Vec<Option<f64>>, f64, f64) {
        let k = self.classes;
        let mut iou = vec![None; k];
        let mut acc = vec![None; k];
        let (mut si, mut sa, mut present) = (0.0, 0.0, 0usize);
        for c in 0..k {
            let row: u64 = (0..=k).map(|p| self.get(c, p)).sum();
            if row == 0 {
                continue;
            }
            let col: u64 = (0..k).map(|g| self.get(g, c)).sum();
            let tp = self.get(c, c);
            let i = tp as f64 / (row + col - tp) as f64;
            let a = tp as f64 / row as f64;
            iou[c] = Some(i);
            acc[c] = Some(a);
            si += i;
            sa += a;
            present += 1;
        }
        let denom = present.max(1) as f64;
        (iou, acc, si / denom, sa / denom)
    }

    pub fn pixels(&self) -> u64 {
        self.counts.iter().sum()
    }
}

/// Index of the largest entry if any is positive; ties go to the lowest index.
fn argmax_positive(v: &[f64]) -> Option<u32> {
    let mut best: Option<usize> = None;
    for (c, &x) in v.iter().enumerate() {
        if x > 0.0 && best.is_none_or(|b| x > v[b]) {
            best = Some(c);
        }
    }
    best.map(|b| b as u32)
}

/// Accumulates quality over many images.
#[derive(Clone, Debug)]
pub struct QualityAccumulator {
    pub classes: usize,
    pub averaged: Confusion,
    pub per_head: Vec<Confusion>,
}

impl QualityAccumulator {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            averaged: Confusion::new(classes),
            per_head: Vec::new(),
        }
    }

    /// Scores one image. `gt` must match the partition's grid.
    pub fn add(&mut self, part: &Partition, gt: &[u32]) -> Result<()> {
        let n = part.pixels();
        if gt.len() != n {
            return Err(Error::shape(
                "superpixel_quality",
                format!(
                    "label map has {} pixels, partition is {}x{}",
                    gt.len(),
                    part.height,
                    part.width
                ),
            ));
        }
        let k = self.classes;
        if let Some(&bad) = gt.iter().find(|&&l| l != IGNORE_LABEL && l as usize >= k) {
            return Err(Error::Config(format!("label {bad} outside {k} classes")));
        }
        if self.per_head.len() < part.heads {
            self.per_head.resize(part.heads, Confusion::new(k));
        }
        let slots = part.slots;
        let segs = part.segments;
        // majority label of every segment, per head
        let mut seg_pred = vec![None; part.heads * segs];
        let mut votes = vec![0.0f64; segs * k];
        for h in 0..part.heads {
            votes.iter_mut().for_each(|v| *v = 0.0);
            for (i, &g) in gt.iter().enumerate() {
                if g == IGNORE_LABEL {
                    continue;
                }
                for j in 0..slots {
                    let id = part.ids[i * slots + j];
                    if id == NO_SUPERPIXEL {
                        continue;
                    }
                    let w = part.weights[(h * n + i) * slots + j] as f64;
                    votes[id as usize * k + g as usize] += w;
                }
            }
            for p in 0..segs {
                seg_pred[h * segs + p] = argmax_positive(&votes[p * k..(p + 1) * k]);
            }
        }
        // spread one-hot segment predictions back to pixels
        let mut avg = vec![0.0f64; k];
        let mut head_probs = vec![0.0f64; k];
        for (i, &g) in gt.iter().enumerate() {
            if g == IGNORE_LABEL {
                continue;
            }
            avg.iter_mut().for_each(|v| *v = 0.0);
            for h in 0..part.heads {
                head_probs.iter_mut().for_each(|v| *v = 0.0);
                for j in 0..slots {
                    let id = part.ids[i * slots + j];
                    if id == NO_SUPERPIXEL {
                        continue;
                    }
                    if let Some(c) = seg_pred[h * segs + id as usize] {
                        head_probs[c as usize] += part.weights[(h * n + i) * slots + j] as f64;
                    }
                }
                self.per_head[h].add(g, argmax_positive(&head_probs));
                for (a, p) in avg.iter_mut().zip(&head_probs) {
                    *a += p / part.heads as f64;
                }
            }
            self.averaged.add(g, argmax_positive(&avg));
        }
        Ok(())
    }

    pub fn report(&self, method: &str) -> QualityReport {
        let (iou, acc, miou, macc) = self.averaged.metrics();
        let best_head_miou = self
            .per_head
            .iter()
            .map(|c| c.metrics().2)
            .fold(f64::NEG_INFINITY, f64::max);
        QualityReport {
            method: method.to_string(),
            classes: iou.iter().filter(|v| v.is_some()).count(),
            iou,
            acc,
            miou,
            macc,
            pixels: self.averaged.pixels() as usize,
            best_head_miou: if best_head_miou.is_finite() {
                best_head_miou
            } else {
                miou
            },
        }
    }
}

/// Quality of one partition against one label map.
pub fn superpixel_quality(part: &Partition, gt: &[u32], classes: usize, method: &str) -> Result<QualityReport> {
    let mut acc = QualityAccumulator::new(classes);
    acc.add(part, gt)?;
    Ok(acc.report(method))
}

/// Brings a partition and a full-resolution label map onto a common grid.
pub fn align(part: &Partition, gt: &[u32], gt_h: usize, gt_w: usize, mode: Alignment) -> Result<(Partition, Vec<u32>)> {
    if gt.len() != gt_h * gt_w {
        return Err(Error::shape("align", "label map size does not match its extents"));
    }
    match mode {
        Alignment::Upscale => Ok((part.resize(gt_h, gt_w), gt.to_vec())),
        Alignment::Downsample => Ok((part.clone(), downsample_labels(gt, gt_h, gt_w, part.height, part.width))),
    }
}

/// Per-channel mean of `[3, H, W]` images.
pub fn dataset_mean(images: &[Tensor<f32>]) -> [f32; 3] {
    let mut sum = [0.0f64; 3];
    let mut count = 0usize;
    for img in images {
        let n = img.numel() / 3;
        for (c, s) in sum.iter_mut().enumerate() {
            *s += img.data()[c * n..(c + 1) * n].iter().map(|&v| v as f64).sum::<f64>();
        }
        count += n;
    }
    sum.map(|s| if count == 0 { 0.0 } else { (s / count as f64) as f32 })
}

fn dims(image: &Tensor<f32>) -> Result<(usize, usize, usize)> {
    match image.shape() {
        [c, h, w] => Ok((*c, *h, *w)),
        s => Err(Error::shape("image", format!("expected [C, H, W], got {s:?}"))),
    }
}

/// Rotation about the image center with bilinear sampling; samples falling
/// outside the frame take `fill`.
pub fn rotate_image(image: &Tensor<f32>, degrees: f64, fill: &[f32]) -> Result<Tensor<f32>> {
    let (c, h, w) = dims(image)?;
    if fill.len() != c {
        return Err(Error::shape("rotate_image", "fill must have one value per channel"));
    }
    let (sin, cos) = degrees.to_radians().sin_cos();
    let cy = (h as f64 - 1.0) / 2.0;
    let cx = (w as f64 - 1.0) / 2.0;
    let src = image.data();
    let mut out = vec![0.0f32; c * h * w];
    for y in 0..h {
        for x in 0..w {
            let (dy, dx) = (y as f64 - cy, x as f64 - cx);
            // inverse rotation of the output coordinate
            let sx = cx + cos * dx + sin * dy;
            let sy = cy - sin * dx + cos * dy;
            let inside = sx >= -1e-9 && sy >= -1e-9 && sx <= w as f64 - 1.0 + 1e-9 && sy <= h as f64 - 1.0 + 1e-9;
            for ch in 0..c {
                out[ch * h * w + y * w + x] = if inside {
                    let sx = sx.clamp(0.0, w as f64 - 1.0);
                    let sy = sy.clamp(0.0, h as f64 - 1.0);
                    let (x0, y0) = (sx.floor() as usize, sy.floor() as usize);
                    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
                    let (fx, fy) = (sx - x0 as f64, sy - y0 as f64);
                    let at = |yy: usize, xx: usize| src[ch * h * w + yy * w + xx] as f64;
                    let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
                    let bot = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
                    (top * (1.0 - fy) + bot * fy) as f32
                } else {
                    fill[ch]
                };
            }
        }
    }
    Tensor::new(&[c, h, w], out)
}

/// Axis-aligned box `[y0, y1) × [x0, x1)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Rect {
    pub y0: usize,
    pub x0: usize,
    pub y1: usize,
    pub x1: usize,
}

impl Rect {
    /// Centered box covering about `ratio` of an `H×W` frame.
    pub fn centered(h: usize, w: usize, ratio: f64) -> Self {
        let side = ratio.clamp(0.0, 1.0).sqrt();
        let bh = ((h as f64 * side).round() as usize).min(h);
        let bw = ((w as f64 * side).round() as usize).min(w);
        let y0 = (h - bh) / 2;
        let x0 = (w - bw) / 2;
        Self {
            y0,
            x0,
            y1: y0 + bh,
            x1: x0 + bw,
        }
    }
}

/// Overwrites `rect` (clipped to the frame) with `fill`.
pub fn occlude_image(image: &Tensor<f32>, rect: Rect, fill: &[f32]) -> Result<Tensor<f32>> {
    let (c, h, w) = dims(image)?;
    if fill.len() != c {
        return Err(Error::shape("occlude_image", "fill must have one value per channel"));
    }
    let mut out = image.clone();
    let data = out.data_mut();
    for ch in 0..c {
        for y in rect.y0.min(h)..rect.y1.min(h) {
            for x in rect.x0.min(w)..rect.x1.min(w) {
                data[ch * h * w + y * w + x] = fill[ch];
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Transform {
    Identity,
    Rotate(f64),
    /// Centered occluder covering this fraction of the frame.
    Occlude(f64),
}

impl Transform {
    pub fn name(&self) -> String {
        match self {
            Transform::Identity => "clean".into(),
            Transform::Rotate(d) => format!("rot{d}"),
            Transform::Occlude(r) => format!("occ{r}"),
        }
    }

    pub fn apply(&self, image: &Tensor<f32>, fill: &[f32]) -> Result<Tensor<f32>> {
        match *self {
            Transform::Identity => Ok(image.clone()),
            Transform::Rotate(d) => rotate_image(image, d, fill),
            Transform::Occlude(r) => {
                let (_, h, w) = dims(image)?;
                occlude_image(image, Rect::centered(h, w, r), fill)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RobustnessReport {
    /// `(transform name, accuracy)`, clean first.
    pub entries: Vec<(String, f64)>,
    pub samples: usize,
}

impl RobustnessReport {
    pub fn accuracy(&self, name: &str) -> Option<f64> {
        self.entries.iter().find(|(n, _)| n == name).map(|&(_, a)| a)
    }

    pub fn to_kv(&self) -> String {
        let mut s = format!("samples={}\n", self.samples);
        for (name, acc) in &self.entries {
            let _ = writeln!(s, "{name}={acc:.6}");
        }
        s
    }
}

/// Classification accuracy under each transform. The clean accuracy is always
/// reported first; `fill` is the out-of-frame and occluder value.
pub fn robustness_eval(
    model: &Model,
    samples: &[(Tensor<f32>, usize)],
    transforms: &[Transform],
    fill: &[f32],
) -> Result<RobustnessReport> {
    if samples.is_empty() {
        return Err(Error::Config("robustness evaluation needs at least one sample".into()));
    }
    let mut all = vec![Transform::Identity];
    all.extend(transforms.iter().filter(|t| **t != Transform::Identity));
    let mut entries = Vec::with_capacity(all.len());
    for t in &all {
        let correct: Vec<bool> = samples
            .par_iter()
            .map(|(img, label)| -> Result<bool> {
                let x = t.apply(img, fill)?;
                Ok(argmax(&model.logits(&x)?) == *label)
            })
            .collect::<Result<_>>()?;
        let acc = correct.iter().filter(|&&c| c).count() as f64 / samples.len() as f64;
        entries.push((t.name(), acc));
    }
    Ok(RobustnessReport {
        entries,
        samples: samples.len(),
    })
}
