//! Synthetic shape data, AdamW with a cosine schedule, and the training loop.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::autodiff::Graph;
use crate::checkpoint;
use crate::config::parse_kv;
use crate::error::{Error, Result};
use crate::model::{argmax, forward_classify, ForwardOptions, Model, ModelConfig};
use crate::netpbm::{GrayImage, RgbImage};
use crate::params::{Binder, ParamStore};
use crate::sca::AssociationMap;
use crate::tensor::Tensor;

/// Shape families, in class order.
pub const SHAPES: [&str; 8] = [
    "disk", "triangle", "bar", "ring", "cross", "square", "diamond", "ellipse",
];

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSample {
    pub image: RgbImage,
    pub label: usize,
    /// Full-resolution mask: 0 for background, `label + 1` on the shape.
    pub mask: Vec<u32>,
}

impl SynthSample {
    pub fn tensor(&self) -> Tensor<f32> {
        self.image.to_tensor()
    }
}

fn inside_shape(class: usize, dy: f64, dx: f64, size: f64, angle: f64) -> bool {
    let (s, c) = angle.sin_cos();
    // coordinates in the shape's rotated frame
    let u = c * dx + s * dy;
    let v = -s * dx + c * dy;
    match class {
        0 => dx * dx + dy * dy <= size * size,
        // equilateral triangle with circumradius `size`, apex up
        1 => v <= size * 0.5 && u.abs() * 3f64.sqrt() <= v + size,
        2 => u.abs() <= size && v.abs() <= size * 0.3,
        3 => {
            let r2 = dx * dx + dy * dy;
            r2 <= size * size && r2 >= (size * 0.55).powi(2)
        }
        4 => (u.abs() <= size && v.abs() <= size * 0.28) || (v.abs() <= size && u.abs() <= size * 0.28),
        5 => u.abs() <= size * 0.8 && v.abs() <= size * 0.8,
        6 => u.abs() + v.abs() <= size,
        _ => (u / size).powi(2) + (v / (size * 0.55)).powi(2) <= 1.0,
    }
}

fn random_color<R: Rng>(rng: &mut R, lo: f64, hi: f64) -> [f64; 3] {
    [0, 1, 2].map(|_| rng.gen_range(lo..hi))
}

fn color_distance(a: [f64; 3], b: [f64; 3]) -> f64 {
    (0..3).map(|k| (a[k] - b[k]).powi(2)).sum::<f64>().sqrt()
}

fn render<R: Rng>(rng: &mut R, class: usize, h: usize, w: usize) -> (RgbImage, Vec<u32>) {
    let n = h * w;
    let min_pixels = (n as f64 * 0.05).ceil() as usize;
    let md = h.min(w) as f64;
    loop {
        let size = md * rng.gen_range(0.22..0.36);
        let margin = size + 1.0;
        let cy = rng.gen_range(margin.min(h as f64 / 2.0)..=(h as f64 - margin).max(h as f64 / 2.0));
        let cx = rng.gen_range(margin.min(w as f64 / 2.0)..=(w as f64 - margin).max(w as f64 / 2.0));
        let angle = rng.gen_range(0.0..PI);
        let mut mask = vec![0u32; n];
        for y in 0..h {
            for x in 0..w {
                if inside_shape(class, y as f64 + 0.5 - cy, x as f64 + 0.5 - cx, size, angle) {
                    mask[y * w + x] = class as u32 + 1;
                }
            }
        }
        let area = mask.iter().filter(|&&m| m != 0).count();
        if area < min_pixels || !is_connected(&mask, h, w) || touches_border(&mask, h, w) {
            continue;
        }
        // dark textured background (two colors blended by a random stripe or
        // checker pattern) under a bright shape, plus pixel noise
        let bg_a = random_color(rng, 0.0, 0.45);
        let bg_b = random_color(rng, 0.0, 0.45);
        let mut fg = random_color(rng, 0.35, 1.0);
        while color_distance(fg, bg_a) < 0.45 || color_distance(fg, bg_b) < 0.45 {
            fg = random_color(rng, 0.35, 1.0);
        }
        let freq = rng.gen_range(0.15..0.6);
        let phase = rng.gen_range(0.0..2.0 * PI);
        let (ts, tc) = rng.gen_range(0.0..PI).sin_cos();
        let checker = rng.gen_bool(0.5);
        let mut data = Vec::with_capacity(3 * n);
        for y in 0..h {
            for x in 0..w {
                let t = if checker {
                    ((x as f64 * freq).sin() * (y as f64 * freq + phase).sin() * 0.5 + 0.5).clamp(0.0, 1.0)
                } else {
                    ((tc * x as f64 + ts * y as f64) * freq + phase).sin() * 0.5 + 0.5
                };
                let base = if mask[y * w + x] != 0 {
                    fg
                } else {
                    [0, 1, 2].map(|k| bg_a[k] * t + bg_b[k] * (1.0 - t))
                };
                for v in base {
                    let noisy = v + rng.gen_range(-0.04..0.04);
                    data.push((noisy.clamp(0.0, 1.0) * 255.0).round() as u8);
                }
            }
        }
        return (RgbImage::new(w, h, data).expect("sized"), mask);
    }
}

fn touches_border(mask: &[u32], h: usize, w: usize) -> bool {
    (0..w).any(|x| mask[x] != 0 || mask[(h - 1) * w + x] != 0)
        || (0..h).any(|y| mask[y * w] != 0 || mask[y * w + w - 1] != 0)
}

/// Whether the nonzero pixels of `mask` form a single 4-connected component.
pub fn is_connected(mask: &[u32], h: usize, w: usize) -> bool {
    let Some(start) = mask.iter().position(|&m| m != 0) else {
        return false;
    };
    let mut seen = vec![false; h * w];
    let mut stack = vec![start];
    seen[start] = true;
    let mut count = 0;
    while let Some(i) = stack.pop() {
        count += 1;
        let (y, x) = (i / w, i % w);
        let mut visit = |j: usize| {
            if !seen[j] && mask[j] != 0 {
                seen[j] = true;
                stack.push(j);
            }
        };
        if y > 0 {
            visit(i - w);
        }
        if y + 1 < h {
            visit(i + w);
        }
        if x > 0 {
            visit(i - 1);
        }
        if x + 1 < w {
            visit(i + 1);
        }
    }
    count == mask.iter().filter(|&&m| m != 0).count()
}

/// `n` images of single shapes on textured backgrounds, classes balanced to
/// within one sample and shuffled. Deterministic given `seed`.
pub fn synth_generate(n: usize, height: usize, width: usize, classes: usize, seed: u64) -> Result<Vec<SynthSample>> {
    if classes < 2 || classes > SHAPES.len() {
        return Err(Error::Config(format!(
            "classes must be in [2, {}], got {classes}",
            SHAPES.len()
        )));
    }
    if height < 12 || width < 12 {
        return Err(Error::Config("synthetic images must be at least 12x12".into()));
    }
    let mut order: Vec<usize> = (0..n).map(|i| i % classes).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(order
        .par_iter()
        .enumerate()
        .map(|(i, &class)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0000_0000);
            rng.set_stream(i as u64 + 1);
            let (image, mask) = render(&mut rng, class, height, width);
            SynthSample {
                image,
                label: class,
                mask,
            }
        })
        .collect())
}

/// Writes `img_NNNNN.ppm`, `mask_NNNNN.pgm` and `labels.txt` into `dir`.
pub fn save_dataset(samples: &[SynthSample], dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut index = String::new();
    for (i, s) in samples.iter().enumerate() {
        s.image.write(&dir.join(format!("img_{i:05}.ppm")))?;
        let mask = GrayImage::new(
            s.image.width,
            s.image.height,
            255,
            s.mask.iter().map(|&m| m as u16).collect(),
        )?;
        mask.write(&dir.join(format!("mask_{i:05}.pgm")))?;
        let _ = writeln!(index, "img_{i:05}.ppm {} mask_{i:05}.pgm", s.label);
    }
    fs::write(dir.join("labels.txt"), index)?;
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<Vec<SynthSample>> {
    let index = fs::read_to_string(dir.join("labels.txt"))?;
    let mut out = Vec::new();
    for (ln, line) in index.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split_whitespace().collect();
        let (img, label, mask) = match parts[..] {
            [img, label, mask] => (img, label, Some(mask)),
            [img, label] => (img, label, None),
            _ => {
                return Err(Error::Format(format!(
                    "labels.txt line {}: expected `image label [mask]`",
                    ln + 1
                )))
            }
        };
        let label: usize = label
            .parse()
            .map_err(|_| Error::Format(format!("labels.txt line {}: bad label", ln + 1)))?;
        let image = RgbImage::read(&dir.join(img))?;
        let mask = match mask {
            Some(m) => {
                let g = GrayImage::read(&dir.join(m))?;
                if g.width != image.width || g.height != image.height {
                    return Err(Error::Format(format!("mask {m} does not match its image")));
                }
                g.data.iter().map(|&v| v as u32).collect()
            }
            None => vec![0; image.width * image.height],
        };
        out.push(SynthSample { image, label, mask });
    }
    Ok(out)
}

/// Linear warmup to `base`, then cosine decay to zero at `total`.
pub fn cosine_lr(step: usize, warmup: usize, total: usize, base: f64) -> f64 {
    if step < warmup {
        return base * step as f64 / warmup as f64;
    }
    if total <= warmup {
        return base;
    }
    let progress = ((step - warmup) as f64 / (total - warmup) as f64).min(1.0);
    (base * 0.5 * (1.0 + (PI * progress).cos())).max(0.0)
}

/// AdamW with bias-corrected moments and decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

/// Whether weight decay applies: matrices and kernels only, not biases,
/// norms, LayerScale or position embeddings.
pub fn decays(name: &str, rank: usize) -> bool {
    rank >= 2 && name != "pos_embed"
}

impl AdamW {
    pub fn new(weight_decay: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn update(&mut self, params: &mut ParamStore, grads: &BTreeMap<String, Tensor<f32>>, lr: f64) -> Result<()> {
        for (name, g) in grads {
            if !g.is_finite() {
                return Err(Error::NonFinite { op: "adamw gradient" });
            }
            if params.get(name)?.shape() != g.shape() {
                return Err(Error::shape("adamw", format!("gradient shape for `{name}`")));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (name, p) in params.iter_mut() {
            let Some(g) = grads.get(name) else { continue };
            let n = p.numel();
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let wd = if decays(name, p.rank()) { self.weight_decay } else { 0.0 };
            for (k, (pv, &gv)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                let gv = gv as f64;
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * gv;
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * gv * gv;
                let mut x = *pv as f64;
                x -= lr * wd * x;
                x -= lr * (m[k] / c1) / ((v[k] / c2).sqrt() + self.eps);
                *pv = x as f32;
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_epochs: usize,
    pub weight_decay: f64,
    pub label_smoothing: f64,
    pub seed: u64,
    /// Random horizontal flips and shifts of up to this many pixels.
    pub augment: bool,
    pub max_shift: usize,
    /// Save a checkpoint every this many epochs (0: final only).
    pub checkpoint_every: usize,
    /// Validate every association produced during training.
    pub check_associations: bool,
    /// Worker threads (0: rayon default, capped by `SPX_THREADS`).
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::toy(),
            epochs: 30,
            batch_size: 8,
            lr: 2e-3,
            warmup_epochs: 2,
            weight_decay: 0.05,
            label_smoothing: 0.0,
            seed: 0,
            augment: true,
            max_shift: 2,
            checkpoint_every: 0,
            check_associations: false,
            threads: 0,
        }
    }
}

impl TrainConfig {
    /// Parses `key=value` text: training keys plus any model key. Unknown
    /// keys are errors.
    pub fn from_kv(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let entries = parse_kv(text)?;
        if let Some(v) = entries.iter().find(|e| e.key == "variant") {
            cfg.model.apply(v)?;
        }
        for e in entries.iter().filter(|e| e.key != "variant") {
            match e.key.as_str() {
                "epochs" => cfg.epochs = e.parse()?,
                "batch_size" => cfg.batch_size = e.parse()?,
                "lr" => cfg.lr = e.parse()?,
                "warmup_epochs" => cfg.warmup_epochs = e.parse()?,
                "weight_decay" => cfg.weight_decay = e.parse()?,
                "label_smoothing" => cfg.label_smoothing = e.parse()?,
                "seed" => cfg.seed = e.parse()?,
                "augment" => cfg.augment = e.parse_bool()?,
                "max_shift" => cfg.max_shift = e.parse()?,
                "checkpoint_every" => cfg.checkpoint_every = e.parse()?,
                "check_associations" => cfg.check_associations = e.parse_bool()?,
                "threads" => cfg.threads = e.parse()?,
                _ => {
                    if !cfg.model.apply(e)? {
                        return Err(e.unknown());
                    }
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::Config("lr must be finite and nonnegative".into()));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::Config("label_smoothing must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_acc: f64,
    pub val_acc: f64,
    pub lr: f64,
    pub loss: f64,
}

impl EpochRecord {
    pub fn line(&self) -> String {
        format!(
            "epoch={} train_acc={:.6} val_acc={:.6} lr={:.8} loss={:.6}",
            self.epoch, self.train_acc, self.val_acc, self.lr, self.loss
        )
    }
}

pub struct TrainOutcome {
    pub model: Model,
    pub log: Vec<EpochRecord>,
    /// Association rows validated when `check_associations` is set.
    pub association_rows_checked: u64,
}

/// Random horizontal flip and shift with edge replication.
pub fn augment_image<R: Rng>(image: &Tensor<f32>, max_shift: usize, rng: &mut R) -> Tensor<f32> {
    let [c, h, w] = image.shape()[..] else {
        return image.clone();
    };
    let flip = rng.gen_bool(0.5);
    let s = max_shift as isize;
    let (dy, dx) = if s > 0 {
        (rng.gen_range(-s..=s), rng.gen_range(-s..=s))
    } else {
        (0, 0)
    };
    let src = image.data();
    let mut out = vec![0.0f32; c * h * w];
    for y in 0..h {
        let sy = (y as isize + dy).clamp(0, h as isize - 1) as usize;
        for x in 0..w {
            let xx = if flip { w - 1 - x } else { x };
            let sx = (xx as isize + dx).clamp(0, w as isize - 1) as usize;
            for ch in 0..c {
                out[ch * h * w + y * w + x] = src[ch * h * w + sy * w + sx];
            }
        }
    }
    Tensor::new(&[c, h, w], out).expect("same shape")
}

/// Loss, gradients and prediction for a single training sample.
pub struct SampleResult {
    pub loss: f64,
    pub correct: bool,
    pub grads: BTreeMap<String, Tensor<f32>>,
    pub association_rows: u64,
}

/// One forward/backward pass in training mode.
pub fn sample_gradients(
    model: &Model,
    image: &Tensor<f32>,
    label: usize,
    smoothing: f64,
    seed: u64,
    check_associations: bool,
) -> Result<SampleResult> {
    let mut g = Graph::<f32>::new();
    let mut b = Binder::trainable(&model.params);
    let x = g.constant(image.clone());
    let (logits, features) = forward_classify(&mut g, &mut b, &model.config, x, ForwardOptions::train(seed))?;
    let mut association_rows = 0u64;
    if check_associations {
        for a in features.associations.iter().flatten() {
            let map = AssociationMap::from_tensor(g.value(*a), features.grid.clone())?;
            map.validate(1e-5)?;
            association_rows += (map.heads * map.pixels()) as u64;
        }
    }
    let correct = argmax(&g.value(logits).to_f32_vec()) == label;
    let loss = g.cross_entropy(logits, label, smoothing)?;
    let loss_value = g.value(loss).item() as f64;
    let grads = g.backward(loss)?;
    Ok(SampleResult {
        loss: loss_value,
        correct,
        grads: b.gradients(&g, &grads),
        association_rows,
    })
}

/// Fraction of samples classified correctly in evaluation mode.
pub fn accuracy(model: &Model, samples: &[SynthSample]) -> Result<f64> {
    if samples.is_empty() {
        return Ok(0.0);
    }
    let hits: Vec<bool> = samples
        .par_iter()
        .map(|s| Ok(argmax(&model.logits(&s.tensor())?) == s.label))
        .collect::<Result<_>>()?;
    Ok(hits.iter().filter(|&&h| h).count() as f64 / samples.len() as f64)
}

/// Worker count: `requested` if nonzero, else the rayon default, capped by
/// the `SPX_THREADS` environment variable.
pub fn thread_count(requested: usize) -> usize {
    let base = if requested > 0 {
        requested
    } else {
        rayon::current_num_threads()
    };
    match std::env::var("SPX_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        Some(cap) if cap > 0 => base.min(cap),
        _ => base,
    }
}

fn mix(seed: u64, a: u64, b: u64) -> u64 {
    // splitmix-style scrambling of (seed, a, b)
    let mut z = seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Trains from a fresh initialization. When `out` is given, the metrics log,
/// periodic checkpoints and `final.spxf` are written there. A non-finite loss
/// or gradient aborts training after saving `last_good.spxf`.
pub fn train(
    cfg: &TrainConfig,
    train_set: &[SynthSample],
    val_set: &[SynthSample],
    out: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let model = Model::init(cfg.model.clone(), cfg.seed)?;
    if train_set.is_empty() && cfg.epochs > 0 {
        return Err(Error::Config("training set is empty".into()));
    }
    if let Some(s) = train_set
        .iter()
        .chain(val_set)
        .find(|s| s.label >= cfg.model.num_classes)
    {
        return Err(Error::Config(format!(
            "label {} outside {} classes",
            s.label, cfg.model.num_classes
        )));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(thread_count(cfg.threads))
        .build()
        .map_err(|e| Error::Internal(e.to_string()))?;
    pool.install(|| train_inner(cfg, model, train_set, val_set, out))
}

fn train_inner(
    cfg: &TrainConfig,
    mut model: Model,
    train_set: &[SynthSample],
    val_set: &[SynthSample],
    out: Option<&Path>,
) -> Result<TrainOutcome> {
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("metrics.log"), "")?;
    }
    let steps_per_epoch = train_set.len().div_ceil(cfg.batch_size);
    let total = steps_per_epoch * cfg.epochs;
    let warmup = steps_per_epoch * cfg.warmup_epochs;
    let mut opt = AdamW::new(cfg.weight_decay);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(mix(cfg.seed, 1, 0));
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut rows_checked = 0u64;
    let mut step = 0usize;
    let inputs: Vec<Tensor<f32>> = train_set.par_iter().map(SynthSample::tensor).collect();

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let (mut loss_sum, mut hits) = (0.0f64, 0usize);
        let mut lr = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let results: Vec<SampleResult> = batch
                .par_iter()
                .map(|&idx| {
                    let sample_seed = mix(cfg.seed, step as u64 + 1, idx as u64);
                    let mut rng = ChaCha8Rng::seed_from_u64(sample_seed);
                    let image = if cfg.augment {
                        augment_image(&inputs[idx], cfg.max_shift, &mut rng)
                    } else {
                        inputs[idx].clone()
                    };
                    sample_gradients(
                        &model,
                        &image,
                        train_set[idx].label,
                        cfg.label_smoothing,
                        rng.gen(),
                        cfg.check_associations,
                    )
                })
                .collect::<Result<_>>()
                .map_err(|e| abort(&model, out, e))?;
            // parameters skipped by stochastic depth get zero gradients
            let mut acc64: BTreeMap<&str, Vec<f64>> = model
                .params
                .iter()
                .map(|(name, t)| (name.as_str(), vec![0.0; t.numel()]))
                .collect();
            for r in &results {
                loss_sum += r.loss;
                hits += r.correct as usize;
                rows_checked += r.association_rows;
                for (name, g) in &r.grads {
                    let a = acc64
                        .get_mut(name.as_str())
                        .ok_or_else(|| Error::Param(format!("gradient for unknown `{name}`")))?;
                    for (x, &v) in a.iter_mut().zip(g.data()) {
                        *x += v as f64;
                    }
                }
            }
            let inv = 1.0 / results.len() as f64;
            let mut sum: BTreeMap<String, Tensor<f32>> = BTreeMap::new();
            for (name, a) in acc64 {
                let shape = model.params.get(name)?.shape().to_vec();
                let data = a.into_iter().map(|v| (v * inv) as f32).collect();
                sum.insert(name.to_string(), Tensor::new(&shape, data)?);
            }
            if !loss_sum.is_finite() {
                return Err(abort(&model, out, Error::NonFinite { op: "training loss" }));
            }
            step += 1;
            lr = cosine_lr(step, warmup, total, cfg.lr);
            let snapshot = model.params.clone();
            if let Err(e) = opt.update(&mut model.params, &sum, lr) {
                model.params = snapshot;
                return Err(abort(&model, out, e));
            }
        }
        let rec = EpochRecord {
            epoch,
            train_acc: hits as f64 / train_set.len() as f64,
            val_acc: accuracy(&model, val_set)?,
            lr,
            loss: loss_sum / train_set.len() as f64,
        };
        if let Some(dir) = out {
            let mut text = fs::read_to_string(dir.join("metrics.log"))?;
            text.push_str(&rec.line());
            text.push('\n');
            fs::write(dir.join("metrics.log"), text)?;
            if cfg.checkpoint_every > 0 && epoch % cfg.checkpoint_every == 0 {
                checkpoint::save(&model, &dir.join(format!("epoch_{epoch:03}.spxf")))?;
            }
        }
        log.push(rec);
    }
    if let Some(dir) = out {
        checkpoint::save(&model, &dir.join("final.spxf"))?;
    }
    Ok(TrainOutcome {
        model,
        log,
        association_rows_checked: rows_checked,
    })
}

fn abort(model: &Model, out: Option<&Path>, err: Error) -> Error {
    if let Some(dir) = out {
        let path: PathBuf = dir.join("last_good.spxf");
        if let Err(e) = checkpoint::save(model, &path) {
            return Error::Internal(format!("{err}; saving last good checkpoint failed: {e}"));
        }
    }
    err
}

/// The metrics log as text, one line per epoch.
pub fn format_log(log: &[EpochRecord]) -> String {
    log.iter().map(|r| r.line() + "\n").collect()
}
