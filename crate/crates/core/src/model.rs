//! The full network: stem, superpixel initialization, SCA stages interleaved
//! with MHSA blocks, and the classification/segmentation heads.
//!
//! Feature maps are channel-major: pixel features are `[C, h·w]`, superpixel
//! tokens `[C, sh·sw]`. Images are `[3, H, W]`.

use std::fmt::Write as _;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::config::{parse_kv, Entry};
use crate::error::{Error, Result};
use crate::geometry::Grid;
use crate::params::{Binder, Init, ParamSpec, ParamStore};
use crate::sca::{self, AssociationMap, ScaConfig};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StemKind {
    /// Non-overlapping `stride×stride` linear patch embedding.
    Patchify,
    /// `log2(stride)` 3×3 stride-2 convolutions with GELU between them.
    Conv,
}

impl StemKind {
    pub fn as_str(self) -> &'static str {
        match self {
            StemKind::Patchify => "patchify",
            StemKind::Conv => "conv",
        }
    }
}

impl std::str::FromStr for StemKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "patchify" | "patchify4" => Ok(StemKind::Patchify),
            "conv" | "conv_stem" => Ok(StemKind::Conv),
            _ => Err(Error::Config(format!("unknown stem `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub variant: String,
    pub channels: usize,
    /// Number of MHSA blocks.
    pub depth: usize,
    pub mhsa_heads: usize,
    pub sca_heads: usize,
    pub sca_iterations: usize,
    /// An SCA module runs just before each of these block indices.
    pub sca_positions: Vec<usize>,
    pub stem: StemKind,
    pub stem_stride: usize,
    pub superpixel_ratio: usize,
    pub stochastic_depth_rate: f64,
    pub num_classes: usize,
    /// Square input size the model is configured for (position embeddings
    /// and accounting).
    pub image_size: usize,
    pub scaled_attention: bool,
    pub share_iteration_weights: bool,
    /// Learnable absolute position embedding on superpixel tokens.
    pub abs_pos_embed: bool,
    pub layerscale_init: f64,
    pub mlp_ratio: usize,
}

impl ModelConfig {
    fn base(variant: &str, channels: usize, mhsa_heads: usize, sca_heads: usize) -> Self {
        Self {
            variant: variant.to_string(),
            channels,
            depth: 12,
            mhsa_heads,
            sca_heads,
            sca_iterations: 2,
            sca_positions: vec![0, 2],
            stem: StemKind::Patchify,
            stem_stride: 4,
            superpixel_ratio: 4,
            stochastic_depth_rate: 0.1,
            num_classes: 1000,
            image_size: 224,
            scaled_attention: true,
            share_iteration_weights: false,
            abs_pos_embed: false,
            layerscale_init: 1e-5,
            mlp_ratio: 4,
        }
    }

    pub fn tiny() -> Self {
        Self::base("T", 192, 3, 2)
    }

    pub fn small() -> Self {
        Self::base("S", 384, 6, 2)
    }

    pub fn base_variant() -> Self {
        let mut c = Self::base("B", 768, 12, 3);
        c.stochastic_depth_rate = 0.6;
        c
    }

    /// Desk-scale configuration: 32×32 images on a 16×16 pixel grid with
    /// 4×4 superpixels.
    pub fn toy() -> Self {
        Self {
            depth: 4,
            stem_stride: 2,
            num_classes: 4,
            image_size: 32,
            ..Self::base("toy", 32, 2, 2)
        }
    }

    pub fn variant(name: &str) -> Result<Self> {
        match name {
            "toy" => Ok(Self::toy()),
            "T" | "tiny" => Ok(Self::tiny()),
            "S" | "small" => Ok(Self::small()),
            "B" | "base" => Ok(Self::base_variant()),
            _ => Err(Error::Config(format!("unknown variant `{name}`"))),
        }
    }

    /// Raw pixels spanned by one superpixel cell along each axis.
    pub fn superpixel_span(&self) -> usize {
        self.stem_stride * self.superpixel_ratio
    }

    pub fn sca_config(&self) -> ScaConfig {
        ScaConfig {
            channels: self.channels,
            heads: self.sca_heads,
            iterations: self.sca_iterations,
            scaled_attention: self.scaled_attention,
            share_iteration_weights: self.share_iteration_weights,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.channels == 0 || self.depth == 0 || self.num_classes == 0 {
            return bad("channels, depth and num_classes must be positive".into());
        }
        if self.mhsa_heads == 0 || !self.channels.is_multiple_of(self.mhsa_heads) {
            return bad(format!(
                "channels {} not divisible by mhsa_heads {}",
                self.channels, self.mhsa_heads
            ));
        }
        self.sca_config().validate()?;
        if self.sca_positions.is_empty() {
            return bad("at least one SCA position is required".into());
        }
        if self.sca_positions.windows(2).any(|w| w[0] >= w[1]) {
            return bad(format!(
                "sca_positions {:?} must be strictly increasing",
                self.sca_positions
            ));
        }
        if *self.sca_positions.last().unwrap() >= self.depth {
            return bad(format!(
                "sca_positions {:?} must lie in [0, {})",
                self.sca_positions, self.depth
            ));
        }
        if self.superpixel_ratio < 2 {
            return bad("superpixel_ratio must be >= 2".into());
        }
        if self.stem_stride == 0 {
            return bad("stem_stride must be positive".into());
        }
        if self.stem == StemKind::Conv && (self.stem_stride < 2 || !self.stem_stride.is_power_of_two()) {
            return bad(format!(
                "conv stem needs a power-of-two stride >= 2, got {}",
                self.stem_stride
            ));
        }
        if !(0.0..1.0).contains(&self.stochastic_depth_rate) {
            return bad("stochastic_depth_rate must lie in [0, 1)".into());
        }
        if self.mlp_ratio == 0 {
            return bad("mlp_ratio must be positive".into());
        }
        if self.abs_pos_embed {
            self.pixel_grid(self.image_size, self.image_size)?;
        }
        Ok(())
    }

    /// Pixel-feature grid for an `H×W` image.
    pub fn pixel_grid(&self, height: usize, width: usize) -> Result<(usize, usize)> {
        let s = self.stem_stride;
        if !height.is_multiple_of(s) || !width.is_multiple_of(s) {
            return Err(Error::shape(
                "stem",
                format!("image {height}x{width} not divisible by stem stride {s}"),
            ));
        }
        let (h, w) = (height / s, width / s);
        if h < self.superpixel_ratio || w < self.superpixel_ratio {
            return Err(Error::Grid(format!(
                "pixel grid {h}x{w} smaller than superpixel ratio {}",
                self.superpixel_ratio
            )));
        }
        Ok((h, w))
    }

    pub fn build_grid(&self, height: usize, width: usize) -> Result<Arc<Grid>> {
        let (h, w) = self.pixel_grid(height, width)?;
        Ok(Arc::new(Grid::build(h, w, self.superpixel_ratio)?))
    }

    /// Serializes as `key=value` lines.
    pub fn to_kv(&self) -> String {
        let positions: Vec<String> = self.sca_positions.iter().map(|p| p.to_string()).collect();
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(s, "{k}={v}");
        };
        put("variant", self.variant.clone());
        put("channels", self.channels.to_string());
        put("depth", self.depth.to_string());
        put("mhsa_heads", self.mhsa_heads.to_string());
        put("sca_heads", self.sca_heads.to_string());
        put("sca_iterations", self.sca_iterations.to_string());
        put("sca_positions", positions.join(","));
        put("stem", self.stem.as_str().to_string());
        put("stem_stride", self.stem_stride.to_string());
        put("superpixel_ratio", self.superpixel_ratio.to_string());
        put("stochastic_depth_rate", self.stochastic_depth_rate.to_string());
        put("num_classes", self.num_classes.to_string());
        put("image_size", self.image_size.to_string());
        put("scaled_attention", self.scaled_attention.to_string());
        put("share_iteration_weights", self.share_iteration_weights.to_string());
        put("abs_pos_embed", self.abs_pos_embed.to_string());
        put("layerscale_init", self.layerscale_init.to_string());
        put("mlp_ratio", self.mlp_ratio.to_string());
        s
    }

    /// Applies one entry; returns `Ok(false)` when the key is not a model key.
    pub fn apply(&mut self, e: &Entry) -> Result<bool> {
        match e.key.as_str() {
            "variant" => {
                // a variant resets every field, so it must come first
                *self = Self::variant(&e.value).map_err(|err| Error::Config(format!("line {}: {err}", e.line)))?;
            }
            "channels" => self.channels = e.parse()?,
            "depth" => self.depth = e.parse()?,
            "mhsa_heads" => self.mhsa_heads = e.parse()?,
            "sca_heads" => self.sca_heads = e.parse()?,
            "sca_iterations" => self.sca_iterations = e.parse()?,
            "sca_positions" => self.sca_positions = e.parse_list()?,
            "stem" => self.stem = e.parse()?,
            "stem_stride" => self.stem_stride = e.parse()?,
            "superpixel_ratio" => self.superpixel_ratio = e.parse()?,
            "stochastic_depth_rate" => self.stochastic_depth_rate = e.parse()?,
            "num_classes" => self.num_classes = e.parse()?,
            "image_size" => self.image_size = e.parse()?,
            "scaled_attention" => self.scaled_attention = e.parse_bool()?,
            "share_iteration_weights" => self.share_iteration_weights = e.parse_bool()?,
            "abs_pos_embed" => self.abs_pos_embed = e.parse_bool()?,
            "layerscale_init" => self.layerscale_init = e.parse()?,
            "mlp_ratio" => self.mlp_ratio = e.parse()?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    /// Parses `key=value` text on top of the toy defaults. Unknown keys are
    /// errors.
    pub fn from_kv(text: &str) -> Result<Self> {
        let mut cfg = Self::toy();
        let entries = parse_kv(text)?;
        if let Some(pos) = entries.iter().position(|e| e.key == "variant") {
            cfg.apply(&entries[pos])?;
        }
        for e in entries.iter().filter(|e| e.key != "variant") {
            if !cfg.apply(e)? {
                return Err(e.unknown());
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Index ranges of the MHSA blocks run after each SCA module.
    fn stage_blocks(&self, stage: usize) -> std::ops::Range<usize> {
        let start = self.sca_positions[stage];
        let end = self.sca_positions.get(stage + 1).copied().unwrap_or(self.depth);
        start..end
    }

    /// Stochastic depth rate of each block, rising linearly to the maximum.
    pub fn drop_rates(&self) -> Vec<f64> {
        if self.depth == 1 {
            return vec![self.stochastic_depth_rate];
        }
        (0..self.depth)
            .map(|j| self.stochastic_depth_rate * j as f64 / (self.depth - 1) as f64)
            .collect()
    }
}

fn conv_stem_widths(cfg: &ModelConfig) -> Vec<(usize, usize)> {
    let layers = conv_stem_layers(cfg);
    let hidden = (cfg.channels / 2).max(1);
    (0..layers)
        .map(|j| {
            let cin = if j == 0 { 3 } else { hidden };
            let cout = if j + 1 == layers { cfg.channels } else { hidden };
            (cin, cout)
        })
        .collect()
}

fn linear_specs(name: &str, cout: usize, cin: usize) -> [ParamSpec; 2] {
    [
        ParamSpec::new(format!("{name}.weight"), &[cout, cin], Init::TruncNormal(0.02)),
        ParamSpec::new(format!("{name}.bias"), &[cout], Init::Zeros),
    ]
}

fn norm_specs(name: &str, c: usize) -> [ParamSpec; 2] {
    [
        ParamSpec::new(format!("{name}.weight"), &[c], Init::Const(1.0)),
        ParamSpec::new(format!("{name}.bias"), &[c], Init::Zeros),
    ]
}

/// Every parameter of the model, in initialization order.
pub fn param_specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let c = cfg.channels;
    let ls = cfg.layerscale_init as f32;
    let mut specs = Vec::new();
    match cfg.stem {
        StemKind::Patchify => {
            let fan_in = 3 * cfg.stem_stride * cfg.stem_stride;
            let bound = 1.0 / (fan_in as f64).sqrt();
            specs.push(ParamSpec::new("stem.proj.weight", &[c, fan_in], Init::Uniform(bound)));
            specs.push(ParamSpec::new("stem.proj.bias", &[c], Init::Uniform(bound)));
        }
        StemKind::Conv => {
            for (j, (cin, cout)) in conv_stem_widths(cfg).into_iter().enumerate() {
                let bound = 1.0 / ((cin * 9) as f64).sqrt();
                specs.push(ParamSpec::new(
                    format!("stem.conv{j}.weight"),
                    &[cout, cin, 3, 3],
                    Init::Uniform(bound),
                ));
                specs.push(ParamSpec::new(
                    format!("stem.conv{j}.bias"),
                    &[cout],
                    Init::Uniform(bound),
                ));
            }
        }
    }
    specs.extend(linear_specs("sp_init", c, c));
    if cfg.abs_pos_embed {
        let (h, w) = (cfg.image_size / cfg.stem_stride, cfg.image_size / cfg.stem_stride);
        let p = h.div_ceil(cfg.superpixel_ratio) * w.div_ceil(cfg.superpixel_ratio);
        specs.push(ParamSpec::new("pos_embed", &[c, p], Init::TruncNormal(0.02)));
    }
    let sca_cfg = cfg.sca_config();
    let stages = cfg.sca_positions.len();
    for k in 0..stages {
        specs.extend(sca::param_specs(&format!("sca{k}"), &sca_cfg, ls));
        if k + 1 < stages {
            specs.extend(linear_specs(&format!("stage{k}.proj"), c, c));
        }
    }
    let hidden = c * cfg.mlp_ratio;
    for j in 0..cfg.depth {
        let b = format!("blocks.{j}");
        specs.extend(norm_specs(&format!("{b}.norm1"), c));
        specs.extend(linear_specs(&format!("{b}.attn.qkv"), 3 * c, c));
        specs.extend(linear_specs(&format!("{b}.attn.proj"), c, c));
        specs.push(ParamSpec::new(format!("{b}.ls1"), &[c], Init::Const(ls)));
        specs.extend(norm_specs(&format!("{b}.norm2"), c));
        specs.extend(linear_specs(&format!("{b}.mlp.fc1"), hidden, c));
        specs.extend(linear_specs(&format!("{b}.mlp.fc2"), c, hidden));
        specs.push(ParamSpec::new(format!("{b}.ls2"), &[c], Init::Const(ls)));
    }
    specs.extend(norm_specs("norm", c));
    specs.extend(linear_specs("head", cfg.num_classes, c));
    specs
}

/// Exact number of scalar parameters.
pub fn param_count(cfg: &ModelConfig) -> usize {
    param_specs(cfg).iter().map(ParamSpec::numel).sum()
}

/// Multiply-accumulate count of one forward pass on an `H×W` image, covering
/// matmuls, convolutions and attention products (normalizations and
/// elementwise ops are not counted).
pub fn flops_estimate(cfg: &ModelConfig, height: usize, width: usize) -> Result<f64> {
    cfg.validate()?;
    let (h, w) = cfg.pixel_grid(height, width)?;
    let c = cfg.channels as f64;
    let n = (h * w) as f64;
    let r = cfg.superpixel_ratio;
    let p = (h.div_ceil(r) * w.div_ceil(r)) as f64;
    let nh = cfg.sca_heads as f64;
    let mut macs = 0.0;
    match cfg.stem {
        StemKind::Patchify => {
            macs += n * c * (3 * cfg.stem_stride * cfg.stem_stride) as f64;
        }
        StemKind::Conv => {
            let (mut oh, mut ow) = (height, width);
            let strided = cfg.stem_stride.trailing_zeros() as usize;
            for (j, (cin, cout)) in conv_stem_widths(cfg).into_iter().enumerate() {
                if j < strided {
                    oh /= 2;
                    ow /= 2;
                }
                macs += (oh * ow * cin * cout * 9) as f64;
            }
        }
    }
    // initialization projects pooled cells
    macs += p * c * c;
    // one SCA iteration: CPE on both maps, four C×C projections on tokens
    // plus the folded key/query projections, and the three windowed products
    // (P2S logits, P2S aggregation, association logits) per head plus the
    // S2P gather
    let sca_iter = 9.0 * c * (n + p) + 6.0 * p * c * c + 9.0 * n * c * (3.0 * nh + 1.0);
    let stages = cfg.sca_positions.len() as f64;
    macs += stages * cfg.sca_iterations as f64 * sca_iter;
    // inter-stage projection and pixel update
    macs += (stages - 1.0) * (p * c * c + 9.0 * n * c);
    let hidden = c * cfg.mlp_ratio as f64;
    let block = p * (3.0 * c * c + c * c + 2.0 * c * hidden) + 2.0 * p * p * c;
    macs += cfg.depth as f64 * block;
    macs += c * cfg.num_classes as f64;
    Ok(macs)
}

/// Superpixel count for an `H×W` image.
pub fn count_superpixels(cfg: &ModelConfig, height: usize, width: usize) -> Result<usize> {
    let (h, w) = cfg.pixel_grid(height, width)?;
    let r = cfg.superpixel_ratio;
    Ok(h.div_ceil(r) * w.div_ceil(r))
}

fn linear<S: Scalar>(g: &mut Graph<S>, b: &mut Binder<S>, name: &str, x: Var) -> Result<Var> {
    let w = b.var(g, &format!("{name}.weight"))?;
    let bias = b.var(g, &format!("{name}.bias"))?;
    g.linear(x, w, Some(bias))
}

fn layernorm<S: Scalar>(g: &mut Graph<S>, b: &mut Binder<S>, name: &str, x: Var) -> Result<Var> {
    let gamma = b.var(g, &format!("{name}.weight"))?;
    let beta = b.var(g, &format!("{name}.bias"))?;
    g.layernorm(x, gamma, beta)
}

fn image_dims<S: Scalar>(g: &Graph<S>, image: Var) -> Result<(usize, usize)> {
    match g.shape(image) {
        [3, h, w] => Ok((*h, *w)),
        s => Err(Error::shape("image", format!("expected [3, H, W], got {s:?}"))),
    }
}

/// Linear `stride×stride` patch embedding: `[3, H, W] -> [C, H/s, W/s]`.
pub fn patchify_stem<S: Scalar>(g: &mut Graph<S>, b: &mut Binder<S>, cfg: &ModelConfig, image: Var) -> Result<Var> {
    let (height, width) = image_dims(g, image)?;
    let s = cfg.stem_stride;
    if height % s != 0 || width % s != 0 {
        return Err(Error::shape(
            "patchify_stem",
            format!("image {height}x{width} not divisible by {s}"),
        ));
    }
    let cols = g.unfold(image, s, s, 0)?;
    let y = linear(g, b, "stem.proj", cols)?;
    g.reshape(y, &[cfg.channels, height / s, width / s])
}

/// At least two 3×3 convolutions: one stride-2 layer per factor of two in
/// the stem stride, then stride-1 layers up to the minimum depth.
fn conv_stem_layers(cfg: &ModelConfig) -> usize {
    (cfg.stem_stride.trailing_zeros() as usize).max(2)
}

/// Stacked 3×3 convolutions with GELU between: `[3, H, W] -> [C, H/s, W/s]`.
pub fn conv_stem<S: Scalar>(g: &mut Graph<S>, b: &mut Binder<S>, cfg: &ModelConfig, image: Var) -> Result<Var> {
    let (height, width) = image_dims(g, image)?;
    let s = cfg.stem_stride;
    if height % s != 0 || width % s != 0 {
        return Err(Error::shape(
            "conv_stem",
            format!("image {height}x{width} not divisible by {s}"),
        ));
    }
    let layers = conv_stem_layers(cfg);
    let strided = cfg.stem_stride.trailing_zeros() as usize;
    let mut x = image;
    for j in 0..layers {
        let w = b.var(g, &format!("stem.conv{j}.weight"))?;
        let bias = b.var(g, &format!("stem.conv{j}.bias"))?;
        let stride = if j < strided { 2 } else { 1 };
        x = g.conv2d(x, w, bias, stride, 1)?;
        if j + 1 < layers {
            x = g.gelu(x)?;
        }
    }
    Ok(x)
}

/// `S0 = avgpool(conv1x1(I0), r)` for `I0` as `[C, h, w]`. Pooling is applied
/// first; the two commute because both are affine and the pool weights sum
/// to one.
pub fn superpixel_init<S: Scalar>(g: &mut Graph<S>, b: &mut Binder<S>, cfg: &ModelConfig, pixels: Var) -> Result<Var> {
    let pooled = g.cell_pool(pixels, cfg.superpixel_ratio)?;
    linear(g, b, "sp_init", pooled)
}

/// `I_i = Σ_{p ∈ N_i} A_ip S_p`, with head `h` of `A` driving the `h`-th
/// channel group of `S`. `s` is `[C, P]`, `a` is `[heads, N, 9]`.
pub fn pixelify<S: Scalar>(g: &mut Graph<S>, s: Var, a: Var, grid: &Arc<Grid>) -> Result<Var> {
    g.neighbor_gather(a, s, grid)
}

/// Average of `[heads, N, 9]` associations over heads, as `[1, N, 9]`.
pub fn mean_heads<S: Scalar>(g: &mut Graph<S>, a: Var) -> Result<Var> {
    let shape = g.shape(a).to_vec();
    let [heads, n, k] = shape[..] else {
        return Err(Error::shape("mean_heads", format!("{shape:?}")));
    };
    let flat = g.reshape(a, &[heads, n * k])?;
    let t = g.transpose(flat)?;
    let m = g.mean_cols(t)?;
    g.reshape(m, &[1, n, k])
}

fn residual<S: Scalar>(g: &mut Graph<S>, x: Var, branch: Var, keep: f64) -> Result<Var> {
    if keep == 0.0 {
        return Ok(x);
    }
    let branch = if keep == 1.0 { branch } else { g.scale(branch, keep)? };
    g.add(x, branch)
}

/// Pre-norm transformer block on tokens `[C, P]`. `keep` holds the residual
/// scales of the attention and MLP branches: 1 at evaluation, and 0 or
/// `1/(1-p)` under stochastic depth.
pub fn mhsa_block<S: Scalar>(
    g: &mut Graph<S>,
    b: &mut Binder<S>,
    cfg: &ModelConfig,
    index: usize,
    x: Var,
    keep: [f64; 2],
) -> Result<Var> {
    let c = cfg.channels;
    let pre = format!("blocks.{index}");
    let mut x = x;
    if keep[0] != 0.0 {
        let h = layernorm(g, b, &format!("{pre}.norm1"), x)?;
        let qkv = linear(g, b, &format!("{pre}.attn.qkv"), h)?;
        let q = g.slice_rows(qkv, 0, c)?;
        let k = g.slice_rows(qkv, c, 2 * c)?;
        let v = g.slice_rows(qkv, 2 * c, 3 * c)?;
        let scale = 1.0 / ((c / cfg.mhsa_heads) as f64).sqrt();
        let a = g.multi_head_attention(q, k, v, cfg.mhsa_heads, scale)?;
        let o = linear(g, b, &format!("{pre}.attn.proj"), a)?;
        let ls = b.var(g, &format!("{pre}.ls1"))?;
        let o = g.mul_channel(o, ls)?;
        x = residual(g, x, o, keep[0])?;
    }
    if keep[1] != 0.0 {
        let h = layernorm(g, b, &format!("{pre}.norm2"), x)?;
        let m = linear(g, b, &format!("{pre}.mlp.fc1"), h)?;
        let m = g.gelu(m)?;
        let m = linear(g, b, &format!("{pre}.mlp.fc2"), m)?;
        let ls = b.var(g, &format!("{pre}.ls2"))?;
        let m = g.mul_channel(m, ls)?;
        x = residual(g, x, m, keep[1])?;
    }
    Ok(x)
}

/// Evaluation mode is deterministic; training mode draws stochastic depth
/// decisions from `seed`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ForwardOptions {
    pub train: bool,
    pub seed: u64,
}

impl ForwardOptions {
    pub fn eval() -> Self {
        Self::default()
    }

    pub fn train(seed: u64) -> Self {
        Self { train: true, seed }
    }
}

/// Intermediate results of a forward pass.
pub struct Features {
    pub grid: Arc<Grid>,
    /// Final superpixel tokens `[C, P]`.
    pub superpixels: Var,
    /// Final pixel features `[C, N]`.
    pub pixels: Var,
    /// Per SCA module, the association of every iteration.
    pub associations: Vec<Vec<Var>>,
}

impl Features {
    /// The last association produced by the last SCA module.
    pub fn final_association(&self) -> Var {
        *self
            .associations
            .last()
            .and_then(|a| a.last())
            .expect("model has at least one SCA iteration")
    }
}

/// Runs the backbone up to the final superpixel tokens.
pub fn forward_features<S: Scalar>(
    g: &mut Graph<S>,
    b: &mut Binder<S>,
    cfg: &ModelConfig,
    image: Var,
    opts: ForwardOptions,
) -> Result<Features> {
    cfg.validate()?;
    let (height, width) = image_dims(g, image)?;
    let grid = cfg.build_grid(height, width)?;
    let spec = grid.spec;
    let c = cfg.channels;

    let stem = match cfg.stem {
        StemKind::Patchify => patchify_stem(g, b, cfg, image)?,
        StemKind::Conv => conv_stem(g, b, cfg, image)?,
    };
    let mut s = superpixel_init(g, b, cfg, stem)?;
    if cfg.abs_pos_embed {
        let pos = b.var(g, "pos_embed")?;
        if g.shape(pos) != g.shape(s) {
            return Err(Error::shape(
                "pos_embed",
                format!(
                    "embedding {:?} does not match {} superpixels",
                    g.shape(pos),
                    spec.superpixels()
                ),
            ));
        }
        s = g.add(s, pos)?;
    }
    let mut i = g.reshape(stem, &[c, spec.pixels()])?;

    let rates = cfg.drop_rates();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut keep = |j: usize| -> [f64; 2] {
        let p = rates[j];
        if !opts.train || p == 0.0 {
            return [1.0; 2];
        }
        let mut draw = || {
            if rng.gen::<f64>() < p {
                0.0
            } else {
                1.0 / (1.0 - p)
            }
        };
        [draw(), draw()]
    };

    for j in 0..cfg.sca_positions[0] {
        s = mhsa_block(g, b, cfg, j, s, keep(j))?;
    }
    let sca_cfg = cfg.sca_config();
    let stages = cfg.sca_positions.len();
    let mut associations = Vec::with_capacity(stages);
    for k in 0..stages {
        let out = sca::sca_forward(g, b, &format!("sca{k}"), &sca_cfg, &grid, s, i)?;
        s = out.superpixels;
        i = out.pixels;
        let a = out.association();
        associations.push(out.associations);
        for j in cfg.stage_blocks(k) {
            s = mhsa_block(g, b, cfg, j, s, keep(j))?;
        }
        if k + 1 < stages {
            let proj = linear(g, b, &format!("stage{k}.proj"), s)?;
            let up = pixelify(g, proj, a, &grid)?;
            i = g.add(i, up)?;
        }
    }
    Ok(Features {
        grid,
        superpixels: s,
        pixels: i,
        associations,
    })
}

/// Class logits `[num_classes]`.
pub fn forward_classify<S: Scalar>(
    g: &mut Graph<S>,
    b: &mut Binder<S>,
    cfg: &ModelConfig,
    image: Var,
    opts: ForwardOptions,
) -> Result<(Var, Features)> {
    let f = forward_features(g, b, cfg, image, opts)?;
    let logits = classify_tokens(g, b, cfg, f.superpixels)?;
    Ok((logits, f))
}

/// Head applied to superpixel tokens: LN, global average pool, linear.
pub fn classify_tokens<S: Scalar>(g: &mut Graph<S>, b: &mut Binder<S>, cfg: &ModelConfig, tokens: Var) -> Result<Var> {
    let x = layernorm(g, b, "norm", tokens)?;
    let pooled = g.mean_cols(x)?;
    let col = g.reshape(pooled, &[cfg.channels, 1])?;
    let y = linear(g, b, "head", col)?;
    g.reshape(y, &[cfg.num_classes])
}

/// Per-pixel logits `[num_classes, h, w]` on the pixel-feature grid: every
/// final superpixel token is classified, then upsampled with the head-averaged
/// final association.
pub fn forward_segment<S: Scalar>(
    g: &mut Graph<S>,
    b: &mut Binder<S>,
    cfg: &ModelConfig,
    image: Var,
    opts: ForwardOptions,
) -> Result<Var> {
    let f = forward_features(g, b, cfg, image, opts)?;
    let x = layernorm(g, b, "norm", f.superpixels)?;
    let logits = linear(g, b, "head", x)?;
    let a = mean_heads(g, f.final_association())?;
    let up = pixelify(g, logits, a, &f.grid)?;
    g.reshape(up, &[cfg.num_classes, f.grid.spec.h, f.grid.spec.w])
}

/// A configuration together with its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
}

/// Inference results for one image.
#[derive(Clone, Debug)]
pub struct Analysis {
    pub logits: Vec<f32>,
    /// Final association of every SCA module.
    pub associations: Vec<AssociationMap>,
}

impl Analysis {
    pub fn final_association(&self) -> &AssociationMap {
        self.associations.last().expect("at least one SCA module")
    }

    pub fn predicted_class(&self) -> usize {
        argmax(&self.logits)
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(v: &[f32]) -> usize {
    let mut best = 0;
    for (k, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = k;
        }
    }
    best
}

impl Model {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = ParamStore::from_specs(&param_specs(&config), &mut rng);
        Ok(Self { config, params })
    }

    /// Checks that the stored parameters match the configuration exactly.
    pub fn check_params(&self) -> Result<()> {
        let specs = param_specs(&self.config);
        if specs.len() != self.params.len() {
            return Err(Error::Param(format!(
                "expected {} parameters, found {}",
                specs.len(),
                self.params.len()
            )));
        }
        for s in &specs {
            let t = self.params.get(&s.name)?;
            if t.shape() != s.shape.as_slice() {
                return Err(Error::Param(format!(
                    "`{}` has shape {:?}, expected {:?}",
                    s.name,
                    t.shape(),
                    s.shape
                )));
            }
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.params.numel()
    }

    /// Sets every LayerScale vector to `value`.
    pub fn set_layerscale(&mut self, value: f32) {
        for (name, t) in self.params.iter_mut() {
            let is_ls = name.ends_with(".gamma_s")
                || name.ends_with(".gamma_i")
                || name.ends_with(".ls1")
                || name.ends_with(".ls2");
            if is_ls {
                t.data_mut().iter_mut().for_each(|v| *v = value);
            }
        }
    }

    /// Evaluation-mode forward pass.
    pub fn analyze(&self, image: &Tensor<f32>) -> Result<Analysis> {
        let mut g = Graph::<f32>::new();
        let mut b = Binder::frozen(&self.params);
        let x = g.constant(image.clone());
        let (logits, f) = forward_classify(&mut g, &mut b, &self.config, x, ForwardOptions::eval())?;
        let associations = f
            .associations
            .iter()
            .map(|its| {
                let a = *its.last().expect("at least one iteration");
                AssociationMap::from_tensor(g.value(a), f.grid.clone())
            })
            .collect::<Result<_>>()?;
        Ok(Analysis {
            logits: g.value(logits).to_f32_vec(),
            associations,
        })
    }

    pub fn logits(&self, image: &Tensor<f32>) -> Result<Vec<f32>> {
        let mut g = Graph::<f32>::new();
        let mut b = Binder::frozen(&self.params);
        let x = g.constant(image.clone());
        let (logits, _) = forward_classify(&mut g, &mut b, &self.config, x, ForwardOptions::eval())?;
        Ok(g.value(logits).to_f32_vec())
    }

    /// Per-pixel logits `[num_classes, h, w]`.
    pub fn segment(&self, image: &Tensor<f32>) -> Result<Tensor<f32>> {
        let mut g = Graph::<f32>::new();
        let mut b = Binder::frozen(&self.params);
        let x = g.constant(image.clone());
        let y = forward_segment(&mut g, &mut b, &self.config, x, ForwardOptions::eval())?;
        Ok(g.value(y).clone())
    }

    /// Logits of the path with every SCA and MHSA block removed:
    /// stem, initialization, pooling and head.
    pub fn baseline_logits(&self, image: &Tensor<f32>) -> Result<Vec<f32>> {
        let cfg = &self.config;
        let mut g = Graph::<f32>::new();
        let mut b = Binder::frozen(&self.params);
        let x = g.constant(image.clone());
        let stem = match cfg.stem {
            StemKind::Patchify => patchify_stem(&mut g, &mut b, cfg, x)?,
            StemKind::Conv => conv_stem(&mut g, &mut b, cfg, x)?,
        };
        let mut s = superpixel_init(&mut g, &mut b, cfg, stem)?;
        if cfg.abs_pos_embed {
            let pos = b.var(&mut g, "pos_embed")?;
            s = g.add(s, pos)?;
        }
        let y = classify_tokens(&mut g, &mut b, cfg, s)?;
        Ok(g.value(y).to_f32_vec())
    }
}
