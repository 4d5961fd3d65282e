//! Superpixel cross attention (SCA).
//!
//! One iteration refines superpixel features `S` (`[C, P]`) and pixel features
//! `I` (`[C, N]`):
//!
//! 1. CPE: both maps are augmented with a 3×3 depthwise convolution plus skip.
//!    The augmented maps feed the projections; the residual streams stay on
//!    the un-augmented features.
//! 2. P2S: each superpixel attends over the pixels of its window `W_p`.
//! 3. Association: each pixel takes a softmax over its neighbors `N_i`.
//! 4. S2P: each pixel gathers superpixel values weighted by the association.
//!
//! P2S and the association both come from the previous iteration's features.
//! Attention outputs pass through LayerScale before the residual add.
//!
//! Pixel-side projections are never materialized. For a head with query
//! `q = W_q s + b_q` and key `k = W_k x + b_k` the logit
//! `q·k = x·(W_kᵀ q) + b_k·q` is evaluated by folding `W_k` into the
//! superpixel side, and value projections are applied after window
//! aggregation (`Σ a_i (W_v x_i + b_v) = W_v Σ a_i x_i + b_v` because the
//! weights sum to one).

use std::sync::Arc;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::geometry::{hard_assign, Grid, HardAssignment, MAX_NEIGHBORS};
use crate::params::{Binder, Init, ParamSpec};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct ScaConfig {
    pub channels: usize,
    pub heads: usize,
    pub iterations: usize,
    /// Divide logits by `sqrt(C / heads)`.
    pub scaled_attention: bool,
    /// Reuse iteration 0's projections for every iteration.
    pub share_iteration_weights: bool,
}

impl ScaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || !self.channels.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "SCA channels {} not divisible by {} heads",
                self.channels, self.heads
            )));
        }
        if self.iterations == 0 {
            return Err(Error::Config("SCA needs at least one iteration".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.channels / self.heads
    }

    fn logit_scale(&self) -> f64 {
        if self.scaled_attention {
            1.0 / (self.head_dim() as f64).sqrt()
        } else {
            1.0
        }
    }

    /// Prefix of the projection set used by iteration `t`.
    pub fn iteration_prefix(&self, prefix: &str, t: usize) -> String {
        let t = if self.share_iteration_weights { 0 } else { t };
        format!("{prefix}.it{t}")
    }

    fn projection_sets(&self) -> usize {
        if self.share_iteration_weights {
            1
        } else {
            self.iterations
        }
    }
}

/// The six projections of one iteration, in storage order.
pub const PROJECTIONS: [&str; 6] = ["p2s_q", "p2s_k", "p2s_v", "s2p_q", "s2p_k", "s2p_v"];

/// Parameters of one SCA module under `prefix`.
pub fn param_specs(prefix: &str, cfg: &ScaConfig, layerscale_init: f32) -> Vec<ParamSpec> {
    let c = cfg.channels;
    let bound = 1.0 / 3.0; // 1/sqrt(fan_in) for a 3×3 depthwise kernel
    let mut specs = Vec::new();
    for branch in ["cpe_pix", "cpe_sp"] {
        specs.push(ParamSpec::new(
            format!("{prefix}.{branch}.weight"),
            &[c, 3, 3],
            Init::Uniform(bound),
        ));
        specs.push(ParamSpec::new(
            format!("{prefix}.{branch}.bias"),
            &[c],
            Init::Uniform(bound),
        ));
    }
    for t in 0..cfg.projection_sets() {
        let it = cfg.iteration_prefix(prefix, t);
        for name in PROJECTIONS {
            specs.push(ParamSpec::new(
                format!("{it}.{name}.weight"),
                &[c, c],
                Init::TruncNormal(0.02),
            ));
            specs.push(ParamSpec::new(format!("{it}.{name}.bias"), &[c], Init::Zeros));
        }
    }
    for gamma in ["gamma_s", "gamma_i"] {
        specs.push(ParamSpec::new(
            format!("{prefix}.{gamma}"),
            &[c],
            Init::Const(layerscale_init),
        ));
    }
    specs
}

/// Number of scalars in one SCA module.
pub fn param_count(cfg: &ScaConfig) -> usize {
    param_specs("", cfg, 0.0).iter().map(ParamSpec::numel).sum()
}

/// Per-head soft assignment of each pixel to its neighboring superpixels.
#[derive(Clone, Debug)]
pub struct AssociationMap {
    pub heads: usize,
    pub grid: Arc<Grid>,
    /// `[heads, pixels, MAX_NEIGHBORS]`, aligned with the neighbor slots.
    pub weights: Vec<f32>,
}

impl AssociationMap {
    pub fn from_tensor<S: Scalar>(t: &Tensor<S>, grid: Arc<Grid>) -> Result<Self> {
        let heads = match t.shape() {
            [h, n, k] if *n == grid.pixels() && *k == MAX_NEIGHBORS => *h,
            s => {
                return Err(Error::shape(
                    "association",
                    format!("expected [heads, {}, 9], got {s:?}", grid.pixels()),
                ))
            }
        };
        Ok(Self {
            heads,
            grid,
            weights: t.data().iter().map(|x| x.f64() as f32).collect(),
        })
    }

    pub fn pixels(&self) -> usize {
        self.grid.pixels()
    }

    pub fn row(&self, head: usize, pixel: usize) -> &[f32] {
        let base = (head * self.pixels() + pixel) * MAX_NEIGHBORS;
        &self.weights[base..base + MAX_NEIGHBORS]
    }

    /// Checks that valid weights are nonnegative and sum to one within `tol`
    /// and that unused slots are exactly zero.
    pub fn validate(&self, tol: f64) -> Result<()> {
        for h in 0..self.heads {
            for i in 0..self.pixels() {
                let row = self.row(h, i);
                let valid = self.grid.neighbors.count(i);
                let mut sum = 0.0f64;
                for (j, &w) in row.iter().enumerate() {
                    if j < valid {
                        if w < 0.0 {
                            return Err(Error::Internal(format!(
                                "negative association {w} at head {h} pixel {i}"
                            )));
                        }
                        sum += w as f64;
                    } else if w != 0.0 {
                        return Err(Error::Internal(format!(
                            "nonzero weight {w} on invalid slot {j} at head {h} pixel {i}"
                        )));
                    }
                }
                if (sum - 1.0).abs() > tol {
                    return Err(Error::Internal(format!(
                        "association row sums to {sum} at head {h} pixel {i}"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn hard_assign(&self) -> HardAssignment {
        hard_assign(&self.weights, self.heads, &self.grid)
    }

    /// Average over heads, as a single-head map.
    pub fn mean_heads(&self) -> AssociationMap {
        let row = self.pixels() * MAX_NEIGHBORS;
        let mut out = vec![0.0f32; row];
        for (k, o) in out.iter_mut().enumerate() {
            let s: f64 = (0..self.heads).map(|h| self.weights[h * row + k] as f64).sum();
            *o = (s / self.heads as f64) as f32;
        }
        AssociationMap {
            heads: 1,
            grid: self.grid.clone(),
            weights: out,
        }
    }

    /// Association of a single head.
    pub fn head(&self, h: usize) -> AssociationMap {
        let row = self.pixels() * MAX_NEIGHBORS;
        AssociationMap {
            heads: 1,
            grid: self.grid.clone(),
            weights: self.weights[h * row..(h + 1) * row].to_vec(),
        }
    }
}

/// Result of a full SCA module.
pub struct ScaOutput {
    pub superpixels: Var,
    pub pixels: Var,
    /// Association of every iteration, `[heads, N, 9]` each; the last entry is
    /// the module's output association.
    pub associations: Vec<Var>,
}

impl ScaOutput {
    pub fn association(&self) -> Var {
        *self.associations.last().expect("at least one iteration")
    }
}

fn spatial_shape<S: Scalar>(g: &Graph<S>, x: Var, rows: usize, cols: usize) -> Result<usize> {
    match g.shape(x) {
        [c, n] if *n == rows * cols => Ok(*c),
        s => Err(Error::shape(
            "sca",
            format!("expected [C, {}] features, got {s:?}", rows * cols),
        )),
    }
}

/// `x + depthwise_conv3x3(x)` on a `[C, rows·cols]` map.
pub fn cpe_apply<S: Scalar>(
    g: &mut Graph<S>,
    b: &mut Binder<S>,
    prefix: &str,
    x: Var,
    rows: usize,
    cols: usize,
) -> Result<Var> {
    let c = spatial_shape(g, x, rows, cols)?;
    let w = b.var(g, &format!("{prefix}.weight"))?;
    let bias = b.var(g, &format!("{prefix}.bias"))?;
    let spatial = g.reshape(x, &[c, rows, cols])?;
    let conv = g.depthwise_conv3x3(spatial, w, bias)?;
    let conv = g.reshape(conv, &[c, rows * cols])?;
    g.add(x, conv)
}

fn linear<S: Scalar>(g: &mut Graph<S>, b: &mut Binder<S>, name: &str, x: Var) -> Result<Var> {
    let w = b.var(g, &format!("{name}.weight"))?;
    let bias = b.var(g, &format!("{name}.bias"))?;
    g.linear(x, w, Some(bias))
}

/// Folds the pixel-side projection `name` into superpixel-side queries `q`
/// (`[C, P]`): returns `fold` (`[heads·C, P]`) and `offset` (`[heads, P]`) with
/// `fold_h = W_hᵀ q_h` and `offset_h = b_hᵀ q_h`.
fn fold_pixel_projection<S: Scalar>(
    g: &mut Graph<S>,
    b: &mut Binder<S>,
    name: &str,
    q: Var,
    heads: usize,
) -> Result<(Var, Var)> {
    let c = g.shape(q)[0];
    let d = c / heads;
    let w = b.var(g, &format!("{name}.weight"))?;
    let bias = b.var(g, &format!("{name}.bias"))?;
    let bias_col = g.reshape(bias, &[c, 1])?;
    let mut folds = Vec::with_capacity(heads);
    let mut offsets = Vec::with_capacity(heads);
    for h in 0..heads {
        let w_h = g.slice_rows(w, h * d, (h + 1) * d)?;
        let w_ht = g.transpose(w_h)?;
        let q_h = g.slice_rows(q, h * d, (h + 1) * d)?;
        folds.push(g.matmul(w_ht, q_h)?);
        let b_h = g.slice_rows(bias_col, h * d, (h + 1) * d)?;
        let b_ht = g.transpose(b_h)?;
        offsets.push(g.matmul(b_ht, q_h)?);
    }
    Ok((g.concat_rows(&folds)?, g.concat_rows(&offsets)?))
}

/// Pixel-to-superpixel cross attention. `s_base` receives the residual; the
/// CPE-augmented maps supply queries, keys and values.
#[allow(clippy::too_many_arguments)]
pub fn p2s_attend<S: Scalar>(
    g: &mut Graph<S>,
    b: &mut Binder<S>,
    prefix: &str,
    cfg: &ScaConfig,
    grid: &Arc<Grid>,
    s_base: Var,
    s_cpe: Var,
    i_cpe: Var,
    iter: usize,
) -> Result<Var> {
    let it = cfg.iteration_prefix(prefix, iter);
    let heads = cfg.heads;
    let c = cfg.channels;
    let d = cfg.head_dim();
    let q = linear(g, b, &format!("{it}.p2s_q"), s_cpe)?;
    let q = g.scale(q, cfg.logit_scale())?;
    let (fold, offset) = fold_pixel_projection(g, b, &format!("{it}.p2s_k"), q, heads)?;
    let logits = g.pair_logits(i_cpe, fold, offset, grid)?;
    let weights = g.window_softmax(logits, grid)?;
    let agg = g.window_aggregate(weights, i_cpe, grid)?; // [heads*C, P]
    let wv = b.var(g, &format!("{it}.p2s_v.weight"))?;
    let bv = b.var(g, &format!("{it}.p2s_v.bias"))?;
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let w_h = g.slice_rows(wv, h * d, (h + 1) * d)?;
        let agg_h = g.slice_rows(agg, h * c, (h + 1) * c)?;
        outs.push(g.matmul(w_h, agg_h)?);
    }
    let out = g.concat_rows(&outs)?;
    let out = g.add_channel(out, bv)?;
    let gamma = b.var(g, &format!("{prefix}.gamma_s"))?;
    let out = g.mul_channel(out, gamma)?;
    g.add(s_base, out)
}

/// `A_ip = softmax_{p ∈ N_i}(q(I_i) · k(S_p))`, returned as `[heads, N, 9]`.
#[allow(clippy::too_many_arguments)]
pub fn compute_association<S: Scalar>(
    g: &mut Graph<S>,
    b: &mut Binder<S>,
    prefix: &str,
    cfg: &ScaConfig,
    grid: &Arc<Grid>,
    i_cpe: Var,
    s_cpe: Var,
    iter: usize,
) -> Result<Var> {
    let it = cfg.iteration_prefix(prefix, iter);
    let k = linear(g, b, &format!("{it}.s2p_k"), s_cpe)?;
    let k = g.scale(k, cfg.logit_scale())?;
    let (fold, offset) = fold_pixel_projection(g, b, &format!("{it}.s2p_q"), k, cfg.heads)?;
    let logits = g.pair_logits(i_cpe, fold, offset, grid)?;
    g.neighbor_softmax(logits, grid)
}

/// Superpixel-to-pixel update `I_i += γ_I ⊙ Σ_{p ∈ N_i} A_ip v(S_p)`, with each
/// head's association applied to its own channel group.
#[allow(clippy::too_many_arguments)]
pub fn s2p_attend<S: Scalar>(
    g: &mut Graph<S>,
    b: &mut Binder<S>,
    prefix: &str,
    cfg: &ScaConfig,
    grid: &Arc<Grid>,
    i_base: Var,
    s_cpe: Var,
    assoc: Var,
    iter: usize,
) -> Result<Var> {
    let it = cfg.iteration_prefix(prefix, iter);
    let v = linear(g, b, &format!("{it}.s2p_v"), s_cpe)?;
    let out = g.neighbor_gather(assoc, v, grid)?;
    let gamma = b.var(g, &format!("{prefix}.gamma_i"))?;
    let out = g.mul_channel(out, gamma)?;
    g.add(i_base, out)
}

/// Runs `cfg.iterations` SCA iterations on `s0` (`[C, P]`) and `i0` (`[C, N]`).
pub fn sca_forward<S: Scalar>(
    g: &mut Graph<S>,
    b: &mut Binder<S>,
    prefix: &str,
    cfg: &ScaConfig,
    grid: &Arc<Grid>,
    s0: Var,
    i0: Var,
) -> Result<ScaOutput> {
    cfg.validate()?;
    let spec = grid.spec;
    spatial_shape(g, s0, spec.sh, spec.sw)?;
    spatial_shape(g, i0, spec.h, spec.w)?;
    let mut s = s0;
    let mut i = i0;
    let mut associations = Vec::with_capacity(cfg.iterations);
    for t in 0..cfg.iterations {
        let s_cpe = cpe_apply(g, b, &format!("{prefix}.cpe_sp"), s, spec.sh, spec.sw)?;
        let i_cpe = cpe_apply(g, b, &format!("{prefix}.cpe_pix"), i, spec.h, spec.w)?;
        let s_next = p2s_attend(g, b, prefix, cfg, grid, s, s_cpe, i_cpe, t)?;
        let assoc = compute_association(g, b, prefix, cfg, grid, i_cpe, s_cpe, t)?;
        let i_next = s2p_attend(g, b, prefix, cfg, grid, i, s_cpe, assoc, t)?;
        associations.push(assoc);
        s = s_next;
        i = i_next;
    }
    Ok(ScaOutput {
        superpixels: s,
        pixels: i,
        associations,
    })
}
