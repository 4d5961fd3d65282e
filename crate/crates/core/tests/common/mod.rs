//! Independent reference implementations shared by the integration tests.
//!
//! Everything here recomputes results from first principles in `f64`, using
//! dense loops over all (pixel, superpixel) pairs instead of the sparse
//! neighbor tables the library relies on.
#![allow(dead_code)]

use std::rc::Rc;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use spformer::autodiff::{Graph, Var};
use spformer::geometry::{Grid, MAX_NEIGHBORS};
use spformer::gradcheck::{grad_check, GradCheckOptions, Objective};
use spformer::model::{forward_classify, ForwardOptions, Model, ModelConfig};
use spformer::params::{Binder, ParamStore};
use spformer::sca::{self, ScaConfig};
use spformer::tensor::{Scalar, Tensor};
use spformer::Result;

pub fn randn(shape: &[usize], std: f64, seed: u64) -> Tensor<f32> {
    Tensor::randn(shape, std, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Whether superpixel `p` lies in the 3×3 block of cells around the cell of
/// pixel `i`.
pub fn covers(h: usize, w: usize, r: usize, i: usize, p: usize) -> bool {
    let _ = h;
    let sw = w.div_ceil(r);
    let (y, x) = (i / w, i % w);
    let (py, px) = (p / sw, p % sw);
    (y / r).abs_diff(py) <= 1 && (x / r).abs_diff(px) <= 1
}

/// Columns of a `[C, N]` tensor as `f64` vectors.
pub fn columns(t: &Tensor<f32>) -> Vec<Vec<f64>> {
    let (c, n) = (t.shape()[0], t.shape()[1]);
    (0..n)
        .map(|j| (0..c).map(|k| t.data()[k * n + j] as f64).collect())
        .collect()
}

/// `W x + b` with `W` stored as `[out, in]`.
pub fn affine(store: &ParamStore, name: &str, x: &[f64]) -> Vec<f64> {
    let w = store.get(&format!("{name}.weight")).unwrap();
    let b = store.get(&format!("{name}.bias")).unwrap();
    let (o, i) = (w.shape()[0], w.shape()[1]);
    (0..o)
        .map(|r| b.data()[r] as f64 + (0..i).map(|k| w.data()[r * i + k] as f64 * x[k]).sum::<f64>())
        .collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Softmax over the entries selected by `keep`; the rest are zero.
pub fn masked_softmax(logits: &[f64], keep: &[bool]) -> Vec<f64> {
    let max = logits
        .iter()
        .zip(keep)
        .filter(|(_, &k)| k)
        .map(|(&l, _)| l)
        .fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits
        .iter()
        .zip(keep)
        .map(|(&l, &k)| if k { (l - max).exp() } else { 0.0 })
        .collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// An SCA module with every parameter drawn at a scale where attention is far
/// from uniform.
pub fn random_sca_store(prefix: &str, cfg: &ScaConfig, seed: u64) -> ParamStore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    for spec in sca::param_specs(prefix, cfg, 1.0) {
        let std = if spec.shape.len() == 1 { 0.5 } else { 0.35 };
        store.insert(spec.name.clone(), Tensor::randn(&spec.shape, std, &mut rng));
    }
    store
}

pub struct ScaCase {
    pub cfg: ScaConfig,
    pub h: usize,
    pub w: usize,
    pub r: usize,
    pub store: ParamStore,
    pub s: Tensor<f32>,
    pub i: Tensor<f32>,
    pub s_cpe: Tensor<f32>,
    pub i_cpe: Tensor<f32>,
}

impl ScaCase {
    pub fn random(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let heads = [1, 2, 4][rng.gen_range(0..3)];
        let channels = heads * rng.gen_range(1..=32 / heads);
        let r: usize = [2, 3, 4][rng.gen_range(0..3)];
        let h = rng.gen_range(r..=16);
        let w = rng.gen_range(r..=16);
        let cfg = ScaConfig {
            channels,
            heads,
            iterations: 1,
            scaled_attention: rng.gen(),
            share_iteration_weights: false,
        };
        let (sh, sw) = (h.div_ceil(r), w.div_ceil(r));
        Self {
            store: random_sca_store("m", &cfg, seed ^ 0x5ca),
            s: Tensor::randn(&[channels, sh * sw], 1.0, &mut rng),
            i: Tensor::randn(&[channels, h * w], 1.0, &mut rng),
            s_cpe: Tensor::randn(&[channels, sh * sw], 1.0, &mut rng),
            i_cpe: Tensor::randn(&[channels, h * w], 1.0, &mut rng),
            cfg,
            h,
            w,
            r,
        }
    }

    pub fn superpixels(&self) -> usize {
        self.h.div_ceil(self.r) * self.w.div_ceil(self.r)
    }

    fn scale(&self) -> f64 {
        if self.cfg.scaled_attention {
            1.0 / (self.cfg.head_dim() as f64).sqrt()
        } else {
            1.0
        }
    }

    fn gamma(&self, name: &str) -> Vec<f64> {
        let t = self.store.get(&format!("m.{name}")).unwrap();
        t.data().iter().map(|&v| v as f64).collect()
    }

    /// `[C, P]` superpixel update by dense masked attention over all pixels.
    pub fn dense_p2s(&self) -> Vec<f64> {
        let (c, d, heads) = (self.cfg.channels, self.cfg.head_dim(), self.cfg.heads);
        let (n, p_count) = (self.h * self.w, self.superpixels());
        let s_cols = columns(&self.s_cpe);
        let i_cols = columns(&self.i_cpe);
        let base = columns(&self.s);
        let q: Vec<Vec<f64>> = s_cols
            .iter()
            .map(|x| {
                affine(&self.store, "m.it0.p2s_q", x)
                    .iter()
                    .map(|v| v * self.scale())
                    .collect()
            })
            .collect();
        let k: Vec<Vec<f64>> = i_cols.iter().map(|x| affine(&self.store, "m.it0.p2s_k", x)).collect();
        let v: Vec<Vec<f64>> = i_cols.iter().map(|x| affine(&self.store, "m.it0.p2s_v", x)).collect();
        let gamma = self.gamma("gamma_s");
        let mut out = vec![0.0; c * p_count];
        for p in 0..p_count {
            let keep: Vec<bool> = (0..n).map(|i| covers(self.h, self.w, self.r, i, p)).collect();
            for hd in 0..heads {
                let hs = hd * d..(hd + 1) * d;
                let logits: Vec<f64> = (0..n).map(|i| dot(&q[p][hs.clone()], &k[i][hs.clone()])).collect();
                let a = masked_softmax(&logits, &keep);
                for ch in hs.clone() {
                    let upd: f64 = (0..n).map(|i| a[i] * v[i][ch]).sum();
                    out[ch * p_count + p] = base[p][ch] + gamma[ch] * upd;
                }
            }
        }
        out
    }

    /// Dense association `[heads, N, P]`.
    pub fn dense_association(&self) -> Vec<f64> {
        let (d, heads) = (self.cfg.head_dim(), self.cfg.heads);
        let (n, p_count) = (self.h * self.w, self.superpixels());
        let q: Vec<Vec<f64>> = columns(&self.i_cpe)
            .iter()
            .map(|x| affine(&self.store, "m.it0.s2p_q", x))
            .collect();
        let k: Vec<Vec<f64>> = columns(&self.s_cpe)
            .iter()
            .map(|x| {
                affine(&self.store, "m.it0.s2p_k", x)
                    .iter()
                    .map(|v| v * self.scale())
                    .collect()
            })
            .collect();
        let mut out = vec![0.0; heads * n * p_count];
        for i in 0..n {
            let keep: Vec<bool> = (0..p_count).map(|p| covers(self.h, self.w, self.r, i, p)).collect();
            for hd in 0..heads {
                let hs = hd * d..(hd + 1) * d;
                let logits: Vec<f64> = (0..p_count)
                    .map(|p| dot(&q[i][hs.clone()], &k[p][hs.clone()]))
                    .collect();
                let a = masked_softmax(&logits, &keep);
                out[(hd * n + i) * p_count..(hd * n + i + 1) * p_count].copy_from_slice(&a);
            }
        }
        out
    }

    /// `[C, N]` pixel update from a dense `[heads, N, P]` association.
    pub fn dense_s2p(&self, assoc: &[f64]) -> Vec<f64> {
        let (c, d) = (self.cfg.channels, self.cfg.head_dim());
        let (n, p_count) = (self.h * self.w, self.superpixels());
        let v: Vec<Vec<f64>> = columns(&self.s_cpe)
            .iter()
            .map(|x| affine(&self.store, "m.it0.s2p_v", x))
            .collect();
        let gamma = self.gamma("gamma_i");
        let base = columns(&self.i);
        let mut out = vec![0.0; c * n];
        for i in 0..n {
            for ch in 0..c {
                let hd = ch / d;
                let upd: f64 = (0..p_count).map(|p| assoc[(hd * n + i) * p_count + p] * v[p][ch]).sum();
                out[ch * n + i] = base[i][ch] + gamma[ch] * upd;
            }
        }
        out
    }

    /// A random valid association in slot layout, together with its dense form.
    pub fn random_association(&self, grid: &Grid, seed: u64) -> (Tensor<f32>, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (heads, n, p_count) = (self.cfg.heads, self.h * self.w, self.superpixels());
        let mut slots = vec![0.0f32; heads * n * MAX_NEIGHBORS];
        let mut dense = vec![0.0f64; heads * n * p_count];
        for hd in 0..heads {
            for i in 0..n {
                let nb = grid.neighbors.neighbors(i);
                let raw: Vec<f32> = nb.iter().map(|_| rng.gen_range(0.05f32..1.0)).collect();
                let z: f32 = raw.iter().sum();
                for (j, (&p, &x)) in nb.iter().zip(&raw).enumerate() {
                    let a = x / z;
                    slots[(hd * n + i) * MAX_NEIGHBORS + j] = a;
                    dense[(hd * n + i) * p_count + p as usize] += a as f64;
                }
            }
        }
        (Tensor::new(&[heads, n, MAX_NEIGHBORS], slots).unwrap(), dense)
    }
}

/// Dense `[C, N]` reconstruction `I_i = Σ_p A[h(c), i, p] S[c, p]`.
pub fn dense_pixelify(s: &Tensor<f32>, assoc: &[f64], heads: usize) -> Vec<f64> {
    let (c, p_count) = (s.shape()[0], s.shape()[1]);
    let n = assoc.len() / (heads * p_count);
    let d = c / heads;
    let mut out = vec![0.0; c * n];
    for ch in 0..c {
        for i in 0..n {
            out[ch * n + i] = (0..p_count)
                .map(|p| assoc[((ch / d) * n + i) * p_count + p] * s.data()[ch * p_count + p] as f64)
                .sum();
        }
    }
    out
}

/// Slot-layout association `[heads, N, 9]` scattered to dense `[heads, N, P]`.
pub fn densify(a: &Tensor<f32>, grid: &Grid) -> Vec<f64> {
    let (heads, n, p_count) = (a.shape()[0], grid.pixels(), grid.superpixels());
    let mut out = vec![0.0; heads * n * p_count];
    for hd in 0..heads {
        for i in 0..n {
            for (j, &p) in grid.neighbors.neighbors(i).iter().enumerate() {
                out[(hd * n + i) * p_count + p as usize] += a.data()[(hd * n + i) * MAX_NEIGHBORS + j] as f64;
            }
        }
    }
    out
}

pub fn max_abs(a: &[f32], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(&x, &y)| (x as f64 - y).abs()).fold(0.0, f64::max)
}

pub fn max_abs64(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Largest deviation of P2S, association, S2P and pixelify from their dense
/// oracles on one random case.
pub fn oracle_errors(seed: u64) -> [f64; 4] {
    let case = ScaCase::random(seed);
    let grid = Arc::new(Grid::build(case.h, case.w, case.r).unwrap());
    let mut g = Graph::<f32>::new();
    let mut b = Binder::frozen(&case.store);
    let s = g.constant(case.s.clone());
    let i = g.constant(case.i.clone());
    let s_cpe = g.constant(case.s_cpe.clone());
    let i_cpe = g.constant(case.i_cpe.clone());

    let p2s = sca::p2s_attend(&mut g, &mut b, "m", &case.cfg, &grid, s, s_cpe, i_cpe, 0).unwrap();
    let e_p2s = max_abs(g.value(p2s).data(), &case.dense_p2s());

    let assoc = sca::compute_association(&mut g, &mut b, "m", &case.cfg, &grid, i_cpe, s_cpe, 0).unwrap();
    let e_assoc = max_abs64(&densify(g.value(assoc), &grid), &case.dense_association());

    let (a_slots, a_dense) = case.random_association(&grid, seed ^ 0xa55);
    let a = g.constant(a_slots);
    let s2p = sca::s2p_attend(&mut g, &mut b, "m", &case.cfg, &grid, i, s_cpe, a, 0).unwrap();
    let e_s2p = max_abs(g.value(s2p).data(), &case.dense_s2p(&a_dense));

    let px = spformer::model::pixelify(&mut g, s, a, &grid).unwrap();
    let e_px = max_abs(g.value(px).data(), &dense_pixelify(&case.s, &a_dense, case.cfg.heads));
    [e_p2s, e_assoc, e_s2p, e_px]
}

// ---------------------------------------------------------------------------
// gradient checks

/// Every differentiable substrate op, each wrapped into a scalar objective.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Op {
    Matmul,
    Transpose,
    Reshape,
    Add,
    Mul,
    Scale,
    AddChannel,
    MulChannel,
    Linear,
    Sum,
    MeanCols,
    SliceRows,
    ConcatRows,
    Gelu,
    Layernorm,
    MaskedSoftmax,
    CrossEntropy,
    DepthwiseConv,
    Unfold,
    Conv2d,
    Avgpool,
    CellPool,
    Attention,
    PairLogits,
    NeighborSoftmax,
    WindowSoftmax,
    WindowAggregate,
    NeighborGather,
}

pub const ALL_OPS: [Op; 28] = [
    Op::Matmul,
    Op::Transpose,
    Op::Reshape,
    Op::Add,
    Op::Mul,
    Op::Scale,
    Op::AddChannel,
    Op::MulChannel,
    Op::Linear,
    Op::Sum,
    Op::MeanCols,
    Op::SliceRows,
    Op::ConcatRows,
    Op::Gelu,
    Op::Layernorm,
    Op::MaskedSoftmax,
    Op::CrossEntropy,
    Op::DepthwiseConv,
    Op::Unfold,
    Op::Conv2d,
    Op::Avgpool,
    Op::CellPool,
    Op::Attention,
    Op::PairLogits,
    Op::NeighborSoftmax,
    Op::WindowSoftmax,
    Op::WindowAggregate,
    Op::NeighborGather,
];

/// Grid used by the window ops: 5×6 pixels, ratio 2.
const GH: usize = 5;
const GW: usize = 6;
const GR: usize = 2;
const GP: usize = 9; // ceil(5/2) * ceil(6/2)

pub struct OpCase {
    pub op: Op,
    pub seed: u64,
    pub target: usize,
}

impl OpCase {
    pub fn inputs(&self) -> Vec<Tensor<f32>> {
        let s = self.seed * 31;
        let t = |shape: &[usize], k: u64| randn(shape, 1.0, s + k);
        let pos = |shape: &[usize], k: u64| {
            let mut x = randn(shape, 0.3, s + k);
            x.data_mut().iter_mut().for_each(|v| *v = v.abs() + 0.1);
            x
        };
        match self.op {
            Op::Matmul => vec![t(&[3, 4], 0), t(&[4, 2], 1)],
            Op::Transpose | Op::Reshape | Op::Sum | Op::MeanCols | Op::Scale => vec![t(&[3, 5], 0)],
            Op::Add | Op::Mul => vec![t(&[2, 3, 2], 0), t(&[2, 3, 2], 1)],
            Op::AddChannel | Op::MulChannel => vec![t(&[3, 2, 2], 0), t(&[3], 1)],
            Op::Linear => vec![t(&[4, 3], 0), t(&[2, 4], 1), t(&[2], 2)],
            Op::SliceRows => vec![t(&[5, 3], 0)],
            Op::ConcatRows => vec![t(&[2, 3], 0), t(&[1, 3], 1)],
            Op::Gelu => vec![t(&[4, 4], 0)],
            Op::Layernorm => vec![t(&[6, 3], 0), t(&[6], 1), t(&[6], 2)],
            Op::MaskedSoftmax => vec![t(&[3, 5], 0)],
            Op::CrossEntropy => vec![t(&[6], 0)],
            Op::DepthwiseConv => vec![t(&[2, 4, 5], 0), t(&[2, 3, 3], 1), t(&[2], 2)],
            Op::Unfold => vec![t(&[2, 4, 5], 0)],
            Op::Conv2d => vec![t(&[2, 5, 5], 0), t(&[3, 2, 3, 3], 1), t(&[3], 2)],
            Op::Avgpool => vec![t(&[2, 4, 6], 0)],
            Op::CellPool => vec![t(&[2, 5, 7], 0)],
            Op::Attention => vec![t(&[4, 5], 0), t(&[4, 5], 1), t(&[4, 5], 2)],
            Op::PairLogits => vec![t(&[3, GH * GW], 0), t(&[6, GP], 1), t(&[2, GP], 2)],
            Op::NeighborSoftmax | Op::WindowSoftmax => vec![t(&[2, GH * GW, MAX_NEIGHBORS], 0)],
            Op::WindowAggregate => vec![pos(&[2, GH * GW, MAX_NEIGHBORS], 0), t(&[3, GH * GW], 1)],
            Op::NeighborGather => vec![pos(&[2, GH * GW, MAX_NEIGHBORS], 0), t(&[4, GP], 1)],
        }
    }
}

impl Objective for OpCase {
    fn eval<S: Scalar>(&self, g: &mut Graph<S>, v: &[Var]) -> Result<Var> {
        let grid = Arc::new(Grid::build(GH, GW, GR)?);
        let y = match self.op {
            Op::Matmul => g.matmul(v[0], v[1])?,
            Op::Transpose => g.transpose(v[0])?,
            Op::Reshape => g.reshape(v[0], &[5, 3])?,
            Op::Add => g.add(v[0], v[1])?,
            Op::Mul => g.mul(v[0], v[1])?,
            Op::Scale => g.scale(v[0], -1.7)?,
            Op::AddChannel => g.add_channel(v[0], v[1])?,
            Op::MulChannel => g.mul_channel(v[0], v[1])?,
            Op::Linear => g.linear(v[0], v[1], Some(v[2]))?,
            Op::Sum => g.sum(v[0])?,
            Op::MeanCols => g.mean_cols(v[0])?,
            Op::SliceRows => g.slice_rows(v[0], 1, 4)?,
            Op::ConcatRows => g.concat_rows(&[v[0], v[1], v[0]])?,
            Op::Gelu => g.gelu(v[0])?,
            Op::Layernorm => g.layernorm(v[0], v[1], v[2])?,
            Op::MaskedSoftmax => {
                let mask: Vec<bool> = (0..15).map(|k| k % 5 != (k / 5 + self.seed as usize) % 5).collect();
                g.masked_softmax(v[0], Some(Rc::new(mask)))?
            }
            Op::CrossEntropy => g.cross_entropy(v[0], self.target, 0.1)?,
            Op::DepthwiseConv => g.depthwise_conv3x3(v[0], v[1], v[2])?,
            Op::Unfold => g.unfold(v[0], 3, 2, 1)?,
            Op::Conv2d => g.conv2d(v[0], v[1], v[2], 2, 1)?,
            Op::Avgpool => g.avgpool(v[0], 2)?,
            Op::CellPool => g.cell_pool(v[0], 3)?,
            Op::Attention => g.multi_head_attention(v[0], v[1], v[2], 2, 0.7)?,
            Op::PairLogits => g.pair_logits(v[0], v[1], v[2], &grid)?,
            Op::NeighborSoftmax => g.neighbor_softmax(v[0], &grid)?,
            Op::WindowSoftmax => g.window_softmax(v[0], &grid)?,
            Op::WindowAggregate => g.window_aggregate(v[0], v[1], &grid)?,
            Op::NeighborGather => g.neighbor_gather(v[0], v[1], &grid)?,
        };
        weighted_sum(g, y, self.seed)
    }
}

/// `Σ c_k y_k` with fixed random `c`, so every output carries its own gradient.
pub fn weighted_sum<S: Scalar>(g: &mut Graph<S>, y: Var, seed: u64) -> Result<Var> {
    let shape = g.shape(y).to_vec();
    let c = g.constant(randn(&shape, 1.0, seed ^ 0xc0ffee).cast());
    let p = g.mul(y, c)?;
    g.sum(p)
}

/// Worst relative error of `op` over `seeds` random instances.
pub fn op_grad_error(op: Op, seeds: std::ops::Range<u64>) -> f64 {
    seeds
        .map(|seed| {
            let case = OpCase {
                op,
                seed,
                target: seed as usize % 6,
            };
            let inputs = case.inputs();
            grad_check(
                &case,
                &inputs,
                &GradCheckOptions {
                    seed,
                    ..Default::default()
                },
            )
            .unwrap_or_else(|e| panic!("{op:?} seed {seed}: {e}"))
            .max_rel_error
        })
        .fold(0.0, f64::max)
}

/// Full SCA module (two iterations, two heads) with every parameter and both
/// feature maps as inputs.
pub struct ScaObjective {
    pub cfg: ScaConfig,
    pub names: Vec<String>,
    pub h: usize,
    pub w: usize,
    pub r: usize,
    pub seed: u64,
}

impl ScaObjective {
    pub fn new(seed: u64) -> (Self, Vec<Tensor<f32>>) {
        let cfg = ScaConfig {
            channels: 4,
            heads: 2,
            iterations: 2,
            scaled_attention: true,
            share_iteration_weights: false,
        };
        let (h, w, r) = (8, 8, 2);
        let store = random_sca_store("m", &cfg, seed);
        let names: Vec<String> = store.names().cloned().collect();
        let mut inputs: Vec<Tensor<f32>> = names.iter().map(|n| store.get(n).unwrap().clone()).collect();
        inputs.push(randn(&[4, 16], 1.0, seed + 1));
        inputs.push(randn(&[4, h * w], 1.0, seed + 2));
        (
            Self {
                cfg,
                names,
                h,
                w,
                r,
                seed,
            },
            inputs,
        )
    }
}

impl Objective for ScaObjective {
    fn eval<S: Scalar>(&self, g: &mut Graph<S>, v: &[Var]) -> Result<Var> {
        let store = ParamStore::new();
        let mut b = Binder::<S>::frozen(&store);
        for (name, &var) in self.names.iter().zip(v) {
            b.bind(name.clone(), var);
        }
        let k = self.names.len();
        let grid = Arc::new(Grid::build(self.h, self.w, self.r)?);
        let out = sca::sca_forward(g, &mut b, "m", &self.cfg, &grid, v[k], v[k + 1])?;
        let a = weighted_sum(g, out.superpixels, self.seed)?;
        let c = weighted_sum(g, out.pixels, self.seed + 1)?;
        let d = weighted_sum(g, out.association(), self.seed + 2)?;
        let ac = g.add(a, c)?;
        g.add(ac, d)
    }
}

pub fn sca_grad_error(seed: u64) -> f64 {
    let (obj, inputs) = ScaObjective::new(seed);
    grad_check(
        &obj,
        &inputs,
        &GradCheckOptions {
            seed,
            ..Default::default()
        },
    )
    .unwrap()
    .max_rel_error
}

/// Toy-config classification loss with the image and all parameters as inputs.
pub struct ToyObjective {
    pub cfg: ModelConfig,
    pub names: Vec<String>,
    pub label: usize,
}

impl ToyObjective {
    /// LayerScale is raised to one so every branch contributes to the loss.
    pub fn new(seed: u64) -> (Self, Vec<Tensor<f32>>) {
        let mut model = Model::init(ModelConfig::toy(), seed).unwrap();
        model.set_layerscale(1.0);
        let names: Vec<String> = model.params.names().cloned().collect();
        let mut inputs: Vec<Tensor<f32>> = names.iter().map(|n| model.params.get(n).unwrap().clone()).collect();
        let mut img = randn(&[3, 32, 32], 0.3, seed + 9);
        img.data_mut().iter_mut().for_each(|v| *v += 0.5);
        inputs.push(img);
        let label = seed as usize % 4;
        (
            Self {
                cfg: model.config,
                names,
                label,
            },
            inputs,
        )
    }
}

impl Objective for ToyObjective {
    fn eval<S: Scalar>(&self, g: &mut Graph<S>, v: &[Var]) -> Result<Var> {
        let store = ParamStore::new();
        let mut b = Binder::<S>::frozen(&store);
        for (name, &var) in self.names.iter().zip(v) {
            b.bind(name.clone(), var);
        }
        let (logits, _) = forward_classify(g, &mut b, &self.cfg, v[self.names.len()], ForwardOptions::eval())?;
        g.cross_entropy(logits, self.label, 0.0)
    }
}

/// Probes `per_tensor` random entries of every input.
pub fn toy_grad_error(seed: u64, per_tensor: usize) -> f64 {
    let (obj, inputs) = ToyObjective::new(seed);
    let opts = GradCheckOptions {
        max_entries: Some(per_tensor),
        seed,
        ..Default::default()
    };
    grad_check(&obj, &inputs, &opts).unwrap().max_rel_error
}
