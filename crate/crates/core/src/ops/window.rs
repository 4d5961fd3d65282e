//! Sliding-window kernels over the pixel/superpixel neighbor structure.
//!
//! Pixel/superpixel pair quantities are stored as `[heads, pixels, 9]`, one
//! slot per entry of `N_i`. Reading a row gives a pixel's neighbors; grouping
//! slots by superpixel gives that superpixel's window `W_p`.

use std::rc::Rc;
use std::sync::Arc;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::geometry::{Grid, MAX_NEIGHBORS};
use crate::tensor::{Scalar, Tensor};

const K: usize = MAX_NEIGHBORS;

fn transpose<S: Scalar>(x: &[S], rows: usize, cols: usize) -> Vec<S> {
    let mut out = vec![S::zero(); rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = x[r * cols + c];
        }
    }
    out
}

fn pair_shape(op: &'static str, shape: &[usize], grid: &Grid) -> Result<usize> {
    match shape {
        [heads, n, k] if *n == grid.pixels() && *k == K => Ok(*heads),
        _ => Err(Error::shape(
            op,
            format!("expected [heads, {}, {K}], got {shape:?}", grid.pixels()),
        )),
    }
}

impl<S: Scalar> Graph<S> {
    /// `L[h,i,j] = pix[:, i] · fold[h·C.., p] + offset[h, p]` with `p = N_i[j]`.
    ///
    /// `pix` is `[C, N]`, `fold` is `[heads·C, P]`, `offset` is `[heads, P]`.
    /// Unused slots hold zero.
    pub fn pair_logits(&mut self, pix: Var, fold: Var, offset: Var, grid: &Arc<Grid>) -> Result<Var> {
        let n = grid.pixels();
        let p_count = grid.superpixels();
        let (c, pn) = match self.shape(pix) {
            [c, pn] => (*c, *pn),
            s => return Err(Error::shape("pair_logits", format!("pixels {s:?}"))),
        };
        if pn != n {
            return Err(Error::shape(
                "pair_logits",
                format!("{pn} pixel columns for a grid of {n}"),
            ));
        }
        let heads = match self.shape(offset) {
            [h, pc] if *pc == p_count => *h,
            s => return Err(Error::shape("pair_logits", format!("offset {s:?}"))),
        };
        if self.shape(fold) != [heads * c, p_count] {
            return Err(Error::shape(
                "pair_logits",
                format!("fold {:?} for {heads} heads of {c}", self.shape(fold)),
            ));
        }
        let pix_t = transpose(self.value(pix).data(), c, n); // [N, C]
        let fold_t = transpose(self.value(fold).data(), heads * c, p_count); // [P, heads*C]
        let off = self.value(offset).data();
        let mut out = vec![S::zero(); heads * n * K];
        for i in 0..n {
            let pr = &pix_t[i * c..(i + 1) * c];
            for (j, &p) in grid.neighbors.neighbors(i).iter().enumerate() {
                let p = p as usize;
                for h in 0..heads {
                    let fr = &fold_t[p * heads * c + h * c..p * heads * c + (h + 1) * c];
                    let mut acc = off[h * p_count + p].f64();
                    for (a, b) in pr.iter().zip(fr) {
                        acc += a.f64() * b.f64();
                    }
                    out[(h * n + i) * K + j] = S::of(acc);
                }
            }
        }
        let value = Tensor::new(&[heads, n, K], out)?;
        let grid = grid.clone();
        self.push(
            "pair_logits",
            value,
            vec![pix, fold, offset],
            Box::new(move |ctx| {
                let g = ctx.grad_out();
                let pix_t = transpose(ctx.input(0).data(), c, n);
                let fold_t = transpose(ctx.input(1).data(), heads * c, p_count);
                let mut dpix_t = vec![0.0f64; n * c];
                let mut dfold_t = vec![0.0f64; p_count * heads * c];
                let mut doff = vec![0.0f64; heads * p_count];
                for i in 0..n {
                    for (j, &p) in grid.neighbors.neighbors(i).iter().enumerate() {
                        let p = p as usize;
                        for h in 0..heads {
                            let gv = g[(h * n + i) * K + j].f64();
                            if gv == 0.0 {
                                continue;
                            }
                            doff[h * p_count + p] += gv;
                            let fbase = p * heads * c + h * c;
                            for ch in 0..c {
                                dpix_t[i * c + ch] += gv * fold_t[fbase + ch].f64();
                                dfold_t[fbase + ch] += gv * pix_t[i * c + ch].f64();
                            }
                        }
                    }
                }
                let dpix = ctx
                    .needs(0)
                    .then(|| transpose(&dpix_t.iter().map(|&v| S::of(v)).collect::<Vec<S>>(), n, c));
                let dfold = ctx.needs(1).then(|| {
                    transpose(
                        &dfold_t.iter().map(|&v| S::of(v)).collect::<Vec<S>>(),
                        p_count,
                        heads * c,
                    )
                });
                let doff = ctx.needs(2).then(|| doff.into_iter().map(S::of).collect());
                vec![dpix, dfold, doff]
            }),
        )
    }

    /// Softmax over each pixel's valid neighbor slots (`softmax_{p ∈ N_i}`).
    pub fn neighbor_softmax(&mut self, logits: Var, grid: &Arc<Grid>) -> Result<Var> {
        let heads = pair_shape("neighbor_softmax", self.shape(logits), grid)?;
        let base = grid.neighbors.mask();
        let mut mask = Vec::with_capacity(heads * base.len());
        for _ in 0..heads {
            mask.extend_from_slice(&base);
        }
        self.masked_softmax(logits, Some(Rc::new(mask)))
    }

    /// Softmax over each superpixel's window (`softmax_{i ∈ W_p}`), per head.
    pub fn window_softmax(&mut self, logits: Var, grid: &Arc<Grid>) -> Result<Var> {
        let heads = pair_shape("window_softmax", self.shape(logits), grid)?;
        let n = grid.pixels();
        let xs = self.value(logits).data();
        let mut out = vec![S::zero(); xs.len()];
        for h in 0..heads {
            for p in 0..grid.superpixels() {
                let win = grid.windows.window(p);
                if win.is_empty() {
                    return Err(Error::Internal(format!("empty window for superpixel {p}")));
                }
                let at = |&(i, j): &(u32, u8)| (h * n + i as usize) * K + j as usize;
                let max = win.iter().map(|e| xs[at(e)].f64()).fold(f64::NEG_INFINITY, f64::max);
                let denom: f64 = win.iter().map(|e| (xs[at(e)].f64() - max).exp()).sum();
                for e in win {
                    out[at(e)] = S::of((xs[at(e)].f64() - max).exp() / denom);
                }
            }
        }
        let value = Tensor::new(&[heads, n, K], out)?;
        let grid = grid.clone();
        self.push(
            "window_softmax",
            value,
            vec![logits],
            Box::new(move |ctx| {
                let y = ctx.output().data();
                let g = ctx.grad_out();
                let mut dx = vec![S::zero(); y.len()];
                for h in 0..heads {
                    for p in 0..grid.superpixels() {
                        let win = grid.windows.window(p);
                        let at = |&(i, j): &(u32, u8)| (h * n + i as usize) * K + j as usize;
                        let dot: f64 = win.iter().map(|e| y[at(e)].f64() * g[at(e)].f64()).sum();
                        for e in win {
                            dx[at(e)] = S::of(y[at(e)].f64() * (g[at(e)].f64() - dot));
                        }
                    }
                }
                vec![Some(dx)]
            }),
        )
    }

    /// `out[h·C + c, p] = Σ_{(i,j) ∈ W_p} a[h,i,j] · pix[c, i]`.
    ///
    /// `weights` is `[heads, N, 9]`, `pix` is `[C, N]`; the result is
    /// `[heads·C, P]`.
    pub fn window_aggregate(&mut self, weights: Var, pix: Var, grid: &Arc<Grid>) -> Result<Var> {
        let heads = pair_shape("window_aggregate", self.shape(weights), grid)?;
        let n = grid.pixels();
        let p_count = grid.superpixels();
        let c = match self.shape(pix) {
            [c, pn] if *pn == n => *c,
            s => return Err(Error::shape("window_aggregate", format!("pixels {s:?}"))),
        };
        let a = self.value(weights).data();
        let pix_t = transpose(self.value(pix).data(), c, n);
        // Accumulate as [P, heads*C] then transpose.
        let mut acc = vec![0.0f64; p_count * heads * c];
        for i in 0..n {
            let pr = &pix_t[i * c..(i + 1) * c];
            for (j, &p) in grid.neighbors.neighbors(i).iter().enumerate() {
                let p = p as usize;
                for h in 0..heads {
                    let wv = a[(h * n + i) * K + j].f64();
                    if wv == 0.0 {
                        continue;
                    }
                    let dst = &mut acc[p * heads * c + h * c..p * heads * c + (h + 1) * c];
                    for (d, v) in dst.iter_mut().zip(pr) {
                        *d += wv * v.f64();
                    }
                }
            }
        }
        let out = transpose(&acc.into_iter().map(S::of).collect::<Vec<S>>(), p_count, heads * c);
        let value = Tensor::new(&[heads * c, p_count], out)?;
        let grid = grid.clone();
        self.push(
            "window_aggregate",
            value,
            vec![weights, pix],
            Box::new(move |ctx| {
                let a = ctx.input(0).data();
                let pix_t = transpose(ctx.input(1).data(), c, n);
                let g_t = transpose(ctx.grad_out(), heads * c, p_count); // [P, heads*C]
                let mut da = vec![S::zero(); heads * n * K];
                let mut dpix_t = vec![0.0f64; n * c];
                for i in 0..n {
                    for (j, &p) in grid.neighbors.neighbors(i).iter().enumerate() {
                        let p = p as usize;
                        for h in 0..heads {
                            let gr = &g_t[p * heads * c + h * c..p * heads * c + (h + 1) * c];
                            let mut dot = 0.0f64;
                            for (gv, xv) in gr.iter().zip(&pix_t[i * c..(i + 1) * c]) {
                                dot += gv.f64() * xv.f64();
                            }
                            da[(h * n + i) * K + j] = S::of(dot);
                            let wv = a[(h * n + i) * K + j].f64();
                            if wv != 0.0 {
                                for (d, gv) in dpix_t[i * c..(i + 1) * c].iter_mut().zip(gr) {
                                    *d += wv * gv.f64();
                                }
                            }
                        }
                    }
                }
                let dpix = ctx
                    .needs(1)
                    .then(|| transpose(&dpix_t.into_iter().map(S::of).collect::<Vec<S>>(), n, c));
                vec![ctx.needs(0).then_some(da), dpix]
            }),
        )
    }

    /// `out[c, i] = Σ_j a[h(c), i, j] · sp[c, N_i[j]]`, where channel `c`
    /// belongs to head `h(c) = c / (C / heads)`.
    ///
    /// With a single head this is the superpixel-to-pixel reconstruction
    /// `I_i = Σ_{p ∈ N_i} A_ip S_p`.
    pub fn neighbor_gather(&mut self, weights: Var, sp: Var, grid: &Arc<Grid>) -> Result<Var> {
        let heads = pair_shape("neighbor_gather", self.shape(weights), grid)?;
        let n = grid.pixels();
        let p_count = grid.superpixels();
        let c = match self.shape(sp) {
            [c, pc] if *pc == p_count => *c,
            s => return Err(Error::shape("neighbor_gather", format!("superpixels {s:?}"))),
        };
        if c % heads != 0 {
            return Err(Error::shape(
                "neighbor_gather",
                format!("{c} channels not divisible by {heads} heads"),
            ));
        }
        let d = c / heads;
        let a = self.value(weights).data();
        let sp_t = transpose(self.value(sp).data(), c, p_count); // [P, C]
        let mut out_t = vec![S::zero(); n * c];
        for i in 0..n {
            let nb = grid.neighbors.neighbors(i);
            for ch in 0..c {
                let h = ch / d;
                let mut acc = 0.0f64;
                for (j, &p) in nb.iter().enumerate() {
                    acc += a[(h * n + i) * K + j].f64() * sp_t[p as usize * c + ch].f64();
                }
                out_t[i * c + ch] = S::of(acc);
            }
        }
        let value = Tensor::new(&[c, n], transpose(&out_t, n, c))?;
        let grid = grid.clone();
        self.push(
            "neighbor_gather",
            value,
            vec![weights, sp],
            Box::new(move |ctx| {
                let a = ctx.input(0).data();
                let sp_t = transpose(ctx.input(1).data(), c, p_count);
                let g_t = transpose(ctx.grad_out(), c, n); // [N, C]
                let mut da = vec![S::zero(); heads * n * K];
                let mut dsp_t = vec![0.0f64; p_count * c];
                for i in 0..n {
                    for (j, &p) in grid.neighbors.neighbors(i).iter().enumerate() {
                        let p = p as usize;
                        for h in 0..heads {
                            let wv = a[(h * n + i) * K + j].f64();
                            let mut dot = 0.0f64;
                            for ch in h * d..(h + 1) * d {
                                let gv = g_t[i * c + ch].f64();
                                dot += gv * sp_t[p * c + ch].f64();
                                dsp_t[p * c + ch] += wv * gv;
                            }
                            da[(h * n + i) * K + j] = S::of(dot);
                        }
                    }
                }
                let dsp = ctx
                    .needs(1)
                    .then(|| transpose(&dsp_t.into_iter().map(S::of).collect::<Vec<S>>(), p_count, c));
                vec![ctx.needs(0).then_some(da), dsp]
            }),
        )
    }
}
