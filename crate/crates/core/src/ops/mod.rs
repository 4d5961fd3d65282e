//! Differentiable operations recorded on a [`Graph`].
//!
//! Feature maps are channel-major: a `[C, N]` matrix holds one column per
//! spatial position, and `[C, h, w]` is the same buffer viewed spatially.
//! All reductions accumulate in `f64` in ascending index order.

mod attention;
mod conv;
mod window;

use std::rc::Rc;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Layer-norm epsilon.
pub const LN_EPS: f64 = 1e-6;

/// `a[m,k] · b[k,n]`.
pub(crate) fn mm<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    let mut out = vec![S::zero(); m * n];
    let mut acc = vec![0.0f64; n];
    for i in 0..m {
        acc.iter_mut().for_each(|x| *x = 0.0);
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            let av = av.f64();
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (acc, &bv) in acc.iter_mut().zip(brow) {
                *acc += av * bv.f64();
            }
        }
        for (o, &x) in out[i * n..(i + 1) * n].iter_mut().zip(&acc) {
            *o = S::of(x);
        }
    }
    out
}

/// `a[m,k] · b[n,k]ᵀ`.
pub(crate) fn mm_nt<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    let mut out = vec![S::zero(); m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = 0.0f64;
            for (&x, &y) in arow.iter().zip(brow) {
                acc += x.f64() * y.f64();
            }
            out[i * n + j] = S::of(acc);
        }
    }
    out
}

/// `a[k,m]ᵀ · b[k,n]`.
pub(crate) fn mm_tn<S: Scalar>(a: &[S], b: &[S], k: usize, m: usize, n: usize) -> Vec<S> {
    let mut acc = vec![0.0f64; m * n];
    for p in 0..k {
        let arow = &a[p * m..(p + 1) * m];
        let brow = &b[p * n..(p + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            let av = av.f64();
            if av == 0.0 {
                continue;
            }
            for (acc, &bv) in acc[i * n..(i + 1) * n].iter_mut().zip(brow) {
                *acc += av * bv.f64();
            }
        }
    }
    acc.into_iter().map(S::of).collect()
}

fn expect_rank2(op: &'static str, shape: &[usize]) -> Result<(usize, usize)> {
    match shape {
        [r, c] => Ok((*r, *c)),
        _ => Err(Error::shape(op, format!("expected a matrix, got {shape:?}"))),
    }
}

fn same_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a == b {
        Ok(())
    } else {
        Err(Error::shape(op, format!("{a:?} vs {b:?}")))
    }
}

#[inline]
fn gelu_parts(x: f64) -> (f64, f64) {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let y = 0.5 * x * (1.0 + t);
    let du = C * (1.0 + 3.0 * 0.044715 * x * x);
    let dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
    (y, dy)
}

impl<S: Scalar> Graph<S> {
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = expect_rank2("matmul", self.shape(a))?;
        let (k2, n) = expect_rank2("matmul", self.shape(b))?;
        if k != k2 {
            return Err(Error::shape("matmul", format!("inner dims {k} and {k2} disagree")));
        }
        let out = mm(self.value(a).data(), self.value(b).data(), m, k, n);
        let value = Tensor::new(&[m, n], out)?;
        self.push(
            "matmul",
            value,
            vec![a, b],
            Box::new(move |ctx| {
                let g = ctx.grad_out();
                let da = ctx.needs(0).then(|| mm_nt(g, ctx.input(1).data(), m, n, k));
                let db = ctx.needs(1).then(|| mm_tn(ctx.input(0).data(), g, m, k, n));
                vec![da, db]
            }),
        )
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = expect_rank2("transpose", self.shape(a))?;
        let src = self.value(a).data();
        let mut out = vec![S::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let value = Tensor::new(&[c, r], out)?;
        self.push(
            "transpose",
            value,
            vec![a],
            Box::new(move |ctx| {
                let g = ctx.grad_out();
                let mut da = vec![S::zero(); r * c];
                for i in 0..r {
                    for j in 0..c {
                        da[i * c + j] = g[j * r + i];
                    }
                }
                vec![Some(da)]
            }),
        )
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape)?;
        self.push(
            "reshape",
            value,
            vec![a],
            Box::new(|ctx| vec![Some(ctx.grad_out().to_vec())]),
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("add", self.shape(a), self.shape(b))?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let value = Tensor::new(self.shape(a), data)?;
        self.push(
            "add",
            value,
            vec![a, b],
            Box::new(|ctx| {
                let g = ctx.grad_out();
                vec![ctx.needs(0).then(|| g.to_vec()), ctx.needs(1).then(|| g.to_vec())]
            }),
        )
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("mul", self.shape(a), self.shape(b))?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let value = Tensor::new(self.shape(a), data)?;
        self.push(
            "mul",
            value,
            vec![a, b],
            Box::new(|ctx| {
                let g = ctx.grad_out();
                let (x, y) = (ctx.input(0).data(), ctx.input(1).data());
                vec![
                    ctx.needs(0).then(|| g.iter().zip(y).map(|(&g, &y)| g * y).collect()),
                    ctx.needs(1).then(|| g.iter().zip(x).map(|(&g, &x)| g * x).collect()),
                ]
            }),
        )
    }

    /// Multiplication by a constant.
    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let sv = S::of(s);
        let data = self.value(a).data().iter().map(|&x| x * sv).collect();
        let value = Tensor::new(self.shape(a), data)?;
        self.push(
            "scale",
            value,
            vec![a],
            Box::new(move |ctx| vec![Some(ctx.grad_out().iter().map(|&g| g * sv).collect())]),
        )
    }

    /// Adds `bias[c]` to every element of channel `c` of `x[C, ...]`.
    pub fn add_channel(&mut self, x: Var, bias: Var) -> Result<Var> {
        let c = self.shape(x)[0];
        if self.shape(bias) != [c] {
            return Err(Error::shape(
                "add_channel",
                format!("bias {:?} for input {:?}", self.shape(bias), self.shape(x)),
            ));
        }
        let inner = self.value(x).numel() / c;
        let b = self.value(bias).data();
        let data = self
            .value(x)
            .data()
            .chunks(inner)
            .zip(b)
            .flat_map(|(row, &bv)| row.iter().map(move |&v| v + bv))
            .collect();
        let value = Tensor::new(self.shape(x), data)?;
        self.push(
            "add_channel",
            value,
            vec![x, bias],
            Box::new(move |ctx| {
                let g = ctx.grad_out();
                let db = ctx.needs(1).then(|| {
                    g.chunks(inner)
                        .map(|row| S::of(row.iter().map(|v| v.f64()).sum()))
                        .collect()
                });
                vec![ctx.needs(0).then(|| g.to_vec()), db]
            }),
        )
    }

    /// Multiplies channel `c` of `x[C, ...]` by `gamma[c]` (LayerScale).
    pub fn mul_channel(&mut self, x: Var, gamma: Var) -> Result<Var> {
        let c = self.shape(x)[0];
        if self.shape(gamma) != [c] {
            return Err(Error::shape(
                "mul_channel",
                format!("scale {:?} for input {:?}", self.shape(gamma), self.shape(x)),
            ));
        }
        let inner = self.value(x).numel() / c;
        let gm = self.value(gamma).data();
        let data = self
            .value(x)
            .data()
            .chunks(inner)
            .zip(gm)
            .flat_map(|(row, &gv)| row.iter().map(move |&v| v * gv))
            .collect();
        let value = Tensor::new(self.shape(x), data)?;
        self.push(
            "mul_channel",
            value,
            vec![x, gamma],
            Box::new(move |ctx| {
                let g = ctx.grad_out();
                let gm = ctx.input(1).data();
                let dx = ctx.needs(0).then(|| {
                    g.chunks(inner)
                        .zip(gm)
                        .flat_map(|(row, &gv)| row.iter().map(move |&v| v * gv))
                        .collect()
                });
                let dgamma = ctx.needs(1).then(|| {
                    g.chunks(inner)
                        .zip(ctx.input(0).data().chunks(inner))
                        .map(|(gr, xr)| S::of(gr.iter().zip(xr).map(|(a, b)| a.f64() * b.f64()).sum()))
                        .collect()
                });
                vec![dx, dgamma]
            }),
        )
    }

    /// `w[Cout, Cin] · x[Cin, N] + b`. A 1×1 convolution on a flattened map.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(w, x)?;
        match b {
            Some(b) => self.add_channel(y, b),
            None => Ok(y),
        }
    }

    /// Sum of all elements, as a one-element tensor.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let total = self.value(a).sum_f64();
        let n = self.value(a).numel();
        self.push(
            "sum",
            Tensor::scalar(S::of(total)),
            vec![a],
            Box::new(move |ctx| vec![Some(vec![ctx.grad_out()[0]; n])]),
        )
    }

    /// Mean over the trailing axis of `x[C, N]`, giving `[C]`.
    pub fn mean_cols(&mut self, x: Var) -> Result<Var> {
        let (c, n) = expect_rank2("mean_cols", self.shape(x))?;
        let data = self
            .value(x)
            .data()
            .chunks(n)
            .map(|row| S::of(row.iter().map(|v| v.f64()).sum::<f64>() / n as f64))
            .collect();
        let value = Tensor::new(&[c], data)?;
        self.push(
            "mean_cols",
            value,
            vec![x],
            Box::new(move |ctx| {
                let inv = 1.0 / n as f64;
                let g = ctx.grad_out();
                vec![Some(
                    g.iter()
                        .flat_map(|&gv| std::iter::repeat_n(S::of(gv.f64() * inv), n))
                        .collect(),
                )]
            }),
        )
    }

    /// Rows `start..end` along the leading axis.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if start >= end || end > shape[0] {
            return Err(Error::shape("slice_rows", format!("rows {start}..{end} of {shape:?}")));
        }
        let inner: usize = shape[1..].iter().product();
        let data = self.value(x).data()[start * inner..end * inner].to_vec();
        let mut out_shape = shape.clone();
        out_shape[0] = end - start;
        let value = Tensor::new(&out_shape, data)?;
        let total = self.value(x).numel();
        self.push(
            "slice_rows",
            value,
            vec![x],
            Box::new(move |ctx| {
                let mut dx = vec![S::zero(); total];
                dx[start * inner..end * inner].copy_from_slice(ctx.grad_out());
                vec![Some(dx)]
            }),
        )
    }

    /// Concatenation along the leading axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.shape(parts[0]).to_vec();
        let mut rows = 0;
        let mut sizes = Vec::with_capacity(parts.len());
        let mut data = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s[1..] != first[1..] {
                return Err(Error::shape("concat_rows", format!("{s:?} vs {first:?}")));
            }
            rows += s[0];
            sizes.push(self.value(p).numel());
            data.extend_from_slice(self.value(p).data());
        }
        let mut shape = first;
        shape[0] = rows;
        let value = Tensor::new(&shape, data)?;
        self.push(
            "concat_rows",
            value,
            parts.to_vec(),
            Box::new(move |ctx| {
                let g = ctx.grad_out();
                let mut off = 0;
                sizes
                    .iter()
                    .enumerate()
                    .map(|(k, &n)| {
                        let part = ctx.needs(k).then(|| g[off..off + n].to_vec());
                        off += n;
                        part
                    })
                    .collect()
            }),
        )
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let data = self
            .value(x)
            .data()
            .iter()
            .map(|&v| S::of(gelu_parts(v.f64()).0))
            .collect();
        let value = Tensor::new(self.shape(x), data)?;
        self.push(
            "gelu",
            value,
            vec![x],
            Box::new(|ctx| {
                let dx = ctx
                    .grad_out()
                    .iter()
                    .zip(ctx.input(0).data())
                    .map(|(&g, &v)| S::of(g.f64() * gelu_parts(v.f64()).1))
                    .collect();
                vec![Some(dx)]
            }),
        )
    }

    /// Layer normalization over the channel axis of `x[C, N]` with a learnable
    /// affine transform.
    pub fn layernorm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (c, n) = expect_rank2("layernorm", self.shape(x))?;
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::shape("layernorm", "affine parameters must be [C]"));
        }
        let xs = self.value(x).data();
        let gm = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut xhat = vec![0.0f64; c * n];
        let mut inv_std = vec![0.0f64; n];
        let mut out = vec![S::zero(); c * n];
        for col in 0..n {
            let mut mean = 0.0;
            for ch in 0..c {
                mean += xs[ch * n + col].f64();
            }
            mean /= c as f64;
            let mut var = 0.0;
            for ch in 0..c {
                let d = xs[ch * n + col].f64() - mean;
                var += d * d;
            }
            var /= c as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std[col] = is;
            for ch in 0..c {
                let h = (xs[ch * n + col].f64() - mean) * is;
                xhat[ch * n + col] = h;
                out[ch * n + col] = S::of(h * gm[ch].f64() + bt[ch].f64());
            }
        }
        let value = Tensor::new(&[c, n], out)?;
        let xhat = Rc::new(xhat);
        self.push(
            "layernorm",
            value,
            vec![x, gamma, beta],
            Box::new(move |ctx| {
                let g = ctx.grad_out();
                let gm = ctx.input(1).data();
                let dgamma = ctx.needs(1).then(|| {
                    (0..c)
                        .map(|ch| S::of((0..n).map(|col| g[ch * n + col].f64() * xhat[ch * n + col]).sum()))
                        .collect()
                });
                let dbeta = ctx.needs(2).then(|| {
                    g.chunks(n)
                        .map(|row| S::of(row.iter().map(|v| v.f64()).sum()))
                        .collect()
                });
                let dx = ctx.needs(0).then(|| {
                    let mut dx = vec![S::zero(); c * n];
                    for col in 0..n {
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for ch in 0..c {
                            let dh = g[ch * n + col].f64() * gm[ch].f64();
                            m1 += dh;
                            m2 += dh * xhat[ch * n + col];
                        }
                        m1 /= c as f64;
                        m2 /= c as f64;
                        for ch in 0..c {
                            let dh = g[ch * n + col].f64() * gm[ch].f64();
                            dx[ch * n + col] = S::of(inv_std[col] * (dh - m1 - xhat[ch * n + col] * m2));
                        }
                    }
                    dx
                });
                vec![dx, dgamma, dbeta]
            }),
        )
    }

    /// Softmax along the trailing axis. Masked entries are exactly zero and
    /// excluded from the normalizer; a row with no unmasked entry is an error.
    pub fn masked_softmax(&mut self, logits: Var, mask: Option<Rc<Vec<bool>>>) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        let n = *shape
            .last()
            .ok_or_else(|| Error::shape("masked_softmax", "scalar input"))?;
        let xs = self.value(logits).data();
        if let Some(m) = &mask {
            if m.len() != xs.len() {
                return Err(Error::shape(
                    "masked_softmax",
                    format!("mask has {} entries for {} logits", m.len(), xs.len()),
                ));
            }
        }
        let mut out = vec![S::zero(); xs.len()];
        for (row, chunk) in xs.chunks(n).enumerate() {
            let base = row * n;
            let keep = |j: usize| mask.as_ref().is_none_or(|m| m[base + j]);
            let mut max = f64::NEG_INFINITY;
            for (j, &v) in chunk.iter().enumerate() {
                if keep(j) {
                    max = max.max(v.f64());
                }
            }
            if max == f64::NEG_INFINITY {
                return Err(Error::DegenerateRow { row });
            }
            let mut denom = 0.0;
            let mut exps = vec![0.0f64; n];
            for (j, &v) in chunk.iter().enumerate() {
                if keep(j) {
                    let e = (v.f64() - max).exp();
                    exps[j] = e;
                    denom += e;
                }
            }
            for j in 0..n {
                out[base + j] = S::of(exps[j] / denom);
            }
        }
        let value = Tensor::new(&shape, out)?;
        self.push(
            "masked_softmax",
            value,
            vec![logits],
            Box::new(move |ctx| {
                let y = ctx.output().data();
                let g = ctx.grad_out();
                let mut dx = vec![S::zero(); y.len()];
                for ((yr, gr), dr) in y.chunks(n).zip(g.chunks(n)).zip(dx.chunks_mut(n)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a.f64() * b.f64()).sum();
                    for ((d, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
                        *d = S::of(yv.f64() * (gv.f64() - dot));
                    }
                }
                vec![Some(dx)]
            }),
        )
    }

    /// Softmax cross-entropy of a logit vector against `target`, with optional
    /// label smoothing.
    pub fn cross_entropy(&mut self, logits: Var, target: usize, smoothing: f64) -> Result<Var> {
        let k = self.value(logits).numel();
        if target >= k {
            return Err(Error::shape(
                "cross_entropy",
                format!("target {target} out of {k} classes"),
            ));
        }
        let xs = self.value(logits).data();
        let max = xs.iter().map(|v| v.f64()).fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = xs.iter().map(|v| (v.f64() - max).exp()).sum();
        let log_z = max + denom.ln();
        let q = move |j: usize| {
            let base = smoothing / k as f64;
            if j == target {
                1.0 - smoothing + base
            } else {
                base
            }
        };
        let loss: f64 = xs.iter().enumerate().map(|(j, v)| -q(j) * (v.f64() - log_z)).sum();
        let probs: Vec<f64> = xs.iter().map(|v| (v.f64() - log_z).exp()).collect();
        self.push(
            "cross_entropy",
            Tensor::scalar(S::of(loss)),
            vec![logits],
            Box::new(move |ctx| {
                let g = ctx.grad_out()[0].f64();
                vec![Some(
                    probs.iter().enumerate().map(|(j, &p)| S::of(g * (p - q(j)))).collect(),
                )]
            }),
        )
    }
}
