use std::rc::Rc;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

use super::{mm, mm_nt, mm_tn};

fn head_rows_t<S: Scalar>(x: &[S], h: usize, d: usize, p: usize) -> Vec<S> {
    // rows h*d..(h+1)*d of a [C, P] matrix, transposed to [P, d]
    let mut out = vec![S::zero(); p * d];
    for c in 0..d {
        for t in 0..p {
            out[t * d + c] = x[(h * d + c) * p + t];
        }
    }
    out
}

fn scatter_head<S: Scalar>(dst: &mut [S], src_t: &[S], h: usize, d: usize, p: usize) {
    for c in 0..d {
        for t in 0..p {
            dst[(h * d + c) * p + t] = src_t[t * d + c];
        }
    }
}

impl<S: Scalar> Graph<S> {
    /// Dense multi-head attention over token columns of `q`, `k`, `v`
    /// (`[C, P]` each). Head `h` owns channels `h·C/heads..(h+1)·C/heads`;
    /// logits are multiplied by `scale` before the row softmax.
    pub fn multi_head_attention(&mut self, q: Var, k: Var, v: Var, heads: usize, scale: f64) -> Result<Var> {
        let shape = self.shape(q).to_vec();
        let [c, p] = shape[..] else {
            return Err(Error::shape("attention", format!("queries {shape:?}")));
        };
        if self.shape(k) != shape || self.shape(v) != shape {
            return Err(Error::shape(
                "attention",
                format!("q {shape:?} k {:?} v {:?}", self.shape(k), self.shape(v)),
            ));
        }
        if heads == 0 || c % heads != 0 {
            return Err(Error::shape(
                "attention",
                format!("{c} channels not divisible by {heads} heads"),
            ));
        }
        let d = c / heads;
        let mut out = vec![S::zero(); c * p];
        let mut probs = Vec::with_capacity(heads);
        for h in 0..heads {
            let qt = head_rows_t(self.value(q).data(), h, d, p);
            let kt = head_rows_t(self.value(k).data(), h, d, p);
            let vt = head_rows_t(self.value(v).data(), h, d, p);
            let mut logits = mm_nt(&qt, &kt, p, d, p);
            for row in logits.chunks_mut(p) {
                let max = row.iter().map(|x| x.f64() * scale).fold(f64::NEG_INFINITY, f64::max);
                let mut denom = 0.0;
                let exps: Vec<f64> = row
                    .iter()
                    .map(|x| {
                        let e = (x.f64() * scale - max).exp();
                        denom += e;
                        e
                    })
                    .collect();
                for (r, e) in row.iter_mut().zip(exps) {
                    *r = S::of(e / denom);
                }
            }
            let ot = mm(&logits, &vt, p, p, d);
            scatter_head(&mut out, &ot, h, d, p);
            probs.push(logits);
        }
        let value = Tensor::new(&[c, p], out)?;
        let probs = Rc::new(probs);
        self.push(
            "multi_head_attention",
            value,
            vec![q, k, v],
            Box::new(move |ctx| {
                let g = ctx.grad_out();
                let mut dq = vec![S::zero(); c * p];
                let mut dk = vec![S::zero(); c * p];
                let mut dv = vec![S::zero(); c * p];
                for h in 0..heads {
                    let attn = &probs[h];
                    let qt = head_rows_t(ctx.input(0).data(), h, d, p);
                    let kt = head_rows_t(ctx.input(1).data(), h, d, p);
                    let vt = head_rows_t(ctx.input(2).data(), h, d, p);
                    let gt = head_rows_t(g, h, d, p);
                    // dV = attnᵀ · g
                    let dvt = mm_tn(attn, &gt, p, p, d);
                    scatter_head(&mut dv, &dvt, h, d, p);
                    // d(attn) = g · Vᵀ, then through the row softmax
                    let dattn = mm_nt(&gt, &vt, p, d, p);
                    let mut dlogits = vec![S::zero(); p * p];
                    for a in 0..p {
                        let ar = &attn[a * p..(a + 1) * p];
                        let gr = &dattn[a * p..(a + 1) * p];
                        let dot: f64 = ar.iter().zip(gr).map(|(x, y)| x.f64() * y.f64()).sum();
                        for b in 0..p {
                            dlogits[a * p + b] = S::of(scale * ar[b].f64() * (gr[b].f64() - dot));
                        }
                    }
                    let dqt = mm(&dlogits, &kt, p, p, d);
                    let dkt = mm_tn(&dlogits, &qt, p, p, d);
                    scatter_head(&mut dq, &dqt, h, d, p);
                    scatter_head(&mut dk, &dkt, h, d, p);
                }
                vec![
                    ctx.needs(0).then_some(dq),
                    ctx.needs(1).then_some(dk),
                    ctx.needs(2).then_some(dv),
                ]
            }),
        )
    }
}
