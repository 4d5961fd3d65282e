use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

fn expect_rank3(op: &'static str, shape: &[usize]) -> Result<(usize, usize, usize)> {
    match shape {
        [c, h, w] => Ok((*c, *h, *w)),
        _ => Err(Error::shape(op, format!("expected [C, H, W], got {shape:?}"))),
    }
}

/// Output extent of a strided window sweep.
pub(crate) fn conv_out(extent: usize, k: usize, stride: usize, pad: usize) -> usize {
    (extent + 2 * pad - k) / stride + 1
}

/// Calls `f(dst, src, len)` for every row segment where 3×3 tap `tap` of a
/// zero-padded correlation reads inside an `h×w` plane: output indices
/// `dst..dst+len` read input indices `src..src+len`.
fn for_tap(tap: usize, h: usize, w: usize, mut f: impl FnMut(usize, usize, usize)) {
    let dy = tap as isize / 3 - 1;
    let dx = tap as isize % 3 - 1;
    let x0 = (-dx).max(0) as usize;
    let x1 = (w as isize - dx).min(w as isize) as usize;
    if x1 <= x0 {
        return;
    }
    for y in 0..h {
        let sy = y as isize + dy;
        if sy < 0 || sy >= h as isize {
            continue;
        }
        let src = sy as usize * w + (x0 as isize + dx) as usize;
        f(y * w + x0, src, x1 - x0);
    }
}

impl<S: Scalar> Graph<S> {
    /// Per-channel 3×3 correlation with zero padding of one; output shape
    /// equals input shape.
    pub fn depthwise_conv3x3(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let (c, h, w) = expect_rank3("depthwise_conv3x3", self.shape(x))?;
        if self.shape(weight) != [c, 3, 3] || self.shape(bias) != [c] {
            return Err(Error::shape(
                "depthwise_conv3x3",
                format!(
                    "weights {:?} / bias {:?} for {c} channels",
                    self.shape(weight),
                    self.shape(bias)
                ),
            ));
        }
        let xs = self.value(x).data();
        let ws = self.value(weight).data();
        let bs = self.value(bias).data();
        let mut out = vec![S::zero(); c * h * w];
        let mut acc = vec![0.0f64; h * w];
        for ch in 0..c {
            let plane = &xs[ch * h * w..(ch + 1) * h * w];
            acc.iter_mut().for_each(|a| *a = bs[ch].f64());
            for (tap, &kv) in ws[ch * 9..(ch + 1) * 9].iter().enumerate() {
                let kv = kv.f64();
                for_tap(tap, h, w, |dst, src, len| {
                    for (a, &v) in acc[dst..dst + len].iter_mut().zip(&plane[src..src + len]) {
                        *a += kv * v.f64();
                    }
                });
            }
            for (o, &a) in out[ch * h * w..(ch + 1) * h * w].iter_mut().zip(&acc) {
                *o = S::of(a);
            }
        }
        let value = Tensor::new(&[c, h, w], out)?;
        self.push(
            "depthwise_conv3x3",
            value,
            vec![x, weight, bias],
            Box::new(move |ctx| {
                let g = ctx.grad_out();
                let xs = ctx.input(0).data();
                let ws = ctx.input(1).data();
                let mut dx = vec![0.0f64; c * h * w];
                let mut dw = vec![0.0f64; c * 9];
                let mut db = vec![0.0f64; c];
                for ch in 0..c {
                    let off = ch * h * w;
                    let gp = &g[off..off + h * w];
                    let xp = &xs[off..off + h * w];
                    db[ch] = gp.iter().map(|v| v.f64()).sum();
                    let dxp = &mut dx[off..off + h * w];
                    for tap in 0..9 {
                        let kv = ws[ch * 9 + tap].f64();
                        let mut sw = 0.0f64;
                        for_tap(tap, h, w, |dst, src, len| {
                            for k in 0..len {
                                let gv = gp[dst + k].f64();
                                dxp[src + k] += kv * gv;
                                sw += xp[src + k].f64() * gv;
                            }
                        });
                        dw[ch * 9 + tap] = sw;
                    }
                }
                let cast = |v: Vec<f64>| v.into_iter().map(S::of).collect::<Vec<S>>();
                vec![
                    ctx.needs(0).then(|| cast(dx)),
                    ctx.needs(1).then(|| cast(dw)),
                    ctx.needs(2).then(|| cast(db)),
                ]
            }),
        )
    }

    /// Extracts `k×k` windows (stride, zero padding) into columns:
    /// `[C, H, W] -> [C·k·k, Ho·Wo]`. Rows are ordered channel-major, then
    /// kernel row, then kernel column.
    pub fn unfold(&mut self, x: Var, k: usize, stride: usize, pad: usize) -> Result<Var> {
        let (c, h, w) = expect_rank3("unfold", self.shape(x))?;
        if k == 0 || stride == 0 || h + 2 * pad < k || w + 2 * pad < k {
            return Err(Error::shape(
                "unfold",
                format!("kernel {k} stride {stride} pad {pad} on {h}x{w}"),
            ));
        }
        let ho = conv_out(h, k, stride, pad);
        let wo = conv_out(w, k, stride, pad);
        let cols = ho * wo;
        let index = move |row: usize, col: usize| -> Option<usize> {
            let ch = row / (k * k);
            let ky = (row / k) % k;
            let kx = row % k;
            let oy = col / wo;
            let ox = col % wo;
            let sy = (oy * stride + ky) as isize - pad as isize;
            let sx = (ox * stride + kx) as isize - pad as isize;
            (sy >= 0 && sy < h as isize && sx >= 0 && sx < w as isize)
                .then(|| ch * h * w + sy as usize * w + sx as usize)
        };
        let xs = self.value(x).data();
        let rows = c * k * k;
        let mut out = vec![S::zero(); rows * cols];
        for row in 0..rows {
            for col in 0..cols {
                if let Some(src) = index(row, col) {
                    out[row * cols + col] = xs[src];
                }
            }
        }
        let value = Tensor::new(&[rows, cols], out)?;
        self.push(
            "unfold",
            value,
            vec![x],
            Box::new(move |ctx| {
                let g = ctx.grad_out();
                let mut dx = vec![0.0f64; c * h * w];
                for row in 0..rows {
                    for col in 0..cols {
                        if let Some(src) = index(row, col) {
                            dx[src] += g[row * cols + col].f64();
                        }
                    }
                }
                vec![Some(dx.into_iter().map(S::of).collect())]
            }),
        )
    }

    /// Dense 2-D convolution `[Cin, H, W] -> [Cout, Ho, Wo]` with weights
    /// `[Cout, Cin, k, k]`.
    pub fn conv2d(&mut self, x: Var, weight: Var, bias: Var, stride: usize, pad: usize) -> Result<Var> {
        let (cin, h, w) = expect_rank3("conv2d", self.shape(x))?;
        let ws = self.shape(weight).to_vec();
        let [cout, wcin, k, k2] = ws[..] else {
            return Err(Error::shape("conv2d", format!("weights {ws:?}")));
        };
        if wcin != cin || k != k2 {
            return Err(Error::shape(
                "conv2d",
                format!("weights {ws:?} for {cin} input channels"),
            ));
        }
        let cols = self.unfold(x, k, stride, pad)?;
        let w2 = self.reshape(weight, &[cout, cin * k * k])?;
        let y = self.linear(cols, w2, Some(bias))?;
        self.reshape(y, &[cout, conv_out(h, k, stride, pad), conv_out(w, k, stride, pad)])
    }

    /// Non-overlapping `k×k` average pooling; `k` must divide both extents.
    pub fn avgpool(&mut self, x: Var, k: usize) -> Result<Var> {
        let (c, h, w) = expect_rank3("avgpool", self.shape(x))?;
        if k == 0 || h % k != 0 || w % k != 0 {
            return Err(Error::shape(
                "avgpool",
                format!("pool size {k} does not divide {h}x{w}"),
            ));
        }
        let pooled = self.cell_pool(x, k)?;
        self.reshape(pooled, &[c, h / k, w / k])
    }

    /// Mean over `r×r` cells with ceil semantics: trailing cells may be
    /// truncated and average over the pixels they actually cover.
    /// `[C, h, w] -> [C, ceil(h/r)·ceil(w/r)]`.
    pub fn cell_pool(&mut self, x: Var, r: usize) -> Result<Var> {
        let (c, h, w) = expect_rank3("cell_pool", self.shape(x))?;
        if r == 0 {
            return Err(Error::shape("cell_pool", "cell size 0"));
        }
        let sh = h.div_ceil(r);
        let sw = w.div_ceil(r);
        let cells = sh * sw;
        let mut counts = vec![0usize; cells];
        for y in 0..h {
            for xx in 0..w {
                counts[(y / r) * sw + xx / r] += 1;
            }
        }
        let xs = self.value(x).data();
        let mut out = vec![S::zero(); c * cells];
        let mut acc = vec![0.0f64; cells];
        for ch in 0..c {
            acc.iter_mut().for_each(|a| *a = 0.0);
            for y in 0..h {
                for xx in 0..w {
                    acc[(y / r) * sw + xx / r] += xs[ch * h * w + y * w + xx].f64();
                }
            }
            for (cell, &sum) in acc.iter().enumerate() {
                out[ch * cells + cell] = S::of(sum / counts[cell] as f64);
            }
        }
        let value = Tensor::new(&[c, cells], out)?;
        self.push(
            "cell_pool",
            value,
            vec![x],
            Box::new(move |ctx| {
                let g = ctx.grad_out();
                let mut dx = vec![S::zero(); c * h * w];
                for ch in 0..c {
                    for y in 0..h {
                        for xx in 0..w {
                            let cell = (y / r) * sw + xx / r;
                            dx[ch * h * w + y * w + xx] = S::of(g[ch * cells + cell].f64() / counts[cell] as f64);
                        }
                    }
                }
                vec![Some(dx)]
            }),
        )
    }
}
