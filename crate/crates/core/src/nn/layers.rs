use super::{gemm, gemm_ld, Act, Mat, Module, Op, Param, Real};
use crate::seed::Rng;

/// Output columns `ox` in `lo..hi` whose input column `ox * s + off` lies in `0..w`.
fn valid_cols(off: isize, s: isize, w: usize, wo: usize) -> (usize, usize) {
    let lo = if off >= 0 { 0 } else { ((-off + s - 1) / s) as usize };
    let hi = if (w as isize) <= off { 0 } else { ((w as isize - off + s - 1) / s) as usize };
    (lo.min(wo), hi.min(wo).max(lo.min(wo)))
}

/// 2-D convolution over a channel-major batch, lowered to one GEMM via im2col.
#[derive(Debug, Clone)]
pub struct Conv2d<T> {
    /// `[cout, cin * k * k]`
    pub weight: Param<T>,
    pub bias: Option<Param<T>>,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    input: Option<Act<T>>,
}

impl<T: Real> Conv2d<T> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        bias: bool,
        rng: &mut Rng,
    ) -> Self {
        let fan_in = (cin * k * k).max(1) as f64;
        let weight = Param::normal(
            format!("{name}.weight"),
            vec![cout, cin, k, k],
            (2.0 / fan_in).sqrt(),
            rng,
        );
        let bias = bias.then(|| Param::constant(format!("{name}.bias"), vec![cout], T::zero()));
        Self {
            weight,
            bias,
            cin,
            cout,
            k,
            stride,
            pad,
            input: None,
        }
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.k) / self.stride + 1,
            (w + 2 * self.pad - self.k) / self.stride + 1,
        )
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    /// Patch matrix `[cin*k*k, (b1-b0)*ho*wo]` for samples `b0..b1`.
    fn im2col(&self, x: &Act<T>, b0: usize, b1: usize, ho: usize, wo: usize, cols: &mut Vec<T>) {
        let (k, s, p) = (self.k, self.stride as isize, self.pad as isize);
        let cols_n = (b1 - b0) * ho * wo;
        cols.clear();
        cols.resize(self.cin * k * k * cols_n, T::zero());
        let hw = x.h * x.w;
        for ci in 0..self.cin {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let dst = &mut cols[row * cols_n..(row + 1) * cols_n];
                    for b in b0..b1 {
                        let src = &x.data[(ci * x.n + b) * hw..(ci * x.n + b + 1) * hw];
                        for oy in 0..ho {
                            let iy = oy as isize * s + ky as isize - p;
                            if iy < 0 || iy >= x.h as isize {
                                continue;
                            }
                            let srow = &src[iy as usize * x.w..(iy as usize + 1) * x.w];
                            let drow = &mut dst[((b - b0) * ho + oy) * wo..((b - b0) * ho + oy + 1) * wo];
                            let (lo, hi) = valid_cols(kx as isize - p, s, x.w, wo);
                            if s == 1 {
                                let start = (lo as isize + kx as isize - p) as usize;
                                drow[lo..hi].copy_from_slice(&srow[start..start + hi - lo]);
                            } else {
                                for ox in lo..hi {
                                    drow[ox] = srow[(ox as isize * s + kx as isize - p) as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[T], dx: &mut Act<T>, b0: usize, b1: usize, ho: usize, wo: usize) {
        let (k, s, p) = (self.k, self.stride as isize, self.pad as isize);
        let cols_n = (b1 - b0) * ho * wo;
        let hw = dx.h * dx.w;
        let (h, w, n) = (dx.h, dx.w, dx.n);
        for ci in 0..self.cin {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let src = &cols[row * cols_n..(row + 1) * cols_n];
                    for b in b0..b1 {
                        let dst = &mut dx.data[(ci * n + b) * hw..(ci * n + b + 1) * hw];
                        for oy in 0..ho {
                            let iy = oy as isize * s + ky as isize - p;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let drow = &mut dst[iy as usize * w..(iy as usize + 1) * w];
                            let srow = &src[((b - b0) * ho + oy) * wo..((b - b0) * ho + oy + 1) * wo];
                            let (lo, hi) = valid_cols(kx as isize - p, s, w, wo);
                            if s == 1 {
                                let start = (lo as isize + kx as isize - p) as usize;
                                for (d, &g) in drow[start..start + hi - lo].iter_mut().zip(&srow[lo..hi]) {
                                    *d += g;
                                }
                            } else {
                                for ox in lo..hi {
                                    drow[(ox as isize * s + kx as isize - p) as usize] += srow[ox];
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    /// Samples per im2col tile, keeping the patch buffer near `TILE_ELEMS`.
    fn chunk(&self, n: usize, ho: usize, wo: usize) -> usize {
        const TILE_ELEMS: usize = 1 << 20;
        (TILE_ELEMS / (self.cin * self.k * self.k * ho * wo).max(1)).clamp(1, n.max(1))
    }

    pub fn forward(&mut self, x: &Act<T>, record: bool) -> Act<T> {
        assert_eq!(x.c, self.cin, "{}: input channels", self.weight.name);
        let (ho, wo) = self.out_hw(x.h, x.w);
        let cols_n = x.n * ho * wo;
        let ckk = self.cin * self.k * self.k;
        let mut out = Act::zeros(self.cout, x.n, ho, wo);
        if self.is_pointwise() {
            gemm(self.cout, ckk, cols_n, &self.weight.value, Op::N, &x.data, Op::N, T::zero(), &mut out.data);
        } else {
            let step = self.chunk(x.n, ho, wo);
            let mut cols = Vec::new();
            for b0 in (0..x.n).step_by(step) {
                let b1 = (b0 + step).min(x.n);
                self.im2col(x, b0, b1, ho, wo, &mut cols);
                let nn = (b1 - b0) * ho * wo;
                gemm_ld(
                    self.cout,
                    ckk,
                    nn,
                    &self.weight.value,
                    ckk,
                    Op::N,
                    &cols,
                    nn,
                    Op::N,
                    T::zero(),
                    &mut out.data[b0 * ho * wo..],
                    cols_n,
                );
            }
        }
        if let Some(bias) = &self.bias {
            for (co, &b) in bias.value.iter().enumerate() {
                out.data[co * cols_n..(co + 1) * cols_n].iter_mut().for_each(|v| *v += b);
            }
        }
        self.input = record.then(|| x.clone());
        out
    }

    /// Accumulates parameter gradients; returns the input gradient when requested.
    pub fn backward(&mut self, dy: &Act<T>, need_dx: bool) -> Option<Act<T>> {
        let x = self.input.take().expect("conv backward without recorded forward");
        let (ho, wo) = (dy.h, dy.w);
        let cols_n = x.n * ho * wo;
        let ckk = self.cin * self.k * self.k;
        if let Some(bias) = &mut self.bias {
            if bias.requires_grad {
                for co in 0..self.cout {
                    let s: T = dy.data[co * cols_n..(co + 1) * cols_n].iter().copied().sum();
                    bias.grad[co] += s;
                }
            }
        }
        let want_w = self.weight.requires_grad;
        if self.is_pointwise() {
            if want_w {
                gemm(self.cout, cols_n, ckk, &dy.data, Op::N, &x.data, Op::T, T::one(), &mut self.weight.grad);
            }
            if !need_dx {
                return None;
            }
            let mut dx = Act::zeros(self.cin, x.n, x.h, x.w);
            gemm(ckk, self.cout, cols_n, &self.weight.value, Op::T, &dy.data, Op::N, T::zero(), &mut dx.data);
            return Some(dx);
        }
        if !want_w && !need_dx {
            return None;
        }
        let mut dx = need_dx.then(|| Act::zeros(self.cin, x.n, x.h, x.w));
        let step = self.chunk(x.n, ho, wo);
        let mut cols = Vec::new();
        for b0 in (0..x.n).step_by(step) {
            let b1 = (b0 + step).min(x.n);
            let nn = (b1 - b0) * ho * wo;
            let dy_view = &dy.data[b0 * ho * wo..];
            if want_w {
                self.im2col(&x, b0, b1, ho, wo, &mut cols);
                gemm_ld(self.cout, nn, ckk, dy_view, cols_n, Op::N, &cols, nn, Op::T, T::one(), &mut self.weight.grad, ckk);
            }
            if let Some(dx) = &mut dx {
                cols.clear();
                cols.resize(ckk * nn, T::zero());
                gemm_ld(ckk, self.cout, nn, &self.weight.value, ckk, Op::T, dy_view, cols_n, Op::N, T::zero(), &mut cols, nn);
                self.col2im(&cols, dx, b0, b1, ho, wo);
            }
        }
        dx
    }
}

impl<T: Real> Module<T> for Conv2d<T> {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Param<T>)) {
        f(&self.weight);
        if let Some(b) = &self.bias {
            f(b);
        }
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.weight);
        if let Some(b) = &mut self.bias {
            f(b);
        }
    }
}

#[derive(Debug, Clone)]
struct BnCache<T> {
    xhat: Vec<T>,
    inv_std: Vec<T>,
    batch_stats: bool,
}

/// Batch normalization over every axis except channels.
#[derive(Debug, Clone)]
pub struct BatchNorm<T> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    mean_name: String,
    var_name: String,
    momentum: f64,
    eps: f64,
    cache: Option<BnCache<T>>,
}

impl<T: Real> BatchNorm<T> {
    pub fn new(name: &str, c: usize) -> Self {
        Self {
            gamma: Param::constant(format!("{name}.weight"), vec![c], T::one()),
            beta: Param::constant(format!("{name}.bias"), vec![c], T::zero()),
            running_mean: vec![T::zero(); c],
            running_var: vec![T::one(); c],
            mean_name: format!("{name}.running_mean"),
            var_name: format!("{name}.running_var"),
            momentum: 0.1,
            eps: 1e-5,
            cache: None,
        }
    }

    /// `train` selects batch statistics (and updates running statistics).
    pub fn forward(&mut self, mut x: Act<T>, train: bool, record: bool) -> Act<T> {
        let c = x.c;
        assert_eq!(c, self.gamma.numel(), "{}: channels", self.gamma.name);
        let m = x.plane();
        let mf = T::from_usize(m).unwrap();
        let eps = T::from_f64c(self.eps);
        let mom = T::from_f64c(self.momentum);
        let mut inv_std = vec![T::zero(); c];
        for ch in 0..c {
            let xs = &mut x.data[ch * m..(ch + 1) * m];
            let (mean, var) = if train {
                let mean = xs.iter().copied().sum::<T>() / mf;
                let var = xs.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / mf;
                let unbiased = if m > 1 {
                    var * mf / T::from_usize(m - 1).unwrap()
                } else {
                    var
                };
                self.running_mean[ch] = (T::one() - mom) * self.running_mean[ch] + mom * mean;
                self.running_var[ch] = (T::one() - mom) * self.running_var[ch] + mom * unbiased;
                (mean, var)
            } else {
                (self.running_mean[ch], self.running_var[ch])
            };
            let is = T::one() / (var + eps).sqrt();
            inv_std[ch] = is;
            for v in xs.iter_mut() {
                *v = (*v - mean) * is;
            }
        }
        if record {
            self.cache = Some(BnCache {
                xhat: x.data.clone(),
                inv_std,
                batch_stats: train,
            });
        }
        for ch in 0..c {
            let (g, b) = (self.gamma.value[ch], self.beta.value[ch]);
            x.data[ch * m..(ch + 1) * m].iter_mut().for_each(|v| *v = *v * g + b);
        }
        x
    }

    pub fn backward(&mut self, mut dy: Act<T>, need_dx: bool) -> Act<T> {
        let cache = self.cache.take().expect("batchnorm backward without recorded forward");
        let c = dy.c;
        let m = dy.plane();
        let mf = T::from_usize(m).unwrap();
        for ch in 0..c {
            let g = &mut dy.data[ch * m..(ch + 1) * m];
            let xh = &cache.xhat[ch * m..(ch + 1) * m];
            let sum_dy: T = g.iter().copied().sum();
            let sum_dy_xh: T = g.iter().zip(xh).map(|(&a, &b)| a * b).sum();
            if self.gamma.requires_grad {
                self.gamma.grad[ch] += sum_dy_xh;
            }
            if self.beta.requires_grad {
                self.beta.grad[ch] += sum_dy;
            }
            if !need_dx {
                continue;
            }
            let scale = self.gamma.value[ch] * cache.inv_std[ch];
            if cache.batch_stats {
                let mean_dy = sum_dy / mf;
                let mean_dy_xh = sum_dy_xh / mf;
                for (v, &x) in g.iter_mut().zip(xh) {
                    *v = scale * (*v - mean_dy - x * mean_dy_xh);
                }
            } else {
                g.iter_mut().for_each(|v| *v *= scale);
            }
        }
        dy
    }
}

impl<T: Real> Module<T> for BatchNorm<T> {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Param<T>)) {
        f(&self.gamma);
        f(&self.beta);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.gamma);
        f(&mut self.beta);
    }

    fn visit_buffers<'a>(&'a self, f: &mut dyn FnMut(&'a str, &'a Vec<T>)) {
        f(&self.mean_name, &self.running_mean);
        f(&self.var_name, &self.running_var);
    }

    fn visit_buffers_mut(&mut self, f: &mut dyn FnMut(&str, &mut Vec<T>)) {
        f(&self.mean_name, &mut self.running_mean);
        f(&self.var_name, &mut self.running_var);
    }
}

/// Fully connected layer on row-major `[n, in]` inputs.
#[derive(Debug, Clone)]
pub struct Linear<T> {
    /// `[out, in]`
    pub weight: Param<T>,
    pub bias: Option<Param<T>>,
    pub fan_in: usize,
    pub fan_out: usize,
    input: Option<Mat<T>>,
}

impl<T: Real> Linear<T> {
    pub fn new(name: &str, fan_in: usize, fan_out: usize, std: f64, bias: bool, rng: &mut Rng) -> Self {
        Self {
            weight: Param::normal(format!("{name}.weight"), vec![fan_out, fan_in], std, rng),
            bias: bias.then(|| Param::constant(format!("{name}.bias"), vec![fan_out], T::zero())),
            fan_in,
            fan_out,
            input: None,
        }
    }

    pub fn forward(&mut self, x: &Mat<T>, record: bool) -> Mat<T> {
        assert_eq!(x.cols, self.fan_in, "{}: input width", self.weight.name);
        let mut y = Mat::zeros(x.rows, self.fan_out);
        gemm(x.rows, self.fan_in, self.fan_out, &x.data, Op::N, &self.weight.value, Op::T, T::zero(), &mut y.data);
        if let Some(b) = &self.bias {
            for r in 0..x.rows {
                y.row_mut(r).iter_mut().zip(&b.value).for_each(|(v, &bb)| *v += bb);
            }
        }
        self.input = record.then(|| x.clone());
        y
    }

    pub fn backward(&mut self, dy: &Mat<T>, need_dx: bool) -> Option<Mat<T>> {
        let x = self.input.take().expect("linear backward without recorded forward");
        if let Some(b) = &mut self.bias {
            if b.requires_grad {
                for r in 0..dy.rows {
                    b.grad.iter_mut().zip(dy.row(r)).for_each(|(g, &d)| *g += d);
                }
            }
        }
        if self.weight.requires_grad {
            gemm(self.fan_out, dy.rows, self.fan_in, &dy.data, Op::T, &x.data, Op::N, T::one(), &mut self.weight.grad);
        }
        need_dx.then(|| {
            let mut dx = Mat::zeros(dy.rows, self.fan_in);
            gemm(dy.rows, self.fan_out, self.fan_in, &dy.data, Op::N, &self.weight.value, Op::N, T::zero(), &mut dx.data);
            dx
        })
    }
}

impl<T: Real> Module<T> for Linear<T> {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Param<T>)) {
        f(&self.weight);
        if let Some(b) = &self.bias {
            f(b);
        }
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.weight);
        if let Some(b) = &mut self.bias {
            f(b);
        }
    }
}

/// 3x3, stride 2, padding 1 max pooling.
#[derive(Debug, Clone, Default)]
pub struct MaxPool {
    argmax: Vec<usize>,
    in_shape: (usize, usize, usize, usize),
}

impl MaxPool {
    pub fn forward<T: Real>(&mut self, x: &Act<T>, record: bool) -> Act<T> {
        let ho = (x.h + 2 - 3) / 2 + 1;
        let wo = (x.w + 2 - 3) / 2 + 1;
        let mut out = Act::zeros(x.c, x.n, ho, wo);
        let mut argmax = Vec::with_capacity(out.data.len());
        let hw = x.h * x.w;
        for plane in 0..x.c * x.n {
            let base = plane * hw;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = T::neg_infinity();
                    let mut best_i = base;
                    for ky in 0..3 {
                        let iy = (oy * 2 + ky) as isize - 1;
                        if iy < 0 || iy >= x.h as isize {
                            continue;
                        }
                        for kx in 0..3 {
                            let ix = (ox * 2 + kx) as isize - 1;
                            if ix < 0 || ix >= x.w as isize {
                                continue;
                            }
                            let i = base + iy as usize * x.w + ix as usize;
                            if x.data[i] > best {
                                best = x.data[i];
                                best_i = i;
                            }
                        }
                    }
                    out.data[(plane * ho + oy) * wo + ox] = best;
                    argmax.push(best_i);
                }
            }
        }
        if record {
            self.argmax = argmax;
            self.in_shape = (x.c, x.n, x.h, x.w);
        }
        out
    }

    pub fn backward<T: Real>(&mut self, dy: &Act<T>) -> Act<T> {
        let (c, n, h, w) = self.in_shape;
        let mut dx = Act::zeros(c, n, h, w);
        for (&i, &g) in self.argmax.iter().zip(&dy.data) {
            dx.data[i] += g;
        }
        dx
    }
}

/// Bilinear x2 upsampling with half-pixel centers (edge-clamped).
#[derive(Debug, Clone, Default)]
pub struct Upsample2x {
    in_hw: (usize, usize),
}

fn upsample_taps(n_in: usize) -> Vec<(usize, usize, f64)> {
    (0..2 * n_in)
        .map(|o| {
            let src = ((o as f64 + 0.5) / 2.0 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n_in - 1);
            let i1 = (i0 + 1).min(n_in - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

impl Upsample2x {
    pub fn forward<T: Real>(&mut self, x: &Act<T>) -> Act<T> {
        self.in_hw = (x.h, x.w);
        let (ho, wo) = (2 * x.h, 2 * x.w);
        let ty = upsample_taps(x.h);
        let tx = upsample_taps(x.w);
        let mut out = Act::zeros(x.c, x.n, ho, wo);
        let hw = x.h * x.w;
        for plane in 0..x.c * x.n {
            let src = &x.data[plane * hw..(plane + 1) * hw];
            let dst = &mut out.data[plane * ho * wo..(plane + 1) * ho * wo];
            for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
                let ly = T::from_f64c(ly);
                for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                    let lx = T::from_f64c(lx);
                    let top = src[y0 * x.w + x0] * (T::one() - lx) + src[y0 * x.w + x1] * lx;
                    let bot = src[y1 * x.w + x0] * (T::one() - lx) + src[y1 * x.w + x1] * lx;
                    dst[oy * wo + ox] = top * (T::one() - ly) + bot * ly;
                }
            }
        }
        out
    }

    pub fn backward<T: Real>(&self, dy: &Act<T>) -> Act<T> {
        let (h, w) = self.in_hw;
        let (ho, wo) = (dy.h, dy.w);
        let ty = upsample_taps(h);
        let tx = upsample_taps(w);
        let mut dx = Act::zeros(dy.c, dy.n, h, w);
        for plane in 0..dy.c * dy.n {
            let src = &dy.data[plane * ho * wo..(plane + 1) * ho * wo];
            let dst = &mut dx.data[plane * h * w..(plane + 1) * h * w];
            for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
                let ly = T::from_f64c(ly);
                for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                    let lx = T::from_f64c(lx);
                    let g = src[oy * wo + ox];
                    dst[y0 * w + x0] += g * (T::one() - ly) * (T::one() - lx);
                    dst[y0 * w + x1] += g * (T::one() - ly) * lx;
                    dst[y1 * w + x0] += g * ly * (T::one() - lx);
                    dst[y1 * w + x1] += g * ly * lx;
                }
            }
        }
        dx
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;

    /// Direct nested-loop convolution used as an oracle.
    fn conv_oracle(conv: &Conv2d<f64>, x: &Act<f64>) -> Act<f64> {
        let (ho, wo) = conv.out_hw(x.h, x.w);
        let mut out = Act::zeros(conv.cout, x.n, ho, wo);
        let k = conv.k;
        for co in 0..conv.cout {
            for b in 0..x.n {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = conv.bias.as_ref().map_or(0.0, |bb| bb.value[co]);
                        for ci in 0..conv.cin {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (oy * conv.stride + ky) as isize - conv.pad as isize;
                                    let ix = (ox * conv.stride + kx) as isize - conv.pad as isize;
                                    if iy < 0 || ix < 0 || iy >= x.h as isize || ix >= x.w as isize {
                                        continue;
                                    }
                                    let xv = x.data[((ci * x.n + b) * x.h + iy as usize) * x.w + ix as usize];
                                    acc += xv * conv.weight.value[((co * conv.cin + ci) * k + ky) * k + kx];
                                }
                            }
                        }
                        out.data[((co * x.n + b) * ho + oy) * wo + ox] = acc;
                    }
                }
            }
        }
        out
    }

    fn random_act(rng: &mut Rng, c: usize, n: usize, h: usize, w: usize) -> Act<f64> {
        use rand::Rng as _;
        let mut a = Act::zeros(c, n, h, w);
        a.data.iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
        a
    }

    #[test]
    fn conv_matches_direct_loops() {
        let mut rng = seed::stream(3, &[]);
        for &(k, s, p) in &[(3, 1, 1), (3, 2, 1), (1, 1, 0), (1, 2, 0), (7, 2, 3)] {
            let mut conv = Conv2d::<f64>::new("c", 2, 3, k, s, p, true, &mut rng);
            conv.bias.as_mut().unwrap().value = vec![0.1, -0.2, 0.3];
            let x = random_act(&mut rng, 2, 2, 9, 8);
            let got = conv.forward(&x, false);
            let want = conv_oracle(&conv, &x);
            for (a, b) in got.data.iter().zip(&want.data) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    /// Finite-difference check of a layer given a scalar probe `sum(y * r)`.
    #[test]
    fn tiled_conv_matches_oracle_and_adjoint() {
        let mut rng = seed::stream(4, &[]);
        let mut conv = Conv2d::<f64>::new("c", 4, 2, 3, 1, 1, false, &mut rng);
        let x = random_act(&mut rng, 4, 9, 64, 64);
        assert!(conv.chunk(9, 64, 64) < 9);
        let y = conv.forward(&x, true);
        let want = conv_oracle(&conv, &x);
        assert!(y.data.iter().zip(&want.data).all(|(a, b)| (a - b).abs() < 1e-12));
        let r = random_act(&mut rng, y.c, y.n, y.h, y.w);
        let dx = conv.backward(&r, true).unwrap();
        let lhs: f64 = y.data.iter().zip(&r.data).map(|(a, b)| a * b).sum();
        let via_x: f64 = x.data.iter().zip(&dx.data).map(|(a, b)| a * b).sum();
        let via_w: f64 = conv.weight.value.iter().zip(&conv.weight.grad).map(|(a, b)| a * b).sum();
        assert!((lhs - via_x).abs() < 1e-8 * lhs.abs().max(1.0));
        assert!((lhs - via_w).abs() < 1e-8 * lhs.abs().max(1.0));
    }

    fn check_conv_grad(k: usize, s: usize, p: usize) {
        let mut rng = seed::stream(11, &[k as u64, s as u64]);
        let mut conv = Conv2d::<f64>::new("c", 2, 3, k, s, p, true, &mut rng);
        let x = random_act(&mut rng, 2, 2, 7, 6);
        let y = conv.forward(&x, true);
        let r = random_act(&mut rng, y.c, y.n, y.h, y.w);
        let dx = conv.backward(&r, true).unwrap();
        let probe = |conv: &mut Conv2d<f64>, x: &Act<f64>| -> f64 {
            let y = conv.forward(x, false);
            y.data.iter().zip(&r.data).map(|(a, b)| a * b).sum()
        };
        let h = 1e-6;
        for i in (0..x.data.len()).step_by(7) {
            let mut xp = x.clone();
            xp.data[i] += h;
            let mut xm = x.clone();
            xm.data[i] -= h;
            let fd = (probe(&mut conv, &xp) - probe(&mut conv, &xm)) / (2.0 * h);
            assert!((fd - dx.data[i]).abs() < 1e-7, "dx[{i}] {fd} vs {}", dx.data[i]);
        }
        let wgrad = conv.weight.grad.clone();
        for i in (0..wgrad.len()).step_by(5) {
            let orig = conv.weight.value[i];
            conv.weight.value[i] = orig + h;
            let fp = probe(&mut conv, &x);
            conv.weight.value[i] = orig - h;
            let fm = probe(&mut conv, &x);
            conv.weight.value[i] = orig;
            let fd = (fp - fm) / (2.0 * h);
            assert!((fd - wgrad[i]).abs() < 1e-7, "dw[{i}] {fd} vs {}", wgrad[i]);
        }
    }

    #[test]
    fn conv_gradients() {
        check_conv_grad(3, 1, 1);
        check_conv_grad(3, 2, 1);
        check_conv_grad(1, 1, 0);
        check_conv_grad(1, 2, 0);
    }

    #[test]
    fn batchnorm_gradient() {
        let mut rng = seed::stream(5, &[]);
        let mut bn = BatchNorm::<f64>::new("bn", 3);
        bn.gamma.value = vec![0.5, 1.5, -1.0];
        bn.beta.value = vec![0.1, 0.0, 0.3];
        let x = random_act(&mut rng, 3, 4, 2, 2);
        let r = random_act(&mut rng, 3, 4, 2, 2);
        let _ = bn.forward(x.clone(), true, true);
        let dx = bn.backward(r.clone(), true);
        let mut probe = |x: &Act<f64>| -> f64 {
            let y = bn.forward(x.clone(), true, false);
            y.data.iter().zip(&r.data).map(|(a, b)| a * b).sum()
        };
        let h = 1e-6;
        for i in 0..x.data.len() {
            let mut xp = x.clone();
            xp.data[i] += h;
            let mut xm = x.clone();
            xm.data[i] -= h;
            let fd = (probe(&xp) - probe(&xm)) / (2.0 * h);
            assert!((fd - dx.data[i]).abs() < 1e-6, "{fd} vs {}", dx.data[i]);
        }
    }

    #[test]
    fn upsample_and_pool_adjoint() {
        // <U x, r> == <x, U^T r> holds for any linear map and its backward
        let mut rng = seed::stream(9, &[]);
        let x = random_act(&mut rng, 2, 2, 4, 5);
        let mut up = Upsample2x::default();
        let y = up.forward(&x);
        assert_eq!((y.h, y.w), (8, 10));
        let r = random_act(&mut rng, 2, 2, 8, 10);
        let lhs: f64 = y.data.iter().zip(&r.data).map(|(a, b)| a * b).sum();
        let dx = up.backward(&r);
        let rhs: f64 = x.data.iter().zip(&dx.data).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);

        let mut pool = MaxPool::default();
        let y = pool.forward(&x, true);
        assert_eq!((y.h, y.w), (2, 3));
        let r = random_act(&mut rng, 2, 2, 2, 3);
        let dx = pool.backward(&r);
        let lhs: f64 = y.data.iter().zip(&r.data).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data.iter().zip(&dx.data).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn upsample_constant_is_constant() {
        let mut x = Act::<f64>::zeros(1, 1, 3, 3);
        x.data.iter_mut().for_each(|v| *v = 2.5);
        let y = Upsample2x::default().forward(&x);
        assert!(y.data.iter().all(|&v| (v - 2.5).abs() < 1e-12));
    }

    #[test]
    fn linear_gradient() {
        let mut rng = seed::stream(13, &[]);
        let mut lin = Linear::<f64>::new("fc", 4, 3, 0.5, true, &mut rng);
        let x = Mat::from_vec(2, 4, vec![0.1, -0.3, 0.7, 0.2, 1.0, 0.5, -0.5, 0.0]);
        let r = Mat::from_vec(2, 3, vec![0.3, -1.0, 0.2, 0.7, 0.1, -0.4]);
        let _ = lin.forward(&x, true);
        let dx = lin.backward(&r, true).unwrap();
        let h = 1e-6;
        for i in 0..x.data.len() {
            let mut xp = x.clone();
            xp.data[i] += h;
            let mut xm = x.clone();
            xm.data[i] -= h;
            let f = |lin: &mut Linear<f64>, x: &Mat<f64>| -> f64 {
                lin.forward(x, false).data.iter().zip(&r.data).map(|(a, b)| a * b).sum()
            };
            let fd = (f(&mut lin, &xp) - f(&mut lin, &xm)) / (2.0 * h);
            assert!((fd - dx.data[i]).abs() < 1e-8);
        }
        // dW = r^T x
        let w00 = r.data[0] * x.data[0] + r.data[3] * x.data[4];
        assert!((lin.weight.grad[0] - w00).abs() < 1e-12);
    }
}
