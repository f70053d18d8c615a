//! A small CPU engine for convolutional networks with explicit backward passes.
//!
//! Feature maps are stored channel-major with the batch inside each channel
//! (`[C][N][H][W]`), so a convolution over the whole batch is a single GEMM and
//! per-channel statistics are contiguous.

mod layers;

pub use layers::{BatchNorm, Conv2d, Linear, MaxPool, Upsample2x};

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use crate::seed::Rng;

/// Scalar type the engine is generic over (`f32` for training, `f64` for gradient checks).
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + Default
    + Debug
    + Send
    + Sync
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + 'static
{
    /// `c = alpha * a * b + beta * c` with arbitrary row/column strides.
    ///
    /// # Safety
    /// Strides and dimensions must address memory inside the given pointers.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    fn from_f64c(v: f64) -> Self {
        Self::from_f64(v).expect("representable")
    }
}

impl Real for f32 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

impl Real for f64 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

/// Operand layout for [`gemm`]: a dense row-major matrix, optionally read transposed.
#[derive(Clone, Copy)]
pub(crate) enum Op {
    N,
    T,
}

/// `c[m,n] = a[m,k] * b[k,n] + beta * c`, where `a`/`b` are stored row-major
/// either as given (`Op::N`) or as their transposes (`Op::T`).
pub(crate) fn gemm<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    op_a: Op,
    b: &[T],
    op_b: Op,
    beta: T,
    c: &mut [T],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = match op_a {
        Op::N => (k as isize, 1),
        Op::T => (1, m as isize),
    };
    let (rsb, csb) = match op_b {
        Op::N => (n as isize, 1),
        Op::T => (1, k as isize),
    };
    // SAFETY: the length checks above cover every addressed element.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            T::one(),
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Like [`gemm`], but each operand is a row-major view with its own leading dimension.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm_ld<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    lda: usize,
    op_a: Op,
    b: &[T],
    ldb: usize,
    op_b: Op,
    beta: T,
    c: &mut [T],
    ldc: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    let (ra, ca) = match op_a {
        Op::N => (m, k),
        Op::T => (k, m),
    };
    let (rb, cb) = match op_b {
        Op::N => (k, n),
        Op::T => (n, k),
    };
    assert!(ca <= lda && cb <= ldb && n <= ldc);
    assert!(k == 0 || (a.len() >= (ra - 1) * lda + ca && b.len() >= (rb - 1) * ldb + cb));
    assert!(c.len() >= (m - 1) * ldc + n);
    let (rsa, csa) = match op_a {
        Op::N => (lda as isize, 1),
        Op::T => (1, lda as isize),
    };
    let (rsb, csb) = match op_b {
        Op::N => (ldb as isize, 1),
        Op::T => (1, ldb as isize),
    };
    // SAFETY: the assertions above bound every addressed element.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            T::one(),
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            ldc as isize,
            1,
        );
    }
}

/// Channel-major feature map `[c][n][h][w]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Act<T> {
    pub c: usize,
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<T>,
}

impl<T: Real> Act<T> {
    pub fn zeros(c: usize, n: usize, h: usize, w: usize) -> Self {
        Self {
            c,
            n,
            h,
            w,
            data: vec![T::zero(); c * n * h * w],
        }
    }

    /// Elements per channel.
    pub fn plane(&self) -> usize {
        self.n * self.h * self.w
    }

    /// Converts from batch-major `[n][c][h][w]`.
    pub fn from_nchw(n: usize, c: usize, h: usize, w: usize, src: &[T]) -> Self {
        assert_eq!(src.len(), n * c * h * w);
        let hw = h * w;
        let mut out = Self::zeros(c, n, h, w);
        for b in 0..n {
            for ch in 0..c {
                let s = (b * c + ch) * hw;
                let d = (ch * n + b) * hw;
                out.data[d..d + hw].copy_from_slice(&src[s..s + hw]);
            }
        }
        out
    }

    pub fn to_nchw(&self) -> Vec<T> {
        let hw = self.h * self.w;
        let mut out = vec![T::zero(); self.data.len()];
        for ch in 0..self.c {
            for b in 0..self.n {
                let s = (ch * self.n + b) * hw;
                let d = (b * self.c + ch) * hw;
                out[d..d + hw].copy_from_slice(&self.data[s..s + hw]);
            }
        }
        out
    }

    pub fn relu_inplace(&mut self) {
        for v in &mut self.data {
            if *v < T::zero() {
                *v = T::zero();
            }
        }
    }

    /// Masks `grad` by where this (post-activation) map is positive.
    pub fn relu_backward(&self, grad: &mut Act<T>) {
        for (g, &y) in grad.data.iter_mut().zip(&self.data) {
            if y <= T::zero() {
                *g = T::zero();
            }
        }
    }

    pub fn add_assign(&mut self, other: &Act<T>) {
        assert_eq!(self.data.len(), other.data.len());
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// Global average pooling to a row-major `[n, c]` matrix.
    pub fn global_avg_pool(&self) -> Mat<T> {
        let hw = self.h * self.w;
        let scale = T::one() / T::from_usize(hw).unwrap();
        let mut out = Mat::zeros(self.n, self.c);
        for ch in 0..self.c {
            for b in 0..self.n {
                let s = (ch * self.n + b) * hw;
                let sum: T = self.data[s..s + hw].iter().copied().sum();
                out.data[b * self.c + ch] = sum * scale;
            }
        }
        out
    }

    /// Backward of [`Act::global_avg_pool`].
    pub fn global_avg_pool_backward(grad: &Mat<T>, h: usize, w: usize) -> Act<T> {
        let (n, c) = (grad.rows, grad.cols);
        let hw = h * w;
        let scale = T::one() / T::from_usize(hw).unwrap();
        let mut out = Act::zeros(c, n, h, w);
        for ch in 0..c {
            for b in 0..n {
                let g = grad.data[b * c + ch] * scale;
                let s = (ch * n + b) * hw;
                out.data[s..s + hw].iter_mut().for_each(|v| *v = g);
            }
        }
        out
    }
}

/// Row-major matrix, one row per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat<T> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<T>,
}

impl<T: Real> Mat<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), rows * cols);
        Self { rows, cols, data }
    }

    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Reinterprets `[n, c*h*w]` rows as a channel-major map.
    pub fn to_act(&self, c: usize, h: usize, w: usize) -> Act<T> {
        assert_eq!(self.cols, c * h * w);
        Act::from_nchw(self.rows, c, h, w, &self.data)
    }

    pub fn from_act(a: &Act<T>) -> Self {
        Self::from_vec(a.n, a.c * a.h * a.w, a.to_nchw())
    }

    pub fn add_assign(&mut self, other: &Mat<T>) {
        assert_eq!(self.data.len(), other.data.len());
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn cast<U: Real>(&self) -> Mat<U> {
        Mat::from_vec(
            self.rows,
            self.cols,
            self.data.iter().map(|v| U::from_f64c(v.to_f64().unwrap())).collect(),
        )
    }
}

/// A named learnable tensor with its gradient accumulator.
#[derive(Debug, Clone)]
pub struct Param<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<T>,
    pub grad: Vec<T>,
    pub requires_grad: bool,
}

impl<T: Real> Param<T> {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, value: Vec<T>) -> Self {
        let n = shape.iter().product();
        assert_eq!(value.len(), n);
        Self {
            name: name.into(),
            shape,
            value,
            grad: vec![T::zero(); n],
            requires_grad: true,
        }
    }

    pub fn constant(name: impl Into<String>, shape: Vec<usize>, v: T) -> Self {
        let n = shape.iter().product();
        Self::new(name, shape, vec![v; n])
    }

    /// Zero-mean normal initialization with the given standard deviation.
    pub fn normal(name: impl Into<String>, shape: Vec<usize>, std: f64, rng: &mut Rng) -> Self {
        let n: usize = shape.iter().product();
        let value = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                T::from_f64c(z * std)
            })
            .collect();
        Self::new(name, shape, value)
    }

    pub fn uniform(name: impl Into<String>, shape: Vec<usize>, bound: f64, rng: &mut Rng) -> Self {
        let n: usize = shape.iter().product();
        let value = (0..n)
            .map(|_| T::from_f64c(rng.random_range(-bound..=bound)))
            .collect();
        Self::new(name, shape, value)
    }

    pub fn numel(&self) -> usize {
        self.value.len()
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = T::zero());
    }
}

/// Visitor over parameters and non-learnable buffers of a module.
pub trait Module<T: Real> {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Param<T>));
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>));
    fn visit_buffers<'a>(&'a self, _f: &mut dyn FnMut(&'a str, &'a Vec<T>)) {}
    fn visit_buffers_mut(&mut self, _f: &mut dyn FnMut(&str, &mut Vec<T>)) {}
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_transposes() {
        // a = [[1,2],[3,4]], b = [[5,6],[7,8]]
        let a = [1.0f64, 2.0, 3.0, 4.0];
        let b = [5.0f64, 6.0, 7.0, 8.0];
        let mut c = [0.0; 4];
        gemm(2, 2, 2, &a, Op::N, &b, Op::N, 0.0, &mut c);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
        gemm(2, 2, 2, &a, Op::T, &b, Op::N, 0.0, &mut c);
        assert_eq!(c, [26.0, 30.0, 38.0, 44.0]);
        gemm(2, 2, 2, &a, Op::N, &b, Op::T, 0.0, &mut c);
        assert_eq!(c, [17.0, 23.0, 39.0, 53.0]);
    }

    #[test]
    fn layout_round_trip() {
        let src: Vec<f32> = (0..2 * 3 * 2 * 2).map(|v| v as f32).collect();
        let a = Act::from_nchw(2, 3, 2, 2, &src);
        assert_eq!(a.to_nchw(), src);
        // channel 1 of sample 0 lives at the start of channel block 1
        assert_eq!(a.data[2 * 4], 4.0);
    }
}
