//! Minimal NCHW tensor and layer kit with explicit backward passes.
//!
//! Layers cache what they need during `forward` and accumulate parameter
//! gradients during `backward`. Everything is generic over [`Real`] so the
//! same network runs in `f32` for training and `f64` for gradient checks.

mod layers;

pub use layers::{Attention, Conv2d, GroupNorm, Linear, Silu};

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive};
use rand::Rng;

/// Floating-point element type with a GEMM kernel.
pub trait Real:
    Float + FromPrimitive + Default + Debug + Send + Sync + 'static + AddAssign + SubAssign + MulAssign + Sum
{
    /// `C = alpha * A B + beta * C` on strided row/column layouts.
    ///
    /// # Safety
    /// The pointers and strides must describe valid, in-bounds matrices of
    /// the given sizes and `c` must not alias `a` or `b`.
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

    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("representable")
    }
}

impl Real for f32 {
    unsafe fn gemm_raw(
        m: usize, k: usize, n: usize, alpha: f32, a: *const f32, rsa: isize, csa: isize,
        b: *const f32, rsb: isize, csb: isize, beta: f32, c: *mut f32, rsc: isize, csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Real for f64 {
    unsafe fn gemm_raw(
        m: usize, k: usize, n: usize, alpha: f64, a: *const f64, rsa: isize, csa: isize,
        b: *const f64, rsb: isize, csb: isize, beta: f64, c: *mut f64, rsc: isize, csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// Row-major `C[m x n] = A B + beta C`, where `A` is `m x k` (stored as
/// `k x m` when `ta`) and `B` is `k x n` (stored as `n x k` when `tb`).
#[allow(clippy::too_many_arguments)]
pub fn matmul<T: Real>(
    a: &[T],
    ta: bool,
    b: &[T],
    tb: bool,
    c: &mut [T],
    m: usize,
    k: usize,
    n: usize,
    beta: T,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: bounds asserted above; `c` is a distinct mutable borrow.
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
        )
    }
}

/// A strided matrix inside a slice: element `(r, c)` lives at
/// `offset + r * rs + c * cs`.
#[derive(Debug, Clone, Copy)]
pub struct View {
    pub offset: usize,
    pub rs: usize,
    pub cs: usize,
}

impl View {
    pub fn rows(offset: usize, rs: usize) -> Self {
        Self { offset, rs, cs: 1 }
    }

    fn check(&self, len: usize, rows: usize, cols: usize) {
        if rows > 0 && cols > 0 {
            assert!(
                self.offset + (rows - 1) * self.rs + (cols - 1) * self.cs < len,
                "strided view out of bounds"
            );
        }
    }
}

/// `C = A B + beta C` on strided views; `A` is `m x k`, `B` is `k x n`.
#[allow(clippy::too_many_arguments)]
pub fn gemm_view<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    av: View,
    b: &[T],
    bv: View,
    beta: T,
    c: &mut [T],
    cv: View,
) {
    av.check(a.len(), m, k);
    bv.check(b.len(), k, n);
    cv.check(c.len(), m, n);
    // SAFETY: every view is bounds-checked above; `c` is a distinct
    // mutable borrow so it cannot alias `a` or `b`.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            T::one(),
            a.as_ptr().add(av.offset),
            av.rs as isize,
            av.cs as isize,
            b.as_ptr().add(bv.offset),
            bv.rs as isize,
            bv.cs as isize,
            beta,
            c.as_mut_ptr().add(cv.offset),
            cv.rs as isize,
            cv.cs as isize,
        )
    }
}

/// Dense NCHW tensor. Feature vectors use shape `[n, f, 1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    pub shape: [usize; 4],
    pub data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn zeros(shape: [usize; 4]) -> Self {
        Self {
            shape,
            data: vec![T::zero(); shape.iter().product()],
        }
    }

    pub fn from_vec(shape: [usize; 4], data: Vec<T>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), data.len(), "tensor size");
        Self { shape, data }
    }

    pub fn n(&self) -> usize {
        self.shape[0]
    }

    pub fn c(&self) -> usize {
        self.shape[1]
    }

    pub fn hw(&self) -> usize {
        self.shape[2] * self.shape[3]
    }

    /// Elements per sample.
    pub fn sample_len(&self) -> usize {
        self.shape[1] * self.shape[2] * self.shape[3]
    }

    pub fn sample(&self, i: usize) -> &[T] {
        let s = self.sample_len();
        &self.data[i * s..(i + 1) * s]
    }

    pub fn sample_mut(&mut self, i: usize) -> &mut [T] {
        let s = self.sample_len();
        &mut self.data[i * s..(i + 1) * s]
    }

    pub fn add_assign(&mut self, other: &Self) {
        assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map<U: Real>(&self, f: impl Fn(T) -> U) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

/// Concatenates along the channel axis.
pub fn concat_channels<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    assert_eq!(a.n(), b.n());
    assert_eq!(a.shape[2..], b.shape[2..]);
    let mut out = Tensor::zeros([a.n(), a.c() + b.c(), a.shape[2], a.shape[3]]);
    let (sa, sb) = (a.sample_len(), b.sample_len());
    for i in 0..a.n() {
        let dst = out.sample_mut(i);
        dst[..sa].copy_from_slice(a.sample(i));
        dst[sa..sa + sb].copy_from_slice(b.sample(i));
    }
    out
}

/// Splits a channel-concatenated gradient into its two parts.
pub fn split_channels<T: Real>(g: &Tensor<T>, first: usize) -> (Tensor<T>, Tensor<T>) {
    let [n, c, h, w] = g.shape;
    let mut a = Tensor::zeros([n, first, h, w]);
    let mut b = Tensor::zeros([n, c - first, h, w]);
    let sa = a.sample_len();
    for i in 0..n {
        let src = g.sample(i);
        a.sample_mut(i).copy_from_slice(&src[..sa]);
        b.sample_mut(i).copy_from_slice(&src[sa..]);
    }
    (a, b)
}

/// Nearest-neighbour upsampling by integer factors.
pub fn upsample_nearest<T: Real>(x: &Tensor<T>, fh: usize, fw: usize) -> Tensor<T> {
    let [n, c, h, w] = x.shape;
    let (oh, ow) = (h * fh, w * fw);
    let mut out = Tensor::zeros([n, c, oh, ow]);
    for plane in 0..n * c {
        let src = &x.data[plane * h * w..(plane + 1) * h * w];
        let dst = &mut out.data[plane * oh * ow..(plane + 1) * oh * ow];
        for oy in 0..oh {
            let row = &src[(oy / fh) * w..(oy / fh + 1) * w];
            for (ox, d) in dst[oy * ow..(oy + 1) * ow].iter_mut().enumerate() {
                *d = row[ox / fw];
            }
        }
    }
    out
}

/// Gradient of [`upsample_nearest`]: sums each block.
pub fn upsample_nearest_backward<T: Real>(g: &Tensor<T>, fh: usize, fw: usize) -> Tensor<T> {
    let [n, c, oh, ow] = g.shape;
    let (h, w) = (oh / fh, ow / fw);
    let mut out = Tensor::zeros([n, c, h, w]);
    for plane in 0..n * c {
        let src = &g.data[plane * oh * ow..(plane + 1) * oh * ow];
        let dst = &mut out.data[plane * h * w..(plane + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                dst[(oy / fh) * w + ox / fw] += src[oy * ow + ox];
            }
        }
    }
    out
}

/// A trainable parameter with its accumulated gradient.
#[derive(Debug, Clone)]
pub struct Param<T> {
    pub value: Vec<T>,
    pub grad: Vec<T>,
    pub shape: Vec<usize>,
}

impl<T: Real> Param<T> {
    pub fn new(shape: Vec<usize>, value: Vec<T>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), value.len());
        Self {
            grad: vec![T::zero(); value.len()],
            value,
            shape,
        }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self::new(shape, vec![T::zero(); n])
    }

    /// Uniform in `[-bound, bound]`.
    pub fn uniform(shape: Vec<usize>, bound: f64, rng: &mut impl Rng) -> Self {
        let n = shape.iter().product();
        let value = (0..n)
            .map(|_| T::lit(rng.random_range(-bound..=bound)))
            .collect();
        Self::new(shape, value)
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = T::zero());
    }
}

/// Visits every parameter with a stable hierarchical name.
pub trait Module<T: Real> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>));
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_transposes() {
        // A = [[1,2,3],[4,5,6]] (2x3), B = [[1,0],[0,1],[1,1]] (3x2)
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let at = [1.0, 4.0, 2.0, 5.0, 3.0, 6.0];
        let b = [1.0, 0.0, 0.0, 1.0, 1.0, 1.0];
        let bt = [1.0, 0.0, 1.0, 0.0, 1.0, 1.0];
        let expected = [4.0, 5.0, 10.0, 11.0];
        for (aa, ta) in [(&a, false), (&at, true)] {
            for (bb, tb) in [(&b, false), (&bt, true)] {
                let mut c = [0.0f64; 4];
                matmul(aa, ta, bb, tb, &mut c, 2, 3, 2, 0.0);
                assert_eq!(c, expected);
            }
        }
        let mut c = [1.0f64; 4];
        matmul(&a, false, &b, false, &mut c, 2, 3, 2, 1.0);
        assert_eq!(c, [5.0, 6.0, 11.0, 12.0]);
    }

    #[test]
    fn concat_split_roundtrip() {
        let a = Tensor::from_vec([2, 1, 1, 2], vec![1.0f64, 2.0, 3.0, 4.0]);
        let b = Tensor::from_vec([2, 2, 1, 2], (0..8).map(|v| v as f64).collect());
        let c = concat_channels(&a, &b);
        assert_eq!(c.shape, [2, 3, 1, 2]);
        assert_eq!(&c.sample(1)[..2], &[3.0, 4.0]);
        let (a2, b2) = split_channels(&c, 1);
        assert_eq!(a2, a);
        assert_eq!(b2, b);
    }

    #[test]
    fn upsample_and_adjoint() {
        let x = Tensor::from_vec([1, 1, 1, 2], vec![1.0f64, 2.0]);
        let up = upsample_nearest(&x, 2, 2);
        assert_eq!(up.data, vec![1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0]);
        // <up(x), g> == <x, up^T(g)>
        let g = Tensor::from_vec([1, 1, 2, 4], (0..8).map(|v| v as f64).collect());
        let lhs: f64 = up.data.iter().zip(&g.data).map(|(a, b)| a * b).sum();
        let back = upsample_nearest_backward(&g, 2, 2);
        let rhs: f64 = x.data.iter().zip(&back.data).map(|(a, b)| a * b).sum();
        assert_eq!(lhs, rhs);
    }
}
