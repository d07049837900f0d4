//! Dense row-major tensors and a tape-based reverse-mode differentiator.
//!
//! Everything is generic over [`Scalar`] so the same model code runs in
//! `f32` for training and in `f64` for finite-difference gradient checks.

mod graph;

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use thiserror::Error;

pub use graph::{dropout_rng, AttentionSpec, Gradients, Graph, Var};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("index {index} out of range for table of {size} rows")]
    IndexOutOfRange { index: u32, size: usize },
    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("every target position is padding")]
    AllPadTarget,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

/// Floating-point element type with a matrix-multiply kernel.
pub trait Scalar:
    num_traits::Float
    + num_traits::FromPrimitive
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + 'static
{
    /// `C = alpha * A·B + beta * C` on strided views.
    ///
    /// # Safety
    /// Every addressed element of the three views must lie inside its buffer.
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

    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("representable constant")
    }
}

impl Scalar for f32 {
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
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Scalar for f64 {
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
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// A strided 2-D window into a flat buffer.
#[derive(Debug, Clone, Copy)]
pub(crate) struct View {
    pub off: usize,
    pub rs: usize,
    pub cs: usize,
}

impl View {
    pub fn rows(rs: usize) -> View {
        View { off: 0, rs, cs: 1 }
    }

    pub fn at(off: usize, rs: usize, cs: usize) -> View {
        View { off, rs, cs }
    }

    pub fn t(self) -> View {
        View {
            off: self.off,
            rs: self.cs,
            cs: self.rs,
        }
    }

    fn last(&self, rows: usize, cols: usize) -> usize {
        self.off + rows.saturating_sub(1) * self.rs + cols.saturating_sub(1) * self.cs
    }
}

/// Products whose `B` has at most this many entries skip the blocked
/// kernel.  The choice ignores `m` so a row's result does not depend on how
/// many other rows share the call.
const SMALL_GEMM: usize = 256;

/// Bounds-checked strided matrix multiply: `C[m×n] (+)= A[m×k]·B[k×n]`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<F: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[F],
    av: View,
    b: &[F],
    bv: View,
    c: &mut [F],
    cv: View,
    accumulate: bool,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(cv.last(m, n) < c.len(), "gemm: C view out of bounds");
    if k == 0 {
        if !accumulate {
            for i in 0..m {
                for j in 0..n {
                    c[cv.off + i * cv.rs + j * cv.cs] = F::zero();
                }
            }
        }
        return;
    }
    assert!(av.last(m, k) < a.len(), "gemm: A view out of bounds");
    assert!(bv.last(k, n) < b.len(), "gemm: B view out of bounds");
    if k * n <= SMALL_GEMM {
        // Packing overhead dominates tiny products; a direct loop is faster.
        for i in 0..m {
            for j in 0..n {
                let mut sum = F::zero();
                for p in 0..k {
                    sum += a[av.off + i * av.rs + p * av.cs] * b[bv.off + p * bv.rs + j * bv.cs];
                }
                let at = &mut c[cv.off + i * cv.rs + j * cv.cs];
                *at = if accumulate { *at + sum } else { sum };
            }
        }
        return;
    }
    let beta = if accumulate { F::one() } else { F::zero() };
    // SAFETY: the asserts above bound every element the kernel touches.
    unsafe {
        F::gemm_raw(
            m,
            k,
            n,
            F::one(),
            a.as_ptr().add(av.off),
            av.rs as isize,
            av.cs as isize,
            b.as_ptr().add(bv.off),
            bv.rs as isize,
            bv.cs as isize,
            beta,
            c.as_mut_ptr().add(cv.off),
            cv.rs as isize,
            cv.cs as isize,
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<F> {
    shape: Vec<usize>,
    data: Vec<F>,
}

impl<F: Scalar> Tensor<F> {
    pub fn new(shape: Vec<usize>, data: Vec<F>) -> Result<Self, TensorError> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::ShapeMismatch {
                op: "tensor",
                left: shape,
                right: vec![data.len()],
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![F::zero(); n],
        }
    }

    pub fn filled(shape: Vec<usize>, value: F) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; n],
        }
    }

    pub fn scalar(value: F) -> Self {
        Tensor {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn from_rows(rows: &[&[F]]) -> Result<Self, TensorError> {
        let cols = rows.first().map_or(0, |r| r.len());
        if let Some(bad) = rows.iter().find(|r| r.len() != cols) {
            return Err(TensorError::ShapeMismatch {
                op: "from_rows",
                left: vec![cols],
                right: vec![bad.len()],
            });
        }
        Ok(Tensor {
            shape: vec![rows.len(), cols],
            data: rows.concat(),
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<F> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Size of the last dimension (1 for scalars).
    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    /// Product of all but the last dimension.
    pub fn rows(&self) -> usize {
        if self.shape.is_empty() {
            1
        } else {
            self.data.len() / self.cols().max(1)
        }
    }

    pub fn row(&self, i: usize) -> &[F] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self, TensorError> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                left: self.shape,
                right: shape,
            });
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn cast<G: Scalar>(&self) -> Tensor<G> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|x| G::from_f64(x.to_f64().unwrap_or(f64::NAN)).unwrap_or(G::nan()))
                .collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Plain 2-D product, used outside the differentiable graph.
    pub fn matmul(&self, other: &Tensor<F>) -> Result<Tensor<F>, TensorError> {
        if self.shape.len() != 2 || other.shape.len() != 2 || self.shape[1] != other.shape[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        let (m, k, n) = (self.shape[0], self.shape[1], other.shape[1]);
        let mut out = Tensor::zeros(vec![m, n]);
        gemm(
            m,
            k,
            n,
            &self.data,
            View::rows(k),
            &other.data,
            View::rows(n),
            &mut out.data,
            View::rows(n),
            false,
        );
        Ok(out)
    }
}

/// Row-wise softmax of a slice, in place.  Entries equal to `-inf` get zero
/// probability.
pub fn softmax_in_place<F: Scalar>(row: &mut [F]) {
    let max = row.iter().copied().fold(F::neg_infinity(), F::max);
    if max == F::neg_infinity() {
        let u = F::one() / F::lit(row.len() as f64);
        row.iter_mut().for_each(|x| *x = u);
        return;
    }
    let mut sum = F::zero();
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in row.iter_mut() {
        *x /= sum;
    }
}

pub fn log_softmax_in_place<F: Scalar>(row: &mut [F]) {
    let max = row.iter().copied().fold(F::neg_infinity(), F::max);
    let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<F>().ln();
    row.iter_mut().for_each(|x| *x -= lse);
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_by_hand() {
        let a = Tensor::from_rows(&[&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]]).unwrap();
        let b = Tensor::from_rows(&[&[7.0, 8.0], &[9.0, 10.0], &[11.0, 12.0]]).unwrap();
        let c: Tensor<f64> = a.matmul(&b).unwrap();
        // 1*7+2*9+3*11, 1*8+2*10+3*12, 4*7+5*9+6*11, 4*8+5*10+6*12
        assert_eq!(c.data(), &[58.0, 64.0, 139.0, 154.0]);
        assert!(matches!(b.matmul(&b), Err(TensorError::ShapeMismatch { .. })));
    }

    #[test]
    fn row_results_ignore_row_count() {
        let value = |i: usize| ((i * 7919 % 1013) as f32 / 1013.0 - 0.5) * 3.1;
        for (k, n) in [(4, 8), (16, 16), (32, 64), (40, 40)] {
            let m = 37;
            let a: Vec<f32> = (0..m * k).map(value).collect();
            let b: Vec<f32> = (0..k * n).map(|i| value(i + 5)).collect();
            let mut all = vec![0.0f32; m * n];
            gemm(m, k, n, &a, View::rows(k), &b, View::rows(n), &mut all, View::rows(n), false);
            for i in 0..m {
                let mut one = vec![0.0f32; n];
                gemm(1, k, n, &a[i * k..], View::rows(k), &b, View::rows(n), &mut one, View::rows(n), false);
                assert_eq!(one, all[i * n..(i + 1) * n], "k={k} n={n} row {i}");
            }
        }
    }

    #[test]
    fn softmax_uniform() {
        let mut r = [0.0f64, 0.0];
        softmax_in_place(&mut r);
        assert_eq!(r, [0.5, 0.5]);
        let mut m = [1.0f32, f32::NEG_INFINITY];
        softmax_in_place(&mut m);
        assert_eq!(m, [1.0, 0.0]);
    }

    #[test]
    fn shape_checked() {
        assert!(Tensor::<f32>::new(vec![2, 2], vec![0.0; 3]).is_err());
        let t = Tensor::<f32>::zeros(vec![2, 3, 4]);
        assert_eq!((t.rows(), t.cols()), (6, 4));
        let s: Tensor<f64> = Tensor::<f32>::filled(vec![2], 0.5).cast();
        assert_eq!(s.data(), &[0.5, 0.5]);
    }
}
