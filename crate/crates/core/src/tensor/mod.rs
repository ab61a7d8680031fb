//! Dense row-major tensors and a reverse-mode gradient tape.
//!
//! The engine is generic over [`Scalar`] so that the same model code runs in
//! `f64` for finite-difference checks and in `f32` for training and
//! benchmarking.

mod adam;
pub mod gradcheck;
mod graph;

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

pub use adam::{clip_global_norm, Adam, AdamConfig, AdamState};
pub use graph::{sigmoid_scalar, AttentionSpec, Graph, Var};

/// Floating point element type of the engine.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + Default
    + Debug
    + Display
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + Send
    + Sync
    + 'static
{
    /// `c = op(a) * op(b)` (or `c += ...` when `accumulate`), where `a` is
    /// logically `m x k` and `b` is `k x n`. A transposed operand is stored
    /// in the opposite orientation.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        a_trans: bool,
        b: &[Self],
        b_trans: bool,
        c: &mut [Self],
        accumulate: bool,
    );

    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("finite conversion")
    }

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

fn strides(rows: usize, cols: usize, trans: bool) -> (isize, isize) {
    // (row stride, column stride) of the logical rows x cols operand.
    if trans {
        (1, rows as isize)
    } else {
        (cols as isize, 1)
    }
}

macro_rules! impl_scalar {
    ($t:ty, $gemm:path) => {
        impl Scalar for $t {
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                a_trans: bool,
                b: &[Self],
                b_trans: bool,
                c: &mut [Self],
                accumulate: bool,
            ) {
                assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
                if m == 0 || n == 0 {
                    return;
                }
                let (rsa, csa) = strides(m, k, a_trans);
                let (rsb, csb) = strides(k, n, b_trans);
                let beta = if accumulate { 1.0 } else { 0.0 };
                // SAFETY: slice lengths checked above; strides describe
                // in-bounds row-major or transposed layouts of those slices.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        1.0,
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
        }
    };
}

impl_scalar!(f32, matrixmultiply::sgemm);
impl_scalar!(f64, matrixmultiply::dgemm);

/// A dense row-major array, optionally carrying a gradient buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    pub shape: Vec<usize>,
    pub data: Vec<T>,
    pub requires_grad: bool,
    pub grad: Option<Vec<T>>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> crate::Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() || shape.iter().any(|&s| s == 0) {
            return Err(crate::Error::Dimension {
                op: "tensor",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![T::zero(); numel],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(value: T) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn from_f64(shape: Vec<usize>, data: &[f64]) -> crate::Result<Self> {
        Self::new(shape, data.iter().map(|&x| T::of(x)).collect())
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Size of the last axis.
    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap_or(&1)
    }

    /// Number of rows when viewed as `[numel / cols, cols]`.
    pub fn rows(&self) -> usize {
        self.numel() / self.cols().max(1)
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|x| x.to_f64_lossy()).collect()
    }
}
