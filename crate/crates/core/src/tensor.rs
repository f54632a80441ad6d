//! Dense row-major tensors over `f32` / `f64`.

use std::fmt;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Errors raised by tensor construction and by graph operations.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("invalid parameter: {0}")]
    Parameter(String),
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;

/// Scalar element type. Implemented for `f32` (experiments) and `f64`
/// (gradient verification).
pub trait Real:
    Float
    + FromPrimitive
    + Default
    + fmt::Debug
    + fmt::Display
    + Send
    + Sync
    + 'static
    + AddAssign
    + SubAssign
    + MulAssign
    + Sum
{
    /// `c = alpha * a * b + beta * c` with arbitrary row/column strides.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    );

    fn from_f64c(v: f64) -> Self {
        <Self as FromPrimitive>::from_f64(v).unwrap()
    }

    fn as_f64(self) -> f64 {
        num_traits::ToPrimitive::to_f64(&self).unwrap()
    }
}

macro_rules! impl_real {
    ($t:ty, $f:path) => {
        impl Real for $t {
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                rsa: isize,
                csa: isize,
                b: &[Self],
                rsb: isize,
                csb: isize,
                beta: Self,
                c: &mut [Self],
                rsc: isize,
                csc: isize,
            ) {
                if m == 0 || n == 0 {
                    return;
                }
                // SAFETY: callers pass slices sized for the given strides; the
                // extents are checked by the debug assertions below.
                debug_assert!(c.len() >= (m - 1) * rsc.unsigned_abs() + (n - 1) * csc.unsigned_abs() + 1);
                debug_assert!(k == 0 || a.len() >= (m - 1) * rsa.unsigned_abs() + (k - 1) * csa.unsigned_abs() + 1);
                debug_assert!(k == 0 || b.len() >= (k - 1) * rsb.unsigned_abs() + (n - 1) * csb.unsigned_abs() + 1);
                unsafe {
                    $f(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        rsc,
                        csc,
                    );
                }
            }
        }
    };
}

impl_real!(f32, matrixmultiply::sgemm);
impl_real!(f64, matrixmultiply::dgemm);

/// Dense tensor, row-major. `dims` is never empty; scalars have dims `[1]`.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor<S> {
    dims: Vec<usize>,
    data: Vec<S>,
}

impl<S: fmt::Debug> fmt::Debug for Tensor<S> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.data.len() <= 16 {
            write!(f, "Tensor{:?}{:?}", self.dims, self.data)
        } else {
            write!(f, "Tensor{:?}[{} values]", self.dims, self.data.len())
        }
    }
}

impl<S: Real> Tensor<S> {
    pub fn new(dims: Vec<usize>, data: Vec<S>) -> Result<Self> {
        if dims.is_empty() || dims.iter().any(|&d| d == 0) {
            return Err(TensorError::Invalid {
                op: "tensor",
                msg: format!("dims must be non-empty and positive, got {dims:?}"),
            });
        }
        let n: usize = dims.iter().product();
        if n != data.len() {
            return Err(TensorError::Invalid {
                op: "tensor",
                msg: format!("dims {dims:?} hold {n} values, data has {}", data.len()),
            });
        }
        Ok(Self { dims, data })
    }

    pub fn zeros(dims: &[usize]) -> Self {
        Self::full(dims, S::zero())
    }

    pub fn ones(dims: &[usize]) -> Self {
        Self::full(dims, S::one())
    }

    pub fn full(dims: &[usize], v: S) -> Self {
        assert!(!dims.is_empty() && dims.iter().all(|&d| d > 0), "bad dims {dims:?}");
        Self {
            dims: dims.to_vec(),
            data: vec![v; dims.iter().product()],
        }
    }

    pub fn scalar(v: S) -> Self {
        Self {
            dims: vec![1],
            data: vec![v],
        }
    }

    pub fn from_fn(dims: &[usize], mut f: impl FnMut(usize) -> S) -> Self {
        let n = dims.iter().product();
        Self {
            dims: dims.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn ndim(&self) -> usize {
        self.dims.len()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> S {
        self.data[0]
    }

    pub fn reshaped(mut self, dims: &[usize]) -> Result<Self> {
        let n: usize = dims.iter().product();
        if n != self.data.len() || dims.is_empty() {
            return Err(TensorError::Shape {
                op: "reshape",
                lhs: self.dims.clone(),
                rhs: dims.to_vec(),
            });
        }
        self.dims = dims.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Self {
            dims: self.dims.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(S, S) -> S) -> Result<Self> {
        if self.dims != other.dims {
            return Err(TensorError::Shape {
                op: "zip_map",
                lhs: self.dims.clone(),
                rhs: other.dims.clone(),
            });
        }
        Ok(Self {
            dims: self.dims.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn sum(&self) -> S {
        self.data.iter().copied().sum()
    }

    pub fn mean(&self) -> S {
        self.sum() / S::from_usize(self.numel()).unwrap()
    }

    pub fn max_abs(&self) -> S {
        self.data.iter().fold(S::zero(), |m, &v| m.max(v.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Rows `[start, end)` along the leading axis.
    pub fn slice_outer(&self, start: usize, end: usize) -> Result<Self> {
        let outer = self.dims[0];
        if start >= end || end > outer {
            return Err(TensorError::Invalid {
                op: "slice_outer",
                msg: format!("range {start}..{end} outside leading extent {outer}"),
            });
        }
        let inner: usize = self.dims[1..].iter().product();
        let mut dims = self.dims.clone();
        dims[0] = end - start;
        Ok(Self {
            dims,
            data: self.data[start * inner..end * inner].to_vec(),
        })
    }

    /// Entry `i` of the leading axis with that axis removed.
    pub fn index_outer(&self, i: usize) -> Result<Self> {
        let mut t = self.slice_outer(i, i + 1)?;
        t.dims.remove(0);
        Ok(t)
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(parts: &[Self]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| TensorError::Invalid {
            op: "stack",
            msg: "no parts".into(),
        })?;
        let mut data = Vec::with_capacity(parts.len() * first.numel());
        for p in parts {
            if p.dims != first.dims {
                return Err(TensorError::Shape {
                    op: "stack",
                    lhs: first.dims.clone(),
                    rhs: p.dims.clone(),
                });
            }
            data.extend_from_slice(&p.data);
        }
        let mut dims = vec![parts.len()];
        dims.extend_from_slice(&first.dims);
        Self::new(dims, data)
    }

    /// Gathers entries of the leading axis in the given order.
    pub fn select_outer(&self, idx: &[usize]) -> Result<Self> {
        let outer = self.dims[0];
        let inner: usize = self.dims[1..].iter().product();
        let mut data = Vec::with_capacity(idx.len() * inner);
        for &i in idx {
            if i >= outer {
                return Err(TensorError::Invalid {
                    op: "select_outer",
                    msg: format!("index {i} outside leading extent {outer}"),
                });
            }
            data.extend_from_slice(&self.data[i * inner..(i + 1) * inner]);
        }
        let mut dims = self.dims.clone();
        dims[0] = idx.len();
        Self::new(dims, data)
    }

    /// Concatenates along the leading axis.
    pub fn stack_outer(parts: &[Self]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| TensorError::Invalid {
            op: "stack_outer",
            msg: "no parts".into(),
        })?;
        let mut dims = first.dims.clone();
        dims[0] = 0;
        let mut data = Vec::new();
        for p in parts {
            if p.dims[1..] != first.dims[1..] {
                return Err(TensorError::Shape {
                    op: "stack_outer",
                    lhs: first.dims.clone(),
                    rhs: p.dims.clone(),
                });
            }
            dims[0] += p.dims[0];
            data.extend_from_slice(&p.data);
        }
        Self::new(dims, data)
    }

    pub fn cast<T: Real>(&self) -> Tensor<T> {
        Tensor {
            dims: self.dims.clone(),
            data: self.data.iter().map(|v| T::from_f64c(v.as_f64())).collect(),
        }
    }
}
