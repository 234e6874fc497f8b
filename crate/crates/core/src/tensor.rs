//! Strided N-dimensional arrays.
//!
//! A [`Tensor`] owns (or shares) a flat buffer plus a shape/stride/offset
//! triple. Freshly built tensors are in canonical row-major layout; views
//! such as [`Tensor::permute`] only rewrite the strides. Most kernels ask
//! for [`Tensor::values`], which borrows the buffer when the layout is
//! already canonical and materializes a copy otherwise.

use std::borrow::Cow;
use std::fmt;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};
use std::sync::Arc;

use crate::error::{bail, Result};

/// Floating-point element type. Implemented for `f32` (training) and `f64`
/// (gradient checks).
pub trait Element:
    num_traits::Float + Default + AddAssign + SubAssign + MulAssign + Sum + Send + Sync + fmt::Debug + fmt::Display + 'static
{
    const NAME: &'static str;

    fn from_f64(v: f64) -> Self;

    fn as_f64(self) -> f64;

    /// `C ← alpha·A·B + beta·C` on raw strided matrices. `A` is `m×k`, `B` is
    /// `k×n`, `C` is `m×n`. When `beta` is zero `C` is not read.
    #[allow(clippy::too_many_arguments)]
    fn gemm(m: usize, k: usize, n: usize, alpha: Self, a: MatRef<'_, Self>, b: MatRef<'_, Self>, beta: Self, c: MatMut<'_, Self>);
}

/// Read-only strided matrix view used by [`Element::gemm`].
#[derive(Clone, Copy)]
pub struct MatRef<'a, T> {
    pub data: &'a [T],
    pub row_stride: usize,
    pub col_stride: usize,
}

pub struct MatMut<'a, T> {
    pub data: &'a mut [T],
    pub row_stride: usize,
    pub col_stride: usize,
}

impl<'a, T> MatRef<'a, T> {
    pub fn new(data: &'a [T], row_stride: usize, col_stride: usize) -> Self {
        Self { data, row_stride, col_stride }
    }
}

impl<'a, T> MatMut<'a, T> {
    pub fn new(data: &'a mut [T], row_stride: usize, col_stride: usize) -> Self {
        Self { data, row_stride, col_stride }
    }
}

fn span(rows: usize, cols: usize, rs: usize, cs: usize) -> usize {
    if rows == 0 || cols == 0 {
        0
    } else {
        (rows - 1) * rs + (cols - 1) * cs + 1
    }
}

macro_rules! impl_element {
    ($t:ty, $name:literal, $gemm:path) => {
        impl Element for $t {
            const NAME: &'static str = $name;

            #[inline]
            fn from_f64(v: f64) -> Self {
                v as $t
            }

            #[inline]
            fn as_f64(self) -> f64 {
                self as f64
            }

            fn gemm(m: usize, k: usize, n: usize, alpha: Self, a: MatRef<'_, Self>, b: MatRef<'_, Self>, beta: Self, c: MatMut<'_, Self>) {
                assert!(a.data.len() >= span(m, k, a.row_stride, a.col_stride), "gemm: A too short");
                assert!(b.data.len() >= span(k, n, b.row_stride, b.col_stride), "gemm: B too short");
                assert!(c.data.len() >= span(m, n, c.row_stride, c.col_stride), "gemm: C too short");
                if m == 0 || n == 0 {
                    return;
                }
                // SAFETY: the asserts above bound every index the kernel touches.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        alpha,
                        a.data.as_ptr(),
                        a.row_stride as isize,
                        a.col_stride as isize,
                        b.data.as_ptr(),
                        b.row_stride as isize,
                        b.col_stride as isize,
                        beta,
                        c.data.as_mut_ptr(),
                        c.row_stride as isize,
                        c.col_stride as isize,
                    );
                }
            }
        }
    };
}

impl_element!(f32, "f32", matrixmultiply::sgemm);
impl_element!(f64, "f64", matrixmultiply::dgemm);

/// Row-major strides for `shape`.
pub fn row_major_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![0; shape.len()];
    let mut acc = 1;
    for (s, &d) in strides.iter_mut().zip(shape).rev() {
        *s = acc;
        acc *= d;
    }
    strides
}

fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() {
        bail!(Shape, "tensor shape must have at least one axis");
    }
    if let Some(pos) = shape.iter().position(|&d| d == 0) {
        bail!(Shape, "extent {} at axis {} must be positive", shape[pos], pos);
    }
    Ok(shape.iter().product())
}

/// Initial contents for [`Tensor::new`].
pub enum Fill<T> {
    Scalar(T),
    Buffer(Vec<T>),
}

#[derive(Clone)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    strides: Vec<usize>,
    offset: usize,
    data: Arc<Vec<T>>,
    requires_grad: bool,
}

impl<T: Element> Tensor<T> {
    pub fn new(shape: &[usize], fill: Fill<T>) -> Result<Self> {
        let numel = check_shape(shape)?;
        let data = match fill {
            Fill::Scalar(v) => vec![v; numel],
            Fill::Buffer(buf) => {
                if buf.len() != numel {
                    bail!(Shape, "buffer of length {} does not fill shape {:?} ({} elements)", buf.len(), shape, numel);
                }
                buf
            }
        };
        Ok(Self { shape: shape.to_vec(), strides: row_major_strides(shape), offset: 0, data: Arc::new(data), requires_grad: false })
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        Self::new(shape, Fill::Buffer(data))
    }

    pub fn full(shape: &[usize], value: T) -> Result<Self> {
        Self::new(shape, Fill::Scalar(value))
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Result<Self> {
        Self::full(shape, T::one())
    }

    /// One-element tensor of shape `[1]`.
    pub fn scalar(value: T) -> Self {
        Self::full(&[1], value).expect("[1] is a valid shape")
    }

    pub fn from_f64(shape: &[usize], data: &[f64]) -> Result<Self> {
        Self::from_vec(shape, data.iter().map(|&v| T::from_f64(v)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn strides(&self) -> &[usize] {
        &self.strides
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn with_requires_grad(mut self, flag: bool) -> Self {
        self.requires_grad = flag;
        self
    }

    pub fn is_contiguous(&self) -> bool {
        self.strides == row_major_strides(&self.shape)
    }

    /// True when the tensor covers its whole buffer in canonical order.
    fn is_canonical(&self) -> bool {
        self.offset == 0 && self.data.len() == self.numel() && self.is_contiguous()
    }

    pub fn get(&self, index: &[usize]) -> Result<T> {
        if index.len() != self.shape.len() {
            bail!(Shape, "index rank {} does not match tensor rank {}", index.len(), self.shape.len());
        }
        let mut off = self.offset;
        for (axis, (&i, (&d, &s))) in index.iter().zip(self.shape.iter().zip(&self.strides)).enumerate() {
            if i >= d {
                bail!(Shape, "index {} out of bounds for axis {} of extent {}", i, axis, d);
            }
            off += i * s;
        }
        Ok(self.data[off])
    }

    /// Elements in row-major order, borrowed when already canonical.
    pub fn values(&self) -> Cow<'_, [T]> {
        if self.is_canonical() {
            Cow::Borrowed(self.data.as_slice())
        } else {
            Cow::Owned(self.gather())
        }
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.values().into_owned()
    }

    fn gather(&self) -> Vec<T> {
        let numel = self.numel();
        let mut out = Vec::with_capacity(numel);
        let mut idx = vec![0usize; self.shape.len()];
        for _ in 0..numel {
            let off: usize = self.offset + idx.iter().zip(&self.strides).map(|(i, s)| i * s).sum::<usize>();
            out.push(self.data[off]);
            for axis in (0..idx.len()).rev() {
                idx[axis] += 1;
                if idx[axis] < self.shape[axis] {
                    break;
                }
                idx[axis] = 0;
            }
        }
        out
    }

    /// Canonical row-major copy (cheap clone when already canonical).
    pub fn contiguous(&self) -> Self {
        if self.is_canonical() {
            return self.clone();
        }
        Self {
            shape: self.shape.clone(),
            strides: row_major_strides(&self.shape),
            offset: 0,
            data: Arc::new(self.gather()),
            requires_grad: self.requires_grad,
        }
    }

    /// Reorders axes without copying.
    pub fn permute(&self, axes: &[usize]) -> Result<Self> {
        let n = self.shape.len();
        let mut seen = vec![false; n];
        if axes.len() != n || axes.iter().any(|&a| a >= n || std::mem::replace(&mut seen[a], true)) {
            bail!(Shape, "{:?} is not a permutation of {} axes", axes, n);
        }
        Ok(Self {
            shape: axes.iter().map(|&a| self.shape[a]).collect(),
            strides: axes.iter().map(|&a| self.strides[a]).collect(),
            offset: self.offset,
            data: Arc::clone(&self.data),
            requires_grad: self.requires_grad,
        })
    }

    pub fn transpose(&self) -> Result<Self> {
        if self.ndim() != 2 {
            bail!(Shape, "transpose needs a 2-d tensor, got {:?}", self.shape);
        }
        self.permute(&[1, 0])
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        let numel = check_shape(shape)?;
        if numel != self.numel() {
            bail!(Shape, "cannot reshape {:?} into {:?}", self.shape, shape);
        }
        let base = self.contiguous();
        Ok(Self { shape: shape.to_vec(), strides: row_major_strides(shape), offset: 0, data: base.data, requires_grad: self.requires_grad })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        let data = self.values().iter().map(|&v| f(v)).collect();
        Self::from_vec(&self.shape, data).expect("shape unchanged")
    }

    pub fn cast<U: Element>(&self) -> Tensor<U> {
        let data = self.values().iter().map(|v| U::from_f64(v.as_f64())).collect();
        Tensor::from_vec(&self.shape, data).expect("shape unchanged").with_requires_grad(self.requires_grad)
    }

    pub fn all_finite(&self) -> bool {
        self.values().iter().all(|v| v.is_finite())
    }

    pub fn sum_all(&self) -> T {
        self.values().iter().copied().sum()
    }

    /// Largest absolute elementwise difference; shapes must match.
    pub fn max_abs_diff(&self, other: &Self) -> Result<f64> {
        if self.shape != other.shape {
            bail!(Shape, "shape {:?} vs {:?}", self.shape, other.shape);
        }
        Ok(self.values().iter().zip(other.values().iter()).map(|(a, b)| (a.as_f64() - b.as_f64()).abs()).fold(0.0, f64::max))
    }

    /// Bitwise equality of shape and values (NaN-aware).
    pub fn bit_eq(&self, other: &Self) -> bool {
        self.shape == other.shape
            && self.values().iter().zip(other.values().iter()).all(|(a, b)| a.as_f64().to_bits() == b.as_f64().to_bits())
    }
}

impl<T: Element> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let vals = self.values();
        let shown: Vec<_> = vals.iter().take(8).collect();
        write!(f, "Tensor<{}>{:?} {:?}", T::NAME, self.shape, shown)?;
        if vals.len() > 8 {
            write!(f, "…")?;
        }
        Ok(())
    }
}
