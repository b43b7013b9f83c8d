//! Dense rank-5 tensors in (n, c, d, h, w) row-major order.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{Add, AddAssign, Div, Mul, MulAssign, Neg, Sub, SubAssign};

use crate::error::{Error, Result};

/// Floating-point element type. Production code runs on `f32`; the test
/// suite also instantiates everything with `f64`.
pub trait Real:
    Copy
    + Send
    + Sync
    + Debug
    + Display
    + Default
    + PartialOrd
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + SubAssign
    + MulAssign
    + Sum
    + 'static
{
    const ZERO: Self;
    const ONE: Self;
    const DTYPE: &'static str;

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn sqrt(self) -> Self;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn is_finite(self) -> bool;

    fn max(self, other: Self) -> Self {
        if self > other {
            self
        } else {
            other
        }
    }

    fn min(self, other: Self) -> Self {
        if self < other {
            self
        } else {
            other
        }
    }

    fn from_usize(v: usize) -> Self {
        Self::from_f64(v as f64)
    }

    /// `c = a * b + beta * c` for row/column-strided matrices
    /// (`a` is m x k, `b` is k x n, `c` is m x n).
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        a_strides: (usize, usize),
        b: &[Self],
        b_strides: (usize, usize),
        beta: Self,
        c: &mut [Self],
        c_strides: (usize, usize),
    );
}

/// Highest flat index touched by an m x n matrix with the given strides.
fn span(m: usize, n: usize, rs: usize, cs: usize) -> usize {
    if m == 0 || n == 0 {
        0
    } else {
        (m - 1) * rs + (n - 1) * cs + 1
    }
}

macro_rules! impl_real {
    ($t:ty, $name:literal, $gemm:ident) => {
        impl Real for $t {
            const ZERO: Self = 0.0;
            const ONE: Self = 1.0;
            const DTYPE: &'static str = $name;

            #[inline]
            fn from_f64(v: f64) -> Self {
                v as $t
            }
            #[inline]
            fn to_f64(self) -> f64 {
                self as f64
            }
            #[inline]
            fn sqrt(self) -> Self {
                <$t>::sqrt(self)
            }
            #[inline]
            fn exp(self) -> Self {
                <$t>::exp(self)
            }
            #[inline]
            fn ln(self) -> Self {
                <$t>::ln(self)
            }
            #[inline]
            fn is_finite(self) -> bool {
                <$t>::is_finite(self)
            }

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                (rsa, csa): (usize, usize),
                b: &[Self],
                (rsb, csb): (usize, usize),
                beta: Self,
                c: &mut [Self],
                (rsc, csc): (usize, usize),
            ) {
                assert!(a.len() >= span(m, k, rsa, csa), "gemm: lhs too short");
                assert!(b.len() >= span(k, n, rsb, csb), "gemm: rhs too short");
                assert!(c.len() >= span(m, n, rsc, csc), "gemm: output too short");
                // SAFETY: the asserts above bound every index the kernel touches,
                // and `c` is uniquely borrowed.
                unsafe {
                    matrixmultiply::$gemm(
                        m,
                        k,
                        n,
                        1.0,
                        a.as_ptr(),
                        rsa as isize,
                        csa as isize,
                        b.as_ptr(),
                        rsb as isize,
                        csb as isize,
                        beta,
                        c.as_mut_ptr(),
                        rsc as isize,
                        csc as isize,
                    );
                }
            }
        }
    };
}

impl_real!(f32, "f32", sgemm);
impl_real!(f64, "f64", dgemm);

/// Shape of a rank-5 tensor.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Default, serde::Serialize, serde::Deserialize)]
pub struct Shape5 {
    pub n: usize,
    pub c: usize,
    pub d: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape5 {
    pub const fn new(n: usize, c: usize, d: usize, h: usize, w: usize) -> Self {
        Shape5 { n, c, d, h, w }
    }

    pub const fn numel(&self) -> usize {
        self.n * self.c * self.d * self.h * self.w
    }

    /// Voxels per channel slab.
    pub const fn spatial(&self) -> usize {
        self.d * self.h * self.w
    }

    pub const fn dims(&self) -> [usize; 5] {
        [self.n, self.c, self.d, self.h, self.w]
    }

    pub fn with_channels(self, c: usize) -> Self {
        Shape5 { c, ..self }
    }

    pub fn with_spatial(self, d: usize, h: usize, w: usize) -> Self {
        Shape5 { d, h, w, ..self }
    }
}

impl Debug for Shape5 {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({}, {}, {}, {}, {})", self.n, self.c, self.d, self.h, self.w)
    }
}

impl From<[usize; 5]> for Shape5 {
    fn from(v: [usize; 5]) -> Self {
        Shape5::new(v[0], v[1], v[2], v[3], v[4])
    }
}

/// Dense rank-5 tensor with an optional gradient buffer.
#[derive(Clone, PartialEq)]
pub struct Tensor5<T: Real = f32> {
    shape: Shape5,
    data: Vec<T>,
    grad: Option<Vec<T>>,
}

impl<T: Real> Debug for Tensor5<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor5")
            .field("shape", &self.shape)
            .field("dtype", &T::DTYPE)
            .field("has_grad", &self.grad.is_some())
            .finish()
    }
}

impl<T: Real> Tensor5<T> {
    pub fn zeros(shape: impl Into<Shape5>) -> Self {
        let shape = shape.into();
        Tensor5 {
            shape,
            data: vec![T::ZERO; shape.numel()],
            grad: None,
        }
    }

    pub fn full(shape: impl Into<Shape5>, value: T) -> Self {
        let shape = shape.into();
        Tensor5 {
            shape,
            data: vec![value; shape.numel()],
            grad: None,
        }
    }

    pub fn from_vec(shape: impl Into<Shape5>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        if data.len() != shape.numel() {
            return Err(Error::shape("Tensor5::from_vec", shape, data.len()));
        }
        Ok(Tensor5 {
            shape,
            data,
            grad: None,
        })
    }

    pub fn from_fn(shape: impl Into<Shape5>, mut f: impl FnMut(usize) -> T) -> Self {
        let shape = shape.into();
        Tensor5 {
            shape,
            data: (0..shape.numel()).map(&mut f).collect(),
            grad: None,
        }
    }

    pub fn shape(&self) -> Shape5 {
        self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    /// Allocates (or clears) the gradient buffer.
    pub fn zero_grad(&mut self) {
        match &mut self.grad {
            Some(g) => g.iter_mut().for_each(|v| *v = T::ZERO),
            None => self.grad = Some(vec![T::ZERO; self.data.len()]),
        }
    }

    pub fn set_grad(&mut self, grad: Vec<T>) -> Result<()> {
        if grad.len() != self.data.len() {
            return Err(Error::shape("Tensor5::set_grad", self.shape, grad.len()));
        }
        self.grad = Some(grad);
        Ok(())
    }

    pub fn take_grad(&mut self) -> Option<Vec<T>> {
        self.grad.take()
    }

    #[inline]
    pub fn index(&self, n: usize, c: usize, z: usize, y: usize, x: usize) -> usize {
        let s = self.shape;
        (((n * s.c + c) * s.d + z) * s.h + y) * s.w + x
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, z: usize, y: usize, x: usize) -> T {
        self.data[self.index(n, c, z, y, x)]
    }

    /// Channel slab `(n, c)` as a flat spatial slice.
    pub fn slab(&self, n: usize, c: usize) -> &[T] {
        let sp = self.shape.spatial();
        let start = (n * self.shape.c + c) * sp;
        &self.data[start..start + sp]
    }

    pub fn reshape(mut self, shape: impl Into<Shape5>) -> Result<Self> {
        let shape = shape.into();
        if shape.numel() != self.data.len() {
            return Err(Error::shape("Tensor5::reshape", self.shape, shape));
        }
        self.shape = shape;
        self.grad = None;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor5 {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
            grad: None,
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
            && self
                .grad
                .as_ref()
                .is_none_or(|g| g.iter().all(|v| v.is_finite()))
    }

    /// Converts element type (used to lift f32 parameters into the f64 test build).
    pub fn cast<U: Real>(&self) -> Tensor5<U> {
        Tensor5 {
            shape: self.shape,
            data: self.data.iter().map(|v| U::from_f64(v.to_f64())).collect(),
            grad: None,
        }
    }

    /// Sum of elementwise products, accumulated in f64.
    pub fn dot(&self, other: &Self) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a.to_f64() * b.to_f64())
            .sum()
    }

    /// Extracts batch item `n` as a tensor with batch size 1.
    pub fn batch_item(&self, n: usize) -> Self {
        let per = self.shape.numel() / self.shape.n.max(1);
        Tensor5 {
            shape: Shape5 { n: 1, ..self.shape },
            data: self.data[n * per..(n + 1) * per].to_vec(),
            grad: None,
        }
    }

    /// Stacks batch-1 tensors of identical shape along the batch axis.
    pub fn stack(items: &[Self]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::InvalidArgument("stack of zero tensors".into()))?;
        let mut data = Vec::with_capacity(first.numel() * items.len());
        let mut n = 0;
        for t in items {
            if t.shape.dims()[1..] != first.shape.dims()[1..] {
                return Err(Error::shape("Tensor5::stack", first.shape, t.shape));
            }
            n += t.shape.n;
            data.extend_from_slice(&t.data);
        }
        Tensor5::from_vec(Shape5 { n, ..first.shape }, data)
    }
}
