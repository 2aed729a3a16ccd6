//! Dense row-major tensors and the floating-point element abstraction.
//!
//! Tensors here are plain values. Differentiation lives in [`crate::autograd`],
//! which wraps tensors in graph nodes.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use crate::error::{Error, Result};

/// Element type of a tensor: `f32` for training, `f64` for gradient checks.
pub trait Float:
    num_traits::Float
    + Debug
    + Display
    + Default
    + AddAssign
    + SubAssign
    + MulAssign
    + Sum
    + Send
    + Sync
    + 'static
{
    const BITS: u32;

    fn of(x: f64) -> Self;

    fn as_f64(self) -> f64;

    /// `c = op(a) * op(b) (+ c)` where `op(a)` is `m x k` and `op(b)` is `k x n`.
    ///
    /// With `trans_a` the buffer `a` holds a row-major `k x m` matrix, likewise
    /// `trans_b` means `b` holds `n x k`.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        trans_a: bool,
        b: &[Self],
        trans_b: bool,
        c: &mut [Self],
        accumulate: bool,
    );
}

struct GemmLayout {
    rsa: isize,
    csa: isize,
    rsb: isize,
    csb: isize,
}

fn gemm_layout(m: usize, k: usize, n: usize, trans_a: bool, trans_b: bool) -> GemmLayout {
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    GemmLayout { rsa, csa, rsb, csb }
}

macro_rules! impl_float {
    ($t:ty, $bits:expr, $gemm:path) => {
        impl Float for $t {
            const BITS: u32 = $bits;

            #[inline]
            fn of(x: f64) -> Self {
                x as $t
            }

            #[inline]
            fn as_f64(self) -> f64 {
                self as f64
            }

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                trans_a: bool,
                b: &[Self],
                trans_b: bool,
                c: &mut [Self],
                accumulate: bool,
            ) {
                assert_eq!(a.len(), m * k, "gemm: lhs length");
                assert_eq!(b.len(), k * n, "gemm: rhs length");
                assert_eq!(c.len(), m * n, "gemm: output length");
                if m == 0 || n == 0 {
                    return;
                }
                if k == 0 {
                    if !accumulate {
                        c.iter_mut().for_each(|v| *v = 0.0);
                    }
                    return;
                }
                let l = gemm_layout(m, k, n, trans_a, trans_b);
                let beta = if accumulate { 1.0 } else { 0.0 };
                // SAFETY: the lengths asserted above bound every index reachable
                // through the computed strides.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        1.0,
                        a.as_ptr(),
                        l.rsa,
                        l.csa,
                        b.as_ptr(),
                        l.rsb,
                        l.csb,
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

impl_float!(f32, 32, matrixmultiply::sgemm);
impl_float!(f64, 64, matrixmultiply::dgemm);

/// Numeric precision selector used by configuration and the CLI.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn from_bits(bits: u32) -> Result<Self> {
        match bits {
            32 => Ok(Precision::F32),
            64 => Ok(Precision::F64),
            other => Err(Error::Config(format!("precision must be 32 or 64, got {other}"))),
        }
    }

    pub fn bits(self) -> u32 {
        match self {
            Precision::F32 => 32,
            Precision::F64 => 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Float> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::shape(
                "tensor",
                &[&shape],
                format!("shape holds {expected} elements, data has {}", data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: T) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn from_f64(shape: &[usize], values: &[f64]) -> Result<Self> {
        Self::new(shape.to_vec(), values.iter().map(|&v| T::of(v)).collect())
    }

    /// Builds a 2-D tensor from equal-length rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Invalid("ragged rows".into()));
        }
        let data = rows.iter().flatten().map(|&v| T::of(v)).collect();
        Self::new(vec![rows.len(), cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
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

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Value of a rank-0 or single-element tensor.
    pub fn item(&self) -> T {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn get(&self, index: &[usize]) -> T {
        debug_assert_eq!(index.len(), self.shape.len());
        let mut flat = 0;
        for (i, (&ix, &extent)) in index.iter().zip(&self.shape).enumerate() {
            assert!(ix < extent, "index {ix} out of bounds for axis {i} of {extent}");
            flat = flat * extent + ix;
        }
        self.data[flat]
    }

    pub fn row(&self, r: usize) -> &[T] {
        let cols = *self.shape.last().unwrap_or(&1);
        &self.data[r * cols..(r + 1) * cols]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::shape(
                "reshape",
                &[&self.shape, shape],
                "element count differs",
            ));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<U: Float>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| U::of(v.as_f64())).collect(),
        }
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.as_f64()).collect()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Splits `shape` around `axis` into (outer, extent, inner) element counts.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}
