//! Dense row-major tensors, the scalar trait shared by the 32-bit training
//! mode and the 64-bit checking mode, and the seeded random source.

use alloc::vec;
use alloc::vec::Vec;
use core::fmt::{Debug, Display};
use core::iter::Sum;

use num_traits::Float;
use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Error, Result};

/// Floating-point element type. `f32` is the training/inference mode,
/// `f64` the gradient-checking mode.
pub trait Real: Float + Default + Debug + Display + Sum + Send + Sync + 'static {
    /// `c = alpha * a * b + beta * c` on strided row-major buffers.
    ///
    /// `a` is `m x k`, `b` is `k x n`, `c` is `m x n`; strides are in elements.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: (&[Self], isize, isize),
        b: (&[Self], isize, isize),
        beta: Self,
        c: (&mut [Self], isize, isize),
    );

    fn of(x: f64) -> Self;

    fn f64(self) -> f64;
}

fn check_extent(len: usize, rows: usize, cols: usize, rs: isize, cs: isize) {
    if rows == 0 || cols == 0 {
        return;
    }
    assert!(rs >= 0 && cs >= 0, "negative strides are not supported");
    let last = (rows - 1) * rs as usize + (cols - 1) * cs as usize;
    assert!(last < len, "gemm operand out of bounds");
}

macro_rules! impl_real {
    ($t:ty, $gemm:path) => {
        impl Real for $t {
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: (&[Self], isize, isize),
                b: (&[Self], isize, isize),
                beta: Self,
                c: (&mut [Self], isize, isize),
            ) {
                check_extent(a.0.len(), m, k, a.1, a.2);
                check_extent(b.0.len(), k, n, b.1, b.2);
                check_extent(c.0.len(), m, n, c.1, c.2);
                if m == 0 || n == 0 {
                    return;
                }
                // SAFETY: every operand extent was bounds-checked above and
                // `c` is exclusively borrowed.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        alpha,
                        a.0.as_ptr(),
                        a.1,
                        a.2,
                        b.0.as_ptr(),
                        b.1,
                        b.2,
                        beta,
                        c.0.as_mut_ptr(),
                        c.1,
                        c.2,
                    );
                }
            }

            #[inline]
            fn of(x: f64) -> Self {
                x as $t
            }

            #[inline]
            fn f64(self) -> f64 {
                self as f64
            }
        }
    };
}

impl_real!(f32, matrixmultiply::sgemm);
impl_real!(f64, matrixmultiply::dgemm);

/// Dense N-dimensional array stored row-major.
#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Debug> Debug for Tensor<T> {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &self.data)
            .finish()
    }
}

/// Pointwise operation selector for [`elementwise`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElementwiseOp {
    Add,
    Sub,
    Mul,
    Scale,
    Neg,
}

/// Right-hand operand of [`elementwise`].
#[derive(Debug, Clone, Copy)]
pub enum Operand<'a, T> {
    Tensor(&'a Tensor<T>),
    Scalar(T),
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(invalid("shape", alloc::format!("{shape:?} has a zero dimension")));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::LengthMismatch {
                left: expected,
                right: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        assert!(shape.iter().all(|&d| d > 0), "zero dimension in {shape:?}");
        let len = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; len],
        }
    }

    pub fn zeros_like(other: &Self) -> Self {
        Self::zeros(&other.shape)
    }

    pub fn ones_like(other: &Self) -> Self {
        Self::ones(&other.shape)
    }

    pub fn from_vec(data: Vec<T>) -> Self {
        assert!(!data.is_empty(), "empty tensor");
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    /// Same data viewed under a new shape with equal element count.
    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        Self::new(shape.to_vec(), self.data)
    }

    /// Row-major flat offset of a multi-index.
    pub fn index(&self, idx: &[usize]) -> Result<usize> {
        row_major_index(&self.shape, idx)
    }

    pub fn get(&self, idx: &[usize]) -> Result<T> {
        Ok(self.data[self.index(idx)?])
    }

    pub fn set(&mut self, idx: &[usize], value: T) -> Result<()> {
        let at = self.index(idx)?;
        self.data[at] = value;
        Ok(())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn fill(&mut self, value: T) {
        self.data.iter_mut().for_each(|x| *x = value);
    }

    /// `self += alpha * other`.
    pub fn axpy(&mut self, alpha: T, other: &Self) -> Result<()> {
        self.same_shape(other)?;
        for (x, &y) in self.data.iter_mut().zip(&other.data) {
            *x = *x + alpha * y;
        }
        Ok(())
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, &x| m.max(x.abs()))
    }

    /// Element-type conversion (e.g. between the 32- and 64-bit modes).
    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| U::of(x.f64())).collect(),
        }
    }

    fn same_shape(&self, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        Ok(())
    }
}

pub fn row_major_index(shape: &[usize], idx: &[usize]) -> Result<usize> {
    if idx.len() != shape.len() {
        return Err(Error::ShapeMismatch {
            left: shape.to_vec(),
            right: idx.to_vec(),
        });
    }
    let mut flat = 0;
    for (&i, &d) in idx.iter().zip(shape) {
        if i >= d {
            return Err(invalid("index", alloc::format!("{idx:?} out of bounds for {shape:?}")));
        }
        flat = flat * d + i;
    }
    Ok(flat)
}

/// Applies `op` pointwise. Binary tensor operands must share a shape; `Neg`
/// ignores its operand.
pub fn elementwise<T: Real>(op: ElementwiseOp, a: &Tensor<T>, b: Operand<'_, T>) -> Result<Tensor<T>> {
    let f: fn(T, T) -> T = match op {
        ElementwiseOp::Add => |x, y| x + y,
        ElementwiseOp::Sub => |x, y| x - y,
        ElementwiseOp::Mul | ElementwiseOp::Scale => |x, y| x * y,
        ElementwiseOp::Neg => |x, _| -x,
    };
    let data = match b {
        Operand::Scalar(s) => a.data.iter().map(|&x| f(x, s)).collect(),
        Operand::Tensor(t) => {
            a.same_shape(t)?;
            a.data.iter().zip(&t.data).map(|(&x, &y)| f(x, y)).collect()
        }
    };
    Ok(Tensor {
        shape: a.shape.clone(),
        data,
    })
}

/// Sum of pairwise products over the flattened elements.
pub fn dot<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<T> {
    dot_slices(a.data(), b.data())
}

pub fn dot_slices<T: Real>(a: &[T], b: &[T]) -> Result<T> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    Ok(dot_unchecked(a, b))
}

#[inline]
pub(crate) fn dot_unchecked<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

/// Seeded deterministic random source.
///
/// The stream is ChaCha8 keyed from the seed through `seed_from_u64`, which is
/// specified bit-for-bit independently of platform. Uniform reals take the top
/// 53 bits of a `u64`; normals use the Box–Muller transform and consume draws
/// in pairs.
#[derive(Debug, Clone)]
pub struct RngState {
    seed: u64,
    inner: ChaCha8Rng,
    spare: Option<f64>,
}

impl RngState {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
            spare: None,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent stream derived from this seed and a tag (epoch number,
    /// probe id, ...). Does not advance `self`.
    pub fn derive(&self, tag: u64) -> Self {
        let mixed =
            self.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).rotate_left(17) ^ tag.wrapping_mul(0xBF58_476D_1CE4_E5B9);
        Self::new(mixed)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in `[lo, hi)`.
    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn shuffle<X>(&mut self, items: &mut [X]) {
        use rand::seq::SliceRandom;
        items.shuffle(&mut self.inner);
    }

    /// One standard normal draw (Box–Muller).
    pub fn standard_normal(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        // u1 in (0, 1] keeps the logarithm finite.
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        let radius = Float::sqrt(-2.0 * Float::ln(u1));
        let angle = 2.0 * core::f64::consts::PI * u2;
        self.spare = Some(radius * Float::sin(angle));
        radius * Float::cos(angle)
    }
}

/// Tensor of independent `Normal(mean, std)` samples.
pub fn normal_sample<T: Real>(rng: &mut RngState, mean: f64, std: f64, shape: &[usize]) -> Result<Tensor<T>> {
    if !std.is_finite() || std <= 0.0 {
        return Err(invalid("std", alloc::format!("must be positive and finite, got {std}")));
    }
    let len = shape.iter().product::<usize>();
    let data = (0..len).map(|_| T::of(mean + std * rng.standard_normal())).collect();
    Tensor::new(shape.to_vec(), data)
}

/// Tensor of independent `Uniform[lo, hi)` samples.
pub fn uniform_sample<T: Real>(rng: &mut RngState, lo: f64, hi: f64, shape: &[usize]) -> Result<Tensor<T>> {
    if hi.is_nan() || lo.is_nan() || hi <= lo {
        return Err(invalid("range", alloc::format!("empty interval [{lo}, {hi})")));
    }
    let len = shape.iter().product::<usize>();
    let data = (0..len).map(|_| T::of(rng.uniform_in(lo, hi))).collect();
    Tensor::new(shape.to_vec(), data)
}
