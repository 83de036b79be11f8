//! Dense tensors and reverse-mode autodiff.
//!
//! [`Tensor`] is a value-like n-dimensional array (cheap to clone, copy on
//! write). Differentiable computations are recorded on a [`Tape`]; calling
//! [`Tape::backward`] on a scalar result populates gradients for every leaf
//! that was registered with `requires_grad`.
//!
//! Element type is generic over [`Scalar`]: tests and gradient checks run in
//! f64, training uses f32.

mod gradcheck;
mod ops;
mod tape;

pub use gradcheck::{grad_check, GradCheckReport};
pub use tape::{Gradients, Tape, Var};

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::rng::RngState;

/// Element types the tensor stack can compute with.
pub trait Scalar:
    Copy
    + PartialOrd
    + std::fmt::Debug
    + std::ops::Add<Output = Self>
    + std::ops::Sub<Output = Self>
    + std::ops::Mul<Output = Self>
    + std::ops::Div<Output = Self>
    + std::ops::Neg<Output = Self>
    + std::ops::AddAssign
    + Send
    + Sync
    + 'static
{
    const ZERO: Self;
    const ONE: Self;

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;

    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn tanh(self) -> Self;
    fn max(self, other: Self) -> Self;
    fn is_finite(self) -> bool;

    /// C = op(A) * op(B) with row-major buffers; `ta`/`tb` transpose the
    /// logical operands without copying. A is (m,k) after op, B is (k,n)
    /// after op, C is (m,n). C is overwritten.
    fn gemm(m: usize, k: usize, n: usize, a: &[Self], ta: bool, b: &[Self], tb: bool, c: &mut [Self]);
}

macro_rules! impl_scalar {
    ($t:ty, $gemm:path) => {
        impl Scalar for $t {
            const ZERO: Self = 0.0;
            const ONE: Self = 1.0;

            fn from_f64(v: f64) -> Self {
                v as $t
            }
            fn to_f64(self) -> f64 {
                self as f64
            }
            fn exp(self) -> Self {
                self.exp()
            }
            fn ln(self) -> Self {
                self.ln()
            }
            fn sqrt(self) -> Self {
                self.sqrt()
            }
            fn tanh(self) -> Self {
                self.tanh()
            }
            fn max(self, other: Self) -> Self {
                if self > other {
                    self
                } else {
                    other
                }
            }
            fn is_finite(self) -> bool {
                <$t>::is_finite(self)
            }

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                ta: bool,
                b: &[Self],
                tb: bool,
                c: &mut [Self],
            ) {
                assert_eq!(a.len(), m * k, "gemm: lhs buffer size");
                assert_eq!(b.len(), k * n, "gemm: rhs buffer size");
                assert_eq!(c.len(), m * n, "gemm: out buffer size");
                // Row-major strides; a transposed operand swaps them.
                let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
                let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
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
                        0.0,
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

/// Dense n-dimensional array with shared, copy-on-write storage.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<S: Scalar> {
    shape: Vec<usize>,
    data: Arc<Vec<S>>,
}

impl<S: Scalar> Tensor<S> {
    pub fn from_vec(shape: Vec<usize>, data: Vec<S>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(
                "from_vec",
                &shape,
                format!("shape wants {numel} elements, data has {}", data.len()),
            ));
        }
        Ok(Tensor {
            shape,
            data: Arc::new(data),
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: Arc::new(vec![S::ZERO; numel]),
        }
    }

    pub fn full(shape: Vec<usize>, value: S) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: Arc::new(vec![value; numel]),
        }
    }

    pub fn scalar(value: S) -> Self {
        Tensor {
            shape: vec![],
            data: Arc::new(vec![value]),
        }
    }

    /// Truncated-normal fill (std `std`, clipped at two standard deviations).
    pub fn trunc_normal(shape: Vec<usize>, std: f64, rng: &mut RngState) -> Self {
        let numel: usize = shape.iter().product();
        let data = (0..numel)
            .map(|_| S::from_f64(rng.trunc_normal(std)))
            .collect();
        Tensor {
            shape,
            data: Arc::new(data),
        }
    }

    /// Uniform fill over [lo, hi).
    pub fn uniform(shape: Vec<usize>, lo: f64, hi: f64, rng: &mut RngState) -> Self {
        let numel: usize = shape.iter().product();
        let data = (0..numel)
            .map(|_| S::from_f64(rng.uniform(lo, hi)))
            .collect();
        Tensor {
            shape,
            data: Arc::new(data),
        }
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

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn scalar_value(&self) -> Result<S> {
        if !self.is_scalar() {
            return Err(Error::shape("scalar_value", &self.shape, "expected scalar"));
        }
        Ok(self.data[0])
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(items: &[Tensor<S>]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::Input("cannot stack an empty tensor list".to_string()))?;
        let mut data = Vec::with_capacity(items.len() * first.numel());
        for item in items {
            if item.shape != first.shape {
                return Err(Error::dim("stack", &first.shape, &item.shape));
            }
            data.extend_from_slice(&item.data);
        }
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&first.shape);
        Tensor::from_vec(shape, data)
    }

    pub fn reshaped(&self, shape: Vec<usize>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.numel() {
            return Err(Error::dim("reshape", &self.shape, &shape));
        }
        Ok(Tensor {
            shape,
            data: Arc::clone(&self.data),
        })
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::new(self.data.iter().map(|&x| f(x)).collect()),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Elementwise addition of same-shape tensors, in place.
    pub fn add_assign(&mut self, other: &Tensor<S>) {
        debug_assert_eq!(self.shape, other.shape);
        let dst = self.data_mut();
        for (d, &s) in dst.iter_mut().zip(other.data.iter()) {
            *d += s;
        }
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|x| x.to_f64()).collect()
    }

    /// Row `i` of a rank-2 tensor.
    pub fn row(&self, i: usize) -> &[S] {
        assert_eq!(self.rank(), 2);
        let n = self.shape[1];
        &self.data[i * n..(i + 1) * n]
    }

    /// Max |a - b| across elements; shapes must match.
    pub fn max_abs_diff(&self, other: &Tensor<S>) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(&a, &b)| (a.to_f64() - b.to_f64()).abs())
            .fold(0.0, f64::max)
    }
}

/// Broadcast two shapes by trailing-dimension alignment: dimensions are
/// matched from the right, and each pair must be equal or contain a 1.
pub(crate) fn broadcast_shapes(op: &'static str, l: &[usize], r: &[usize]) -> Result<Vec<usize>> {
    let rank = l.len().max(r.len());
    let mut out = vec![0usize; rank];
    for i in 0..rank {
        let ld = if i < rank - l.len() { 1 } else { l[i - (rank - l.len())] };
        let rd = if i < rank - r.len() { 1 } else { r[i - (rank - r.len())] };
        if ld == rd || ld == 1 || rd == 1 {
            out[i] = ld.max(rd);
        } else {
            return Err(Error::dim(op, l, r));
        }
    }
    Ok(out)
}

/// Whether `inner`'s shape is a trailing suffix of `outer` (the fast,
/// contiguous broadcast case: inner repeats whole).
pub(crate) fn is_suffix(outer: &[usize], inner: &[usize]) -> bool {
    inner.len() <= outer.len() && outer[outer.len() - inner.len()..] == *inner
}

/// Apply `f` elementwise under trailing-dim broadcasting.
pub(crate) fn binary_op<S: Scalar>(
    op: &'static str,
    l: &Tensor<S>,
    r: &Tensor<S>,
    f: impl Fn(S, S) -> S,
) -> Result<Tensor<S>> {
    if l.shape == r.shape {
        let data = l
            .data
            .iter()
            .zip(r.data.iter())
            .map(|(&a, &b)| f(a, b))
            .collect();
        return Ok(Tensor {
            shape: l.shape.clone(),
            data: Arc::new(data),
        });
    }
    let out_shape = broadcast_shapes(op, &l.shape, &r.shape)?;
    // Contiguous fast paths: one side repeats whole.
    if out_shape == l.shape && is_suffix(&l.shape, &r.shape) {
        let rn = r.numel().max(1);
        let data = l
            .data
            .iter()
            .enumerate()
            .map(|(i, &a)| f(a, r.data[i % rn]))
            .collect();
        return Ok(Tensor {
            shape: out_shape,
            data: Arc::new(data),
        });
    }
    if out_shape == r.shape && is_suffix(&r.shape, &l.shape) {
        let ln = l.numel().max(1);
        let data = r
            .data
            .iter()
            .enumerate()
            .map(|(i, &b)| f(l.data[i % ln], b))
            .collect();
        return Ok(Tensor {
            shape: out_shape,
            data: Arc::new(data),
        });
    }
    // General case: odometer over the output index space.
    let rank = out_shape.len();
    let numel: usize = out_shape.iter().product();
    let stride_for = |shape: &[usize]| -> Vec<usize> {
        // Stride in the padded coordinate space; 0 where the dim broadcasts.
        let pad = rank - shape.len();
        let mut strides = vec![0usize; rank];
        let mut acc = 1usize;
        for i in (0..shape.len()).rev() {
            strides[pad + i] = if shape[i] == 1 { 0 } else { acc };
            acc *= shape[i];
        }
        strides
    };
    let ls = stride_for(&l.shape);
    let rs = stride_for(&r.shape);
    let mut idx = vec![0usize; rank];
    let mut lo = 0usize;
    let mut ro = 0usize;
    let mut data = Vec::with_capacity(numel);
    for _ in 0..numel {
        data.push(f(l.data[lo], r.data[ro]));
        for d in (0..rank).rev() {
            idx[d] += 1;
            lo += ls[d];
            ro += rs[d];
            if idx[d] < out_shape[d] {
                break;
            }
            lo -= ls[d] * out_shape[d];
            ro -= rs[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    Ok(Tensor {
        shape: out_shape,
        data: Arc::new(data),
    })
}

/// Sum `grad` down to `target` shape (undo broadcasting).
pub(crate) fn reduce_to_shape<S: Scalar>(grad: &Tensor<S>, target: &[usize]) -> Tensor<S> {
    if grad.shape() == target {
        return grad.clone();
    }
    let tn: usize = target.iter().product();
    if is_suffix(grad.shape(), target) {
        // Fold contiguous repetitions.
        let mut out = vec![S::ZERO; tn];
        for chunk in grad.data.chunks(tn.max(1)) {
            for (o, &g) in out.iter_mut().zip(chunk.iter()) {
                *o += g;
            }
        }
        return Tensor {
            shape: target.to_vec(),
            data: Arc::new(out),
        };
    }
    // General case: accumulate via odometer with 0-strides on broadcast dims.
    let rank = grad.rank();
    let pad = rank - target.len();
    let mut strides = vec![0usize; rank];
    let mut acc = 1usize;
    for i in (0..target.len()).rev() {
        strides[pad + i] = if target[i] == 1 { 0 } else { acc };
        acc *= target[i];
    }
    let mut out = vec![S::ZERO; tn];
    let mut idx = vec![0usize; rank];
    let mut to = 0usize;
    for &g in grad.data.iter() {
        out[to] += g;
        for d in (0..rank).rev() {
            idx[d] += 1;
            to += strides[d];
            if idx[d] < grad.shape[d] {
                break;
            }
            to -= strides[d] * grad.shape[d];
            idx[d] = 0;
        }
    }
    Tensor {
        shape: target.to_vec(),
        data: Arc::new(out),
    }
}
