//! Dense row-major tensors and a reverse-mode tape.
//!
//! Storage precision is a type parameter: models train in `f32` while
//! gradient checks run the identical code paths in `f64`. Scalar reductions
//! (sums, means, variances, softmax normalizers) always accumulate in `f64`.

mod gradcheck;
mod kernels;
mod tape;

use std::fmt;
use std::sync::Arc;

use num_traits::Float;

use crate::error::{Error, Result};

pub use gradcheck::{finite_diff_check, GradCheckReport, Probe};
pub use tape::{Gradients, Tape, Var};

/// Floating point element type of a [`Tensor`].
pub trait Real:
    Float
    + Default
    + fmt::Debug
    + fmt::Display
    + Send
    + Sync
    + std::ops::AddAssign
    + std::ops::MulAssign
    + std::iter::Sum
    + 'static
{
    fn of(x: f64) -> Self;
    fn f64(self) -> f64;
}

impl Real for f32 {
    #[inline]
    fn of(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    #[inline]
    fn of(x: f64) -> Self {
        x
    }
    #[inline]
    fn f64(self) -> f64 {
        self
    }
}

/// Immutable n-dimensional array. Cloning shares the underlying buffer.
#[derive(Clone, PartialEq)]
pub struct Tensor<R = f32> {
    shape: Vec<usize>,
    data: Arc<[R]>,
}

impl<R: Real> Tensor<R> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<R>) -> Result<Self> {
        let shape = shape.into();
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(Error::Dimension(format!(
                "shape {shape:?} must have positive dimensions"
            )));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Dimension(format!(
                "shape {shape:?} holds {n} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor {
            shape,
            data: data.into(),
        })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![R::zero(); n].into(),
        }
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: R) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; n].into(),
        }
    }

    pub fn scalar(value: R) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value].into(),
        }
    }

    /// A `1 × n` row vector.
    pub fn row(values: Vec<R>) -> Self {
        Tensor {
            shape: vec![1, values.len()],
            data: values.into(),
        }
    }

    pub fn from_f64(shape: impl Into<Vec<usize>>, values: &[f64]) -> Result<Self> {
        Self::new(shape, values.iter().map(|&v| R::of(v)).collect())
    }

    pub fn identity(n: usize) -> Self {
        let mut data = vec![R::zero(); n * n];
        for i in 0..n {
            data[i * n + i] = R::one();
        }
        Tensor {
            shape: vec![n, n],
            data: data.into(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[R] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Rows and columns of a matrix; vectors are treated as a single row.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [n] => Ok((1, n)),
            [m, n] => Ok((m, n)),
            _ => Err(Error::Dimension(format!(
                "expected a matrix, got shape {:?}",
                self.shape
            ))),
        }
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != self.len() || shape.iter().any(|&d| d == 0) {
            return Err(Error::Dimension(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        Ok(Tensor {
            shape,
            data: self.data.clone(),
        })
    }

    pub fn to_vec(&self) -> Vec<R> {
        self.data.to_vec()
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.f64()).collect()
    }

    pub fn cast<S: Real>(&self) -> Tensor<S> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| S::of(v.f64())).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Index of the largest entry; ties go to the lowest index.
    pub fn argmax(&self) -> usize {
        argmax(&self.data)
    }

    /// Plain (untaped) matrix product.
    pub fn matmul(&self, rhs: &Tensor<R>) -> Result<Tensor<R>> {
        let (m, k) = self.dims2()?;
        let (k2, n) = rhs.dims2()?;
        if k != k2 {
            return Err(Error::Dimension(format!(
                "matmul inner dimensions differ: {:?} x {:?}",
                self.shape, rhs.shape
            )));
        }
        let mut out = vec![R::zero(); m * n];
        kernels::matmul(&self.data, &rhs.data, &mut out, m, k, n);
        Tensor::new(vec![m, n], out)
    }

    /// Plain (untaped) softmax along `axis` of a vector or matrix.
    pub fn softmax(&self, axis: usize) -> Result<Tensor<R>> {
        let (m, n) = self.dims2()?;
        let axis = normalize_axis(self.rank(), axis)?;
        let mut out = vec![R::zero(); m * n];
        kernels::softmax(&self.data, &mut out, m, n, axis);
        Ok(Tensor {
            shape: self.shape.clone(),
            data: out.into(),
        })
    }
}

impl<R: Real> fmt::Debug for Tensor<R> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &&self.data[..self.data.len().min(16)])
            .finish()
    }
}

/// Maps a user-facing axis onto the row (0) / column (1) axis of the
/// internal matrix view. Vectors only have axis 0, which runs along columns.
pub(crate) fn normalize_axis(rank: usize, axis: usize) -> Result<usize> {
    match (rank, axis) {
        (1, 0) => Ok(1),
        (2, 0) | (2, 1) => Ok(axis),
        _ => Err(Error::Dimension(format!(
            "axis {axis} out of range for rank {rank}"
        ))),
    }
}

/// Index of the largest finite entry; ties go to the lowest index.
pub fn argmax<R: PartialOrd + Copy>(values: &[R]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Softmax of a slice in `f64`, max-subtracted.
pub fn softmax_f64(values: &[f64]) -> Vec<f64> {
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = values.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// `log(sum(exp(values)))` evaluated stably.
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape.to_vec(), v).unwrap()
    }

    #[test]
    fn identity_matmul() {
        let a = t(&[2, 2], &[1., 2., 3., 4.]);
        assert_eq!(Tensor::identity(2).matmul(&a).unwrap(), a);
    }

    #[test]
    fn selector_row() {
        let r = t(&[1, 2], &[1., 0.]).matmul(&t(&[2, 1], &[2., 5.])).unwrap();
        assert_eq!(r.shape(), &[1, 1]);
        assert_eq!(r.data(), &[2.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a: Vec<f64> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let c = t(&[3, 4], &a).matmul(&t(&[4, 2], &b)).unwrap();
        for i in 0..3 {
            for j in 0..2 {
                let mut s = 0.0;
                for k in 0..4 {
                    s += a[i * 4 + k] * b[k * 2 + j];
                }
                assert!((c.data()[i * 2 + j] - s).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn matmul_shape_mismatch() {
        let err = t(&[2, 3], &[0.; 6]).matmul(&t(&[2, 2], &[0.; 4]));
        assert!(matches!(err, Err(Error::Dimension(_))));
    }

    #[test]
    fn shape_must_match_data() {
        assert!(Tensor::<f32>::new(vec![2, 2], vec![0.0; 3]).is_err());
        assert!(Tensor::<f32>::new(vec![0], vec![]).is_err());
    }

    #[test]
    fn softmax_examples() {
        let s = t(&[2], &[0., 0.]).softmax(0).unwrap();
        assert_eq!(s.data(), &[0.5, 0.5]);
        let s = t(&[2], &[1000., 1000.]).softmax(0).unwrap();
        assert_eq!(s.data(), &[0.5, 0.5]);
        let s = t(&[3], &[1f64.ln(), 2f64.ln(), 3f64.ln()])
            .softmax(0)
            .unwrap();
        for (got, want) in s.data().iter().zip([1. / 6., 2. / 6., 3. / 6.]) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_axis_zero_on_matrix() {
        let s = t(&[2, 2], &[0., 5., 0., 5.]).softmax(0).unwrap();
        assert_eq!(s.data(), &[0.5, 0.5, 0.5, 0.5]);
    }

    #[test]
    fn argmax_ties_lowest() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[2.0, 2.0]), 0);
    }

    #[test]
    fn cast_round_trip() {
        let a = Tensor::<f32>::new(vec![3], vec![0.1, 0.2, 0.3]).unwrap();
        assert_eq!(a.cast::<f64>().cast::<f32>(), a);
    }

    proptest::proptest! {
        #[test]
        fn softmax_sums_to_one(v in proptest::collection::vec(-80.0f32..80.0, 1..40)) {
            let n = v.len();
            let s = Tensor::new(vec![n], v).unwrap().softmax(0).unwrap();
            let sum: f64 = s.data().iter().map(|x| *x as f64).sum();
            proptest::prop_assert!((sum - 1.0).abs() < 1e-6);
            proptest::prop_assert!(s.data().iter().all(|x| *x >= 0.0 && *x <= 1.0));
        }
    }
}
