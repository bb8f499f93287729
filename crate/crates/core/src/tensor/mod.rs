//! Dense row-major tensors, a seeded counter-based generator and the
//! finite-difference gradient oracle.

mod fd;
mod rng;
mod scalar;

pub use fd::{finite_difference_at, finite_difference_gradient};
pub use rng::{streams, Rng};
pub use scalar::{gemm, DType, Scalar};

use crate::error::{Error, Result};

/// Dense N-dimensional array stored contiguously in row-major order.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T: Scalar = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() {
        return Err(Error::Shape("tensor shape must have at least one dimension".into()));
    }
    if let Some(pos) = shape.iter().position(|&d| d == 0) {
        return Err(Error::Shape(format!("dimension {pos} of shape {shape:?} is zero")));
    }
    shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::Shape(format!("element count of {shape:?} overflows")))
}

impl<T: Scalar> Tensor<T> {
    /// Tensor of the given shape with every element equal to `fill`.
    pub fn new(shape: &[usize], fill: T) -> Result<Self> {
        let n = check_shape(shape)?;
        Ok(Tensor { shape: shape.to_vec(), data: vec![fill; n] })
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::new(shape, T::zero())
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let n = check_shape(shape)?;
        if n != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {n} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape: shape.to_vec(), data })
    }

    /// Samples every element from Normal(mean, std^2) with `rng`.
    pub fn rand_normal(shape: &[usize], mean: f64, std: f64, rng: &mut Rng) -> Result<Self> {
        if !(std >= 0.0) || !std.is_finite() {
            return Err(Error::Parameter(format!("standard deviation must be >= 0, got {std}")));
        }
        let n = check_shape(shape)?;
        let data = (0..n).map(|_| T::from_f64(mean + std * rng.normal())).collect();
        Ok(Tensor { shape: shape.to_vec(), data })
    }

    /// Samples every element uniformly from [lo, hi).
    pub fn rand_uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut Rng) -> Result<Self> {
        if !(hi >= lo) {
            return Err(Error::Parameter(format!("uniform range [{lo}, {hi}) is empty")));
        }
        let n = check_shape(shape)?;
        let data = (0..n).map(|_| T::from_f64(lo + (hi - lo) * rng.uniform())).collect();
        Ok(Tensor { shape: shape.to_vec(), data })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
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

    pub fn dtype(&self) -> DType {
        T::DTYPE
    }

    fn offset(&self, index: &[usize]) -> usize {
        assert_eq!(index.len(), self.shape.len(), "index rank does not match tensor rank");
        index.iter().zip(&self.shape).fold(0, |acc, (&i, &d)| {
            assert!(i < d, "index {index:?} out of bounds for shape {:?}", self.shape);
            acc * d + i
        })
    }

    /// Element at a multi-index. Panics when out of bounds.
    pub fn at(&self, index: &[usize]) -> T {
        self.data[self.offset(index)]
    }

    pub fn set(&mut self, index: &[usize], value: T) {
        let off = self.offset(index);
        self.data[off] = value;
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n = check_shape(shape)?;
        if n != self.data.len() {
            return Err(Error::Shape(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&x| f(x)).collect() }
    }

    fn zip_with(&self, other: &Self, op: &str, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::Shape(format!(
                "{op}: shapes {:?} and {:?} differ",
                self.shape, other.shape
            )));
        }
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(Tensor { shape: self.shape.clone(), data })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "mul", |a, b| a * b)
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::Shape(format!(
                "add_assign: shapes {:?} and {:?} differ",
                self.shape, other.shape
            )));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale(&self, factor: T) -> Self {
        self.map(|x| x * factor)
    }

    pub fn fill(&mut self, value: T) {
        self.data.iter_mut().for_each(|x| *x = value);
    }

    /// Sum accumulated in f64.
    pub fn sum(&self) -> f64 {
        self.data.iter().map(|x| x.as_f64()).sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Largest absolute elementwise difference; `None` on shape mismatch.
    pub fn max_abs_diff(&self, other: &Self) -> Option<f64> {
        if self.shape != other.shape {
            return None;
        }
        Some(
            self.data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
                .fold(0.0, f64::max),
        )
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|x| U::from_f64(x.as_f64())).collect(),
        }
    }

    /// Standard matrix product of two rank-2 tensors.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        if self.rank() != 2 || other.rank() != 2 {
            return Err(Error::Shape(format!(
                "matmul needs rank-2 operands, got {:?} and {:?}",
                self.shape, other.shape
            )));
        }
        let (m, k) = (self.shape[0], self.shape[1]);
        let (k2, n) = (other.shape[0], other.shape[1]);
        if k != k2 {
            return Err(Error::Shape(format!(
                "matmul inner dimensions differ: {:?} x {:?}",
                self.shape, other.shape
            )));
        }
        let mut out = vec![T::zero(); m * n];
        gemm(m, k, n, T::one(), &self.data, k, 1, &other.data, n, 1, T::zero(), &mut out, n, 1);
        Tensor::from_vec(&[m, n], out)
    }

    /// Transpose of a rank-2 tensor.
    pub fn transpose(&self) -> Result<Self> {
        if self.rank() != 2 {
            return Err(Error::Shape(format!("transpose needs rank 2, got {:?}", self.shape)));
        }
        let (r, c) = (self.shape[0], self.shape[1]);
        let mut out = Vec::with_capacity(r * c);
        for j in 0..c {
            for i in 0..r {
                out.push(self.data[i * c + j]);
            }
        }
        Tensor::from_vec(&[c, r], out)
    }

    /// Copy of item `i` along the leading axis, with that axis dropped.
    pub fn index_axis0(&self, i: usize) -> Result<Self> {
        if i >= self.shape[0] || self.rank() < 2 {
            return Err(Error::Shape(format!(
                "cannot take item {i} of leading axis for shape {:?}",
                self.shape
            )));
        }
        let stride = self.data.len() / self.shape[0];
        Tensor::from_vec(&self.shape[1..], self.data[i * stride..(i + 1) * stride].to_vec())
    }

    /// Stacks equally-shaped tensors along a new leading axis.
    pub fn stack(items: &[&Self]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::Shape("cannot stack an empty list".into()))?;
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&first.shape);
        let mut data = Vec::with_capacity(first.len() * items.len());
        for t in items {
            if t.shape != first.shape {
                return Err(Error::Shape(format!(
                    "cannot stack shapes {:?} and {:?}",
                    first.shape, t.shape
                )));
            }
            data.extend_from_slice(&t.data);
        }
        Tensor::from_vec(&shape, data)
    }
}

/// Output length of a strided, zero-padded window along one axis, or `None`
/// when the padded input is shorter than the kernel.
pub fn conv_output_len(n: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = n + 2 * padding;
    if stride == 0 || kernel == 0 || padded < kernel {
        None
    } else {
        Some((padded - kernel) / stride + 1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_fills_and_rejects_bad_shapes() {
        let t = Tensor::<f32>::new(&[2, 3], 0.0).unwrap();
        assert_eq!(t.data(), &[0.0; 6]);
        let s = Tensor::<f64>::new(&[1], 7.5).unwrap();
        assert_eq!(s.data(), &[7.5]);
        assert!(matches!(Tensor::<f32>::new(&[], 1.0), Err(Error::Shape(_))));
        assert!(matches!(Tensor::<f32>::new(&[3, 0, 2], 1.0), Err(Error::Shape(_))));
    }

    #[test]
    fn full_volume_element_count() {
        let t = Tensor::<f32>::new(&[3, 149, 149, 32], 0.0).unwrap();
        assert_eq!(t.len(), 2_131_296);
    }

    #[test]
    fn rand_normal_degenerate_and_deterministic() {
        let mut rng = Rng::new(1, 2);
        let t = Tensor::<f64>::rand_normal(&[50], 3.25, 0.0, &mut rng).unwrap();
        assert!(t.data().iter().all(|&x| x == 3.25));

        let a = Tensor::<f32>::rand_normal(&[64], 0.0, 1.0, &mut Rng::new(9, 4)).unwrap();
        let b = Tensor::<f32>::rand_normal(&[64], 0.0, 1.0, &mut Rng::new(9, 4)).unwrap();
        assert_eq!(a, b);
        assert!(Tensor::<f32>::rand_normal(&[4], 0.0, -1.0, &mut rng).is_err());
    }

    #[test]
    fn rand_normal_sample_statistics() {
        let mut rng = Rng::new(2024, 0);
        let t = Tensor::<f64>::rand_normal(&[100_000], 0.0, 1.0, &mut rng).unwrap();
        let mean = t.mean();
        let var = t.data().iter().map(|x| (x - mean).powi(2)).sum::<f64>() / t.len() as f64;
        assert!(mean.abs() < 0.02, "mean {mean}");
        assert!((var.sqrt() - 1.0).abs() < 0.02, "std {}", var.sqrt());
    }

    #[test]
    fn matmul_hand_example() {
        let a = Tensor::<f64>::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::<f64>::from_vec(&[2, 1], vec![5.0, 6.0]).unwrap();
        assert_eq!(a.matmul(&b).unwrap().data(), &[17.0, 39.0]);
    }

    #[test]
    fn matmul_identity_and_zero() {
        let mut rng = Rng::new(5, 5);
        let x = Tensor::<f32>::rand_normal(&[4, 4], 0.0, 1.0, &mut rng).unwrap();
        let mut eye = Tensor::<f32>::zeros(&[4, 4]).unwrap();
        for i in 0..4 {
            eye.set(&[i, i], 1.0);
        }
        assert_eq!(eye.matmul(&x).unwrap(), x);
        let z = Tensor::<f32>::zeros(&[4, 4]).unwrap();
        assert!(z.matmul(&x).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matmul_rejects_mismatch() {
        let a = Tensor::<f32>::zeros(&[2, 3]).unwrap();
        let b = Tensor::<f32>::zeros(&[2, 3]).unwrap();
        assert!(matches!(a.matmul(&b), Err(Error::Shape(_))));
    }

    #[test]
    fn conv_output_len_formula() {
        assert_eq!(conv_output_len(32, 3, 2, 1), Some(16));
        assert_eq!(conv_output_len(149, 3, 2, 1), Some(75));
        assert_eq!(conv_output_len(2, 3, 1, 0), None);
    }
}
