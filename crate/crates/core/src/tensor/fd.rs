use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Central-difference gradient of a scalar function at every element of `x`.
///
/// Element `i` of the result is `(f(x + h e_i) - f(x - h e_i)) / 2h`.
pub fn finite_difference_gradient<T, F>(mut f: F, x: &Tensor<T>, h: f64) -> Result<Tensor<T>>
where
    T: Scalar,
    F: FnMut(&Tensor<T>) -> Result<f64>,
{
    let indices: Vec<usize> = (0..x.len()).collect();
    let grads = finite_difference_at(&mut f, x, &indices, h)?;
    Tensor::from_vec(x.shape(), grads.into_iter().map(T::from_f64).collect())
}

/// Central-difference partial derivatives at the selected flat indices only.
pub fn finite_difference_at<T, F>(
    mut f: F,
    x: &Tensor<T>,
    indices: &[usize],
    h: f64,
) -> Result<Vec<f64>>
where
    T: Scalar,
    F: FnMut(&Tensor<T>) -> Result<f64>,
{
    if !(h > 0.0) || !h.is_finite() {
        return Err(Error::Parameter(format!("finite-difference step must be > 0, got {h}")));
    }
    let mut probe = x.clone();
    let mut out = Vec::with_capacity(indices.len());
    for &i in indices {
        if i >= x.len() {
            return Err(Error::Shape(format!("index {i} outside tensor of {} elements", x.len())));
        }
        let orig = probe.data()[i];
        let plus = T::from_f64(orig.as_f64() + h);
        let minus = T::from_f64(orig.as_f64() - h);
        probe.data_mut()[i] = plus;
        let fp = f(&probe)?;
        probe.data_mut()[i] = minus;
        let fm = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::Numeric(format!(
                "function is not finite around element {i} (f+ = {fp}, f- = {fm})"
            )));
        }
        // Divide by the step actually taken after rounding to T.
        let step = plus.as_f64() - minus.as_f64();
        out.push((fp - fm) / step);
    }
    Ok(out)
}
