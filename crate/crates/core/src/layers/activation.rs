use crate::error::{Error, Result};
use crate::tensor::{Rng, Scalar, Tensor};

const INV_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// GELU with the exact Gaussian CDF: `x * Phi(x)`.
pub fn gelu<T: Scalar>(x: T) -> T {
    let v = x.as_f64();
    T::from_f64(v * 0.5 * (1.0 + libm::erf(v * INV_SQRT_2)))
}

pub(crate) fn gelu_derivative<T: Scalar>(x: T) -> T {
    let v = x.as_f64();
    let cdf = 0.5 * (1.0 + libm::erf(v * INV_SQRT_2));
    let pdf = INV_SQRT_2PI * (-0.5 * v * v).exp();
    T::from_f64(cdf + v * pdf)
}

/// Logistic function, kept strictly inside (0, 1) in the element type.
pub fn sigmoid<T: Scalar>(x: T) -> T {
    let v = x.as_f64();
    if v.is_nan() {
        return x;
    }
    let s = if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    };
    let lo = T::min_positive_value();
    let hi = T::one() - T::epsilon() / T::from_f64(2.0);
    T::from_f64(s).max(lo).min(hi)
}

/// Inverted dropout: zero with probability `rate`, scale survivors by
/// `1 / (1 - rate)`. Returns the output and the applied multiplier mask.
pub(crate) fn dropout_forward<T: Scalar>(
    x: &Tensor<T>,
    rate: f64,
    rng: &mut Rng,
) -> Result<(Tensor<T>, Vec<T>)> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Parameter(format!("dropout rate must be in [0, 1), got {rate}")));
    }
    let keep = T::from_f64(1.0 / (1.0 - rate));
    let mask: Vec<T> = (0..x.len())
        .map(|_| if rng.uniform() < rate { T::zero() } else { keep })
        .collect();
    let out = x.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
    Ok((Tensor::from_vec(x.shape(), out)?, mask))
}
