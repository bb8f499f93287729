use super::{BATCHNORM_EPS, BATCHNORM_MOMENTUM, LAYERNORM_EPS};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Which reduction a cached normalization used.
#[derive(Clone, Debug)]
pub(crate) enum NormAxis {
    /// Batch statistics per channel over (N, spatial).
    BatchTraining,
    /// Fixed running statistics (affine map).
    BatchInference,
    /// Statistics over channels per (sample, position).
    Channel,
}

#[derive(Clone, Debug)]
pub(crate) struct NormCache<T: Scalar> {
    axis: NormAxis,
    shape: Vec<usize>,
    xhat: Vec<T>,
    /// Per reduction group: per channel for batch norm, per position for
    /// channel layer norm.
    inv_std: Vec<T>,
}

fn split_shape(shape: &[usize], channels: usize, what: &str) -> Result<(usize, usize)> {
    if shape.len() < 2 || shape[1] != channels {
        return Err(Error::Shape(format!(
            "{what} expects [N, {channels}, ...], got {shape:?}"
        )));
    }
    Ok((shape[0], shape[2..].iter().product()))
}

pub(crate) fn batchnorm_forward<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    running_mean: &mut Tensor<T>,
    running_var: &mut Tensor<T>,
    channels: usize,
    training: bool,
) -> Result<(Tensor<T>, NormCache<T>)> {
    let (n, s) = split_shape(x.shape(), channels, "batchnorm3d")?;
    let m = n * s;
    if training && m < 2 {
        return Err(Error::Numeric(format!(
            "batchnorm3d needs at least 2 values per channel in training mode, got {m}"
        )));
    }
    let data = x.data();
    let mut xhat = vec![T::zero(); data.len()];
    let mut out = vec![T::zero(); data.len()];
    let mut inv_std = Vec::with_capacity(channels);
    let eps = BATCHNORM_EPS;
    for c in 0..channels {
        let (mean, istd) = if training {
            let mut sum = 0.0;
            for b in 0..n {
                let base = (b * channels + c) * s;
                sum += data[base..base + s].iter().map(|v| v.as_f64()).sum::<f64>();
            }
            let mean = sum / m as f64;
            let mut sq = 0.0;
            for b in 0..n {
                let base = (b * channels + c) * s;
                sq += data[base..base + s].iter().map(|v| (v.as_f64() - mean).powi(2)).sum::<f64>();
            }
            let var = sq / m as f64;
            let mom = BATCHNORM_MOMENTUM;
            let unbiased = sq / (m - 1) as f64;
            let rm = &mut running_mean.data_mut()[c];
            *rm = T::from_f64((1.0 - mom) * rm.as_f64() + mom * mean);
            let rv = &mut running_var.data_mut()[c];
            *rv = T::from_f64((1.0 - mom) * rv.as_f64() + mom * unbiased);
            (mean, 1.0 / (var + eps).sqrt())
        } else {
            let mean = running_mean.data()[c].as_f64();
            let var = running_var.data()[c].as_f64();
            (mean, 1.0 / (var + eps).sqrt())
        };
        let g = gamma.data()[c];
        let bt = beta.data()[c];
        let (mean_t, istd_t) = (T::from_f64(mean), T::from_f64(istd));
        for b in 0..n {
            let base = (b * channels + c) * s;
            for i in base..base + s {
                let xh = (data[i] - mean_t) * istd_t;
                xhat[i] = xh;
                out[i] = g * xh + bt;
            }
        }
        inv_std.push(istd_t);
    }
    let axis = if training { NormAxis::BatchTraining } else { NormAxis::BatchInference };
    let cache = NormCache { axis, shape: x.shape().to_vec(), xhat, inv_std };
    Ok((Tensor::from_vec(x.shape(), out)?, cache))
}

/// Normalizes over the channel axis independently at every (sample, position).
pub(crate) fn layernorm_forward<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    channels: usize,
) -> Result<(Tensor<T>, NormCache<T>)> {
    let (n, s) = split_shape(x.shape(), channels, "layernorm_ch")?;
    let data = x.data();
    let mut xhat = vec![T::zero(); data.len()];
    let mut out = vec![T::zero(); data.len()];
    let mut inv_std = Vec::with_capacity(n * s);
    for b in 0..n {
        let base = b * channels * s;
        for p in 0..s {
            let mut mean = 0.0;
            for c in 0..channels {
                mean += data[base + c * s + p].as_f64();
            }
            mean /= channels as f64;
            let mut var = 0.0;
            for c in 0..channels {
                var += (data[base + c * s + p].as_f64() - mean).powi(2);
            }
            var /= channels as f64;
            let istd = 1.0 / (var + LAYERNORM_EPS).sqrt();
            for c in 0..channels {
                let i = base + c * s + p;
                let xh = T::from_f64((data[i].as_f64() - mean) * istd);
                xhat[i] = xh;
                out[i] = gamma.data()[c] * xh + beta.data()[c];
            }
            inv_std.push(T::from_f64(istd));
        }
    }
    let cache = NormCache { axis: NormAxis::Channel, shape: x.shape().to_vec(), xhat, inv_std };
    Ok((Tensor::from_vec(x.shape(), out)?, cache))
}

/// Backward for both normalizations. With `xhat` the normalized input and
/// `dxhat = dy * gamma`, a reduction group of size M gives
/// `dx = inv_std / M * (M * dxhat - sum(dxhat) - xhat * sum(dxhat * xhat))`.
pub(crate) fn norm_backward<T: Scalar>(
    cache: &NormCache<T>,
    gamma: &Tensor<T>,
    grad_out: &Tensor<T>,
    grad_gamma: &mut Tensor<T>,
    grad_beta: &mut Tensor<T>,
) -> Result<Tensor<T>> {
    if grad_out.shape() != cache.shape.as_slice() {
        return Err(Error::Shape(format!(
            "normalization gradient {:?} does not match input {:?}",
            grad_out.shape(),
            cache.shape
        )));
    }
    let channels = cache.shape[1];
    let n = cache.shape[0];
    let s: usize = cache.shape[2..].iter().product();
    let dy = grad_out.data();
    let xhat = &cache.xhat;
    let mut dx = vec![T::zero(); dy.len()];

    for c in 0..channels {
        let (mut dg, mut db) = (0.0, 0.0);
        for b in 0..n {
            let base = (b * channels + c) * s;
            for i in base..base + s {
                dg += dy[i].as_f64() * xhat[i].as_f64();
                db += dy[i].as_f64();
            }
        }
        grad_gamma.data_mut()[c] += T::from_f64(dg);
        grad_beta.data_mut()[c] += T::from_f64(db);
    }

    match cache.axis {
        NormAxis::BatchInference => {
            for c in 0..channels {
                let scale = gamma.data()[c] * cache.inv_std[c];
                for b in 0..n {
                    let base = (b * channels + c) * s;
                    for i in base..base + s {
                        dx[i] = dy[i] * scale;
                    }
                }
            }
        }
        NormAxis::BatchTraining => {
            let m = (n * s) as f64;
            for c in 0..channels {
                let g = gamma.data()[c].as_f64();
                let (mut sum_d, mut sum_dx) = (0.0, 0.0);
                for b in 0..n {
                    let base = (b * channels + c) * s;
                    for i in base..base + s {
                        let d = dy[i].as_f64() * g;
                        sum_d += d;
                        sum_dx += d * xhat[i].as_f64();
                    }
                }
                let istd = cache.inv_std[c].as_f64();
                for b in 0..n {
                    let base = (b * channels + c) * s;
                    for i in base..base + s {
                        let d = dy[i].as_f64() * g;
                        dx[i] = T::from_f64(istd / m * (m * d - sum_d - xhat[i].as_f64() * sum_dx));
                    }
                }
            }
        }
        NormAxis::Channel => {
            let m = channels as f64;
            for b in 0..n {
                let base = b * channels * s;
                for p in 0..s {
                    let (mut sum_d, mut sum_dx) = (0.0, 0.0);
                    for c in 0..channels {
                        let i = base + c * s + p;
                        let d = dy[i].as_f64() * gamma.data()[c].as_f64();
                        sum_d += d;
                        sum_dx += d * xhat[i].as_f64();
                    }
                    let istd = cache.inv_std[b * s + p].as_f64();
                    for c in 0..channels {
                        let i = base + c * s + p;
                        let d = dy[i].as_f64() * gamma.data()[c].as_f64();
                        dx[i] = T::from_f64(istd / m * (m * d - sum_d - xhat[i].as_f64() * sum_dx));
                    }
                }
            }
        }
    }
    Tensor::from_vec(&cache.shape, dx)
}
