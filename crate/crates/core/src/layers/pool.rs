use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

fn pool_dims(shape: &[usize]) -> Result<(usize, usize, usize)> {
    if shape.len() < 3 {
        return Err(Error::Shape(format!("global pooling expects [N, C, ...spatial], got {shape:?}")));
    }
    Ok((shape[0], shape[1], shape[2..].iter().product()))
}

/// Per (sample, channel) maximum over all spatial positions; also returns the
/// flat index of the first maximum for routing gradients.
pub(crate) fn global_max_pool<T: Scalar>(x: &Tensor<T>) -> Result<(Tensor<T>, Vec<usize>)> {
    let (n, c, s) = pool_dims(x.shape())?;
    let mut out = Vec::with_capacity(n * c);
    let mut argmax = Vec::with_capacity(n * c);
    for (i, chunk) in x.data().chunks(s).enumerate() {
        let (best, val) = chunk
            .iter()
            .enumerate()
            .fold((0, chunk[0]), |(bi, bv), (j, &v)| {
                // NaN wins so that a broken activation is never masked.
                if v > bv || (v.is_nan() && !bv.is_nan()) {
                    (j, v)
                } else {
                    (bi, bv)
                }
            });
        out.push(val);
        argmax.push(i * s + best);
    }
    Ok((Tensor::from_vec(&[n, c], out)?, argmax))
}

pub(crate) fn global_avg_pool<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, s) = pool_dims(x.shape())?;
    let out = x
        .data()
        .chunks(s)
        .map(|chunk| T::from_f64(chunk.iter().map(|v| v.as_f64()).sum::<f64>() / s as f64))
        .collect();
    Tensor::from_vec(&[n, c], out)
}

fn check_grad<T: Scalar>(in_shape: &[usize], grad_out: &Tensor<T>) -> Result<usize> {
    let (n, c, s) = pool_dims(in_shape)?;
    if grad_out.shape() != [n, c] {
        return Err(Error::Shape(format!(
            "pool gradient {:?} does not match output [{n}, {c}]",
            grad_out.shape()
        )));
    }
    Ok(s)
}

pub(crate) fn global_max_pool_backward<T: Scalar>(
    in_shape: &[usize],
    argmax: &[usize],
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>> {
    check_grad(in_shape, grad_out)?;
    let mut gx = Tensor::zeros(in_shape)?;
    for (&idx, &g) in argmax.iter().zip(grad_out.data()) {
        gx.data_mut()[idx] += g;
    }
    Ok(gx)
}

pub(crate) fn global_avg_pool_backward<T: Scalar>(in_shape: &[usize], grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    let s = check_grad(in_shape, grad_out)?;
    let inv = T::from_f64(1.0 / s as f64);
    let mut gx = Vec::with_capacity(grad_out.len() * s);
    for &g in grad_out.data() {
        gx.extend(std::iter::repeat_n(g * inv, s));
    }
    Tensor::from_vec(in_shape, gx)
}
