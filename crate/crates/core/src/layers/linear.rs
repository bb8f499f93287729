use crate::error::{Error, Result};
use crate::tensor::{gemm, Scalar, Tensor};

/// `y = x W^T + b` for `x: [N, in]`, `W: [out, in]`.
pub(crate) fn linear_forward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
    in_features: usize,
    out_features: usize,
) -> Result<Tensor<T>> {
    if x.rank() != 2 || x.shape()[1] != in_features {
        return Err(Error::Shape(format!(
            "linear expects [N, {in_features}], got {:?}",
            x.shape()
        )));
    }
    let n = x.shape()[0];
    let mut out = Vec::with_capacity(n * out_features);
    for _ in 0..n {
        out.extend_from_slice(b.data());
    }
    gemm(
        n,
        in_features,
        out_features,
        T::one(),
        x.data(),
        in_features,
        1,
        w.data(),
        1,
        in_features,
        T::one(),
        &mut out,
        out_features,
        1,
    );
    Tensor::from_vec(&[n, out_features], out)
}

pub(crate) fn linear_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    grad_out: &Tensor<T>,
    grad_w: &mut Tensor<T>,
    grad_b: &mut Tensor<T>,
) -> Result<Tensor<T>> {
    let (n, fin) = (x.shape()[0], x.shape()[1]);
    let fout = w.shape()[0];
    if grad_out.shape() != [n, fout] {
        return Err(Error::Shape(format!(
            "linear gradient {:?} does not match output [{n}, {fout}]",
            grad_out.shape()
        )));
    }
    // dW += dY^T X
    gemm(fout, n, fin, T::one(), grad_out.data(), 1, fout, x.data(), fin, 1, T::one(), grad_w.data_mut(), fin, 1);
    for row in grad_out.data().chunks(fout) {
        for (gb, &g) in grad_b.data_mut().iter_mut().zip(row) {
            *gb += g;
        }
    }
    // dX = dY W
    let mut dx = vec![T::zero(); n * fin];
    gemm(n, fout, fin, T::one(), grad_out.data(), fout, 1, w.data(), fin, 1, T::zero(), &mut dx, fin, 1);
    Tensor::from_vec(&[n, fin], dx)
}
