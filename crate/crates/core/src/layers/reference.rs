//! Direct (loop-nest) convolution kept as the reference for the
//! matrix-multiply path. Slow by construction; used by tests and benchmarks.

use super::conv::Conv3dSpec;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Direct grouped 3D convolution by explicit summation over every output
/// voxel, output channel and kernel tap.
pub fn conv3d_direct<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    spec: &Conv3dSpec,
) -> Result<Tensor<T>> {
    spec.validate()?;
    let s = input.shape();
    if s.len() != 5 || s[1] != spec.in_channels {
        return Err(Error::Shape(format!("conv3d_direct: bad input shape {s:?}")));
    }
    let (n, d, h, w) = (s[0], s[2] as isize, s[3] as isize, s[4] as isize);
    let [od, oh, ow] = spec.output_dims([s[2], s[3], s[4]])?;
    let cin_g = spec.in_channels / spec.groups;
    let cout_g = spec.out_channels / spec.groups;
    let [kd, kh, kw] = spec.kernel;
    let mut out = Tensor::zeros(&[n, spec.out_channels, od, oh, ow])?;
    for b in 0..n {
        for co in 0..spec.out_channels {
            let g = co / cout_g;
            for z in 0..od {
                for y in 0..oh {
                    for x in 0..ow {
                        let mut acc = bias.data()[co].as_f64();
                        for ci in 0..cin_g {
                            for a in 0..kd {
                                for bb in 0..kh {
                                    for e in 0..kw {
                                        let zi = (z * spec.stride[0] + a) as isize - spec.padding[0] as isize;
                                        let yi = (y * spec.stride[1] + bb) as isize - spec.padding[1] as isize;
                                        let xi = (x * spec.stride[2] + e) as isize - spec.padding[2] as isize;
                                        if zi < 0 || yi < 0 || xi < 0 || zi >= d || yi >= h || xi >= w {
                                            continue;
                                        }
                                        let v = input.at(&[b, g * cin_g + ci, zi as usize, yi as usize, xi as usize]);
                                        let wv = weight.at(&[co, ci, a, bb, e]);
                                        acc += v.as_f64() * wv.as_f64();
                                    }
                                }
                            }
                        }
                        out.set(&[b, co, z, y, x], T::from_f64(acc));
                    }
                }
            }
        }
    }
    Ok(out)
}
