//! 3D convolution lowered to matrix multiplication (im2col / col2im).
//!
//! For every sample and group the receptive fields of a block of output
//! depth planes are unrolled into a `[K, P]` column matrix, with
//! `K = C_in/groups * kd * kh * kw` and `P` the number of output positions in
//! the block. The block size bounds the scratch buffer so large volumes do
//! not materialize the full column matrix.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{conv_output_len, gemm, Scalar, Tensor};

/// Upper bound on elements in one column-matrix block.
const COL_BLOCK_ELEMS: usize = 1 << 20;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Conv3dSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    /// Kernel extent along (D, H, W).
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub padding: [usize; 3],
    #[serde(default = "one")]
    pub groups: usize,
}

fn one() -> usize {
    1
}

impl Conv3dSpec {
    /// Cubic kernel with uniform stride and padding, no grouping.
    pub fn cubic(in_channels: usize, out_channels: usize, k: usize, stride: usize, padding: usize) -> Self {
        Conv3dSpec {
            in_channels,
            out_channels,
            kernel: [k; 3],
            stride: [stride; 3],
            padding: [padding; 3],
            groups: 1,
        }
    }

    pub fn with_groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 || self.groups == 0 {
            return Err(Error::Config(format!("conv3d channels and groups must be positive: {self:?}")));
        }
        if !self.in_channels.is_multiple_of(self.groups) || !self.out_channels.is_multiple_of(self.groups) {
            return Err(Error::Config(format!(
                "conv3d channels ({} -> {}) must be divisible by groups ({})",
                self.in_channels, self.out_channels, self.groups
            )));
        }
        if self.kernel.contains(&0) || self.stride.contains(&0) {
            return Err(Error::Config(format!("conv3d kernel and stride must be >= 1: {self:?}")));
        }
        Ok(())
    }

    /// Output spatial dims for the given input spatial dims.
    pub fn output_dims(&self, dims: [usize; 3]) -> Result<[usize; 3]> {
        let mut out = [0; 3];
        for axis in 0..3 {
            out[axis] = conv_output_len(dims[axis], self.kernel[axis], self.stride[axis], self.padding[axis])
                .ok_or_else(|| {
                    Error::Shape(format!(
                        "conv3d output collapses on axis {axis}: input {} with kernel {}, padding {}",
                        dims[axis], self.kernel[axis], self.padding[axis]
                    ))
                })?;
        }
        Ok(out)
    }

    fn patch_len(&self) -> usize {
        (self.in_channels / self.groups) * self.kernel.iter().product::<usize>()
    }
}

/// Validated geometry of one convolution call.
struct Geometry {
    n: usize,
    in_dims: [usize; 3],
    out_dims: [usize; 3],
    cin_g: usize,
    cout_g: usize,
    k: usize,
}

impl Geometry {
    fn new(input_shape: &[usize], spec: &Conv3dSpec) -> Result<Self> {
        spec.validate()?;
        if input_shape.len() != 5 {
            return Err(Error::Shape(format!("conv3d expects [N,C,D,H,W], got {input_shape:?}")));
        }
        if input_shape[1] != spec.in_channels {
            return Err(Error::Shape(format!(
                "conv3d expects {} input channels, got {}",
                spec.in_channels, input_shape[1]
            )));
        }
        let in_dims = [input_shape[2], input_shape[3], input_shape[4]];
        let out_dims = spec.output_dims(in_dims)?;
        Ok(Geometry {
            n: input_shape[0],
            in_dims,
            out_dims,
            cin_g: spec.in_channels / spec.groups,
            cout_g: spec.out_channels / spec.groups,
            k: spec.patch_len(),
        })
    }

    fn in_volume(&self) -> usize {
        self.in_dims.iter().product()
    }

    fn out_plane(&self) -> usize {
        self.out_dims[1] * self.out_dims[2]
    }

    fn out_volume(&self) -> usize {
        self.out_dims.iter().product()
    }

    /// Number of output depth planes per column block.
    fn planes_per_block(&self) -> usize {
        let per_plane = self.k * self.out_plane();
        (COL_BLOCK_ELEMS / per_plane.max(1)).clamp(1, self.out_dims[0])
    }
}

/// Valid output-index range `[lo, hi)` along one axis for kernel offset `off`:
/// positions whose input coordinate `o * stride + off - pad` lies in `[0, n)`.
fn valid_range(out_len: usize, n: usize, stride: usize, off: usize, pad: usize) -> (usize, usize) {
    // o * stride + off >= pad  and  o * stride + off < n + pad
    let lo = if off >= pad { 0 } else { (pad - off).div_ceil(stride) };
    let hi = if n + pad > off { ((n + pad - off - 1) / stride + 1).min(out_len) } else { 0 };
    (lo.min(hi), hi)
}

/// Unrolls output planes `[od0, od1)` of one (sample, group) into `col`.
fn im2col<T: Scalar>(
    x: &[T],
    spec: &Conv3dSpec,
    geo: &Geometry,
    od0: usize,
    od1: usize,
    col: &mut [T],
) {
    let [kd, kh, kw] = spec.kernel;
    let [sd, sh, sw] = spec.stride;
    let [pd, ph, pw] = spec.padding;
    let [id, ih, iw] = geo.in_dims;
    let [_, oh, ow] = geo.out_dims;
    let cols = (od1 - od0) * oh * ow;
    let mut row = 0;
    for c in 0..geo.cin_g {
        let xc = &x[c * geo.in_volume()..(c + 1) * geo.in_volume()];
        for a in 0..kd {
            let (dlo, dhi) = valid_range(geo.out_dims[0], id, sd, a, pd);
            for b in 0..kh {
                let (hlo, hhi) = valid_range(oh, ih, sh, b, ph);
                for e in 0..kw {
                    let (wlo, whi) = valid_range(ow, iw, sw, e, pw);
                    let dst = &mut col[row * cols..(row + 1) * cols];
                    dst.fill(T::zero());
                    for od in od0.max(dlo)..od1.min(dhi) {
                        let zi = od * sd + a - pd;
                        for ohi in hlo..hhi {
                            let yi = ohi * sh + b - ph;
                            let src_row = &xc[(zi * ih + yi) * iw..(zi * ih + yi + 1) * iw];
                            let base = (od - od0) * oh * ow + ohi * ow;
                            if sw == 1 {
                                let xs = wlo + e - pw;
                                dst[base + wlo..base + whi].copy_from_slice(&src_row[xs..xs + (whi - wlo)]);
                            } else {
                                for owi in wlo..whi {
                                    dst[base + owi] = src_row[owi * sw + e - pw];
                                }
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Scatter-adds a column-matrix block back onto input positions.
fn col2im<T: Scalar>(
    col: &[T],
    spec: &Conv3dSpec,
    geo: &Geometry,
    od0: usize,
    od1: usize,
    gx: &mut [T],
) {
    let [kd, kh, kw] = spec.kernel;
    let [sd, sh, sw] = spec.stride;
    let [pd, ph, pw] = spec.padding;
    let [id, ih, iw] = geo.in_dims;
    let [_, oh, ow] = geo.out_dims;
    let cols = (od1 - od0) * oh * ow;
    let mut row = 0;
    for c in 0..geo.cin_g {
        let vol = geo.in_volume();
        let gc = &mut gx[c * vol..(c + 1) * vol];
        for a in 0..kd {
            let (dlo, dhi) = valid_range(geo.out_dims[0], id, sd, a, pd);
            for b in 0..kh {
                let (hlo, hhi) = valid_range(oh, ih, sh, b, ph);
                for e in 0..kw {
                    let (wlo, whi) = valid_range(ow, iw, sw, e, pw);
                    let src = &col[row * cols..(row + 1) * cols];
                    for od in od0.max(dlo)..od1.min(dhi) {
                        let zi = od * sd + a - pd;
                        for ohi in hlo..hhi {
                            let yi = ohi * sh + b - ph;
                            let dst_row = &mut gc[(zi * ih + yi) * iw..(zi * ih + yi + 1) * iw];
                            let base = (od - od0) * oh * ow + ohi * ow;
                            for owi in wlo..whi {
                                dst_row[owi * sw + e - pw] += src[base + owi];
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Grouped, strided, zero-padded 3D convolution plus per-channel bias.
///
/// `weight` has shape `[C_out, C_in/groups, kd, kh, kw]`, `bias` `[C_out]`.
/// Output spatial size per axis is `floor((n + 2p - k) / s) + 1`.
pub fn conv3d_forward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    spec: &Conv3dSpec,
) -> Result<Tensor<T>> {
    let geo = Geometry::new(input.shape(), spec)?;
    let c_out = spec.out_channels;
    let wshape = [c_out, geo.cin_g, spec.kernel[0], spec.kernel[1], spec.kernel[2]];
    if weight.shape() != wshape || bias.shape() != [c_out] {
        return Err(Error::Shape(format!(
            "conv3d parameters {:?}/{:?} do not match spec {wshape:?}",
            weight.shape(),
            bias.shape()
        )));
    }
    let p_total = geo.out_volume();
    let in_sample = spec.in_channels * geo.in_volume();
    let mut out = vec![T::zero(); geo.n * c_out * p_total];
    let block = geo.planes_per_block();
    let mut col = vec![T::zero(); geo.k * block * geo.out_plane()];
    let x = input.data();
    let w = weight.data();

    for n in 0..geo.n {
        for g in 0..spec.groups {
            let xg = &x[n * in_sample + g * geo.cin_g * geo.in_volume()..];
            let wg = &w[g * geo.cout_g * geo.k..(g + 1) * geo.cout_g * geo.k];
            let out_g = &mut out[(n * c_out + g * geo.cout_g) * p_total..(n * c_out + (g + 1) * geo.cout_g) * p_total];
            let mut od0 = 0;
            while od0 < geo.out_dims[0] {
                let od1 = (od0 + block).min(geo.out_dims[0]);
                let cols = (od1 - od0) * geo.out_plane();
                im2col(xg, spec, &geo, od0, od1, &mut col[..geo.k * cols]);
                let off = od0 * geo.out_plane();
                gemm(
                    geo.cout_g,
                    geo.k,
                    cols,
                    T::one(),
                    wg,
                    geo.k,
                    1,
                    &col[..geo.k * cols],
                    cols,
                    1,
                    T::zero(),
                    &mut out_g[off..],
                    p_total,
                    1,
                );
                od0 = od1;
            }
            for (co, chunk) in out_g.chunks_mut(p_total).enumerate() {
                let b = bias.data()[g * geo.cout_g + co];
                chunk.iter_mut().for_each(|v| *v += b);
            }
        }
    }
    let [od, oh, ow] = geo.out_dims;
    Tensor::from_vec(&[geo.n, c_out, od, oh, ow], out)
}

/// Gradients of [`conv3d_forward`]; accumulates into `grad_w` and `grad_b`
/// and returns the input gradient.
pub(crate) fn conv3d_backward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    spec: &Conv3dSpec,
    grad_w: &mut Tensor<T>,
    grad_b: &mut Tensor<T>,
) -> Result<Tensor<T>> {
    let geo = Geometry::new(input.shape(), spec)?;
    let c_out = spec.out_channels;
    let [od, oh, ow] = geo.out_dims;
    if grad_out.shape() != [geo.n, c_out, od, oh, ow] {
        return Err(Error::Shape(format!(
            "conv3d gradient shape {:?} does not match output [{}, {c_out}, {od}, {oh}, {ow}]",
            grad_out.shape(),
            geo.n
        )));
    }
    let p_total = geo.out_volume();
    let in_sample = spec.in_channels * geo.in_volume();
    let block = geo.planes_per_block();
    let mut col = vec![T::zero(); geo.k * block * geo.out_plane()];
    let mut dcol = vec![T::zero(); geo.k * block * geo.out_plane()];
    let mut grad_in = vec![T::zero(); input.len()];
    let x = input.data();
    let w = weight.data();
    let go = grad_out.data();

    for n in 0..geo.n {
        for g in 0..spec.groups {
            let xoff = n * in_sample + g * geo.cin_g * geo.in_volume();
            let xg = &x[xoff..];
            let wg = &w[g * geo.cout_g * geo.k..(g + 1) * geo.cout_g * geo.k];
            let go_g = &go[(n * c_out + g * geo.cout_g) * p_total..(n * c_out + (g + 1) * geo.cout_g) * p_total];
            for (co, chunk) in go_g.chunks(p_total).enumerate() {
                let s: T = chunk.iter().copied().sum();
                grad_b.data_mut()[g * geo.cout_g + co] += s;
            }
            let gw = &mut grad_w.data_mut()[g * geo.cout_g * geo.k..(g + 1) * geo.cout_g * geo.k];
            let gx = &mut grad_in[xoff..xoff + geo.cin_g * geo.in_volume()];
            let mut od0 = 0;
            while od0 < od {
                let od1 = (od0 + block).min(od);
                let cols = (od1 - od0) * geo.out_plane();
                let off = od0 * geo.out_plane();
                im2col(xg, spec, &geo, od0, od1, &mut col[..geo.k * cols]);
                // dW_g += dY_block [cout_g, cols] * col^T [cols, K]
                gemm(
                    geo.cout_g,
                    cols,
                    geo.k,
                    T::one(),
                    &go_g[off..],
                    p_total,
                    1,
                    &col[..geo.k * cols],
                    1,
                    cols,
                    T::one(),
                    gw,
                    geo.k,
                    1,
                );
                // dcol = W_g^T [K, cout_g] * dY_block [cout_g, cols]
                gemm(
                    geo.k,
                    geo.cout_g,
                    cols,
                    T::one(),
                    wg,
                    1,
                    geo.k,
                    &go_g[off..],
                    p_total,
                    1,
                    T::zero(),
                    &mut dcol[..geo.k * cols],
                    cols,
                    1,
                );
                col2im(&dcol[..geo.k * cols], spec, &geo, od0, od1, gx);
                od0 = od1;
            }
        }
    }
    Tensor::from_vec(input.shape(), grad_in)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn valid_range_matches_brute_force() {
        for n in 1..7 {
            for k in 1..4 {
                for s in 1..4 {
                    for p in 0..3 {
                        let Some(out) = conv_output_len(n, k, s, p) else { continue };
                        for off in 0..k {
                            let brute: Vec<usize> = (0..out)
                                .filter(|&o| {
                                    let i = (o * s + off) as isize - p as isize;
                                    i >= 0 && (i as usize) < n
                                })
                                .collect();
                            let (lo, hi) = valid_range(out, n, s, off, p);
                            assert_eq!((lo..hi).collect::<Vec<_>>(), brute, "n={n} k={k} s={s} p={p} off={off}");
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn clinical_geometry_output_dims() {
        let spec = Conv3dSpec::cubic(3, 8, 3, 2, 1);
        assert_eq!(spec.output_dims([32, 149, 149]).unwrap(), [16, 75, 75]);
    }

    #[test]
    fn rejects_channel_mismatch_and_collapse() {
        let spec = Conv3dSpec::cubic(2, 4, 3, 1, 0);
        let w = Tensor::<f32>::zeros(&[4, 2, 3, 3, 3]).unwrap();
        let b = Tensor::<f32>::zeros(&[4]).unwrap();
        let x = Tensor::<f32>::zeros(&[1, 3, 4, 4, 4]).unwrap();
        assert!(matches!(conv3d_forward(&x, &w, &b, &spec), Err(Error::Shape(_))));
        let x = Tensor::<f32>::zeros(&[1, 2, 2, 4, 4]).unwrap();
        assert!(matches!(conv3d_forward(&x, &w, &b, &spec), Err(Error::Shape(_))));
    }

    #[test]
    fn groups_must_divide_channels() {
        assert!(Conv3dSpec::cubic(4, 6, 3, 1, 1).with_groups(4).validate().is_err());
        assert!(Conv3dSpec::cubic(4, 8, 3, 1, 1).with_groups(4).validate().is_ok());
    }
}
