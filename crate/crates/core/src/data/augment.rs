//! Mirror, contrast, low-resolution, noise and in-plane affine augmentation.
//!
//! Every step draws one uniform to decide whether it fires, so the number of
//! draws consumed by a skipped step does not depend on its parameters. Masks
//! follow geometric transforms only.

use serde::{Deserialize, Serialize};

use super::volume::Sample;
use crate::error::{Error, Result};
use crate::tensor::{Rng, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    D,
    H,
    W,
}

impl Axis {
    fn index(self) -> usize {
        match self {
            Axis::D => 0,
            Axis::H => 1,
            Axis::W => 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Transform {
    /// Flips every listed axis.
    Mirror { axes: Vec<Axis> },
    /// Per-channel scaling around the channel mean by `exp(U(lo, hi))`.
    Contrast { log_factor: [f64; 2] },
    /// In-plane downscale by a factor from `scale`, then trilinear upsample back.
    LowResolution { scale: [f64; 2] },
    /// Additive Gaussian noise with sigma drawn from `sigma`.
    GaussianNoise { sigma: [f64; 2] },
    /// In-plane rotation (degrees) and isotropic in-plane scaling about the
    /// volume centre; trilinear for the image, nearest for the mask, zero fill.
    SpatialAffine { rotation_deg: [f64; 2], scale: [f64; 2] },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Step {
    #[serde(flatten)]
    pub transform: Transform,
    pub probability: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentationSpec {
    pub steps: Vec<Step>,
}

impl Default for AugmentationSpec {
    /// Default suite: left-right mirror, contrast, resolution, noise, affine.
    fn default() -> Self {
        let step = |transform, probability| Step { transform, probability };
        AugmentationSpec {
            steps: vec![
                step(Transform::Mirror { axes: vec![Axis::W] }, 0.5),
                step(Transform::Contrast { log_factor: [(0.75f64).ln(), (1.25f64).ln()] }, 0.3),
                step(Transform::LowResolution { scale: [0.5, 1.0] }, 0.25),
                step(Transform::GaussianNoise { sigma: [0.0, 0.1] }, 0.3),
                step(Transform::SpatialAffine { rotation_deg: [-15.0, 15.0], scale: [0.9, 1.1] }, 0.3),
            ],
        }
    }
}

impl AugmentationSpec {
    pub fn none() -> Self {
        AugmentationSpec { steps: Vec::new() }
    }

    pub fn validate(&self) -> Result<()> {
        let range = |name: &str, r: [f64; 2]| -> Result<()> {
            if !r[0].is_finite() || !r[1].is_finite() || r[0] > r[1] {
                return Err(Error::Parameter(format!("{name} range {r:?} must be finite and ordered")));
            }
            Ok(())
        };
        for (i, s) in self.steps.iter().enumerate() {
            if !(0.0..=1.0).contains(&s.probability) {
                return Err(Error::Parameter(format!("step {i}: probability {} outside [0, 1]", s.probability)));
            }
            match &s.transform {
                Transform::Mirror { .. } => {}
                Transform::Contrast { log_factor } => range("contrast", *log_factor)?,
                Transform::LowResolution { scale } => {
                    range("low_resolution", *scale)?;
                    if scale[0] <= 0.0 || scale[1] > 1.0 {
                        return Err(Error::Parameter(format!("low_resolution scale {scale:?} must lie in (0, 1]")));
                    }
                }
                Transform::GaussianNoise { sigma } => {
                    range("gaussian_noise", *sigma)?;
                    if sigma[0] < 0.0 {
                        return Err(Error::Parameter("gaussian_noise sigma must be non-negative".into()));
                    }
                }
                Transform::SpatialAffine { rotation_deg, scale } => {
                    range("rotation", *rotation_deg)?;
                    range("scale", *scale)?;
                    if scale[0] <= 0.0 {
                        return Err(Error::Parameter(format!("spatial scale {scale:?} must be positive")));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Applies `spec` in order; all randomness comes from `rng`.
pub fn augment(sample: &Sample, spec: &AugmentationSpec, rng: &mut Rng) -> Result<Sample> {
    spec.validate()?;
    sample.validate()?;
    let mut out = sample.clone();
    for step in &spec.steps {
        if rng.uniform() >= step.probability {
            continue;
        }
        match &step.transform {
            Transform::Mirror { axes } => {
                for &a in axes {
                    out.image = mirror(&out.image, a)?;
                    if let Some(m) = &out.mask {
                        out.mask = Some(mirror(m, a)?);
                    }
                }
            }
            Transform::Contrast { log_factor } => {
                let c = out.image.shape()[0];
                let per = out.image.len() / c;
                for chunk in out.image.data_mut().chunks_mut(per) {
                    let f = rng.uniform_in(log_factor[0], log_factor[1]).exp();
                    contrast(chunk, f);
                }
            }
            Transform::LowResolution { scale } => {
                let s = rng.uniform_in(scale[0], scale[1]);
                out.image = low_resolution(&out.image, s)?;
            }
            Transform::GaussianNoise { sigma } => {
                let s = rng.uniform_in(sigma[0], sigma[1]);
                for v in out.image.data_mut() {
                    *v += (s * rng.normal()) as f32;
                }
            }
            Transform::SpatialAffine { rotation_deg, scale } => {
                let theta = rng.uniform_in(rotation_deg[0], rotation_deg[1]).to_radians();
                let s = rng.uniform_in(scale[0], scale[1]);
                let spacing = [out.spacing[1], out.spacing[2]];
                out.image = affine_inplane(&out.image, theta, s, spacing, false)?;
                if let Some(m) = &out.mask {
                    let m4 = m.clone().reshape(&[1, m.shape()[0], m.shape()[1], m.shape()[2]])?;
                    let r = affine_inplane(&m4, theta, s, spacing, true)?;
                    out.mask = Some(r.reshape(m.shape())?);
                }
            }
        }
    }
    Ok(out)
}

/// Reverses one spatial axis of a `[D, H, W]` or `[C, D, H, W]` tensor.
pub fn mirror(t: &Tensor<f32>, axis: Axis) -> Result<Tensor<f32>> {
    let s = t.shape();
    let off = match s.len() {
        3 => 0,
        4 => 1,
        _ => return Err(Error::Shape(format!("mirror expects rank 3 or 4, got {s:?}"))),
    };
    let a = off + axis.index();
    let outer: usize = s[..a].iter().product();
    let n = s[a];
    let inner: usize = s[a + 1..].iter().product();
    let src = t.data();
    let mut out = vec![0.0f32; t.len()];
    for o in 0..outer {
        for i in 0..n {
            let from = (o * n + i) * inner;
            let to = (o * n + (n - 1 - i)) * inner;
            out[to..to + inner].copy_from_slice(&src[from..from + inner]);
        }
    }
    Tensor::from_vec(s, out)
}

fn contrast(chunk: &mut [f32], factor: f64) {
    let mean = chunk.iter().map(|&v| v as f64).sum::<f64>() / chunk.len() as f64;
    for v in chunk.iter_mut() {
        *v = (mean + factor * (*v as f64 - mean)) as f32;
    }
}

/// Samples `vol` (`[D, H, W]` slice of data) at a fractional position with
/// trilinear weights; positions outside the volume read as zero.
fn trilinear(vol: &[f32], dims: [usize; 3], p: [f64; 3]) -> f32 {
    let mut acc = 0.0f64;
    let base = p.map(|v| v.floor());
    let frac = [p[0] - base[0], p[1] - base[1], p[2] - base[2]];
    for corner in 0..8 {
        let mut w = 1.0;
        let mut idx = [0i64; 3];
        for a in 0..3 {
            let hi = (corner >> (2 - a)) & 1 == 1;
            idx[a] = base[a] as i64 + i64::from(hi);
            w *= if hi { frac[a] } else { 1.0 - frac[a] };
        }
        if w == 0.0 {
            continue;
        }
        if (0..3).all(|a| idx[a] >= 0 && (idx[a] as usize) < dims[a]) {
            let i = (idx[0] as usize * dims[1] + idx[1] as usize) * dims[2] + idx[2] as usize;
            acc += w * vol[i] as f64;
        }
    }
    acc as f32
}

/// Align-corners trilinear resampling of a `[C, D, H, W]` tensor to `dims`.
pub fn resample_trilinear(t: &Tensor<f32>, dims: [usize; 3]) -> Result<Tensor<f32>> {
    let s = t.shape();
    if s.len() != 4 || dims.contains(&0) {
        return Err(Error::Shape(format!("resample expects [C, D, H, W] and non-zero target, got {s:?} -> {dims:?}")));
    }
    let src_dims = [s[1], s[2], s[3]];
    let ratio = |a: usize| {
        if dims[a] > 1 {
            (src_dims[a] - 1) as f64 / (dims[a] - 1) as f64
        } else {
            0.0
        }
    };
    let r = [ratio(0), ratio(1), ratio(2)];
    let per = src_dims.iter().product::<usize>();
    let mut out = Vec::with_capacity(s[0] * dims.iter().product::<usize>());
    for c in 0..s[0] {
        let vol = &t.data()[c * per..(c + 1) * per];
        for z in 0..dims[0] {
            for y in 0..dims[1] {
                for x in 0..dims[2] {
                    out.push(trilinear(vol, src_dims, [z as f64 * r[0], y as f64 * r[1], x as f64 * r[2]]));
                }
            }
        }
    }
    Tensor::from_vec(&[s[0], dims[0], dims[1], dims[2]], out)
}

fn low_resolution(t: &Tensor<f32>, scale: f64) -> Result<Tensor<f32>> {
    let s = t.shape();
    let orig = [s[1], s[2], s[3]];
    let small = [orig[0], ((orig[1] as f64 * scale).round() as usize).max(1), ((orig[2] as f64 * scale).round() as usize).max(1)];
    if small == orig {
        return Ok(t.clone());
    }
    resample_trilinear(&resample_trilinear(t, small)?, orig)
}

/// Rotates by `theta` and scales by `scale` in the (H, W) plane about the
/// centre, using physical in-plane spacing. Inverse mapping per output voxel.
fn affine_inplane(t: &Tensor<f32>, theta: f64, scale: f64, spacing: [f64; 2], nearest: bool) -> Result<Tensor<f32>> {
    if !(scale > 0.0) {
        return Err(Error::Parameter(format!("affine scale must be positive, got {scale}")));
    }
    let s = t.shape();
    let dims = [s[1], s[2], s[3]];
    let (cy, cx) = ((dims[1] as f64 - 1.0) / 2.0, (dims[2] as f64 - 1.0) / 2.0);
    let (sin, cos) = theta.sin_cos();
    let per = dims.iter().product::<usize>();
    let plane = dims[1] * dims[2];
    // Source coordinates only depend on (y, x).
    let mut src = Vec::with_capacity(plane);
    for y in 0..dims[1] {
        for x in 0..dims[2] {
            let py = (y as f64 - cy) * spacing[0];
            let px = (x as f64 - cx) * spacing[1];
            let qy = (cos * py - sin * px) / scale;
            let qx = (sin * py + cos * px) / scale;
            src.push((qy / spacing[0] + cy, qx / spacing[1] + cx));
        }
    }
    let mut out = vec![0.0f32; t.len()];
    for c in 0..s[0] {
        let vol = &t.data()[c * per..(c + 1) * per];
        for z in 0..dims[0] {
            for (i, &(sy, sx)) in src.iter().enumerate() {
                let o = c * per + z * plane + i;
                out[o] = if nearest {
                    let (ry, rx) = (sy.round(), sx.round());
                    if ry >= 0.0 && rx >= 0.0 && (ry as usize) < dims[1] && (rx as usize) < dims[2] {
                        vol[z * plane + ry as usize * dims[2] + rx as usize]
                    } else {
                        0.0
                    }
                } else {
                    trilinear(vol, dims, [z as f64, sy, sx])
                };
            }
        }
    }
    Tensor::from_vec(s, out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::volume::DEFAULT_SPACING;

    fn sample(seed: u64) -> Sample {
        let mut rng = Rng::new(seed, 1);
        let image = Tensor::rand_normal(&[3, 4, 12, 10], 0.0, 1.0, &mut rng).unwrap();
        let mut mask = Tensor::<f32>::zeros(&[4, 12, 10]).unwrap();
        for z in 1..3 {
            for y in 3..8 {
                for x in 2..6 {
                    mask.set(&[z, y, x], 1.0);
                }
            }
        }
        Sample { study_id: "s".into(), image, spacing: DEFAULT_SPACING, label: 1, mask: Some(mask) }
    }

    fn only(transform: Transform) -> AugmentationSpec {
        AugmentationSpec { steps: vec![Step { transform, probability: 1.0 }] }
    }

    #[test]
    fn double_mirror_is_identity() {
        let s = sample(1);
        let spec = AugmentationSpec {
            steps: vec![
                Step { transform: Transform::Mirror { axes: vec![Axis::W] }, probability: 1.0 },
                Step { transform: Transform::Mirror { axes: vec![Axis::W] }, probability: 1.0 },
            ],
        };
        let out = augment(&s, &spec, &mut Rng::new(0, 0)).unwrap();
        assert_eq!(out, s);
        let once = augment(&s, &only(Transform::Mirror { axes: vec![Axis::W] }), &mut Rng::new(0, 0)).unwrap();
        assert_eq!(once.image.at(&[2, 1, 3, 0]), s.image.at(&[2, 1, 3, 9]));
        assert_eq!(once.mask.as_ref().unwrap().at(&[1, 3, 9 - 2]), 1.0);
    }

    #[test]
    fn mirror_preserves_value_multiset() {
        let s = sample(2);
        for axis in [Axis::D, Axis::H, Axis::W] {
            let m = mirror(&s.image, axis).unwrap();
            let mut a: Vec<u32> = s.image.data().iter().map(|v| v.to_bits()).collect();
            let mut b: Vec<u32> = m.data().iter().map(|v| v.to_bits()).collect();
            a.sort_unstable();
            b.sort_unstable();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn identity_parameters_are_identity() {
        let s = sample(3);
        for t in [
            Transform::Contrast { log_factor: [0.0, 0.0] },
            Transform::SpatialAffine { rotation_deg: [0.0, 0.0], scale: [1.0, 1.0] },
            Transform::LowResolution { scale: [1.0, 1.0] },
            Transform::GaussianNoise { sigma: [0.0, 0.0] },
        ] {
            let out = augment(&s, &only(t.clone()), &mut Rng::new(1, 1)).unwrap();
            assert!(out.image.max_abs_diff(&s.image).unwrap() <= 1e-5, "{t:?}");
            assert_eq!(out.mask, s.mask);
        }
    }

    #[test]
    fn noise_statistics() {
        let mut s = sample(4);
        s.image = Tensor::zeros(&[3, 10, 58, 58]).unwrap();
        s.mask = None;
        let out = augment(&s, &only(Transform::GaussianNoise { sigma: [0.1, 0.1] }), &mut Rng::new(5, 5)).unwrap();
        assert!(out.image.len() >= 100_000);
        let n = out.image.len() as f64;
        let mean = out.image.mean();
        let var = out.image.data().iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!((var.sqrt() - 0.1).abs() < 0.005);
    }

    #[test]
    fn contrast_scales_around_channel_mean() {
        let mut chunk = vec![1.0f32, 2.0, 3.0];
        contrast(&mut chunk, 2.0);
        assert_eq!(chunk, vec![0.0, 2.0, 4.0]);
    }

    #[test]
    fn rotation_by_quarter_turn_moves_voxels() {
        // 90 degrees on a square isotropic plane maps (y, x) -> (x, n-1-y) or its inverse.
        let n = 5;
        let mut t = Tensor::<f32>::zeros(&[1, 1, n, n]).unwrap();
        t.set(&[0, 0, 0, 2], 1.0);
        let r = affine_inplane(&t, std::f64::consts::FRAC_PI_2, 1.0, [1.0, 1.0], false).unwrap();
        let hot: Vec<usize> = (0..n * n).filter(|&i| r.data()[i] > 0.5).collect();
        assert_eq!(hot.len(), 1);
        assert!((r.sum() - 1.0).abs() < 1e-5);
    }

    #[test]
    fn low_resolution_smooths() {
        let s = sample(6);
        let out = low_resolution(&s.image, 0.5).unwrap();
        assert_eq!(out.shape(), s.image.shape());
        let var = |t: &Tensor<f32>| t.data().iter().map(|&v| (v as f64).powi(2)).sum::<f64>();
        assert!(var(&out) < var(&s.image));
    }

    #[test]
    fn validation_errors() {
        let bad = [
            Transform::SpatialAffine { rotation_deg: [0.0, 0.0], scale: [0.0, 1.0] },
            Transform::LowResolution { scale: [0.0, 0.5] },
            Transform::Contrast { log_factor: [1.0, -1.0] },
            Transform::GaussianNoise { sigma: [-1.0, 0.0] },
        ];
        for t in bad {
            assert!(matches!(only(t).validate(), Err(Error::Parameter(_))));
        }
        let spec = AugmentationSpec { steps: vec![Step { transform: Transform::Mirror { axes: vec![] }, probability: 1.5 }] };
        assert!(spec.validate().is_err());
        AugmentationSpec::default().validate().unwrap();
    }

    #[test]
    fn spec_json_round_trip() {
        let spec = AugmentationSpec::default();
        let json = serde_json::to_string(&spec).unwrap();
        assert!(json.contains("\"kind\":\"spatial_affine\""));
        let back: AugmentationSpec = serde_json::from_str(&json).unwrap();
        assert_eq!(back, spec);
    }

    #[test]
    fn label_never_changes() {
        let s = sample(7);
        let spec = AugmentationSpec {
            steps: AugmentationSpec::default().steps.into_iter().map(|st| Step { probability: 0.7, ..st }).collect(),
        };
        let mut rng = Rng::new(8, 8);
        for _ in 0..200 {
            let out = augment(&s, &spec, &mut rng).unwrap();
            assert_eq!(out.label, s.label);
            assert_eq!(out.image.shape(), s.image.shape());
        }
    }
}
