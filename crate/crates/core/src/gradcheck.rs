//! Analytic-versus-numeric gradient comparison for layers.
//!
//! The scalar objective is a fixed random projection of the layer output,
//! `L(x) = sum(y(x) * r)`, so `dL/dy = r` seeds the analytic backward pass and
//! the central-difference oracle perturbs inputs and parameters directly.

use crate::error::Result;
use crate::error::Error;
use crate::layers::{ForwardCtx, Layer};
use crate::models::Model;
use crate::tensor::{finite_difference_gradient, Rng, Scalar, Tensor};

/// `||a - b||_2 / max(||a||_2, ||b||_2)`, zero when both vanish.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic.iter().zip(numeric).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let na = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nb = numeric.iter().map(|b| b * b).sum::<f64>().sqrt();
    let scale = na.max(nb);
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Relative error per checked tensor: the input first, then each parameter.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub entries: Vec<(String, f64)>,
}

impl GradCheckReport {
    pub fn max_error(&self) -> f64 {
        self.entries.iter().map(|e| e.1).fold(0.0, f64::max)
    }
}

fn to_f64<T: Scalar>(t: &Tensor<T>) -> Vec<f64> {
    t.data().iter().map(|v| v.as_f64()).collect()
}

fn projected<T: Scalar>(y: &Tensor<T>, r: &Tensor<T>) -> f64 {
    y.data().iter().zip(r.data()).map(|(a, b)| a.as_f64() * b.as_f64()).sum()
}

/// Compares `layer.backward` with central differences of step `h`.
///
/// The differences are taken on an f64 copy of the layer, so the check
/// measures the backward pass of `T` rather than its rounding noise. Every
/// objective evaluation replays the same dropout stream, so stochastic layers
/// are checked against a fixed mask.
pub fn check_layer<T: Scalar>(
    layer: &mut Layer<T>,
    input: &Tensor<T>,
    training: bool,
    seed: u64,
    h: f64,
) -> Result<GradCheckReport> {
    let mask_rng = Rng::new(seed, 0xD0);
    let mut oracle = layer.cast::<f64>();
    let x64 = input.cast::<f64>();

    let y = {
        let mut rng = mask_rng.clone();
        layer.forward(input, &mut ForwardCtx { training, keep_cache: true, rng: &mut rng })?
    };
    let r = Tensor::<f64>::rand_normal(y.shape(), 0.0, 1.0, &mut Rng::new(seed, 0xA1))?;
    layer.zero_grad();
    let grad_in = layer.backward(&r.cast())?;
    let param_grads: Vec<Vec<f64>> = layer.params().iter().map(|p| to_f64(&p.grad)).collect();
    layer.clear_cache();

    let eval = |layer: &mut Layer<f64>, x: &Tensor<f64>| -> Result<f64> {
        let mut rng = mask_rng.clone();
        let y = layer.forward(x, &mut ForwardCtx { training, keep_cache: false, rng: &mut rng })?;
        Ok(projected(&y, &r))
    };

    let mut entries = Vec::new();
    let fd_in = finite_difference_gradient(|x| eval(&mut oracle, x), &x64, h)?;
    entries.push(("input".to_string(), relative_error(&to_f64(&grad_in), &to_f64(&fd_in))));

    for (pi, analytic) in param_grads.iter().enumerate() {
        let original = oracle.params()[pi].value.clone();
        let fd = finite_difference_gradient(
            |v| {
                oracle.params_mut()[pi].value = v.clone();
                eval(&mut oracle, &x64)
            },
            &original,
            h,
        )?;
        oracle.params_mut()[pi].value = original;
        let name = oracle.params()[pi].name.clone();
        entries.push((name, relative_error(analytic, &to_f64(&fd))));
    }
    Ok(GradCheckReport { entries })
}

/// Mean binary cross-entropy of sigmoid scores, evaluated in f64.
fn bce(scores: &[f64], labels: &[f64]) -> f64 {
    let n = scores.len() as f64;
    scores.iter().zip(labels).map(|(&s, &y)| -(y * s.ln() + (1.0 - y) * (1.0 - s).ln())).sum::<f64>() / n
}

/// Compares the model gradient of mean BCE against central differences at
/// `samples` randomly chosen parameter elements.
///
/// The analytic gradient comes from `model` in its own precision. The
/// numeric oracle runs on an f64 copy, so an f32 check measures the f32
/// backward pass rather than f32 rounding noise in the differences.
/// Dropout masks are replayed from the same stream for every evaluation.
pub fn check_model<T: Scalar>(
    model: &mut Model<T>,
    x: &Tensor<T>,
    labels: &[f64],
    training: bool,
    samples: usize,
    seed: u64,
    h: f64,
) -> Result<GradCheckReport> {
    if labels.len() != x.shape()[0] {
        return Err(Error::Shape(format!("{} labels for a batch of {}", labels.len(), x.shape()[0])));
    }
    let dropout = model.dropout_rng().clone();
    let mut oracle = model.cast::<f64>();
    let x64 = x.cast::<f64>();

    let scores = model.forward(x, training)?;
    let n = labels.len() as f64;
    let g: Vec<T> = to_f64(&scores)
        .iter()
        .zip(labels)
        .map(|(&s, &y)| T::from_f64((-(y / s) + (1.0 - y) / (1.0 - s)) / n))
        .collect();
    model.zero_grad();
    model.backward(&Tensor::from_vec(scores.shape(), g)?)?;
    model.set_dropout_rng(dropout.clone());

    let sizes: Vec<usize> = model.params().iter().map(|p| p.value.len()).collect();
    let total: usize = sizes.iter().sum();
    let mut rng = Rng::new(seed, 0xB2);
    let mut picks: Vec<usize> = Vec::new();
    while picks.len() < samples.min(total) {
        let i = rng.below(total);
        if !picks.contains(&i) {
            picks.push(i);
        }
    }
    let locate = |mut i: usize| {
        for (p, &len) in sizes.iter().enumerate() {
            if i < len {
                return (p, i);
            }
            i -= len;
        }
        unreachable!("index within total")
    };

    let loss = |m: &mut Model<f64>, pi: usize, off: usize, v: f64| -> Result<f64> {
        let mut k = 0;
        m.for_each_param_mut(|p| {
            if k == pi {
                p.value.data_mut()[off] = v;
            }
            k += 1;
        });
        m.set_dropout_rng(dropout.clone());
        let s = to_f64(&m.forward(&x64, training)?);
        Ok(bce(&s, labels))
    };

    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    for &flat in &picks {
        let (pi, off) = locate(flat);
        analytic.push(model.params()[pi].grad.data()[off].as_f64());
        let orig = oracle.params()[pi].value.data()[off];
        let lp = loss(&mut oracle, pi, off, orig + h)?;
        let lm = loss(&mut oracle, pi, off, orig - h)?;
        loss(&mut oracle, pi, off, orig)?;
        if !lp.is_finite() || !lm.is_finite() {
            return Err(Error::Numeric(format!("loss is not finite around parameter element {flat}")));
        }
        numeric.push((lp - lm) / (2.0 * h));
    }
    model.clear_cache();
    Ok(GradCheckReport { entries: vec![("sampled parameters".into(), relative_error(&analytic, &numeric))] })
}
