use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::Model;
use crate::tensor::{Scalar, Tensor};

/// First and second moment estimates for one named parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments<T: Scalar> {
    pub name: String,
    pub m: Tensor<T>,
    pub v: Tensor<T>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// AdamW with decoupled weight decay and bias-corrected moments.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW<T: Scalar> {
    pub hyper: AdamHyper,
    pub step: u64,
    pub moments: Vec<Moments<T>>,
}

impl<T: Scalar> Default for AdamW<T> {
    fn default() -> Self {
        AdamW { hyper: AdamHyper::default(), step: 0, moments: Vec::new() }
    }
}

/// One AdamW update of a single tensor at (1-based) step `t`:
/// `theta <- theta - lr*wd*theta`, then the Adam step.
pub fn adamw_update<T: Scalar>(
    value: &mut Tensor<T>,
    grad: &Tensor<T>,
    moments: &mut Moments<T>,
    hyper: &AdamHyper,
    t: u64,
    lr: f64,
    weight_decay: f64,
) -> Result<()> {
    let shape = value.shape();
    if grad.shape() != shape || moments.m.shape() != shape || moments.v.shape() != shape {
        return Err(Error::State(format!(
            "'{}': parameter {:?}, gradient {:?}, moments {:?}",
            moments.name,
            shape,
            grad.shape(),
            moments.m.shape()
        )));
    }
    let AdamHyper { beta1, beta2, eps } = *hyper;
    let c1 = 1.0 - beta1.powi(t as i32);
    let c2 = 1.0 - beta2.powi(t as i32);
    let decay = 1.0 - lr * weight_decay;
    let (m, v) = (moments.m.data_mut(), moments.v.data_mut());
    for (i, theta) in value.data_mut().iter_mut().enumerate() {
        let g = grad.data()[i].as_f64();
        let mi = beta1 * m[i].as_f64() + (1.0 - beta1) * g;
        let vi = beta2 * v[i].as_f64() + (1.0 - beta2) * g * g;
        m[i] = T::from_f64(mi);
        v[i] = T::from_f64(vi);
        let update = (mi / c1) / ((vi / c2).sqrt() + eps);
        *theta = T::from_f64(theta.as_f64() * decay - lr * update);
    }
    Ok(())
}

impl<T: Scalar> AdamW<T> {
    pub fn new(hyper: AdamHyper) -> Self {
        AdamW { hyper, step: 0, moments: Vec::new() }
    }

    /// Zero moments for every parameter of `model`, in registry order.
    pub fn init_for(model: &Model<T>, hyper: AdamHyper) -> Result<Self> {
        let mut moments = Vec::new();
        for p in model.params() {
            moments.push(Moments {
                name: p.name.clone(),
                m: Tensor::zeros(p.value.shape())?,
                v: Tensor::zeros(p.value.shape())?,
            });
        }
        Ok(AdamW { hyper, step: 0, moments })
    }

    /// Applies one update to every parameter using the accumulated grads.
    pub fn step(&mut self, model: &mut Model<T>, lr: f64, weight_decay: f64) -> Result<()> {
        if !(lr > 0.0) {
            return Err(Error::Parameter(format!("learning rate must be positive, got {lr}")));
        }
        if self.moments.is_empty() {
            *self = Self::init_for(model, self.hyper)?;
        }
        let t = self.step + 1;
        let hyper = self.hyper;
        let mut idx = 0;
        let mut result = Ok(());
        let moments = &mut self.moments;
        model.for_each_param_mut(|p| {
            if result.is_err() {
                return;
            }
            result = match moments.get_mut(idx) {
                Some(mo) if mo.name == p.name => adamw_update(&mut p.value, &p.grad, mo, &hyper, t, lr, weight_decay),
                Some(mo) => Err(Error::State(format!("optimizer slot {idx} is '{}', parameter is '{}'", mo.name, p.name))),
                None => Err(Error::State(format!("no optimizer slot for parameter '{}'", p.name))),
            };
            idx += 1;
        });
        result?;
        if idx != moments.len() {
            return Err(Error::State(format!("optimizer has {} slots for {idx} parameters", moments.len())));
        }
        self.step = t;
        Ok(())
    }
}
