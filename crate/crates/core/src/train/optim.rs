use ndiff::{GradientMap, ParamStore, Precision, Tensor};

use super::{Result, TrainError};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.98;
pub const ADAM_EPS: f64 = 1e-9;

/// `base_lr · min(step / warmup, sqrt(warmup / step))`: linear warmup to the
/// peak at `step = warmup`, inverse-square-root decay after.
pub fn lr_at_step(step: u64, base_lr: f64, warmup_steps: u64) -> Result<f64> {
    if step == 0 {
        return Err(TrainError::Contract("learning-rate steps start at 1".into()));
    }
    if warmup_steps == 0 {
        return Err(TrainError::Contract("warmup_steps must be positive".into()));
    }
    let (s, w) = (step as f64, warmup_steps as f64);
    Ok(base_lr * (s / w).min((w / s).sqrt()))
}

/// Adam moments, one pair per parameter in store order.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl OptimizerState {
    pub fn new(params: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = params.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect();
        OptimizerState {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    fn check(&self, params: &ParamStore) -> Result<()> {
        if self.m.len() != params.len() || self.v.len() != params.len() {
            return Err(TrainError::Contract(format!(
                "optimizer holds {} moments for {} parameters",
                self.m.len(),
                params.len()
            )));
        }
        for ((id, name, t), (m, v)) in params.iter().zip(self.m.iter().zip(&self.v)) {
            if m.shape() != t.shape() || v.shape() != t.shape() {
                return Err(TrainError::Contract(format!(
                    "moment shape mismatch for {name} (param {})",
                    id.0
                )));
            }
        }
        Ok(())
    }
}

/// Rescales `grads` to global norm `max_norm` when larger; returns the norm
/// before clipping.
pub fn clip_gradients(grads: &mut GradientMap, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if max_norm > 0.0 && norm > max_norm {
        grads.scale(max_norm / norm);
    }
    norm
}

/// One bias-corrected Adam update. Parameters without a gradient are treated
/// as having a zero gradient; parameters with `trainable[i] == false` are
/// left untouched together with their moments. Updated values are rounded to
/// `precision`.
pub fn optimizer_step(
    params: &mut ParamStore,
    grads: &GradientMap,
    opt: &mut OptimizerState,
    lr: f64,
    precision: Precision,
    trainable: Option<&[bool]>,
) -> Result<()> {
    opt.check(params)?;
    for (id, g) in grads.iter() {
        if g.shape() != params.get(id).shape() {
            return Err(TrainError::Contract(format!(
                "gradient shape {:?} for {} of shape {:?}",
                g.shape(),
                params.name(id),
                params.get(id).shape()
            )));
        }
    }
    opt.step += 1;
    let t = opt.step as i32;
    let bc1 = 1.0 - ADAM_BETA1.powi(t);
    let bc2 = 1.0 - ADAM_BETA2.powi(t);
    let ids: Vec<_> = params.ids().collect();
    for (i, id) in ids.into_iter().enumerate() {
        if trainable.is_some_and(|tr| !tr[i]) {
            continue;
        }
        let g = grads.get(id).map(Tensor::data);
        let m = opt.m[i].data_mut();
        let v = opt.v[i].data_mut();
        let p = params.get_mut(id).data_mut();
        for k in 0..p.len() {
            let gk = g.map_or(0.0, |g| g[k]);
            m[k] = ADAM_BETA1 * m[k] + (1.0 - ADAM_BETA1) * gk;
            v[k] = ADAM_BETA2 * v[k] + (1.0 - ADAM_BETA2) * gk * gk;
            let update = lr * (m[k] / bc1) / ((v[k] / bc2).sqrt() + ADAM_EPS);
            p[k] = precision.round(p[k] - update);
        }
    }
    Ok(())
}
