use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::model::DenoiserParams;
use crate::theory::stable_norm;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled decay, applied to adapter matrices only.
    pub weight_decay: f64,
    pub warmup: u64,
    pub restart_period: u64,
    /// Global-norm clip threshold.
    pub clip: f64,
}

impl Default for OptConfig {
    fn default() -> Self {
        Self {
            lr: 5e-5,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 1e-2,
            warmup: 200,
            restart_period: 1000,
            clip: 1.0,
        }
    }
}

impl OptConfig {
    /// Defaults sized for the toy denoiser: the full-scale rate barely moves
    /// a model this small within a thousand steps.
    pub fn toy() -> Self {
        Self {
            lr: 1e-2,
            warmup: 50,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad(format!("lr = {} must be finite and non-negative", self.lr));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return bad(format!("{name} = {b} outside [0, 1)"));
            }
        }
        if !(self.eps > 0.0) || !(self.weight_decay >= 0.0) || !(self.clip > 0.0) {
            return bad("eps and clip must be positive, weight_decay non-negative".into());
        }
        if self.restart_period == 0 {
            return bad("restart_period must be at least 1".into());
        }
        Ok(())
    }
}

/// Linear warmup from 0 to `lr` over `warmup` steps, then cosine decay to 0
/// over each `restart_period`, restarting at period boundaries.
pub fn lr_at(step: u64, cfg: &OptConfig) -> f64 {
    if step < cfg.warmup {
        return cfg.lr * step as f64 / cfg.warmup as f64;
    }
    let phase = ((step - cfg.warmup) % cfg.restart_period) as f64 / cfg.restart_period as f64;
    cfg.lr * (1.0 + (PI * phase).cos()) / 2.0
}

/// AdamW moments over the flattened trainable vector.
#[derive(Clone, Debug, PartialEq)]
pub struct OptState {
    pub config: OptConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

impl OptState {
    pub fn new(config: OptConfig, params: &DenoiserParams) -> Result<Self, TrainError> {
        config.validate()?;
        let n = params.trainable_len();
        Ok(Self {
            config,
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        })
    }

    /// Updates applied so far.
    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self) -> &[f64] {
        &self.m
    }

    pub fn second_moment(&self) -> &[f64] {
        &self.v
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UpdateInfo {
    pub lr: f64,
    /// Global norm before clipping.
    pub grad_norm: f64,
    pub clipped: bool,
}

/// One AdamW update from a flat gradient over the trainable index. Update
/// `k` (0-based) uses learning rate `lr_at(k + 1)`, so the first update is
/// not wasted at warmup step 0.
pub fn optimizer_step(
    params: &mut DenoiserParams,
    grad: &[f64],
    opt: &mut OptState,
) -> Result<UpdateInfo, TrainError> {
    let step = opt.step;
    if grad.len() != opt.m.len() {
        return Err(TrainError::Config(format!(
            "gradient of length {} for {} trainable values",
            grad.len(),
            opt.m.len()
        )));
    }
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(TrainError::Numerical {
            step,
            what: "gradient".into(),
        });
    }
    let cfg = &opt.config;
    let grad_norm = stable_norm(grad);
    let clipped = grad_norm > cfg.clip;
    let scale = if clipped { cfg.clip / grad_norm } else { 1.0 };
    let t = (step + 1) as i32;
    let lr = lr_at(step + 1, cfg);
    let (bc1, bc2) = (1.0 - cfg.beta1.powi(t), 1.0 - cfg.beta2.powi(t));

    let mut tensors = params.trainable().to_vec();
    let mut offset = 0;
    for (entry, tensor) in params.trainable_index().iter().zip(tensors.iter_mut()) {
        let decay = if entry.decays() {
            cfg.weight_decay
        } else {
            0.0
        };
        let mut data = tensor.data().to_vec();
        for (k, w) in data.iter_mut().enumerate() {
            let i = offset + k;
            let g = grad[i] * scale;
            opt.m[i] = cfg.beta1 * opt.m[i] + (1.0 - cfg.beta1) * g;
            opt.v[i] = cfg.beta2 * opt.v[i] + (1.0 - cfg.beta2) * g * g;
            let mhat = opt.m[i] / bc1;
            let vhat = opt.v[i] / bc2;
            *w -= lr * (mhat / (vhat.sqrt() + cfg.eps) + decay * *w);
        }
        offset += data.len();
        *tensor = tensor.with_data(data)?;
    }
    params.set_trainable(tensors)?;
    opt.step += 1;
    Ok(UpdateInfo {
        lr,
        grad_norm,
        clipped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_model, ModelConfig};

    fn model() -> DenoiserParams {
        init_model(&ModelConfig::default(), 5).unwrap()
    }

    #[test]
    fn schedule_landmarks() {
        let cfg = OptConfig {
            lr: 0.3,
            warmup: 200,
            restart_period: 1000,
            ..Default::default()
        };
        assert_eq!(lr_at(0, &cfg), 0.0);
        assert_eq!(lr_at(200, &cfg), 0.3);
        assert!((lr_at(700, &cfg) - 0.15).abs() < 1e-15);
        assert_eq!(lr_at(1200, &cfg), 0.3);
        assert!(lr_at(1199, &cfg) < 1e-6);
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let mut p = model();
        let before = p.trainable_fingerprint();
        let mut opt = OptState::new(
            OptConfig {
                weight_decay: 0.0,
                ..Default::default()
            },
            &p,
        )
        .unwrap();
        let zeros = vec![0.0; p.trainable_len()];
        for _ in 0..3 {
            optimizer_step(&mut p, &zeros, &mut opt).unwrap();
        }
        assert_eq!(p.trainable_fingerprint(), before);
        assert_eq!(opt.step(), 3);
    }

    #[test]
    fn clipping_bounds_the_effective_gradient() {
        let mut p = model();
        let mut opt = OptState::new(OptConfig::default(), &p).unwrap();
        let n = p.trainable_len();
        let g: Vec<f64> = (0..n).map(|i| if i == 0 { 10.0 } else { 0.0 }).collect();
        let info = optimizer_step(&mut p, &g, &mut opt).unwrap();
        assert_eq!(info.grad_norm, 10.0);
        assert!(info.clipped);
        // m = (1 − β₁)·g_clipped with ‖g_clipped‖ = 1.
        assert!((opt.first_moment()[0] - 0.1).abs() < 1e-15);
    }

    #[test]
    fn matches_scalar_reference() {
        let mut p = model();
        let cfg = OptConfig {
            lr: 0.01,
            warmup: 3,
            restart_period: 50,
            weight_decay: 0.0,
            clip: 1e9,
            ..Default::default()
        };
        let mut opt = OptState::new(cfg.clone(), &p).unwrap();
        let n = p.trainable_len();
        let g = 0.37;
        let mut grad = vec![0.0; n];
        grad[0] = g;
        let w0 = p.trainable()[0].data()[0];
        let (mut w, mut m, mut v) = (w0, 0.0, 0.0);
        for k in 0..40u64 {
            optimizer_step(&mut p, &grad, &mut opt).unwrap();
            m = 0.9 * m + 0.1 * g;
            v = 0.95 * v + 0.05 * g * g;
            let t = (k + 1) as i32;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.95f64.powi(t));
            w -= lr_at(k + 1, &cfg) * mh / (vh.sqrt() + 1e-8);
        }
        assert!((p.trainable()[0].data()[0] - w).abs() < 1e-14);
        // Bias-corrected moments saturate: the step approaches lr · sign(g).
        let mh = m / (1.0 - 0.9f64.powi(40));
        let vh = v / (1.0 - 0.95f64.powi(40));
        assert!((mh / (vh.sqrt() + 1e-8) - 1.0).abs() < 1e-6);
    }

    #[test]
    fn decay_skips_the_cls_slot() {
        let mut p = model();
        let cls = p.trainable_index().len() - 1;
        let mut t = p.trainable().to_vec();
        t[cls] = t[cls].with_data(vec![1.0; t[cls].len()]).unwrap();
        p.set_trainable(t).unwrap();
        let mut opt = OptState::new(
            OptConfig {
                lr: 0.1,
                weight_decay: 0.5,
                warmup: 0,
                ..Default::default()
            },
            &p,
        )
        .unwrap();
        let before = p.trainable().to_vec();
        let zeros = vec![0.0; p.trainable_len()];
        optimizer_step(&mut p, &zeros, &mut opt).unwrap();
        assert_eq!(p.trainable()[cls], before[cls]);
        assert_ne!(p.trainable()[0], before[0]);
    }

    #[test]
    fn non_finite_gradient_is_rejected() {
        let mut p = model();
        let mut opt = OptState::new(OptConfig::default(), &p).unwrap();
        let mut g = vec![0.0; p.trainable_len()];
        g[3] = f64::NAN;
        assert!(matches!(
            optimizer_step(&mut p, &g, &mut opt),
            Err(TrainError::Numerical { step: 0, .. })
        ));
    }
}
