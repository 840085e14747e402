//! Optimizers and the warmup + cosine learning-rate schedule.

use crate::model::{ModelState, OptState};
use crate::tensor::Tensor;
use std::fmt;

pub const ADAMW_BETA1: f64 = 0.9;
pub const ADAMW_BETA2: f64 = 0.999;
pub const ADAMW_EPS: f64 = 1e-8;
pub const ADAMW_WEIGHT_DECAY: f64 = 0.01;
pub const SGD_MOMENTUM: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    AdamW,
    SgdMomentum,
}

#[derive(Debug)]
pub enum OptError {
    NanGradient { param: String },
}

impl fmt::Display for OptError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            OptError::NanGradient { param } => {
                write!(f, "NaN gradient on parameter {param}; aborting")
            }
        }
    }
}

impl std::error::Error for OptError {}

/// Linear warmup to `max_lr` followed by cosine decay to `min_lr`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Schedule {
    pub max_lr: f64,
    pub min_lr: f64,
    pub warmup: u64,
    pub total: u64,
}

impl Schedule {
    /// The standard shape used here: minimum 100x below the maximum.
    pub fn warmup_cosine(max_lr: f64, warmup: u64, total: u64) -> Schedule {
        Schedule {
            max_lr,
            min_lr: max_lr / 100.0,
            warmup,
            total,
        }
    }

    pub fn constant(lr: f64) -> Schedule {
        Schedule {
            max_lr: lr,
            min_lr: lr,
            warmup: 0,
            total: u64::MAX,
        }
    }
}

pub fn lr_at(s: &Schedule, iter: u64) -> f64 {
    if iter < s.warmup {
        return s.max_lr * iter as f64 / s.warmup as f64;
    }
    if iter >= s.total {
        return s.min_lr;
    }
    let span = (s.total - s.warmup) as f64;
    let progress = (iter - s.warmup) as f64 / span;
    s.min_lr + (s.max_lr - s.min_lr) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

fn check_grads(
    state: &ModelState,
    grads: &[Option<&Tensor<f32>>],
) -> Result<(), OptError> {
    let names = state.config.param_names();
    for (i, g) in grads.iter().enumerate() {
        if let Some(g) = g {
            if g.data.iter().any(|v| v.is_nan()) {
                return Err(OptError::NanGradient {
                    param: names[i].clone(),
                });
            }
        }
    }
    Ok(())
}

/// One AdamW step with decoupled weight decay. Gradients are index-aligned
/// with `state.params`; parameters without a gradient are left untouched.
pub fn adamw_step(
    state: &mut ModelState,
    grads: &[Option<&Tensor<f32>>],
    lr: f64,
) -> Result<(), OptError> {
    check_grads(state, grads)?;
    if !matches!(state.opt_state, OptState::AdamW { .. }) {
        state.opt_state = OptState::AdamW {
            step: 0,
            m: state.params.iter().map(|p| Tensor::zeros(&p.shape)).collect(),
            v: state.params.iter().map(|p| Tensor::zeros(&p.shape)).collect(),
        };
    }
    let OptState::AdamW { step, m, v } = &mut state.opt_state else {
        unreachable!()
    };
    *step += 1;
    let t = *step as f64;
    let bc1 = 1.0 - ADAMW_BETA1.powf(t);
    let bc2 = 1.0 - ADAMW_BETA2.powf(t);
    for (i, gopt) in grads.iter().enumerate() {
        let Some(g) = gopt else { continue };
        let p = &mut state.params[i];
        let mi = &mut m[i];
        let vi = &mut v[i];
        for j in 0..p.data.len() {
            let gj = g.data[j] as f64;
            let mj = ADAMW_BETA1 * mi.data[j] as f64 + (1.0 - ADAMW_BETA1) * gj;
            let vj = ADAMW_BETA2 * vi.data[j] as f64 + (1.0 - ADAMW_BETA2) * gj * gj;
            mi.data[j] = mj as f32;
            vi.data[j] = vj as f32;
            let mhat = mj / bc1;
            let vhat = vj / bc2;
            let pj = p.data[j] as f64;
            p.data[j] = (pj - lr * (mhat / (vhat.sqrt() + ADAMW_EPS) + ADAMW_WEIGHT_DECAY * pj))
                as f32;
        }
    }
    Ok(())
}

/// One SGD-with-momentum step: buf <- mu*buf + g; p <- p - lr*buf.
pub fn sgd_momentum_step(
    state: &mut ModelState,
    grads: &[Option<&Tensor<f32>>],
    lr: f64,
) -> Result<(), OptError> {
    check_grads(state, grads)?;
    if !matches!(state.opt_state, OptState::SgdMomentum { .. }) {
        state.opt_state = OptState::SgdMomentum {
            buf: state.params.iter().map(|p| Tensor::zeros(&p.shape)).collect(),
        };
    }
    let OptState::SgdMomentum { buf } = &mut state.opt_state else {
        unreachable!()
    };
    for (i, gopt) in grads.iter().enumerate() {
        let Some(g) = gopt else { continue };
        let p = &mut state.params[i];
        let bi = &mut buf[i];
        for j in 0..p.data.len() {
            let b = SGD_MOMENTUM as f32 * bi.data[j] + g.data[j];
            bi.data[j] = b;
            p.data[j] -= (lr as f32) * b;
        }
    }
    Ok(())
}

pub fn step(
    kind: OptimizerKind,
    state: &mut ModelState,
    grads: &[Option<&Tensor<f32>>],
    lr: f64,
) -> Result<(), OptError> {
    match kind {
        OptimizerKind::AdamW => adamw_step(state, grads, lr),
        OptimizerKind::SgdMomentum => sgd_momentum_step(state, grads, lr),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::TransformerConfig;

    fn scalar_state() -> ModelState {
        // Smallest valid model; we only exercise one parameter entry.
        let cfg = TransformerConfig {
            n_blocks: 1,
            n_heads: 1,
            d_model: 1,
            d_mlp: 1,
            context_len: 1,
            vocab_size: 1,
            n_outputs: 1,
            use_layernorm: false,
            causal: false,
            activation: crate::model::Activation::Relu,
        };
        let mut s = ModelState::new_random(cfg, 0);
        for p in &mut s.params {
            p.data.fill(1.0);
        }
        s
    }

    #[test]
    fn adamw_first_step_matches_hand_computation() {
        let mut s = scalar_state();
        let g = Tensor::from_vec(&[1, 1], vec![0.5f32]);
        let grads: Vec<Option<&Tensor<f32>>> =
            s.params.iter().enumerate().map(|(i, _)| if i == 0 { Some(&g) } else { None }).collect();
        let lr = 0.1;
        adamw_step(&mut s, &grads, lr).unwrap();
        // Hand calculation: m=0.05, v=0.00025, bc1=0.1, bc2=0.001,
        // mhat=0.5, vhat=0.25, update = lr*(0.5/(0.5+eps) + 0.01*1.0)
        let expected = 1.0 - 0.1 * (0.5 / (0.25f64.sqrt() + ADAMW_EPS) + 0.01 * 1.0);
        let got = s.params[0].data[0] as f64;
        assert!((got - expected).abs() < 1e-6, "got {got}, want {expected}");
    }

    #[test]
    fn zero_lr_leaves_parameters_unchanged() {
        let mut s = scalar_state();
        let before = s.param_hash();
        let g = Tensor::from_vec(&[1, 1], vec![3.0f32]);
        let grads: Vec<Option<&Tensor<f32>>> =
            s.params.iter().map(|_| Some(&g)).collect();
        // SGD at lr=0 cannot move parameters; AdamW at lr=0 likewise.
        sgd_momentum_step(&mut s, &grads, 0.0).unwrap();
        assert_eq!(s.param_hash(), before);
        adamw_step(&mut s, &grads, 0.0).unwrap();
        assert_eq!(s.param_hash(), before);
    }

    #[test]
    fn sgd_momentum_two_steps_displacement() {
        let mut s = scalar_state();
        let g = Tensor::from_vec(&[1, 1], vec![2.0f32]);
        let grads: Vec<Option<&Tensor<f32>>> = s
            .params
            .iter()
            .enumerate()
            .map(|(i, _)| if i == 0 { Some(&g) } else { None })
            .collect();
        let lr = 0.01;
        let p0 = s.params[0].data[0];
        sgd_momentum_step(&mut s, &grads, lr).unwrap();
        let p1 = s.params[0].data[0];
        sgd_momentum_step(&mut s, &grads, lr).unwrap();
        let p2 = s.params[0].data[0];
        // Step 1 displacement lr*g; step 2 displacement (1+0.9)*lr*g.
        assert!((f64::from(p0 - p1) - 0.01 * 2.0).abs() < 1e-7);
        assert!((f64::from(p1 - p2) - (1.0 + SGD_MOMENTUM) * 0.01 * 2.0).abs() < 1e-7);
    }

    #[test]
    fn nan_gradient_aborts_with_param_name() {
        let mut s = scalar_state();
        let g = Tensor::from_vec(&[1, 1], vec![f32::NAN]);
        let grads: Vec<Option<&Tensor<f32>>> = s
            .params
            .iter()
            .enumerate()
            .map(|(i, _)| if i == 0 { Some(&g) } else { None })
            .collect();
        let err = adamw_step(&mut s, &grads, 0.1).unwrap_err();
        assert!(err.to_string().contains("embed.tok"));
    }

    #[test]
    fn schedule_endpoints() {
        let s = Schedule::warmup_cosine(0.1, 2000, 10_000);
        assert_eq!(lr_at(&s, 0), 0.0);
        assert!((lr_at(&s, 2000) - 0.1).abs() < 1e-12);
        assert!((lr_at(&s, 10_000) - 0.001).abs() < 1e-12);
        // Midpoint of decay = (max+min)/2
        assert!((lr_at(&s, 6000) - 0.0505).abs() < 1e-10);
        // Monotone on the warmup ramp
        assert!(lr_at(&s, 100) < lr_at(&s, 200));
    }
}
