//! Learning-rate and momentum schedules, AdamW and SGD with momentum.

use std::f64::consts::PI;

use crate::distill::ModelParams;
use crate::error::{DoraError, Result};
use crate::trainer::config::{EmaSchedule, OptimizerKind, TrainConfig};

/// Linear warmup from 0 to `lr`, then cosine decay to `min_lr` at `total_steps`.
pub fn lr_schedule(step: u64, cfg: &TrainConfig) -> f64 {
    let step = step.min(cfg.total_steps);
    if step < cfg.warmup_steps {
        return cfg.lr * step as f64 / cfg.warmup_steps as f64;
    }
    let span = (cfg.total_steps - cfg.warmup_steps) as f64;
    let progress = (step - cfg.warmup_steps) as f64 / span;
    cfg.min_lr + 0.5 * (cfg.lr - cfg.min_lr) * (1.0 + (PI * progress).cos())
}

/// Teacher momentum at `step`.
pub fn ema_schedule(step: u64, cfg: &TrainConfig) -> f64 {
    match cfg.ema_schedule {
        EmaSchedule::Constant => cfg.ema_alpha,
        EmaSchedule::Cosine => {
            let progress = step.min(cfg.total_steps) as f64 / cfg.total_steps as f64;
            1.0 - (1.0 - cfg.ema_alpha) * 0.5 * (1.0 + (PI * progress).cos())
        }
    }
}

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Weight matrices decay; biases, norms, the class token and positions do not.
pub fn decays(name: &str) -> bool {
    name.ends_with("_w")
}

/// Moment buffers. SGD uses only `first`.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub steps: u64,
    pub first: ModelParams<f32>,
    pub second: ModelParams<f32>,
}

impl OptimizerState {
    pub fn new(params: &ModelParams<f32>) -> Self {
        Self { steps: 0, first: params.zeros_like(), second: params.zeros_like() }
    }
}

/// One AdamW update of a flat slice at f64, rounded back once per entry.
pub fn adamw_update(p: &mut [f32], g: &[f32], m: &mut [f32], v: &mut [f32], t: u64, lr: f64, wd: f64) {
    let c1 = 1.0 - BETA1.powi(t as i32);
    let c2 = 1.0 - BETA2.powi(t as i32);
    for i in 0..p.len() {
        let gi = g[i] as f64;
        let mi = BETA1 * m[i] as f64 + (1.0 - BETA1) * gi;
        let vi = BETA2 * v[i] as f64 + (1.0 - BETA2) * gi * gi;
        m[i] = mi as f32;
        v[i] = vi as f32;
        let pi = p[i] as f64;
        let step = (mi / c1) / ((vi / c2).sqrt() + ADAM_EPS);
        p[i] = (pi - lr * step - lr * wd * pi) as f32;
    }
}

pub fn sgd_update(p: &mut [f32], g: &[f32], buf: &mut [f32], lr: f64, wd: f64, momentum: f64) {
    for i in 0..p.len() {
        let b = momentum * buf[i] as f64 + g[i] as f64;
        buf[i] = b as f32;
        let pi = p[i] as f64;
        p[i] = (pi - lr * b - lr * wd * pi) as f32;
    }
}

/// Updates the student in place. Only the student and the moment buffers are
/// reachable from here.
pub fn optimizer_step(
    params: &mut ModelParams<f32>,
    grads: &ModelParams<f32>,
    lr: f64,
    cfg: &TrainConfig,
    state: &mut OptimizerState,
) -> Result<()> {
    if !params.same_shapes(grads) || !params.same_shapes(&state.first) {
        return Err(DoraError::Shape("gradient shapes do not match parameters".into()));
    }
    let mut bad = None;
    grads.visit(&mut |n, g| {
        if bad.is_none() && !g.is_finite() {
            bad = Some(n);
        }
    });
    if let Some(name) = bad {
        return Err(DoraError::NumericOverflow { layer: usize::MAX, detail: format!("non-finite gradient in {name}") });
    }
    state.steps += 1;
    let t = state.steps;
    let g = grads.leaves();
    let flat = |m: &ModelParams<f32>| m.leaves().iter().map(|x| x.as_slice().to_vec()).collect::<Vec<_>>();
    let mut first = flat(&state.first);
    let mut second = flat(&state.second);
    let mut i = 0;
    params.visit_mut(&mut |name, p| {
        let wd = if decays(&name) { cfg.weight_decay } else { 0.0 };
        match cfg.optimizer {
            OptimizerKind::AdamW => {
                adamw_update(p.as_mut_slice(), g[i].as_slice(), &mut first[i], &mut second[i], t, lr, wd)
            }
            OptimizerKind::Sgd => sgd_update(p.as_mut_slice(), g[i].as_slice(), &mut first[i], lr, wd, cfg.momentum),
        }
        i += 1;
    });
    let mut j = 0;
    state.first.visit_mut(&mut |_, m| {
        m.as_mut_slice().copy_from_slice(&first[j]);
        j += 1;
    });
    let mut j = 0;
    state.second.visit_mut(&mut |_, m| {
        m.as_mut_slice().copy_from_slice(&second[j]);
        j += 1;
    });
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> TrainConfig {
        TrainConfig { lr: 5e-4, min_lr: 1e-6, warmup_steps: 10, total_steps: 100, ..TrainConfig::default() }
    }

    #[test]
    fn schedule_endpoints() {
        let c = cfg();
        assert_eq!(lr_schedule(0, &c), 0.0);
        assert!((lr_schedule(5, &c) - 2.5e-4).abs() < 1e-18);
        assert!((lr_schedule(10, &c) - 5e-4).abs() < 1e-18);
        assert!((lr_schedule(100, &c) - 1e-6).abs() < 1e-18);
        let mid = lr_schedule(55, &c);
        assert!((mid - (1e-6 + 0.5 * (5e-4 - 1e-6))).abs() < 1e-15);
        for s in 10..100 {
            assert!(lr_schedule(s + 1, &c) <= lr_schedule(s, &c));
        }
    }

    #[test]
    fn ema_momentum_schedule() {
        let mut c = cfg();
        assert_eq!(ema_schedule(40, &c), 0.996);
        c.ema_schedule = EmaSchedule::Cosine;
        assert!((ema_schedule(0, &c) - 0.996).abs() < 1e-15);
        assert_eq!(ema_schedule(100, &c), 1.0);
    }

    #[test]
    fn zero_gradient_without_decay_is_identity() {
        let mut p = [0.3f32, -1.25];
        let (mut m, mut v) = ([0.0f32; 2], [0.0f32; 2]);
        adamw_update(&mut p, &[0.0, 0.0], &mut m, &mut v, 1, 0.1, 0.0);
        assert_eq!(p, [0.3, -1.25]);
    }

    #[test]
    fn one_adam_step_matches_closed_form() {
        let (p0, g, lr) = (0.5f64, 0.2f64, 1e-3f64);
        let mut p = [p0 as f32];
        let (mut m, mut v) = ([0.0f32], [0.0f32]);
        adamw_update(&mut p, &[g as f32], &mut m, &mut v, 1, lr, 0.0);
        let g = g as f32 as f64;
        let m1 = 0.1 * g;
        let v1 = 0.001 * g * g;
        let expected = p0 as f32 as f64 - lr * (m1 / (1.0 - 0.9)) / ((v1 / (1.0 - 0.999)).sqrt() + 1e-8);
        assert_eq!(p[0], expected as f32);
        assert_eq!(m[0], m1 as f32);
    }

    #[test]
    fn decoupled_decay_scales_parameter() {
        let mut p = [2.0f32];
        let (mut m, mut v) = ([0.0f32], [0.0f32]);
        adamw_update(&mut p, &[0.0], &mut m, &mut v, 1, 0.5, 0.2);
        assert_eq!(p[0], 1.8);
        let mut q = [2.0f32];
        sgd_update(&mut q, &[0.0], &mut [0.0], 0.5, 0.2, 0.9);
        assert_eq!(q[0], 1.8);
    }

    #[test]
    fn sgd_momentum_accumulates() {
        let mut p = [0.0f32];
        let mut buf = [0.0f32];
        sgd_update(&mut p, &[1.0], &mut buf, 0.1, 0.0, 0.9);
        sgd_update(&mut p, &[1.0], &mut buf, 0.1, 0.0, 0.9);
        assert!((p[0] as f64 + 0.29).abs() < 1e-7);
    }

    #[test]
    fn decay_applies_to_weight_matrices_only() {
        assert!(decays("encoder.blocks.0.qkv_w"));
        assert!(decays("head.last_w"));
        assert!(!decays("encoder.blocks.0.ln1_g"));
        assert!(!decays("encoder.pos"));
        assert!(!decays("head.fc1_b"));
    }
}
