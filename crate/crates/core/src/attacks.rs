//! White-box ℓ∞ attacks: FGSM and PGD.
//!
//! Both run the model in eval mode so the adversarial example of one input
//! does not depend on the rest of its batch, and neither touches parameters
//! or running statistics. PGD starts at the clean input (no random start).

use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::nn::{Mode, Model};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackConfig {
    /// ℓ∞ radius, in input units.
    pub epsilon: f32,
    /// Per-iteration step, in input units.
    pub step_size: f32,
    pub steps: usize,
    pub clip_min: f32,
    pub clip_max: f32,
}

impl AttackConfig {
    /// One full-budget step.
    pub fn fgsm(epsilon: f32, clip_min: f32, clip_max: f32) -> Self {
        AttackConfig { epsilon, step_size: epsilon, steps: 1, clip_min, clip_max }
    }

    pub fn pgd(epsilon: f32, step_size: f32, steps: usize, clip_min: f32, clip_max: f32) -> Self {
        AttackConfig { epsilon, step_size, steps, clip_min, clip_max }
    }

    /// MNIST, pixels in [0, 1]: FGSM with ε = 0.2.
    pub fn mnist_fgsm() -> Self {
        Self::fgsm(0.2, 0.0, 1.0)
    }

    /// MNIST: 20 steps of 0.01 inside the ε = 0.2 ball.
    pub fn mnist_pgd() -> Self {
        Self::pgd(0.2, 0.01, 20, 0.0, 1.0)
    }

    /// CIFAR-10, pixels in [0, 255]: FGSM with ε = 4.
    pub fn cifar_fgsm() -> Self {
        Self::fgsm(4.0, 0.0, 255.0)
    }

    /// CIFAR-10: 12 steps of 1 inside the ε = 4 ball.
    pub fn cifar_pgd() -> Self {
        Self::pgd(4.0, 1.0, 12, 0.0, 255.0)
    }

    pub fn is_single_step(&self) -> bool {
        self.steps == 1 && self.step_size == self.epsilon
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, reason: String| Err(Error::config(field, reason));
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return bad("epsilon", format!("must be finite and >= 0, got {}", self.epsilon));
        }
        if !(self.step_size >= 0.0 && self.step_size.is_finite()) {
            return bad("step_size", format!("must be finite and >= 0, got {}", self.step_size));
        }
        if self.steps < 1 {
            return bad("steps", "must be at least 1".into());
        }
        if self.clip_min.partial_cmp(&self.clip_max) != Some(std::cmp::Ordering::Less) {
            return bad("clip_min", format!("{} is not below clip_max {}", self.clip_min, self.clip_max));
        }
        Ok(())
    }
}

/// Eval-mode `∇x J(θ, x, y)` and the loss value. Parameter gradients are never formed.
pub fn input_gradient(model: &Model, x: &Tensor, labels: &[usize]) -> Result<(Tensor, f32)> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, false);
    let xv = tape.leaf(x.clone(), true);
    let out = model.forward(&mut tape, &bound, xv, Mode::Eval)?;
    let loss = tape.softmax_cross_entropy(out.logits, labels)?;
    tape.backward(loss)?;
    let grad = tape.grad(xv).unwrap_or_else(|| Tensor::zeros(x.shape().to_vec()));
    Ok((grad, tape.value(loss).item()))
}

/// Eval-mode loss at `x`.
pub fn loss_at(model: &Model, x: &Tensor, labels: &[usize]) -> Result<f32> {
    let (logits, _) = model.infer(x)?;
    let mut tape = Tape::new();
    let z = tape.leaf(logits, false);
    let loss = tape.softmax_cross_entropy(z, labels)?;
    Ok(tape.value(loss).item())
}

fn sign(v: f32) -> f32 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Largest interval `[lo, hi]` of floats with `|v − x0| ≤ eps` holding exactly.
fn ball(x0: f32, eps: f32) -> (f32, f32) {
    let mut hi = x0 + eps;
    if hi as f64 - x0 as f64 > eps as f64 {
        hi = hi.next_down();
    }
    let mut lo = x0 - eps;
    if x0 as f64 - lo as f64 > eps as f64 {
        lo = lo.next_up();
    }
    (lo, hi)
}

/// Projects `x` onto the ℓ∞ ball around `x0` intersected with the clip range.
pub fn project(x0: &Tensor, x: &mut Tensor, cfg: &AttackConfig) {
    for (v, &o) in x.data_mut().iter_mut().zip(x0.data()) {
        let (lo, hi) = ball(o, cfg.epsilon);
        *v = v.clamp(lo, hi).clamp(cfg.clip_min, cfg.clip_max);
    }
}

fn check(x: &Tensor, labels: &[usize], cfg: &AttackConfig) -> Result<()> {
    cfg.validate()?;
    if x.rank() != 4 || x.shape()[0] != labels.len() {
        return Err(Error::Shape(format!("attack input {:?} vs {} labels", x.shape(), labels.len())));
    }
    Ok(())
}

/// `x* = clip(x + ε · sign(∇x J))`, with `sign(0) = 0`.
pub fn fgsm(model: &Model, x: &Tensor, labels: &[usize], cfg: &AttackConfig) -> Result<Tensor> {
    check(x, labels, cfg)?;
    let (grad, _) = input_gradient(model, x, labels)?;
    let mut adv = x.clone();
    for ((v, &o), &g) in adv.data_mut().iter_mut().zip(x.data()).zip(grad.data()) {
        let (lo, hi) = ball(o, cfg.epsilon);
        let stepped = match sign(g) {
            s if s > 0.0 => hi,
            s if s < 0.0 => lo,
            _ => o,
        };
        *v = stepped.clamp(cfg.clip_min, cfg.clip_max);
    }
    Ok(adv)
}

/// `steps` iterations of `x ← Π(x + step_size · sign(∇x J))` from `x0 = x`.
pub fn pgd(model: &Model, x: &Tensor, labels: &[usize], cfg: &AttackConfig) -> Result<Tensor> {
    check(x, labels, cfg)?;
    let mut adv = x.clone();
    for _ in 0..cfg.steps {
        let (grad, _) = input_gradient(model, &adv, labels)?;
        for (v, &g) in adv.data_mut().iter_mut().zip(grad.data()) {
            *v += cfg.step_size * sign(g);
        }
        project(x, &mut adv, cfg);
    }
    Ok(adv)
}

/// FGSM for single-step configs, PGD otherwise.
pub fn attack(model: &Model, x: &Tensor, labels: &[usize], cfg: &AttackConfig) -> Result<Tensor> {
    if cfg.is_single_step() {
        fgsm(model, x, labels, cfg)
    } else {
        pgd(model, x, labels, cfg)
    }
}

/// `max |a − b|` over all elements, in f64.
pub fn linf_distance(a: &Tensor, b: &Tensor) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(&p, &q)| (p as f64 - q as f64).abs())
        .fold(0.0, f64::max)
}
