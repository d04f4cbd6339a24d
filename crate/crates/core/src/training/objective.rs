//! Standard, adversarial and distortion-regularized training losses.
//!
//! All three are assembled on a caller-owned tape against bound parameters,
//! so one backward pass yields the parameter gradients of the whole
//! objective. The adversarial example enters as a constant: no gradient
//! flows through its generation.

use std::borrow::Cow;

use serde::{Deserialize, Serialize};

use crate::attacks::{self, AttackConfig};
use crate::autodiff::{BatchStats, Tape, Var};
use crate::data::LabeledBatch;
use crate::error::{Error, Result};
use crate::nn::{BoundParams, Mode, Model};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectiveKind {
    /// `J(θ, x, y)`.
    Standard,
    /// `α·J(θ, x, y) + (1 − α)·J(θ, x*, y)`.
    Adversarial,
    /// The adversarial objective plus `Σ_i β_i Σ_j d_ij`.
    DistortionRegularized,
}

/// How squared tap differences `(z − z*)²` of one layer collapse to its scalar `Σ_j d_ij`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistortionReduction {
    /// Sum over examples, positions and channels.
    #[default]
    Sum,
    /// Per channel, mean over examples and positions; summed over channels.
    Mean,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectiveConfig {
    pub kind: ObjectiveKind,
    /// Weight of the clean loss.
    #[serde(default = "one")]
    pub alpha: f32,
    /// One weight per normalization layer, shallowest first.
    #[serde(default)]
    pub betas: Vec<f32>,
    /// Inner adversary; single-step configs run FGSM, others PGD.
    #[serde(default)]
    pub attack: Option<AttackConfig>,
    #[serde(default)]
    pub distortion_reduction: DistortionReduction,
}

impl ObjectiveKind {
    pub fn name(self) -> &'static str {
        match self {
            ObjectiveKind::Standard => "standard",
            ObjectiveKind::Adversarial => "adversarial",
            ObjectiveKind::DistortionRegularized => "distortion_regularized",
        }
    }
}

fn one() -> f32 {
    1.0
}

impl ObjectiveConfig {
    pub fn standard() -> Self {
        ObjectiveConfig {
            kind: ObjectiveKind::Standard,
            alpha: 1.0,
            betas: Vec::new(),
            attack: None,
            distortion_reduction: DistortionReduction::default(),
        }
    }

    pub fn adversarial(alpha: f32, attack: AttackConfig) -> Self {
        ObjectiveConfig { kind: ObjectiveKind::Adversarial, alpha, attack: Some(attack), ..Self::standard() }
    }

    pub fn distortion_regularized(alpha: f32, attack: AttackConfig, betas: Vec<f32>) -> Self {
        ObjectiveConfig {
            kind: ObjectiveKind::DistortionRegularized,
            alpha,
            betas,
            attack: Some(attack),
            ..Self::standard()
        }
    }

    /// Checks the config against a model with `taps` normalization layers.
    pub fn validate(&self, taps: usize) -> Result<()> {
        if self.kind == ObjectiveKind::Standard {
            return Ok(());
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::config("objective.alpha", format!("{} not in [0, 1]", self.alpha)));
        }
        match &self.attack {
            Some(a) => a.validate().map_err(|e| match e {
                Error::Config { field, reason } => Error::config(format!("objective.attack.{field}"), reason),
                other => other,
            })?,
            None => return Err(Error::config("objective.attack", "required for adversarial objectives")),
        }
        if self.kind == ObjectiveKind::DistortionRegularized {
            if self.betas.len() != taps {
                return Err(Error::config(
                    "objective.betas",
                    format!("{} values given but the network has {taps} normalization layers", self.betas.len()),
                ));
            }
            if let Some(b) = self.betas.iter().find(|b| !(**b >= 0.0 && b.is_finite())) {
                return Err(Error::config("objective.betas", format!("{b} is not a finite non-negative weight")));
            }
        }
        Ok(())
    }
}

/// Per-layer distortion sums and their weighted total, all on the tape.
pub struct DistortionTerm {
    pub per_layer: Vec<Var>,
    pub total: Var,
}

/// `Σ_i β_i Σ_j d_ij` for paired clean/adversarial taps.
pub fn distortion_term(
    tape: &mut Tape,
    taps_clean: &[Var],
    taps_adv: &[Var],
    betas: &[f32],
    reduction: DistortionReduction,
) -> Result<DistortionTerm> {
    if taps_clean.len() != taps_adv.len() || taps_clean.len() != betas.len() {
        return Err(Error::InvalidArgument(format!(
            "distortion term needs equal lengths: {} clean taps, {} adversarial taps, {} betas",
            taps_clean.len(),
            taps_adv.len(),
            betas.len()
        )));
    }
    let mut per_layer = Vec::with_capacity(betas.len());
    let mut total: Option<Var> = None;
    for ((&z, &z_adv), &beta) in taps_clean.iter().zip(taps_adv).zip(betas) {
        let sq = tape.squared_distance(z, z_adv)?;
        let layer = match reduction {
            DistortionReduction::Sum => sq,
            DistortionReduction::Mean => {
                let shape = tape.shape(z);
                let per_channel: usize = shape[0] * shape[2..].iter().product::<usize>();
                tape.scale(sq, 1.0 / per_channel as f32)
            }
        };
        per_layer.push(layer);
        let weighted = tape.scale(layer, beta);
        total = Some(match total {
            None => weighted,
            Some(t) => tape.add(t, weighted)?,
        });
    }
    let total = match total {
        Some(t) => t,
        None => tape.leaf(crate::tensor::Tensor::scalar(0.0), false),
    };
    Ok(DistortionTerm { per_layer, total })
}

/// Values and tape handles of one objective evaluation.
pub struct ObjectiveTerms {
    pub total: Var,
    pub clean_logits: Var,
    pub clean_loss: f32,
    pub adversarial_loss: Option<f32>,
    /// Unweighted `Σ_j d_ij` per layer.
    pub distortion: Option<Vec<f32>>,
    /// Statistics of the clean train-mode pass, to be committed after the step.
    pub clean_stats: Vec<BatchStats>,
}

impl ObjectiveTerms {
    pub fn total_value(&self, tape: &Tape) -> f32 {
        tape.value(self.total).item()
    }
}

pub fn loss_standard(model: &Model, tape: &mut Tape, bound: &BoundParams, batch: &LabeledBatch) -> Result<ObjectiveTerms> {
    let x = tape.leaf(batch.inputs.clone(), false);
    let out = model.forward(tape, bound, x, Mode::Train)?;
    let loss = tape.softmax_cross_entropy(out.logits, &batch.labels)?;
    Ok(ObjectiveTerms {
        total: loss,
        clean_logits: out.logits,
        clean_loss: tape.value(loss).item(),
        adversarial_loss: None,
        distortion: None,
        clean_stats: out.batch_stats,
    })
}

/// Eval-mode adversarial batch for the current parameters. Before any
/// running statistics exist, the clean batch's statistics stand in for them.
fn adversarial_inputs(
    model: &Model,
    batch: &LabeledBatch,
    attack: &AttackConfig,
    clean_stats: &[BatchStats],
) -> Result<crate::tensor::Tensor> {
    let attack_model = if model.bn_states().iter().all(|s| s.is_recorded()) {
        Cow::Borrowed(model)
    } else {
        let mut warmed = model.clone();
        warmed.commit_stats(clean_stats)?;
        Cow::Owned(warmed)
    };
    attacks::attack(&attack_model, &batch.inputs, &batch.labels, attack)
}

struct AdversarialParts {
    terms: ObjectiveTerms,
    taps_clean: Vec<Var>,
    taps_adv: Vec<Var>,
}

fn adversarial_parts(
    model: &Model,
    tape: &mut Tape,
    bound: &BoundParams,
    batch: &LabeledBatch,
    cfg: &ObjectiveConfig,
) -> Result<AdversarialParts> {
    let attack = cfg
        .attack
        .as_ref()
        .ok_or_else(|| Error::config("objective.attack", "required for adversarial objectives"))?;
    let x = tape.leaf(batch.inputs.clone(), false);
    let clean = model.forward(tape, bound, x, Mode::Train)?;
    let clean_loss = tape.softmax_cross_entropy(clean.logits, &batch.labels)?;

    let x_adv_value = adversarial_inputs(model, batch, attack, &clean.batch_stats)?;
    let x_adv = tape.leaf(x_adv_value, false);
    // Train-mode pass on its own batch statistics; they are never committed.
    let adv = model.forward(tape, bound, x_adv, Mode::Train)?;
    let adv_loss = tape.softmax_cross_entropy(adv.logits, &batch.labels)?;

    // α·J + (1 − α)·J*, evaluated as J + (1 − α)(J* − J).
    let gap = tape.sub(adv_loss, clean_loss)?;
    let weighted_gap = tape.scale(gap, 1.0 - cfg.alpha);
    let total = tape.add(clean_loss, weighted_gap)?;
    Ok(AdversarialParts {
        terms: ObjectiveTerms {
            total,
            clean_logits: clean.logits,
            clean_loss: tape.value(clean_loss).item(),
            adversarial_loss: Some(tape.value(adv_loss).item()),
            distortion: None,
            clean_stats: clean.batch_stats,
        },
        taps_clean: clean.taps,
        taps_adv: adv.taps,
    })
}

pub fn loss_adversarial(
    model: &Model,
    tape: &mut Tape,
    bound: &BoundParams,
    batch: &LabeledBatch,
    cfg: &ObjectiveConfig,
) -> Result<ObjectiveTerms> {
    Ok(adversarial_parts(model, tape, bound, batch, cfg)?.terms)
}

pub fn loss_distortion_regularized(
    model: &Model,
    tape: &mut Tape,
    bound: &BoundParams,
    batch: &LabeledBatch,
    cfg: &ObjectiveConfig,
) -> Result<ObjectiveTerms> {
    cfg.validate(model.normalization_layer_count())?;
    let parts = adversarial_parts(model, tape, bound, batch, cfg)?;
    let term = distortion_term(tape, &parts.taps_clean, &parts.taps_adv, &cfg.betas, cfg.distortion_reduction)?;
    let mut terms = parts.terms;
    terms.total = tape.add(terms.total, term.total)?;
    terms.distortion = Some(term.per_layer.iter().map(|&v| tape.value(v).item()).collect());
    Ok(terms)
}

/// Dispatches on `cfg.kind`.
pub fn objective_loss(
    model: &Model,
    tape: &mut Tape,
    bound: &BoundParams,
    batch: &LabeledBatch,
    cfg: &ObjectiveConfig,
) -> Result<ObjectiveTerms> {
    match cfg.kind {
        ObjectiveKind::Standard => loss_standard(model, tape, bound, batch),
        ObjectiveKind::Adversarial => loss_adversarial(model, tape, bound, batch, cfg),
        ObjectiveKind::DistortionRegularized => loss_distortion_regularized(model, tape, bound, batch, cfg),
    }
}

/// Objective value for fixed parameters, on a scratch tape.
pub fn objective_value(model: &Model, batch: &LabeledBatch, cfg: &ObjectiveConfig) -> Result<f32> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, false);
    let terms = objective_loss(model, &mut tape, &bound, batch, cfg)?;
    Ok(terms.total_value(&tape))
}
