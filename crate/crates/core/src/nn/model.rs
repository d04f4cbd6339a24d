use std::collections::BTreeMap;

use super::spec::{Activation, ActShape, LayerSpec, NetworkSpec, Plan};
use crate::autodiff::{BatchNormState, BatchStats, NormMode, Tape, Var};
use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::Tensor;

/// A named trainable tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub tensor: Tensor,
}

/// Parameter indices used by one layer.
#[derive(Clone, Debug, PartialEq)]
struct LayerParams {
    weight: Option<usize>,
    bias: Option<usize>,
    gamma: Option<usize>,
    beta: Option<usize>,
    bn: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics; the caller decides whether to commit them.
    Train,
    /// Running statistics; pure function of the model and input.
    Eval,
}

/// Parameter leaves of one model bound onto a tape.
pub struct BoundParams {
    vars: Vec<Var>,
}

impl BoundParams {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

pub struct Forward {
    pub logits: Var,
    /// Normalized value `z` of every normalization layer, shallowest first.
    pub taps: Vec<Var>,
    /// Per-tap batch statistics (train mode only).
    pub batch_stats: Vec<BatchStats>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    spec: NetworkSpec,
    plan: Plan,
    params: Vec<Param>,
    layers: Vec<LayerParams>,
    bn: Vec<BatchNormState>,
    /// Free-form provenance carried through checkpoints.
    pub metadata: BTreeMap<String, String>,
}

impl Model {
    /// He-normal weights, zero biases, γ = 1, β = 0, empty running statistics.
    pub fn build(spec: NetworkSpec, rng: &mut RngStream) -> Result<Self> {
        let plan = spec.plan()?;
        let mut params = Vec::new();
        let mut layers = Vec::with_capacity(spec.layers.len());
        let mut bn = Vec::new();
        let mut input = ActShape::Spatial {
            c: spec.input_shape[0],
            h: spec.input_shape[1],
            w: spec.input_shape[2],
        };
        let push = |params: &mut Vec<Param>, name: String, tensor: Tensor| {
            params.push(Param { name, tensor });
            Some(params.len() - 1)
        };
        for (i, layer) in spec.layers.iter().enumerate() {
            let mut lp = LayerParams { weight: None, bias: None, gamma: None, beta: None, bn: None };
            let (wshape, fan_in, out) = match layer {
                LayerSpec::Conv { kernel: [kh, kw], in_channels, out_channels, .. } => (
                    Some(vec![*out_channels, *in_channels, *kh, *kw]),
                    in_channels * kh * kw,
                    *out_channels,
                ),
                LayerSpec::Dense { units, .. } | LayerSpec::SoftmaxOutput { units } => {
                    (Some(vec![input.numel(), *units]), input.numel(), *units)
                }
                LayerSpec::Maxpool => (None, 0, 0),
            };
            if let Some(shape) = wshape {
                let std = (2.0 / fan_in as f32).sqrt();
                let n: usize = shape.iter().product();
                let w = Tensor::new(shape, (0..n).map(|_| std * rng.normal()).collect())?;
                lp.weight = push(&mut params, format!("layer{i}.weight"), w);
                lp.bias = push(&mut params, format!("layer{i}.bias"), Tensor::zeros([out]));
            }
            if layer.normalizes() {
                lp.gamma = push(&mut params, format!("layer{i}.gamma"), Tensor::ones([out]));
                lp.beta = push(&mut params, format!("layer{i}.beta"), Tensor::zeros([out]));
                bn.push(BatchNormState::new(out));
                lp.bn = Some(bn.len() - 1);
            }
            layers.push(lp);
            input = plan.outputs[i].clone();
        }
        Ok(Model { spec, plan, params, layers, bn, metadata: BTreeMap::new() })
    }

    pub(crate) fn from_parts(
        spec: NetworkSpec,
        params: Vec<Param>,
        bn: Vec<BatchNormState>,
        metadata: BTreeMap<String, String>,
    ) -> Result<Self> {
        let mut model = Model::build(spec, &mut RngStream::new(0))?;
        if params.len() != model.params.len() || bn.len() != model.bn.len() {
            return Err(Error::Checkpoint("parameter count does not match spec".into()));
        }
        for (have, want) in params.iter().zip(&model.params) {
            if have.name != want.name || have.tensor.shape() != want.tensor.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor `{}` {:?} does not match spec tensor `{}` {:?}",
                    have.name,
                    have.tensor.shape(),
                    want.name,
                    want.tensor.shape()
                )));
            }
        }
        model.params = params;
        model.bn = bn;
        model.metadata = metadata;
        Ok(model)
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn plan(&self) -> &Plan {
        &self.plan
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.iter_mut().find(|p| p.name == name).map(|p| &mut p.tensor)
    }

    pub fn bn_states(&self) -> &[BatchNormState] {
        &self.bn
    }

    pub fn normalization_layer_count(&self) -> usize {
        self.bn.len()
    }

    /// Per-example shape of each tap.
    pub fn tap_shapes(&self) -> Vec<Vec<usize>> {
        self.plan.tap_layers.iter().map(|&i| self.plan.outputs[i].dims()).collect()
    }

    /// Registers every parameter as a leaf.
    pub fn bind(&self, tape: &mut Tape, requires_grad: bool) -> BoundParams {
        let vars = self.params.iter().map(|p| tape.leaf(p.tensor.clone(), requires_grad)).collect();
        BoundParams { vars }
    }

    /// Runs the network on `x[N, C, H, W]`, exposing each normalization
    /// layer's `z`. Running statistics are never touched here; see
    /// [`Model::commit_stats`].
    pub fn forward(&self, tape: &mut Tape, bound: &BoundParams, x: Var, mode: Mode) -> Result<Forward> {
        let xs = tape.shape(x);
        if xs.len() != 4 || xs[1..] != self.spec.input_shape {
            return Err(Error::Shape(format!(
                "model `{}` expects [N, {}, {}, {}], got {xs:?}",
                self.spec.name, self.spec.input_shape[0], self.spec.input_shape[1], self.spec.input_shape[2]
            )));
        }
        let p = |idx: Option<usize>| bound.vars[idx.expect("layer parameter present")];
        let mut h = x;
        let mut taps = Vec::with_capacity(self.bn.len());
        let mut batch_stats = Vec::new();
        let eps = self.spec.batch_norm.eps;
        for (layer, lp) in self.spec.layers.iter().zip(&self.layers) {
            let activation = match layer {
                LayerSpec::Conv { padding, activation, .. } => {
                    h = tape.conv2d(h, p(lp.weight), p(lp.bias), *padding)?;
                    Some(*activation)
                }
                LayerSpec::Maxpool => {
                    h = tape.maxpool2x2(h)?;
                    None
                }
                LayerSpec::Dense { activation, .. } => {
                    if tape.shape(h).len() != 2 {
                        h = tape.flatten(h)?;
                    }
                    h = tape.dense(h, p(lp.weight), p(lp.bias))?;
                    Some(*activation)
                }
                LayerSpec::SoftmaxOutput { .. } => {
                    if tape.shape(h).len() != 2 {
                        h = tape.flatten(h)?;
                    }
                    h = tape.dense(h, p(lp.weight), p(lp.bias))?;
                    None
                }
            };
            if let Some(b) = lp.bn {
                let norm_mode = match mode {
                    Mode::Train => NormMode::Train,
                    Mode::Eval => NormMode::Eval,
                };
                let out = tape.batch_norm(h, p(lp.gamma), p(lp.beta), &self.bn[b], norm_mode, eps)?;
                taps.push(out.normalized);
                batch_stats.extend(out.batch_stats);
                h = out.output;
            }
            if activation == Some(Activation::Relu) {
                h = tape.relu(h);
            }
        }
        Ok(Forward { logits: h, taps, batch_stats })
    }

    /// Folds train-mode batch statistics into the running statistics.
    pub fn commit_stats(&mut self, stats: &[BatchStats]) -> Result<()> {
        if stats.len() != self.bn.len() {
            return Err(Error::InvalidArgument(format!(
                "{} batch statistics for {} normalization layers",
                stats.len(),
                self.bn.len()
            )));
        }
        let momentum = self.spec.batch_norm.momentum;
        for (state, s) in self.bn.iter_mut().zip(stats) {
            state.commit(s, momentum);
        }
        Ok(())
    }

    /// Eval-mode logits and taps for a batch, off any caller tape.
    pub fn infer(&self, x: &Tensor) -> Result<(Tensor, Vec<Tensor>)> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let xv = tape.leaf(x.clone(), false);
        let out = self.forward(&mut tape, &bound, xv, Mode::Eval)?;
        let taps = out.taps.iter().map(|&t| tape.value(t).clone()).collect();
        Ok((tape.value(out.logits).clone(), taps))
    }

    pub fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        Ok(self.infer(x)?.0.argmax_rows())
    }

    /// Train-mode forward on `x` that commits its batch statistics.
    pub fn warm_up_stats(&mut self, x: &Tensor) -> Result<()> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let xv = tape.leaf(x.clone(), false);
        let out = self.forward(&mut tape, &bound, xv, Mode::Train)?;
        self.commit_stats(&out.batch_stats)
    }
}
