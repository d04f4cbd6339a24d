//! Batch normalization, split into a normalization node (whose value is the
//! pre-affine `z`) and a per-channel affine node.

use super::{Op, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormMode {
    /// Normalize with the statistics of the current batch.
    Train,
    /// Normalize with the running statistics.
    Eval,
}

/// Per-feature biased mean and variance of one batch.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormState {
    pub running_mean: Vec<f32>,
    pub running_var: Vec<f32>,
    /// Number of committed batches; zero means eval mode is unavailable.
    pub updates: u64,
}

impl BatchNormState {
    pub fn new(features: usize) -> Self {
        BatchNormState {
            running_mean: vec![0.0; features],
            running_var: vec![0.0; features],
            updates: 0,
        }
    }

    pub fn features(&self) -> usize {
        self.running_mean.len()
    }

    pub fn is_recorded(&self) -> bool {
        self.updates > 0
    }

    /// `running ← momentum · running + (1 − momentum) · batch`. The first
    /// commit copies the batch statistics so the zero initial state does not
    /// bias early estimates.
    pub fn commit(&mut self, stats: &BatchStats, momentum: f32) {
        if self.updates == 0 {
            self.running_mean.copy_from_slice(&stats.mean);
            self.running_var.copy_from_slice(&stats.var);
        } else {
            for (r, &b) in self.running_mean.iter_mut().zip(&stats.mean) {
                *r = momentum * *r + (1.0 - momentum) * b;
            }
            for (r, &b) in self.running_var.iter_mut().zip(&stats.var) {
                *r = momentum * *r + (1.0 - momentum) * b;
            }
        }
        self.updates += 1;
    }
}

pub struct BatchNormOutput {
    /// `γ · z + β`.
    pub output: Var,
    /// The normalized value `z`.
    pub normalized: Var,
    /// Present in train mode; committing it to the running state is the caller's call.
    pub batch_stats: Option<BatchStats>,
}

/// (batch, channels, positions per channel) for a `[N, C, ...]` tensor.
fn layout(shape: &[usize]) -> (usize, usize, usize) {
    (shape[0], shape[1], shape[2..].iter().product())
}

impl Tape {
    /// Batch normalization over axis 1 of a `[N, C]` or `[N, C, H, W]` input.
    pub fn batch_norm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        state: &BatchNormState,
        mode: NormMode,
        eps: f32,
    ) -> Result<BatchNormOutput> {
        let xs = self.shape(input);
        if xs.len() < 2 || state.features() != xs[1] {
            return Err(Error::Shape(format!(
                "batch_norm: input {xs:?} vs {} running features",
                state.features()
            )));
        }
        let (n, c, inner) = layout(xs);
        let x = self.value(input).data();
        let (mean, var, batch_stats) = match mode {
            NormMode::Train => {
                let count = (n * inner) as f64;
                let mut mean = vec![0.0f64; c];
                let mut var = vec![0.0f64; c];
                for b in 0..n {
                    for (ch, m) in mean.iter_mut().enumerate() {
                        *m += x[(b * c + ch) * inner..][..inner].iter().map(|&v| v as f64).sum::<f64>();
                    }
                }
                mean.iter_mut().for_each(|m| *m /= count);
                for b in 0..n {
                    for (ch, v) in var.iter_mut().enumerate() {
                        let m = mean[ch];
                        *v += x[(b * c + ch) * inner..][..inner]
                            .iter()
                            .map(|&s| (s as f64 - m).powi(2))
                            .sum::<f64>();
                    }
                }
                var.iter_mut().for_each(|v| *v /= count);
                let mean: Vec<f32> = mean.into_iter().map(|m| m as f32).collect();
                let var: Vec<f32> = var.into_iter().map(|v| v as f32).collect();
                let stats = BatchStats { mean: mean.clone(), var: var.clone() };
                (mean, var, Some(stats))
            }
            NormMode::Eval => {
                if !state.is_recorded() {
                    return Err(Error::NoRunningStats);
                }
                (state.running_mean.clone(), state.running_var.clone(), None)
            }
        };
        let inv_std: Vec<f32> = var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
        let mut z = Vec::with_capacity(x.len());
        for b in 0..n {
            for ch in 0..c {
                let (m, s) = (mean[ch], inv_std[ch]);
                z.extend(x[(b * c + ch) * inner..][..inner].iter().map(|&v| (v - m) * s));
            }
        }
        let value = Tensor::new(xs.to_vec(), z).unwrap();
        let normalized = self.push(
            value,
            Op::Normalize { input, inv_std, batch_stats: mode == NormMode::Train },
            &[input],
        );
        let output = self.channel_affine(normalized, gamma, beta)?;
        Ok(BatchNormOutput { output, normalized, batch_stats })
    }

    /// `γ[c] · x + β[c]` along axis 1.
    pub fn channel_affine(&mut self, input: Var, gamma: Var, beta: Var) -> Result<Var> {
        let xs = self.shape(input);
        let (gs, bs) = (self.shape(gamma), self.shape(beta));
        if xs.len() < 2 || gs != [xs[1]] || bs != [xs[1]] {
            return Err(Error::Shape(format!(
                "channel_affine: input {xs:?}, gamma {gs:?}, beta {bs:?}"
            )));
        }
        let (n, c, inner) = layout(xs);
        let (x, g, b) = (self.value(input).data(), self.value(gamma).data(), self.value(beta).data());
        let mut out = Vec::with_capacity(x.len());
        for i in 0..n {
            for ch in 0..c {
                out.extend(x[(i * c + ch) * inner..][..inner].iter().map(|&v| g[ch] * v + b[ch]));
            }
        }
        let value = Tensor::new(xs.to_vec(), out).unwrap();
        Ok(self.push(value, Op::ChannelAffine { input, gamma, beta }, &[input, gamma, beta]))
    }
}

pub(crate) fn normalize_backward(
    shape: &[usize],
    xhat: &[f32],
    inv_std: &[f32],
    batch_stats: bool,
    grad: &[f32],
    dx: &mut [f32],
) {
    let (n, c, inner) = layout(shape);
    if !batch_stats {
        for b in 0..n {
            for ch in 0..c {
                let off = (b * c + ch) * inner;
                for s in off..off + inner {
                    dx[s] += grad[s] * inv_std[ch];
                }
            }
        }
        return;
    }
    let count = (n * inner) as f32;
    let mut sum_g = vec![0.0f32; c];
    let mut sum_gx = vec![0.0f32; c];
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * inner;
            for s in off..off + inner {
                sum_g[ch] += grad[s];
                sum_gx[ch] += grad[s] * xhat[s];
            }
        }
    }
    for b in 0..n {
        for ch in 0..c {
            let (mg, mgx, is) = (sum_g[ch] / count, sum_gx[ch] / count, inv_std[ch]);
            let off = (b * c + ch) * inner;
            for s in off..off + inner {
                dx[s] += is * (grad[s] - mg - xhat[s] * mgx);
            }
        }
    }
}

pub(crate) fn affine_backward(
    shape: &[usize],
    x: &[f32],
    gamma: &[f32],
    grad: &[f32],
    dx: Option<&mut [f32]>,
    dgamma: Option<&mut [f32]>,
    dbeta: Option<&mut [f32]>,
) {
    let (n, c, inner) = layout(shape);
    let planes = || (0..n).flat_map(move |b| (0..c).map(move |ch| (ch, (b * c + ch) * inner)));
    if let Some(dx) = dx {
        for (ch, off) in planes() {
            for s in off..off + inner {
                dx[s] += gamma[ch] * grad[s];
            }
        }
    }
    if let Some(dg) = dgamma {
        for (ch, off) in planes() {
            dg[ch] += (off..off + inner).map(|s| grad[s] * x[s]).sum::<f32>();
        }
    }
    if let Some(db) = dbeta {
        for (ch, off) in planes() {
            db[ch] += grad[off..off + inner].iter().sum::<f32>();
        }
    }
}
