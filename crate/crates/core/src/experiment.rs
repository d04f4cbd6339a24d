//! Experiment configs and the train → evaluate → report pipeline.
//!
//! A run directory holds:
//!
//! | file | content |
//! |---|---|
//! | `resolved.toml` | fully resolved config (network inline, seeds, defaults filled in) |
//! | `model.ckpt` | final checkpoint |
//! | `history.csv` | `epoch,split,metric,value` training metrics |
//! | `checkpoints/epoch-N.ckpt` | intermediate checkpoints, when `checkpoint_every > 0` |
//! | `accuracy.csv`, `distortion.csv` | evaluation output |
//!
//! All randomness derives from the top-level `seed`: the streams labeled
//! `init`, `shuffle`, `subset` and `test-subset` feed parameter
//! initialization, per-epoch shuffling and the two subset draws.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attacks::{self, AttackConfig};
use crate::data::{DatasetHandle, DatasetKind, Split};
use crate::error::{Error, Result};
use crate::eval::{self, Comparison, EvalAttacks, RunSummary};
use crate::nn::{load_checkpoint, save_checkpoint, Model, NetworkSpec};
use crate::rng::RngStream;
use crate::tensor::Tensor;
use crate::training::{self, CsvSink, History, ObjectiveConfig, ObjectiveKind, TrainConfig};

pub const EXPERIMENT_SCHEMA_VERSION: u32 = 1;
pub const RESOLVED_CONFIG: &str = "resolved.toml";
pub const CHECKPOINT: &str = "model.ckpt";
pub const HISTORY: &str = "history.csv";
pub const ACCURACY: &str = "accuracy.csv";
pub const DISTORTION: &str = "distortion.csv";

/// A network given by file path (relative to the config) or inline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum NetworkRef {
    Path(PathBuf),
    Inline(Box<NetworkSpec>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    #[serde(default = "TrainSection::default_epochs")]
    pub epochs: usize,
    #[serde(default = "TrainSection::default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "TrainSection::default_learning_rate")]
    pub learning_rate: f32,
    #[serde(default = "TrainSection::default_momentum")]
    pub momentum: f32,
    #[serde(default)]
    pub checkpoint_every: usize,
    /// Train on a class-balanced sample of this many examples.
    #[serde(default)]
    pub subset: Option<usize>,
}

impl TrainSection {
    fn default_epochs() -> usize {
        TrainConfig::default().epochs
    }
    fn default_batch_size() -> usize {
        TrainConfig::default().batch_size
    }
    fn default_learning_rate() -> f32 {
        TrainConfig::default().learning_rate
    }
    fn default_momentum() -> f32 {
        TrainConfig::default().momentum
    }
}

impl Default for TrainSection {
    fn default() -> Self {
        let d = TrainConfig::default();
        TrainSection {
            epochs: d.epochs,
            batch_size: d.batch_size,
            learning_rate: d.learning_rate,
            momentum: d.momentum,
            checkpoint_every: d.checkpoint_every,
            subset: None,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistortionAttack {
    #[default]
    Pgd,
    Fgsm,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    /// Evaluate on a class-balanced sample of this many test examples.
    #[serde(default)]
    pub subset: Option<usize>,
    #[serde(default = "EvalSection::default_batch_size")]
    pub batch_size: usize,
    /// Defaults to the dataset's published FGSM setting.
    #[serde(default)]
    pub fgsm: Option<AttackConfig>,
    /// Defaults to the dataset's published PGD setting.
    #[serde(default)]
    pub pgd: Option<AttackConfig>,
    #[serde(default)]
    pub distortion_attack: DistortionAttack,
}

impl EvalSection {
    fn default_batch_size() -> usize {
        250
    }
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            subset: None,
            batch_size: Self::default_batch_size(),
            fgsm: None,
            pgd: None,
            distortion_attack: DistortionAttack::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    /// Label used for this run in reports.
    pub name: String,
    pub dataset: DatasetKind,
    /// Directory holding the dataset files, relative to the config file.
    pub data_dir: PathBuf,
    pub network: NetworkRef,
    pub seed: u64,
    pub objective: ObjectiveConfig,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub eval: EvalSection,
}

/// Command-line style overrides applied on top of a loaded config.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    /// Training subset size.
    pub subset: Option<usize>,
    pub test_subset: Option<usize>,
    /// Replaces the config's `data_dir`.
    pub data_dir: Option<PathBuf>,
    pub epochs: Option<usize>,
    pub epsilon: Option<f32>,
    pub steps: Option<usize>,
    pub step_size: Option<f32>,
    /// ε of the attack used inside adversarial training objectives.
    pub objective_epsilon: Option<f32>,
}

fn default_attacks(kind: DatasetKind) -> (AttackConfig, AttackConfig) {
    match kind {
        DatasetKind::Mnist => (AttackConfig::mnist_fgsm(), AttackConfig::mnist_pgd()),
        DatasetKind::Cifar10 => (AttackConfig::cifar_fgsm(), AttackConfig::cifar_pgd()),
    }
}

/// Config with paths made absolute, the network inlined and defaults filled in.
#[derive(Clone, Debug, PartialEq)]
pub struct Resolved {
    pub config: ExperimentConfig,
    pub spec: NetworkSpec,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::config("experiment", e.to_string()))?;
        if cfg.schema_version != EXPERIMENT_SCHEMA_VERSION {
            return Err(Error::config(
                "schema_version",
                format!("unsupported version {} (expected {EXPERIMENT_SCHEMA_VERSION})", cfg.schema_version),
            ));
        }
        Ok(cfg)
    }

    /// Parses `path`, resolves relative paths against its directory and validates.
    pub fn load(path: &Path, overrides: &Overrides) -> Result<Resolved> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config("config", format!("cannot read {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_toml(&text)?.resolve(base, overrides)
    }

    pub fn resolve(mut self, base: &Path, overrides: &Overrides) -> Result<Resolved> {
        let absolute = |p: &Path| if p.is_absolute() { p.to_path_buf() } else { base.join(p) };
        let spec = match &self.network {
            NetworkRef::Path(p) => {
                let p = absolute(p);
                if !p.is_file() {
                    return Err(Error::config("network", format!("{} does not exist", p.display())));
                }
                NetworkSpec::load(&p)?
            }
            NetworkRef::Inline(spec) => (**spec).clone(),
        };
        self.network = NetworkRef::Inline(Box::new(spec.clone()));
        self.data_dir = match &overrides.data_dir {
            Some(d) => d.clone(),
            None => absolute(&self.data_dir),
        };

        if let Some(s) = overrides.seed {
            self.seed = s;
        }
        if let Some(n) = overrides.subset {
            self.train.subset = Some(n);
        }
        if let Some(n) = overrides.test_subset {
            self.eval.subset = Some(n);
        }
        if let Some(e) = overrides.epochs {
            self.train.epochs = e;
        }
        let (fgsm, pgd) = default_attacks(self.dataset);
        let mut fgsm = self.eval.fgsm.unwrap_or(fgsm);
        let mut pgd = self.eval.pgd.unwrap_or(pgd);
        if let Some(eps) = overrides.epsilon {
            fgsm.epsilon = eps;
            fgsm.step_size = eps;
            pgd.epsilon = eps;
        }
        if let Some(steps) = overrides.steps {
            pgd.steps = steps;
        }
        if let Some(step) = overrides.step_size {
            pgd.step_size = step;
        }
        self.eval.fgsm = Some(fgsm);
        self.eval.pgd = Some(pgd);
        if self.objective.kind != ObjectiveKind::Standard && self.objective.attack.is_none() {
            self.objective.attack = Some(default_attacks(self.dataset).0);
        }
        if let (Some(eps), Some(a)) = (overrides.objective_epsilon, self.objective.attack.as_mut()) {
            a.epsilon = eps;
            if a.steps == 1 {
                a.step_size = eps;
            }
        }

        let resolved = Resolved { config: self, spec };
        resolved.validate()?;
        Ok(resolved)
    }
}

fn check_attack_units(field: &str, a: &AttackConfig, kind: DatasetKind) -> Result<()> {
    a.validate().map_err(|e| match e {
        Error::Config { field: f, reason } => Error::config(format!("{field}.{f}"), reason),
        other => other,
    })?;
    let (lo, hi) = kind.clip_range();
    if a.clip_min != lo || a.clip_max != hi {
        return Err(Error::config(
            format!("{field}.clip_min"),
            format!("[{}, {}] does not match {} pixel range [{lo}, {hi}]", a.clip_min, a.clip_max, kind.name()),
        ));
    }
    if a.epsilon > hi - lo {
        return Err(Error::config(
            format!("{field}.epsilon"),
            format!("{} exceeds the whole {} pixel range [{lo}, {hi}]", a.epsilon, kind.name()),
        ));
    }
    Ok(())
}

impl Resolved {
    fn validate(&self) -> Result<()> {
        let c = &self.config;
        if self.spec.input_shape != c.dataset.dims() {
            return Err(Error::config(
                "network",
                format!("input shape {:?} does not match {} images {:?}", self.spec.input_shape, c.dataset.name(), c.dataset.dims()),
            ));
        }
        self.spec.plan()?;
        c.objective.validate(self.spec.normalization_layer_count())?;
        if c.objective.kind != ObjectiveKind::Standard {
            if let Some(a) = &c.objective.attack {
                check_attack_units("objective.attack", a, c.dataset)?;
            }
        }
        for (field, a) in [("eval.fgsm", &c.eval.fgsm), ("eval.pgd", &c.eval.pgd)] {
            if let Some(a) = a {
                check_attack_units(field, a, c.dataset)?;
            }
        }
        self.train_config().validate()?;
        if c.eval.batch_size < 1 {
            return Err(Error::config("eval.batch_size", "must be at least 1"));
        }
        if !c.data_dir.is_dir() {
            return Err(Error::config("data_dir", format!("{} is not a directory", c.data_dir.display())));
        }
        Ok(())
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.config.train;
        TrainConfig {
            epochs: t.epochs,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            momentum: t.momentum,
            seed: RngStream::derive(self.config.seed, "shuffle").next_u64(),
            checkpoint_every: t.checkpoint_every,
        }
    }

    pub fn eval_attacks(&self) -> EvalAttacks {
        EvalAttacks { fgsm: self.config.eval.fgsm, pgd: self.config.eval.pgd }
    }

    pub fn distortion_attack(&self) -> AttackConfig {
        let e = &self.config.eval;
        match e.distortion_attack {
            DistortionAttack::Pgd => e.pgd,
            DistortionAttack::Fgsm => e.fgsm,
        }
        .expect("attacks filled in by resolve")
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(&self.config).expect("experiment config serializes")
    }

    pub fn build_model(&self) -> Result<Model> {
        let mut model = Model::build(self.spec.clone(), &mut RngStream::derive(self.config.seed, "init"))?;
        model.metadata.insert("experiment".into(), self.config.name.clone());
        model.metadata.insert("seed".into(), self.config.seed.to_string());
        Ok(model)
    }

    pub fn training_data(&self) -> Result<DatasetHandle> {
        let full = self.config.dataset.load(&self.config.data_dir, Split::Train)?;
        match self.config.train.subset {
            Some(n) => full.subset(n, &mut RngStream::derive(self.config.seed, "subset")),
            None => Ok(full),
        }
    }

    pub fn test_data(&self) -> Result<DatasetHandle> {
        let full = self.config.dataset.load(&self.config.data_dir, Split::Test)?;
        match self.config.eval.subset {
            Some(n) => full.subset(n, &mut RngStream::derive(self.config.seed, "test-subset")),
            None => Ok(full),
        }
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Trains on an already-loaded dataset and writes the run directory.
pub fn train_run(resolved: &Resolved, data: &DatasetHandle, out: &Path) -> Result<(Model, History)> {
    create_dir(out)?;
    write_file(&out.join(RESOLVED_CONFIG), resolved.to_toml().as_bytes())?;
    let tc = resolved.train_config();
    let ckpt_dir = out.join("checkpoints");
    if tc.checkpoint_every > 0 {
        create_dir(&ckpt_dir)?;
    }
    let mut model = resolved.build_model()?;
    let mut sink = CsvSink::create(&out.join(HISTORY))?;
    let history = training::train(&mut model, data, &resolved.config.objective, &tc, &mut sink, Some(&ckpt_dir))?;
    save_checkpoint(&model, &out.join(CHECKPOINT))?;
    Ok((model, history))
}

/// Evaluates `model` on `data` and writes `accuracy.csv` and `distortion.csv` into `out`.
pub fn eval_run(resolved: &Resolved, model: &Model, data: &DatasetHandle, out: &Path) -> Result<RunSummary> {
    create_dir(out)?;
    let bs = resolved.config.eval.batch_size;
    let acc = eval::evaluate_accuracy(model, data, &resolved.eval_attacks(), bs)?;
    let dist = eval::evaluate_distortions(model, data, &resolved.distortion_attack(), bs)?;
    let summary = RunSummary::from_reports(
        &resolved.config.name,
        resolved.config.dataset.name(),
        &acc,
        Some(&dist),
    );
    eval::compare_runs(std::slice::from_ref(&summary))?.write(out)?;
    Ok(summary)
}

/// `train` subcommand: loads data per the config and trains into `out`.
pub fn cmd_train(config: &Path, overrides: &Overrides, out: &Path) -> Result<History> {
    let resolved = ExperimentConfig::load(config, overrides)?;
    let data = resolved.training_data()?;
    Ok(train_run(&resolved, &data, out)?.1)
}

/// `eval` subcommand: evaluates a checkpoint against the config's test set.
pub fn cmd_eval(config: &Path, checkpoint: &Path, overrides: &Overrides, out: &Path) -> Result<RunSummary> {
    let resolved = ExperimentConfig::load(config, overrides)?;
    let model = load_checkpoint(&resolved.spec, checkpoint)?;
    let data = resolved.test_data()?;
    eval_run(&resolved, &model, &data, out)
}

/// Reads the evaluation CSVs of one run directory.
pub fn read_run(dir: &Path) -> Result<Vec<RunSummary>> {
    let acc = eval::read_accuracy_csv(&dir.join(ACCURACY))?;
    let dist_path = dir.join(DISTORTION);
    let dist = if dist_path.is_file() { eval::read_distortion_csv(&dist_path)? } else { Vec::new() };
    Ok(acc
        .into_iter()
        .map(|row| {
            let layers: Vec<f64> =
                dist.iter().filter(|d| d.model == row.model).map(|d| d.mean_distortion).collect();
            RunSummary {
                model: row.model,
                dataset: row.dataset,
                clean: row.clean,
                fgsm: row.fgsm,
                pgd: row.pgd,
                distortion: (!layers.is_empty()).then_some(layers),
            }
        })
        .collect())
}

/// `report` subcommand: merges run directories, in the given order, into `out`.
pub fn cmd_report(runs: &[PathBuf], out: &Path) -> Result<Comparison> {
    if runs.is_empty() {
        return Err(Error::InvalidArgument("report needs at least one run directory".into()));
    }
    let mut summaries = Vec::new();
    for dir in runs {
        summaries.extend(read_run(dir)?);
    }
    let comparison = eval::compare_runs(&summaries)?;
    create_dir(out)?;
    comparison.write(out)?;
    Ok(comparison)
}

/// Outcome of attacking a single example.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackRecord {
    pub label: usize,
    pub clean_prediction: usize,
    pub adversarial_prediction: usize,
    pub clean_loss: f32,
    pub adversarial_loss: f32,
    pub linf: f64,
    pub attack: AttackConfig,
}

/// Attacks one `[1, C, H, W]` example and returns `x*` with its record.
pub fn attack_example(model: &Model, x: &Tensor, label: usize, cfg: &AttackConfig) -> Result<(Tensor, AttackRecord)> {
    let want = model.spec().input_shape;
    if x.shape() != [1, want[0], want[1], want[2]] {
        return Err(Error::Shape(format!("expected one [{}, {}, {}] image, got {:?}", want[0], want[1], want[2], x.shape())));
    }
    let labels = [label];
    let adv = attacks::attack(model, x, &labels, cfg)?;
    let record = AttackRecord {
        label,
        clean_prediction: model.predict(x)?[0],
        adversarial_prediction: model.predict(&adv)?[0],
        clean_loss: attacks::loss_at(model, x, &labels)?,
        adversarial_loss: attacks::loss_at(model, &adv, &labels)?,
        linf: attacks::linf_distance(x, &adv),
        attack: *cfg,
    };
    Ok((adv, record))
}
