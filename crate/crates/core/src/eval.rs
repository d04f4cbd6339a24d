//! Test-time accuracy under clean/FGSM/PGD inputs and per-layer feature distortion.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attacks::{self, AttackConfig};
use crate::data::DatasetHandle;
use crate::error::{Error, Result};
use crate::nn::Model;

/// Attacks for the two adversarial conditions; `None` skips a condition.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalAttacks {
    pub fgsm: Option<AttackConfig>,
    pub pgd: Option<AttackConfig>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracyReport {
    pub clean: f64,
    pub fgsm: Option<f64>,
    pub pgd: Option<f64>,
    pub samples: usize,
    pub attacks: EvalAttacks,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistortionReport {
    /// Mean of `(z − z*)²` per normalization layer, shallowest first.
    pub layers: Vec<f64>,
    pub attack: AttackConfig,
    pub samples: usize,
}

fn correct(pred: &[usize], labels: &[usize]) -> usize {
    pred.iter().zip(labels).filter(|(p, l)| p == l).count()
}

fn require_nonempty(data: &DatasetHandle) -> Result<()> {
    if data.is_empty() {
        return Err(Error::InvalidArgument("evaluation set is empty".into()));
    }
    Ok(())
}

/// Fractions of `data` classified correctly on clean and attacked inputs.
/// Attacks are generated batch by batch against the eval-mode model.
pub fn evaluate_accuracy(
    model: &Model,
    data: &DatasetHandle,
    attacks: &EvalAttacks,
    batch_size: usize,
) -> Result<AccuracyReport> {
    require_nonempty(data)?;
    let mut hits = [0usize; 3];
    let mut rng = crate::rng::RngStream::new(0);
    for batch in data.batches(batch_size, false, &mut rng)? {
        hits[0] += correct(&model.predict(&batch.inputs)?, &batch.labels);
        for (slot, cfg) in [(1, &attacks.fgsm), (2, &attacks.pgd)] {
            if let Some(cfg) = cfg {
                let adv = attacks::attack(model, &batch.inputs, &batch.labels, cfg)?;
                hits[slot] += correct(&model.predict(&adv)?, &batch.labels);
            }
        }
    }
    let n = data.len() as f64;
    Ok(AccuracyReport {
        clean: hits[0] as f64 / n,
        fgsm: attacks.fgsm.map(|_| hits[1] as f64 / n),
        pgd: attacks.pgd.map(|_| hits[2] as f64 / n),
        samples: data.len(),
        attacks: *attacks,
    })
}

/// Per-layer mean of `(z − z*)²` over examples, positions and features,
/// with `z` and `z*` from eval-mode forwards on `x` and its attacked copy.
pub fn evaluate_distortions(
    model: &Model,
    data: &DatasetHandle,
    attack: &AttackConfig,
    batch_size: usize,
) -> Result<DistortionReport> {
    require_nonempty(data)?;
    let layers = model.normalization_layer_count();
    let mut sums = vec![0.0f64; layers];
    let mut counts = vec![0usize; layers];
    let mut rng = crate::rng::RngStream::new(0);
    for batch in data.batches(batch_size, false, &mut rng)? {
        let adv = attacks::attack(model, &batch.inputs, &batch.labels, attack)?;
        let (_, z) = model.infer(&batch.inputs)?;
        let (_, z_adv) = model.infer(&adv)?;
        for (i, (a, b)) in z.iter().zip(&z_adv).enumerate() {
            sums[i] += a.data().iter().zip(b.data()).map(|(&p, &q)| (p as f64 - q as f64).powi(2)).sum::<f64>();
            counts[i] += a.numel();
        }
    }
    Ok(DistortionReport {
        layers: sums.iter().zip(&counts).map(|(s, &c)| s / c as f64).collect(),
        attack: *attack,
        samples: data.len(),
    })
}

/// One labeled run in a comparison.
#[derive(Clone, Debug, PartialEq)]
pub struct RunSummary {
    pub model: String,
    pub dataset: String,
    pub clean: f64,
    pub fgsm: Option<f64>,
    pub pgd: Option<f64>,
    /// Mean distortion per normalization layer.
    pub distortion: Option<Vec<f64>>,
}

impl RunSummary {
    pub fn from_reports(model: &str, dataset: &str, acc: &AccuracyReport, dist: Option<&DistortionReport>) -> Self {
        RunSummary {
            model: model.to_string(),
            dataset: dataset.to_string(),
            clean: acc.clean,
            fgsm: acc.fgsm,
            pgd: acc.pgd,
            distortion: dist.map(|d| d.layers.clone()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracyRow {
    pub model: String,
    pub dataset: String,
    pub clean: f64,
    pub fgsm: Option<f64>,
    pub pgd: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistortionRow {
    pub model: String,
    pub layer_index: usize,
    pub mean_distortion: f64,
}

/// Merged accuracy table and layer-indexed distortion series, in input order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Comparison {
    pub accuracy: Vec<AccuracyRow>,
    pub distortion: Vec<DistortionRow>,
}

pub fn compare_runs(runs: &[RunSummary]) -> Result<Comparison> {
    let mut out = Comparison::default();
    let mut depth: std::collections::BTreeMap<&str, (usize, &str)> = Default::default();
    for run in runs {
        out.accuracy.push(AccuracyRow {
            model: run.model.clone(),
            dataset: run.dataset.clone(),
            clean: run.clean,
            fgsm: run.fgsm,
            pgd: run.pgd,
        });
        if let Some(d) = &run.distortion {
            match depth.get(run.dataset.as_str()) {
                Some(&(n, other)) if n != d.len() => {
                    return Err(Error::InvalidArgument(format!(
                        "`{}` has {} normalization layers but `{other}` on {} has {n}",
                        run.model,
                        d.len(),
                        run.dataset
                    )));
                }
                Some(_) => {}
                None => {
                    depth.insert(&run.dataset, (d.len(), &run.model));
                }
            }
            for (i, &v) in d.iter().enumerate() {
                out.distortion.push(DistortionRow { model: run.model.clone(), layer_index: i, mean_distortion: v });
            }
        }
    }
    Ok(out)
}

/// Four decimals; whole numbers bare.
fn cell(v: Option<f64>) -> String {
    match v {
        None => String::new(),
        Some(v) if v.fract() == 0.0 => format!("{v}"),
        Some(v) => format!("{v:.4}"),
    }
}

/// Writes `model,dataset,clean,fgsm,pgd` as `0.9939`, `0.3440`, `0`;
/// skipped conditions are empty cells.
pub fn write_accuracy_csv<W: Write>(rows: &[AccuracyRow], w: W) -> Result<()> {
    let mut csv = csv::Writer::from_writer(w);
    csv.write_record(["model", "dataset", "clean", "fgsm", "pgd"])?;
    for r in rows {
        csv.write_record([r.model.clone(), r.dataset.clone(), cell(Some(r.clean)), cell(r.fgsm), cell(r.pgd)])?;
    }
    csv.flush().map_err(|e| Error::Csv(e.into()))
}

/// Writes `model,layer_index,mean_distortion`.
pub fn write_distortion_csv<W: Write>(rows: &[DistortionRow], w: W) -> Result<()> {
    let mut csv = csv::Writer::from_writer(w);
    csv.write_record(["model", "layer_index", "mean_distortion"])?;
    for r in rows {
        csv.write_record([r.model.clone(), r.layer_index.to_string(), r.mean_distortion.to_string()])?;
    }
    csv.flush().map_err(|e| Error::Csv(e.into()))
}

pub fn read_accuracy_csv(path: &Path) -> Result<Vec<AccuracyRow>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

pub fn read_distortion_csv(path: &Path) -> Result<Vec<DistortionRow>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

impl Comparison {
    pub fn write(&self, dir: &Path) -> Result<()> {
        let acc = dir.join("accuracy.csv");
        let dist = dir.join("distortion.csv");
        let f = std::fs::File::create(&acc).map_err(|e| Error::io(&acc, e))?;
        write_accuracy_csv(&self.accuracy, f)?;
        let f = std::fs::File::create(&dist).map_err(|e| Error::io(&dist, e))?;
        write_distortion_csv(&self.distortion, f)
    }
}
