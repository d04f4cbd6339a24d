//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any failure.
//!
//! `cargo test -p robustfeat --test acceptance` runs everything; append
//! criterion numbers after `--` to run a subset. Criteria 4 to 7 read MNIST
//! from `ROBUSTFEAT_MNIST_DIR` (default `data/mnist`); criterion 7 reads real
//! CIFAR-10 from `ROBUSTFEAT_CIFAR_DIR` when set and a generated test batch
//! otherwise.

#[path = "../common/mod.rs"]
mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use common::checks::{self, TOL};
use common::{random_tensor, read_idx, shipped_spec, tiny_spec, GradCheck};
use robustfeat::attacks::{self, AttackConfig};
use robustfeat::autodiff::Padding;
use robustfeat::data::{write_cifar_batch, DatasetKind, LabeledBatch, Split};
use robustfeat::eval::{evaluate_accuracy, evaluate_distortions, read_accuracy_csv, EvalAttacks};
use robustfeat::experiment::{cmd_report, eval_run, train_run, ExperimentConfig, Overrides};
use robustfeat::nn::Model;
use robustfeat::training::{objective_value, train, DistortionReduction, NullSink, ObjectiveConfig, TrainConfig};
use robustfeat::RngStream;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn mnist() -> Result<PathBuf, String> {
    common::mnist_dir().ok_or_else(|| "MNIST not found; set ROBUSTFEAT_MNIST_DIR".to_string())
}

// ---- 1. gradient oracles ---------------------------------------------------

fn criterion_1() -> Outcome {
    let mut checks_run: Vec<(String, GradCheck)> = Vec::new();
    for seed in 0..3 {
        checks_run.push(("conv same".into(), checks::conv2d(seed, Padding::Same)));
        checks_run.push(("conv valid".into(), checks::conv2d(seed, Padding::Valid)));
        checks_run.push(("maxpool".into(), checks::maxpool(seed)));
        checks_run.push(("dense".into(), checks::dense(seed)));
        checks_run.push(("relu".into(), checks::relu(seed)));
        checks_run.push(("batch norm".into(), checks::batch_norm_train(seed, &[4, 3])));
        checks_run.push(("batch norm conv".into(), checks::batch_norm_train(seed, &[3, 2, 2, 3])));
        checks_run.push(("batch norm eval".into(), checks::batch_norm_eval(seed)));
        checks_run.push(("cross entropy".into(), checks::cross_entropy(seed)));
        checks_run.push(("elementwise".into(), checks::elementwise(seed)));
    }
    for seed in 0..2 {
        checks_run.push(("network".into(), checks::network_standard(&tiny_spec(), seed, 4)));
        for reduction in [DistortionReduction::Sum, DistortionReduction::Mean] {
            checks_run.push((format!("regularized {reduction:?}"), checks::network_objective(seed, &checks::regularized_config(reduction))));
        }
        let adv = ObjectiveConfig::adversarial(0.2, AttackConfig::fgsm(0.1, 0.0, 1.0));
        checks_run.push(("adversarial".into(), checks::network_objective(seed, &adv)));
    }
    let (mut checked, mut kinks, mut worst) = (0, 0, 0.0f64);
    for (name, r) in &checks_run {
        ensure(r.checked > 0, format!("{name}: no coordinate checked"))?;
        ensure(r.worst <= TOL, format!("{name}: relative error {:.2e} at {}", r.worst, r.worst_at))?;
        checked += r.checked;
        kinks += r.skipped_kinks;
        worst = worst.max(r.worst);
    }
    Ok(format!("{} checks, {checked} coordinates, worst relative error {worst:.2e}, {kinks} kink coordinates skipped", checks_run.len()))
}

// ---- 2. degeneracy chain ---------------------------------------------------

fn criterion_2() -> Outcome {
    let mut worst = 0.0f64;
    for seed in 0..5u64 {
        let mut rng = RngStream::new(seed);
        let mut m = Model::build(tiny_spec(), &mut rng).unwrap();
        m.warm_up_stats(&random_tensor(&[8, 1, 8, 8], &mut rng, 0.0, 1.0)).unwrap();
        let b = LabeledBatch { inputs: random_tensor(&[4, 1, 8, 8], &mut rng, 0.0, 1.0), labels: vec![0, 4, 7, 9] };
        let v = |cfg: &ObjectiveConfig| objective_value(&m, &b, cfg).unwrap() as f64;
        let betas = vec![0.05, 0.1];
        let (atk, zero) = (AttackConfig::fgsm(0.1, 0.0, 1.0), AttackConfig::fgsm(0.0, 0.0, 1.0));
        let standard = v(&ObjectiveConfig::standard());
        let pairs = [
            ("eps=0 adversarial vs standard", v(&ObjectiveConfig::adversarial(0.2, zero)), standard),
            ("eps=0 regularized vs standard", v(&ObjectiveConfig::distortion_regularized(0.2, zero, betas.clone())), standard),
            (
                "betas=0 regularized vs adversarial",
                v(&ObjectiveConfig::distortion_regularized(0.2, atk, vec![0.0, 0.0])),
                v(&ObjectiveConfig::adversarial(0.2, atk)),
            ),
            ("alpha=1 betas=0 regularized vs standard", v(&ObjectiveConfig::distortion_regularized(1.0, atk, vec![0.0, 0.0])), standard),
        ];
        for (name, a, b) in pairs {
            ensure((a - b).abs() <= 1e-6, format!("seed {seed} {name}: {a} vs {b}"))?;
            worst = worst.max((a - b).abs());
        }
    }
    Ok(format!("5 seeds x 4 identities, largest gap {worst:.1e}"))
}

// ---- 3. attack contracts ---------------------------------------------------

fn criterion_3() -> Outcome {
    let models: Vec<Model> = (0..4)
        .map(|s| {
            let mut rng = RngStream::new(100 + s);
            let mut m = Model::build(tiny_spec(), &mut rng).unwrap();
            m.warm_up_stats(&random_tensor(&[8, 1, 8, 8], &mut rng, 0.0, 1.0)).unwrap();
            m
        })
        .collect();
    let mut rng = RngStream::new(3);
    let trials = 10_000;
    for t in 0..trials {
        let m = &models[t % models.len()];
        let lo = rng.uniform(0.0, 0.3);
        let hi = rng.uniform(0.7, 1.0);
        let x = random_tensor(&[2, 1, 8, 8], &mut rng, lo, hi);
        let labels = [rng.below(10), rng.below(10)];
        let eps = rng.uniform(0.0, 0.5);
        let steps = 1 + rng.below(5);
        let step = rng.uniform(0.001, 0.2);
        let f = attacks::fgsm(m, &x, &labels, &AttackConfig::fgsm(eps, lo, hi)).unwrap();
        let p = attacks::pgd(m, &x, &labels, &AttackConfig::pgd(eps, step, steps, lo, hi)).unwrap();
        for (name, adv) in [("fgsm", &f), ("pgd", &p)] {
            for (&a, &o) in adv.data().iter().zip(x.data()) {
                ensure((a as f64 - o as f64).abs() <= eps as f64, format!("trial {t} {name}: |{a} - {o}| > {eps}"))?;
                ensure(a >= lo && a <= hi, format!("trial {t} {name}: {a} outside [{lo}, {hi}]"))?;
            }
        }
        let one = attacks::pgd(m, &x, &labels, &AttackConfig::pgd(eps, eps, 1, lo, hi)).unwrap();
        ensure(one.data() == f.data(), format!("trial {t}: PGD(1, eps) differs from FGSM"))?;
        if t % 4 == 0 {
            let id = attacks::pgd(m, &x, &labels, &AttackConfig::pgd(0.0, step, steps, lo, hi)).unwrap();
            ensure(id == x, format!("trial {t}: eps=0 PGD moved the input"))?;
            let id = attacks::fgsm(m, &x, &labels, &AttackConfig::fgsm(0.0, lo, hi)).unwrap();
            ensure(id == x, format!("trial {t}: eps=0 FGSM moved the input"))?;
        }
    }
    Ok(format!("{trials} trials: budget, clip range, PGD(1, eps) = FGSM bit-exact, eps=0 identity on every 4th"))
}

// ---- 4 and 5. desk-scale MNIST ---------------------------------------------

/// Desk-scale protocol settings.
struct Desk {
    network: &'static str,
    train_examples: usize,
    test_examples: usize,
    epochs: usize,
    batch_size: usize,
    learning_rate: f32,
    seed: u64,
}

const DESK: Desk = Desk {
    network: "mnist-small.net.toml",
    train_examples: 10_000,
    test_examples: 2_000,
    epochs: 5,
    batch_size: 64,
    learning_rate: 0.01,
    seed: 1,
};

struct DeskRun {
    name: &'static str,
    clean: f64,
    fgsm: f64,
    pgd: f64,
    distortion: Vec<f64>,
}

fn desk_runs() -> Result<Vec<DeskRun>, String> {
    let dir = mnist()?;
    let train_set = DatasetKind::Mnist
        .load(&dir, Split::Train)
        .and_then(|d| d.subset(DESK.train_examples, &mut RngStream::derive(DESK.seed, "subset")))
        .map_err(|e| e.to_string())?;
    let test = DatasetKind::Mnist
        .load(&dir, Split::Test)
        .and_then(|d| d.subset(DESK.test_examples, &mut RngStream::derive(DESK.seed, "test-subset")))
        .map_err(|e| e.to_string())?;
    let atk = AttackConfig::mnist_fgsm();
    let objectives = [
        ("standard", ObjectiveConfig::standard()),
        ("adversarial", ObjectiveConfig::adversarial(0.2, atk)),
        ("ours", ObjectiveConfig::distortion_regularized(0.2, atk, vec![1e-7, 1e-7, 3e-7])),
    ];
    let attacks = EvalAttacks { fgsm: Some(AttackConfig::mnist_fgsm()), pgd: Some(AttackConfig::mnist_pgd()) };
    let tc = TrainConfig {
        epochs: DESK.epochs,
        batch_size: DESK.batch_size,
        learning_rate: DESK.learning_rate,
        momentum: 0.9,
        seed: RngStream::derive(DESK.seed, "shuffle").next_u64(),
        checkpoint_every: 0,
    };
    let mut runs = Vec::new();
    for (name, objective) in objectives {
        let started = Instant::now();
        let mut model = Model::build(shipped_spec(DESK.network), &mut RngStream::derive(DESK.seed, "init")).unwrap();
        train(&mut model, &train_set, &objective, &tc, &mut NullSink, None).map_err(|e| e.to_string())?;
        let acc = evaluate_accuracy(&model, &test, &attacks, 250).map_err(|e| e.to_string())?;
        let dist = evaluate_distortions(&model, &test, &AttackConfig::mnist_pgd(), 250).map_err(|e| e.to_string())?;
        eprintln!(
            "  {name}: clean {:.4} fgsm {:.4} pgd {:.4} distortion {:?} ({:.0}s)",
            acc.clean,
            acc.fgsm.unwrap(),
            acc.pgd.unwrap(),
            dist.layers,
            started.elapsed().as_secs_f64()
        );
        runs.push(DeskRun { name, clean: acc.clean, fgsm: acc.fgsm.unwrap(), pgd: acc.pgd.unwrap(), distortion: dist.layers });
    }
    Ok(runs)
}

fn criterion_4(runs: &[DeskRun]) -> Outcome {
    let [std, adv, ours] = runs else { unreachable!() };
    let margins = [
        ("PGD adversarial - standard", adv.pgd - std.pgd),
        ("PGD ours - adversarial", ours.pgd - adv.pgd),
        ("FGSM adversarial - standard", adv.fgsm - std.fgsm),
    ];
    let summary = runs
        .iter()
        .map(|r| format!("{} {:.4}/{:.4}/{:.4}", r.name, r.clean, r.fgsm, r.pgd))
        .collect::<Vec<_>>()
        .join(", ");
    let detail = margins.iter().map(|(n, m)| format!("{n} = {m:+.4}")).collect::<Vec<_>>().join(", ");
    let failed: Vec<&str> = margins.iter().filter(|(_, m)| *m < 0.05).map(|(n, _)| *n).collect();
    if failed.is_empty() {
        Ok(format!("clean/fgsm/pgd: {summary}; {detail}"))
    } else {
        Err(format!("margin below 0.05 for {}; clean/fgsm/pgd: {summary}; {detail}", failed.join(" and ")))
    }
}

fn criterion_5(runs: &[DeskRun]) -> Outcome {
    let [std, _, ours] = runs else { unreachable!() };
    let (first, last) = (std.distortion[0], *std.distortion.last().unwrap());
    let fmt = |v: &[f64]| v.iter().map(|d| format!("{d:.4}")).collect::<Vec<_>>().join(" ");
    let curves = format!("standard [{}], ours [{}]", fmt(&std.distortion), fmt(&ours.distortion));
    ensure(last > first, format!("(a) deepest {last:.4} not above first {first:.4}; {curves}"))?;
    let above: Vec<usize> = (0..std.distortion.len()).filter(|&i| ours.distortion[i] > std.distortion[i]).collect();
    ensure(above.len() <= 1, format!("(b) ours above standard at layers {above:?}; {curves}"))?;
    Ok(format!("(a) {last:.4} > {first:.4}; (b) layers above standard: {above:?}; {curves}"))
}

// ---- 6. determinism --------------------------------------------------------

fn snapshot(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn criterion_6() -> Outcome {
    let data = mnist()?;
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let net = common::workspace_root().join("configs").join("mnist-small.net.toml");
    let text = format!(
        "schema_version = 1\nname = \"determinism\"\ndataset = \"mnist\"\ndata_dir = \"{}\"\nnetwork = \"{}\"\nseed = 9\n\n\
         [objective]\nkind = \"distortion_regularized\"\nalpha = 0.2\nbetas = [1e-7, 1e-7, 3e-7]\n\n\
         [train]\nepochs = 2\nsubset = 500\ncheckpoint_every = 1\n\n[eval]\nsubset = 200\n",
        data.display(),
        net.display()
    );
    let cfg = tmp.path().join("determinism.toml");
    std::fs::write(&cfg, text).unwrap();
    let mut snaps = Vec::new();
    for rep in ["first", "second"] {
        let run = tmp.path().join(rep).join("run");
        let r = ExperimentConfig::load(&cfg, &Overrides::default()).map_err(|e| e.to_string())?;
        let (model, _) = train_run(&r, &r.training_data().unwrap(), &run).map_err(|e| e.to_string())?;
        eval_run(&r, &model, &r.test_data().unwrap(), &run).map_err(|e| e.to_string())?;
        cmd_report(std::slice::from_ref(&run), &tmp.path().join(rep).join("report")).map_err(|e| e.to_string())?;
        snaps.push(snapshot(&tmp.path().join(rep)));
    }
    let files: Vec<String> = snaps[0].iter().map(|(p, _)| p.display().to_string()).collect();
    ensure(snaps[0].len() == snaps[1].len(), "different file sets")?;
    for ((pa, a), (pb, b)) in snaps[0].iter().zip(&snaps[1]) {
        ensure(pa == pb && a == b, format!("{} differs between reruns", pa.display()))?;
    }
    ensure(files.iter().any(|f| f.ends_with("model.ckpt")) && files.iter().any(|f| f.ends_with("distortion.csv")), "missing outputs")?;
    Ok(format!("{} files byte-identical across two runs: {}", files.len(), files.join(", ")))
}

// ---- 7. data ingestion -----------------------------------------------------

fn criterion_7() -> Outcome {
    let dir = mnist()?;
    let set = DatasetKind::Mnist.load(&dir, Split::Test).map_err(|e| e.to_string())?;
    let read = |name: &str| {
        std::fs::read(dir.join(name)).or_else(|_| std::fs::read(dir.join(name.replacen("-idx", ".idx", 1)))).unwrap()
    };
    let (img, lbl) = (read("t10k-images-idx3-ubyte"), read("t10k-labels-idx1-ubyte"));
    let ((idims, pixels), (_, labels)) = (read_idx(&img), read_idx(&lbl));
    ensure(set.len() == 10_000 && set.dims() == [1, 28, 28] && idims == [10_000, 28, 28], "MNIST test shape")?;
    ensure(set.labels() == labels, "MNIST labels differ from independent reader")?;
    ensure(set.images().iter().zip(pixels).all(|(&v, &p)| v == p as f32 / 255.0), "MNIST pixels differ from independent reader")?;
    let (ri, rl) = set.to_idx().map_err(|e| e.to_string())?;
    ensure(ri == img && rl == lbl, "MNIST IDX round trip not byte-identical")?;

    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let (cifar_dir, source) = match std::env::var_os("ROBUSTFEAT_CIFAR_DIR").map(PathBuf::from) {
        Some(d) if d.join("test_batch.bin").is_file() => (d, "real"),
        _ => {
            common::write_synthetic_cifar_test(tmp.path(), 7);
            (tmp.path().to_path_buf(), "generated")
        }
    };
    let bytes = std::fs::read(cifar_dir.join("test_batch.bin")).unwrap();
    let cifar = DatasetKind::Cifar10.load(&cifar_dir, Split::Test).map_err(|e| e.to_string())?;
    ensure(cifar.len() == 10_000 && cifar.dims() == [3, 32, 32], "CIFAR test shape")?;
    for (k, rec) in bytes.chunks_exact(3073).enumerate() {
        ensure(cifar.labels()[k] == rec[0], format!("CIFAR label {k}"))?;
        ensure(cifar.image(k).iter().zip(&rec[1..]).all(|(&v, &p)| v == p as f32), format!("CIFAR record {k} pixels"))?;
    }
    let px: Vec<u8> = cifar.images().iter().map(|&v| v as u8).collect();
    ensure(write_cifar_batch(cifar.labels(), &px) == bytes, "CIFAR round trip not byte-identical")?;
    Ok(format!("MNIST test 10000x1x28x28 and {source} CIFAR-10 test 10000x3x32x32 match independent readers and round-trip"))
}

// ---- 8. fixture fidelity ---------------------------------------------------

fn criterion_8() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    for (networks, name) in [(4, "published-4.csv"), (6, "published-6.csv")] {
        let text = common::accuracy_csv(&common::published_runs(networks));
        ensure(text == common::fixture(name), format!("{name}: serialized layout differs:\n{text}"))?;
        let path = tmp.path().join(name);
        std::fs::write(&path, &text).unwrap();
        let back = read_accuracy_csv(&path).map_err(|e| e.to_string())?;
        let runs = common::published_runs(networks);
        ensure(
            back.iter().zip(&runs).all(|(b, r)| (b.clean, b.fgsm, b.pgd) == (r.clean, r.fgsm, r.pgd)),
            format!("{name}: values changed on re-read"),
        )?;
    }
    let ours = common::fixture("published-6.csv").lines().find(|l| l.starts_with("ours,mnist")).unwrap().to_string();
    Ok(format!("4- and 6-network accuracy layouts exact; {ours}"))
}

fn run(n: usize, desk: &mut Option<Result<Vec<DeskRun>, String>>) -> Outcome {
    let caught = catch_unwind(AssertUnwindSafe(|| match n {
        1 => criterion_1(),
        2 => criterion_2(),
        3 => criterion_3(),
        4 | 5 => {
            let runs = desk.get_or_insert_with(desk_runs).as_ref().map_err(|e| e.clone())?;
            if n == 4 {
                criterion_4(runs)
            } else {
                criterion_5(runs)
            }
        }
        6 => criterion_6(),
        7 => criterion_7(),
        8 => criterion_8(),
        _ => Err(format!("no criterion {n}")),
    }));
    caught.unwrap_or_else(|p| {
        Err(p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default())
    })
}

const TITLES: [&str; 8] = [
    "gradient oracles",
    "degeneracy chain",
    "attack contracts",
    "desk MNIST ordering",
    "distortion behavior",
    "determinism",
    "data ingestion",
    "fixture fidelity",
];

fn main() -> ExitCode {
    let selected: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).filter(|n| (1..=8).contains(n)).collect();
    let selected = if selected.is_empty() { (1..=8).collect() } else { selected };
    let mut desk = None;
    let mut failures = 0;
    for n in selected {
        let started = Instant::now();
        let outcome = run(n, &mut desk);
        let secs = started.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {n} {}: PASS ({secs:.1}s) {detail}", TITLES[n - 1]),
            Err(detail) => {
                failures += 1;
                println!("criterion {n} {}: FAIL ({secs:.1}s) {detail}", TITLES[n - 1]);
            }
        }
    }
    if failures == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
