//! `robustfeat` command-line tool.
//!
//! Exit codes: 0 on success, 2 for invalid configuration or arguments,
//! 3 for runtime failures (I/O, malformed data, diverged training).

mod image_io;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use robustfeat::attacks::AttackConfig;
use robustfeat::data::Split;
use robustfeat::experiment::{self, ExperimentConfig, Overrides};
use robustfeat::nn::load_checkpoint;
use robustfeat::Error;

const EXIT_CONFIG: u8 = 2;
const EXIT_RUNTIME: u8 = 3;

#[derive(Parser)]
#[command(name = "robustfeat", version, about = "Train, attack and evaluate feature-robust networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Dataset directory, replacing the config's `data_dir`.
    #[arg(long)]
    data_dir: Option<PathBuf>,
    /// Override the top-level seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Use a class-balanced sample of this many examples.
    #[arg(long)]
    subset: Option<usize>,
    /// Attack budget ε, in dataset pixel units.
    #[arg(long)]
    eps: Option<f32>,
    /// PGD iteration count.
    #[arg(long)]
    steps: Option<usize>,
    /// PGD step size, in dataset pixel units.
    #[arg(long)]
    step_size: Option<f32>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write checkpoint, history and resolved config to --out.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on clean, FGSM and PGD inputs and measure feature distortion.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Attack one image and write the perturbed image plus a JSON record.
    Attack {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// PNG or PGM/PPM input; mutually exclusive with --index.
        #[arg(long, conflicts_with = "index", required_unless_present = "index")]
        image: Option<PathBuf>,
        /// Take the example at this position of the test split instead.
        #[arg(long)]
        index: Option<usize>,
        /// True label; defaults to the dataset label (--index) or the clean prediction.
        #[arg(long)]
        label: Option<usize>,
        #[arg(long, value_enum, default_value_t = Method::Pgd)]
        method: Method,
        /// Output PNG; the record goes next to it with a `.json` extension.
        #[arg(long)]
        out: PathBuf,
    },
    /// Merge evaluated run directories into one accuracy table and distortion series.
    Report {
        /// Run directories, in output row order.
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Method {
    Fgsm,
    Pgd,
}

impl Common {
    fn overrides(&self) -> Overrides {
        Overrides {
            seed: self.seed,
            data_dir: self.data_dir.clone(),
            epsilon: self.eps,
            steps: self.steps,
            step_size: self.step_size,
            ..Default::default()
        }
    }
}

fn run(cli: Cli) -> robustfeat::Result<()> {
    match cli.command {
        Command::Train { common, epochs, out } => {
            let overrides = Overrides {
                subset: common.subset,
                epochs,
                objective_epsilon: common.eps,
                epsilon: None,
                ..common.overrides()
            };
            let history = experiment::cmd_train(&common.config, &overrides, &out)?;
            for e in &history.epochs {
                println!("epoch {:>3}  loss {:.4}  train accuracy {:.4}", e.epoch, e.loss, e.train_accuracy);
            }
            println!("wrote {}", out.display());
        }
        Command::Eval { common, checkpoint, out } => {
            let overrides = Overrides { test_subset: common.subset, ..common.overrides() };
            let s = experiment::cmd_eval(&common.config, &checkpoint, &overrides, &out)?;
            let show = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_else(|| "-".into());
            println!("clean {}  fgsm {}  pgd {}", s.clean, show(s.fgsm), show(s.pgd));
            if let Some(d) = &s.distortion {
                for (i, v) in d.iter().enumerate() {
                    println!("layer {i}: mean distortion {v}");
                }
            }
            println!("wrote {}", out.display());
        }
        Command::Attack { common, checkpoint, image, index, label, method, out } => {
            let resolved = ExperimentConfig::load(&common.config, &common.overrides())?;
            let model = load_checkpoint(&resolved.spec, &checkpoint)?;
            let kind = resolved.config.dataset;
            let (x, data_label) = match (image, index) {
                (Some(path), _) => (image_io::read_image(&path, kind)?, None),
                (None, Some(i)) => {
                    let test = kind.load(&resolved.config.data_dir, Split::Test)?;
                    if i >= test.len() {
                        return Err(Error::InvalidArgument(format!("index {i} beyond {} test examples", test.len())));
                    }
                    let b = test.gather(&[i]);
                    (b.inputs, Some(b.labels[0]))
                }
                (None, None) => unreachable!("clap requires --image or --index"),
            };
            let label = match label.or(data_label) {
                Some(l) => l,
                None => model.predict(&x)?[0],
            };
            let attacks = resolved.eval_attacks();
            let cfg: AttackConfig = match method {
                Method::Fgsm => attacks.fgsm,
                Method::Pgd => attacks.pgd,
            }
            .expect("resolved config has both attacks");
            let (adv, record) = experiment::attack_example(&model, &x, label, &cfg)?;
            image_io::write_image(&out, &adv, kind)?;
            let json = serde_json::to_string_pretty(&record).expect("record serializes");
            let record_path = out.with_extension("json");
            std::fs::write(&record_path, format!("{json}\n"))
                .map_err(|e| Error::Io { path: record_path.clone(), source: e })?;
            println!("{json}");
        }
        Command::Report { runs, out } => {
            let c = experiment::cmd_report(&runs, &out)?;
            println!("merged {} rows into {}", c.accuracy.len(), out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config_error() { EXIT_CONFIG } else { EXIT_RUNTIME })
        }
    }
}
