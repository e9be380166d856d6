use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use evfilter::harness::{
    self, gradcheck, inspect_filter, load_or_generate, peek_manifest, run_ablation_suite, shuffle_audit,
    write_metrics_csv, Checkpoint, GradcheckConfig, TrainConfig, EQUIVARIANCE_TOLERANCE,
};
use evfilter::numerics::{Precision, Real};
use evfilter::synth_data::{generate_dataset, load_dataset, save_dataset, GenSpec, McqaInstance};

#[derive(Parser)]
#[command(name = "evfilter", version, about = "Evidence-filter MCQA model on synthetic data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML (or .json) file with TrainConfig fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the training seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Overrides the parameter precision.
    #[arg(long)]
    precision: Option<Precision>,
}

impl Common {
    fn train_config(&self) -> Result<TrainConfig> {
        let mut cfg = match &self.config {
            Some(p) => TrainConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
            None => TrainConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(p) = self.precision {
            cfg.precision = p;
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Writes train.jsonl and test.jsonl into --out.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Trains a model and saves the checkpoint and metrics.csv into --out.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Accuracy of a checkpoint.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset file; defaults to the held-out split of the checkpoint's config.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Re-evaluates under shuffled option orders.
    AuditShuffle {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value_t = 3)]
        n_shuffles: usize,
        /// Fail unless the model is equivariant (residual and argmax changes).
        #[arg(long)]
        require_equivariant: bool,
    },
    /// Per-block alpha/beta table of a constrained checkpoint.
    InspectFilter {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Backprop against central differences on a tiny model.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 20)]
        n_seeds: u64,
    },
    /// Trains and evaluates the five ablation configurations.
    Ablate {
        #[command(flatten)]
        common: Common,
    },
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::GenData { common } => gen_data(&common),
        Command::Train { common } => {
            let cfg = common.train_config()?;
            match cfg.precision {
                Precision::F32 => train_cmd::<f32>(&cfg, &common.out),
                Precision::F64 => train_cmd::<f64>(&cfg, &common.out),
            }
        }
        Command::Eval { checkpoint, data, .. } => {
            dispatch(&checkpoint, |p| match p {
                Precision::F32 => eval_cmd::<f32>(&checkpoint, data.as_deref()),
                Precision::F64 => eval_cmd::<f64>(&checkpoint, data.as_deref()),
            })
        }
        Command::AuditShuffle {
            common,
            checkpoint,
            data,
            n_shuffles,
            require_equivariant,
        } => {
            if n_shuffles == 0 {
                bail!("--n-shuffles must be at least 1");
            }
            let base = common.seed.unwrap_or(0);
            let seeds: Vec<u64> = (base..base + n_shuffles as u64).collect();
            dispatch(&checkpoint, |p| match p {
                Precision::F32 => audit_cmd::<f32>(&checkpoint, data.as_deref(), &seeds, require_equivariant),
                Precision::F64 => audit_cmd::<f64>(&checkpoint, data.as_deref(), &seeds, require_equivariant),
            })
        }
        Command::InspectFilter { checkpoint, .. } => dispatch(&checkpoint, |p| {
            let report = match p {
                Precision::F32 => inspect_filter(&Checkpoint::<f32>::load(&checkpoint)?.params)?,
                Precision::F64 => inspect_filter(&Checkpoint::<f64>::load(&checkpoint)?.params)?,
            };
            println!("{report}");
            Ok(ExitCode::SUCCESS)
        }),
        Command::Gradcheck { common, n_seeds } => {
            let base = common.seed.unwrap_or(0);
            let cfg = GradcheckConfig {
                precision: common.precision.unwrap_or(Precision::F64),
                seeds: (base..base + n_seeds).collect(),
                ..GradcheckConfig::default()
            };
            let report = gradcheck(&cfg)?;
            println!("{report}");
            Ok(if report.passed() {
                ExitCode::SUCCESS
            } else {
                ExitCode::FAILURE
            })
        }
        Command::Ablate { common } => {
            let cfg = common.train_config()?;
            match cfg.precision {
                Precision::F32 => ablate_cmd::<f32>(&cfg, &common.out),
                Precision::F64 => ablate_cmd::<f64>(&cfg, &common.out),
            }
        }
    }
}

fn dispatch(checkpoint: &Path, f: impl FnOnce(Precision) -> Result<ExitCode>) -> Result<ExitCode> {
    let manifest = peek_manifest(checkpoint).with_context(|| format!("reading {}", checkpoint.display()))?;
    f(manifest.precision)
}

fn gen_data(common: &Common) -> Result<ExitCode> {
    let cfg = common.train_config()?;
    let data = &cfg.data;
    let gen = GenSpec {
        seed: common.seed.unwrap_or(data.gen.seed),
        ..data.gen.clone()
    };
    let train = generate_dataset(&gen, data.train_size)?;
    let test = generate_dataset(
        &GenSpec {
            seed: data.test_seed,
            ..gen.clone()
        },
        data.test_size,
    )?;
    fs::create_dir_all(&common.out).with_context(|| format!("creating {}", common.out.display()))?;
    save_dataset(&train, &common.out.join("train.jsonl"))?;
    save_dataset(&test, &common.out.join("test.jsonl"))?;
    println!(
        "wrote {} train and {} test instances to {}",
        train.len(),
        test.len(),
        common.out.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn train_cmd<T: Real>(cfg: &TrainConfig, out: &Path) -> Result<ExitCode> {
    let (train_set, test_set) = load_or_generate(&cfg.data)?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let ck = harness::train::<T>(cfg, &train_set, Some(&test_set), |row| {
        if let Some(acc) = row.eval_accuracy {
            println!("step {:>5}  loss {:.4}  lr {:.2e}  eval {:.4}", row.step, row.loss, row.lr, acc);
        }
    })?;
    ck.save(out)?;
    write_metrics_csv(&out.join("metrics.csv"), &ck.manifest.metrics)?;
    println!("saved checkpoint to {}", out.display());
    Ok(ExitCode::SUCCESS)
}

fn dataset_for(manifest_cfg: &TrainConfig, data: Option<&Path>) -> Result<Vec<McqaInstance>> {
    Ok(match data {
        Some(p) => load_dataset(p)?,
        None => load_or_generate(&manifest_cfg.data)?.1,
    })
}

fn eval_cmd<T: Real>(checkpoint: &Path, data: Option<&Path>) -> Result<ExitCode> {
    let ck = Checkpoint::<T>::load(checkpoint)?;
    let dataset = dataset_for(&ck.manifest.config, data)?;
    let acc = harness::evaluate(&ck.params, &dataset)?;
    println!("accuracy {acc:.4} on {} instances", dataset.len());
    Ok(ExitCode::SUCCESS)
}

fn audit_cmd<T: Real>(checkpoint: &Path, data: Option<&Path>, seeds: &[u64], strict: bool) -> Result<ExitCode> {
    let ck = Checkpoint::<T>::load(checkpoint)?;
    let dataset = dataset_for(&ck.manifest.config, data)?;
    let report = shuffle_audit(&ck.params, &dataset, seeds)?;
    println!("{report}");
    let equivariant = report.max_logit_residual <= EQUIVARIANCE_TOLERANCE && report.argmax_change_fraction == 0.0;
    if strict && !equivariant {
        eprintln!("model is not permutation-equivariant");
        return Ok(ExitCode::FAILURE);
    }
    Ok(ExitCode::SUCCESS)
}

fn ablate_cmd<T: Real>(cfg: &TrainConfig, out: &Path) -> Result<ExitCode> {
    let (train_set, test_set) = load_or_generate(&cfg.data)?;
    let table = run_ablation_suite::<T>(cfg, &train_set, &test_set, |row| {
        eprintln!("{}: {:.4}", row.label, row.accuracy);
    })?;
    println!("{table}");
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    fs::write(out.join("ablation.json"), serde_json::to_string_pretty(&table)?)?;
    fs::write(out.join("ablation.txt"), format!("{table}\n"))?;
    Ok(ExitCode::SUCCESS)
}
