use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use elrt::checkpoint::{
    checkpoint_from_model, load_checkpoint, model_from_checkpoint, save_checkpoint,
};
use elrt::data::{load_cifar10, load_mnist, Dataset};
use elrt::decomp::{approx_error_study, study_to_csv};
use elrt::error::{Error, Result};
use elrt::flops::{model_geometry, model_reduction, training_reduction, TrainingMethod};
use elrt::model::{
    apply_rank_config, build_resnet_cifar, build_small_cnn, parse_rank_config, Model,
};
use elrt::ortho::{RegConfig, RegKind};
use elrt::tensor::{xavier_uniform_init, Tensor};
use elrt::train::{evaluate, train, TrainConfig};

#[derive(Parser)]
#[command(name = "elrt", about = "Low-rank Tucker-2 CNN training and analysis")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ArchArgs {
    /// Architecture: resnet20, resnet56, or smallcnn
    #[arg(long, default_value = "resnet20")]
    arch: String,
    /// Channel width multiplier
    #[arg(long, default_value_t = 1.0)]
    width: f64,
    /// Rank-config file (layer = Phi1,Phi2 | N/A per line)
    #[arg(long)]
    ranks: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a (possibly factorized) model from scratch
    Train {
        #[command(flatten)]
        arch: ArchArgs,
        /// Orthogonality regularizer: so, dso, mc, srip, none
        #[arg(long, default_value = "dso")]
        reg: String,
        #[arg(long, default_value_t = 1e-3)]
        lambda_d: f64,
        #[arg(long, default_value_t = 30)]
        epochs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 128)]
        batch_size: usize,
        #[arg(long, default_value_t = 0.1)]
        lr: f64,
        /// Pad-4 random crop + horizontal flip
        #[arg(long)]
        augment: bool,
        /// Cap the number of training samples (desk-scale runs)
        #[arg(long)]
        train_limit: Option<usize>,
        /// Dataset directory (CIFAR-10 binary batches or IDX files)
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint output path; metrics land beside it
        #[arg(long)]
        out: PathBuf,
    },
    /// Report inference/training FLOPs and parameter reductions
    Flops {
        #[command(flatten)]
        arch: ArchArgs,
        /// Also report another method family's training reduction
        #[arg(long)]
        method: Option<String>,
        #[arg(long)]
        pretrain_epochs: Option<f64>,
        #[arg(long)]
        finetune_epochs: Option<f64>,
        #[arg(long)]
        json: bool,
    },
    /// Matched-budget SVD-vs-Tucker approximation study on a kernel
    ApproxError {
        /// Kernel source: `path.ckpt:layername` (a dense conv layer)
        #[arg(long, conflicts_with = "synthetic")]
        kernel: Option<String>,
        /// Synthetic kernel spec `CINxCOUTxK`
        #[arg(long)]
        synthetic: Option<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Comma-separated parameter budgets
        #[arg(long)]
        budgets: String,
    },
    /// Per-factor orthogonality residuals of a checkpoint
    OrthoReport {
        #[arg(long)]
        ckpt: PathBuf,
    },
    /// Top-1 accuracy of a checkpoint on a dataset's test split
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
}

fn load_dataset(dir: &Path) -> Result<(Dataset<f32>, Dataset<f32>)> {
    if dir.join("data_batch_1.bin").exists() {
        load_cifar10(dir)
    } else if dir.join("train-images-idx3-ubyte").exists() {
        load_mnist(dir)
    } else {
        Err(Error::Config(format!(
            "{}: no CIFAR-10 batches or IDX files found",
            dir.display()
        )))
    }
}

fn build_arch(
    arch: &ArchArgs,
    classes: usize,
    in_channels: usize,
    hw: (usize, usize),
    seed: u64,
) -> Result<(Model<f32>, String)> {
    let mut model = match arch.arch.as_str() {
        "resnet20" => build_resnet_cifar(20, arch.width, classes, in_channels, hw, seed)?,
        "resnet56" => build_resnet_cifar(56, arch.width, classes, in_channels, hw, seed)?,
        "smallcnn" => build_small_cnn(arch.width, classes, in_channels, hw, seed)?,
        other => return Err(Error::Config(format!("unknown architecture {other}"))),
    };
    let rank_text = match &arch.ranks {
        Some(path) => std::fs::read_to_string(path)?,
        None => String::new(),
    };
    let cfg = parse_rank_config(&rank_text)?;
    apply_rank_config(&mut model, &cfg, seed.wrapping_add(1))?;
    Ok((model, rank_text))
}

fn cmd_train(
    arch: ArchArgs,
    reg: String,
    lambda_d: f64,
    epochs: usize,
    seed: u64,
    batch_size: usize,
    lr: f64,
    augment: bool,
    train_limit: Option<usize>,
    data: PathBuf,
    out: PathBuf,
) -> Result<()> {
    let (mut train_set, test_set) = load_dataset(&data)?;
    if let Some(n) = train_limit {
        train_set = train_set.take(n);
    }
    let s = train_set.images.shape();
    let (mut model, rank_text) = build_arch(
        &arch,
        train_set.classes,
        s[1],
        (s[2], s[3]),
        seed,
    )?;
    let cfg = TrainConfig {
        batch_size,
        base_lr: lr,
        epochs,
        lambda_d,
        reg: RegConfig::new(reg.parse::<RegKind>()?),
        seed,
        augment,
        ..TrainConfig::default()
    };
    let (metrics, state) = train(&mut model, &train_set, &test_set, &cfg)?;
    let meta = json!({"epoch": epochs, "seed": seed, "reg": reg, "lambda_d": lambda_d});
    let ckpt = checkpoint_from_model(&model, &state, &rank_text, meta)?;
    save_checkpoint(&out, &ckpt)?;
    std::fs::write(out.with_extension("metrics.csv"), metrics.to_csv())?;
    std::fs::write(out.with_extension("metrics.jsonl"), metrics.to_json_lines())?;
    if let Some(last) = metrics.records.last() {
        println!(
            "trained {} epochs: loss {:.4}, test acc {:.4}, mean residual {:.4}",
            epochs, last.train_loss, last.test_acc, last.mean_residual
        );
    }
    Ok(())
}

fn cmd_flops(
    arch: ArchArgs,
    method: Option<String>,
    pretrain: Option<f64>,
    finetune: Option<f64>,
    as_json: bool,
) -> Result<()> {
    let (model, _) = build_arch(&arch, 10, 3, (32, 32), 0)?;
    let report = model_reduction(&model_geometry(&model))?;
    if as_json {
        println!("{}", report.to_json());
    } else {
        print!("{}", report.to_table());
    }
    if let Some(m) = method {
        let method: TrainingMethod = m.parse()?;
        let r = training_reduction(
            method,
            report.dense_total as f64,
            report.factorized_total as f64,
            pretrain,
            finetune,
        )?;
        println!("training reduction ({m}): {r:.4}x");
    }
    Ok(())
}

fn cmd_approx_error(
    kernel: Option<String>,
    synthetic: Option<String>,
    seed: u64,
    budgets: String,
) -> Result<()> {
    let budgets: Vec<usize> = budgets
        .split(',')
        .map(|b| {
            b.trim()
                .parse::<usize>()
                .map_err(|_| Error::Parse(format!("bad budget `{b}`")))
        })
        .collect::<Result<_>>()?;
    let w: Tensor<f64> = match (kernel, synthetic) {
        (Some(spec), None) => {
            let (path, layer) = spec
                .split_once(':')
                .ok_or_else(|| Error::Parse("expected `path.ckpt:layername`".into()))?;
            let ckpt = load_checkpoint(Path::new(path))?;
            let name = format!("{layer}.w");
            ckpt.array(&name)
                .ok_or_else(|| {
                    Error::Config(format!("checkpoint has no dense kernel {name}"))
                })?
                .cast()
        }
        (None, Some(spec)) => {
            let dims: Vec<usize> = spec
                .split('x')
                .map(|d| {
                    d.parse::<usize>()
                        .map_err(|_| Error::Parse(format!("bad synthetic spec `{spec}`")))
                })
                .collect::<Result<_>>()?;
            if dims.len() != 3 {
                return Err(Error::Parse("synthetic spec must be CINxCOUTxK".into()));
            }
            let (s, t, k) = (dims[0], dims[1], dims[2]);
            xavier_uniform_init(&[s, t, k, k], s * k * k, t * k * k, seed)?
        }
        _ => {
            return Err(Error::Config(
                "exactly one of --kernel / --synthetic is required".into(),
            ))
        }
    };
    let study = approx_error_study(&w, &budgets)?;
    print!("{}", study_to_csv(&study));
    Ok(())
}

fn cmd_ortho_report(ckpt: PathBuf) -> Result<()> {
    let (model, _) = model_from_checkpoint(&load_checkpoint(&ckpt)?)?;
    let report = model.residual_report()?;
    if report.is_empty() {
        println!("no factorized layers");
        return Ok(());
    }
    let w = report.iter().map(|(n, _)| n.len()).max().unwrap();
    for (name, r) in report {
        println!("{name:<w$}  {r:.6e}");
    }
    Ok(())
}

fn cmd_eval(ckpt: PathBuf, data: PathBuf) -> Result<()> {
    let (model, _) = model_from_checkpoint(&load_checkpoint(&ckpt)?)?;
    let (_, test_set) = load_dataset(&data)?;
    let acc = evaluate(&model, &test_set)?;
    println!("top-1 accuracy: {acc:.4}");
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train {
            arch,
            reg,
            lambda_d,
            epochs,
            seed,
            batch_size,
            lr,
            augment,
            train_limit,
            data,
            out,
        } => cmd_train(
            arch, reg, lambda_d, epochs, seed, batch_size, lr, augment, train_limit, data, out,
        ),
        Command::Flops {
            arch,
            method,
            pretrain_epochs,
            finetune_epochs,
            json,
        } => cmd_flops(arch, method, pretrain_epochs, finetune_epochs, json),
        Command::ApproxError {
            kernel,
            synthetic,
            seed,
            budgets,
        } => cmd_approx_error(kernel, synthetic, seed, budgets),
        Command::OrthoReport { ckpt } => cmd_ortho_report(ckpt),
        Command::Eval { ckpt, data } => cmd_eval(ckpt, data),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse(); // exits 2 with usage text on bad flags
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
