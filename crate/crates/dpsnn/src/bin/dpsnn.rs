//! Command-line front end: train a differentially private spiking network,
//! evaluate a checkpoint, or query the privacy accountant.

use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use dpsnn::accountant::PrivacyLedger;
use dpsnn::checkpoint::load_checkpoint;
use dpsnn::data::{load_split, synth_dataset, LabeledImageSet, Split};
use dpsnn::network::{mnist_small, vgg_cifar, NetworkSpec, PoolMethod};
use dpsnn::neuron::NeuronParams;
use dpsnn::trainer::{evaluate, train, NoiseSetting, RunConfig};

#[derive(Parser)]
#[command(name = "dpsnn", version, about = "Differentially private spiking network trainer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a network under DP-SGD and write metrics plus checkpoints.
    Train(TrainArgs),
    /// Report test accuracy of a saved checkpoint.
    Eval(EvalArgs),
    /// Convert (sigma, q, steps, delta) into an (epsilon, alpha) report.
    Accountant(AccountantArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum DatasetArg {
    Mnist,
    Fashion,
    Synth,
}

#[derive(Clone, Copy, ValueEnum)]
enum NetArg {
    MnistSmall,
    VggCifar,
}

#[derive(Clone, Copy, ValueEnum)]
enum PoolingArg {
    Max,
    Avg,
    Tep,
}

#[derive(Clone, Copy, ValueEnum)]
enum NeuronArg {
    Lif,
    If,
}

#[derive(Args)]
#[command(group(clap::ArgGroup::new("noise").required(true).args(["sigma", "target_epsilon"])))]
struct TrainArgs {
    #[arg(long, value_enum, default_value_t = DatasetArg::Mnist)]
    dataset: DatasetArg,
    #[arg(long, value_enum, default_value_t = NetArg::MnistSmall)]
    net: NetArg,
    #[arg(long, value_enum, default_value_t = PoolingArg::Tep)]
    pooling: PoolingArg,
    #[arg(long, value_enum, default_value_t = NeuronArg::Lif)]
    neuron: NeuronArg,
    #[arg(long, default_value_t = 10)]
    epochs: usize,
    #[arg(long, default_value_t = 256)]
    batch_size: usize,
    #[arg(long, default_value_t = 0.005)]
    lr: f64,
    /// Per-sample gradient norm bound; omit to disable clipping.
    #[arg(long)]
    clip: Option<f64>,
    /// Noise scale as a multiple of the clip bound.
    #[arg(long)]
    sigma: Option<f64>,
    /// Privacy target; the noise scale is calibrated to reach it at the
    /// planned step count.
    #[arg(long)]
    target_epsilon: Option<f64>,
    #[arg(long, default_value_t = 1e-5)]
    delta: f64,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Poisson-sample batches at rate B/N so runs match the accounting
    /// model exactly.
    #[arg(long)]
    poisson_sampling: bool,
    /// Draw noise from the operating system; sacrifices reproducibility.
    #[arg(long)]
    secure_rng: bool,
    /// Output directory for metrics.csv and per-epoch checkpoints.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Directory holding the idx files (defaults to ./data/<dataset>).
    #[arg(long)]
    data_dir: Option<PathBuf>,
    /// Use only the first N training samples.
    #[arg(long)]
    train_limit: Option<usize>,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    time_steps: usize,
    #[arg(long, default_value_t = 0.5)]
    leak: f64,
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, value_enum, default_value_t = DatasetArg::Mnist)]
    dataset: DatasetArg,
    #[arg(long)]
    data_dir: Option<PathBuf>,
}

#[derive(Args)]
struct AccountantArgs {
    #[arg(long)]
    sigma: f64,
    #[arg(long)]
    q: f64,
    #[arg(long)]
    steps: u64,
    #[arg(long, default_value_t = 1e-5)]
    delta: f64,
}

fn load_sets(
    dataset: DatasetArg,
    data_dir: &Option<PathBuf>,
) -> Result<(LabeledImageSet<f32>, LabeledImageSet<f32>)> {
    match dataset {
        DatasetArg::Synth => Ok((
            synth_dataset::<f32>(200, 11, 0.25),
            synth_dataset::<f32>(40, 22, 0.25),
        )),
        DatasetArg::Mnist | DatasetArg::Fashion => {
            let default = match dataset {
                DatasetArg::Mnist => PathBuf::from("data/mnist"),
                _ => PathBuf::from("data/fashion"),
            };
            let dir = data_dir.clone().unwrap_or(default);
            let train = load_split::<f32>(&dir, Split::Train)
                .with_context(|| format!("loading training split from {}", dir.display()))?;
            let test = load_split::<f32>(&dir, Split::Test)
                .with_context(|| format!("loading test split from {}", dir.display()))?;
            Ok((train, test))
        }
    }
}

fn build_spec(args: &TrainArgs) -> Result<NetworkSpec> {
    let pool = match args.pooling {
        PoolingArg::Max => PoolMethod::Max,
        PoolingArg::Avg => PoolMethod::Avg,
        PoolingArg::Tep => PoolMethod::Tep,
    };
    let neuron: NeuronParams<f64> = match args.neuron {
        NeuronArg::Lif => NeuronParams::lif(args.leak, args.threshold)?,
        NeuronArg::If => NeuronParams::integrate_fire(args.threshold)?,
    };
    Ok(match args.net {
        NetArg::MnistSmall => mnist_small(pool, neuron, args.time_steps),
        NetArg::VggCifar => vgg_cifar(pool, neuron, args.time_steps),
    })
}

fn run_train(args: TrainArgs) -> Result<()> {
    let (mut train_set, test_set) = load_sets(args.dataset, &args.data_dir)?;
    if let Some(limit) = args.train_limit {
        if limit == 0 || limit > train_set.len() {
            bail!(
                "--train-limit {} outside 1..={} available samples",
                limit,
                train_set.len()
            );
        }
        train_set.truncate(limit);
    }
    let noise = match (args.sigma, args.target_epsilon) {
        (Some(s), None) => NoiseSetting::Sigma(s),
        (None, Some(t)) => NoiseSetting::TargetEpsilon(t),
        _ => unreachable!("clap enforces exactly one noise flag"),
    };
    let cfg = RunConfig {
        spec: build_spec(&args)?,
        epochs: args.epochs,
        batch_size: args.batch_size,
        learning_rate: args.lr,
        clip_bound: args.clip,
        noise,
        delta: args.delta,
        seed: args.seed,
        poisson: args.poisson_sampling,
        secure_rng: args.secure_rng,
        out_dir: args.out.clone(),
        resume: args.resume.clone(),
    };
    println!(
        "training {} on {} samples, batch {}, seed {}",
        cfg.spec.descriptor(),
        train_set.len(),
        cfg.batch_size,
        cfg.seed
    );
    let outcome = train(&cfg, &train_set, &test_set)?;
    println!("noise scale: {}", outcome.noise_scale);
    for row in &outcome.metrics {
        println!(
            "epoch {:>3}  step {:>6}  loss {:.4}  train {:.4}  test {:.4}  eps {:.4}  wall {:.1}s",
            row.epoch,
            row.step,
            row.train_loss,
            row.train_accuracy,
            row.test_accuracy,
            row.epsilon,
            row.wall_time_s
        );
    }
    if outcome.halted_by_budget {
        println!("stopped by the privacy budget before the epoch limit");
    }
    println!(
        "final epsilon {} (alpha {}), test accuracy {:.4}",
        outcome.final_epsilon,
        outcome.final_best_alpha,
        outcome.metrics.last().map_or(f64::NAN, |r| r.test_accuracy)
    );
    if let Some(dir) = &args.out {
        println!("metrics and checkpoints in {}", dir.display());
    }
    Ok(())
}

fn run_eval(args: EvalArgs) -> Result<()> {
    let ck = load_checkpoint(&args.checkpoint)
        .with_context(|| format!("reading {}", args.checkpoint.display()))?;
    let spec = NetworkSpec::from_descriptor(&ck.descriptor)?;
    let plan = spec.plan::<f32>()?;
    let (_, test_set) = load_sets(args.dataset, &args.data_dir)?;
    let accuracy = evaluate(&plan, &ck.params, &test_set)?;
    println!("network: {}", ck.descriptor);
    println!("epochs trained: {}", ck.epoch);
    if let Some(ledger) = &ck.ledger {
        let (eps, alpha) = ledger.to_eps_delta(1e-5)?;
        println!("epsilon {eps} (alpha {alpha}) at delta 1e-5");
    }
    println!("test accuracy {accuracy:.4}");
    Ok(())
}

fn run_accountant(args: AccountantArgs) -> Result<()> {
    let mut ledger = PrivacyLedger::new(args.sigma, args.q)?;
    ledger.compose_steps(args.steps);
    let (eps, alpha) = ledger.to_eps_delta(args.delta)?;
    println!("epsilon {eps}");
    println!("best alpha {alpha}");
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Train(args) => run_train(args),
        Command::Eval(args) => run_eval(args),
        Command::Accountant(args) => run_accountant(args),
    }
}
