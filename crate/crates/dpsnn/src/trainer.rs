//! Training orchestration: epochs of per-sample forward/backward passes,
//! per-sample clipping, noisy aggregation, AdamW updates, and privacy
//! composition, with metrics, per-epoch checkpoints, and resumption.
//!
//! One master seed expands into three independent deterministic streams:
//! parameter initialization, per-epoch batch construction, and per-step
//! noise. Batch and noise streams are keyed by absolute epoch and step
//! numbers, so a resumed run replays exactly the stream a fresh run would
//! have used. Per-sample work fans out across a worker pool; everything
//! that touches accumulated state runs on one thread in sample order, so a
//! fixed seed gives a bit-identical run.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::rngs::OsRng;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha12Rng;
use thiserror::Error;

use crate::accountant::{calibrate_sigma, AccountantError, PrivacyLedger};
use crate::bptt::{backward_sample, forward_logits, forward_sample, mean_fire_rates, BpttError};
use crate::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointError};
use crate::data::{encode_direct, make_batches, BatchMode, DataError, LabeledImageSet};
use crate::dp_optimizer::{
    adamw_update, aggregate_and_noise, clip_gradient, DpConfig, DpError, OptimizerState,
};
use crate::layers::loss::{argmax, cross_entropy};
use crate::layers::LayerError;
use crate::network::{init_params, NetworkPlan, NetworkSpec, PlanError};

#[derive(Error, Debug)]
pub enum TrainError {
    #[error("network: {0}")]
    Plan(#[from] PlanError),
    #[error("data: {0}")]
    Data(#[from] DataError),
    #[error("gradient: {0}")]
    Bptt(#[from] BpttError),
    #[error("loss: {0}")]
    Loss(#[from] LayerError),
    #[error("privacy mechanism: {0}")]
    Dp(#[from] DpError),
    #[error("accounting: {0}")]
    Accountant(#[from] AccountantError),
    #[error("checkpoint: {0}")]
    Checkpoint(#[from] CheckpointError),
    #[error("loss diverged to a non-finite value at epoch {epoch}, step {step}")]
    NumericDivergence { epoch: usize, step: u64 },
    #[error("checkpoint was trained on {found:?} but the run asks for {expected:?}")]
    ResumeDescriptorMismatch { expected: String, found: String },
    #[error("checkpoint carries no privacy ledger but the run is noised")]
    ResumeMissingLedger,
    #[error("invalid run configuration: {0}")]
    BadConfig(String),
    #[error("cannot write {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("worker pool: {0}")]
    WorkerPool(String),
}

/// Noise is fixed either directly or through a privacy target that the
/// accountant converts into a noise scale for the planned step count.
#[derive(Clone, Copy, Debug)]
pub enum NoiseSetting {
    Sigma(f64),
    TargetEpsilon(f64),
}

#[derive(Clone, Debug)]
pub struct RunConfig {
    pub spec: NetworkSpec,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// None disables clipping (only sensible for noise-free baselines).
    pub clip_bound: Option<f64>,
    pub noise: NoiseSetting,
    pub delta: f64,
    pub seed: u64,
    /// Poisson sampling at rate B/N instead of shuffled fixed-size batches.
    pub poisson: bool,
    /// Draw noise from the operating system instead of the seeded stream.
    pub secure_rng: bool,
    /// Metrics and checkpoints land here; None keeps the run in memory.
    pub out_dir: Option<PathBuf>,
    pub resume: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub epoch: u32,
    pub step: u64,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    pub epsilon: f64,
    pub best_alpha: f64,
    pub wall_time_s: f64,
}

pub const METRICS_HEADER: &str =
    "epoch,step,train_loss,train_accuracy,test_accuracy,epsilon,best_alpha,wall_time_s";

impl MetricsRow {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.epoch,
            self.step,
            self.train_loss,
            self.train_accuracy,
            self.test_accuracy,
            self.epsilon,
            self.best_alpha,
            self.wall_time_s
        )
    }
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub params: Vec<f32>,
    pub metrics: Vec<MetricsRow>,
    pub descriptor: String,
    /// Resolved noise scale (calibrated when the config gave a target).
    pub noise_scale: f64,
    pub final_epsilon: f64,
    pub final_best_alpha: f64,
    /// True when the privacy budget stopped training before the epoch limit.
    pub halted_by_budget: bool,
}

const STREAM_INIT: u64 = 1;
const STREAM_BATCH: u64 = 2;
const STREAM_NOISE: u64 = 3;

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

/// Independent deterministic generator for (master, stream, index).
fn stream_rng(master: u64, stream: u64, index: u64) -> ChaCha12Rng {
    let mixed = splitmix64(splitmix64(master ^ stream.wrapping_mul(0xa0761d6478bd642f)) ^ index);
    ChaCha12Rng::seed_from_u64(mixed)
}

fn worker_pool() -> Result<rayon::ThreadPool, TrainError> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var("DPSNN_NUM_WORKERS") {
        let n: usize = v
            .parse()
            .map_err(|_| TrainError::WorkerPool(format!("DPSNN_NUM_WORKERS={v:?} is not a count")))?;
        builder = builder.num_threads(n);
    }
    builder
        .build()
        .map_err(|e| TrainError::WorkerPool(e.to_string()))
}

fn validate(cfg: &RunConfig, n_train: usize) -> Result<(), TrainError> {
    let bad = |msg: String| Err(TrainError::BadConfig(msg));
    if cfg.epochs == 0 {
        return bad("epochs must be at least 1".into());
    }
    if cfg.batch_size == 0 {
        return bad("batch size must be at least 1".into());
    }
    if !(cfg.learning_rate > 0.0) || !cfg.learning_rate.is_finite() {
        return bad(format!("learning rate must be positive, got {}", cfg.learning_rate));
    }
    if !(cfg.delta > 0.0 && cfg.delta < 1.0) {
        return bad(format!("delta must lie in (0, 1), got {}", cfg.delta));
    }
    if let Some(c) = cfg.clip_bound {
        if !(c > 0.0) {
            return bad(format!("clip bound must be positive, got {c}"));
        }
    }
    let sigma_known_positive = match cfg.noise {
        NoiseSetting::Sigma(s) => {
            if !(s >= 0.0) || !s.is_finite() {
                return bad(format!("noise scale must be nonnegative, got {s}"));
            }
            s > 0.0
        }
        NoiseSetting::TargetEpsilon(t) => {
            if !(t > 0.0) || !t.is_finite() {
                return bad(format!("target epsilon must be positive, got {t}"));
            }
            true
        }
    };
    if sigma_known_positive && cfg.clip_bound.is_none() {
        return bad("noised training needs a finite clip bound".into());
    }
    if n_train == 0 {
        return Err(TrainError::Data(DataError::EmptyDataset));
    }
    Ok(())
}

/// Fraction of samples whose predicted class matches the label.
pub fn evaluate(
    plan: &NetworkPlan<f32>,
    params: &[f32],
    set: &LabeledImageSet<f32>,
) -> Result<f64, TrainError> {
    use rayon::prelude::*;
    if set.is_empty() {
        return Err(TrainError::Data(DataError::EmptyDataset));
    }
    let time_steps = plan.spec.time_steps;
    let correct = set
        .images
        .par_iter()
        .zip(&set.labels)
        .map(|(image, &label)| {
            let encoded = encode_direct(image, time_steps);
            let logits = forward_logits(plan, params, &encoded)?;
            Ok(usize::from(argmax(&logits) == label as usize))
        })
        .try_reduce(|| 0usize, |a, b| Ok(a + b))
        .map_err(TrainError::Bptt)?;
    Ok(correct as f64 / set.len() as f64)
}

struct SampleResult {
    loss: f32,
    correct: bool,
    grad: crate::bptt::PerSampleGradient<f32>,
    fire_rates: Vec<f64>,
}

fn per_sample(
    plan: &NetworkPlan<f32>,
    params: &[f32],
    set: &LabeledImageSet<f32>,
    index: usize,
    clip: f64,
) -> Result<SampleResult, TrainError> {
    let encoded = encode_direct(&set.images[index], plan.spec.time_steps);
    let (potentials, tape) = forward_sample(plan, params, &encoded)?;
    let inv_t = 1.0 / plan.spec.time_steps as f32;
    let logits: Vec<f32> = potentials.into_iter().map(|v| v * inv_t).collect();
    let label = set.labels[index] as usize;
    let (loss, grad_logits) = cross_entropy(&logits, label)?;
    let fire_rates = mean_fire_rates(&tape);
    let mut grad = backward_sample(plan, params, &tape, &grad_logits)?;
    clip_gradient(&mut grad, clip)?;
    Ok(SampleResult { loss, correct: argmax(&logits) == label, grad, fire_rates })
}

pub fn train(
    cfg: &RunConfig,
    train_set: &LabeledImageSet<f32>,
    test_set: &LabeledImageSet<f32>,
) -> Result<TrainOutcome, TrainError> {
    let n = train_set.len();
    validate(cfg, n)?;
    let plan = cfg.spec.plan::<f32>()?;
    let descriptor = cfg.spec.descriptor();
    let q = (cfg.batch_size as f64 / n as f64).min(1.0);
    let steps_per_epoch = n.div_ceil(cfg.batch_size) as u64;
    let total_steps = steps_per_epoch * cfg.epochs as u64;

    let (mut params, mut opt, mut ledger, sigma, target_eps, start_epoch) = match &cfg.resume {
        Some(path) => {
            let ck = load_checkpoint(path)?;
            if ck.descriptor != descriptor {
                return Err(TrainError::ResumeDescriptorMismatch {
                    expected: descriptor,
                    found: ck.descriptor,
                });
            }
            // A saved ledger's noise scale keeps ruling the run; silently
            // switching scales would falsify the accumulated account.
            let (sigma, target_eps) = match (&ck.ledger, cfg.noise) {
                (Some(ledger), NoiseSetting::Sigma(s)) => {
                    if s != ledger.noise_scale {
                        return Err(TrainError::BadConfig(format!(
                            "checkpoint was noised at sigma {}, config asks for {s}",
                            ledger.noise_scale
                        )));
                    }
                    (s, None)
                }
                (Some(ledger), NoiseSetting::TargetEpsilon(t)) => (ledger.noise_scale, Some(t)),
                (None, NoiseSetting::Sigma(s)) if s == 0.0 => (0.0, None),
                (None, _) => return Err(TrainError::ResumeMissingLedger),
            };
            if let Some(ledger) = &ck.ledger {
                if ledger.sampling_rate != q {
                    return Err(TrainError::BadConfig(format!(
                        "checkpoint sampled at rate {}, this run would sample at {q}",
                        ledger.sampling_rate
                    )));
                }
            }
            (ck.params, ck.opt, ck.ledger, sigma, target_eps, ck.epoch as usize)
        }
        None => {
            let (sigma, target_eps) = match cfg.noise {
                NoiseSetting::Sigma(s) => (s, None),
                NoiseSetting::TargetEpsilon(t) => {
                    (calibrate_sigma(t, cfg.delta, q, total_steps)?, Some(t))
                }
            };
            let mut init_rng = stream_rng(cfg.seed, STREAM_INIT, 0);
            let params = init_params(&plan, &mut init_rng);
            let opt = OptimizerState::new(plan.param_len, cfg.learning_rate);
            let ledger = if sigma > 0.0 {
                Some(PrivacyLedger::new(sigma, q)?)
            } else {
                None
            };
            (params, opt, ledger, sigma, target_eps, 0)
        }
    };
    let clip = cfg.clip_bound.unwrap_or(f64::INFINITY);
    if sigma > 0.0 && !clip.is_finite() {
        return Err(TrainError::BadConfig(
            "noised training needs a finite clip bound".into(),
        ));
    }
    let dp_cfg = DpConfig::new(clip, sigma, cfg.batch_size)?;
    if start_epoch >= cfg.epochs {
        return Err(TrainError::BadConfig(format!(
            "checkpoint already covers {start_epoch} epochs, nothing left of {}",
            cfg.epochs
        )));
    }
    if let Some(dir) = &cfg.out_dir {
        std::fs::create_dir_all(dir)
            .map_err(|source| TrainError::Io { path: dir.clone(), source })?;
    }

    let pool = worker_pool()?;
    let mode = if cfg.poisson {
        BatchMode::Poisson { q }
    } else {
        BatchMode::Shuffle
    };
    let started = Instant::now();
    let mut metrics: Vec<MetricsRow> = Vec::new();
    let mut halted = false;

    'epochs: for epoch in start_epoch..cfg.epochs {
        let mut batch_rng = stream_rng(cfg.seed, STREAM_BATCH, epoch as u64);
        let batches = make_batches(n, cfg.batch_size, mode, &mut batch_rng)?;
        let mut loss_sum = 0.0f64;
        let mut correct = 0usize;
        let mut seen = 0usize;
        let mut rate_sum: Vec<f64> = Vec::new();
        let mut rate_count = 0usize;

        for batch in &batches {
            // The budget check runs before the update so no step can land
            // beyond the target.
            if let (Some(target), Some(ledger)) = (target_eps, ledger.as_ref()) {
                let mut next = ledger.clone();
                next.compose_step();
                if next.to_eps_delta(cfg.delta)?.0 > target {
                    halted = true;
                    break;
                }
            }
            let results: Vec<SampleResult> = pool.install(|| {
                use rayon::prelude::*;
                batch
                    .par_iter()
                    .map(|&i| per_sample(&plan, &params, train_set, i, clip))
                    .collect::<Result<Vec<_>, _>>()
            })?;
            for r in &results {
                if !r.loss.is_finite() {
                    return Err(TrainError::NumericDivergence { epoch, step: opt.step });
                }
                loss_sum += r.loss as f64;
                correct += r.correct as usize;
                seen += 1;
                if rate_sum.len() != r.fire_rates.len() {
                    rate_sum = vec![0.0; r.fire_rates.len()];
                }
                for (acc, &v) in rate_sum.iter_mut().zip(&r.fire_rates) {
                    *acc += v;
                }
                rate_count += 1;
            }
            let grads: Vec<_> = results.into_iter().map(|r| r.grad).collect();
            let mut noise_stream;
            let mut os_stream;
            let noise_rng: &mut dyn RngCore = if cfg.secure_rng {
                os_stream = OsRng;
                &mut os_stream
            } else {
                noise_stream = stream_rng(cfg.seed, STREAM_NOISE, opt.step);
                &mut noise_stream
            };
            let update = aggregate_and_noise(&grads, plan.param_len, &dp_cfg, noise_rng)?;
            adamw_update(&mut params, &update, &dp_cfg, &mut opt)?;
            if let Some(ledger) = ledger.as_mut() {
                ledger.compose_step();
            }
        }

        let (epsilon, best_alpha) = match ledger.as_ref() {
            Some(ledger) => ledger.to_eps_delta(cfg.delta)?,
            None => (f64::INFINITY, 0.0),
        };
        let test_accuracy = pool.install(|| evaluate(&plan, &params, test_set))?;
        let row = MetricsRow {
            epoch: (epoch + 1) as u32,
            step: opt.step,
            train_loss: if seen > 0 { loss_sum / seen as f64 } else { f64::NAN },
            train_accuracy: if seen > 0 { correct as f64 / seen as f64 } else { f64::NAN },
            test_accuracy,
            epsilon,
            best_alpha,
            wall_time_s: started.elapsed().as_secs_f64(),
        };
        if rate_count > 0 {
            let rates: Vec<f64> =
                rate_sum.iter().map(|&v| v / rate_count as f64).collect();
            log::info!("epoch {}: mean fire rates {:?}", epoch + 1, rates);
        }
        log::info!(
            "epoch {}: loss {:.4} train {:.4} test {:.4} eps {:.4}",
            epoch + 1,
            row.train_loss,
            row.train_accuracy,
            row.test_accuracy,
            row.epsilon
        );
        metrics.push(row);

        if let Some(dir) = &cfg.out_dir {
            write_metrics(&dir.join("metrics.csv"), &metrics)?;
            let ck = Checkpoint {
                descriptor: descriptor.clone(),
                epoch: (epoch + 1) as u32,
                params: params.clone(),
                opt: opt.clone(),
                ledger: ledger.clone(),
            };
            save_checkpoint(&dir.join(format!("epoch{:03}.ckpt", epoch + 1)), &ck)?;
        }
        if halted {
            break 'epochs;
        }
    }

    let (final_epsilon, final_best_alpha) = match ledger.as_ref() {
        Some(ledger) => ledger.to_eps_delta(cfg.delta)?,
        None => (f64::INFINITY, 0.0),
    };
    Ok(TrainOutcome {
        params,
        metrics,
        descriptor,
        noise_scale: sigma,
        final_epsilon,
        final_best_alpha,
        halted_by_budget: halted,
    })
}

pub fn write_metrics(path: &Path, rows: &[MetricsRow]) -> Result<(), TrainError> {
    let mut text = String::from(METRICS_HEADER);
    text.push('\n');
    for row in rows {
        text.push_str(&row.csv_line());
        text.push('\n');
    }
    std::fs::write(path, text)
        .map_err(|source| TrainError::Io { path: path.to_path_buf(), source })
}
