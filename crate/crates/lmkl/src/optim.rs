//! ADAM optimization and the mini-batch training loop.
//!
//! Training is deterministic given the configuration: parameter
//! initialization and the per-epoch shuffles derive from the run seed, all
//! algebra is `f64` on one thread, and batches are visited in shuffle
//! order. Running the same configuration twice reproduces every parameter
//! bit and every metric.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::analysis::evaluate;
use crate::grads::backward;
use crate::kernels::{KernelSource, KernelStack};
use crate::network::{forward, gather_batch, Architecture, Mode, ModelParams, PoolMode};

/// Default ADAM learning rate.
pub const DEFAULT_LR: f64 = 0.001;
/// Default ADAM first-moment decay.
pub const DEFAULT_BETA1: f64 = 0.9;
/// Default ADAM second-moment decay.
pub const DEFAULT_BETA2: f64 = 0.999;
/// Default ADAM denominator guard.
pub const DEFAULT_ADAM_EPS: f64 = 1e-8;
/// Default number of passes over the training set.
pub const DEFAULT_EPOCHS: usize = 200;
/// Default mini-batch size.
pub const DEFAULT_BATCH: usize = 256;
/// Default hidden width of both network halves.
pub const DEFAULT_HIDDEN: usize = 256;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training set is empty")]
    EmptyTrainSet,
    #[error("{labels} labels for {examples} kernel rows")]
    LabelCount { labels: usize, examples: usize },
    #[error("label {label} out of range for {classes} classes")]
    LabelRange { label: usize, classes: usize },
    #[error("need at least two classes, got {0}")]
    TooFewClasses(usize),
    #[error("invalid configuration: {0}")]
    BadConfig(String),
    #[error(transparent)]
    Network(#[from] crate::network::NetworkError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Everything the training loop needs besides the data.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub hidden: usize,
    pub arch: Architecture,
    pub pool: PoolMode,
    pub seed: u64,
    /// Evaluate metrics every this many epochs (the final epoch is always
    /// evaluated).
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: DEFAULT_EPOCHS,
            batch_size: DEFAULT_BATCH,
            lr: DEFAULT_LR,
            beta1: DEFAULT_BETA1,
            beta2: DEFAULT_BETA2,
            eps: DEFAULT_ADAM_EPS,
            hidden: DEFAULT_HIDDEN,
            arch: Architecture::Shared,
            pool: PoolMode::Sum,
            seed: 0,
            eval_every: 1,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<(), TrainError> {
        if self.batch_size == 0 {
            return Err(TrainError::BadConfig("batch size must be positive".into()));
        }
        if self.hidden == 0 {
            return Err(TrainError::BadConfig("hidden width must be positive".into()));
        }
        if !self.lr.is_finite() || self.lr <= 0.0 {
            return Err(TrainError::BadConfig("learning rate must be positive".into()));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(TrainError::BadConfig(format!("{name} must lie in [0, 1)")));
            }
        }
        if !self.eps.is_finite() || self.eps <= 0.0 {
            return Err(TrainError::BadConfig("eps must be positive".into()));
        }
        if self.eval_every == 0 {
            return Err(TrainError::BadConfig("eval_every must be positive".into()));
        }
        Ok(())
    }
}

/// First and second moment estimates for one flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    /// Completed steps (drives bias correction).
    pub t: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        AdamState {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }
}

/// One ADAM update, in place:
/// `m <- b1 m + (1-b1) g`, `v <- b2 v + (1-b2) g^2`, bias-correct both,
/// then `theta <- theta - lr * m_hat / (sqrt(v_hat) + eps)`.
pub fn adam_step(
    theta: &mut [f64],
    grad: &[f64],
    state: &mut AdamState,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) {
    assert_eq!(theta.len(), grad.len());
    assert_eq!(theta.len(), state.m.len());
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - beta1.powi(t);
    let bc2 = 1.0 - beta2.powi(t);
    for i in 0..theta.len() {
        let g = grad[i];
        state.m[i] = beta1 * state.m[i] + (1.0 - beta1) * g;
        state.v[i] = beta2 * state.v[i] + (1.0 - beta2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        theta[i] -= lr * m_hat / (v_hat.sqrt() + eps);
    }
}

/// Deterministic permutation of `0..n` for one epoch. The stream is keyed
/// by `epoch + 1` so epoch shuffles are independent of each other and of
/// the seed's default stream (used for parameter initialization).
pub fn shuffle_indices(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    let mut indices: Vec<usize> = (0..n).collect();
    indices.shuffle(&mut rng);
    indices
}

/// Split `0..n` into consecutive chunks of `batch_size`. A trailing chunk
/// of a single element is merged into its predecessor, because a batch of
/// one degenerates the batch normalizer (its variance is identically zero).
pub fn partition_batches(n: usize, batch_size: usize) -> Vec<std::ops::Range<usize>> {
    assert!(batch_size > 0);
    let mut ranges: Vec<std::ops::Range<usize>> = Vec::new();
    let mut start = 0;
    while start < n {
        let end = (start + batch_size).min(n);
        ranges.push(start..end);
        start = end;
    }
    if ranges.len() >= 2 && ranges.last().map(|r| r.len()) == Some(1) {
        let last = ranges.pop().expect("non-empty");
        let prev = ranges.last_mut().expect("len >= 2");
        prev.end = last.end;
    }
    ranges
}

/// Per-epoch training curve entry. Test fields are absent when no test set
/// was supplied.
#[derive(Debug, Clone, PartialEq)]
pub struct Metrics {
    /// 1-based epoch number.
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub test_loss: Option<f64>,
    pub test_acc: Option<f64>,
    /// Wall-clock seconds spent in this epoch (excluded from determinism
    /// comparisons).
    pub seconds: f64,
}

/// A finished training run.
#[derive(Debug, Clone)]
pub struct TrainRun {
    pub params: ModelParams,
    pub metrics: Vec<Metrics>,
}

/// Batch size used for evaluation passes.
const EVAL_BATCH: usize = 256;

/// Train a model on a square kernel stack with internal class-id labels.
///
/// `test` optionally supplies a second kernel source (typically the
/// test-vs-train cross stack) and its labels for per-epoch test metrics.
pub fn train(
    stack: &KernelStack,
    labels: &[usize],
    num_classes: usize,
    test: Option<(&dyn KernelSource, &[usize])>,
    config: &TrainConfig,
) -> Result<TrainRun, TrainError> {
    config.validate()?;
    let n = stack.n();
    if n == 0 {
        return Err(TrainError::EmptyTrainSet);
    }
    if labels.len() != n {
        return Err(TrainError::LabelCount {
            labels: labels.len(),
            examples: n,
        });
    }
    if num_classes < 2 {
        return Err(TrainError::TooFewClasses(num_classes));
    }
    for &label in labels {
        if label >= num_classes {
            return Err(TrainError::LabelRange {
                label,
                classes: num_classes,
            });
        }
    }
    if let Some((source, test_labels)) = test {
        if test_labels.len() != source.n_rows() {
            return Err(TrainError::LabelCount {
                labels: test_labels.len(),
                examples: source.n_rows(),
            });
        }
        for &label in test_labels {
            if label >= num_classes {
                return Err(TrainError::LabelRange {
                    label,
                    classes: num_classes,
                });
            }
        }
    }

    let mut params = ModelParams::init(
        n,
        config.hidden,
        num_classes,
        stack.m(),
        config.arch,
        config.pool,
        config.seed,
    );
    if let Some((source, _)) = test {
        params.check_compatible(source)?;
    }
    let mut adam = AdamState::new(params.num_params());
    let mut metrics = Vec::new();

    for epoch in 0..config.epochs {
        let started = Instant::now();
        let order = shuffle_indices(n, config.seed, epoch);
        for range in partition_batches(n, config.batch_size) {
            let idx = &order[range];
            let x = gather_batch(stack, idx);
            let batch_labels: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            let trace = forward(&params, &x, Mode::Train);
            params.bn.update(&trace.bn_mean, &trace.bn_var);
            let grads = backward(&params, &trace, &batch_labels).expect("training-mode trace");
            let mut flat = params.flatten();
            adam_step(
                &mut flat,
                &grads.flatten(),
                &mut adam,
                config.lr,
                config.beta1,
                config.beta2,
                config.eps,
            );
            params.unflatten_into(&flat);
        }
        let last = epoch + 1 == config.epochs;
        if (epoch + 1) % config.eval_every == 0 || last {
            let (train_loss, train_acc) = evaluate(&params, stack, labels, EVAL_BATCH);
            let (test_loss, test_acc) = match test {
                Some((source, test_labels)) => {
                    let (l, a) = evaluate(&params, source, test_labels, EVAL_BATCH);
                    (Some(l), Some(a))
                }
                None => (None, None),
            };
            metrics.push(Metrics {
                epoch: epoch + 1,
                train_loss,
                train_acc,
                test_loss,
                test_acc,
                seconds: started.elapsed().as_secs_f64(),
            });
        }
    }
    Ok(TrainRun { params, metrics })
}

/// Render metrics as CSV with a fixed header. Floats use shortest
/// round-trip formatting; absent test metrics render as `nan`.
pub fn metrics_to_csv(metrics: &[Metrics]) -> String {
    let mut out = String::from("epoch,train_loss,train_acc,test_loss,test_acc,seconds\n");
    for m in metrics {
        let opt = |v: Option<f64>| match v {
            Some(x) => x.to_string(),
            None => "nan".to_string(),
        };
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            m.epoch,
            m.train_loss,
            m.train_acc,
            opt(m.test_loss),
            opt(m.test_acc),
            m.seconds
        ));
    }
    out
}

/// Write metrics CSV to a file.
pub fn write_metrics_csv(path: &Path, metrics: &[Metrics]) -> Result<(), TrainError> {
    let mut file = std::fs::File::create(path).map_err(|e| TrainError::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    file.write_all(metrics_to_csv(metrics).as_bytes())
        .map_err(|e| TrainError::Io {
            path: path.to_path_buf(),
            source: e,
        })
}
