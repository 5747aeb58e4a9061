//! The gated kernel network: model parameters, the forward pass, gating
//! matrices, and checkpoint serialization.
//!
//! For a query example the input is its M kernel rows against the N training
//! examples, an `(M, N)` block. A small gating network scores every
//! (kernel, training point) pair and a joint softmax turns the M*N scores
//! into weights on the simplex. The weighted kernel rows are pooled into a
//! single N-vector, which a three-layer classifier head (with batch
//! normalization after the first layer) maps to class logits.
//!
//! Batches are laid out as `(B*M, N)` matrices: the M kernel rows of sample
//! b occupy rows `b*M .. (b+1)*M`. All dense algebra runs in `f64`.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use ndarray::{s, Array1, Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::kernels::KernelSource;

/// Magic tag at the start of every checkpoint file.
pub const CHECKPOINT_MAGIC: [u8; 8] = *b"LMKLCKPT";
/// Current checkpoint file version.
pub const CHECKPOINT_VERSION: u32 = 1;

/// Standard deviation of the Gaussian weight initialization.
pub const INIT_STD: f64 = 0.05;
/// Momentum of the running batch-norm statistics.
pub const BN_MOMENTUM: f64 = 0.1;
/// Variance floor inside the batch-norm normalizer.
pub const BN_EPSILON: f64 = 1e-5;

#[derive(Debug, Error)]
pub enum NetworkError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}: {msg}")]
    Format { path: PathBuf, msg: String },
    #[error("model expects {expected} {what}, data provides {found}")]
    Incompatible {
        what: &'static str,
        expected: usize,
        found: usize,
    },
}

/// Whether the classifier head shares the gating network's first layer.
///
/// In the shared form the pooled vector is projected by the same `(w0, b0)`
/// that embeds kernel rows inside the gating network; in the separate form
/// the head owns an independent first layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Architecture {
    Shared,
    Separate,
}

impl Architecture {
    pub fn code(self) -> u8 {
        match self {
            Architecture::Shared => 0,
            Architecture::Separate => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Architecture::Shared),
            1 => Some(Architecture::Separate),
            _ => None,
        }
    }
}

impl std::str::FromStr for Architecture {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "shared" => Ok(Architecture::Shared),
            "separate" => Ok(Architecture::Separate),
            other => Err(format!(
                "unknown architecture `{other}` (expected shared or separate)"
            )),
        }
    }
}

impl std::fmt::Display for Architecture {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Architecture::Shared => "shared",
            Architecture::Separate => "separate",
        })
    }
}

/// How the M gated kernel rows are pooled into one vector: plain sum, or
/// sum divided by M.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolMode {
    Sum,
    Mean,
}

impl PoolMode {
    pub fn code(self) -> u8 {
        match self {
            PoolMode::Sum => 0,
            PoolMode::Mean => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(PoolMode::Sum),
            1 => Some(PoolMode::Mean),
            _ => None,
        }
    }
}

impl std::str::FromStr for PoolMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "sum" => Ok(PoolMode::Sum),
            "mean" => Ok(PoolMode::Mean),
            other => Err(format!("unknown pool mode `{other}` (expected sum or mean)")),
        }
    }
}

impl std::fmt::Display for PoolMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            PoolMode::Sum => "sum",
            PoolMode::Mean => "mean",
        })
    }
}

/// Forward-pass mode: training uses batch statistics in the normalizer and
/// supports backprop; evaluation uses the stored running statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Running batch-norm state. Both the batch statistics and the running
/// variance use the biased (divide by B) estimator.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormState {
    pub running_mean: Array1<f64>,
    pub running_var: Array1<f64>,
    pub momentum: f64,
    pub epsilon: f64,
}

impl BatchNormState {
    pub fn new(h: usize) -> Self {
        BatchNormState {
            running_mean: Array1::zeros(h),
            running_var: Array1::ones(h),
            momentum: BN_MOMENTUM,
            epsilon: BN_EPSILON,
        }
    }

    /// Blend freshly computed batch statistics into the running estimates:
    /// `running <- (1 - momentum) * running + momentum * batch`.
    pub fn update(&mut self, batch_mean: &Array1<f64>, batch_var: &Array1<f64>) {
        let m = self.momentum;
        self.running_mean.zip_mut_with(batch_mean, |r, &b| {
            *r = (1.0 - m) * *r + m * b;
        });
        self.running_var.zip_mut_with(batch_var, |r, &b| {
            *r = (1.0 - m) * *r + m * b;
        });
    }
}

/// All learnable tensors plus the architecture/pooling configuration and the
/// batch-norm running state.
///
/// Shapes (N training columns, H hidden units, C classes, M kernels):
/// `w0 (H, N)`, `b0 (H)` embed kernel rows; `w1 (N, H)`, `b1 (N)` produce
/// gating scores; `w0_mlp`/`b0_mlp` mirror `w0`/`b0` for the separate head;
/// `gamma`/`beta (H)` scale and shift the normalized activations;
/// `w2 (H, H)`, `b2 (H)` and `w3 (C, H)`, `b3 (C)` finish the classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub arch: Architecture,
    pub pool: PoolMode,
    pub n: usize,
    pub h: usize,
    pub c: usize,
    pub m: usize,
    pub w0: Array2<f64>,
    pub b0: Array1<f64>,
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w0_mlp: Option<Array2<f64>>,
    pub b0_mlp: Option<Array1<f64>>,
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
    pub w3: Array2<f64>,
    pub b3: Array1<f64>,
    pub bn: BatchNormState,
}

impl ModelParams {
    /// Seeded Gaussian initialization: weight matrices are N(0, 0.05^2),
    /// biases and `beta` start at zero, `gamma` at one. Weight matrices are
    /// drawn in a fixed order (`w0`, `w1`, then `w0_mlp` when separate,
    /// `w2`, `w3`), so the shared and separate architectures started from
    /// the same seed agree on every tensor they have in common.
    pub fn init(
        n: usize,
        h: usize,
        c: usize,
        m: usize,
        arch: Architecture,
        pool: PoolMode,
        seed: u64,
    ) -> Self {
        assert!(n > 0 && h > 0 && c > 1 && m > 0, "degenerate model shape");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let mut draw2 = |rows: usize, cols: usize| {
            Array2::from_shape_fn((rows, cols), |_| normal.sample(&mut rng))
        };
        let w0 = draw2(h, n);
        let w1 = draw2(n, h);
        let w0_mlp = match arch {
            Architecture::Shared => None,
            Architecture::Separate => Some(draw2(h, n)),
        };
        let w2 = draw2(h, h);
        let w3 = draw2(c, h);
        ModelParams {
            arch,
            pool,
            n,
            h,
            c,
            m,
            w0,
            b0: Array1::zeros(h),
            w1,
            b1: Array1::zeros(n),
            w0_mlp,
            b0_mlp: match arch {
                Architecture::Shared => None,
                Architecture::Separate => Some(Array1::zeros(h)),
            },
            gamma: Array1::ones(h),
            beta: Array1::zeros(h),
            w2,
            b2: Array1::zeros(h),
            w3,
            b3: Array1::zeros(c),
            bn: BatchNormState::new(h),
        }
    }

    /// `(tensor name, element count)` in flattening order.
    pub fn layout(&self) -> Vec<(&'static str, usize)> {
        let mut spans = vec![
            ("w0", self.h * self.n),
            ("b0", self.h),
            ("w1", self.n * self.h),
            ("b1", self.n),
        ];
        if self.arch == Architecture::Separate {
            spans.push(("w0_mlp", self.h * self.n));
            spans.push(("b0_mlp", self.h));
        }
        spans.extend([
            ("gamma", self.h),
            ("beta", self.h),
            ("w2", self.h * self.h),
            ("b2", self.h),
            ("w3", self.c * self.h),
            ("b3", self.c),
        ]);
        spans
    }

    /// Total learnable element count (running statistics excluded).
    pub fn num_params(&self) -> usize {
        self.layout().iter().map(|&(_, len)| len).sum()
    }

    /// Name of the tensor owning flat coordinate `index`.
    pub fn tensor_of(&self, index: usize) -> &'static str {
        let mut offset = 0;
        for (name, len) in self.layout() {
            if index < offset + len {
                return name;
            }
            offset += len;
        }
        panic!("flat index {index} out of range");
    }

    /// Copy all learnable tensors into one flat vector, row-major per
    /// tensor, in [`layout`](Self::layout) order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        out.extend(self.w0.iter());
        out.extend(self.b0.iter());
        out.extend(self.w1.iter());
        out.extend(self.b1.iter());
        if let (Some(w), Some(b)) = (&self.w0_mlp, &self.b0_mlp) {
            out.extend(w.iter());
            out.extend(b.iter());
        }
        out.extend(self.gamma.iter());
        out.extend(self.beta.iter());
        out.extend(self.w2.iter());
        out.extend(self.b2.iter());
        out.extend(self.w3.iter());
        out.extend(self.b3.iter());
        out
    }

    /// Overwrite all learnable tensors from a flat vector laid out as
    /// produced by [`flatten`](Self::flatten).
    pub fn unflatten_into(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.num_params(), "flat size mismatch");
        let mut pos = 0;
        let take1 = |arr: &mut Array1<f64>, pos: &mut usize| {
            for v in arr.iter_mut() {
                *v = flat[*pos];
                *pos += 1;
            }
        };
        fn take2(arr: &mut Array2<f64>, flat: &[f64], pos: &mut usize) {
            for v in arr.iter_mut() {
                *v = flat[*pos];
                *pos += 1;
            }
        }
        take2(&mut self.w0, flat, &mut pos);
        take1(&mut self.b0, &mut pos);
        take2(&mut self.w1, flat, &mut pos);
        take1(&mut self.b1, &mut pos);
        if self.arch == Architecture::Separate {
            take2(self.w0_mlp.as_mut().expect("separate head"), flat, &mut pos);
            take1(self.b0_mlp.as_mut().expect("separate head"), &mut pos);
        }
        take1(&mut self.gamma, &mut pos);
        take1(&mut self.beta, &mut pos);
        take2(&mut self.w2, flat, &mut pos);
        take1(&mut self.b2, &mut pos);
        take2(&mut self.w3, flat, &mut pos);
        take1(&mut self.b3, &mut pos);
        assert_eq!(pos, flat.len());
    }

    /// Check that a kernel source can feed this model.
    pub fn check_compatible(&self, source: &dyn KernelSource) -> Result<(), NetworkError> {
        if source.n_cols() != self.n {
            return Err(NetworkError::Incompatible {
                what: "training columns",
                expected: self.n,
                found: source.n_cols(),
            });
        }
        if source.m() != self.m {
            return Err(NetworkError::Incompatible {
                what: "kernels",
                expected: self.m,
                found: source.m(),
            });
        }
        Ok(())
    }
}

/// Numerically stable softmax of a slice (max-subtracted), in place.
pub fn softmax_inplace(x: &mut [f64]) {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in x.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in x.iter_mut() {
        *v /= sum;
    }
}

/// Numerically stable softmax of a slice.
pub fn softmax(x: &[f64]) -> Vec<f64> {
    let mut out = x.to_vec();
    softmax_inplace(&mut out);
    out
}

/// Gating weights of one query example: an `(N, M)` matrix, rows indexed by
/// training example and columns by kernel, summing to 1 over all entries.
#[derive(Debug, Clone, PartialEq)]
pub struct GatingMatrix(Array2<f64>);

impl GatingMatrix {
    /// Wrap an `(N, M)` weight matrix. Entries must be non-negative and sum
    /// to 1 within `1e-6`; this is asserted because a violation means the
    /// producing code is broken, not that the input data is bad.
    pub fn new(weights: Array2<f64>) -> Self {
        let total: f64 = weights.iter().sum();
        assert!(
            (total - 1.0).abs() <= 1e-6 && weights.iter().all(|&w| w >= 0.0),
            "gating weights must be a distribution (sum = {total})"
        );
        GatingMatrix(weights)
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.0
    }

    /// Number of training examples (rows).
    pub fn n(&self) -> usize {
        self.0.nrows()
    }

    /// Number of kernels (columns).
    pub fn m(&self) -> usize {
        self.0.ncols()
    }

    pub fn total(&self) -> f64 {
        self.0.iter().sum()
    }

    /// Per-kernel mass: column sums, length M.
    pub fn kernel_marginal(&self) -> Array1<f64> {
        self.0.sum_axis(Axis(0))
    }

    /// Per-training-point mass: row sums, length N.
    pub fn point_marginal(&self) -> Array1<f64> {
        self.0.sum_axis(Axis(1))
    }
}

/// Output of the gating half of the network on a `(B*M, N)` input.
#[derive(Debug, Clone)]
pub struct AnForward {
    /// Pre-activation of the embedding layer, `(B*M, H)`.
    pub pre: Array2<f64>,
    /// ReLU of `pre`.
    pub hidden: Array2<f64>,
    /// Raw gating scores, `(B*M, N)`.
    pub scores: Array2<f64>,
    /// Joint softmax of each sample's `M*N` score block, same shape.
    pub gates: Array2<f64>,
}

/// Run the gating network. `x` is `(B*M, N)`; the per-sample softmax spans
/// each sample's full `M*N` score block, so one sample's gates form a
/// distribution over (kernel, training point) pairs.
pub fn an_forward(params: &ModelParams, x: &Array2<f64>) -> AnForward {
    let (rows, n) = x.dim();
    assert_eq!(n, params.n, "kernel rows have wrong width");
    assert_eq!(rows % params.m, 0, "row count must be a multiple of M");
    let batch = rows / params.m;

    let pre = x.dot(&params.w0.t()) + &params.b0;
    let hidden = pre.mapv(|v| v.max(0.0));
    let scores = hidden.dot(&params.w1.t()) + &params.b1;
    let mut gates = scores.clone();
    for b in 0..batch {
        let mut block = gates.slice_mut(s![b * params.m..(b + 1) * params.m, ..]);
        let flat = block.as_slice_mut().expect("row block is contiguous");
        softmax_inplace(flat);
    }
    AnForward {
        pre,
        hidden,
        scores,
        gates,
    }
}

/// Pool each sample's gated kernel rows into one N-vector:
/// `v_b = sum_m gates[b,m] * x[b,m]`, divided by M under mean pooling.
pub fn fuse(x: &Array2<f64>, gates: &Array2<f64>, m: usize, pool: PoolMode) -> Array2<f64> {
    assert_eq!(x.dim(), gates.dim());
    let (rows, n) = x.dim();
    assert_eq!(rows % m, 0);
    let batch = rows / m;
    let mut fused = Array2::zeros((batch, n));
    for b in 0..batch {
        let mut row = fused.row_mut(b);
        for k in 0..m {
            let r = b * m + k;
            for j in 0..n {
                row[j] += gates[(r, j)] * x[(r, j)];
            }
        }
    }
    if pool == PoolMode::Mean {
        fused.mapv_inplace(|v| v / m as f64);
    }
    fused
}

/// Every intermediate of one forward pass, retained for backprop and for
/// gating export.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// Input kernel rows, `(B*M, N)`.
    pub x: Array2<f64>,
    pub an: AnForward,
    /// Pooled vectors, `(B, N)`.
    pub fused: Array2<f64>,
    /// Classifier first-layer pre-activation (before normalization), `(B, H)`.
    pub mlp_pre: Array2<f64>,
    /// Mean used by the normalizer (batch mean in train mode, running mean
    /// in eval mode).
    pub bn_mean: Array1<f64>,
    /// Biased variance used by the normalizer.
    pub bn_var: Array1<f64>,
    /// Normalized activations, `(B, H)`.
    pub bn_xhat: Array2<f64>,
    /// `gamma * xhat + beta`, `(B, H)`.
    pub bn_out: Array2<f64>,
    /// ReLU of `bn_out`.
    pub hidden1: Array2<f64>,
    /// Second-layer pre-activation, `(B, H)`.
    pub pre2: Array2<f64>,
    /// ReLU of `pre2`.
    pub hidden2: Array2<f64>,
    /// Class logits, `(B, C)`.
    pub logits: Array2<f64>,
    pub mode: Mode,
    pub batch: usize,
}

impl ForwardTrace {
    /// Gating matrix of sample `b`, transposed to `(N, M)`.
    pub fn gating(&self, b: usize, m: usize) -> GatingMatrix {
        let block = self.an.gates.slice(s![b * m..(b + 1) * m, ..]);
        GatingMatrix::new(block.t().to_owned())
    }
}

/// Full forward pass on a `(B*M, N)` batch of kernel rows.
///
/// The pass is pure: in train mode the batch statistics are computed and
/// recorded in the trace, but the caller decides when to fold them into the
/// running state (see [`BatchNormState::update`]).
pub fn forward(params: &ModelParams, x: &Array2<f64>, mode: Mode) -> ForwardTrace {
    let an = an_forward(params, x);
    let batch = x.nrows() / params.m;
    let fused = fuse(x, &an.gates, params.m, params.pool);

    let (w_first, b_first) = match params.arch {
        Architecture::Shared => (&params.w0, &params.b0),
        Architecture::Separate => (
            params.w0_mlp.as_ref().expect("separate head"),
            params.b0_mlp.as_ref().expect("separate head"),
        ),
    };
    let mlp_pre = fused.dot(&w_first.t()) + b_first;

    let (bn_mean, bn_var) = match mode {
        Mode::Train => {
            let mean = mlp_pre.mean_axis(Axis(0)).expect("batch is non-empty");
            let centered = &mlp_pre - &mean;
            let var = centered.mapv(|v| v * v).mean_axis(Axis(0)).expect("non-empty");
            (mean, var)
        }
        Mode::Eval => (params.bn.running_mean.clone(), params.bn.running_var.clone()),
    };
    let inv_std = bn_var.mapv(|v| 1.0 / (v + params.bn.epsilon).sqrt());
    let bn_xhat = (&mlp_pre - &bn_mean) * &inv_std;
    let bn_out = &bn_xhat * &params.gamma + &params.beta;

    let hidden1 = bn_out.mapv(|v| v.max(0.0));
    let pre2 = hidden1.dot(&params.w2.t()) + &params.b2;
    let hidden2 = pre2.mapv(|v| v.max(0.0));
    let logits = hidden2.dot(&params.w3.t()) + &params.b3;

    ForwardTrace {
        x: x.clone(),
        an,
        fused,
        mlp_pre,
        bn_mean,
        bn_var,
        bn_xhat,
        bn_out,
        hidden1,
        pre2,
        hidden2,
        logits,
        mode,
        batch,
    }
}

/// Gather the kernel rows of `indices` into one `(B*M, N)` batch matrix.
pub fn gather_batch(source: &dyn KernelSource, indices: &[usize]) -> Array2<f64> {
    let m = source.m();
    let n = source.n_cols();
    let mut out = Array2::zeros((indices.len() * m, n));
    for (b, &i) in indices.iter().enumerate() {
        let mut block = out.slice_mut(s![b * m..(b + 1) * m, ..]);
        source.copy_sample_into(i, &mut block);
    }
    out
}

/// A trained model plus the seed it was trained with, as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub seed: u64,
}

impl Checkpoint {
    /// Serialize to the binary checkpoint format: magic, version,
    /// architecture and pool codes, shape, seed, batch-norm state, then the
    /// flat parameter vector, all little-endian `f64`.
    pub fn save(&self, path: &Path) -> Result<(), NetworkError> {
        let p = &self.params;
        let file = File::create(path).map_err(|e| NetworkError::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        let mut w = BufWriter::new(file);
        let io = |e: io::Error| NetworkError::Io {
            path: path.to_path_buf(),
            source: e,
        };
        w.write_all(&CHECKPOINT_MAGIC).map_err(io)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes()).map_err(io)?;
        w.write_all(&[p.arch.code(), p.pool.code()]).map_err(io)?;
        for dim in [p.n, p.h, p.c, p.m] {
            w.write_all(&(dim as u64).to_le_bytes()).map_err(io)?;
        }
        w.write_all(&self.seed.to_le_bytes()).map_err(io)?;
        w.write_all(&p.bn.momentum.to_le_bytes()).map_err(io)?;
        w.write_all(&p.bn.epsilon.to_le_bytes()).map_err(io)?;
        for v in p.bn.running_mean.iter().chain(p.bn.running_var.iter()) {
            w.write_all(&v.to_le_bytes()).map_err(io)?;
        }
        for v in p.flatten() {
            w.write_all(&v.to_le_bytes()).map_err(io)?;
        }
        w.flush().map_err(io)
    }

    /// Read a checkpoint back; the byte count must match the header exactly.
    pub fn load(path: &Path) -> Result<Self, NetworkError> {
        let file = File::open(path).map_err(|e| NetworkError::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        let mut r = BufReader::new(file);
        let bad = |msg: String| NetworkError::Format {
            path: path.to_path_buf(),
            msg,
        };

        let mut magic = [0u8; 8];
        read_or(&mut r, &mut magic, path, "magic")?;
        if magic != CHECKPOINT_MAGIC {
            return Err(bad(format!("bad magic {magic:?}")));
        }
        let mut b4 = [0u8; 4];
        read_or(&mut r, &mut b4, path, "version")?;
        let version = u32::from_le_bytes(b4);
        if version != CHECKPOINT_VERSION {
            return Err(bad(format!(
                "unsupported version {version} (expected {CHECKPOINT_VERSION})"
            )));
        }
        let mut b2 = [0u8; 2];
        read_or(&mut r, &mut b2, path, "architecture/pool codes")?;
        let arch = Architecture::from_code(b2[0])
            .ok_or_else(|| bad(format!("unknown architecture code {}", b2[0])))?;
        let pool = PoolMode::from_code(b2[1])
            .ok_or_else(|| bad(format!("unknown pool code {}", b2[1])))?;
        let mut b8 = [0u8; 8];
        let mut dims = [0usize; 4];
        for (i, what) in ["n", "h", "c", "m"].iter().enumerate() {
            read_or(&mut r, &mut b8, path, what)?;
            dims[i] = u64::from_le_bytes(b8) as usize;
        }
        let [n, h, c, m] = dims;
        if n == 0 || h == 0 || c < 2 || m == 0 {
            return Err(bad(format!("degenerate shape {n}x{h}x{c}x{m}")));
        }
        read_or(&mut r, &mut b8, path, "seed")?;
        let seed = u64::from_le_bytes(b8);

        let next_f64 = |r: &mut BufReader<File>, what: &str| -> Result<f64, NetworkError> {
            let mut b = [0u8; 8];
            read_or(r, &mut b, path, what)?;
            Ok(f64::from_le_bytes(b))
        };
        let momentum = next_f64(&mut r, "momentum")?;
        let epsilon = next_f64(&mut r, "epsilon")?;
        let mut running_mean = Array1::zeros(h);
        for v in running_mean.iter_mut() {
            *v = next_f64(&mut r, "running mean")?;
        }
        let mut running_var = Array1::zeros(h);
        for v in running_var.iter_mut() {
            *v = next_f64(&mut r, "running variance")?;
        }

        // shell of the right shape, then overwrite every tensor
        let mut params = ModelParams::init(n, h, c, m, arch, pool, 0);
        params.bn = BatchNormState {
            running_mean,
            running_var,
            momentum,
            epsilon,
        };
        let count = params.num_params();
        let mut flat = vec![0.0; count];
        for v in flat.iter_mut() {
            *v = next_f64(&mut r, "parameters")?;
        }
        params.unflatten_into(&flat);

        let mut trailing = [0u8; 1];
        match r.read(&mut trailing) {
            Ok(0) => {}
            Ok(_) => return Err(bad("trailing bytes after parameters".into())),
            Err(e) => {
                return Err(NetworkError::Io {
                    path: path.to_path_buf(),
                    source: e,
                })
            }
        }
        Ok(Checkpoint { params, seed })
    }
}

fn read_or(
    r: &mut impl Read,
    buf: &mut [u8],
    path: &Path,
    what: &str,
) -> Result<(), NetworkError> {
    r.read_exact(buf).map_err(|_| NetworkError::Format {
        path: path.to_path_buf(),
        msg: format!("truncated while reading {what}"),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::build_train_kernels;
    use crate::dataio::LabeledExample;
    use rand::Rng;

    fn dense(label: i64, coords: &[f64]) -> LabeledExample {
        LabeledExample {
            label,
            features: coords
                .iter()
                .enumerate()
                .map(|(i, &v)| (i as u32, v))
                .collect(),
        }
    }

    fn toy_stack(n: usize, m: usize) -> crate::kernels::KernelStack {
        let ex: Vec<LabeledExample> = (0..n)
            .map(|i| {
                let t = i as f64 * 0.7;
                dense(if i % 2 == 0 { 1 } else { -1 }, &[t.cos(), t.sin()])
            })
            .collect();
        build_train_kernels(&ex, m).unwrap()
    }

    #[test]
    fn softmax_known_values() {
        let p = softmax(&[0.0, 0.0]);
        assert!((p[0] - 0.5).abs() < 1e-15 && (p[1] - 0.5).abs() < 1e-15);
        let p = softmax(&[0.0, 3.0f64.ln()]);
        assert!((p[0] - 0.25).abs() < 1e-12 && (p[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn softmax_shift_invariant_and_stable() {
        let x = [1.0, -2.0, 0.5, 3.0];
        let shifted: Vec<f64> = x.iter().map(|v| v + 123.456).collect();
        let a = softmax(&x);
        let b = softmax(&shifted);
        for (pa, pb) in a.iter().zip(&b) {
            assert!((pa - pb).abs() < 1e-12);
        }
        let huge = softmax(&[1000.0, 1000.5]);
        assert!(huge.iter().all(|v| v.is_finite()));
        assert!((huge.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn init_is_seeded_and_shapes_match() {
        let a = ModelParams::init(6, 4, 2, 3, Architecture::Shared, PoolMode::Sum, 9);
        let b = ModelParams::init(6, 4, 2, 3, Architecture::Shared, PoolMode::Sum, 9);
        assert_eq!(a, b);
        let c = ModelParams::init(6, 4, 2, 3, Architecture::Shared, PoolMode::Sum, 10);
        assert_ne!(a, c);
        assert_eq!(a.w0.dim(), (4, 6));
        assert_eq!(a.w1.dim(), (6, 4));
        assert_eq!(a.w2.dim(), (4, 4));
        assert_eq!(a.w3.dim(), (2, 4));
        assert!(a.w0_mlp.is_none());
        let d = ModelParams::init(6, 4, 2, 3, Architecture::Separate, PoolMode::Sum, 9);
        // common tensors agree across architectures at the same seed
        assert_eq!(a.w0, d.w0);
        assert_eq!(a.w1, d.w1);
        assert_eq!(d.w0_mlp.as_ref().unwrap().dim(), (4, 6));
    }

    #[test]
    fn flatten_round_trip() {
        for arch in [Architecture::Shared, Architecture::Separate] {
            let p = ModelParams::init(5, 3, 2, 2, arch, PoolMode::Sum, 4);
            let flat = p.flatten();
            assert_eq!(flat.len(), p.num_params());
            let mut q = ModelParams::init(5, 3, 2, 2, arch, PoolMode::Sum, 99);
            q.unflatten_into(&flat);
            assert_eq!(q.w0, p.w0);
            assert_eq!(q.b3, p.b3);
            assert_eq!(q.flatten(), flat);
        }
    }

    #[test]
    fn tensor_of_maps_flat_indices() {
        let p = ModelParams::init(5, 3, 2, 2, Architecture::Separate, PoolMode::Sum, 4);
        assert_eq!(p.tensor_of(0), "w0");
        assert_eq!(p.tensor_of(p.num_params() - 1), "b3");
        let mut offset = 0;
        for (name, len) in p.layout() {
            assert_eq!(p.tensor_of(offset), name);
            offset += len;
        }
    }

    #[test]
    fn gates_are_a_distribution_per_sample() {
        let stack = toy_stack(8, 3);
        let params = ModelParams::init(8, 5, 2, 3, Architecture::Shared, PoolMode::Sum, 1);
        let x = gather_batch(&stack, &[0, 3, 6]);
        let an = an_forward(&params, &x);
        assert_eq!(an.gates.dim(), (9, 8));
        for b in 0..3 {
            let block = an.gates.slice(s![b * 3..(b + 1) * 3, ..]);
            let total: f64 = block.iter().sum();
            assert!((total - 1.0).abs() < 1e-12, "sample {b} sums to {total}");
            assert!(block.iter().all(|&g| g >= 0.0));
        }
    }

    #[test]
    fn fuse_small_case_by_hand() {
        let x = ndarray::arr2(&[[1.0, 2.0], [3.0, 4.0]]);
        let gates = ndarray::arr2(&[[0.1, 0.2], [0.3, 0.4]]);
        let v = fuse(&x, &gates, 2, PoolMode::Sum);
        assert_eq!(v.dim(), (1, 2));
        assert!((v[(0, 0)] - 1.0).abs() < 1e-15);
        assert!((v[(0, 1)] - 2.0).abs() < 1e-15);
        let v = fuse(&x, &gates, 2, PoolMode::Mean);
        assert!((v[(0, 0)] - 0.5).abs() < 1e-15);
        assert!((v[(0, 1)] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn forward_is_deterministic() {
        let stack = toy_stack(10, 4);
        let params = ModelParams::init(10, 6, 3, 4, Architecture::Separate, PoolMode::Sum, 2);
        let x = gather_batch(&stack, &[1, 2, 5, 7]);
        let t1 = forward(&params, &x, Mode::Train);
        let t2 = forward(&params, &x, Mode::Train);
        assert_eq!(t1.logits, t2.logits);
        assert_eq!(t1.logits.dim(), (4, 3));
    }

    #[test]
    fn train_mode_normalizes_batch_columns() {
        let stack = toy_stack(10, 2);
        let params = ModelParams::init(10, 4, 2, 2, Architecture::Shared, PoolMode::Sum, 3);
        let x = gather_batch(&stack, &[0, 1, 2, 3, 4, 5]);
        let t = forward(&params, &x, Mode::Train);
        // gamma = 1, beta = 0 at init, so bn_out columns have mean ~0 and
        // biased variance ~var/(var + eps) ~1
        for col in t.bn_out.columns() {
            let mean: f64 = col.mean().unwrap();
            assert!(mean.abs() < 1e-9, "column mean {mean}");
        }
        for ((&v, col), &mean) in t
            .bn_var
            .iter()
            .zip(t.bn_out.columns())
            .zip(t.bn_mean.iter())
        {
            let _ = mean;
            let var: f64 = col.mapv(|c| c * c).mean().unwrap();
            let want = v / (v + params.bn.epsilon);
            assert!((var - want).abs() < 1e-9);
        }
    }

    #[test]
    fn eval_mode_uses_running_statistics() {
        let stack = toy_stack(6, 2);
        let mut params = ModelParams::init(6, 3, 2, 2, Architecture::Shared, PoolMode::Sum, 5);
        params.bn.running_mean.fill(0.25);
        params.bn.running_var.fill(4.0);
        let x = gather_batch(&stack, &[0]);
        let t = forward(&params, &x, Mode::Eval);
        let expect =
            (&t.mlp_pre - 0.25) / (4.0f64 + params.bn.epsilon).sqrt();
        for (a, b) in t.bn_xhat.iter().zip(expect.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn running_update_blends() {
        let mut bn = BatchNormState::new(2);
        let mean = ndarray::arr1(&[1.0, -1.0]);
        let var = ndarray::arr1(&[2.0, 3.0]);
        bn.update(&mean, &var);
        assert!((bn.running_mean[0] - 0.1).abs() < 1e-15);
        assert!((bn.running_var[0] - (0.9 + 0.2)).abs() < 1e-15);
    }

    #[test]
    fn gating_matrix_accessors() {
        let stack = toy_stack(7, 3);
        let params = ModelParams::init(7, 4, 2, 3, Architecture::Shared, PoolMode::Sum, 8);
        let x = gather_batch(&stack, &[2, 4]);
        let t = forward(&params, &x, Mode::Train);
        let g = t.gating(1, 3);
        assert_eq!(g.n(), 7);
        assert_eq!(g.m(), 3);
        assert!((g.total() - 1.0).abs() < 1e-9);
        let km = g.kernel_marginal();
        assert_eq!(km.len(), 3);
        assert!((km.sum() - 1.0).abs() < 1e-9);
        // marginal matches direct summation from the raw gates
        let block = t.an.gates.slice(s![3..6, ..]);
        for m in 0..3 {
            let direct: f64 = block.row(m).sum();
            assert!((km[m] - direct).abs() < 1e-12);
        }
    }

    #[test]
    fn checkpoint_round_trip_bit_exact() {
        for arch in [Architecture::Shared, Architecture::Separate] {
            let mut params = ModelParams::init(6, 4, 3, 2, arch, PoolMode::Mean, 11);
            // make running stats non-trivial
            let mut rng = ChaCha8Rng::seed_from_u64(77);
            params.bn.running_mean.mapv_inplace(|_| rng.gen::<f64>());
            params.bn.running_var.mapv_inplace(|_| rng.gen::<f64>() + 0.5);
            let ckpt = Checkpoint {
                params,
                seed: 0xDEADBEEF,
            };
            let f = tempfile::NamedTempFile::new().unwrap();
            ckpt.save(f.path()).unwrap();
            let back = Checkpoint::load(f.path()).unwrap();
            assert_eq!(back.seed, ckpt.seed);
            assert_eq!(back.params.arch, arch);
            assert_eq!(back.params.pool, PoolMode::Mean);
            let a = ckpt.params.flatten();
            let b = back.params.flatten();
            assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
            assert_eq!(back.params.bn, ckpt.params.bn);
        }
    }

    #[test]
    fn checkpoint_rejects_corruption() {
        let params = ModelParams::init(4, 3, 2, 2, Architecture::Shared, PoolMode::Sum, 1);
        let ckpt = Checkpoint { params, seed: 5 };
        let f = tempfile::NamedTempFile::new().unwrap();
        ckpt.save(f.path()).unwrap();

        let good = std::fs::read(f.path()).unwrap();
        let mut bad_magic = good.clone();
        bad_magic[0] = b'?';
        std::fs::write(f.path(), &bad_magic).unwrap();
        assert!(matches!(
            Checkpoint::load(f.path()),
            Err(NetworkError::Format { .. })
        ));

        std::fs::write(f.path(), &good[..good.len() - 3]).unwrap();
        assert!(Checkpoint::load(f.path()).is_err());

        let mut trailing = good.clone();
        trailing.push(0);
        std::fs::write(f.path(), &trailing).unwrap();
        assert!(Checkpoint::load(f.path()).is_err());
    }

    #[test]
    fn compatibility_check() {
        let stack = toy_stack(9, 2);
        let params = ModelParams::init(9, 3, 2, 2, Architecture::Shared, PoolMode::Sum, 1);
        assert!(params.check_compatible(&stack).is_ok());
        let wrong_n = ModelParams::init(8, 3, 2, 2, Architecture::Shared, PoolMode::Sum, 1);
        assert!(matches!(
            wrong_n.check_compatible(&stack),
            Err(NetworkError::Incompatible { what: "training columns", .. })
        ));
        let wrong_m = ModelParams::init(9, 3, 2, 3, Architecture::Shared, PoolMode::Sum, 1);
        assert!(wrong_m.check_compatible(&stack).is_err());
    }
}
