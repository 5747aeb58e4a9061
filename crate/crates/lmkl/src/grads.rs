//! Loss, analytic gradients, and numerical gradient verification.
//!
//! The backward pass consumes a training-mode [`ForwardTrace`] and produces
//! exact gradients of the mean cross-entropy loss, including the full
//! Jacobian of the batch normalizer (batch statistics are treated as
//! functions of the inputs, not constants). The checker compares every
//! coordinate against central finite differences, skipping coordinates
//! whose probes straddle a ReLU kink and coordinates where both estimates
//! sit below the resolution of the difference quotient.

use ndarray::{s, Array1, Array2, Axis};
use thiserror::Error;

use crate::network::{
    forward, Architecture, ForwardTrace, Mode, ModelParams, PoolMode,
};

#[derive(Debug, Error)]
pub enum GradError {
    #[error("backward requires a training-mode trace")]
    EvalTrace,
    #[error("{got} labels for a batch of {batch}")]
    LabelCount { got: usize, batch: usize },
}

/// Gradients of the loss with respect to every learnable tensor, shaped
/// like [`ModelParams`]. `w0_mlp`/`b0_mlp` are present exactly when the
/// architecture is separate.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
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
}

impl Gradients {
    /// Flatten in the same order as [`ModelParams::flatten`].
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
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

    /// Largest absolute entry, useful for monitoring.
    pub fn max_abs(&self) -> f64 {
        self.flatten().iter().fold(0.0f64, |a, &g| a.max(g.abs()))
    }
}

/// Log-sum-exp of one row, max-subtracted for stability.
fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln()
}

/// Mean cross-entropy of logits against integer class labels.
pub fn cross_entropy_loss(logits: &Array2<f64>, labels: &[usize]) -> f64 {
    let (b, c) = logits.dim();
    assert_eq!(labels.len(), b, "one label per row");
    let mut total = 0.0;
    for (row, &y) in logits.rows().into_iter().zip(labels) {
        assert!(y < c, "label {y} out of range for {c} classes");
        let row = row.as_slice().expect("contiguous row");
        total += log_sum_exp(row) - row[y];
    }
    total / b as f64
}

/// Softmax probabilities minus the one-hot targets, divided by the batch
/// size: the gradient of mean cross-entropy with respect to the logits.
fn dlogits(logits: &Array2<f64>, labels: &[usize]) -> Array2<f64> {
    let (b, _) = logits.dim();
    let mut out = logits.clone();
    for (mut row, &y) in out.rows_mut().into_iter().zip(labels) {
        crate::network::softmax_inplace(row.as_slice_mut().expect("contiguous row"));
        row[y] -= 1.0;
        row.mapv_inplace(|v| v / b as f64);
    }
    out
}

/// Exact gradients of the mean cross-entropy loss at a training-mode trace.
pub fn backward(
    params: &ModelParams,
    trace: &ForwardTrace,
    labels: &[usize],
) -> Result<Gradients, GradError> {
    if trace.mode != Mode::Train {
        return Err(GradError::EvalTrace);
    }
    if labels.len() != trace.batch {
        return Err(GradError::LabelCount {
            got: labels.len(),
            batch: trace.batch,
        });
    }
    let b = trace.batch as f64;
    let m = params.m;

    // classifier head
    let d_logits = dlogits(&trace.logits, labels);
    let g_w3 = d_logits.t().dot(&trace.hidden2);
    let g_b3 = d_logits.sum_axis(Axis(0));
    let d_h2 = d_logits.dot(&params.w3);

    let d_pre2 = &d_h2 * &trace.pre2.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
    let g_w2 = d_pre2.t().dot(&trace.hidden1);
    let g_b2 = d_pre2.sum_axis(Axis(0));
    let d_q = d_pre2.dot(&params.w2);

    let d_bn_out = &d_q * &trace.bn_out.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
    let g_gamma = (&d_bn_out * &trace.bn_xhat).sum_axis(Axis(0));
    let g_beta = d_bn_out.sum_axis(Axis(0));

    // full-Jacobian batch-norm backward:
    // du = inv_std/B * (B*dxhat - sum(dxhat) - xhat * sum(dxhat * xhat))
    let d_xhat = &d_bn_out * &params.gamma;
    let inv_std = trace.bn_var.mapv(|v| 1.0 / (v + params.bn.epsilon).sqrt());
    let sum_dxhat = d_xhat.sum_axis(Axis(0));
    let sum_dxhat_xhat = (&d_xhat * &trace.bn_xhat).sum_axis(Axis(0));
    let d_u = (d_xhat.mapv(|v| v * b) - &sum_dxhat - &trace.bn_xhat * &sum_dxhat_xhat)
        * &inv_std.mapv(|v| v / b);

    // head first layer: u = fused . w_first^T + b_first
    let g_w_first = d_u.t().dot(&trace.fused);
    let g_b_first = d_u.sum_axis(Axis(0));
    let w_first = match params.arch {
        Architecture::Shared => &params.w0,
        Architecture::Separate => params.w0_mlp.as_ref().expect("separate head"),
    };
    let d_fused = d_u.dot(w_first);

    // fuse backward: d gate row (b, k) = pool_factor * d_fused_b ⊙ x_row
    let pool_factor = match params.pool {
        PoolMode::Sum => 1.0,
        PoolMode::Mean => 1.0 / m as f64,
    };
    let mut d_gates = Array2::zeros(trace.an.gates.dim());
    for bi in 0..trace.batch {
        let dv = d_fused.row(bi);
        for k in 0..m {
            let r = bi * m + k;
            let x_row = trace.x.row(r);
            let mut out = d_gates.row_mut(r);
            for j in 0..dv.len() {
                out[j] = pool_factor * dv[j] * x_row[j];
            }
        }
    }

    // joint softmax backward per sample block:
    // ds = h ⊙ (dh - <h, dh>) over the flattened M*N entries
    let mut d_scores = Array2::zeros(trace.an.scores.dim());
    for bi in 0..trace.batch {
        let h = trace.an.gates.slice(s![bi * m..(bi + 1) * m, ..]);
        let dh = d_gates.slice(s![bi * m..(bi + 1) * m, ..]);
        let inner: f64 = h.iter().zip(dh.iter()).map(|(&a, &g)| a * g).sum();
        let mut out = d_scores.slice_mut(s![bi * m..(bi + 1) * m, ..]);
        ndarray::Zip::from(&mut out).and(&h).and(&dh).for_each(|o, &hv, &dhv| {
            *o = hv * (dhv - inner);
        });
    }

    // gating network layers
    let g_w1 = d_scores.t().dot(&trace.an.hidden);
    let g_b1 = d_scores.sum_axis(Axis(0));
    let d_hidden = d_scores.dot(&params.w1);
    let d_pre_an = &d_hidden * &trace.an.pre.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
    let g_w0_an = d_pre_an.t().dot(&trace.x);
    let g_b0_an = d_pre_an.sum_axis(Axis(0));

    let grads = match params.arch {
        Architecture::Shared => Gradients {
            // the first layer is tied: gating and head contributions add
            w0: g_w0_an + g_w_first,
            b0: g_b0_an + g_b_first,
            w1: g_w1,
            b1: g_b1,
            w0_mlp: None,
            b0_mlp: None,
            gamma: g_gamma,
            beta: g_beta,
            w2: g_w2,
            b2: g_b2,
            w3: g_w3,
            b3: g_b3,
        },
        Architecture::Separate => Gradients {
            w0: g_w0_an,
            b0: g_b0_an,
            w1: g_w1,
            b1: g_b1,
            w0_mlp: Some(g_w_first),
            b0_mlp: Some(g_b_first),
            gamma: g_gamma,
            beta: g_beta,
            w2: g_w2,
            b2: g_b2,
            w3: g_w3,
            b3: g_b3,
        },
    };
    Ok(grads)
}

/// Training-mode loss of `params` on a gathered batch.
pub fn training_loss(params: &ModelParams, x: &Array2<f64>, labels: &[usize]) -> f64 {
    let trace = forward(params, x, Mode::Train);
    cross_entropy_loss(&trace.logits, labels)
}

/// Central-difference estimate of the loss gradient at one flat coordinate.
pub fn finite_diff_grad(
    params: &ModelParams,
    x: &Array2<f64>,
    labels: &[usize],
    index: usize,
    eps: f64,
) -> f64 {
    let mut flat = params.flatten();
    let mut probe = params.clone();
    flat[index] += eps;
    probe.unflatten_into(&flat);
    let loss_p = training_loss(&probe, x, labels);
    flat[index] -= 2.0 * eps;
    probe.unflatten_into(&flat);
    let loss_m = training_loss(&probe, x, labels);
    (loss_p - loss_m) / (2.0 * eps)
}

/// One coordinate that failed the gradient check.
#[derive(Debug, Clone)]
pub struct GradCheckFailure {
    pub index: usize,
    pub tensor: &'static str,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

/// Outcome of a full gradient check.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Coordinates compared (excludes skips).
    pub checked: usize,
    /// Coordinates skipped because a ReLU changed sign between the probes.
    pub kink_skips: usize,
    /// Coordinates skipped because both estimates were below the
    /// difference quotient's resolution.
    pub resolution_skips: usize,
    /// Largest relative error among compared coordinates.
    pub max_rel_err: f64,
    pub failures: Vec<GradCheckFailure>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Masks of the ReLU input signs; two probes are comparable only when every
/// unit stays on the same side of its kink.
fn relu_signature(trace: &ForwardTrace) -> Vec<bool> {
    trace
        .an
        .pre
        .iter()
        .chain(trace.bn_out.iter())
        .chain(trace.pre2.iter())
        .map(|&v| v > 0.0)
        .collect()
}

/// Compare analytic gradients against central differences at every flat
/// coordinate.
///
/// The difference quotient has an intrinsic resolution of about
/// `64 * machine_eps * max(|loss+|, |loss-|, 1) / (2 * eps)` — the
/// cancellation noise of subtracting two nearly equal losses. Three rules
/// keep the comparison honest around that floor:
///
/// * a coordinate is skipped (not failed) when the two probe passes
///   disagree on any ReLU sign — the loss is locally non-differentiable
///   there and the quotient is meaningless;
/// * a coordinate is skipped when both the numeric and the analytic value
///   are below the resolution, which arises for tensors the loss provably
///   does not depend on;
/// * a compared coordinate passes outright when the absolute discrepancy
///   is within the resolution: the quotient cannot certify agreement any
///   tighter than its own noise, and a genuine gradient bug produces
///   discrepancies proportional to the gradient magnitude, far above it.
pub fn grad_check(
    params: &ModelParams,
    x: &Array2<f64>,
    labels: &[usize],
    eps: f64,
    tol: f64,
) -> GradCheckReport {
    let trace = forward(params, x, Mode::Train);
    let analytic = backward(params, &trace, labels)
        .expect("training-mode trace")
        .flatten();
    let base = params.flatten();
    let mut probe = params.clone();
    let mut flat = base.clone();

    let mut report = GradCheckReport {
        checked: 0,
        kink_skips: 0,
        resolution_skips: 0,
        max_rel_err: 0.0,
        failures: Vec::new(),
    };

    for k in 0..base.len() {
        flat[k] = base[k] + eps;
        probe.unflatten_into(&flat);
        let trace_p = forward(&probe, x, Mode::Train);
        let loss_p = cross_entropy_loss(&trace_p.logits, labels);

        flat[k] = base[k] - eps;
        probe.unflatten_into(&flat);
        let trace_m = forward(&probe, x, Mode::Train);
        let loss_m = cross_entropy_loss(&trace_m.logits, labels);
        flat[k] = base[k];

        if relu_signature(&trace_p) != relu_signature(&trace_m) {
            report.kink_skips += 1;
            continue;
        }

        let numeric = (loss_p - loss_m) / (2.0 * eps);
        let resolution = 64.0 * f64::EPSILON * loss_p.abs().max(loss_m.abs()).max(1.0) / (2.0 * eps);
        if numeric.abs() < resolution && analytic[k].abs() < resolution {
            report.resolution_skips += 1;
            continue;
        }

        report.checked += 1;
        if (analytic[k] - numeric).abs() <= resolution {
            // agreement down to the quotient's own noise
            continue;
        }
        let rel = (analytic[k] - numeric).abs() / analytic[k].abs().max(numeric.abs()).max(1e-8);
        if rel > report.max_rel_err {
            report.max_rel_err = rel;
        }
        if rel > tol {
            report.failures.push(GradCheckFailure {
                index: k,
                tensor: params.tensor_of(k),
                analytic: analytic[k],
                numeric,
                rel_err: rel,
            });
        }
    }
    probe.unflatten_into(&base);
    report
}
