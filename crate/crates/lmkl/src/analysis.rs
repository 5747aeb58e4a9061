//! Model evaluation and gating inspection.
//!
//! Besides plain prediction/accuracy, this module summarizes where the
//! gating network puts its mass: per-sample kernel marginals (how much
//! weight each bandwidth receives) and per-class statistics of those
//! marginals. The summaries serialize to a line-oriented text format that
//! round-trips exactly, so downstream tooling can parse what we write.

use std::fmt::Write as _;
use std::io;
use std::path::{Path, PathBuf};

use ndarray::Array1;
use thiserror::Error;

use crate::grads::cross_entropy_loss;
use crate::kernels::KernelSource;
use crate::network::{forward, gather_batch, GatingMatrix, Mode, ModelParams, NetworkError};

/// First line of every gating export file.
pub const GATING_HEADER: &str = "gating-export v1";

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("{labels} labels for {rows} kernel rows")]
    LabelCount { labels: usize, rows: usize },
    #[error("no examples to analyze")]
    Empty,
    #[error("label {label} out of range for {classes} classes")]
    LabelRange { label: usize, classes: usize },
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error(transparent)]
    Network(#[from] NetworkError),
}

/// Argmax with ties broken toward the lower index.
fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Batch size used when streaming examples through the network.
const PREDICT_BATCH: usize = 256;

/// Predicted class ids for every example of a kernel source, in row order.
/// Runs in evaluation mode (running normalizer statistics).
pub fn predict(params: &ModelParams, source: &dyn KernelSource) -> Result<Vec<usize>, NetworkError> {
    params.check_compatible(source)?;
    let rows = source.n_rows();
    let mut out = Vec::with_capacity(rows);
    let mut start = 0;
    while start < rows {
        let end = (start + PREDICT_BATCH).min(rows);
        let indices: Vec<usize> = (start..end).collect();
        let x = gather_batch(source, &indices);
        let trace = forward(params, &x, Mode::Eval);
        for row in trace.logits.rows() {
            out.push(argmax(row.as_slice().expect("contiguous row")));
        }
        start = end;
    }
    Ok(out)
}

/// Fraction of positions where the two label sequences agree.
pub fn accuracy(predicted: &[usize], truth: &[usize]) -> f64 {
    assert_eq!(predicted.len(), truth.len(), "length mismatch");
    assert!(!predicted.is_empty(), "empty label sequences");
    let hits = predicted
        .iter()
        .zip(truth)
        .filter(|(p, t)| p == t)
        .count();
    hits as f64 / predicted.len() as f64
}

/// Mean cross-entropy loss and accuracy of a model over a kernel source,
/// in evaluation mode. The loss is the mean over all examples regardless
/// of how they are batched internally.
pub fn evaluate(
    params: &ModelParams,
    source: &dyn KernelSource,
    labels: &[usize],
    batch_size: usize,
) -> (f64, f64) {
    assert!(batch_size > 0);
    let rows = source.n_rows();
    assert_eq!(labels.len(), rows, "one label per kernel row");
    assert!(rows > 0, "nothing to evaluate");
    let mut loss_sum = 0.0;
    let mut hits = 0usize;
    let mut start = 0;
    while start < rows {
        let end = (start + batch_size).min(rows);
        let indices: Vec<usize> = (start..end).collect();
        let x = gather_batch(source, &indices);
        let trace = forward(params, &x, Mode::Eval);
        let batch_labels = &labels[start..end];
        loss_sum += cross_entropy_loss(&trace.logits, batch_labels) * (end - start) as f64;
        for (row, &y) in trace.logits.rows().into_iter().zip(batch_labels) {
            if argmax(row.as_slice().expect("contiguous row")) == y {
                hits += 1;
            }
        }
        start = end;
    }
    (loss_sum / rows as f64, hits as f64 / rows as f64)
}

/// Gating matrix of one example, `(N, M)`.
pub fn gating_for(
    params: &ModelParams,
    source: &dyn KernelSource,
    index: usize,
) -> Result<GatingMatrix, NetworkError> {
    params.check_compatible(source)?;
    assert!(index < source.n_rows(), "example index out of range");
    let x = gather_batch(source, &[index]);
    let trace = forward(params, &x, Mode::Eval);
    Ok(trace.gating(0, params.m))
}

/// Per-kernel mass of a gating matrix: its column sums, length M. The
/// result is itself a distribution over kernels.
pub fn marginalize_gating(gating: &GatingMatrix) -> Array1<f64> {
    gating.kernel_marginal()
}

/// Kernel-marginal gating of one class: the mean and population standard
/// deviation of the per-sample kernel marginals, over the class members.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassGatingStats {
    pub class: usize,
    pub count: usize,
    /// Mean marginal, length M; sums to 1 when the class is non-empty.
    pub mean: Array1<f64>,
    /// Population standard deviation per kernel, length M.
    pub std: Array1<f64>,
}

/// Mean (and spread of) kernel-marginal gating per class, over every
/// example of the source. Empty classes get zero mean, zero spread.
pub fn class_mean_gating(
    params: &ModelParams,
    source: &dyn KernelSource,
    labels: &[usize],
    num_classes: usize,
) -> Result<Vec<ClassGatingStats>, AnalysisError> {
    params.check_compatible(source)?;
    let rows = source.n_rows();
    if rows == 0 {
        return Err(AnalysisError::Empty);
    }
    if labels.len() != rows {
        return Err(AnalysisError::LabelCount {
            labels: labels.len(),
            rows,
        });
    }
    for &label in labels {
        if label >= num_classes {
            return Err(AnalysisError::LabelRange {
                label,
                classes: num_classes,
            });
        }
    }
    let m = params.m;
    let mut counts = vec![0usize; num_classes];
    let mut sums = vec![Array1::<f64>::zeros(m); num_classes];
    let mut sq_sums = vec![Array1::<f64>::zeros(m); num_classes];

    let mut start = 0;
    while start < rows {
        let end = (start + PREDICT_BATCH).min(rows);
        let indices: Vec<usize> = (start..end).collect();
        let x = gather_batch(source, &indices);
        let trace = forward(params, &x, Mode::Eval);
        for (offset, &y) in labels[start..end].iter().enumerate() {
            let marginal = trace.gating(offset, m).kernel_marginal();
            counts[y] += 1;
            sums[y] += &marginal;
            sq_sums[y] += &marginal.mapv(|v| v * v);
        }
        start = end;
    }

    let stats = (0..num_classes)
        .map(|class| {
            let count = counts[class];
            if count == 0 {
                return ClassGatingStats {
                    class,
                    count,
                    mean: Array1::zeros(m),
                    std: Array1::zeros(m),
                };
            }
            let mean = &sums[class] / count as f64;
            let var = &sq_sums[class] / count as f64 - mean.mapv(|v| v * v);
            ClassGatingStats {
                class,
                count,
                std: var.mapv(|v| v.max(0.0).sqrt()),
                mean,
            }
        })
        .collect();
    Ok(stats)
}

/// L1 distance between two kernel-marginal vectors.
pub fn l1_distance(a: &Array1<f64>, b: &Array1<f64>) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).sum()
}

/// Kernel marginal of one example together with its identity.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleGating {
    /// Row index in the kernel source.
    pub index: usize,
    /// Internal class id.
    pub label: usize,
    /// Per-kernel gating mass, length M.
    pub marginal: Array1<f64>,
}

/// A complete gating report: a few example-level marginals plus class-level
/// statistics over the whole source.
#[derive(Debug, Clone, PartialEq)]
pub struct GatingExport {
    /// Number of kernels M.
    pub m: usize,
    pub samples: Vec<SampleGating>,
    pub classes: Vec<ClassGatingStats>,
}

/// Build a gating report: marginals for the first `sample_limit` examples
/// and class statistics over all of them.
pub fn gating_report(
    params: &ModelParams,
    source: &dyn KernelSource,
    labels: &[usize],
    num_classes: usize,
    sample_limit: usize,
) -> Result<GatingExport, AnalysisError> {
    let classes = class_mean_gating(params, source, labels, num_classes)?;
    let take = sample_limit.min(source.n_rows());
    let mut samples = Vec::with_capacity(take);
    for (index, &label) in labels.iter().enumerate().take(take) {
        let gating = gating_for(params, source, index)?;
        samples.push(SampleGating {
            index,
            label,
            marginal: gating.kernel_marginal(),
        });
    }
    Ok(GatingExport {
        m: params.m,
        samples,
        classes,
    })
}

fn push_floats(out: &mut String, tag: &str, values: &Array1<f64>) {
    out.push_str(tag);
    for v in values {
        // shortest round-trip decimal; the parser recovers the exact bits
        write!(out, " {v}").expect("string write");
    }
    out.push('\n');
}

/// Render a gating report as line-oriented text. Floats are written in
/// shortest round-trip form, so [`parse_gating`] reproduces them exactly.
pub fn export_gating(report: &GatingExport) -> String {
    let mut out = String::new();
    out.push_str(GATING_HEADER);
    out.push('\n');
    writeln!(out, "kernels {}", report.m).expect("string write");
    writeln!(out, "samples {}", report.samples.len()).expect("string write");
    writeln!(out, "classes {}", report.classes.len()).expect("string write");
    for s in &report.samples {
        writeln!(out, "sample {} label {}", s.index, s.label).expect("string write");
        push_floats(&mut out, "marginal", &s.marginal);
    }
    for c in &report.classes {
        writeln!(out, "class {} count {}", c.class, c.count).expect("string write");
        push_floats(&mut out, "mean", &c.mean);
        push_floats(&mut out, "std", &c.std);
    }
    out
}

struct LineReader<'a> {
    lines: std::iter::Enumerate<std::str::Lines<'a>>,
}

impl<'a> LineReader<'a> {
    fn next(&mut self, what: &str) -> Result<(usize, &'a str), AnalysisError> {
        match self.lines.next() {
            Some((i, line)) => Ok((i + 1, line)),
            None => Err(AnalysisError::Parse {
                line: 0,
                msg: format!("unexpected end of input, expected {what}"),
            }),
        }
    }
}

fn parse_count(line: &str, lineno: usize, key: &str) -> Result<usize, AnalysisError> {
    let rest = line.strip_prefix(key).and_then(|r| r.strip_prefix(' '));
    match rest {
        Some(v) => v.trim().parse().map_err(|_| AnalysisError::Parse {
            line: lineno,
            msg: format!("cannot parse `{line}` as `{key} <count>`"),
        }),
        None => Err(AnalysisError::Parse {
            line: lineno,
            msg: format!("expected `{key} <count>`, got `{line}`"),
        }),
    }
}

fn parse_floats(
    line: &str,
    lineno: usize,
    key: &str,
    expect: usize,
) -> Result<Array1<f64>, AnalysisError> {
    let rest = line.strip_prefix(key).ok_or_else(|| AnalysisError::Parse {
        line: lineno,
        msg: format!("expected `{key} ...`, got `{line}`"),
    })?;
    let values: Result<Vec<f64>, _> = rest.split_whitespace().map(str::parse).collect();
    let values = values.map_err(|_| AnalysisError::Parse {
        line: lineno,
        msg: format!("cannot parse floats in `{line}`"),
    })?;
    if values.len() != expect {
        return Err(AnalysisError::Parse {
            line: lineno,
            msg: format!("expected {expect} values, found {}", values.len()),
        });
    }
    Ok(Array1::from_vec(values))
}

/// Parse the text produced by [`export_gating`].
pub fn parse_gating(text: &str) -> Result<GatingExport, AnalysisError> {
    let mut reader = LineReader {
        lines: text.lines().enumerate(),
    };
    let (lineno, header) = reader.next("header")?;
    if header.trim() != GATING_HEADER {
        return Err(AnalysisError::Parse {
            line: lineno,
            msg: format!("bad header `{header}`"),
        });
    }
    let (lineno, line) = reader.next("kernel count")?;
    let m = parse_count(line, lineno, "kernels")?;
    if m == 0 {
        return Err(AnalysisError::Parse {
            line: lineno,
            msg: "kernel count must be positive".into(),
        });
    }
    let (lineno, line) = reader.next("sample count")?;
    let n_samples = parse_count(line, lineno, "samples")?;
    let (lineno, line) = reader.next("class count")?;
    let n_classes = parse_count(line, lineno, "classes")?;

    let mut samples = Vec::with_capacity(n_samples);
    for _ in 0..n_samples {
        let (lineno, line) = reader.next("sample line")?;
        let parts: Vec<&str> = line.split_whitespace().collect();
        let ok = parts.len() == 4 && parts[0] == "sample" && parts[2] == "label";
        let parsed = if ok {
            parts[1].parse::<usize>().ok().zip(parts[3].parse::<usize>().ok())
        } else {
            None
        };
        let (index, label) = parsed.ok_or_else(|| AnalysisError::Parse {
            line: lineno,
            msg: format!("expected `sample <index> label <class>`, got `{line}`"),
        })?;
        let (lineno, line) = reader.next("marginal line")?;
        let marginal = parse_floats(line, lineno, "marginal", m)?;
        samples.push(SampleGating {
            index,
            label,
            marginal,
        });
    }

    let mut classes = Vec::with_capacity(n_classes);
    for _ in 0..n_classes {
        let (lineno, line) = reader.next("class line")?;
        let parts: Vec<&str> = line.split_whitespace().collect();
        let ok = parts.len() == 4 && parts[0] == "class" && parts[2] == "count";
        let parsed = if ok {
            parts[1].parse::<usize>().ok().zip(parts[3].parse::<usize>().ok())
        } else {
            None
        };
        let (class, count) = parsed.ok_or_else(|| AnalysisError::Parse {
            line: lineno,
            msg: format!("expected `class <id> count <n>`, got `{line}`"),
        })?;
        let (lineno, line) = reader.next("mean line")?;
        let mean = parse_floats(line, lineno, "mean", m)?;
        let (lineno, line) = reader.next("std line")?;
        let std = parse_floats(line, lineno, "std", m)?;
        classes.push(ClassGatingStats {
            class,
            count,
            mean,
            std,
        });
    }
    if let Some((i, line)) = reader.lines.next() {
        if !line.trim().is_empty() {
            return Err(AnalysisError::Parse {
                line: i + 1,
                msg: format!("trailing content `{line}`"),
            });
        }
    }
    Ok(GatingExport {
        m,
        samples,
        classes,
    })
}

/// Write a gating report to a file.
pub fn write_gating(path: &Path, report: &GatingExport) -> Result<(), AnalysisError> {
    std::fs::write(path, export_gating(report)).map_err(|e| AnalysisError::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

/// Read a gating report back from a file.
pub fn read_gating(path: &Path) -> Result<GatingExport, AnalysisError> {
    let text = std::fs::read_to_string(path).map_err(|e| AnalysisError::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    parse_gating(&text)
}
