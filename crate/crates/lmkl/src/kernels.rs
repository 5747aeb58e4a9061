//! Gaussian (RBF) kernel stacks over sparse examples.
//!
//! A stack holds M kernel matrices built from one set of examples at M
//! bandwidths. Bandwidths are tied to the data scale: an evenly spaced grid
//! of fractions of the maximum pairwise Euclidean distance, so the family
//! spans very local to near-global similarity.

use std::path::Path;

use ndarray::{Array2, Array3, ArrayView2, ArrayViewMut2, Axis};
use thiserror::Error;

use crate::dataio::{
    read_kernel_file, write_kernel_file, DataError, Dtype, KernelFileHeader, LabeledExample,
};

#[derive(Debug, Error)]
pub enum KernelError {
    #[error("need at least two examples to build kernels, got {0}")]
    TooFewExamples(usize),
    #[error("all examples are identical; the bandwidth grid would collapse to zero")]
    DegenerateData,
    #[error("kernel count must be positive")]
    ZeroKernels,
    #[error("kernel tensor is {rows}x{cols} but a square train stack is required")]
    NotSquare { rows: usize, cols: usize },
    #[error("value at kernel {m}, row {i}, col {j} is {value}, outside [0, 1]")]
    OutOfRange {
        m: usize,
        i: usize,
        j: usize,
        value: f64,
    },
    #[error(transparent)]
    Data(#[from] DataError),
}

/// Dot product of two sparse vectors with sorted indices (merge walk).
fn sparse_dot(a: &[(u32, f64)], b: &[(u32, f64)]) -> f64 {
    let (mut i, mut j, mut acc) = (0usize, 0usize, 0.0f64);
    while i < a.len() && j < b.len() {
        match a[i].0.cmp(&b[j].0) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                acc += a[i].1 * b[j].1;
                i += 1;
                j += 1;
            }
        }
    }
    acc
}

fn sq_norm(a: &[(u32, f64)]) -> f64 {
    a.iter().map(|&(_, v)| v * v).sum()
}

/// Squared Euclidean distance between sparse vectors, clamped at zero to
/// absorb cancellation noise from the norm/dot expansion.
pub fn sparse_sq_dist(a: &[(u32, f64)], b: &[(u32, f64)]) -> f64 {
    (sq_norm(a) + sq_norm(b) - 2.0 * sparse_dot(a, b)).max(0.0)
}

/// Gaussian kernel value `exp(-||x - z||^2 / (2 sigma^2))`.
pub fn rbf_entry(x: &[(u32, f64)], z: &[(u32, f64)], sigma: f64) -> f64 {
    assert!(sigma > 0.0, "bandwidth must be positive");
    (-sparse_sq_dist(x, z) / (2.0 * sigma * sigma)).exp()
}

/// Exact maximum pairwise Euclidean distance over all example pairs.
/// Quadratic in the number of examples; returns 0 for fewer than two points.
pub fn max_pairwise_distance(examples: &[LabeledExample]) -> f64 {
    let mut max_sq = 0.0f64;
    for i in 0..examples.len() {
        for j in (i + 1)..examples.len() {
            let d = sparse_sq_dist(&examples[i].features, &examples[j].features);
            if d > max_sq {
                max_sq = d;
            }
        }
    }
    max_sq.sqrt()
}

/// Evenly spaced bandwidths `(1/M, 2/M, ..., 1) * d_max`.
pub fn bandwidth_grid(d_max: f64, m_kernels: usize) -> Vec<f64> {
    assert!(m_kernels > 0, "kernel count must be positive");
    assert!(d_max > 0.0, "distance scale must be positive");
    (1..=m_kernels)
        .map(|i| i as f64 * d_max / m_kernels as f64)
        .collect()
}

/// Symmetric squared-distance matrix; the diagonal is exactly zero and the
/// two triangles are bit-identical by construction.
fn sq_dist_matrix(examples: &[LabeledExample]) -> Array2<f64> {
    let n = examples.len();
    let mut d = Array2::zeros((n, n));
    for i in 0..n {
        for j in (i + 1)..n {
            let v = sparse_sq_dist(&examples[i].features, &examples[j].features);
            d[(i, j)] = v;
            d[(j, i)] = v;
        }
    }
    d
}

/// M Gaussian kernel matrices over one set of examples, kernel-major:
/// `values[(m, i, j)]` is kernel m between examples i and j.
#[derive(Debug, Clone)]
pub struct KernelStack {
    values: Array3<f64>,
    bandwidths: Vec<f64>,
}

impl KernelStack {
    pub fn from_parts(values: Array3<f64>, bandwidths: Vec<f64>) -> Result<Self, KernelError> {
        let (m, rows, cols) = values.dim();
        if m == 0 {
            return Err(KernelError::ZeroKernels);
        }
        if rows != cols {
            return Err(KernelError::NotSquare { rows, cols });
        }
        assert_eq!(bandwidths.len(), m);
        Ok(KernelStack { values, bandwidths })
    }

    /// Number of kernels M.
    pub fn m(&self) -> usize {
        self.values.dim().0
    }

    /// Number of examples N (rows == cols).
    pub fn n(&self) -> usize {
        self.values.dim().1
    }

    pub fn bandwidths(&self) -> &[f64] {
        &self.bandwidths
    }

    pub fn values(&self) -> &Array3<f64> {
        &self.values
    }

    /// Kernel matrix m as an `(N, N)` view.
    pub fn kernel(&self, m: usize) -> ArrayView2<'_, f64> {
        self.values.index_axis(Axis(0), m)
    }

    pub fn to_file(&self, path: &Path, dtype: Dtype) -> Result<(), KernelError> {
        let header = KernelFileHeader {
            n_rows: self.n() as u64,
            n_cols: self.n() as u64,
            m_kernels: self.m() as u64,
            dtype,
            bandwidths: self.bandwidths.clone(),
        };
        let flat = self
            .values
            .as_slice()
            .expect("kernel stack is stored contiguously");
        write_kernel_file(&header, flat, path)?;
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self, KernelError> {
        let (header, values) = read_kernel_file(path)?;
        if header.n_rows != header.n_cols {
            return Err(KernelError::NotSquare {
                rows: header.n_rows as usize,
                cols: header.n_cols as usize,
            });
        }
        let arr = Array3::from_shape_vec(
            (
                header.m_kernels as usize,
                header.n_rows as usize,
                header.n_cols as usize,
            ),
            values,
        )
        .expect("header dims match payload length");
        let stack = KernelStack::from_parts(arr, header.bandwidths)?;
        stack.check_range()?;
        Ok(stack)
    }

    fn check_range(&self) -> Result<(), KernelError> {
        check_range(&self.values)
    }
}

/// Kernels between a query set (rows) and the training set (columns),
/// kernel-major: `values[(m, i, j)]` is kernel m between query i and
/// training example j.
#[derive(Debug, Clone)]
pub struct CrossKernelStack {
    values: Array3<f64>,
    bandwidths: Vec<f64>,
}

impl CrossKernelStack {
    pub fn from_parts(values: Array3<f64>, bandwidths: Vec<f64>) -> Result<Self, KernelError> {
        let (m, _, _) = values.dim();
        if m == 0 {
            return Err(KernelError::ZeroKernels);
        }
        assert_eq!(bandwidths.len(), m);
        Ok(CrossKernelStack { values, bandwidths })
    }

    pub fn m(&self) -> usize {
        self.values.dim().0
    }

    /// Number of query examples (rows).
    pub fn n_rows(&self) -> usize {
        self.values.dim().1
    }

    /// Number of training examples (columns).
    pub fn n_cols(&self) -> usize {
        self.values.dim().2
    }

    pub fn bandwidths(&self) -> &[f64] {
        &self.bandwidths
    }

    pub fn values(&self) -> &Array3<f64> {
        &self.values
    }

    pub fn kernel(&self, m: usize) -> ArrayView2<'_, f64> {
        self.values.index_axis(Axis(0), m)
    }

    pub fn to_file(&self, path: &Path, dtype: Dtype) -> Result<(), KernelError> {
        let header = KernelFileHeader {
            n_rows: self.n_rows() as u64,
            n_cols: self.n_cols() as u64,
            m_kernels: self.m() as u64,
            dtype,
            bandwidths: self.bandwidths.clone(),
        };
        let flat = self
            .values
            .as_slice()
            .expect("kernel stack is stored contiguously");
        write_kernel_file(&header, flat, path)?;
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self, KernelError> {
        let (header, values) = read_kernel_file(path)?;
        let arr = Array3::from_shape_vec(
            (
                header.m_kernels as usize,
                header.n_rows as usize,
                header.n_cols as usize,
            ),
            values,
        )
        .expect("header dims match payload length");
        let stack = CrossKernelStack::from_parts(arr, header.bandwidths)?;
        check_range(&stack.values)?;
        Ok(stack)
    }
}

fn check_range(values: &Array3<f64>) -> Result<(), KernelError> {
    for ((m, i, j), &v) in values.indexed_iter() {
        if !(0.0..=1.0).contains(&v) || !v.is_finite() {
            return Err(KernelError::OutOfRange { m, i, j, value: v });
        }
    }
    Ok(())
}

/// Build the square training stack: bandwidth grid from the exact maximum
/// pairwise distance, then one Gaussian matrix per bandwidth. The result is
/// exactly symmetric with a unit diagonal.
pub fn build_train_kernels(
    examples: &[LabeledExample],
    m_kernels: usize,
) -> Result<KernelStack, KernelError> {
    if m_kernels == 0 {
        return Err(KernelError::ZeroKernels);
    }
    if examples.len() < 2 {
        return Err(KernelError::TooFewExamples(examples.len()));
    }
    let d_max = max_pairwise_distance(examples);
    if d_max <= 0.0 {
        return Err(KernelError::DegenerateData);
    }
    let bandwidths = bandwidth_grid(d_max, m_kernels);
    let sq = sq_dist_matrix(examples);
    let n = examples.len();
    let mut values = Array3::zeros((m_kernels, n, n));
    for (m, &sigma) in bandwidths.iter().enumerate() {
        let denom = 2.0 * sigma * sigma;
        let mut slab = values.index_axis_mut(Axis(0), m);
        slab.zip_mut_with(&sq, |out, &d| *out = (-d / denom).exp());
    }
    KernelStack::from_parts(values, bandwidths)
}

/// Build the query-vs-training stack at the training bandwidths.
pub fn build_cross_kernels(
    queries: &[LabeledExample],
    train: &[LabeledExample],
    bandwidths: &[f64],
) -> Result<CrossKernelStack, KernelError> {
    if bandwidths.is_empty() {
        return Err(KernelError::ZeroKernels);
    }
    if queries.is_empty() || train.is_empty() {
        return Err(KernelError::TooFewExamples(queries.len().min(train.len())));
    }
    let n_q = queries.len();
    let n_t = train.len();
    let mut sq = Array2::zeros((n_q, n_t));
    for i in 0..n_q {
        for j in 0..n_t {
            sq[(i, j)] = sparse_sq_dist(&queries[i].features, &train[j].features);
        }
    }
    let mut values = Array3::zeros((bandwidths.len(), n_q, n_t));
    for (m, &sigma) in bandwidths.iter().enumerate() {
        let denom = 2.0 * sigma * sigma;
        let mut slab = values.index_axis_mut(Axis(0), m);
        slab.zip_mut_with(&sq, |out, &d| *out = (-d / denom).exp());
    }
    CrossKernelStack::from_parts(values, bandwidths.to_vec())
}

/// Read access to per-example kernel rows, shared by the square training
/// stack and the cross stack so the network can evaluate either.
pub trait KernelSource {
    /// Number of kernels M.
    fn m(&self) -> usize;
    /// Number of training columns N.
    fn n_cols(&self) -> usize;
    /// Number of addressable examples (rows).
    fn n_rows(&self) -> usize;
    /// Copy the `(M, N)` kernel rows of example `i` into `out`.
    fn copy_sample_into(&self, i: usize, out: &mut ArrayViewMut2<'_, f64>);
}

impl KernelSource for KernelStack {
    fn m(&self) -> usize {
        self.m()
    }
    fn n_cols(&self) -> usize {
        self.n()
    }
    fn n_rows(&self) -> usize {
        self.n()
    }
    fn copy_sample_into(&self, i: usize, out: &mut ArrayViewMut2<'_, f64>) {
        out.assign(&self.values.slice(ndarray::s![.., i, ..]));
    }
}

impl KernelSource for CrossKernelStack {
    fn m(&self) -> usize {
        self.m()
    }
    fn n_cols(&self) -> usize {
        self.n_cols()
    }
    fn n_rows(&self) -> usize {
        self.n_rows()
    }
    fn copy_sample_into(&self, i: usize, out: &mut ArrayViewMut2<'_, f64>) {
        out.assign(&self.values.slice(ndarray::s![.., i, ..]));
    }
}
