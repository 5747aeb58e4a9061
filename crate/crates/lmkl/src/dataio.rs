//! Sparse dataset parsing, label remapping, subsampling, and the binary
//! kernel tensor file format.
//!
//! Input data is the LIBSVM sparse text format: one example per line,
//! `<label> <index>:<value> ...` with 1-based, strictly increasing feature
//! indices. Indices are converted to 0-based at parse time. Anything after
//! `#` on a line is a comment.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

/// Magic tag at the start of every kernel tensor file.
pub const KERNEL_MAGIC: [u8; 8] = *b"LMKLKERN";
/// Current kernel tensor file version.
pub const KERNEL_VERSION: u32 = 1;

/// One parsed example: a class label and a sparse feature vector.
///
/// Feature indices are 0-based and strictly increasing. In a freshly parsed
/// line the label is the raw value from the file; inside a [`Dataset`] it has
/// been remapped to `0..num_classes`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledExample {
    pub label: i64,
    pub features: Vec<(u32, f64)>,
}

/// A parsed dataset with contiguous class ids.
///
/// `num_classes` is the size of the label space defined by `label_map`; a
/// subsampled dataset keeps the full label space even if a class happens to
/// drop out of the subset.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub examples: Vec<LabeledExample>,
    pub num_features: usize,
    pub num_classes: usize,
    pub label_map: LabelMap,
}

/// Bijection between raw file labels and contiguous internal ids.
///
/// Internal ids are assigned by sorting the distinct raw labels ascending, so
/// the mapping does not depend on file order.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMap {
    forward: BTreeMap<i64, usize>,
    inverse: Vec<i64>,
}

impl LabelMap {
    /// Build the mapping from a list of raw labels (duplicates allowed).
    /// Fails unless at least two distinct labels are present.
    pub fn from_raw(raw_labels: &[i64]) -> Result<Self, DataError> {
        let mut distinct: Vec<i64> = raw_labels.to_vec();
        distinct.sort_unstable();
        distinct.dedup();
        match distinct.len() {
            0 => Err(DataError::EmptyDataset),
            1 => Err(DataError::SingleClass(distinct[0])),
            _ => {
                let forward = distinct
                    .iter()
                    .enumerate()
                    .map(|(i, &raw)| (raw, i))
                    .collect();
                Ok(LabelMap {
                    forward,
                    inverse: distinct,
                })
            }
        }
    }

    pub fn num_classes(&self) -> usize {
        self.inverse.len()
    }

    pub fn to_internal(&self, raw: i64) -> Option<usize> {
        self.forward.get(&raw).copied()
    }

    pub fn to_raw(&self, internal: usize) -> i64 {
        self.inverse[internal]
    }

    /// `(raw, internal)` pairs in ascending raw order.
    pub fn pairs(&self) -> impl Iterator<Item = (i64, usize)> + '_ {
        self.inverse.iter().enumerate().map(|(i, &raw)| (raw, i))
    }
}

/// Remap raw labels to contiguous ids `0..C` by ascending raw value.
pub fn remap_labels(raw_labels: &[i64]) -> Result<LabelMap, DataError> {
    LabelMap::from_raw(raw_labels)
}

/// Error from parsing a single LIBSVM line. Carries the 1-based column of
/// the offending token.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParseLineError {
    pub col: usize,
    pub msg: String,
}

impl fmt::Display for ParseLineError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "column {}: {}", self.col, self.msg)
    }
}

impl std::error::Error for ParseLineError {}

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}, line {line}, {source}")]
    Parse {
        path: PathBuf,
        line: usize,
        source: ParseLineError,
    },
    #[error("empty dataset")]
    EmptyDataset,
    #[error("dataset has a single class (label {0}); at least two are required")]
    SingleClass(i64),
    #[error("label {0} not present in the label map")]
    UnknownLabel(i64),
    #[error("{path}: {msg}")]
    KernelFormat { path: PathBuf, msg: String },
    #[error("{path}: expected {expected} bytes after header, found {found}")]
    KernelSize {
        path: PathBuf,
        expected: u64,
        found: u64,
    },
    #[error("invalid kernel header: {0}")]
    BadHeader(String),
}

fn io_err(path: &Path, source: io::Error) -> DataError {
    DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Parse one line of LIBSVM text into a raw-labeled example.
///
/// The 1-based indices from the file are converted to 0-based. Text after
/// `#` is ignored. Indices must be strictly increasing and values finite.
pub fn parse_libsvm_line(text: &str) -> Result<LabeledExample, ParseLineError> {
    let body = match text.find('#') {
        Some(pos) => &text[..pos],
        None => text,
    };
    let mut tokens = tokenize(body);
    let (label_tok, label_col) = tokens
        .next()
        .ok_or_else(|| ParseLineError {
            col: 1,
            msg: "missing label".into(),
        })?;
    let label: i64 = label_tok.parse().map_err(|_| ParseLineError {
        col: label_col,
        msg: format!("cannot parse label `{label_tok}` as an integer"),
    })?;

    let mut features = Vec::new();
    let mut prev_index: Option<u32> = None;
    for (tok, col) in tokens {
        let (idx_str, val_str) = tok.split_once(':').ok_or_else(|| ParseLineError {
            col,
            msg: format!("expected `index:value`, got `{tok}`"),
        })?;
        let raw_index: u32 = idx_str.parse().map_err(|_| ParseLineError {
            col,
            msg: format!("cannot parse feature index `{idx_str}`"),
        })?;
        if raw_index == 0 {
            return Err(ParseLineError {
                col,
                msg: "feature indices are 1-based; index 0 is invalid".into(),
            });
        }
        let value: f64 = val_str.parse().map_err(|_| ParseLineError {
            col,
            msg: format!("cannot parse feature value `{val_str}`"),
        })?;
        if !value.is_finite() {
            return Err(ParseLineError {
                col,
                msg: format!("feature value `{val_str}` is not finite"),
            });
        }
        if let Some(prev) = prev_index {
            if raw_index <= prev {
                return Err(ParseLineError {
                    col,
                    msg: format!(
                        "feature indices must be strictly increasing ({raw_index} after {prev})"
                    ),
                });
            }
        }
        prev_index = Some(raw_index);
        features.push((raw_index - 1, value));
    }
    Ok(LabeledExample { label, features })
}

/// Tokens with their 1-based starting columns.
fn tokenize(body: &str) -> impl Iterator<Item = (&str, usize)> {
    body.split_whitespace().map(move |tok| {
        // offset of this token within `body`
        let col = tok.as_ptr() as usize - body.as_ptr() as usize + 1;
        (tok, col)
    })
}

/// Render an example back to canonical LIBSVM text (1-based indices, single
/// spaces, shortest round-trip float formatting).
pub fn format_libsvm_line(example: &LabeledExample) -> String {
    let mut out = example.label.to_string();
    for &(idx, val) in &example.features {
        out.push(' ');
        out.push_str(&(idx + 1).to_string());
        out.push(':');
        out.push_str(&val.to_string());
    }
    out
}

/// Parse a whole LIBSVM file into raw-labeled examples. Blank lines and
/// comment-only lines are skipped; any malformed line aborts with its number.
pub fn load_raw_examples(path: &Path) -> Result<Vec<LabeledExample>, DataError> {
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    let reader = BufReader::new(file);
    let mut examples = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| io_err(path, e))?;
        let body = match line.find('#') {
            Some(pos) => &line[..pos],
            None => &line[..],
        };
        if body.trim().is_empty() {
            continue;
        }
        let example = parse_libsvm_line(&line).map_err(|source| DataError::Parse {
            path: path.to_path_buf(),
            line: lineno + 1,
            source,
        })?;
        examples.push(example);
    }
    Ok(examples)
}

fn max_feature_count(examples: &[LabeledExample]) -> usize {
    examples
        .iter()
        .filter_map(|e| e.features.last())
        .map(|&(idx, _)| idx as usize + 1)
        .max()
        .unwrap_or(0)
}

impl Dataset {
    /// Build a dataset from raw examples, deriving the label map from the
    /// labels present.
    pub fn from_raw(raw: Vec<LabeledExample>) -> Result<Self, DataError> {
        if raw.is_empty() {
            return Err(DataError::EmptyDataset);
        }
        let labels: Vec<i64> = raw.iter().map(|e| e.label).collect();
        let label_map = LabelMap::from_raw(&labels)?;
        Self::with_label_map(raw, label_map)
    }

    /// Build a dataset remapping raw labels through an existing map, so that
    /// several files (train/test splits) share one label space.
    pub fn with_label_map(raw: Vec<LabeledExample>, label_map: LabelMap) -> Result<Self, DataError> {
        if raw.is_empty() {
            return Err(DataError::EmptyDataset);
        }
        let num_features = max_feature_count(&raw);
        let mut examples = raw;
        for e in &mut examples {
            let internal = label_map
                .to_internal(e.label)
                .ok_or(DataError::UnknownLabel(e.label))?;
            e.label = internal as i64;
        }
        Ok(Dataset {
            examples,
            num_features,
            num_classes: label_map.num_classes(),
            label_map,
        })
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// Internal class ids of all examples, in order.
    pub fn labels(&self) -> Vec<usize> {
        self.examples.iter().map(|e| e.label as usize).collect()
    }
}

/// Load a LIBSVM file as a dataset with its own label map.
pub fn load_dataset(path: &Path) -> Result<Dataset, DataError> {
    Dataset::from_raw(load_raw_examples(path)?)
}

/// Keep at most `cap` examples, drawn uniformly without replacement via a
/// seeded shuffle-then-truncate. A dataset already within the cap is returned
/// unchanged. The label space is preserved even if a class drops out.
pub fn subsample(dataset: &Dataset, cap: usize, seed: u64) -> Dataset {
    assert!(cap >= 1, "subsample cap must be at least 1");
    if dataset.len() <= cap {
        return dataset.clone();
    }
    let mut indices: Vec<usize> = (0..dataset.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    indices.shuffle(&mut rng);
    indices.truncate(cap);
    let examples = indices
        .into_iter()
        .map(|i| dataset.examples[i].clone())
        .collect();
    Dataset {
        examples,
        num_features: dataset.num_features,
        num_classes: dataset.num_classes,
        label_map: dataset.label_map.clone(),
    }
}

/// Storage precision of a kernel tensor file. Training always runs in `f64`;
/// `f32` halves the file at the cost of rounding the stored values.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn code(self) -> u8 {
        match self {
            Dtype::F32 => 0,
            Dtype::F64 => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Dtype::F32),
            1 => Some(Dtype::F64),
            _ => None,
        }
    }

    pub fn size_bytes(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

impl std::str::FromStr for Dtype {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "f32" => Ok(Dtype::F32),
            "f64" => Ok(Dtype::F64),
            other => Err(format!("unknown dtype `{other}` (expected f32 or f64)")),
        }
    }
}

/// Header of a kernel tensor file: tensor shape, storage dtype, and the RBF
/// bandwidths the stack was built with, so provenance travels with the data.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelFileHeader {
    pub n_rows: u64,
    pub n_cols: u64,
    pub m_kernels: u64,
    pub dtype: Dtype,
    pub bandwidths: Vec<f64>,
}

impl KernelFileHeader {
    pub fn payload_len(&self) -> usize {
        (self.n_rows * self.n_cols * self.m_kernels) as usize
    }

    fn validate(&self) -> Result<(), DataError> {
        if self.n_rows == 0 || self.n_cols == 0 || self.m_kernels == 0 {
            return Err(DataError::BadHeader(format!(
                "dimensions must be positive, got {}x{}x{}",
                self.n_rows, self.n_cols, self.m_kernels
            )));
        }
        if self.bandwidths.len() != self.m_kernels as usize {
            return Err(DataError::BadHeader(format!(
                "{} bandwidths for {} kernels",
                self.bandwidths.len(),
                self.m_kernels
            )));
        }
        if self.bandwidths.iter().any(|b| !b.is_finite() || *b <= 0.0) {
            return Err(DataError::BadHeader(
                "bandwidths must be positive and finite".into(),
            ));
        }
        for pair in self.bandwidths.windows(2) {
            if pair[1] <= pair[0] {
                return Err(DataError::BadHeader(
                    "bandwidths must be strictly increasing".into(),
                ));
            }
        }
        Ok(())
    }
}

/// Write a kernel tensor file: magic, version, dims, dtype code, bandwidths,
/// then the payload in little-endian, kernel-major then row-major order.
pub fn write_kernel_file(
    header: &KernelFileHeader,
    values: &[f64],
    path: &Path,
) -> Result<(), DataError> {
    header.validate()?;
    if values.len() != header.payload_len() {
        return Err(DataError::BadHeader(format!(
            "payload has {} values, header implies {}",
            values.len(),
            header.payload_len()
        )));
    }
    let file = File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| io_err(path, e);
    w.write_all(&KERNEL_MAGIC).map_err(io)?;
    w.write_all(&KERNEL_VERSION.to_le_bytes()).map_err(io)?;
    w.write_all(&header.n_rows.to_le_bytes()).map_err(io)?;
    w.write_all(&header.n_cols.to_le_bytes()).map_err(io)?;
    w.write_all(&header.m_kernels.to_le_bytes()).map_err(io)?;
    w.write_all(&[header.dtype.code()]).map_err(io)?;
    for &b in &header.bandwidths {
        w.write_all(&b.to_le_bytes()).map_err(io)?;
    }
    match header.dtype {
        Dtype::F64 => {
            for &v in values {
                w.write_all(&v.to_le_bytes()).map_err(io)?;
            }
        }
        Dtype::F32 => {
            for &v in values {
                w.write_all(&(v as f32).to_le_bytes()).map_err(io)?;
            }
        }
    }
    w.flush().map_err(io)
}

fn read_exact_or(
    r: &mut impl Read,
    buf: &mut [u8],
    path: &Path,
    what: &str,
) -> Result<(), DataError> {
    r.read_exact(buf).map_err(|_| DataError::KernelFormat {
        path: path.to_path_buf(),
        msg: format!("truncated while reading {what}"),
    })
}

/// Read a kernel tensor file back. Values are widened to `f64` regardless of
/// the stored dtype. The byte count must match the header exactly; trailing
/// bytes are rejected.
pub fn read_kernel_file(path: &Path) -> Result<(KernelFileHeader, Vec<f64>), DataError> {
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    let mut r = BufReader::new(file);

    let mut magic = [0u8; 8];
    read_exact_or(&mut r, &mut magic, path, "magic")?;
    if magic != KERNEL_MAGIC {
        return Err(DataError::KernelFormat {
            path: path.to_path_buf(),
            msg: format!("bad magic {magic:?}"),
        });
    }
    let mut b4 = [0u8; 4];
    read_exact_or(&mut r, &mut b4, path, "version")?;
    let version = u32::from_le_bytes(b4);
    if version != KERNEL_VERSION {
        return Err(DataError::KernelFormat {
            path: path.to_path_buf(),
            msg: format!("unsupported version {version} (expected {KERNEL_VERSION})"),
        });
    }
    let mut b8 = [0u8; 8];
    read_exact_or(&mut r, &mut b8, path, "n_rows")?;
    let n_rows = u64::from_le_bytes(b8);
    read_exact_or(&mut r, &mut b8, path, "n_cols")?;
    let n_cols = u64::from_le_bytes(b8);
    read_exact_or(&mut r, &mut b8, path, "m_kernels")?;
    let m_kernels = u64::from_le_bytes(b8);
    let mut b1 = [0u8; 1];
    read_exact_or(&mut r, &mut b1, path, "dtype")?;
    let dtype = Dtype::from_code(b1[0]).ok_or_else(|| DataError::KernelFormat {
        path: path.to_path_buf(),
        msg: format!("unknown dtype code {}", b1[0]),
    })?;
    let mut bandwidths = Vec::with_capacity(m_kernels as usize);
    for _ in 0..m_kernels {
        read_exact_or(&mut r, &mut b8, path, "bandwidths")?;
        bandwidths.push(f64::from_le_bytes(b8));
    }
    let header = KernelFileHeader {
        n_rows,
        n_cols,
        m_kernels,
        dtype,
        bandwidths,
    };
    header.validate()?;

    let expected = header.payload_len() as u64 * dtype.size_bytes() as u64;
    let mut payload = Vec::new();
    r.read_to_end(&mut payload).map_err(|e| io_err(path, e))?;
    if payload.len() as u64 != expected {
        return Err(DataError::KernelSize {
            path: path.to_path_buf(),
            expected,
            found: payload.len() as u64,
        });
    }
    let values = match dtype {
        Dtype::F64 => payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect(),
        Dtype::F32 => payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect(),
    };
    Ok((header, values))
}

/// Write internal class ids as plain text, one per line.
pub fn write_labels(path: &Path, labels: &[usize]) -> Result<(), DataError> {
    let file = File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = BufWriter::new(file);
    for &l in labels {
        writeln!(w, "{l}").map_err(|e| io_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

/// Read a labels file written by [`write_labels`].
pub fn read_labels(path: &Path) -> Result<Vec<usize>, DataError> {
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    let reader = BufReader::new(file);
    let mut labels = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| io_err(path, e))?;
        let t = line.trim();
        if t.is_empty() {
            continue;
        }
        let l: usize = t.parse().map_err(|_| DataError::Parse {
            path: path.to_path_buf(),
            line: lineno + 1,
            source: ParseLineError {
                col: 1,
                msg: format!("cannot parse label `{t}`"),
            },
        })?;
        labels.push(l);
    }
    Ok(labels)
}

/// Write examples (with raw labels) in LIBSVM text format.
pub fn write_libsvm(path: &Path, examples: &[LabeledExample]) -> Result<(), DataError> {
    let file = File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = BufWriter::new(file);
    for e in examples {
        writeln!(w, "{}", format_libsvm_line(e)).map_err(|err| io_err(path, err))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}
