//! Cached feature datasets and batch selection.
//!
//! Cache file layout (all integers and floats little-endian):
//!
//! | offset        | size      | content                          |
//! |---------------|-----------|----------------------------------|
//! | 0             | 4         | magic `DPHT`                     |
//! | 4             | 4         | version `u32` = 1                |
//! | 8             | 8         | `n` as `u64`                     |
//! | 16            | 4         | `d` as `u32`                     |
//! | 20            | 4         | `k` as `u32`                     |
//! | 24            | `4·n·d`   | features, `f32`, row-major       |
//! | 24 + `4·n·d`  | `2·n`     | labels, `u16`                    |

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::grad::Batch;
use crate::noise::GaussianNoise;

pub const CACHE_MAGIC: &[u8; 4] = b"DPHT";
pub const CACHE_VERSION: u32 = 1;
const HEADER_LEN: usize = 24;

/// `n` labelled feature vectors of dimension `dim` over `classes` classes.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureDataset {
    dim: usize,
    classes: usize,
    features: Vec<f32>,
    labels: Vec<u16>,
}

impl FeatureDataset {
    pub fn new(dim: usize, classes: usize, features: Vec<f32>, labels: Vec<u16>) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::Validation("dataset has no examples".into()));
        }
        if dim == 0 || classes == 0 {
            return Err(Error::Validation("dimension and class count must be positive".into()));
        }
        if classes > usize::from(u16::MAX) + 1 {
            return Err(Error::Validation(format!(
                "{classes} classes exceed the u16 label range"
            )));
        }
        if features.len() != labels.len() * dim {
            return Err(Error::Shape {
                what: "dataset features",
                expected: labels.len() * dim,
                actual: features.len(),
            });
        }
        if let Some(i) = features.iter().position(|x| !x.is_finite()) {
            return Err(Error::Validation(format!(
                "non-finite feature at example {}, column {}",
                i / dim,
                i % dim
            )));
        }
        if let Some(i) = labels.iter().position(|&y| usize::from(y) >= classes) {
            return Err(Error::Validation(format!(
                "label {} at example {i} out of range for {classes} classes",
                labels[i]
            )));
        }
        Ok(Self {
            dim,
            classes,
            features,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn features(&self) -> &[f32] {
        &self.features
    }

    pub fn labels(&self) -> &[u16] {
        &self.labels
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    /// The whole dataset as one batch.
    pub fn as_batch(&self) -> Batch<'_, f32> {
        Batch::new(&self.features, &self.labels, self.dim).expect("dataset shape is validated")
    }

    /// Copies the selected examples into contiguous buffers.
    pub fn gather(&self, indices: &[usize]) -> (Vec<f32>, Vec<u16>) {
        let mut features = Vec::with_capacity(indices.len() * self.dim);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            features.extend_from_slice(self.row(i));
            labels.push(self.labels[i]);
        }
        (features, labels)
    }

    /// Fraction of examples in each class.
    pub fn class_frequencies(&self) -> Vec<f64> {
        let mut counts = vec![0usize; self.classes];
        for &y in &self.labels {
            counts[usize::from(y)] += 1;
        }
        counts.into_iter().map(|c| c as f64 / self.len() as f64).collect()
    }

    pub fn to_cache_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + 4 * self.features.len() + 2 * self.labels.len());
        out.extend_from_slice(CACHE_MAGIC);
        out.extend_from_slice(&CACHE_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.len() as u64).to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.classes as u32).to_le_bytes());
        for x in &self.features {
            out.extend_from_slice(&x.to_le_bytes());
        }
        for y in &self.labels {
            out.extend_from_slice(&y.to_le_bytes());
        }
        out
    }

    pub fn from_cache_bytes(bytes: &[u8]) -> Result<Self> {
        let need = |offset: usize, len: usize, what: &str| -> Result<()> {
            if bytes.len() < offset + len {
                Err(Error::Format {
                    offset: offset as u64,
                    message: format!(
                        "truncated {what}: need {len} bytes, {} available",
                        bytes.len().saturating_sub(offset)
                    ),
                })
            } else {
                Ok(())
            }
        };
        need(0, 4, "magic")?;
        if &bytes[0..4] != CACHE_MAGIC {
            return Err(Error::Format {
                offset: 0,
                message: format!("bad magic {:?}", &bytes[0..4]),
            });
        }
        need(4, 4, "version")?;
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != CACHE_VERSION {
            return Err(Error::Format {
                offset: 4,
                message: format!("unsupported version {version}"),
            });
        }
        need(8, 16, "header")?;
        let n = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
        let dim = u32::from_le_bytes(bytes[16..20].try_into().unwrap()) as usize;
        let classes = u32::from_le_bytes(bytes[20..24].try_into().unwrap()) as usize;
        let n = usize::try_from(n).map_err(|_| Error::Format {
            offset: 8,
            message: format!("example count {n} does not fit in memory"),
        })?;
        if n == 0 || dim == 0 || classes == 0 {
            return Err(Error::Format {
                offset: 8,
                message: format!("empty header dimensions n={n}, d={dim}, k={classes}"),
            });
        }
        let feature_bytes = n
            .checked_mul(dim)
            .and_then(|x| x.checked_mul(4))
            .ok_or_else(|| Error::Format {
                offset: 8,
                message: "header sizes overflow".into(),
            })?;
        need(HEADER_LEN, feature_bytes, "feature payload")?;
        let label_offset = HEADER_LEN + feature_bytes;
        need(label_offset, 2 * n, "label payload")?;
        let end = label_offset + 2 * n;
        if bytes.len() != end {
            return Err(Error::Format {
                offset: end as u64,
                message: format!("{} trailing bytes", bytes.len() - end),
            });
        }
        let features: Vec<f32> = bytes[HEADER_LEN..label_offset]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if let Some(i) = features.iter().position(|x| !x.is_finite()) {
            return Err(Error::Format {
                offset: (HEADER_LEN + 4 * i) as u64,
                message: "non-finite feature".into(),
            });
        }
        let labels: Vec<u16> = bytes[label_offset..end]
            .chunks_exact(2)
            .map(|c| u16::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if let Some(i) = labels.iter().position(|&y| usize::from(y) >= classes) {
            return Err(Error::Format {
                offset: (label_offset + 2 * i) as u64,
                message: format!("label {} out of range for {classes} classes", labels[i]),
            });
        }
        FeatureDataset::new(dim, classes, features, labels)
    }
}

pub fn write_cache(dataset: &FeatureDataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&dataset.to_cache_bytes())
        .map_err(|e| Error::io(path, e))
}

pub fn read_cache(path: impl AsRef<Path>) -> Result<FeatureDataset> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    FeatureDataset::from_cache_bytes(&bytes)
}

#[derive(Debug, Clone, Default)]
pub struct CsvOptions {
    /// Zero-based column holding the class label.
    pub label_column: usize,
    pub has_header: bool,
    /// Declared class count; inferred as `max label + 1` when absent.
    pub classes: Option<usize>,
}

pub fn import_csv(path: impl AsRef<Path>, options: &CsvOptions) -> Result<FeatureDataset> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_csv(file, options)
}

/// Parses CSV from any reader; rows in errors are 1-based file lines.
pub fn read_csv<R: std::io::Read>(reader: R, options: &CsvOptions) -> Result<FeatureDataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut width: Option<usize> = None;
    let mut features = Vec::new();
    let mut labels: Vec<u16> = Vec::new();
    let mut max_label = 0u16;
    for (i, record) in rdr.records().enumerate() {
        let row = i as u64 + 1;
        let record = record.map_err(|e| Error::Parse {
            row,
            message: e.to_string(),
        })?;
        if i == 0 && options.has_header {
            continue;
        }
        let cols = record.len();
        match width {
            None => {
                if cols < 2 {
                    return Err(Error::Parse {
                        row,
                        message: format!("need a label and at least one feature, found {cols} columns"),
                    });
                }
                if options.label_column >= cols {
                    return Err(Error::Parse {
                        row,
                        message: format!("label column {} but only {cols} columns", options.label_column),
                    });
                }
                width = Some(cols);
            }
            Some(w) if w != cols => {
                return Err(Error::Parse {
                    row,
                    message: format!("ragged row: {cols} columns, expected {w}"),
                });
            }
            Some(_) => {}
        }
        for (j, cell) in record.iter().enumerate() {
            if j == options.label_column {
                let label: u16 = cell.parse().map_err(|_| Error::Parse {
                    row,
                    message: format!("label '{cell}' is not a class index"),
                })?;
                if let Some(k) = options.classes {
                    if usize::from(label) >= k {
                        return Err(Error::Parse {
                            row,
                            message: format!("label {label} out of range for {k} classes"),
                        });
                    }
                }
                max_label = max_label.max(label);
                labels.push(label);
            } else {
                let x: f32 = cell.parse().map_err(|_| Error::Parse {
                    row,
                    message: format!("column {j}: '{cell}' is not a number"),
                })?;
                if !x.is_finite() {
                    return Err(Error::Parse {
                        row,
                        message: format!("column {j}: non-finite value"),
                    });
                }
                features.push(x);
            }
        }
    }
    let width = width.ok_or_else(|| Error::Parse {
        row: 1,
        message: "no data rows".into(),
    })?;
    let classes = options.classes.unwrap_or(usize::from(max_label) + 1);
    FeatureDataset::new(width - 1, classes, features, labels)
}

/// Writes features then the label as the last column. `f32` values are
/// printed in shortest round-trip form.
pub fn export_csv(dataset: &FeatureDataset, path: impl AsRef<Path>, header: bool) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::io(path, e.into()))?;
    let io_err = |e: csv::Error| Error::io(path, e.into());
    if header {
        let mut names: Vec<String> = (0..dataset.dim).map(|j| format!("f{j}")).collect();
        names.push("label".into());
        w.write_record(&names).map_err(io_err)?;
    }
    for i in 0..dataset.len() {
        let mut rec: Vec<String> = dataset.row(i).iter().map(|x| x.to_string()).collect();
        rec.push(dataset.labels[i].to_string());
        w.write_record(&rec).map_err(io_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Parameters of the synthetic Gaussian-mixture generator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticSpec {
    pub n: usize,
    pub dim: usize,
    pub classes: usize,
    /// Distance of each class mean from the origin.
    pub separation: f64,
    pub noise_std: f64,
    pub seed: u64,
}

/// Class means `s·q_c` where the `q_c` are orthonormal columns of a seeded
/// random rotation; classes `c ≥ dim` reuse `−q_{c−dim}`. Row-major
/// `classes × dim`.
pub fn synthetic_class_means(dim: usize, classes: usize, separation: f64, seed: u64) -> Vec<f64> {
    let mut rng = GaussianNoise::from_seed(seed);
    let basis_count = classes.min(dim);
    // Gram-Schmidt on Gaussian vectors gives a Haar-random orthonormal set.
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(basis_count);
    while basis.len() < basis_count {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.standard()).collect();
        for b in &basis {
            let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            for (x, y) in v.iter_mut().zip(b) {
                *x -= dot * y;
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-8 {
            v.iter_mut().for_each(|x| *x /= norm);
            basis.push(v);
        }
    }
    let mut means = Vec::with_capacity(classes * dim);
    for c in 0..classes {
        let slot = c % (2 * dim);
        let (q, sign) = if slot < dim {
            (&basis[slot], 1.0)
        } else {
            (&basis[slot - dim], -1.0)
        };
        means.extend(q.iter().map(|x| sign * separation * x));
    }
    means
}

/// Gaussian-mixture dataset: label `i mod k`, features `mean_label + N(0, noise_std²)`.
pub fn gen_synthetic(spec: &SyntheticSpec) -> Result<FeatureDataset> {
    if spec.n == 0 || spec.dim == 0 || spec.classes == 0 {
        return Err(Error::Validation("n, dim and classes must be positive".into()));
    }
    if !(spec.noise_std >= 0.0) || !spec.separation.is_finite() {
        return Err(Error::Validation(
            "noise_std must be nonnegative and separation finite".into(),
        ));
    }
    if spec.classes > 2 * spec.dim {
        log::warn!(
            "{} classes exceed 2·dim = {}; some class means coincide",
            spec.classes,
            2 * spec.dim
        );
    }
    let means = synthetic_class_means(spec.dim, spec.classes, spec.separation, spec.seed);
    let mut rng = GaussianNoise::from_seed(crate::noise::derive_seed(spec.seed, 1));
    let mut features = Vec::with_capacity(spec.n * spec.dim);
    let mut labels = Vec::with_capacity(spec.n);
    for i in 0..spec.n {
        let c = i % spec.classes;
        labels.push(c as u16);
        let mean = &means[c * spec.dim..(c + 1) * spec.dim];
        features.extend(mean.iter().map(|m| (m + rng.sample(spec.noise_std)) as f32));
    }
    FeatureDataset::new(spec.dim, spec.classes, features, labels)
}

/// How each step's batch is drawn.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BatchMode {
    /// Every example independently with probability `rate`.
    Poisson { rate: f64 },
    /// Consecutive blocks of a fresh permutation per epoch; a trailing
    /// partial block is dropped.
    Shuffle { batch_size: usize },
    /// All examples, once per step.
    Full,
}

impl BatchMode {
    /// Sampling rate assumed by the accountant.
    pub fn sampling_rate(&self, n: usize) -> f64 {
        match *self {
            BatchMode::Poisson { rate } => rate,
            BatchMode::Shuffle { batch_size } => batch_size as f64 / n as f64,
            BatchMode::Full => 1.0,
        }
    }

    /// Steps that make up one pass over the data.
    pub fn steps_per_epoch(&self, n: usize) -> u64 {
        match *self {
            BatchMode::Poisson { rate } => (1.0 / rate).round().max(1.0) as u64,
            BatchMode::Shuffle { batch_size } => (n / batch_size).max(1) as u64,
            BatchMode::Full => 1,
        }
    }
}

/// Stateful batch source for one training loop.
#[derive(Debug, Clone)]
pub struct BatchSelector {
    mode: BatchMode,
    n: usize,
    rng: GaussianNoise,
    permutation: Vec<usize>,
    cursor: usize,
}

impl BatchSelector {
    pub fn new(mode: BatchMode, n: usize, seed: u64) -> Result<Self> {
        if n == 0 {
            return Err(Error::Config("cannot select batches from an empty dataset".into()));
        }
        match mode {
            BatchMode::Poisson { rate } if !(rate > 0.0 && rate <= 1.0) => {
                return Err(Error::Config(format!("Poisson rate {rate} outside (0, 1]")));
            }
            BatchMode::Shuffle { batch_size } if batch_size == 0 || batch_size > n => {
                return Err(Error::Config(format!("batch size {batch_size} must be in 1..={n}")));
            }
            _ => {}
        }
        Ok(Self {
            mode,
            n,
            rng: GaussianNoise::from_seed(seed),
            permutation: Vec::new(),
            cursor: 0,
        })
    }

    pub fn mode(&self) -> BatchMode {
        self.mode
    }

    /// Indices of the next batch, in increasing order for Poisson and full
    /// modes and in permutation order for shuffle mode.
    pub fn next_batch(&mut self) -> Vec<usize> {
        match self.mode {
            BatchMode::Full => (0..self.n).collect(),
            BatchMode::Poisson { rate } => {
                if rate == 1.0 {
                    return (0..self.n).collect();
                }
                (0..self.n).filter(|_| self.rng.uniform() < rate).collect()
            }
            BatchMode::Shuffle { batch_size } => {
                if self.permutation.is_empty() || self.cursor + batch_size > self.n {
                    self.permutation = (0..self.n).collect();
                    self.permutation.shuffle(self.rng.rng_mut());
                    self.cursor = 0;
                }
                let out = self.permutation[self.cursor..self.cursor + batch_size].to_vec();
                self.cursor += batch_size;
                out
            }
        }
    }
}
