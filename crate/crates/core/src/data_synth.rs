//! Synthetic domain-shift benchmarks and the plain-text dataset format.
//!
//! Source data is a ring of isotropic Gaussian clusters, one per class,
//! centered on the vertices of a regular polygon. Target data comes from the
//! same process on an independent stream, then rotated about the origin and
//! translated. Target labels are returned separately as ground truth.
//!
//! Dataset files are comma-separated, one example per line:
//!
//! ```text
//! # classes=4 dim=2
//! 2,source,3.91,0.27
//! -1,target,0.11,-4.02
//! ```
//!
//! The leading comment line carries the class count and width; rows are
//! `label,domain,f_0,...,f_{d-1}` with label `-1` for unlabeled rows.

use std::f64::consts::PI;
use std::fmt::{self, Write as _};
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::rng::{self, Stream};

#[derive(Debug, Error, PartialEq)]
pub enum DataError {
    #[error("no rows")]
    NoRows,
    #[error("feature width must be at least 1")]
    ZeroWidth,
    #[error("feature buffer of length {len} is not a multiple of width {dim}")]
    Ragged { len: usize, dim: usize },
    #[error("non-finite feature at row {row}, column {col}")]
    NonFinite { row: usize, col: usize },
    #[error("row {row}: label {label} out of range for {class_count} classes")]
    LabelOutOfRange { row: usize, label: usize, class_count: usize },
    #[error("{what}: expected {expected} entries, got {got}")]
    Length { what: &'static str, expected: usize, got: usize },
    #[error("class count must be positive")]
    NoClasses,
    #[error("invalid shift spec: {0}")]
    InvalidSpec(String),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("{path}: {message}")]
    Io { path: PathBuf, message: String },
}

/// Which side of the adaptation problem a row came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum DomainTag {
    Source,
    Target,
}

impl fmt::Display for DomainTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DomainTag::Source => "source",
            DomainTag::Target => "target",
        })
    }
}

impl FromStr for DomainTag {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "source" => Ok(DomainTag::Source),
            "target" => Ok(DomainTag::Target),
            other => Err(format!("unknown domain tag {other:?}")),
        }
    }
}

/// Row-major feature matrix with optional labels and a per-row domain tag.
///
/// Construction validates every invariant, so a `LabeledDataset` in hand is
/// nonempty, finite, and has labels below `class_count`.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    features: Vec<f64>,
    dim: usize,
    labels: Option<Vec<usize>>,
    domains: Vec<DomainTag>,
    class_count: usize,
}

impl LabeledDataset {
    pub fn new(
        features: Vec<f64>,
        dim: usize,
        labels: Option<Vec<usize>>,
        domains: Vec<DomainTag>,
        class_count: usize,
    ) -> Result<Self, DataError> {
        if dim == 0 {
            return Err(DataError::ZeroWidth);
        }
        if class_count == 0 {
            return Err(DataError::NoClasses);
        }
        if !features.len().is_multiple_of(dim) {
            return Err(DataError::Ragged { len: features.len(), dim });
        }
        let n = features.len() / dim;
        if n == 0 {
            return Err(DataError::NoRows);
        }
        if let Some(pos) = features.iter().position(|v| !v.is_finite()) {
            return Err(DataError::NonFinite { row: pos / dim, col: pos % dim });
        }
        if domains.len() != n {
            return Err(DataError::Length { what: "domain tags", expected: n, got: domains.len() });
        }
        if let Some(labels) = &labels {
            if labels.len() != n {
                return Err(DataError::Length { what: "labels", expected: n, got: labels.len() });
            }
            if let Some((row, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= class_count) {
                return Err(DataError::LabelOutOfRange { row, label, class_count });
            }
        }
        Ok(Self { features, dim, labels, domains, class_count })
    }

    /// All rows tagged with one domain.
    pub fn uniform(
        features: Vec<f64>,
        dim: usize,
        labels: Option<Vec<usize>>,
        domain: DomainTag,
        class_count: usize,
    ) -> Result<Self, DataError> {
        let n = features.len().checked_div(dim).unwrap_or(0);
        Self::new(features, dim, labels, vec![domain; n], class_count)
    }

    pub fn len(&self) -> usize {
        self.domains.len()
    }

    pub fn is_empty(&self) -> bool {
        self.domains.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl ExactSizeIterator<Item = &[f64]> + '_ {
        self.features.chunks_exact(self.dim)
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    pub fn domains(&self) -> &[DomainTag] {
        &self.domains
    }

    /// Same rows with labels removed.
    pub fn without_labels(&self) -> Self {
        Self { labels: None, ..self.clone() }
    }

    /// Rows at `indices`, in that order. Panics on an out-of-range index.
    pub fn select_rows(&self, indices: &[usize]) -> Result<Self, DataError> {
        let mut features = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            features.extend_from_slice(self.row(i));
        }
        let labels = self.labels.as_ref().map(|l| indices.iter().map(|&i| l[i]).collect());
        let domains = indices.iter().map(|&i| self.domains[i]).collect();
        Self::new(features, self.dim, labels, domains, self.class_count)
    }
}

/// Parameters of a synthetic source/target pair.
#[derive(Clone, Debug, PartialEq)]
pub struct ShiftSpec {
    pub class_count: usize,
    pub samples_per_class_source: usize,
    pub samples_per_class_target: usize,
    pub class_center_radius: f64,
    pub class_std: f64,
    pub rotation_deg: f64,
    pub translation: [f64; 2],
    /// Total feature width; dimensions past the first two are pure noise.
    pub dim: usize,
    pub seed: u64,
}

impl Default for ShiftSpec {
    fn default() -> Self {
        Self {
            class_count: 4,
            samples_per_class_source: 100,
            samples_per_class_target: 100,
            class_center_radius: 4.0,
            class_std: 1.0,
            rotation_deg: 35.0,
            translation: [0.0, 0.0],
            dim: 2,
            seed: 0,
        }
    }
}

impl ShiftSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |m: &str| Err(DataError::InvalidSpec(m.to_string()));
        if self.class_count < 2 {
            return bad("class_count must be at least 2");
        }
        if self.samples_per_class_source == 0 || self.samples_per_class_target == 0 {
            return bad("samples per class must be positive");
        }
        if !(self.class_center_radius > 0.0 && self.class_center_radius.is_finite()) {
            return bad("class_center_radius must be positive");
        }
        if !(self.class_std > 0.0 && self.class_std.is_finite()) {
            return bad("class_std must be positive");
        }
        if !self.rotation_deg.is_finite() || !self.translation.iter().all(|t| t.is_finite()) {
            return bad("rotation and translation must be finite");
        }
        if self.dim < 2 {
            return bad("dim must be at least 2");
        }
        Ok(())
    }

    pub fn class_center(&self, class: usize) -> [f64; 2] {
        let angle = 2.0 * PI * class as f64 / self.class_count as f64;
        [self.class_center_radius * angle.cos(), self.class_center_radius * angle.sin()]
    }
}

/// Output of [`generate_pair`]. `target` carries no labels; its labels live
/// in `target_truth` and are only for evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainPair {
    pub source: LabeledDataset,
    pub target: LabeledDataset,
    pub target_truth: Vec<usize>,
}

pub fn generate_pair(spec: &ShiftSpec) -> Result<DomainPair, DataError> {
    spec.validate()?;
    let (src_x, src_y) = sample_clusters(spec, spec.samples_per_class_source, Stream::SourceData);
    let (mut tgt_x, tgt_y) = sample_clusters(spec, spec.samples_per_class_target, Stream::TargetData);

    let (sin, cos) = spec.rotation_deg.to_radians().sin_cos();
    for row in tgt_x.chunks_exact_mut(spec.dim) {
        let (x, y) = (row[0], row[1]);
        row[0] = cos * x - sin * y + spec.translation[0];
        row[1] = sin * x + cos * y + spec.translation[1];
    }

    let c = spec.class_count;
    let source = LabeledDataset::uniform(src_x, spec.dim, Some(src_y), DomainTag::Source, c)?;
    let target = LabeledDataset::uniform(tgt_x, spec.dim, None, DomainTag::Target, c)?;
    Ok(DomainPair { source, target, target_truth: tgt_y })
}

fn sample_clusters(spec: &ShiftSpec, per_class: usize, which: Stream) -> (Vec<f64>, Vec<usize>) {
    let mut rng = rng::stream(spec.seed, which);
    let n = per_class * spec.class_count;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);

    let mut features = vec![0.0; n * spec.dim];
    let mut labels = vec![0; n];
    for (k, &slot) in order.iter().enumerate() {
        let class = k / per_class;
        let center = spec.class_center(class);
        let row = &mut features[slot * spec.dim..(slot + 1) * spec.dim];
        for (j, v) in row.iter_mut().enumerate() {
            let z: f64 = StandardNormal.sample(&mut rng);
            *v = if j < 2 { center[j] } else { 0.0 } + spec.class_std * z;
        }
        labels[slot] = class;
    }
    (features, labels)
}

pub fn save_dataset(ds: &LabeledDataset, path: &Path) -> Result<(), DataError> {
    write_file(path, &format_dataset(ds))
}

pub fn format_dataset(ds: &LabeledDataset) -> String {
    let mut out = format!("# classes={} dim={}\n", ds.class_count, ds.dim);
    for (i, row) in ds.rows().enumerate() {
        match ds.labels() {
            Some(l) => write!(out, "{}", l[i]).unwrap(),
            None => out.push_str("-1"),
        }
        write!(out, ",{}", ds.domains[i]).unwrap();
        for v in row {
            // `{}` on f64 prints the shortest string that parses back exactly.
            write!(out, ",{v}").unwrap();
        }
        out.push('\n');
    }
    out
}

pub fn load_dataset(path: &Path) -> Result<LabeledDataset, DataError> {
    parse_dataset(&read_file(path)?)
}

pub fn parse_dataset(text: &str) -> Result<LabeledDataset, DataError> {
    let mut class_count = None;
    let mut dim = None;
    let mut features = Vec::new();
    let mut labels: Vec<Option<usize>> = Vec::new();
    let mut domains = Vec::new();

    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let err = |message: String| DataError::Parse { line, message };
        let trimmed = raw.trim();
        if trimmed.is_empty() {
            continue;
        }
        if let Some(header) = trimmed.strip_prefix('#') {
            for field in header.split_whitespace() {
                if let Some(v) = field.strip_prefix("classes=") {
                    class_count = Some(v.parse::<usize>().map_err(|e| err(format!("bad class count: {e}")))?);
                } else if let Some(v) = field.strip_prefix("dim=") {
                    dim = Some(v.parse::<usize>().map_err(|e| err(format!("bad dim: {e}")))?);
                }
            }
            continue;
        }

        let cols: Vec<&str> = trimmed.split(',').map(str::trim).collect();
        if cols.len() < 3 {
            return Err(err(format!("expected label, domain and at least one feature, got {} columns", cols.len())));
        }
        let width = cols.len() - 2;
        match dim {
            None => dim = Some(width),
            Some(d) if d != width => {
                return Err(err(format!("expected {d} feature columns, got {width}")));
            }
            _ => {}
        }
        let label: i64 = cols[0].parse().map_err(|e| err(format!("bad label {:?}: {e}", cols[0])))?;
        let label = match label {
            -1 => None,
            l if l >= 0 => {
                let l = l as usize;
                if let Some(c) = class_count {
                    if l >= c {
                        return Err(err(format!("label {l} out of range for {c} classes")));
                    }
                }
                Some(l)
            }
            l => return Err(err(format!("label {l} out of range"))),
        };
        if let Some(first) = labels.first() {
            if first.is_some() != label.is_some() {
                return Err(err("mixes labeled and unlabeled rows".to_string()));
            }
        }
        labels.push(label);
        domains.push(cols[1].parse::<DomainTag>().map_err(err)?);
        for c in &cols[2..] {
            let v: f64 = c.parse().map_err(|e| err(format!("bad feature {c:?}: {e}")))?;
            if !v.is_finite() {
                return Err(err(format!("non-finite feature {c:?}")));
            }
            features.push(v);
        }
    }

    if domains.is_empty() {
        return Err(DataError::NoRows);
    }
    let labels: Option<Vec<usize>> = labels.into_iter().collect();
    let class_count = match class_count {
        Some(c) => c,
        None => labels.as_ref().map_or(1, |l| l.iter().max().map_or(1, |m| m + 1)),
    };
    LabeledDataset::new(features, dim.unwrap_or(0), labels, domains, class_count)
}

/// Sibling path holding ground-truth labels for an unlabeled dataset file.
pub fn truth_path(dataset_path: &Path) -> PathBuf {
    dataset_path.with_extension("truth")
}

pub fn save_labels(labels: &[usize], path: &Path) -> Result<(), DataError> {
    let mut out = String::with_capacity(labels.len() * 2);
    for l in labels {
        writeln!(out, "{l}").unwrap();
    }
    write_file(path, &out)
}

pub fn load_labels(path: &Path, class_count: usize) -> Result<Vec<usize>, DataError> {
    let text = read_file(path)?;
    let mut labels = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let t = raw.trim();
        if t.is_empty() {
            continue;
        }
        let line = idx + 1;
        let l: usize = t
            .parse()
            .map_err(|e| DataError::Parse { line, message: format!("bad label {t:?}: {e}") })?;
        if l >= class_count {
            return Err(DataError::Parse { line, message: format!("label {l} out of range for {class_count} classes") });
        }
        labels.push(l);
    }
    if labels.is_empty() {
        return Err(DataError::NoRows);
    }
    Ok(labels)
}

fn read_file(path: &Path) -> Result<String, DataError> {
    fs::read_to_string(path).map_err(|e| DataError::Io { path: path.to_path_buf(), message: e.to_string() })
}

fn write_file(path: &Path, contents: &str) -> Result<(), DataError> {
    fs::write(path, contents).map_err(|e| DataError::Io { path: path.to_path_buf(), message: e.to_string() })
}
