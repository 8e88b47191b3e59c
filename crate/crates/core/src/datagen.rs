//! Synthetic Gaussian classes, delimited-file I/O, and stratified folds.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SosError};
use crate::model::Dataset;

/// `K` Gaussian classes sharing the equicorrelation covariance
/// `(1 − r)I + r11ᵀ`. Class `i` has mean `mean_value` on features
/// `(i−1)·block .. i·block` and zero elsewhere.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianSpec {
    pub classes: usize,
    pub r: f64,
    pub p: usize,
    pub block: usize,
    pub mean_value: f64,
    pub n_train_per_class: usize,
    pub n_test_per_class: usize,
    pub seed: u64,
}

impl Default for GaussianSpec {
    fn default() -> Self {
        GaussianSpec {
            classes: 2,
            r: 0.5,
            p: 1000,
            block: 100,
            mean_value: 0.7,
            n_train_per_class: 100,
            n_test_per_class: 1000,
            seed: 0,
        }
    }
}

impl GaussianSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(SosError::SpecInvalid(m));
        if self.classes < 2 {
            return bad(format!("need at least 2 classes, got {}", self.classes));
        }
        if !(0.0..1.0).contains(&self.r) {
            return bad(format!("r = {} must lie in [0, 1)", self.r));
        }
        if self.block == 0 || self.classes * self.block > self.p {
            return bad(format!(
                "{} classes of block {} do not fit in p = {}",
                self.classes, self.block, self.p
            ));
        }
        if !self.mean_value.is_finite() {
            return bad("mean value must be finite".into());
        }
        if self.n_train_per_class == 0 || self.n_test_per_class == 0 {
            return bad("every class needs at least one training and one test row".into());
        }
        Ok(())
    }

    /// Mean of class `class` (1-based) at feature `j` (0-based).
    pub fn mean(&self, class: usize, j: usize) -> f64 {
        if j / self.block == class - 1 {
            self.mean_value
        } else {
            0.0
        }
    }
}

/// Draws `rows` samples of class `class` from stream `stream`:
/// `x = μ + √(1−r)·z + √r·g·1`.
fn sample_class(spec: &GaussianSpec, class: usize, rows: usize, stream: u64) -> DMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(stream);
    let a = (1.0 - spec.r).sqrt();
    let b = spec.r.sqrt();
    let mut out = DMatrix::zeros(rows, spec.p);
    for i in 0..rows {
        let g: f64 = StandardNormal.sample(&mut rng);
        for j in 0..spec.p {
            let z: f64 = StandardNormal.sample(&mut rng);
            out[(i, j)] = spec.mean(class, j) + a * z + b * g;
        }
    }
    out
}

fn stack(spec: &GaussianSpec, per_class: usize, offset: u64) -> Result<Dataset> {
    let k = spec.classes;
    let mut x = DMatrix::zeros(per_class * k, spec.p);
    let mut labels = Vec::with_capacity(per_class * k);
    for class in 1..=k {
        let block = sample_class(spec, class, per_class, 2 * (class as u64 - 1) + offset);
        x.rows_mut((class - 1) * per_class, per_class).copy_from(&block);
        labels.extend(std::iter::repeat_n(class, per_class));
    }
    Dataset::new(x, labels, k)
}

/// Training and test sets, rows grouped by class. Each class and split has
/// its own random stream, so the output does not depend on generation order.
pub fn generate_gaussians(spec: &GaussianSpec) -> Result<(Dataset, Dataset)> {
    spec.validate()?;
    Ok((stack(spec, spec.n_train_per_class, 0)?, stack(spec, spec.n_test_per_class, 1)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DelimitedFormat {
    /// Tab separated, label in the first field.
    LabelFirstTSV,
    /// Comma separated, label in the last field.
    LabelLastCSV,
}

impl DelimitedFormat {
    fn separator(self) -> char {
        match self {
            DelimitedFormat::LabelFirstTSV => '\t',
            DelimitedFormat::LabelLastCSV => ',',
        }
    }

    /// Guesses from the extension: `.csv` is label-last, anything else label-first.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(e) if e.eq_ignore_ascii_case("csv") => DelimitedFormat::LabelLastCSV,
            _ => DelimitedFormat::LabelFirstTSV,
        }
    }
}

struct RawRows {
    labels: Vec<String>,
    values: Vec<f64>,
    p: usize,
}

fn read_rows(path: &Path, format: DelimitedFormat) -> Result<RawRows> {
    let text = fs::read_to_string(path).map_err(|e| SosError::io(format!("reading {}", path.display()), e))?;
    let sep = format.separator();
    let mut labels = Vec::new();
    let mut values = Vec::new();
    let mut width = None;
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(sep).map(str::trim).collect();
        let expected = *width.get_or_insert(fields.len());
        if fields.len() != expected {
            return Err(SosError::RaggedRows {
                path: path.to_path_buf(),
                line: line_no,
                expected,
                found: fields.len(),
            });
        }
        if expected < 2 {
            return Err(SosError::InvalidInput(format!(
                "{}:{line_no}: a row needs a label and at least one feature",
                path.display()
            )));
        }
        let (label, features) = match format {
            DelimitedFormat::LabelFirstTSV => (fields[0], &fields[1..]),
            DelimitedFormat::LabelLastCSV => (fields[expected - 1], &fields[..expected - 1]),
        };
        let first_col = match format {
            DelimitedFormat::LabelFirstTSV => 2,
            DelimitedFormat::LabelLastCSV => 1,
        };
        for (c, f) in features.iter().enumerate() {
            let v: f64 = f.parse().map_err(|_| SosError::NonNumericField {
                path: path.to_path_buf(),
                line: line_no,
                col: c + first_col,
                field: f.to_string(),
            })?;
            if !v.is_finite() {
                return Err(SosError::NonNumericField {
                    path: path.to_path_buf(),
                    line: line_no,
                    col: c + first_col,
                    field: f.to_string(),
                });
            }
            values.push(v);
        }
        labels.push(label.to_string());
    }
    if labels.is_empty() {
        return Err(SosError::InvalidInput(format!("{} contains no rows", path.display())));
    }
    let p = width.unwrap_or(1) - 1;
    Ok(RawRows { labels, values, p })
}

fn same_label(a: &str, b: &str) -> bool {
    match (a.parse::<f64>(), b.parse::<f64>()) {
        (Ok(x), Ok(y)) => x == y,
        _ => a == b,
    }
}

/// Distinct labels in sorted order: numerically when all parse as numbers.
fn sorted_distinct(labels: &[String]) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for l in labels {
        if !out.iter().any(|o| same_label(o, l)) {
            out.push(l.clone());
        }
    }
    let numeric: Option<Vec<f64>> = out.iter().map(|l| l.parse().ok()).collect();
    match numeric {
        Some(_) => out.sort_by(|a, b| a.parse::<f64>().unwrap().total_cmp(&b.parse::<f64>().unwrap())),
        None => out.sort(),
    }
    out
}

fn encode(raw: RawRows, class_labels: &[String]) -> Result<(DMatrix<f64>, Vec<usize>)> {
    let labels = raw
        .labels
        .iter()
        .map(|l| {
            class_labels
                .iter()
                .position(|c| same_label(c, l))
                .map(|k| k + 1)
                .ok_or_else(|| SosError::UnknownLabel(l.clone()))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((DMatrix::from_row_slice(labels.len(), raw.p, &raw.values), labels))
}

/// Reads a labelled data file. Labels become `1..=K` in sorted order of the
/// original values, which are kept in `Dataset::class_labels`. When `k_hint`
/// is given the file must contain exactly that many classes.
pub fn load_delimited(path: &Path, format: DelimitedFormat, k_hint: Option<usize>) -> Result<Dataset> {
    let raw = read_rows(path, format)?;
    let class_labels = sorted_distinct(&raw.labels);
    if let Some(k) = k_hint {
        if k != class_labels.len() {
            return Err(SosError::InvalidInput(format!(
                "{} has {} classes, expected {k}",
                path.display(),
                class_labels.len()
            )));
        }
    }
    let (x, labels) = encode(raw, &class_labels)?;
    let k = class_labels.len();
    Dataset::with_class_labels(x, labels, k, class_labels)
}

/// Reads a file whose labels must come from an existing label map, typically
/// a test set read against its training set. Classes may be absent from the
/// file; labels outside the map are rejected.
pub fn load_delimited_with_labels(path: &Path, format: DelimitedFormat, class_labels: &[String]) -> Result<Dataset> {
    let (x, labels) = encode(read_rows(path, format)?, class_labels)?;
    Ok(Dataset {
        x,
        labels,
        classes: class_labels.len(),
        feature_names: None,
        class_labels: class_labels.to_vec(),
    })
}

/// Formats a dataset in `format`. Values use the shortest representation
/// that parses back to the same `f64`.
pub fn format_delimited(data: &Dataset, format: DelimitedFormat) -> String {
    let sep = format.separator();
    let mut out = String::new();
    for (i, row) in data.x.row_iter().enumerate() {
        let label = &data.class_labels[data.labels[i] - 1];
        if format == DelimitedFormat::LabelFirstTSV {
            out.push_str(label);
            for v in row.iter() {
                let _ = write!(out, "{sep}{v}");
            }
        } else {
            for v in row.iter() {
                let _ = write!(out, "{v}{sep}");
            }
            out.push_str(label);
        }
        out.push('\n');
    }
    out
}

pub fn save_delimited(path: &Path, data: &Dataset, format: DelimitedFormat) -> Result<()> {
    fs::write(path, format_delimited(data, format)).map_err(|e| SosError::io(format!("writing {}", path.display()), e))
}

/// Stratified folds: each class is shuffled and dealt round-robin, continuing
/// from where the previous class stopped. Returns `(train, validation)` index
/// lists, both ascending.
pub fn kfold_split(labels: &[usize], folds: usize, seed: u64) -> Result<Vec<(Vec<usize>, Vec<usize>)>> {
    let n = labels.len();
    if folds < 2 || folds > n {
        return Err(SosError::InvalidInput(format!("{folds} folds for {n} rows")));
    }
    let classes = labels.iter().copied().max().unwrap_or(0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut assignment = vec![0usize; n];
    let mut next = 0;
    for class in 1..=classes {
        let mut members: Vec<usize> = (0..n).filter(|&i| labels[i] == class).collect();
        if members.is_empty() {
            continue;
        }
        if members.len() < folds {
            return Err(SosError::TooFewSamples {
                class,
                count: members.len(),
                folds,
            });
        }
        members.shuffle(&mut rng);
        for i in members {
            assignment[i] = next % folds;
            next += 1;
        }
    }
    Ok((0..folds)
        .map(|f| {
            let (val, train): (Vec<usize>, Vec<usize>) = (0..n).partition(|&i| assignment[i] == f);
            (train, val)
        })
        .collect())
}
