//! Plain-text persistence for fitted classifiers and fit traces.
//!
//! A model file is a block of `key=value` header lines followed by labelled
//! comma-separated matrices:
//!
//! ```text
//! method=DFSOS-1
//! K=3
//! ...
//! [Theta]
//! ...
//! [Beta]
//! ...
//! [centroids]
//! ...
//! ```
//!
//! Every real is written with 17 significant digits, so loading a saved
//! model reproduces it bit for bit.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::classify::{CentroidModel, Classifier};
use crate::error::{Result, SosError};
use crate::model::{FitTrace, Method, SosModel};

/// A classifier plus the provenance needed to reproduce or interpret it.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelFile {
    pub classifier: Classifier,
    /// Original label text, `class_labels[k - 1]` for class `k`.
    pub class_labels: Vec<String>,
    pub seed: u64,
    pub converged: bool,
    pub iterations: usize,
}

fn real(v: f64) -> String {
    format!("{v:.16e}")
}

fn join_reals<'a>(values: impl IntoIterator<Item = &'a f64>) -> String {
    values.into_iter().map(|&v| real(v)).collect::<Vec<_>>().join(",")
}

fn write_matrix(out: &mut String, name: &str, m: &DMatrix<f64>) {
    let _ = writeln!(out, "[{name}]");
    for row in m.row_iter() {
        let _ = writeln!(out, "{}", join_reals(row.iter()));
    }
}

impl ModelFile {
    pub fn to_text(&self) -> String {
        let model = &self.classifier.model;
        let cm = &self.classifier.centroids;
        let mut out = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(out, "{k}={v}");
        };
        kv("method", model.method.to_string());
        kv("K", cm.classes().to_string());
        kv("p", model.beta.nrows().to_string());
        kv("q", model.q().to_string());
        kv("gamma", real(model.gamma));
        kv("lambda", real(model.lambda));
        if let Some(ls) = &model.column_lambdas {
            kv("column_lambdas", join_reals(ls));
        }
        kv("seed", self.seed.to_string());
        kv("converged", self.converged.to_string());
        kv("iterations", self.iterations.to_string());
        kv("class_labels", self.class_labels.join("\t"));
        kv("column_means", join_reals(cm.column_means.iter()));
        write_matrix(&mut out, "Theta", &model.theta);
        write_matrix(&mut out, "Beta", &model.beta);
        write_matrix(&mut out, "centroids", &cm.centroids);
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let bad = |m: String| SosError::ModelFormat(m);
        let mut header = BTreeMap::new();
        let mut blocks: BTreeMap<String, Vec<Vec<f64>>> = BTreeMap::new();
        let mut current: Option<String> = None;
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                blocks.insert(name.to_string(), Vec::new());
                current = Some(name.to_string());
                continue;
            }
            match &current {
                None => {
                    let (k, v) = line
                        .split_once('=')
                        .ok_or_else(|| bad(format!("line {}: expected key=value", i + 1)))?;
                    header.insert(k.to_string(), v.to_string());
                }
                Some(name) => {
                    let row = parse_reals(line).map_err(|e| bad(format!("line {}: {e}", i + 1)))?;
                    blocks.get_mut(name).expect("block opened").push(row);
                }
            }
        }
        let get = |k: &str| header.get(k).ok_or_else(|| bad(format!("missing header key {k}")));
        let int = |k: &str| -> Result<usize> { get(k)?.parse().map_err(|_| bad(format!("{k} is not an integer"))) };
        let float = |k: &str| -> Result<f64> { get(k)?.parse().map_err(|_| bad(format!("{k} is not a number"))) };
        let (k, p, q) = (int("K")?, int("p")?, int("q")?);
        let method: Method = get("method")?.parse().map_err(|_| bad("unknown method".into()))?;
        let matrix = |name: &str, rows: usize, cols: usize| -> Result<DMatrix<f64>> {
            let data = blocks.get(name).ok_or_else(|| bad(format!("missing [{name}] block")))?;
            if data.len() != rows || data.iter().any(|r| r.len() != cols) {
                return Err(bad(format!("[{name}] must be {rows}x{cols}")));
            }
            Ok(DMatrix::from_fn(rows, cols, |i, j| data[i][j]))
        };
        let column_lambdas = match header.get("column_lambdas") {
            Some(v) => Some(parse_reals(v).map_err(bad)?),
            None => None,
        };
        let means = parse_reals(get("column_means")?).map_err(bad)?;
        if means.len() != p {
            return Err(bad(format!("column_means has {} entries, p = {p}", means.len())));
        }
        let class_labels: Vec<String> = get("class_labels")?.split('\t').map(str::to_string).collect();
        if class_labels.len() != k {
            return Err(bad(format!("{} class labels for K = {k}", class_labels.len())));
        }
        let beta = matrix("Beta", p, q)?;
        let model = SosModel {
            theta: matrix("Theta", k, q)?,
            beta: beta.clone(),
            lambda: float("lambda")?,
            gamma: float("gamma")?,
            method,
            column_lambdas,
        };
        let centroids = CentroidModel {
            centroids: matrix("centroids", k, q)?,
            beta,
            column_means: DVector::from_vec(means),
        };
        Ok(ModelFile {
            classifier: Classifier { model, centroids },
            class_labels,
            seed: get("seed")?.parse().map_err(|_| bad("seed is not an integer".into()))?,
            converged: get("converged")? == "true",
            iterations: int("iterations")?,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| SosError::io(format!("writing {}", path.display()), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| SosError::io(format!("reading {}", path.display()), e))?;
        Self::parse(&text)
    }
}

fn parse_reals(s: &str) -> std::result::Result<Vec<f64>, String> {
    if s.is_empty() {
        return Ok(Vec::new());
    }
    s.split(',')
        .map(|f| f.trim().parse::<f64>().map_err(|_| format!("not a number: {f:?}")))
        .collect()
}

/// `iteration,column,objective,orth_residual,rho`, one row per trace entry.
pub fn trace_csv(trace: &FitTrace) -> String {
    let mut out = String::from("iteration,column,objective,orth_residual,rho\n");
    for i in 0..trace.objective.len() {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            i + 1,
            trace.column[i],
            real(trace.objective[i]),
            real(trace.orth_residual[i]),
            real(trace.rho[i])
        );
    }
    out
}
