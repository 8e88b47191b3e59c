//! Shared domain types: datasets, class indicators, fitted models, solver
//! configuration, and the optimal scoring objective.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SosError};

/// Observations in rows, with 1-based class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub x: DMatrix<f64>,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub feature_names: Option<Vec<String>>,
    /// Original label text for each class, `class_labels[k - 1]` for class `k`.
    pub class_labels: Vec<String>,
}

impl Dataset {
    pub fn new(x: DMatrix<f64>, labels: Vec<usize>, classes: usize) -> Result<Self> {
        let class_labels = (1..=classes).map(|k| k.to_string()).collect();
        Self::with_class_labels(x, labels, classes, class_labels)
    }

    pub fn with_class_labels(
        x: DMatrix<f64>,
        labels: Vec<usize>,
        classes: usize,
        class_labels: Vec<String>,
    ) -> Result<Self> {
        if x.nrows() != labels.len() {
            return Err(SosError::ShapeMismatch(format!(
                "{} rows but {} labels",
                x.nrows(),
                labels.len()
            )));
        }
        if class_labels.len() != classes {
            return Err(SosError::ShapeMismatch(format!(
                "{} class names for {classes} classes",
                class_labels.len()
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(SosError::NonFiniteEncountered("data matrix"));
        }
        class_counts(&labels, classes)?;
        Ok(Dataset {
            x,
            labels,
            classes,
            feature_names: None,
            class_labels,
        })
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    pub fn indicator(&self) -> Result<IndicatorMatrix> {
        build_indicator(&self.labels, self.classes)
    }

    /// Rows `idx` of this dataset. Every class must still be represented.
    pub fn subset(&self, idx: &[usize]) -> Result<Dataset> {
        let x = self.x.select_rows(idx);
        let labels = idx.iter().map(|&i| self.labels[i]).collect();
        let mut out = Dataset::with_class_labels(x, labels, self.classes, self.class_labels.clone())?;
        out.feature_names = self.feature_names.clone();
        Ok(out)
    }
}

fn class_counts(labels: &[usize], classes: usize) -> Result<Vec<usize>> {
    let mut counts = vec![0usize; classes];
    for &label in labels {
        if label == 0 || label > classes {
            return Err(SosError::LabelOutOfRange { label, classes });
        }
        counts[label - 1] += 1;
    }
    if let Some(k) = counts.iter().position(|&c| c == 0) {
        return Err(SosError::EmptyClass(k + 1));
    }
    Ok(counts)
}

/// One-hot class membership `Y` together with `D = YᵀY / n`.
#[derive(Debug, Clone, PartialEq)]
pub struct IndicatorMatrix {
    pub y: DMatrix<f64>,
    pub class_counts: Vec<usize>,
    /// Diagonal of `D`, i.e. the class proportions.
    pub d: DVector<f64>,
}

impl IndicatorMatrix {
    pub fn n(&self) -> usize {
        self.y.nrows()
    }

    pub fn classes(&self) -> usize {
        self.y.ncols()
    }

    pub fn d_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_diagonal(&self.d)
    }

    /// `ΘᵀDΘ`, which equals `(1/n)ΘᵀYᵀYΘ`.
    pub fn d_gram(&self, theta: &DMatrix<f64>) -> DMatrix<f64> {
        let mut scaled = theta.clone();
        for (mut row, &w) in scaled.row_iter_mut().zip(self.d.iter()) {
            row *= w;
        }
        theta.transpose() * scaled
    }

    /// Class index (1-based) of each row, recovered from the one-hot encoding.
    pub fn labels(&self) -> Vec<usize> {
        self.y
            .row_iter()
            .map(|row| {
                let (mut best, mut best_val) = (0, f64::NEG_INFINITY);
                for (k, &v) in row.iter().enumerate() {
                    if v > best_val {
                        best = k;
                        best_val = v;
                    }
                }
                best + 1
            })
            .collect()
    }
}

pub fn build_indicator(labels: &[usize], classes: usize) -> Result<IndicatorMatrix> {
    let counts = class_counts(labels, classes)?;
    let n = labels.len();
    let mut y = DMatrix::zeros(n, classes);
    for (i, &label) in labels.iter().enumerate() {
        y[(i, label - 1)] = 1.0;
    }
    let d = DVector::from_iterator(classes, counts.iter().map(|&c| c as f64 / n as f64));
    Ok(IndicatorMatrix {
        y,
        class_counts: counts,
        d,
    })
}

/// Subtracts the column means. Returns the centered copy and the means.
pub fn center_columns(x: &DMatrix<f64>) -> (DMatrix<f64>, DVector<f64>) {
    let n = x.nrows().max(1) as f64;
    let means = DVector::from_iterator(x.ncols(), x.column_iter().map(|c| c.sum() / n));
    let mut centered = x.clone();
    for (mut col, &m) in centered.column_iter_mut().zip(means.iter()) {
        col.add_scalar_mut(-m);
    }
    (centered, means)
}

/// Subtracts the given column means.
pub fn center_with(x: &DMatrix<f64>, means: &DVector<f64>) -> DMatrix<f64> {
    let mut centered = x.clone();
    for (mut col, &m) in centered.column_iter_mut().zip(means.iter()) {
        col.add_scalar_mut(-m);
    }
    centered
}

/// Sample standard deviation of each column; constant columns get scale 1.
pub fn column_scales(x: &DMatrix<f64>) -> DVector<f64> {
    let n = x.nrows();
    DVector::from_iterator(
        x.ncols(),
        x.column_iter().map(|c| {
            if n < 2 {
                return 1.0;
            }
            let mean = c.sum() / n as f64;
            let var = c.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            if var > 0.0 {
                var.sqrt()
            } else {
                1.0
            }
        }),
    )
}

/// `Σᵢ ‖Yθᵢ − Xβᵢ‖² + γ‖βᵢ‖² + λ‖βᵢ‖₁` over the columns of `Θ` and `B`.
pub fn sos_objective(
    x: &DMatrix<f64>,
    y: &DMatrix<f64>,
    theta: &DMatrix<f64>,
    beta: &DMatrix<f64>,
    gamma: f64,
    lambda: f64,
) -> Result<f64> {
    let (n, p) = x.shape();
    if y.nrows() != n
        || theta.nrows() != y.ncols()
        || beta.nrows() != p
        || theta.ncols() != beta.ncols()
    {
        return Err(SosError::ShapeMismatch(format!(
            "X {n}x{p}, Y {}x{}, Theta {}x{}, Beta {}x{}",
            y.nrows(),
            y.ncols(),
            theta.nrows(),
            theta.ncols(),
            beta.nrows(),
            beta.ncols()
        )));
    }
    let residual = y * theta - x * beta;
    let l1: f64 = beta.iter().map(|b| b.abs()).sum();
    Ok(residual.norm_squared() + gamma * beta.norm_squared() + lambda * l1)
}

/// Which algorithm produced a model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Method {
    DeflationApg,
    DeflationAdmm,
    DfsosV1,
    DfsosV2,
}

impl Method {
    pub const ALL: [Method; 4] = [
        Method::DfsosV1,
        Method::DfsosV2,
        Method::DeflationApg,
        Method::DeflationAdmm,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::DeflationApg => "APG",
            Method::DeflationAdmm => "ADMM",
            Method::DfsosV1 => "DFSOS-1",
            Method::DfsosV2 => "DFSOS-2",
        }
    }

    pub fn is_deflation_free(self) -> bool {
        matches!(self, Method::DfsosV1 | Method::DfsosV2)
    }

    /// Tolerance on `‖ΘᵀDΘ − I‖` a model from this method must meet.
    pub fn orthogonality_tolerance(self) -> f64 {
        if self.is_deflation_free() {
            1e-6
        } else {
            1e-8
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = SosError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "apg" | "deflation-apg" => Ok(Method::DeflationApg),
            "admm" | "deflation-admm" => Ok(Method::DeflationAdmm),
            "dfsos-1" | "dfsos1" | "dfsos-v1" => Ok(Method::DfsosV1),
            "dfsos-2" | "dfsos2" | "dfsos-v2" => Ok(Method::DfsosV2),
            _ => Err(SosError::InvalidInput(format!("unknown method {s:?}"))),
        }
    }
}

/// Scoring matrix `Θ` (K×q) paired with discriminant matrix `B` (p×q).
#[derive(Debug, Clone, PartialEq)]
pub struct SosModel {
    pub theta: DMatrix<f64>,
    pub beta: DMatrix<f64>,
    pub lambda: f64,
    pub gamma: f64,
    pub method: Method,
    /// Set when each discriminant vector used its own ℓ1 weight.
    pub column_lambdas: Option<Vec<f64>>,
}

impl SosModel {
    pub fn q(&self) -> usize {
        self.theta.ncols()
    }

    /// `‖ΘᵀDΘ − I‖_F`.
    pub fn orthogonality_error(&self, indicator: &IndicatorMatrix) -> f64 {
        let gram = indicator.d_gram(&self.theta);
        (gram - DMatrix::identity(self.q(), self.q())).norm()
    }

    pub fn validate(&self, indicator: &IndicatorMatrix) -> Result<()> {
        let k = indicator.classes();
        if self.theta.nrows() != k || self.theta.ncols() != self.beta.ncols() {
            return Err(SosError::ShapeMismatch(format!(
                "Theta {}x{} vs Beta {}x{} for K={k}",
                self.theta.nrows(),
                self.theta.ncols(),
                self.beta.nrows(),
                self.beta.ncols()
            )));
        }
        if self.q() == 0 || self.q() >= k.max(2) {
            return Err(SosError::InvalidInput(format!("q = {} for K = {k}", self.q())));
        }
        let err = self.orthogonality_error(indicator);
        if err > self.method.orthogonality_tolerance() {
            return Err(SosError::InvalidInput(format!(
                "scoring matrix violates D-orthonormality by {err:e}"
            )));
        }
        Ok(())
    }
}

/// How the ℓ1 weight is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LambdaChoice {
    Fixed(f64),
    /// `multiplier × λ_max` computed from the initial scoring matrix.
    Auto(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scaling {
    #[default]
    None,
    /// Divide each centered column by its sample standard deviation.
    UnitVariance,
    /// Divide each centered column by its Euclidean norm.
    UnitNorm,
}

impl Scaling {
    /// Per-column divisors for centered data; constant columns get 1.
    pub fn divisors(self, centered: &DMatrix<f64>) -> Option<DVector<f64>> {
        match self {
            Scaling::None => None,
            Scaling::UnitVariance => Some(column_scales(centered)),
            Scaling::UnitNorm => Some(DVector::from_iterator(
                centered.ncols(),
                centered.column_iter().map(|c| {
                    let norm = c.norm();
                    if norm > 0.0 {
                        norm
                    } else {
                        1.0
                    }
                }),
            )),
        }
    }
}

impl FromStr for Scaling {
    type Err = SosError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "none" => Ok(Scaling::None),
            "unit-variance" | "variance" => Ok(Scaling::UnitVariance),
            "unit-norm" | "norm" => Ok(Scaling::UnitNorm),
            _ => Err(SosError::InvalidInput(format!("unknown scaling {s:?}"))),
        }
    }
}

/// Everything a single fit needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    pub gamma: f64,
    pub lambda: LambdaChoice,
    pub rho0: f64,
    pub eta: f64,
    pub sigma: f64,
    pub tol_inner_beta: f64,
    pub max_inner_beta: usize,
    pub tol_outer: f64,
    pub max_outer: usize,
    pub mu_admm: f64,
    pub seed: u64,
    /// One ℓ1 weight per discriminant vector instead of a shared one.
    pub per_column_lambda: bool,
    /// Feature scaling applied after centering. It is folded back into the
    /// fitted discriminant vectors.
    pub scaling: Scaling,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig::gaussian_profile()
    }
}

impl SolverConfig {
    /// Settings used for the synthetic Gaussian experiments.
    pub fn gaussian_profile() -> Self {
        SolverConfig {
            gamma: 0.1,
            lambda: LambdaChoice::Auto(1.0),
            rho0: 5.0,
            eta: 0.25,
            sigma: 2.0,
            tol_inner_beta: 1e-4,
            max_inner_beta: 100,
            tol_outer: 1e-4,
            max_outer: 500,
            mu_admm: 2.0,
            seed: 0,
            per_column_lambda: false,
            scaling: Scaling::None,
        }
    }

    /// Settings used for the time-series benchmarks.
    pub fn time_series_profile() -> Self {
        SolverConfig {
            tol_inner_beta: 1e-5,
            max_inner_beta: 50,
            max_outer: 50,
            ..SolverConfig::gaussian_profile()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(SosError::InvalidInput(what.to_string()));
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return bad("gamma must be positive");
        }
        match self.lambda {
            LambdaChoice::Fixed(l) if !(l >= 0.0) => return bad("lambda must be nonnegative"),
            LambdaChoice::Auto(m) if !(m > 0.0 && m.is_finite()) => {
                return bad("lambda multiplier must be positive")
            }
            _ => {}
        }
        if !(self.rho0 > 0.0) {
            return bad("rho0 must be positive");
        }
        if !(self.eta > 0.0 && self.eta < 1.0) {
            return bad("eta must lie in (0, 1)");
        }
        if !(self.sigma > 1.0) {
            return bad("sigma must exceed 1");
        }
        if !(self.tol_inner_beta > 0.0 && self.tol_outer > 0.0) {
            return bad("tolerances must be positive");
        }
        if self.max_inner_beta == 0 || self.max_outer == 0 {
            return bad("iteration caps must be at least 1");
        }
        if !(self.mu_admm > 0.0) {
            return bad("mu must be positive");
        }
        Ok(())
    }
}

/// Per-iteration diagnostics of a fit.
///
/// Deflationary fits record one entry per inner block-coordinate iteration,
/// tagged with the discriminant column it belongs to; deflation-free fits
/// record one entry per outer iteration with `column` set to 0.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FitTrace {
    pub objective: Vec<f64>,
    pub orth_residual: Vec<f64>,
    pub rho: Vec<f64>,
    pub column: Vec<usize>,
    pub iterations: usize,
    pub wall_time_s: f64,
    pub converged: bool,
    /// β-subproblems are warm-started from the previous iterate.
    pub warm_start: bool,
    pub warnings: Vec<String>,
}

impl FitTrace {
    pub(crate) fn push(&mut self, column: usize, objective: f64, orth_residual: f64, rho: f64) {
        self.column.push(column);
        self.objective.push(objective);
        self.orth_residual.push(orth_residual);
        self.rho.push(rho);
        self.iterations += 1;
    }
}
