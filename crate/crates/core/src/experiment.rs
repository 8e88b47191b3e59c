//! Cross-validation over the λ grid and repeated multi-method benchmarks.

use std::fmt::Write as _;
use std::time::Instant;

use rayon::prelude::*;

use crate::classify::{self, knn_predict, prediction_cosine, prediction_cosine_one_hot, Classifier};
use crate::datagen::{generate_gaussians, kfold_split, GaussianSpec};
use crate::error::{Result, SosError};
use crate::model::{center_columns, center_with, Dataset, LambdaChoice, Method, SolverConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Selection {
    MaxAccuracy,
}

/// λ grid, as multiples of λ_max, and fold count.
#[derive(Debug, Clone, PartialEq)]
pub struct CvPlan {
    pub grid_multipliers: Vec<f64>,
    pub folds: usize,
    pub selection: Selection,
}

impl CvPlan {
    /// `{2⁻³, …, 2³}`, 5 folds.
    pub fn gaussian() -> Self {
        CvPlan {
            grid_multipliers: (-3..=3).map(|e| 2f64.powi(e)).collect(),
            folds: 5,
            selection: Selection::MaxAccuracy,
        }
    }

    /// `{2⁻⁴, …, 1}`, 5 folds.
    pub fn time_series() -> Self {
        CvPlan {
            grid_multipliers: (-4..=0).map(|e| 2f64.powi(e)).collect(),
            folds: 5,
            selection: Selection::MaxAccuracy,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.grid_multipliers;
        if m.is_empty() {
            return Err(SosError::InvalidInput("empty lambda grid".into()));
        }
        if m.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
            return Err(SosError::InvalidInput("lambda multipliers must be positive".into()));
        }
        if m.windows(2).any(|w| w[0] >= w[1]) {
            return Err(SosError::InvalidInput("lambda multipliers must increase strictly".into()));
        }
        if self.folds < 2 {
            return Err(SosError::InvalidInput(format!("{} folds", self.folds)));
        }
        Ok(())
    }
}

/// One (multiplier, fold) fit.
#[derive(Debug, Clone, PartialEq)]
pub struct CvCell {
    pub multiplier: f64,
    pub fold: usize,
    /// λ actually used, `multiplier × λ_max` of the training fold.
    pub lambda: Option<f64>,
    pub accuracy: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CvTable {
    pub cells: Vec<CvCell>,
    /// Mean validation accuracy per multiplier over the folds that succeeded.
    pub mean_accuracy: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CvOutcome {
    pub best_multiplier: f64,
    pub table: CvTable,
}

/// Scores every grid multiplier by mean nearest-centroid validation accuracy.
/// Each training fold gets its own λ_max. Ties go to the larger multiplier.
pub fn cross_validate(
    data: &Dataset,
    cfg: &SolverConfig,
    plan: &CvPlan,
    method: Method,
    q: Option<usize>,
) -> Result<CvOutcome> {
    plan.validate()?;
    let splits = kfold_split(&data.labels, plan.folds, cfg.seed)?;
    let jobs: Vec<(usize, usize)> = (0..plan.grid_multipliers.len())
        .flat_map(|m| (0..plan.folds).map(move |f| (m, f)))
        .collect();
    let cells: Vec<CvCell> = jobs
        .par_iter()
        .map(|&(m, f)| {
            let multiplier = plan.grid_multipliers[m];
            let (train_idx, val_idx) = &splits[f];
            let run = || -> Result<(f64, f64)> {
                let train = data.subset(train_idx)?;
                let cell_cfg = SolverConfig {
                    lambda: LambdaChoice::Auto(multiplier),
                    ..cfg.clone()
                };
                let (clf, _) = Classifier::fit(&train, &cell_cfg, q, method)?;
                let val_x = data.x.select_rows(val_idx);
                let truth: Vec<usize> = val_idx.iter().map(|&i| data.labels[i]).collect();
                let pred = clf.predict(&val_x)?;
                Ok((clf.model.lambda, classify::accuracy(&pred, &truth)))
            };
            match run() {
                Ok((lambda, acc)) => CvCell {
                    multiplier,
                    fold: f,
                    lambda: Some(lambda),
                    accuracy: Some(acc),
                    error: None,
                },
                Err(e) => CvCell {
                    multiplier,
                    fold: f,
                    lambda: None,
                    accuracy: None,
                    error: Some(e.to_string()),
                },
            }
        })
        .collect();

    let mean_accuracy: Vec<Option<f64>> = plan
        .grid_multipliers
        .iter()
        .map(|&m| {
            let accs: Vec<f64> = cells
                .iter()
                .filter(|c| c.multiplier == m)
                .filter_map(|c| c.accuracy)
                .collect();
            (!accs.is_empty()).then(|| accs.iter().sum::<f64>() / accs.len() as f64)
        })
        .collect();
    let mut best: Option<(f64, f64)> = None;
    for (&m, acc) in plan.grid_multipliers.iter().zip(&mean_accuracy) {
        if let Some(a) = *acc {
            if best.is_none_or(|(_, b)| a >= b) {
                best = Some((m, a));
            }
        }
    }
    let (best_multiplier, _) = best.ok_or(SosError::AllCellsFailed)?;
    Ok(CvOutcome {
        best_multiplier,
        table: CvTable { cells, mean_accuracy },
    })
}

/// A classifier compared in a benchmark.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BenchMethod {
    Sos(Method),
    Knn(usize),
}

impl BenchMethod {
    pub fn name(self) -> String {
        match self {
            BenchMethod::Sos(m) => m.name().to_string(),
            BenchMethod::Knn(k) => format!("KNN-{k}"),
        }
    }

    /// The four estimators plus kNN with k = 1, 5, 10.
    pub fn standard_set() -> Vec<BenchMethod> {
        let mut v: Vec<BenchMethod> = Method::ALL.iter().map(|&m| BenchMethod::Sos(m)).collect();
        v.extend([1, 5, 10].map(BenchMethod::Knn));
        v
    }
}

/// Where each repetition's data comes from.
#[derive(Debug, Clone, PartialEq)]
pub enum BenchSource {
    /// Fresh draw per repetition, seeded `master + repetition`.
    Gaussian(GaussianSpec),
    /// The same split every repetition; only solver seeds change.
    Fixed { train: Dataset, test: Dataset },
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchPlan {
    pub methods: Vec<BenchMethod>,
    pub repetitions: usize,
    pub master_seed: u64,
    pub cv: CvPlan,
    pub q: Option<usize>,
}

/// Result of one method on one repetition.
#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub accuracy: f64,
    pub cardinality: f64,
    pub runtime_s: f64,
    /// Selected λ multiplier, for the optimal scoring methods.
    pub multiplier: Option<f64>,
    /// `‖LΘ − P‖_F` at the last outer iteration, for deflation-free fits.
    pub orth_residual: Option<f64>,
    pub predictions: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MethodRuns {
    pub name: String,
    /// One entry per repetition; `Err` holds the failure message.
    pub runs: Vec<std::result::Result<RunRecord, String>>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeanVar {
    pub mean: f64,
    pub variance: f64,
}

impl MeanVar {
    /// Mean and `n − 1` sample variance; variance is 0 for a single value.
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return MeanVar {
                mean: f64::NAN,
                variance: f64::NAN,
            };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let variance = if n < 2 {
            0.0
        } else {
            values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64
        };
        MeanVar { mean, variance }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MethodSummary {
    pub name: String,
    pub accuracy: MeanVar,
    pub runtime: MeanVar,
    pub cardinality: MeanVar,
    pub failures: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    pub repetitions: usize,
    pub methods: Vec<MethodRuns>,
    pub summaries: Vec<MethodSummary>,
    /// Integer-encoded prediction cosine, averaged over repetitions.
    /// Diagonal entries compare a method with itself across repetitions.
    pub cosine: Vec<Vec<f64>>,
    /// Same layout with one-hot encoded predictions.
    pub cosine_one_hot: Vec<Vec<f64>>,
}

fn cosine_matrix(methods: &[MethodRuns], repetitions: usize, f: fn(&[usize], &[usize]) -> f64) -> Vec<Vec<f64>> {
    let m = methods.len();
    let preds = |a: usize, r: usize| methods[a].runs[r].as_ref().ok().map(|rec| rec.predictions.as_slice());
    let mut out = vec![vec![f64::NAN; m]; m];
    for a in 0..m {
        for b in a..m {
            let mut vals = Vec::new();
            if a == b {
                if repetitions == 1 {
                    vals.push(1.0);
                }
                for r in 0..repetitions {
                    for s in r + 1..repetitions {
                        if let (Some(x), Some(y)) = (preds(a, r), preds(a, s)) {
                            if x.len() == y.len() {
                                vals.push(f(x, y));
                            }
                        }
                    }
                }
            } else {
                for r in 0..repetitions {
                    if let (Some(x), Some(y)) = (preds(a, r), preds(b, r)) {
                        vals.push(f(x, y));
                    }
                }
            }
            if !vals.is_empty() {
                let v = vals.iter().sum::<f64>() / vals.len() as f64;
                out[a][b] = v;
                out[b][a] = v;
            }
        }
    }
    out
}

impl BenchReport {
    pub fn from_runs(methods: Vec<MethodRuns>, repetitions: usize) -> Self {
        let summaries = methods
            .iter()
            .map(|m| {
                let ok: Vec<&RunRecord> = m.runs.iter().filter_map(|r| r.as_ref().ok()).collect();
                let pick = |f: fn(&RunRecord) -> f64| MeanVar::of(&ok.iter().map(|r| f(r)).collect::<Vec<_>>());
                MethodSummary {
                    name: m.name.clone(),
                    accuracy: pick(|r| r.accuracy),
                    runtime: pick(|r| r.runtime_s),
                    cardinality: pick(|r| r.cardinality),
                    failures: m.runs.len() - ok.len(),
                }
            })
            .collect();
        let cosine = cosine_matrix(&methods, repetitions, prediction_cosine);
        let cosine_one_hot = cosine_matrix(&methods, repetitions, prediction_cosine_one_hot);
        BenchReport {
            repetitions,
            methods,
            summaries,
            cosine,
            cosine_one_hot,
        }
    }

    pub fn summary(&self, name: &str) -> Option<&MethodSummary> {
        self.summaries.iter().find(|s| s.name == name)
    }

    /// Tab-separated table, one column per method and one row per measure,
    /// each cell `mean (variance)`.
    pub fn table(&self, include_runtime: bool) -> String {
        let mut out = String::from("measure");
        for s in &self.summaries {
            let _ = write!(out, "\t{}", s.name);
        }
        out.push('\n');
        let mut row = |label: &str, f: fn(&MethodSummary) -> MeanVar| {
            out.push_str(label);
            for s in &self.summaries {
                let mv = f(s);
                let _ = write!(out, "\t{:.3} ({:.3})", mv.mean, mv.variance);
            }
            out.push('\n');
        };
        row("accuracy", |s| s.accuracy);
        if include_runtime {
            row("runtime_s", |s| s.runtime);
        }
        row("cardinality", |s| s.cardinality);
        out
    }

    /// `key=value` lines with full precision.
    pub fn key_values(&self, include_runtime: bool) -> String {
        let mut out = format!("repetitions={}\n", self.repetitions);
        for s in &self.summaries {
            let mut kv = |measure: &str, mv: MeanVar| {
                let _ = writeln!(out, "{}.{measure}.mean={:.16e}", s.name, mv.mean);
                let _ = writeln!(out, "{}.{measure}.variance={:.16e}", s.name, mv.variance);
            };
            kv("accuracy", s.accuracy);
            if include_runtime {
                kv("runtime_s", s.runtime);
            }
            kv("cardinality", s.cardinality);
            let _ = writeln!(out, "{}.failures={}", s.name, s.failures);
        }
        out
    }

    /// Per-repetition values, one row per (method, repetition).
    pub fn raw(&self, include_runtime: bool) -> String {
        let mut out = String::from("method\trepetition\taccuracy\tcardinality\tmultiplier");
        if include_runtime {
            out.push_str("\truntime_s");
        }
        out.push_str("\terror\n");
        for m in &self.methods {
            for (r, run) in m.runs.iter().enumerate() {
                match run {
                    Ok(rec) => {
                        let mult = rec.multiplier.map(|v| format!("{v:.16e}")).unwrap_or_default();
                        let _ = write!(out, "{}\t{r}\t{:.16e}\t{:.16e}\t{mult}", m.name, rec.accuracy, rec.cardinality);
                        if include_runtime {
                            let _ = write!(out, "\t{:.16e}", rec.runtime_s);
                        }
                        out.push_str("\t\n");
                    }
                    Err(e) => {
                        let _ = write!(out, "{}\t{r}\t\t\t", m.name);
                        if include_runtime {
                            out.push('\t');
                        }
                        let _ = writeln!(out, "\t{}", e.replace(['\t', '\n'], " "));
                    }
                }
            }
        }
        out
    }

    /// The cosine matrix with method names as header row and column.
    pub fn cosine_table(&self, one_hot: bool) -> String {
        let mat = if one_hot { &self.cosine_one_hot } else { &self.cosine };
        let mut out = String::from("method");
        for s in &self.summaries {
            let _ = write!(out, "\t{}", s.name);
        }
        out.push('\n');
        for (s, row) in self.summaries.iter().zip(mat) {
            out.push_str(&s.name);
            for v in row {
                let _ = write!(out, "\t{v:.16e}");
            }
            out.push('\n');
        }
        out
    }
}

fn run_method(
    method: BenchMethod,
    train: &Dataset,
    test: &Dataset,
    cfg: &SolverConfig,
    plan: &BenchPlan,
) -> Result<RunRecord> {
    let start = Instant::now();
    match method {
        BenchMethod::Sos(m) => {
            let cv = cross_validate(train, cfg, &plan.cv, m, plan.q)?;
            let fit_cfg = SolverConfig {
                lambda: LambdaChoice::Auto(cv.best_multiplier),
                ..cfg.clone()
            };
            let (clf, trace) = Classifier::fit(train, &fit_cfg, plan.q, m)?;
            let orth_residual = m.is_deflation_free().then(|| trace.orth_residual.last().copied()).flatten();
            let predictions = clf.predict(&test.x)?;
            let metrics = classify::metrics(&predictions, &test.labels, &clf.model.beta);
            Ok(RunRecord {
                accuracy: metrics.accuracy,
                cardinality: metrics.cardinality,
                runtime_s: start.elapsed().as_secs_f64(),
                multiplier: Some(cv.best_multiplier),
                orth_residual,
                predictions,
            })
        }
        BenchMethod::Knn(k) => {
            let (train_x, means) = center_columns(&train.x);
            let test_x = center_with(&test.x, &means);
            let predictions = knn_predict(&train_x, &train.labels, &test_x, k)?;
            Ok(RunRecord {
                accuracy: classify::accuracy(&predictions, &test.labels),
                cardinality: 1.0,
                runtime_s: start.elapsed().as_secs_f64(),
                multiplier: None,
                orth_residual: None,
                predictions,
            })
        }
    }
}

/// Repeats CV, fit and test evaluation for every method. Repetition `r`
/// uses seed `master_seed + r` for data generation and solver starts.
/// Failures are recorded per cell and never abort the run.
pub fn run_benchmark(source: &BenchSource, plan: &BenchPlan, cfg: &SolverConfig) -> Result<BenchReport> {
    if plan.repetitions == 0 {
        return Err(SosError::InvalidInput("at least one repetition is required".into()));
    }
    if plan.methods.is_empty() {
        return Err(SosError::InvalidInput("no methods to benchmark".into()));
    }
    plan.cv.validate()?;
    let mut methods: Vec<MethodRuns> = plan
        .methods
        .iter()
        .map(|m| MethodRuns {
            name: m.name(),
            runs: Vec::with_capacity(plan.repetitions),
        })
        .collect();
    for r in 0..plan.repetitions {
        let seed = plan.master_seed.wrapping_add(r as u64);
        let data = match source {
            BenchSource::Gaussian(spec) => generate_gaussians(&GaussianSpec { seed, ..spec.clone() }),
            BenchSource::Fixed { train, test } => Ok((train.clone(), test.clone())),
        };
        let rep_cfg = SolverConfig { seed, ..cfg.clone() };
        for (slot, &method) in methods.iter_mut().zip(&plan.methods) {
            let outcome = data
                .as_ref()
                .map_err(|e| e.to_string())
                .and_then(|(train, test)| run_method(method, train, test, &rep_cfg, plan).map_err(|e| e.to_string()));
            if let Err(e) = &outcome {
                log::warn!("{} repetition {r}: {e}", slot.name);
            }
            slot.runs.push(outcome);
        }
    }
    Ok(BenchReport::from_runs(methods, plan.repetitions))
}
