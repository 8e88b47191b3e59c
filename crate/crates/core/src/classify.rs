//! Nearest-centroid and k-nearest-neighbour classification, plus the
//! evaluation metrics.

use nalgebra::{DMatrix, DVector};

use crate::deflation::{fit_deflation, BetaSolver};
use crate::dfsos::{fit_dfsos, SplitKind};
use crate::error::{Result, SosError};
use crate::model::{center_columns, center_with, Dataset, FitTrace, Method, SolverConfig, SosModel};

/// Class means in discriminant space together with the projection that
/// produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct CentroidModel {
    /// K×q, row `k - 1` is the centroid of class `k`.
    pub centroids: DMatrix<f64>,
    /// p×q.
    pub beta: DMatrix<f64>,
    /// Training column means, subtracted before projecting.
    pub column_means: DVector<f64>,
}

impl CentroidModel {
    pub fn classes(&self) -> usize {
        self.centroids.nrows()
    }

    pub fn project(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        project(x, &self.beta, &self.column_means)
    }

    pub fn predict(&self, x: &DMatrix<f64>) -> Result<Vec<usize>> {
        Ok(predict_nearest_centroid(self, &self.project(x)?))
    }
}

/// `(X − 1·meansᵀ)·B`.
pub fn project(x: &DMatrix<f64>, beta: &DMatrix<f64>, column_means: &DVector<f64>) -> Result<DMatrix<f64>> {
    if x.ncols() != beta.nrows() || column_means.len() != x.ncols() {
        return Err(SosError::ShapeMismatch(format!(
            "data has {} features, projection {}, means {}",
            x.ncols(),
            beta.nrows(),
            column_means.len()
        )));
    }
    Ok(center_with(x, column_means) * beta)
}

/// Per-class means of the score rows.
pub fn fit_centroids(
    scores: &DMatrix<f64>,
    labels: &[usize],
    classes: usize,
    beta: DMatrix<f64>,
    column_means: DVector<f64>,
) -> Result<CentroidModel> {
    if scores.nrows() != labels.len() || scores.ncols() != beta.ncols() {
        return Err(SosError::ShapeMismatch(format!(
            "scores {}x{}, {} labels, projection with {} columns",
            scores.nrows(),
            scores.ncols(),
            labels.len(),
            beta.ncols()
        )));
    }
    let mut sums = DMatrix::zeros(classes, scores.ncols());
    let mut counts = vec![0usize; classes];
    for (row, &label) in scores.row_iter().zip(labels) {
        if label == 0 || label > classes {
            return Err(SosError::LabelOutOfRange { label, classes });
        }
        let mut target = sums.row_mut(label - 1);
        target += row;
        counts[label - 1] += 1;
    }
    for (k, &c) in counts.iter().enumerate() {
        if c == 0 {
            return Err(SosError::EmptyClass(k + 1));
        }
        sums.row_mut(k).unscale_mut(c as f64);
    }
    Ok(CentroidModel {
        centroids: sums,
        beta,
        column_means,
    })
}

/// Closest centroid per score row; ties go to the smaller class.
pub fn predict_nearest_centroid(model: &CentroidModel, scores: &DMatrix<f64>) -> Vec<usize> {
    scores
        .row_iter()
        .map(|row| {
            let mut best = (f64::INFINITY, 0);
            for (k, c) in model.centroids.row_iter().enumerate() {
                let dist = (row - c).norm_squared();
                if dist < best.0 {
                    best = (dist, k);
                }
            }
            best.1 + 1
        })
        .collect()
}

/// Majority vote among the `k` nearest training rows. Ties in the vote go
/// to the smaller class; ties in distance go to the earlier training row.
pub fn knn_predict(
    x_train: &DMatrix<f64>,
    labels: &[usize],
    x_test: &DMatrix<f64>,
    k: usize,
) -> Result<Vec<usize>> {
    let n = x_train.nrows();
    if k == 0 || k > n {
        return Err(SosError::InvalidInput(format!("k = {k} with {n} training rows")));
    }
    if labels.len() != n || x_test.ncols() != x_train.ncols() {
        return Err(SosError::ShapeMismatch(format!(
            "train {}x{} with {} labels, test has {} features",
            n,
            x_train.ncols(),
            labels.len(),
            x_test.ncols()
        )));
    }
    let classes = labels.iter().copied().max().unwrap_or(0);
    let train_sq: Vec<f64> = x_train.row_iter().map(|r| r.norm_squared()).collect();
    let cross = x_test * x_train.transpose();
    Ok(x_test
        .row_iter()
        .enumerate()
        .map(|(t, row)| {
            let row_sq = row.norm_squared();
            let mut dist: Vec<(f64, usize)> = (0..n)
                .map(|i| ((row_sq + train_sq[i] - 2.0 * cross[(t, i)]).max(0.0), i))
                .collect();
            dist.select_nth_unstable_by(k - 1, |a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let mut votes = vec![0usize; classes + 1];
            for &(_, i) in &dist[..k] {
                votes[labels[i]] += 1;
            }
            let mut best = 1;
            for c in 2..=classes {
                if votes[c] > votes[best] {
                    best = c;
                }
            }
            best
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    pub accuracy: f64,
    /// Fraction of features with a nonzero row in the projection.
    pub cardinality: f64,
}

pub fn accuracy(pred: &[usize], truth: &[usize]) -> f64 {
    assert_eq!(pred.len(), truth.len(), "prediction and truth lengths differ");
    if pred.is_empty() {
        return 0.0;
    }
    let hits = pred.iter().zip(truth).filter(|(a, b)| a == b).count();
    hits as f64 / pred.len() as f64
}

pub fn cardinality(beta: &DMatrix<f64>) -> f64 {
    if beta.nrows() == 0 {
        return 0.0;
    }
    let used = beta.row_iter().filter(|r| r.iter().any(|&v| v != 0.0)).count();
    used as f64 / beta.nrows() as f64
}

/// Nonzero entries of `B` over `p·q`.
pub fn entry_density(beta: &DMatrix<f64>) -> f64 {
    if beta.is_empty() {
        return 0.0;
    }
    beta.iter().filter(|&&v| v != 0.0).count() as f64 / beta.len() as f64
}

pub fn metrics(pred: &[usize], truth: &[usize], beta: &DMatrix<f64>) -> Metrics {
    Metrics {
        accuracy: accuracy(pred, truth),
        cardinality: cardinality(beta),
    }
}

/// Cosine between the label vectors read as integers.
pub fn prediction_cosine(a: &[usize], b: &[usize]) -> f64 {
    assert_eq!(a.len(), b.len(), "prediction lengths differ");
    let dot: f64 = a.iter().zip(b).map(|(&x, &y)| (x * y) as f64).sum();
    let na: f64 = a.iter().map(|&x| (x * x) as f64).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|&x| (x * x) as f64).sum::<f64>().sqrt();
    assert!(na > 0.0 && nb > 0.0, "labels start at 1");
    dot / (na * nb)
}

/// Cosine between the stacked one-hot encodings, i.e. the agreement rate.
pub fn prediction_cosine_one_hot(a: &[usize], b: &[usize]) -> f64 {
    assert_eq!(a.len(), b.len(), "prediction lengths differ");
    if a.is_empty() {
        return 1.0;
    }
    a.iter().zip(b).filter(|(x, y)| x == y).count() as f64 / a.len() as f64
}

/// Fits one of the four estimators on already centered data.
pub fn fit_sos(data: &Dataset, cfg: &SolverConfig, q: usize, method: Method) -> Result<(SosModel, FitTrace)> {
    match method {
        Method::DeflationApg => fit_deflation(data, cfg, q, BetaSolver::Apg),
        Method::DeflationAdmm => fit_deflation(data, cfg, q, BetaSolver::Admm),
        Method::DfsosV1 => fit_dfsos(data, cfg, q, SplitKind::V1),
        Method::DfsosV2 => fit_dfsos(data, cfg, q, SplitKind::V2),
    }
}

/// A fitted model together with its nearest-centroid rule.
#[derive(Debug, Clone, PartialEq)]
pub struct Classifier {
    pub model: SosModel,
    pub centroids: CentroidModel,
}

impl Classifier {
    /// Centers (and optionally rescales) `data`, fits `method` with `q`
    /// directions (default `K − 1`), and places the class centroids.
    pub fn fit(data: &Dataset, cfg: &SolverConfig, q: Option<usize>, method: Method) -> Result<(Self, FitTrace)> {
        let q = q.unwrap_or(data.classes.saturating_sub(1));
        let (centered, means) = center_columns(&data.x);
        let mut train = data.clone();
        train.x = centered.clone();
        let scales = cfg.scaling.divisors(&centered);
        if let Some(scales) = &scales {
            for (mut col, &sd) in train.x.column_iter_mut().zip(scales.iter()) {
                col.unscale_mut(sd);
            }
        }
        let (mut model, trace) = fit_sos(&train, cfg, q, method)?;
        if let Some(scales) = &scales {
            for (mut row, &sd) in model.beta.row_iter_mut().zip(scales.iter()) {
                row.unscale_mut(sd);
            }
        }
        let scores = &centered * &model.beta;
        let centroids = fit_centroids(&scores, &data.labels, data.classes, model.beta.clone(), means)?;
        Ok((Classifier { model, centroids }, trace))
    }

    pub fn predict(&self, x: &DMatrix<f64>) -> Result<Vec<usize>> {
        self.centroids.predict(x)
    }

    pub fn evaluate(&self, test: &Dataset) -> Result<Metrics> {
        let pred = self.predict(&test.x)?;
        Ok(metrics(&pred, &test.labels, &self.model.beta))
    }
}
