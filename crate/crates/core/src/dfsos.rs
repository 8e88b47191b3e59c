//! Deflation-free sparse optimal scoring.
//!
//! All `q` scoring/discriminant pairs are estimated together under the single
//! constraint `(1/n)ΘᵀYᵀYΘ = I`. The constraint is split off through an
//! auxiliary `P = LΘ` with orthonormal columns and enforced by Bregman
//! iteration:
//!
//! 1. each scoring column solves a small equality-constrained QP,
//! 2. each discriminant column solves an elastic-net problem,
//! 3. `P` is the nearest matrix with orthonormal columns to `LΘ + B`,
//! 4. the Bregman variable accumulates the residual, `B ← B + LΘ − P`,
//! 5. the penalty `ρ` grows whenever the residual stalls.
//!
//! `L` is either `Y/√n` (n×K) or the K×K diagonal `diag(√nₖ)/√n`; both satisfy
//! `LᵀL = YᵀY/n`, so the two splittings share every fixed point.

use std::time::Instant;

use nalgebra::{Cholesky, DMatrix, DVector, SVD};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::deflation::canonical_sign;
use crate::enet::{self, EnetProblem};
use crate::error::{Result, SosError};
use crate::linalg::{relative_change, shift_diagonal, sym_inverse_sqrt};
use crate::model::{
    sos_objective, Dataset, FitTrace, IndicatorMatrix, LambdaChoice, Method, SolverConfig, SosModel,
};

/// Resampling attempts before [`init_theta`] gives up.
pub const INIT_RETRIES: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitKind {
    /// `L = Y/√n`.
    V1,
    /// `L = diag(√n₁, …, √n_K)/√n`.
    V2,
}

impl SplitKind {
    pub fn method(self) -> Method {
        match self {
            SplitKind::V1 => Method::DfsosV1,
            SplitKind::V2 => Method::DfsosV2,
        }
    }
}

/// The splitting matrix `L` for one dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitVariant {
    pub kind: SplitKind,
    pub l: DMatrix<f64>,
}

impl SplitVariant {
    pub fn new(kind: SplitKind, indicator: &IndicatorMatrix) -> Self {
        let l = match kind {
            SplitKind::V1 => &indicator.y / (indicator.n() as f64).sqrt(),
            SplitKind::V2 => DMatrix::from_diagonal(&indicator.d.map(f64::sqrt)),
        };
        SplitVariant { kind, l }
    }

    pub fn apply(&self, theta: &DMatrix<f64>) -> DMatrix<f64> {
        &self.l * theta
    }
}

/// Iterates of the Bregman scheme.
#[derive(Debug, Clone, PartialEq)]
pub struct BregmanState {
    pub theta: DMatrix<f64>,
    pub beta: DMatrix<f64>,
    pub p: DMatrix<f64>,
    /// Bregman (scaled dual) variable, same shape as `p`.
    pub b: DMatrix<f64>,
    pub rho: f64,
    /// Residual level the penalty schedule is trying to beat.
    pub v_track: f64,
}

impl BregmanState {
    /// `B⁰ = 0`, `P⁰ = LΘ⁰`, `v₀ = 2‖P⁰‖²_F`.
    pub fn new(split: &SplitVariant, theta: DMatrix<f64>, beta: DMatrix<f64>, rho0: f64) -> Self {
        let p = split.apply(&theta);
        let b = DMatrix::zeros(p.nrows(), p.ncols());
        let v_track = 2.0 * p.norm_squared();
        BregmanState {
            theta,
            beta,
            p,
            b,
            rho: rho0,
            v_track,
        }
    }

    /// `‖LΘ − P‖²_F`.
    pub fn residual_squared(&self, split: &SplitVariant) -> f64 {
        (split.apply(&self.theta) - &self.p).norm_squared()
    }
}

/// Penalty schedule step: with `v` the current residual, either record the
/// progress (`v < η·v_track`) or multiply `ρ` by `σ`. Returns `(ρ, v_track)`.
pub fn next_rho(rho: f64, v_track: f64, v: f64, eta: f64, sigma: f64) -> (f64, f64) {
    if v < eta * v_track {
        (rho, v)
    } else {
        (sigma * rho, v_track)
    }
}

/// Applies [`next_rho`] to a state using its current residual.
pub fn rho_schedule(state: &mut BregmanState, split: &SplitVariant, eta: f64, sigma: f64) {
    let v = state.residual_squared(split);
    let (rho, v_track) = next_rho(state.rho, state.v_track, v, eta, sigma);
    state.rho = rho;
    state.v_track = v_track;
}

/// Minimizes `‖Yθ − Xβ‖² + (ρ/2)‖Lθ − (P − B)‖²` subject to `1ᵀYᵀYθ = 0`.
///
/// The KKT system is
///
/// ```text
/// [ (2 + ρ/n)YᵀY   −YᵀY1 ] [θ]   [ 2YᵀXβ + ρLᵀ(P − B) ]
/// [ 1ᵀYᵀY            0   ] [v] = [ 0                  ]
/// ```
///
/// and since `YᵀY = diag(nₖ)` it is solved in closed form:
/// `v = −1ᵀr/n`, `θ = (diag(nₖ)⁻¹r + v1) / (2 + ρ/n)`.
/// Returns `(θ, v)`.
pub fn theta_update_kkt(
    indicator: &IndicatorMatrix,
    xb: &DVector<f64>,
    split: &SplitVariant,
    p_col: &DVector<f64>,
    b_col: &DVector<f64>,
    rho: f64,
) -> Result<(DVector<f64>, f64)> {
    if xb.len() != indicator.n() || p_col.len() != split.l.nrows() || b_col.len() != p_col.len() {
        return Err(SosError::ShapeMismatch(format!(
            "Xβ {}, P column {}, B column {}, L {}x{}",
            xb.len(),
            p_col.len(),
            b_col.len(),
            split.l.nrows(),
            split.l.ncols()
        )));
    }
    if !(rho > 0.0) {
        return Err(SosError::InvalidInput(format!("rho must be positive, got {rho}")));
    }
    let rhs = indicator.y.tr_mul(xb) * 2.0 + split.l.tr_mul(&(p_col - b_col)) * rho;
    Ok(solve_kkt_closed_form(indicator, &rhs, rho))
}

fn solve_kkt_closed_form(indicator: &IndicatorMatrix, rhs: &DVector<f64>, rho: f64) -> (DVector<f64>, f64) {
    let n = indicator.n() as f64;
    let v = -rhs.sum() / n;
    let c = 2.0 + rho / n;
    let theta = DVector::from_fn(rhs.len(), |k, _| {
        (rhs[k] / indicator.class_counts[k] as f64 + v) / c
    });
    (theta, v)
}

/// Scoring update for every column at once.
pub fn theta_update_all(
    indicator: &IndicatorMatrix,
    x: &DMatrix<f64>,
    beta: &DMatrix<f64>,
    split: &SplitVariant,
    p: &DMatrix<f64>,
    b: &DMatrix<f64>,
    rho: f64,
) -> DMatrix<f64> {
    let rhs = indicator.y.tr_mul(&(x * beta)) * 2.0 + split.l.tr_mul(&(p - b)) * rho;
    let mut theta = DMatrix::zeros(rhs.nrows(), rhs.ncols());
    for (i, col) in rhs.column_iter().enumerate() {
        let (t, _) = solve_kkt_closed_form(indicator, &col.into_owned(), rho);
        theta.set_column(i, &t);
    }
    theta
}

/// Column-separable elastic-net update of `B`, warm-started from `beta_prev`.
/// Columns are solved in parallel.
#[allow(clippy::too_many_arguments)]
pub fn beta_update(
    x: &DMatrix<f64>,
    indicator: &IndicatorMatrix,
    theta: &DMatrix<f64>,
    gamma: f64,
    lambdas: &ColumnLambdas,
    beta_prev: &DMatrix<f64>,
    cfg: &SolverConfig,
    lipschitz: f64,
) -> Result<DMatrix<f64>> {
    if theta.iter().any(|v| !v.is_finite()) {
        return Err(SosError::NonFiniteEncountered("scoring matrix"));
    }
    let q = theta.ncols();
    let columns = (0..q)
        .into_par_iter()
        .map(|i| {
            let target = &indicator.y * theta.column(i);
            let prob = EnetProblem::new(x, &target, gamma, lambdas.for_column(i))?;
            let warm = beta_prev.column(i).into_owned();
            enet::apg_solve_with_step(&prob, &warm, cfg.tol_inner_beta, cfg.max_inner_beta, lipschitz)
                .map(|s| s.beta)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(DMatrix::from_columns(&columns))
}

/// Outcome of the orthonormal projection.
#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    pub p: DMatrix<f64>,
    /// Smallest singular value of `LΘ + B` fell below 1e-12, so the
    /// minimizer is not unique and the SVD's choice was taken.
    pub rank_deficient: bool,
}

/// Nearest matrix with orthonormal columns to `M`, i.e. `UVᵀ` from the thin SVD.
pub fn nearest_orthonormal(m: &DMatrix<f64>) -> Result<Projection> {
    if m.iter().any(|v| !v.is_finite()) {
        return Err(SosError::NonFiniteEncountered("P-update input"));
    }
    if m.nrows() < m.ncols() {
        return Err(SosError::ShapeMismatch(format!(
            "{}x{} has more columns than rows",
            m.nrows(),
            m.ncols()
        )));
    }
    let svd = SVD::new(m.clone(), true, true);
    let rank_deficient = svd.singular_values.min() < 1e-12;
    let u = svd.u.expect("requested U");
    let v_t = svd.v_t.expect("requested Vᵀ");
    Ok(Projection {
        p: u * v_t,
        rank_deficient,
    })
}

/// `P = argmin ‖P − (LΘ + B)‖_F` over matrices with orthonormal columns.
pub fn p_update(split: &SplitVariant, theta: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<Projection> {
    nearest_orthonormal(&(split.apply(theta) + b))
}

/// `B ← B + LΘ − P`.
pub fn dual_update(
    b_prev: &DMatrix<f64>,
    split: &SplitVariant,
    theta: &DMatrix<f64>,
    p: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let l_theta = split.apply(theta);
    if b_prev.shape() != l_theta.shape() || p.shape() != l_theta.shape() {
        return Err(SosError::ShapeMismatch(format!(
            "B {:?}, LΘ {:?}, P {:?}",
            b_prev.shape(),
            l_theta.shape(),
            p.shape()
        )));
    }
    Ok(b_prev + l_theta - p)
}

/// Random `Θ⁰` (K×q) with `Θ⁰ᵀDΘ⁰ = I` and every column D-orthogonal to `1`,
/// by Gram–Schmidt in the D inner product against `[1, θ₁, …]`.
pub fn init_theta(k: usize, q: usize, d: &DVector<f64>, seed: u64) -> Result<DMatrix<f64>> {
    if d.len() != k {
        return Err(SosError::ShapeMismatch(format!("D has {} entries, K = {k}", d.len())));
    }
    if q == 0 || q + 1 > k {
        return Err(SosError::InvalidInput(format!("q = {q} must lie in 1..={}", k.saturating_sub(1))));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut basis = DMatrix::from_element(k, 1, 1.0);
    let mut theta = DMatrix::zeros(k, q);
    for i in 0..q {
        let mut accepted = None;
        for _ in 0..INIT_RETRIES {
            let u = DVector::from_fn(k, |_, _| StandardNormal.sample(&mut rng));
            let mut t: DVector<f64> = u.clone();
            for _ in 0..2 {
                let coeffs = basis.tr_mul(&t.component_mul(d));
                t -= &basis * coeffs;
            }
            let a = t.component_mul(d).dot(&t);
            let scale = u.component_mul(d).dot(&u);
            if a > 1e-10 * scale {
                accepted = Some(t / a.sqrt());
                break;
            }
        }
        let col = accepted.ok_or(SosError::RankCollapse(INIT_RETRIES))?;
        theta.set_column(i, &col);
        basis = basis.insert_column(i + 1, 0.0);
        basis.set_column(i + 1, &col);
    }
    Ok(theta)
}

/// Ridge solution `(XᵀX + γI)⁻¹XᵀYΘ` through the n×n system
/// `I + XXᵀ/γ`, never forming the p×p matrix.
pub fn init_beta(
    x: &DMatrix<f64>,
    indicator: &IndicatorMatrix,
    theta: &DMatrix<f64>,
    gamma: f64,
) -> Result<DMatrix<f64>> {
    if !(gamma > 0.0) {
        return Err(SosError::InvalidInput(format!("gamma must be positive, got {gamma}")));
    }
    if x.nrows() != indicator.n() || theta.nrows() != indicator.classes() {
        return Err(SosError::ShapeMismatch(format!(
            "X {}x{}, Y {}x{}, Theta {}x{}",
            x.nrows(),
            x.ncols(),
            indicator.n(),
            indicator.classes(),
            theta.nrows(),
            theta.ncols()
        )));
    }
    let m = x.tr_mul(&(&indicator.y * theta));
    let xm = x * &m;
    let mut core = x * x.transpose() / gamma;
    shift_diagonal(&mut core, 1.0);
    let chol = Cholesky::new(core).ok_or(SosError::FactorizationFailure("I + XXᵀ/γ"))?;
    let v = chol.solve(&xm);
    Ok((m - x.tr_mul(&v) / gamma) / gamma)
}

/// Per-column values `(βᵢᵀ(XᵀX + γI)βᵢ − 2βᵢᵀXᵀYθᵢ, ‖βᵢ‖₁)` at the ridge solution.
fn ridge_lambda_terms(
    x: &DMatrix<f64>,
    indicator: &IndicatorMatrix,
    theta: &DMatrix<f64>,
    gamma: f64,
) -> Result<Vec<(f64, f64)>> {
    let beta = init_beta(x, indicator, theta, gamma)?;
    let xb = x * &beta;
    let yt = &indicator.y * theta;
    Ok((0..theta.ncols())
        .map(|i| {
            let b = beta.column(i);
            let quad = xb.column(i).norm_squared() + gamma * b.norm_squared();
            let cross = 2.0 * xb.column(i).dot(&yt.column(i));
            (quad - cross, b.lp_norm(1))
        })
        .collect())
}

/// λ bound guaranteeing a nontrivial β-subproblem solution at `Θ`.
///
/// The bound's numerator is nonpositive at the ridge minimizer, so its
/// magnitude is returned; at that λ the ridge solution has exactly the
/// objective of `β = 0`. Returns `+∞` when the ridge solution vanishes.
pub fn lambda_max(x: &DMatrix<f64>, indicator: &IndicatorMatrix, theta: &DMatrix<f64>, gamma: f64) -> Result<f64> {
    let terms = ridge_lambda_terms(x, indicator, theta, gamma)?;
    let numer: f64 = terms.iter().map(|t| t.0).sum();
    let l1: f64 = terms.iter().map(|t| t.1).sum();
    Ok(bound_from_terms(numer, l1))
}

/// [`lambda_max`] evaluated column by column, for per-column ℓ1 weights.
pub fn lambda_max_columns(
    x: &DMatrix<f64>,
    indicator: &IndicatorMatrix,
    theta: &DMatrix<f64>,
    gamma: f64,
) -> Result<Vec<f64>> {
    Ok(ridge_lambda_terms(x, indicator, theta, gamma)?
        .into_iter()
        .map(|(numer, l1)| bound_from_terms(numer, l1))
        .collect())
}

fn bound_from_terms(numer: f64, l1: f64) -> f64 {
    if l1 == 0.0 {
        log::warn!("ridge solution is zero; every lambda yields the trivial solution");
        return f64::INFINITY;
    }
    if numer > 0.0 {
        log::warn!("lambda bound numerator is positive ({numer:e}); using its magnitude");
    }
    numer.abs() / l1
}

/// ℓ1 weights used by a fit.
#[derive(Debug, Clone, PartialEq)]
pub enum ColumnLambdas {
    Shared(f64),
    PerColumn(Vec<f64>),
}

impl ColumnLambdas {
    pub fn for_column(&self, i: usize) -> f64 {
        match self {
            ColumnLambdas::Shared(l) => *l,
            ColumnLambdas::PerColumn(ls) => ls[i],
        }
    }

    /// The shared weight, or the largest per-column one.
    pub fn shared(&self) -> f64 {
        match self {
            ColumnLambdas::Shared(l) => *l,
            ColumnLambdas::PerColumn(ls) => ls.iter().copied().fold(0.0, f64::max),
        }
    }

    pub fn per_column(&self) -> Option<Vec<f64>> {
        match self {
            ColumnLambdas::Shared(_) => None,
            ColumnLambdas::PerColumn(ls) => Some(ls.clone()),
        }
    }
}

/// Turns the configured λ into concrete weights. Automatic weights scale
/// λ_max evaluated at the seeded initial scoring matrix.
pub fn resolve_lambdas(
    x: &DMatrix<f64>,
    indicator: &IndicatorMatrix,
    cfg: &SolverConfig,
    q: usize,
) -> Result<ColumnLambdas> {
    match cfg.lambda {
        LambdaChoice::Fixed(l) => Ok(ColumnLambdas::Shared(l)),
        LambdaChoice::Auto(mult) => {
            let theta0 = init_theta(indicator.classes(), q, &indicator.d, cfg.seed)?;
            if cfg.per_column_lambda {
                let ls = lambda_max_columns(x, indicator, &theta0, cfg.gamma)?;
                Ok(ColumnLambdas::PerColumn(ls.into_iter().map(|l| mult * l).collect()))
            } else {
                Ok(ColumnLambdas::Shared(mult * lambda_max(x, indicator, &theta0, cfg.gamma)?))
            }
        }
    }
}

/// `Θ(ΘᵀDΘ)^{−1/2}`: the D-weighted polar step back onto the constraint set.
pub fn reproject_theta(indicator: &IndicatorMatrix, theta: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let gram = indicator.d_gram(theta);
    let inv_sqrt = sym_inverse_sqrt(&gram).ok_or(SosError::DegenerateDirection(gram.determinant()))?;
    Ok(theta * inv_sqrt)
}

/// Runs the Bregman iteration from a given start. `data.x` is used as given.
pub fn fit_dfsos_from(
    data: &Dataset,
    cfg: &SolverConfig,
    split_kind: SplitKind,
    theta0: DMatrix<f64>,
    lambdas: ColumnLambdas,
) -> Result<(SosModel, FitTrace)> {
    let start = Instant::now();
    cfg.validate()?;
    let indicator = data.indicator()?;
    let x = &data.x;
    let split = SplitVariant::new(split_kind, &indicator);
    let beta0 = init_beta(x, &indicator, &theta0, cfg.gamma)?;
    let lipschitz = enet::lipschitz_constant(x, cfg.gamma);

    let mut state = BregmanState::new(&split, theta0, beta0, cfg.rho0);
    let mut trace = FitTrace {
        warm_start: true,
        ..FitTrace::default()
    };
    let mut flagged_rank = false;

    for _ in 0..cfg.max_outer {
        let theta = theta_update_all(&indicator, x, &state.beta, &split, &state.p, &state.b, state.rho);
        let beta = beta_update(x, &indicator, &theta, cfg.gamma, &lambdas, &state.beta, cfg, lipschitz)?;
        let proj = p_update(&split, &theta, &state.b)?;
        if proj.rank_deficient && !flagged_rank {
            flagged_rank = true;
            trace.warnings.push("P-update input was rank deficient".to_string());
        }
        let b = dual_update(&state.b, &split, &theta, &proj.p)?;

        let change = relative_change(&theta, &state.theta).max(relative_change(&beta, &state.beta));
        state.theta = theta;
        state.beta = beta;
        state.p = proj.p;
        state.b = b;
        rho_schedule(&mut state, &split, cfg.eta, cfg.sigma);

        let residual = state.residual_squared(&split).sqrt();
        let objective = objective_with(x, &indicator, &state.theta, &state.beta, cfg.gamma, &lambdas)?;
        if !objective.is_finite() {
            return Err(SosError::NonFiniteEncountered("deflation-free objective"));
        }
        trace.push(0, objective, residual, state.rho);

        if change < cfg.tol_outer && residual < cfg.tol_outer {
            trace.converged = true;
            break;
        }
    }
    if !trace.converged {
        trace.warnings.push(
            SosError::NotConverged {
                iterations: trace.iterations,
            }
            .to_string(),
        );
    }

    let mut theta = reproject_theta(&indicator, &state.theta)?;
    let mut beta = state.beta;
    for i in 0..theta.ncols() {
        let mut t = theta.column(i).into_owned();
        let mut b = beta.column(i).into_owned();
        canonical_sign(&mut t, &mut b);
        theta.set_column(i, &t);
        beta.set_column(i, &b);
    }
    trace.wall_time_s = start.elapsed().as_secs_f64();
    let model = SosModel {
        theta,
        beta,
        lambda: lambdas.shared(),
        gamma: cfg.gamma,
        method: split_kind.method(),
        column_lambdas: lambdas.per_column(),
    };
    Ok((model, trace))
}

/// Deflation-free fit with the seeded Gram–Schmidt start.
pub fn fit_dfsos(data: &Dataset, cfg: &SolverConfig, q: usize, split_kind: SplitKind) -> Result<(SosModel, FitTrace)> {
    let indicator = data.indicator()?;
    let k = indicator.classes();
    if q == 0 || q + 1 > k {
        return Err(SosError::InvalidInput(format!("q = {q} must lie in 1..={}", k.saturating_sub(1))));
    }
    let theta0 = init_theta(k, q, &indicator.d, cfg.seed)?;
    let lambdas = resolve_lambdas(&data.x, &indicator, cfg, q)?;
    fit_dfsos_from(data, cfg, split_kind, theta0, lambdas)
}

fn objective_with(
    x: &DMatrix<f64>,
    indicator: &IndicatorMatrix,
    theta: &DMatrix<f64>,
    beta: &DMatrix<f64>,
    gamma: f64,
    lambdas: &ColumnLambdas,
) -> Result<f64> {
    match lambdas {
        ColumnLambdas::Shared(l) => sos_objective(x, &indicator.y, theta, beta, gamma, *l),
        ColumnLambdas::PerColumn(ls) => {
            let smooth = sos_objective(x, &indicator.y, theta, beta, gamma, 0.0)?;
            let l1: f64 = beta
                .column_iter()
                .zip(ls)
                .map(|(c, l)| l * c.lp_norm(1))
                .sum();
            Ok(smooth + l1)
        }
    }
}
