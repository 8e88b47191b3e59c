//! Deflationary sparse optimal scoring: scoring/discriminant pairs are found
//! one at a time by block coordinate descent, each scoring vector constrained
//! to be D-orthogonal to the all-ones vector and to every earlier one.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dfsos::resolve_lambdas;
use crate::enet::{self, AdmmSolver, EnetProblem};
use crate::error::{Result, SosError};
use crate::model::{Dataset, FitTrace, IndicatorMatrix, Method, SolverConfig, SosModel};

/// β-subproblem solver used inside the block coordinate descent.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BetaSolver {
    Apg,
    Admm,
}

impl BetaSolver {
    pub fn method(self) -> Method {
        match self {
            BetaSolver::Apg => Method::DeflationApg,
            BetaSolver::Admm => Method::DeflationAdmm,
        }
    }
}

/// The accepted scoring directions, stored as the columns of `Q`.
#[derive(Debug, Clone)]
pub struct DeflationState {
    pub q_basis: DMatrix<f64>,
    pub d: DVector<f64>,
}

impl DeflationState {
    /// Starts with `Q = [1]`; the all-ones vector is already D-unit.
    pub fn new(indicator: &IndicatorMatrix) -> Self {
        let k = indicator.classes();
        DeflationState {
            q_basis: DMatrix::from_element(k, 1, 1.0),
            d: indicator.d.clone(),
        }
    }

    /// `(I − QQᵀD)v`, applied twice so the result stays orthogonal to working precision.
    pub fn project(&self, v: &DVector<f64>) -> DVector<f64> {
        let mut w = v.clone();
        for _ in 0..2 {
            let coeffs = self.q_basis.tr_mul(&w.component_mul(&self.d));
            w -= &self.q_basis * coeffs;
        }
        w
    }

    /// `θᵀDθ`.
    pub fn d_norm_squared(&self, v: &DVector<f64>) -> f64 {
        v.component_mul(&self.d).dot(v)
    }

    /// Largest `|θᵀDq|` over the columns `q` of `Q`.
    pub fn orthogonality_residual(&self, theta: &DVector<f64>) -> f64 {
        self.q_basis.tr_mul(&theta.component_mul(&self.d)).amax()
    }

    pub fn accept(&mut self, theta: &DVector<f64>) {
        let j = self.q_basis.ncols();
        self.q_basis = self.q_basis.clone().insert_column(j, 0.0);
        self.q_basis.set_column(j, theta);
    }

    fn normalize(&self, w: DVector<f64>) -> Result<DVector<f64>> {
        let a = self.d_norm_squared(&w);
        if !(a > 1e-14) {
            return Err(SosError::DegenerateDirection(a));
        }
        Ok(w / a.sqrt())
    }
}

/// Closed-form scoring update `θ ∝ (I − QQᵀD)D⁻¹YᵀXβ`, scaled to `θᵀDθ = 1`.
pub fn theta_update_deflation(
    state: &DeflationState,
    x: &DMatrix<f64>,
    indicator: &IndicatorMatrix,
    beta: &DVector<f64>,
) -> Result<DVector<f64>> {
    if x.ncols() != beta.len() || x.nrows() != indicator.n() {
        return Err(SosError::ShapeMismatch(format!(
            "X {}x{}, beta {}, n = {}",
            x.nrows(),
            x.ncols(),
            beta.len(),
            indicator.n()
        )));
    }
    let xb = x * beta;
    let n = indicator.n() as f64;
    // D⁻¹Yᵀv is the vector of class means of v.
    let class_means = indicator.y.tr_mul(&xb).component_div(&indicator.d) / n;
    state.normalize(state.project(&class_means))
}

/// Random start `θ⁰ ∝ (I − QQᵀD)D⁻¹z` with `z ~ U(0,1)^K`.
fn initial_theta(state: &DeflationState, seed: u64) -> Result<DVector<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut last = 0.0;
    for _ in 0..10 {
        let z = DVector::from_fn(state.d.len(), |_, _| rng.random::<f64>());
        match state.normalize(state.project(&z.component_div(&state.d))) {
            Ok(theta) => return Ok(theta),
            Err(SosError::DegenerateDirection(a)) => last = a,
            Err(e) => return Err(e),
        }
    }
    Err(SosError::DegenerateDirection(last))
}

/// Flips `θ` (and its partner `β`) so the first nonzero entry of `θ` is positive.
pub(crate) fn canonical_sign(theta: &mut DVector<f64>, beta: &mut DVector<f64>) {
    if let Some(&first) = theta.iter().find(|v| **v != 0.0) {
        if first < 0.0 {
            theta.neg_mut();
            beta.neg_mut();
        }
    }
}

enum ColumnSolver {
    Apg { lipschitz: f64 },
    Admm(AdmmSolver),
}

/// Fits `q` scoring/discriminant pairs sequentially.
///
/// `data.x` is used as given; callers center it first. A column whose
/// discriminant vector collapses to zero keeps its last feasible scoring vector
/// and a zero discriminant vector, and a warning is recorded in the trace.
pub fn fit_deflation(
    data: &Dataset,
    cfg: &SolverConfig,
    q: usize,
    solver: BetaSolver,
) -> Result<(SosModel, FitTrace)> {
    let start = Instant::now();
    cfg.validate()?;
    let k = data.classes;
    if q == 0 || q >= k.max(2) || (k < 2) {
        return Err(SosError::InvalidInput(format!("q = {q} must lie in 1..={}", k.saturating_sub(1))));
    }
    let indicator = data.indicator()?;
    let x = &data.x;
    let p = x.ncols();
    let lambdas = resolve_lambdas(x, &indicator, cfg, q)?;

    let column_solver = match solver {
        BetaSolver::Apg => ColumnSolver::Apg {
            lipschitz: enet::lipschitz_constant(x, cfg.gamma),
        },
        BetaSolver::Admm => ColumnSolver::Admm(AdmmSolver::new(x, cfg.gamma, cfg.mu_admm)?),
    };
    let solve = |target: &DVector<f64>, lambda: f64, warm: &DVector<f64>| -> Result<enet::EnetSolution> {
        match &column_solver {
            ColumnSolver::Apg { lipschitz } => {
                let prob = EnetProblem::new(x, target, cfg.gamma, lambda)?;
                enet::apg_solve_with_step(&prob, warm, cfg.tol_inner_beta, cfg.max_inner_beta, *lipschitz)
            }
            ColumnSolver::Admm(admm) => {
                admm.solve(target, lambda, warm, cfg.tol_inner_beta, cfg.max_inner_beta)
            }
        }
    };

    let mut state = DeflationState::new(&indicator);
    let mut theta_out = DMatrix::zeros(k, q);
    let mut beta_out = DMatrix::zeros(p, q);
    let mut trace = FitTrace {
        warm_start: true,
        converged: true,
        ..FitTrace::default()
    };
    let rho_column = match solver {
        BetaSolver::Apg => 0.0,
        BetaSolver::Admm => cfg.mu_admm,
    };

    for j in 0..q {
        let lambda = lambdas.for_column(j);
        let mut theta = initial_theta(&state, cfg.seed.wrapping_add(j as u64 + 1))?;
        let mut beta = DVector::zeros(p);
        let objective = |theta: &DVector<f64>, beta: &DVector<f64>| {
            let target = &indicator.y * theta;
            EnetProblem::new(x, &target, cfg.gamma, lambda).map(|prob| prob.objective(beta))
        };
        trace.push(j + 1, objective(&theta, &beta)?, state.orthogonality_residual(&theta), rho_column);

        let mut column_converged = false;
        for _ in 0..cfg.max_outer {
            let target = &indicator.y * &theta;
            let beta_new = solve(&target, lambda, &beta)?.beta;
            let theta_new = match theta_update_deflation(&state, x, &indicator, &beta_new) {
                Ok(t) => t,
                Err(SosError::DegenerateDirection(a)) => {
                    trace.warnings.push(format!(
                        "column {}: discriminant vector vanished (w'Dw = {a:e}); kept zero",
                        j + 1
                    ));
                    beta = beta_new;
                    trace.push(j + 1, objective(&theta, &beta)?, state.orthogonality_residual(&theta), rho_column);
                    column_converged = true;
                    break;
                }
                Err(e) => return Err(e),
            };
            let dtheta = (&theta_new - &theta).norm() / theta_new.norm();
            let dbeta = relative(&beta_new, &beta);
            theta = theta_new;
            beta = beta_new;
            trace.push(j + 1, objective(&theta, &beta)?, state.orthogonality_residual(&theta), rho_column);
            if dtheta.max(dbeta) < cfg.tol_outer {
                column_converged = true;
                break;
            }
        }
        if !column_converged {
            trace.converged = false;
            trace.warnings.push(format!(
                "column {} hit the iteration cap of {}",
                j + 1,
                cfg.max_outer
            ));
        }
        state.accept(&theta);
        canonical_sign(&mut theta, &mut beta);
        theta_out.set_column(j, &theta);
        beta_out.set_column(j, &beta);
    }

    trace.wall_time_s = start.elapsed().as_secs_f64();
    let model = SosModel {
        theta: theta_out,
        beta: beta_out,
        lambda: lambdas.shared(),
        gamma: cfg.gamma,
        method: solver.method(),
        column_lambdas: lambdas.per_column(),
    };
    Ok((model, trace))
}

fn relative(new: &DVector<f64>, old: &DVector<f64>) -> f64 {
    let diff = (new - old).norm();
    if diff == 0.0 {
        0.0
    } else {
        diff / new.norm().max(f64::MIN_POSITIVE)
    }
}
