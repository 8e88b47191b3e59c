//! Elastic-net penalized least squares,
//!
//! ```text
//! minimize  ‖t − Xβ‖² + γ‖β‖² + λ‖β‖₁
//! ```
//!
//! solved either by accelerated proximal gradient (FISTA with function-value
//! restart) or by ADMM on the consensus split `β = z`. Both scoring algorithms
//! call these once per discriminant column.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, SosError};

/// Power-iteration steps used to bound the largest eigenvalue of `XᵀX`.
pub const POWER_ITERATIONS: usize = 30;

/// Proximal operator of `t·|·|`.
#[inline]
pub fn soft_threshold(v: f64, t: f64) -> f64 {
    if v > t {
        v - t
    } else if v < -t {
        v + t
    } else {
        0.0
    }
}

/// One β-subproblem. `target` is `Yθ` for the column being solved.
#[derive(Debug, Clone, Copy)]
pub struct EnetProblem<'a> {
    pub x: &'a DMatrix<f64>,
    pub target: &'a DVector<f64>,
    pub gamma: f64,
    pub lambda: f64,
}

impl<'a> EnetProblem<'a> {
    pub fn new(x: &'a DMatrix<f64>, target: &'a DVector<f64>, gamma: f64, lambda: f64) -> Result<Self> {
        if x.nrows() != target.len() {
            return Err(SosError::ShapeMismatch(format!(
                "X has {} rows, target has {}",
                x.nrows(),
                target.len()
            )));
        }
        if !(gamma > 0.0) || !(lambda >= 0.0) {
            return Err(SosError::InvalidInput(format!(
                "need gamma > 0 and lambda >= 0, got {gamma}, {lambda}"
            )));
        }
        Ok(EnetProblem {
            x,
            target,
            gamma,
            lambda,
        })
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    pub fn objective(&self, beta: &DVector<f64>) -> f64 {
        let r = self.x * beta - self.target;
        r.norm_squared() + self.gamma * beta.norm_squared() + self.lambda * beta.lp_norm(1)
    }

    /// Gradient of the smooth part, `2Xᵀ(Xβ − t) + 2γβ`.
    pub fn gradient(&self, beta: &DVector<f64>) -> DVector<f64> {
        let r = self.x * beta - self.target;
        (self.x.tr_mul(&r) + beta * self.gamma) * 2.0
    }

    /// `‖2Xᵀt‖_∞`: for any λ at or above this, β = 0 is optimal.
    pub fn dead_zone(&self) -> f64 {
        (self.x.tr_mul(self.target) * 2.0).amax()
    }

    /// Largest violation of the ℓ1 subgradient optimality condition.
    pub fn optimality_residual(&self, beta: &DVector<f64>) -> f64 {
        subgradient_residual(&self.gradient(beta), beta, self.lambda)
    }
}

fn subgradient_residual(grad: &DVector<f64>, beta: &DVector<f64>, lambda: f64) -> f64 {
    grad.iter()
        .zip(beta.iter())
        .map(|(&g, &b)| {
            if b != 0.0 {
                (g + lambda * b.signum()).abs()
            } else {
                (g.abs() - lambda).max(0.0)
            }
        })
        .fold(0.0, f64::max)
}

/// Result of a β-subproblem solve. `converged == false` means the iteration
/// cap was hit and `beta` is the best iterate found; callers may accept it.
#[derive(Debug, Clone, PartialEq)]
pub struct EnetSolution {
    pub beta: DVector<f64>,
    pub iterations: usize,
    pub converged: bool,
}

impl EnetSolution {
    /// Turns an unconverged solve into `MaxIterExceeded`-style failure.
    pub fn require_converged(self) -> Result<Self> {
        if self.converged {
            Ok(self)
        } else {
            Err(SosError::MaxIterExceeded {
                iterations: self.iterations,
            })
        }
    }
}

/// Lipschitz constant `2(λ_max(XᵀX) + γ)` of the smooth part's gradient.
pub fn lipschitz_constant(x: &DMatrix<f64>, gamma: f64) -> f64 {
    2.0 * (largest_gram_eigenvalue(x) + gamma)
}

/// Power iteration on `XᵀX` from a fixed pseudo-random start.
pub fn largest_gram_eigenvalue(x: &DMatrix<f64>) -> f64 {
    let p = x.ncols();
    if p == 0 || x.nrows() == 0 {
        return 0.0;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let mut v = DVector::from_fn(p, |_, _| rng.random_range(0.5..1.5));
    v /= v.norm();
    let mut estimate = 0.0;
    for _ in 0..POWER_ITERATIONS {
        let xv = x * &v;
        let w = x.tr_mul(&xv);
        estimate = xv.norm_squared();
        let norm = w.norm();
        if norm == 0.0 {
            return 0.0;
        }
        v = w / norm;
    }
    // Rayleigh quotient of the final vector.
    estimate.max((x * &v).norm_squared())
}

/// Accelerated proximal gradient with the step size from [`lipschitz_constant`].
pub fn apg_solve(
    prob: &EnetProblem<'_>,
    beta0: &DVector<f64>,
    tol: f64,
    max_iter: usize,
) -> Result<EnetSolution> {
    let lipschitz = lipschitz_constant(prob.x, prob.gamma);
    apg_solve_with_step(prob, beta0, tol, max_iter, lipschitz)
}

/// As [`apg_solve`] with a precomputed Lipschitz estimate, so repeated solves
/// on the same `X` skip the power iteration.
///
/// Steps that would raise the composite objective are rejected: the first
/// rejection drops the momentum, a second one in a row doubles the Lipschitz
/// estimate. The returned iterate therefore never has a larger objective than
/// `beta0`.
pub fn apg_solve_with_step(
    prob: &EnetProblem<'_>,
    beta0: &DVector<f64>,
    tol: f64,
    max_iter: usize,
    lipschitz: f64,
) -> Result<EnetSolution> {
    if beta0.len() != prob.p() {
        return Err(SosError::ShapeMismatch(format!(
            "beta0 has length {}, X has {} columns",
            beta0.len(),
            prob.p()
        )));
    }
    let (x, gamma, lambda) = (prob.x, prob.gamma, prob.lambda);
    // Composite value and smooth gradient at a point, sharing one residual.
    let evaluate = |b: &DVector<f64>| {
        let r = x * b - prob.target;
        let f = r.norm_squared() + gamma * b.norm_squared() + lambda * b.lp_norm(1);
        let g = (x.tr_mul(&r) + b * gamma) * 2.0;
        (f, g)
    };

    let mut lip = lipschitz.max(f64::MIN_POSITIVE);
    let mut beta = beta0.clone();
    let (mut f, mut grad) = evaluate(&beta);
    if !f.is_finite() {
        return Err(SosError::NonFiniteEncountered("elastic-net objective"));
    }
    if subgradient_residual(&grad, &beta, lambda) <= tol {
        return Ok(EnetSolution {
            beta,
            iterations: 0,
            converged: true,
        });
    }

    let mut y = beta.clone();
    let mut grad_y = grad.clone();
    let mut t = 1.0f64;
    let mut momentum = false;

    for iter in 1..=max_iter {
        let step = 1.0 / lip;
        let candidate = DVector::from_fn(y.len(), |j, _| {
            soft_threshold(y[j] - step * grad_y[j], lambda * step)
        });
        let (f_new, grad_new) = evaluate(&candidate);
        if !f_new.is_finite() {
            return Err(SosError::NonFiniteEncountered("elastic-net objective"));
        }
        if f_new > f {
            if momentum {
                y.copy_from(&beta);
                grad_y.copy_from(&grad);
                t = 1.0;
                momentum = false;
            } else {
                lip *= 2.0;
            }
            continue;
        }

        let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
        let mom = (t - 1.0) / t_next;
        // The gradient is affine, so its value at the extrapolated point is
        // the same combination of the two known gradients.
        y = &candidate + (&candidate - &beta) * mom;
        grad_y = &grad_new + (&grad_new - &grad) * mom;
        momentum = mom > 0.0;
        t = t_next;
        beta = candidate;
        grad = grad_new;
        f = f_new;

        if subgradient_residual(&grad, &beta, lambda) <= tol {
            return Ok(EnetSolution {
                beta,
                iterations: iter,
                converged: true,
            });
        }
    }
    Ok(EnetSolution {
        beta,
        iterations: max_iter,
        converged: false,
    })
}

/// Factorization of the ADMM β-step matrix `2XᵀX + (2γ + μ)I`, reusable
/// across targets. Uses a p×p Cholesky when `n ≥ p` and the
/// Sherman–Morrison–Woodbury identity over an n×n Cholesky otherwise.
#[derive(Debug, Clone)]
pub struct AdmmSolver {
    x: DMatrix<f64>,
    gamma: f64,
    mu: f64,
    shift: f64,
    factor: AdmmFactor,
}

#[derive(Debug, Clone)]
enum AdmmFactor {
    Primal(Cholesky<f64, Dyn>),
    Woodbury(Cholesky<f64, Dyn>),
}

impl AdmmSolver {
    pub fn new(x: &DMatrix<f64>, gamma: f64, mu: f64) -> Result<Self> {
        if !(mu > 0.0) || !(gamma > 0.0) {
            return Err(SosError::InvalidInput(format!(
                "need mu > 0 and gamma > 0, got {mu}, {gamma}"
            )));
        }
        let (n, p) = x.shape();
        let shift = 2.0 * gamma + mu;
        let factor = if n >= p {
            let mut a = x.tr_mul(x) * 2.0;
            crate::linalg::shift_diagonal(&mut a, shift);
            AdmmFactor::Primal(
                Cholesky::new(a).ok_or(SosError::FactorizationFailure("ADMM normal equations"))?,
            )
        } else {
            let mut a = x * x.transpose();
            crate::linalg::shift_diagonal(&mut a, shift / 2.0);
            AdmmFactor::Woodbury(
                Cholesky::new(a).ok_or(SosError::FactorizationFailure("ADMM Woodbury core"))?,
            )
        };
        Ok(AdmmSolver {
            x: x.clone(),
            gamma,
            mu,
            shift,
            factor,
        })
    }

    fn apply_inverse(&self, rhs: &DVector<f64>) -> DVector<f64> {
        match &self.factor {
            AdmmFactor::Primal(chol) => chol.solve(rhs),
            AdmmFactor::Woodbury(chol) => {
                let inner = chol.solve(&(&self.x * rhs));
                (rhs - self.x.tr_mul(&inner)) / self.shift
            }
        }
    }

    /// Runs ADMM from `beta0` (used as the initial `z`, with zero dual).
    pub fn solve(
        &self,
        target: &DVector<f64>,
        lambda: f64,
        beta0: &DVector<f64>,
        tol: f64,
        max_iter: usize,
    ) -> Result<EnetSolution> {
        let prob = EnetProblem::new(&self.x, target, self.gamma, lambda)?;
        if beta0.len() != prob.p() {
            return Err(SosError::ShapeMismatch(format!(
                "beta0 has length {}, X has {} columns",
                beta0.len(),
                prob.p()
            )));
        }
        let mu = self.mu;
        let xt_target = self.x.tr_mul(target) * 2.0;
        let mut z = beta0.clone();
        // dual start consistent with z: the β-step fixed point needs ∇f(z) + μu = 0
        let mut u = prob.gradient(&z) / -mu;
        let mut converged = false;
        let mut iterations = max_iter;

        for iter in 1..=max_iter {
            let rhs = &xt_target + (&z - &u) * mu;
            let beta = self.apply_inverse(&rhs);
            let z_old = std::mem::replace(
                &mut z,
                DVector::from_fn(beta.len(), |j, _| soft_threshold(beta[j] + u[j], lambda / mu)),
            );
            u += &beta - &z;
            if !u.iter().all(|v| v.is_finite()) {
                return Err(SosError::NonFiniteEncountered("ADMM iterate"));
            }
            let primal = (&beta - &z).norm();
            let dual = mu * (&z - &z_old).norm();
            if primal <= tol && dual <= tol {
                converged = true;
                iterations = iter;
                break;
            }
        }

        // z carries the exact zeros. Never hand back something worse than the start.
        let beta = if prob.objective(&z) <= prob.objective(beta0) {
            z
        } else {
            beta0.clone()
        };
        Ok(EnetSolution {
            beta,
            iterations,
            converged,
        })
    }
}

/// ADMM with fixed penalty `mu` on the split `β = z`, `z` carrying the ℓ1 term.
pub fn admm_solve(
    prob: &EnetProblem<'_>,
    beta0: &DVector<f64>,
    mu: f64,
    tol: f64,
    max_iter: usize,
) -> Result<EnetSolution> {
    AdmmSolver::new(prob.x, prob.gamma, mu)?.solve(prob.target, prob.lambda, beta0, tol, max_iter)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn random_problem(seed: u64, n: usize, p: usize) -> (DMatrix<f64>, DVector<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = DMatrix::from_fn(n, p, |_, _| rng.random_range(-1.0..1.0));
        let t = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
        (x, t)
    }

    fn ridge_oracle(x: &DMatrix<f64>, t: &DVector<f64>, gamma: f64) -> DVector<f64> {
        let mut a = x.tr_mul(x);
        crate::linalg::shift_diagonal(&mut a, gamma);
        a.lu().solve(&x.tr_mul(t)).unwrap()
    }

    // Cyclic coordinate descent run to a 1e-12 change.
    fn coordinate_descent(x: &DMatrix<f64>, t: &DVector<f64>, gamma: f64, lambda: f64) -> DVector<f64> {
        let p = x.ncols();
        let mut b: DVector<f64> = DVector::zeros(p);
        for _ in 0..100_000 {
            let mut delta: f64 = 0.0;
            for j in 0..p {
                let mut partial: DVector<f64> = t.clone();
                for k in 0..p {
                    if k != j {
                        partial -= x.column(k) * b[k];
                    }
                }
                let rho = 2.0 * x.column(j).dot(&partial);
                let denom = 2.0 * x.column(j).norm_squared() + 2.0 * gamma;
                let new = soft_threshold(rho, lambda) / denom;
                delta = delta.max((new - b[j]).abs());
                b[j] = new;
            }
            if delta < 1e-12 {
                break;
            }
        }
        b
    }

    #[test]
    fn soft_threshold_examples() {
        assert_eq!(soft_threshold(3.0, 1.0), 2.0);
        assert_eq!(soft_threshold(-0.5, 1.0), 0.0);
        assert_eq!(soft_threshold(-3.0, 1.0), -2.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let v = rng.random_range(-10.0..10.0);
            assert_eq!(soft_threshold(v, 0.0), v);
        }
    }

    #[test]
    fn apg_dead_zone_gives_zero() {
        let (x, t) = random_problem(2, 8, 5);
        let bound = EnetProblem::new(&x, &t, 0.1, 0.0).unwrap().dead_zone();
        // zero satisfies the subgradient condition exactly at the bound
        let at_bound = EnetProblem::new(&x, &t, 0.1, bound).unwrap();
        assert!(at_bound.optimality_residual(&DVector::zeros(5)) <= 1e-12);
        let prob = EnetProblem::new(&x, &t, 0.1, bound * 1.01).unwrap();
        let start = DVector::from_element(5, 0.3);
        let sol = apg_solve(&prob, &start, 1e-10, 10_000).unwrap();
        assert!(sol.converged);
        assert!(sol.beta.iter().all(|&b| b == 0.0));
        // and just below the bound zero is no longer optimal
        let below = EnetProblem::new(&x, &t, 0.1, bound * 0.9).unwrap();
        assert!(below.optimality_residual(&DVector::zeros(5)) > 0.0);
    }

    #[test]
    fn apg_lambda_zero_is_ridge() {
        let (x, t) = random_problem(3, 12, 7);
        let prob = EnetProblem::new(&x, &t, 0.5, 0.0).unwrap();
        let sol = apg_solve(&prob, &DVector::zeros(7), 1e-11, 100_000).unwrap();
        let oracle = ridge_oracle(&x, &t, 0.5);
        assert_relative_eq!(sol.beta, oracle, max_relative = 1e-6);
    }

    #[test]
    fn apg_matches_coordinate_descent() {
        let (x, t) = random_problem(4, 5, 3);
        let prob = EnetProblem::new(&x, &t, 0.2, 0.1).unwrap();
        let sol = apg_solve(&prob, &DVector::zeros(3), 1e-12, 100_000).unwrap();
        let cd = coordinate_descent(&x, &t, 0.2, 0.1);
        assert!((prob.objective(&sol.beta) - prob.objective(&cd)).abs() <= 1e-8);
    }

    #[test]
    fn apg_reports_cap() {
        let (x, t) = random_problem(5, 20, 30);
        let prob = EnetProblem::new(&x, &t, 0.01, 0.05).unwrap();
        let sol = apg_solve(&prob, &DVector::zeros(30), 1e-14, 3).unwrap();
        assert!(!sol.converged);
        assert_eq!(sol.iterations, 3);
        assert!(sol.require_converged().is_err());
    }

    #[test]
    fn apg_rejects_bad_shapes() {
        let (x, t) = random_problem(6, 4, 3);
        let prob = EnetProblem::new(&x, &t, 0.1, 0.1).unwrap();
        assert!(matches!(
            apg_solve(&prob, &DVector::zeros(2), 1e-6, 10),
            Err(SosError::ShapeMismatch(_))
        ));
        let short = DVector::zeros(3);
        assert!(EnetProblem::new(&x, &short, 0.1, 0.1).is_err());
    }

    #[test]
    fn admm_lambda_zero_is_ridge_both_factorizations() {
        for (n, p) in [(12, 7), (6, 15)] {
            let (x, t) = random_problem(7 + n as u64, n, p);
            let prob = EnetProblem::new(&x, &t, 0.5, 0.0).unwrap();
            let sol = admm_solve(&prob, &DVector::zeros(p), 2.0, 1e-12, 100_000).unwrap();
            assert!(sol.converged);
            assert_relative_eq!(sol.beta, ridge_oracle(&x, &t, 0.5), max_relative = 1e-6);
        }
    }

    #[test]
    fn admm_agrees_with_apg() {
        let (x, t) = random_problem(4, 5, 3);
        let prob = EnetProblem::new(&x, &t, 0.2, 0.1).unwrap();
        let a = apg_solve(&prob, &DVector::zeros(3), 1e-12, 100_000).unwrap();
        let b = admm_solve(&prob, &DVector::zeros(3), 2.0, 1e-12, 100_000).unwrap();
        assert!((prob.objective(&a.beta) - prob.objective(&b.beta)).abs() <= 1e-6);
    }

    #[test]
    fn admm_zero_target() {
        let (x, _) = random_problem(8, 6, 4);
        let t = DVector::zeros(6);
        let prob = EnetProblem::new(&x, &t, 0.1, 0.3).unwrap();
        let sol = admm_solve(&prob, &DVector::from_element(4, 1.0), 2.0, 1e-12, 10_000).unwrap();
        assert!(sol.beta.amax() < 1e-10);
    }

    #[test]
    fn admm_rejects_nonpositive_mu() {
        let (x, t) = random_problem(9, 6, 4);
        let prob = EnetProblem::new(&x, &t, 0.1, 0.3).unwrap();
        assert!(admm_solve(&prob, &DVector::zeros(4), 0.0, 1e-6, 10).is_err());
    }

    #[test]
    fn power_iteration_matches_eigen() {
        let (x, _) = random_problem(10, 9, 6);
        let exact = x.tr_mul(&x).symmetric_eigenvalues().max();
        let est = largest_gram_eigenvalue(&x);
        assert!(est <= exact * (1.0 + 1e-12));
        assert!(est >= exact * 0.95);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;
        use rand::Rng;

        fn dims() -> impl Strategy<Value = (u64, usize, usize)> {
            (any::<u64>(), 2usize..=30, 1usize..=30)
        }

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(20))]

            #[test]
            fn solvers_agree((seed, n, p) in dims(), lambda in 0.0f64..2.0) {
                let (x, t) = random_problem(seed, n, p);
                let prob = EnetProblem::new(&x, &t, 0.1, lambda).unwrap();
                let a = apg_solve(&prob, &DVector::zeros(p), 1e-10, 200_000).unwrap();
                let b = admm_solve(&prob, &DVector::zeros(p), 2.0, 1e-10, 200_000).unwrap();
                let (fa, fb) = (prob.objective(&a.beta), prob.objective(&b.beta));
                prop_assert!((fa - fb).abs() <= 1e-6, "apg {fa} admm {fb}");
            }

            #[test]
            fn descent_from_any_start((seed, n, p) in dims(), lambda in 0.0f64..2.0, iters in 1usize..50) {
                let (x, t) = random_problem(seed, n, p);
                let prob = EnetProblem::new(&x, &t, 0.1, lambda).unwrap();
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
                let start = DVector::from_fn(p, |_, _| rng.random_range(-1.0..1.0));
                let f0 = prob.objective(&start);
                let a = apg_solve(&prob, &start, 1e-12, iters).unwrap();
                prop_assert!(prob.objective(&a.beta) <= f0 + 1e-10);
                let b = admm_solve(&prob, &start, 2.0, 1e-12, iters).unwrap();
                prop_assert!(prob.objective(&b.beta) <= f0 + 1e-10);
            }

            #[test]
            fn l1_norm_shrinks_with_lambda((seed, n, p) in dims(), l1 in 0.0f64..1.0, dl in 0.01f64..1.0) {
                let (x, t) = random_problem(seed, n, p);
                let small = EnetProblem::new(&x, &t, 0.1, l1).unwrap();
                let large = EnetProblem::new(&x, &t, 0.1, l1 + dl).unwrap();
                let a = apg_solve(&small, &DVector::zeros(p), 1e-11, 200_000).unwrap();
                let b = apg_solve(&large, &DVector::zeros(p), 1e-11, 200_000).unwrap();
                prop_assert!(b.beta.lp_norm(1) <= a.beta.lp_norm(1) + 1e-8);
            }

            #[test]
            fn zero_beyond_dead_zone((seed, n, p) in dims(), over in 1.0f64..3.0) {
                let (x, t) = random_problem(seed, n, p);
                let bound = EnetProblem::new(&x, &t, 0.1, 0.0).unwrap().dead_zone();
                let prob = EnetProblem::new(&x, &t, 0.1, bound * over + 1e-12).unwrap();
                let sol = apg_solve(&prob, &DVector::zeros(p), 1e-10, 1000).unwrap();
                prop_assert!(sol.beta.iter().all(|&b| b == 0.0));
            }
        }
    }
}
