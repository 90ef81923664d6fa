//! Dense Levenberg–Marquardt for small whitened least-squares problems.
//!
//! Minimizes `cost(x) = |r(x)|^2` (no 1/2 factor, so the cost equals the
//! Mahalanobis sum when `r` is whitened). Steps solve
//! `(JᵀJ + λ·diag(JᵀJ)) δ = -Jᵀr` and are only accepted when the cost drops.

use nalgebra::{DMatrix, DVector};

pub trait LeastSquaresProblem {
    fn dim(&self) -> usize;

    /// Whitened residuals, or `None` if `x` is outside the model's domain.
    fn residuals(&self, x: &DVector<f64>) -> Option<DVector<f64>>;

    /// Jacobian of [`residuals`](Self::residuals).
    fn jacobian(&self, x: &DVector<f64>) -> Option<DMatrix<f64>>;
}

#[derive(Debug, Clone, Copy)]
pub struct LmSettings {
    pub max_iterations: usize,
    /// Convergence threshold on `|∇cost|`.
    pub gradient_tol: f64,
    pub lambda_init: f64,
}

#[derive(Debug, Clone)]
pub struct LmOutcome {
    pub x: DVector<f64>,
    pub cost: f64,
    pub gradient_norm: f64,
    pub iterations: usize,
    pub converged: bool,
}

pub(crate) const LAMBDA_MAX: f64 = 1e16;
pub(crate) const LAMBDA_MIN: f64 = 1e-15;

fn cost_of(r: &DVector<f64>) -> f64 {
    r.norm_squared()
}

pub fn minimize<P: LeastSquaresProblem>(
    problem: &P,
    x0: DVector<f64>,
    settings: &LmSettings,
) -> Option<LmOutcome> {
    let mut x = x0;
    let mut r = problem.residuals(&x)?;
    let mut cost = cost_of(&r);
    let mut lambda = settings.lambda_init;
    let mut iterations = 0;
    let mut gradient_norm = f64::INFINITY;

    while iterations < settings.max_iterations {
        let Some(jac) = problem.jacobian(&x) else {
            break;
        };
        let g = jac.tr_mul(&r);
        gradient_norm = 2.0 * g.norm();
        if gradient_norm <= settings.gradient_tol {
            break;
        }
        let jtj = jac.tr_mul(&jac);
        let mut stalled = true;
        while lambda <= LAMBDA_MAX {
            let mut a = jtj.clone();
            for i in 0..a.nrows() {
                let d = jtj[(i, i)].max(1e-12 * (1.0 + jtj.diagonal().amax()));
                a[(i, i)] += lambda * d;
            }
            let step = a.cholesky().map(|c| c.solve(&(-&g)));
            if let Some(step) = step {
                let candidate = &x + &step;
                if let Some(r_new) = problem.residuals(&candidate) {
                    let c_new = cost_of(&r_new);
                    if c_new < cost {
                        let tiny = step.norm() <= 1e-15 * (x.norm() + 1e-15);
                        x = candidate;
                        r = r_new;
                        cost = c_new;
                        lambda = (lambda / 10.0).max(LAMBDA_MIN);
                        stalled = tiny;
                        break;
                    }
                }
            }
            lambda *= 10.0;
        }
        iterations += 1;
        if stalled {
            // No representable descent, or the accepted step vanished.
            break;
        }
    }

    if let Some(jac) = problem.jacobian(&x) {
        gradient_norm = 2.0 * jac.tr_mul(&r).norm();
    }
    Some(LmOutcome {
        converged: gradient_norm <= settings.gradient_tol,
        x,
        cost,
        gradient_norm,
        iterations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Rosenbrock;

    impl LeastSquaresProblem for Rosenbrock {
        fn dim(&self) -> usize {
            2
        }
        fn residuals(&self, x: &DVector<f64>) -> Option<DVector<f64>> {
            Some(DVector::from_vec(vec![10.0 * (x[1] - x[0] * x[0]), 1.0 - x[0]]))
        }
        fn jacobian(&self, x: &DVector<f64>) -> Option<DMatrix<f64>> {
            Some(DMatrix::from_row_slice(2, 2, &[-20.0 * x[0], 10.0, -1.0, 0.0]))
        }
    }

    #[test]
    fn solves_rosenbrock() {
        let settings = LmSettings {
            max_iterations: 200,
            gradient_tol: 1e-10,
            lambda_init: 1e-3,
        };
        let out = minimize(&Rosenbrock, DVector::from_vec(vec![-1.2, 1.0]), &settings).unwrap();
        assert!(out.converged);
        assert!((out.x[0] - 1.0).abs() < 1e-8 && (out.x[1] - 1.0).abs() < 1e-8);
    }

    #[test]
    fn zero_iterations_at_optimum() {
        let settings = LmSettings {
            max_iterations: 10,
            gradient_tol: 1e-10,
            lambda_init: 1e-3,
        };
        let out = minimize(&Rosenbrock, DVector::from_vec(vec![1.0, 1.0]), &settings).unwrap();
        assert_eq!(out.iterations, 0);
        assert_eq!(out.cost, 0.0);
    }
}
