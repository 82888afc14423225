//! Box-constrained minimization by projected gradient descent with a
//! backtracking (Armijo) line search. Shared by the trajectory optimizer
//! and the ILC control-design problems, which are smooth and convex in
//! their decision variables with plain box constraints.

use nalgebra::DVector;

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct SolverOptions {
    pub max_iters: usize,
    /// Stop when the projected-gradient residual infinity norm falls below this.
    pub grad_tol: Option<f64>,
    /// Stop when the objective decreases by less than `decrease` over `window`
    /// consecutive iterations.
    pub stall: Option<StallCriterion>,
    /// Error out instead of returning when no criterion fired within `max_iters`.
    pub require_convergence: bool,
}

#[derive(Debug, Clone, Copy)]
pub struct StallCriterion {
    pub decrease: f64,
    pub window: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            max_iters: 20_000,
            grad_tol: Some(1e-8),
            stall: None,
            require_convergence: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    GradTol,
    Stall,
    MaxIters,
}

#[derive(Debug, Clone)]
pub struct SolveReport {
    pub x: DVector<f64>,
    pub objective: f64,
    pub iterations: usize,
    pub stop: StopReason,
    /// Infinity norm of `x - project(x - grad f(x))` at the solution.
    pub projected_grad_norm: f64,
}

impl SolveReport {
    pub fn converged(&self) -> bool {
        self.stop != StopReason::MaxIters
    }
}

/// Clamp every coordinate into `[lo, hi]`.
pub fn project(x: &DVector<f64>, lo: &DVector<f64>, hi: &DVector<f64>) -> DVector<f64> {
    DVector::from_fn(x.len(), |i, _| x[i].clamp(lo[i], hi[i]))
}

/// Projected-gradient residual `x - project(x - g)`; zero exactly at a
/// first-order stationary point of the box-constrained problem.
pub fn projected_gradient_residual(
    x: &DVector<f64>,
    g: &DVector<f64>,
    lo: &DVector<f64>,
    hi: &DVector<f64>,
) -> DVector<f64> {
    x - project(&(x - g), lo, hi)
}

/// Minimize `f` over the box `[lo, hi]` starting from `x0`.
///
/// Step sizes reuse the spectral (Barzilai-Borwein) estimate from the previous
/// accepted pair and are safeguarded by Armijo backtracking, which keeps the
/// iteration monotone.
pub fn minimize_box<F, G>(
    mut f: F,
    mut grad: G,
    x0: &DVector<f64>,
    lo: &DVector<f64>,
    hi: &DVector<f64>,
    opts: &SolverOptions,
) -> Result<SolveReport>
where
    F: FnMut(&DVector<f64>) -> f64,
    G: FnMut(&DVector<f64>) -> DVector<f64>,
{
    let n = x0.len();
    if lo.len() != n || hi.len() != n {
        return Err(Error::Dimension(format!(
            "solver bounds: x has {n} entries, lo {}, hi {}",
            lo.len(),
            hi.len()
        )));
    }
    if (0..n).any(|i| lo[i] > hi[i]) {
        return Err(Error::Config("solver bounds must satisfy lo <= hi".into()));
    }

    let mut x = project(x0, lo, hi);
    let mut fx = f(&x);
    if !fx.is_finite() {
        return Err(Error::Numeric(format!(
            "objective not finite at the initial point: {fx}"
        )));
    }
    let mut g = grad(&x);
    let mut step = 1.0;
    let mut stall_count = 0usize;
    let mut iterations = 0usize;
    let mut stop = StopReason::MaxIters;

    for it in 0..opts.max_iters {
        iterations = it + 1;
        let residual = projected_gradient_residual(&x, &g, lo, hi);
        if let Some(tol) = opts.grad_tol {
            if residual.amax() < tol {
                stop = StopReason::GradTol;
                break;
            }
        }

        // Armijo backtracking along the projected arc.
        let mut accepted = None;
        let mut s = step;
        for _ in 0..60 {
            let cand = project(&(&x - s * &g), lo, hi);
            let fc = f(&cand);
            let dir = &cand - &x;
            let slope = g.dot(&dir);
            if fc.is_finite() && fc <= fx + 1e-4 * slope {
                accepted = Some((cand, fc));
                break;
            }
            s *= 0.5;
        }
        let Some((x_new, f_new)) = accepted else {
            // No descent at machine precision: treat as stationary.
            stop = StopReason::GradTol;
            break;
        };

        let g_new = grad(&x_new);
        let dx = &x_new - &x;
        let dg = &g_new - &g;
        let sy = dx.dot(&dg);
        step = if sy > 1e-18 {
            (dx.dot(&dx) / sy).clamp(1e-12, 1e12)
        } else {
            s * 2.0
        };

        if let Some(stall) = opts.stall {
            if fx - f_new < stall.decrease {
                stall_count += 1;
            } else {
                stall_count = 0;
            }
        }
        x = x_new;
        fx = f_new;
        g = g_new;
        if !fx.is_finite() || g.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "solver produced a non-finite iterate at iteration {it}; x = {:?}",
                x.as_slice()
            )));
        }
        if let Some(stall) = opts.stall {
            if stall_count >= stall.window {
                stop = StopReason::Stall;
                break;
            }
        }
    }

    let final_residual = projected_gradient_residual(&x, &g, lo, hi).amax();
    if stop == StopReason::MaxIters && opts.require_convergence {
        return Err(Error::Solver(format!(
            "no convergence within {} iterations; projected gradient norm {final_residual:.3e}",
            opts.max_iters
        )));
    }
    Ok(SolveReport {
        x,
        objective: fx,
        iterations,
        stop,
        projected_grad_norm: final_residual,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn dv(v: &[f64]) -> DVector<f64> {
        DVector::from_row_slice(v)
    }

    #[test]
    fn projection_is_idempotent() {
        let lo = dv(&[0.0, -1.0, 2.0]);
        let hi = dv(&[1.0, 1.0, 3.0]);
        let x = dv(&[5.0, -7.0, 2.5]);
        let p1 = project(&x, &lo, &hi);
        let p2 = project(&p1, &lo, &hi);
        assert_eq!(p1, p2);
        assert_eq!(p1, dv(&[1.0, -1.0, 2.5]));
    }

    #[test]
    fn quadratic_interior_minimum() {
        // f(x) = (x0-1)^2 + 10 (x1+2)^2, minimum inside the box
        let f = |x: &DVector<f64>| (x[0] - 1.0).powi(2) + 10.0 * (x[1] + 2.0).powi(2);
        let g = |x: &DVector<f64>| dv(&[2.0 * (x[0] - 1.0), 20.0 * (x[1] + 2.0)]);
        let report = minimize_box(
            f,
            g,
            &dv(&[4.0, 4.0]),
            &dv(&[-10.0, -10.0]),
            &dv(&[10.0, 10.0]),
            &SolverOptions::default(),
        )
        .unwrap();
        assert!(report.converged());
        assert_abs_diff_eq!(report.x[0], 1.0, epsilon = 1e-7);
        assert_abs_diff_eq!(report.x[1], -2.0, epsilon = 1e-7);
    }

    #[test]
    fn quadratic_active_bound() {
        // minimum at x = -3 but box floor at 0 makes the solution 0
        let f = |x: &DVector<f64>| (x[0] + 3.0).powi(2);
        let g = |x: &DVector<f64>| dv(&[2.0 * (x[0] + 3.0)]);
        let report = minimize_box(
            f,
            g,
            &dv(&[5.0]),
            &dv(&[0.0]),
            &dv(&[10.0]),
            &SolverOptions::default(),
        )
        .unwrap();
        assert!(report.converged());
        assert_abs_diff_eq!(report.x[0], 0.0, epsilon = 1e-10);
    }

    #[test]
    fn already_optimal_point_returns_unchanged() {
        let f = |x: &DVector<f64>| (x[0] - 2.0).powi(2) + (x[1] - 3.0).powi(2);
        let g = |x: &DVector<f64>| dv(&[2.0 * (x[0] - 2.0), 2.0 * (x[1] - 3.0)]);
        let report = minimize_box(
            f,
            g,
            &dv(&[2.0, 3.0]),
            &dv(&[0.0, 0.0]),
            &dv(&[10.0, 10.0]),
            &SolverOptions::default(),
        )
        .unwrap();
        assert_eq!(report.stop, StopReason::GradTol);
        assert_eq!(report.iterations, 1);
        assert_abs_diff_eq!(report.x[0], 2.0, epsilon = 1e-12);
    }

    #[test]
    fn ill_conditioned_quadratic_converges_with_bb_steps() {
        // condition number 1e4
        let f = |x: &DVector<f64>| x[0].powi(2) + 1e4 * x[1].powi(2) + 0.3 * x[0];
        let g = |x: &DVector<f64>| dv(&[2.0 * x[0] + 0.3, 2e4 * x[1]]);
        let report = minimize_box(
            f,
            g,
            &dv(&[5.0, 5.0]),
            &dv(&[-10.0, -10.0]),
            &dv(&[10.0, 10.0]),
            &SolverOptions {
                max_iters: 5000,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(report.converged(), "stopped by {:?}", report.stop);
        assert_abs_diff_eq!(report.x[0], -0.15, epsilon = 1e-6);
        assert_abs_diff_eq!(report.x[1], 0.0, epsilon = 1e-8);
    }

    #[test]
    fn stall_criterion_stops_flat_objective() {
        let f = |_: &DVector<f64>| 1.0;
        let g = |_: &DVector<f64>| dv(&[1e-3]);
        let report = minimize_box(
            f,
            g,
            &dv(&[5.0]),
            &dv(&[0.0]),
            &dv(&[10.0]),
            &SolverOptions {
                max_iters: 1000,
                grad_tol: None,
                stall: Some(StallCriterion {
                    decrease: 1e-8,
                    window: 10,
                }),
                require_convergence: false,
            },
        )
        .unwrap();
        assert_eq!(report.stop, StopReason::Stall);
    }

    #[test]
    fn mismatched_bounds_rejected() {
        let f = |_: &DVector<f64>| 0.0;
        let g = |_: &DVector<f64>| dv(&[0.0]);
        let err = minimize_box(
            f,
            g,
            &dv(&[0.0]),
            &dv(&[0.0, 1.0]),
            &dv(&[1.0]),
            &SolverOptions::default(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::Dimension(_)));
    }
}
