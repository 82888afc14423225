//! Steady-state economic trajectory optimization: find the noise-free
//! control profile that balances terminal product quality against cooling
//! cost, producing the nominal reference trajectory every controller and
//! linearization consumes.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::reactor::{Reactor, ReactorState};
use crate::solver::{minimize_box, SolveReport, SolverOptions, StallCriterion};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RtoConfig {
    /// Target terminal concentration of product B, mol/L.
    pub c_b_target: f64,
    /// Unit cost of cooling water in the quadratic flow term.
    pub flow_cost: f64,
    /// Flow bounds, L/s.
    pub u_min: f64,
    pub u_max: f64,
    /// Reaction temperature operating range, K.
    pub temp_min: f64,
    pub temp_max: f64,
    /// Quadratic penalty weight on temperature-bound violations.
    pub temp_penalty_weight: f64,
    pub max_iters: usize,
    /// Initial line-search step.
    pub step_size: f64,
    /// Relative finite-difference step for the objective gradient.
    pub fd_step: f64,
    /// Initial guess: constant flow, L/s.
    pub u_init: f64,
}

impl Default for RtoConfig {
    fn default() -> Self {
        RtoConfig {
            c_b_target: 0.58,
            flow_cost: 0.05,
            u_min: 0.0,
            u_max: 10.0,
            temp_min: 298.0,
            temp_max: 378.0,
            temp_penalty_weight: 1e3,
            max_iters: 200,
            step_size: 1.0,
            fd_step: 1e-6,
            u_init: 2.0,
        }
    }
}

impl RtoConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.u_min < self.u_max) {
            return Err(Error::Config("rto: flow bounds must be ordered".into()));
        }
        if self.u_min < 0.0 || self.u_max > 10.0 {
            return Err(Error::Config(format!(
                "rto: flow bounds [{}, {}] must lie within the physical range [0, 10] L/s",
                self.u_min, self.u_max
            )));
        }
        if !(self.temp_min < self.temp_max) {
            return Err(Error::Config(
                "rto: temperature bounds must be ordered".into(),
            ));
        }
        if self.temp_penalty_weight < 0.0 {
            return Err(Error::Config("rto: temp_penalty_weight must be >= 0".into()));
        }
        if !(self.u_init >= self.u_min && self.u_init <= self.u_max) {
            return Err(Error::Config(format!(
                "rto: u_init = {} outside the flow bounds",
                self.u_init
            )));
        }
        Ok(())
    }
}

/// The three objective components; their sum is the optimization target.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ObjectiveBreakdown {
    /// (C_B(T_f) - target)^2 * V
    pub terminal: f64,
    /// flow_cost * sum u(t)^2
    pub flow: f64,
    /// penalty * sum of squared temperature-bound violations
    pub temp_penalty: f64,
}

impl ObjectiveBreakdown {
    pub fn total(&self) -> f64 {
        self.terminal + self.flow + self.temp_penalty
    }
}

/// Assemble the economic cost from an already-simulated trajectory.
pub fn objective_from_trajectory(
    states: &[ReactorState],
    u: &[f64],
    cfg: &RtoConfig,
    volume: f64,
) -> ObjectiveBreakdown {
    let c_b_final = states.last().map(|s| s.c_b).unwrap_or(0.0);
    let terminal = (c_b_final - cfg.c_b_target).powi(2) * volume;
    let flow = cfg.flow_cost * u.iter().map(|&f| f * f).sum::<f64>();
    let temp_penalty = cfg.temp_penalty_weight
        * states
            .iter()
            .skip(1)
            .map(|s| {
                let over = (s.temp - cfg.temp_max).max(0.0);
                let under = (cfg.temp_min - s.temp).max(0.0);
                over * over + under * under
            })
            .sum::<f64>();
    ObjectiveBreakdown {
        terminal,
        flow,
        temp_penalty,
    }
}

/// Evaluate the economic objective of a control trajectory by noise-free
/// simulation under the nominal coolant inlet.
pub fn rto_objective(reactor: &Reactor, u: &[f64], cfg: &RtoConfig) -> Result<ObjectiveBreakdown> {
    let states = reactor.run_nominal(u)?;
    Ok(objective_from_trajectory(
        &states,
        u,
        cfg,
        reactor.params.volume,
    ))
}

/// The optimized nominal reference.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NominalTrajectory {
    pub states: Vec<ReactorState>,
    pub u: Vec<f64>,
    pub objective: f64,
    pub breakdown: ObjectiveBreakdown,
    pub iterations: usize,
    /// True when the stationarity or stall criterion fired before max_iters.
    pub converged: bool,
    pub projected_grad_norm: f64,
    /// True when the whole reaction-temperature trajectory respects the
    /// configured operating range (the penalty is inactive at the solution).
    pub temp_bounds_ok: bool,
}

/// Single-shooting optimization with piecewise-constant controls: projected
/// gradient descent on the simulated objective with central-difference
/// gradients, projected onto the flow box each iterate.
pub fn optimize_nominal(reactor: &Reactor, cfg: &RtoConfig) -> Result<NominalTrajectory> {
    cfg.validate()?;
    let n = reactor.grid.n_steps;
    let lo = DVector::from_element(n, cfg.u_min);
    let hi = DVector::from_element(n, cfg.u_max);
    let x0 = DVector::from_element(n, cfg.u_init);

    let eval =
        |u: &DVector<f64>| -> Result<f64> { Ok(rto_objective(reactor, u.as_slice(), cfg)?.total()) };
    // non-finite simulations surface as infinity so the line search backs
    // off; a genuinely failing final iterate is re-detected below
    let f = |u: &DVector<f64>| eval(u).unwrap_or(f64::INFINITY);
    let grad = |u: &DVector<f64>| -> DVector<f64> {
        let mut g = DVector::zeros(n);
        for i in 0..n {
            let h = (cfg.fd_step * u[i].abs()).max(1e-7);
            let up = (u[i] + h).min(cfg.u_max);
            let um = (u[i] - h).max(cfg.u_min);
            let mut xp = u.clone();
            let mut xm = u.clone();
            xp[i] = up;
            xm[i] = um;
            g[i] = if up > um { (f(&xp) - f(&xm)) / (up - um) } else { 0.0 };
        }
        g
    };

    let opts = SolverOptions {
        max_iters: cfg.max_iters,
        grad_tol: Some(1e-9),
        stall: Some(StallCriterion {
            decrease: 1e-8,
            window: 10,
        }),
        require_convergence: false,
    };
    let report: SolveReport = minimize_box(f, grad, &x0, &lo, &hi, &opts)?;
    if !report.objective.is_finite() {
        return Err(Error::Numeric(format!(
            "trajectory optimization reached a non-finite objective; iterate {:?}",
            report.x.as_slice()
        )));
    }

    let u: Vec<f64> = report.x.as_slice().to_vec();
    let states = reactor.run_nominal(&u)?;
    let breakdown = objective_from_trajectory(&states, &u, cfg, reactor.params.volume);
    let temp_bounds_ok = states
        .iter()
        .skip(1)
        .all(|s| s.temp >= cfg.temp_min && s.temp <= cfg.temp_max);
    if !temp_bounds_ok {
        log::warn!("optimized nominal trajectory violates the temperature range");
    }
    Ok(NominalTrajectory {
        states,
        u,
        objective: breakdown.total(),
        breakdown,
        iterations: report.iterations,
        converged: report.converged(),
        projected_grad_norm: report.projected_grad_norm,
        temp_bounds_ok,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reactor::{BatchTimeGrid, ReactorParams};
    use approx::{assert_abs_diff_eq, assert_relative_eq};

    fn coarse_reactor() -> Reactor {
        // 10-interval grid keeps unit-test simulations cheap
        Reactor::new(
            ReactorParams::default(),
            BatchTimeGrid::new(3600.0, 10, 4.0).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn zero_cost_when_target_met_with_no_flow() {
        let cfg = RtoConfig::default();
        let states = vec![
            ReactorState::initial(),
            ReactorState {
                c_a: 0.3,
                c_b: 0.58,
                temp: 330.0,
                temp_jacket: 329.0,
            },
        ];
        let b = objective_from_trajectory(&states, &[0.0], &cfg, 1200.0);
        assert_eq!(b.total(), 0.0);
    }

    #[test]
    fn flow_term_difference_between_zero_and_full_flow() {
        let reactor = Reactor::new(ReactorParams::default(), BatchTimeGrid::default()).unwrap();
        let cfg = RtoConfig::default();
        let b0 = rto_objective(&reactor, &vec![0.0; 40], &cfg).unwrap();
        let b10 = rto_objective(&reactor, &vec![10.0; 40], &cfg).unwrap();
        assert_abs_diff_eq!(b0.flow, 0.0);
        // 0.05 * 40 * 100
        assert_abs_diff_eq!(b10.flow - b0.flow, 200.0, epsilon = 1e-9);
    }

    #[test]
    fn doubling_flow_cost_doubles_flow_term_only() {
        let reactor = coarse_reactor();
        let u = vec![3.0; 10];
        let cfg = RtoConfig::default();
        let mut cfg2 = cfg.clone();
        cfg2.flow_cost *= 2.0;
        let a = rto_objective(&reactor, &u, &cfg).unwrap();
        let b = rto_objective(&reactor, &u, &cfg2).unwrap();
        assert_relative_eq!(b.flow, 2.0 * a.flow, max_relative = 1e-12);
        assert_eq!(a.terminal, b.terminal);
    }

    #[test]
    fn temperature_penalty_activates_outside_range() {
        let mut cfg = RtoConfig::default();
        cfg.temp_penalty_weight = 10.0;
        let states = vec![
            ReactorState::initial(),
            ReactorState {
                c_a: 0.5,
                c_b: 0.3,
                temp: 380.0,
                temp_jacket: 350.0,
            },
        ];
        let b = objective_from_trajectory(&states, &[0.0], &cfg, 1200.0);
        assert_abs_diff_eq!(b.temp_penalty, 10.0 * 4.0, epsilon = 1e-12);
    }

    #[test]
    fn optimization_improves_on_initial_guess_and_respects_bounds() {
        let reactor = coarse_reactor();
        let mut cfg = RtoConfig::default();
        cfg.max_iters = 80;
        let j_init = rto_objective(&reactor, &vec![cfg.u_init; 10], &cfg)
            .unwrap()
            .total();
        let nominal = optimize_nominal(&reactor, &cfg).unwrap();
        assert!(nominal.objective <= j_init + 1e-12);
        assert!(nominal
            .u
            .iter()
            .all(|&f| (cfg.u_min..=cfg.u_max).contains(&f)));
        assert!(nominal.temp_bounds_ok);
        assert_eq!(nominal.states.len(), 11);
    }

    #[test]
    fn optimized_terminal_quality_beats_no_cooling_and_grid_oracle() {
        let reactor = coarse_reactor();
        let mut cfg = RtoConfig::default();
        cfg.max_iters = 120;
        let nominal = optimize_nominal(&reactor, &cfg).unwrap();

        let no_cooling = reactor.run_nominal(&vec![0.0; 10]).unwrap();
        let cb_opt = nominal.states.last().unwrap().c_b;
        let cb_zero = no_cooling.last().unwrap().c_b;
        assert!(
            (cb_opt - cfg.c_b_target).abs() < (cb_zero - cfg.c_b_target).abs(),
            "optimized |C_B - target| = {:.4} must beat u == 0: {:.4}",
            (cb_opt - cfg.c_b_target).abs(),
            (cb_zero - cfg.c_b_target).abs()
        );

        // coarse grid oracle over constant flows 0..10 step 0.5
        let mut best_const = f64::INFINITY;
        let mut f = 0.0;
        while f <= 10.0 {
            let j = rto_objective(&reactor, &vec![f; 10], &cfg).unwrap().total();
            best_const = best_const.min(j);
            f += 0.5;
        }
        assert!(
            nominal.objective <= best_const + 1e-9,
            "optimizer ({:.4}) must match the best constant profile ({best_const:.4})",
            nominal.objective
        );
    }

    #[test]
    fn config_validation() {
        let mut cfg = RtoConfig::default();
        cfg.u_max = 12.0;
        assert!(cfg.validate().is_err());
        let mut cfg = RtoConfig::default();
        cfg.u_init = 11.0;
        assert!(cfg.validate().is_err());
        let mut cfg = RtoConfig::default();
        cfg.temp_min = 400.0;
        assert!(cfg.validate().is_err());
    }
}
