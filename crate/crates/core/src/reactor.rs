//! Nonlinear batch reactor: two consecutive exothermic reactions
//! A -> B -> C with jacket cooling, plus the disturbance and measurement
//! noise model used by every closed-loop experiment.
//!
//! Time bases: the reaction rate constants follow the Arrhenius law on a
//! per-hour basis (the batch horizon is one hour), while the balance
//! equations integrate in seconds; reaction terms therefore carry a
//! per-hour -> per-second factor, and the jacket heat-transfer
//! coefficient, tabulated per minute, converts to per-second as well.

use std::sync::atomic::{AtomicU64, Ordering};

use nalgebra::SVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const HOUR_SECONDS: f64 = 3600.0;
const MINUTE_SECONDS: f64 = 60.0;

/// Physical parameters of the reactor and its cooling jacket.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReactorParams {
    /// Pre-exponential factor of A -> B, L/(mol h).
    pub alpha1: f64,
    /// Pre-exponential factor of B -> C, 1/h.
    pub alpha2: f64,
    /// Activation energy of A -> B, cal/mol.
    pub e1: f64,
    /// Activation energy of B -> C, cal/mol.
    pub e2: f64,
    /// Gas constant, cal/(mol K).
    pub r_gas: f64,
    /// Reactor volume, L.
    pub volume: f64,
    /// Jacket volume, L.
    pub volume_jacket: f64,
    /// Reaction enthalpy of A -> B, cal/mol (negative: exothermic).
    pub lambda1: f64,
    /// Reaction enthalpy of B -> C, cal/mol (negative: exothermic).
    pub lambda2: f64,
    /// Reactor heat capacity, cal/(kg K).
    pub c_p: f64,
    /// Jacket heat capacity, cal/(kg K).
    pub c_j: f64,
    /// Reactor density, kg/L.
    pub rho: f64,
    /// Jacket density, kg/L.
    pub rho_j: f64,
    /// Heat-exchange area, dm^2.
    pub a_o: f64,
    /// Heat-transfer coefficient, cal/(min K dm^2).
    pub h_ow: f64,
    /// Design cooling-water inlet temperature, K.
    pub t_j0_nominal: f64,
    /// Cooling-water inlet temperature actually delivered by the plant, K.
    pub t_j0_actual: f64,
}

impl Default for ReactorParams {
    fn default() -> Self {
        ReactorParams {
            alpha1: 4000.0,
            alpha2: 6.2e5,
            e1: 5000.0,
            e2: 10000.0,
            r_gas: 2.0,
            volume: 1200.0,
            volume_jacket: 1200.0,
            lambda1: -1.8e5,
            lambda2: -2.25e5,
            c_p: 1000.0,
            c_j: 1000.0,
            rho: 0.8,
            rho_j: 0.8,
            a_o: 525.0,
            h_ow: 10850.0,
            t_j0_nominal: 323.0,
            t_j0_actual: 318.0,
        }
    }
}

impl ReactorParams {
    pub fn validate(&self) -> Result<()> {
        let positives = [
            ("alpha1", self.alpha1),
            ("alpha2", self.alpha2),
            ("e1", self.e1),
            ("e2", self.e2),
            ("r_gas", self.r_gas),
            ("volume", self.volume),
            ("volume_jacket", self.volume_jacket),
            ("c_p", self.c_p),
            ("c_j", self.c_j),
            ("rho", self.rho),
            ("rho_j", self.rho_j),
            ("a_o", self.a_o),
            ("h_ow", self.h_ow),
            ("t_j0_nominal", self.t_j0_nominal),
            ("t_j0_actual", self.t_j0_actual),
        ];
        for (name, v) in positives {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!(
                    "reactor.{name} must be finite and strictly positive, got {v}"
                )));
            }
        }
        for (name, v) in [("lambda1", self.lambda1), ("lambda2", self.lambda2)] {
            if !(v.is_finite() && v < 0.0) {
                return Err(Error::Config(format!(
                    "reactor.{name} must be finite and strictly negative (exothermic), got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// Physical state of the plant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReactorState {
    /// Concentration of reactant A, mol/L.
    pub c_a: f64,
    /// Concentration of product B, mol/L.
    pub c_b: f64,
    /// Reactor temperature, K.
    pub temp: f64,
    /// Jacket temperature, K.
    pub temp_jacket: f64,
}

impl ReactorState {
    /// State at the start of every batch.
    pub fn initial() -> Self {
        ReactorState {
            c_a: 1.0,
            c_b: 0.0,
            temp: 323.0,
            temp_jacket: 323.0,
        }
    }

    pub fn as_vector(&self) -> SVector<f64, 4> {
        SVector::<f64, 4>::new(self.c_a, self.c_b, self.temp, self.temp_jacket)
    }

    pub fn from_vector(v: &SVector<f64, 4>) -> Self {
        ReactorState {
            c_a: v[0],
            c_b: v[1],
            temp: v[2],
            temp_jacket: v[3],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.c_a.is_finite()
            && self.c_b.is_finite()
            && self.temp.is_finite()
            && self.temp_jacket.is_finite()
    }
}

/// Variances of the four noise sources and the master seed.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseConfig {
    /// Within-batch random disturbance on the coolant inlet, K^2.
    pub var_v: f64,
    /// Batch-to-batch drift of the repetitive disturbance, K^2 per batch.
    pub var_w: f64,
    /// Observation noise on (T, T_J), K^2.
    pub var_m: f64,
    /// Terminal quality measurement noise on (C_A, C_B), (mol/L)^2.
    pub var_n: f64,
    pub seed: u64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        NoiseConfig {
            var_v: 0.3,
            var_w: 0.4,
            var_m: 0.06,
            var_n: 0.005,
            seed: 0,
        }
    }
}

impl NoiseConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("var_v", self.var_v),
            ("var_w", self.var_w),
            ("var_m", self.var_m),
            ("var_n", self.var_n),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!(
                    "noise.{name} must be finite and >= 0, got {v}"
                )));
            }
        }
        Ok(())
    }

    /// All variances zero: the plant becomes a pure function of its inputs.
    pub fn noiseless(seed: u64) -> Self {
        NoiseConfig {
            var_v: 0.0,
            var_w: 0.0,
            var_m: 0.0,
            var_n: 0.0,
            seed,
        }
    }
}

/// Sampling layout of one batch.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BatchTimeGrid {
    /// Batch duration, s.
    pub t_f: f64,
    /// Number of control/sampling intervals per batch.
    pub n_steps: usize,
    /// Inner integration step, s.
    pub dt_sub: f64,
}

impl Default for BatchTimeGrid {
    fn default() -> Self {
        BatchTimeGrid {
            t_f: 3600.0,
            n_steps: 40,
            dt_sub: 1.0,
        }
    }
}

impl BatchTimeGrid {
    pub fn new(t_f: f64, n_steps: usize, dt_sub: f64) -> Result<Self> {
        let grid = BatchTimeGrid {
            t_f,
            n_steps,
            dt_sub,
        };
        grid.validate()?;
        Ok(grid)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.t_f.is_finite() && self.t_f > 0.0) {
            return Err(Error::Config(format!(
                "grid.t_f must be finite and positive, got {}",
                self.t_f
            )));
        }
        if self.n_steps == 0 {
            return Err(Error::Config("grid.n_steps must be >= 1".into()));
        }
        if !(self.dt_sub.is_finite() && self.dt_sub > 0.0) {
            return Err(Error::Config(format!(
                "grid.dt_sub must be finite and positive, got {}",
                self.dt_sub
            )));
        }
        let dt = self.dt();
        let sub = (dt / self.dt_sub).round();
        if sub < 1.0 || (dt - sub * self.dt_sub).abs() > 1e-9 * dt {
            return Err(Error::Config(format!(
                "grid.dt_sub = {} must divide the sampling interval {dt}",
                self.dt_sub
            )));
        }
        Ok(())
    }

    /// Sampling interval, s.
    pub fn dt(&self) -> f64 {
        self.t_f / self.n_steps as f64
    }

    /// Integration sub-steps per sampling interval.
    pub fn substeps(&self) -> usize {
        (self.dt() / self.dt_sub).round() as usize
    }
}

/// Temperature-dependent rate constants (k1 in L/(mol h), k2 in 1/h).
pub fn arrhenius_rates(temp: f64, params: &ReactorParams) -> Result<(f64, f64)> {
    if !temp.is_finite() || temp <= 0.0 {
        return Err(Error::Numeric(format!(
            "arrhenius rates need a finite positive temperature, got {temp}"
        )));
    }
    let k1 = params.alpha1 * (-params.e1 / (params.r_gas * temp)).exp();
    let k2 = params.alpha2 * (-params.e2 / (params.r_gas * temp)).exp();
    Ok((k1, k2))
}

/// Right-hand side of the balance equations, per second.
///
/// `t_j0_inlet` is the coolant inlet temperature actually entering the
/// jacket during this instant (nominal value plus any disturbance).
pub fn state_derivative(
    state: &ReactorState,
    f_ow: f64,
    t_j0_inlet: f64,
    params: &ReactorParams,
) -> Result<SVector<f64, 4>> {
    if !f_ow.is_finite() || f_ow < 0.0 {
        return Err(Error::Config(format!(
            "coolant flow must be finite and >= 0, got {f_ow}"
        )));
    }
    if !state.is_finite() || !t_j0_inlet.is_finite() {
        return Err(Error::Numeric(
            "state derivative evaluated at a non-finite point".into(),
        ));
    }
    let (k1, k2) = arrhenius_rates(state.temp, params)?;
    // per-second reaction rates
    let r1 = k1 * state.c_a * state.c_a / HOUR_SECONDS;
    let r2 = k2 * state.c_b / HOUR_SECONDS;
    // jacket heat exchange, cal/s (h_ow is tabulated per minute)
    let q_j = params.h_ow / MINUTE_SECONDS * params.a_o * (state.temp - state.temp_jacket);
    let d_ca = -r1;
    let d_cb = r1 - r2;
    let d_temp = (-params.lambda1 / (params.rho * params.c_p)) * r1
        - (-params.lambda2 / (params.rho * params.c_p)) * r2
        - q_j / (params.volume * params.rho * params.c_p);
    let d_temp_j = (f_ow / params.volume_jacket) * (t_j0_inlet - state.temp_jacket)
        + q_j / (params.c_j * params.volume_jacket * params.rho_j);
    Ok(SVector::<f64, 4>::new(d_ca, d_cb, d_temp, d_temp_j))
}

/// One classical RK4 step of an autonomous system.
pub fn rk4_step<const N: usize, F>(f: &F, x: &SVector<f64, N>, dt: f64) -> Result<SVector<f64, N>>
where
    F: Fn(&SVector<f64, N>) -> Result<SVector<f64, N>>,
{
    let k1 = f(x)?;
    let k2 = f(&(x + k1 * (dt / 2.0)))?;
    let k3 = f(&(x + k2 * (dt / 2.0)))?;
    let k4 = f(&(x + k3 * dt))?;
    Ok(x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0))
}

/// Integrate one sampling interval under zero-order-hold inputs.
pub fn integrate_step(
    state: &ReactorState,
    f_ow: f64,
    t_j0_inlet: f64,
    params: &ReactorParams,
    grid: &BatchTimeGrid,
) -> Result<ReactorState> {
    let rhs = |x: &SVector<f64, 4>| state_derivative(&ReactorState::from_vector(x), f_ow, t_j0_inlet, params);
    let mut x = state.as_vector();
    for _ in 0..grid.substeps() {
        x = rk4_step(&rhs, &x, grid.dt_sub)?;
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::IntegrationDiverged(format!(
                "non-finite state after a sub-step: {:?}",
                x.as_slice()
            )));
        }
        for c in 0..2 {
            if x[c] < 0.0 {
                if x[c] < -1e-9 {
                    log::warn!(
                        "clamping negative concentration component {c}: {}",
                        x[c]
                    );
                }
                x[c] = 0.0;
            }
        }
    }
    Ok(ReactorState::from_vector(&x))
}

/// Everything `run_batch` produces for one batch.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BatchOutput {
    /// States at sampling instants 0..=n_steps (noise-free truth).
    pub states: Vec<ReactorState>,
    /// Noisy observations (T, T_J) at instants 1..=n_steps.
    pub observations: Vec<[f64; 2]>,
    /// Noisy terminal quality measurement (C_A, C_B).
    pub terminal_quality: [f64; 2],
    /// Disturbance applied to the coolant inlet at each interval,
    /// as a deviation from the nominal inlet temperature.
    pub disturbance: Vec<f64>,
    /// Repetitive component of the disturbance for this batch.
    pub drift: Vec<f64>,
}

/// The "actual process": owns the physical parameters and counts every
/// invocation so tests can assert that offline pipelines never touch it.
#[derive(Debug)]
pub struct Reactor {
    pub params: ReactorParams,
    pub grid: BatchTimeGrid,
    invocations: AtomicU64,
}

impl Reactor {
    pub fn new(params: ReactorParams, grid: BatchTimeGrid) -> Result<Self> {
        params.validate()?;
        grid.validate()?;
        Ok(Reactor {
            params,
            grid,
            invocations: AtomicU64::new(0),
        })
    }

    /// Number of batch simulations performed so far.
    pub fn invocation_count(&self) -> u64 {
        self.invocations.load(Ordering::SeqCst)
    }

    /// Repetitive disturbance of batch `k` (1-based): the deterministic
    /// inlet offset plus the accumulated batch-to-batch random walk.
    pub fn drift_for_batch(&self, noise: &NoiseConfig, batch_index: u64) -> Vec<f64> {
        let offset = self.params.t_j0_actual - self.params.t_j0_nominal;
        let n = self.grid.n_steps;
        let mut drift = vec![offset; n];
        if batch_index > 1 && noise.var_w > 0.0 {
            let mut rng = ChaCha12Rng::seed_from_u64(noise.seed);
            rng.set_stream(0);
            let sd = noise.var_w.sqrt();
            for _ in 1..batch_index {
                for d in drift.iter_mut() {
                    let w: f64 = rng.sample(StandardNormal);
                    *d += sd * w;
                }
            }
        }
        drift
    }

    /// Start a step-wise batch session for closed-loop control: the caller
    /// supplies one flow value per step and receives the noisy observation
    /// after each step.
    pub fn begin_session(&self, noise: &NoiseConfig, batch_index: u64) -> Result<BatchSession<'_>> {
        self.invocations.fetch_add(1, Ordering::SeqCst);
        noise.validate()?;
        if batch_index == 0 {
            return Err(Error::Config("batch_index is 1-based".into()));
        }
        let n = self.grid.n_steps;
        let drift = self.drift_for_batch(noise, batch_index);

        // Per-batch noise stream; drawn up-front in a fixed order.
        let mut rng = ChaCha12Rng::seed_from_u64(noise.seed);
        rng.set_stream(batch_index);
        let normal = |rng: &mut ChaCha12Rng, sd: f64| -> f64 {
            let z: f64 = rng.sample(StandardNormal);
            sd * z
        };
        let sd_v = noise.var_v.sqrt();
        let sd_m = noise.var_m.sqrt();
        let sd_n = noise.var_n.sqrt();
        let v: Vec<f64> = (0..n).map(|_| normal(&mut rng, sd_v)).collect();
        let m: Vec<[f64; 2]> = (0..n)
            .map(|_| [normal(&mut rng, sd_m), normal(&mut rng, sd_m)])
            .collect();
        let nq = [normal(&mut rng, sd_n), normal(&mut rng, sd_n)];

        let state = ReactorState::initial();
        Ok(BatchSession {
            reactor: self,
            v,
            m,
            nq,
            drift,
            state,
            states: vec![state],
            observations: Vec::with_capacity(n),
            disturbance: Vec::with_capacity(n),
            t: 0,
        })
    }

    /// Simulate batch `batch_index` (1-based) under the control trajectory
    /// `u` with the configured disturbances and measurement noise.
    ///
    /// Starts from the fixed initial state; the coolant inlet at interval t
    /// is `t_j0_nominal + drift_k(t) + v_k(t)`.
    pub fn run_batch(
        &self,
        u: &[f64],
        noise: &NoiseConfig,
        batch_index: u64,
    ) -> Result<BatchOutput> {
        if u.len() != self.grid.n_steps {
            return Err(Error::Dimension(format!(
                "control trajectory has {} values, grid expects {}",
                u.len(),
                self.grid.n_steps
            )));
        }
        let mut session = self.begin_session(noise, batch_index)?;
        for &f in u {
            session.step(f)?;
        }
        session.finish()
    }

    /// Noise-free simulation under the nominal coolant inlet; used by the
    /// trajectory optimizer and for linearization references.
    pub fn run_nominal(&self, u: &[f64]) -> Result<Vec<ReactorState>> {
        self.invocations.fetch_add(1, Ordering::SeqCst);
        if u.len() != self.grid.n_steps {
            return Err(Error::Dimension(format!(
                "control trajectory has {} values, grid expects {}",
                u.len(),
                self.grid.n_steps
            )));
        }
        let mut states = Vec::with_capacity(u.len() + 1);
        let mut state = ReactorState::initial();
        states.push(state);
        for &f in u {
            if !f.is_finite() || !(0.0..=10.0).contains(&f) {
                return Err(Error::Config(format!(
                    "control {f} outside the physical flow range [0, 10] L/s"
                )));
            }
            state = integrate_step(&state, f, self.params.t_j0_nominal, &self.params, &self.grid)?;
            states.push(state);
        }
        Ok(states)
    }
}

/// A running batch driven one control interval at a time.
#[derive(Debug)]
pub struct BatchSession<'a> {
    reactor: &'a Reactor,
    v: Vec<f64>,
    m: Vec<[f64; 2]>,
    nq: [f64; 2],
    drift: Vec<f64>,
    state: ReactorState,
    states: Vec<ReactorState>,
    observations: Vec<[f64; 2]>,
    disturbance: Vec<f64>,
    t: usize,
}

impl BatchSession<'_> {
    /// Steps already executed.
    pub fn step_index(&self) -> usize {
        self.t
    }

    pub fn is_complete(&self) -> bool {
        self.t == self.reactor.grid.n_steps
    }

    /// Current true state (the caller of a closed loop would not see this;
    /// it exists for records and tests).
    pub fn state(&self) -> &ReactorState {
        &self.state
    }

    /// Apply one flow value over the next sampling interval; returns the
    /// noisy observation (T, T_J) at the new sampling instant.
    pub fn step(&mut self, f_ow: f64) -> Result<[f64; 2]> {
        let t = self.t;
        if t >= self.reactor.grid.n_steps {
            return Err(Error::Config("batch session already complete".into()));
        }
        if !f_ow.is_finite() || !(0.0..=10.0).contains(&f_ow) {
            return Err(Error::Config(format!(
                "control u[{t}] = {f_ow} outside the physical flow range [0, 10] L/s"
            )));
        }
        let d = self.drift[t] + self.v[t];
        self.disturbance.push(d);
        let inlet = self.reactor.params.t_j0_nominal + d;
        self.state = integrate_step(&self.state, f_ow, inlet, &self.reactor.params, &self.reactor.grid)?;
        self.states.push(self.state);
        let obs = [
            self.state.temp + self.m[t][0],
            self.state.temp_jacket + self.m[t][1],
        ];
        self.observations.push(obs);
        self.t += 1;
        Ok(obs)
    }

    /// Noisy terminal quality measurement; only available once the batch
    /// has run to completion.
    pub fn terminal_quality(&self) -> Result<[f64; 2]> {
        if !self.is_complete() {
            return Err(Error::Config(
                "terminal quality is measured only after the batch completes".into(),
            ));
        }
        Ok([self.state.c_a + self.nq[0], self.state.c_b + self.nq[1]])
    }

    pub fn finish(self) -> Result<BatchOutput> {
        let terminal_quality = self.terminal_quality()?;
        Ok(BatchOutput {
            states: self.states,
            observations: self.observations,
            terminal_quality,
            disturbance: self.disturbance,
            drift: self.drift,
        })
    }
}
