//! Two-layer Kalman-filter ILC: an outer loop that filters and re-optimizes
//! the whole input trajectory once per batch, and an inner loop that refines
//! the remaining trajectory at every time step inside the running batch.
//! Both layers share one lifted-state estimate format, one measurement
//! model, and one economic control-design problem, so the inner loop's
//! step-zero solution coincides with the outer loop's solution.
//!
//! Everything here works in deviation variables around the model's nominal
//! trajectory, except input boxes and reported inputs, which are absolute.

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lifted::LiftedBatchModel;
use crate::reactor::NoiseConfig;
use crate::solver::{minimize_box, SolverOptions};

/// Covariances of the four noise sources in lifted-model dimensions.
#[derive(Debug, Clone)]
pub struct NoiseCovariances {
    /// Batch-to-batch drift of the repetitive disturbance (n_d x n_d).
    pub r_w: DMatrix<f64>,
    /// Within-batch random disturbance (n_d x n_d).
    pub r_v: DMatrix<f64>,
    /// Observation noise (n_z x n_z).
    pub r_m: DMatrix<f64>,
    /// Terminal quality noise (n_y x n_y).
    pub r_n: DMatrix<f64>,
}

impl NoiseCovariances {
    /// Scalar-variance-times-identity covariances from the plant noise
    /// configuration.
    pub fn from_noise_config(noise: &NoiseConfig, n_d: usize, n_z: usize, n_y: usize) -> Self {
        NoiseCovariances {
            r_w: DMatrix::identity(n_d, n_d) * noise.var_w,
            r_v: DMatrix::identity(n_d, n_d) * noise.var_v,
            r_m: DMatrix::identity(n_z, n_z) * noise.var_m,
            r_n: DMatrix::identity(n_y, n_y) * noise.var_n,
        }
    }

    /// Process-noise block for the incremental batch model: the drift step
    /// plus the two independent within-batch disturbance realizations that
    /// enter the difference of consecutive batches.
    pub fn q_block(&self) -> DMatrix<f64> {
        &self.r_w + 2.0 * &self.r_v
    }
}

/// Lifted state estimate and covariance for either filter layer.
#[derive(Debug, Clone)]
pub struct BatchKalmanState {
    /// Lifted state estimate, deviation variables, length n_x * T.
    pub x_hat: DVector<f64>,
    /// Estimate covariance, (n_x T) x (n_x T).
    pub p: DMatrix<f64>,
    /// Absolute input trajectory of the batch this estimate describes.
    pub u_applied: DVector<f64>,
}

/// Economic control-design settings shared by both ILC layers.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IlcObjectiveConfig {
    /// Target terminal quality value, mol/L.
    pub c_b_target: f64,
    /// Weight of the squared terminal-quality error (the reactor volume).
    pub volume: f64,
    /// Quadratic cost on the absolute input.
    pub flow_cost: f64,
    pub u_min: f64,
    pub u_max: f64,
    /// Which terminal-quality row is the controlled product concentration.
    pub quality_index: usize,
    pub max_iters: usize,
    /// Projected-gradient residual tolerance of the QP solver.
    pub grad_tol: f64,
}

impl Default for IlcObjectiveConfig {
    fn default() -> Self {
        IlcObjectiveConfig {
            c_b_target: 0.58,
            volume: 1200.0,
            flow_cost: 0.05,
            u_min: 0.0,
            u_max: 10.0,
            quality_index: 1,
            max_iters: 50_000,
            grad_tol: 1e-8,
        }
    }
}

/// Outer-loop control move for the next batch.
#[derive(Debug, Clone)]
pub struct IlcSolution {
    /// Input increment relative to the previous batch.
    pub delta_u: DVector<f64>,
    /// Absolute input of the next batch (within the input box).
    pub u_next: DVector<f64>,
    /// Predicted lifted state under the increment.
    pub predicted_x: DVector<f64>,
    /// Objective value at the solution.
    pub predicted_j: f64,
}

/// Inner-loop control move at one time step.
#[derive(Debug, Clone)]
pub struct WbIlcSolution {
    /// Optimal increments for times t..T-1; only the first is applied.
    pub delta_u_future: DVector<f64>,
    /// Absolute input applied at time t.
    pub applied: DVector<f64>,
    pub predicted_j: f64,
}

/// Minimum-variance measurement update.
///
/// `block_name` labels the measurement block in singularity diagnostics.
pub fn kalman_update(
    x_pred: &DVector<f64>,
    p_pred: &DMatrix<f64>,
    l: &DMatrix<f64>,
    r: &DMatrix<f64>,
    measurement: &DVector<f64>,
    block_name: &str,
) -> Result<(DVector<f64>, DMatrix<f64>, DVector<f64>)> {
    let n = x_pred.len();
    let m = measurement.len();
    if l.shape() != (m, n) || r.shape() != (m, m) {
        return Err(Error::Dimension(format!(
            "kalman update ({block_name}): L is {:?}, R is {:?}, expected ({m}, {n}) and ({m}, {m})",
            l.shape(),
            r.shape()
        )));
    }
    let innovation = measurement - l * x_pred;
    let lp = l * p_pred;
    let mut s = &lp * l.transpose() + r;
    s = (&s + s.transpose()) * 0.5;

    let eigen = SymmetricEigen::new(s.clone());
    let max_eig = eigen.eigenvalues.amax();
    let min_eig = eigen.eigenvalues.min();
    if min_eig <= 0.0 || max_eig / min_eig > 1e12 {
        return Err(Error::Estimation(format!(
            "innovation covariance for the {block_name} block is numerically singular \
             (eigenvalues in [{min_eig:.3e}, {max_eig:.3e}])"
        )));
    }
    let chol = Cholesky::new(s).ok_or_else(|| {
        Error::Estimation(format!(
            "innovation covariance for the {block_name} block is not positive definite"
        ))
    })?;
    // K = P L^T S^-1 = (S^-1 L P)^T since P and S are symmetric
    let gain = chol.solve(&lp).transpose();
    let x = x_pred + &gain * &innovation;
    let mut p = p_pred - &gain * &lp;
    p = (&p + p.transpose()) * 0.5;
    Ok((x, p, innovation))
}

/// Outer-loop prediction: carry the previous posterior forward through the
/// incremental batch model and inflate the covariance by the full-batch
/// process noise.
pub fn b2b_predict(
    prev: &BatchKalmanState,
    delta_u: &DVector<f64>,
    model: &LiftedBatchModel,
    cov: &NoiseCovariances,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let x_pred = model.incremental_predict(&prev.x_hat, delta_u)?;
    let mut p_pred = prev.p.clone();
    let q = cov.q_block();
    for t in 0..model.dims.n_steps {
        let col = model.psi_d_col(t);
        p_pred += &col * &q * col.transpose();
    }
    Ok((x_pred, p_pred))
}

/// Outer-loop measurement update with the whole batch: stacked observations
/// plus the terminal quality, both in deviation form.
pub fn b2b_update(
    x_pred: &DVector<f64>,
    p_pred: &DMatrix<f64>,
    z_dev: &DVector<f64>,
    y_dev: &DVector<f64>,
    model: &LiftedBatchModel,
    cov: &NoiseCovariances,
    u_applied: DVector<f64>,
) -> Result<(BatchKalmanState, DVector<f64>)> {
    let dims = &model.dims;
    let m_z = dims.n_z * dims.n_steps;
    if z_dev.len() != m_z || y_dev.len() != dims.n_y {
        return Err(Error::Dimension(format!(
            "batch measurements: z has {} entries (expected {m_z}), y has {} (expected {})",
            z_dev.len(),
            y_dev.len(),
            dims.n_y
        )));
    }
    let m = m_z + dims.n_y;
    let mut l = DMatrix::zeros(m, dims.lifted());
    l.view_mut((0, 0), (m_z, dims.lifted())).copy_from(&model.omega);
    l.view_mut((m_z, 0), (dims.n_y, dims.lifted()))
        .copy_from(&model.gamma);
    let mut r = DMatrix::zeros(m, m);
    for t in 0..dims.n_steps {
        r.view_mut((t * dims.n_z, t * dims.n_z), (dims.n_z, dims.n_z))
            .copy_from(&cov.r_m);
    }
    r.view_mut((m_z, m_z), (dims.n_y, dims.n_y)).copy_from(&cov.r_n);

    let mut meas = DVector::zeros(m);
    meas.rows_mut(0, m_z).copy_from(z_dev);
    meas.rows_mut(m_z, dims.n_y).copy_from(y_dev);

    let (x_hat, p, innovation) =
        kalman_update(x_pred, p_pred, &l, &r, &meas, "batch observations + quality")?;
    Ok((
        BatchKalmanState {
            x_hat,
            p,
            u_applied,
        },
        innovation,
    ))
}

/// Inner-loop prediction for one applied increment at time `t` (0-based).
pub fn wb_predict(
    x_hat: &DVector<f64>,
    p: &DMatrix<f64>,
    delta_u_t: &DVector<f64>,
    model: &LiftedBatchModel,
    cov: &NoiseCovariances,
    t: usize,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let dims = &model.dims;
    if t >= dims.n_steps {
        return Err(Error::Dimension(format!(
            "wb_predict time index {t} outside 0..{}",
            dims.n_steps
        )));
    }
    if delta_u_t.len() != dims.n_u {
        return Err(Error::Dimension(format!(
            "delta_u at one step has {} entries, expected {}",
            delta_u_t.len(),
            dims.n_u
        )));
    }
    let x_pred = x_hat + model.psi_u_col(t) * delta_u_t;
    let col = model.psi_d_col(t);
    let p_pred = p + &col * cov.q_block() * col.transpose();
    Ok((x_pred, p_pred))
}

/// Inner-loop measurement update at measurement time `time` (1-based).
///
/// At the terminal time the quality measurement joins the observation
/// block; earlier updates consume only the current observation.
pub fn wb_update(
    x_pred: &DVector<f64>,
    p_pred: &DMatrix<f64>,
    z_t_dev: &DVector<f64>,
    y_dev: Option<&DVector<f64>>,
    time: usize,
    model: &LiftedBatchModel,
    cov: &NoiseCovariances,
) -> Result<(DVector<f64>, DMatrix<f64>, DVector<f64>)> {
    let dims = &model.dims;
    if time == 0 || time > dims.n_steps {
        return Err(Error::Dimension(format!(
            "wb_update measurement time {time} outside 1..={}",
            dims.n_steps
        )));
    }
    if z_t_dev.len() != dims.n_z {
        return Err(Error::Dimension(format!(
            "observation has {} entries, expected {}",
            z_t_dev.len(),
            dims.n_z
        )));
    }
    let omega_t = model.omega_row(time);
    match y_dev {
        None => kalman_update(x_pred, p_pred, &omega_t, &cov.r_m, z_t_dev, "observation"),
        Some(y) => {
            if time != dims.n_steps {
                return Err(Error::Dimension(
                    "terminal quality can only be fused at the final time".into(),
                ));
            }
            if y.len() != dims.n_y {
                return Err(Error::Dimension(format!(
                    "terminal quality has {} entries, expected {}",
                    y.len(),
                    dims.n_y
                )));
            }
            let m = dims.n_z + dims.n_y;
            let mut l = DMatrix::zeros(m, dims.lifted());
            l.view_mut((0, 0), (dims.n_z, dims.lifted())).copy_from(&omega_t);
            l.view_mut((dims.n_z, 0), (dims.n_y, dims.lifted()))
                .copy_from(&model.gamma);
            let mut r = DMatrix::zeros(m, m);
            r.view_mut((0, 0), (dims.n_z, dims.n_z)).copy_from(&cov.r_m);
            r.view_mut((dims.n_z, dims.n_z), (dims.n_y, dims.n_y))
                .copy_from(&cov.r_n);
            let mut meas = DVector::zeros(m);
            meas.rows_mut(0, dims.n_z).copy_from(z_t_dev);
            meas.rows_mut(dims.n_z, dims.n_y).copy_from(y);
            kalman_update(x_pred, p_pred, &l, &r, &meas, "terminal observation + quality")
        }
    }
}

/// Sensitivity of the controlled terminal quality to each input entry:
/// the `quality_index` row of `Gamma Psi_u`.
fn quality_gain(model: &LiftedBatchModel, quality_index: usize) -> DVector<f64> {
    let gp = &model.gamma * &model.psi_u;
    gp.row(quality_index).transpose()
}

/// Offset of the predicted terminal quality from the target at zero increment.
fn quality_offset(
    model: &LiftedBatchModel,
    x_hat: &DVector<f64>,
    obj: &IlcObjectiveConfig,
) -> f64 {
    let y_nom = model.nominal_y_terminal();
    let y_dev = &model.gamma * x_hat;
    y_nom[obj.quality_index] + y_dev[obj.quality_index] - obj.c_b_target
}

/// Shared quadratic program of both layers:
/// minimize V (c0 + g . du)^2 + k sum (u_base + du)^2 over the input box.
fn solve_economic_qp(
    c0: f64,
    g: &DVector<f64>,
    u_base: &DVector<f64>,
    constant_cost: f64,
    obj: &IlcObjectiveConfig,
) -> Result<(DVector<f64>, f64)> {
    let n = g.len();
    let lo = DVector::from_fn(n, |i, _| obj.u_min - u_base[i]);
    let hi = DVector::from_fn(n, |i, _| obj.u_max - u_base[i]);
    let f = |du: &DVector<f64>| -> f64 {
        let q = c0 + g.dot(du);
        let flow: f64 = (0..n).map(|i| (u_base[i] + du[i]).powi(2)).sum();
        obj.volume * q * q + obj.flow_cost * flow + constant_cost
    };
    let grad = |du: &DVector<f64>| -> DVector<f64> {
        let q = c0 + g.dot(du);
        let mut out = g * (2.0 * obj.volume * q);
        for i in 0..n {
            out[i] += 2.0 * obj.flow_cost * (u_base[i] + du[i]);
        }
        out
    };
    let opts = SolverOptions {
        max_iters: obj.max_iters,
        grad_tol: Some(obj.grad_tol),
        stall: None,
        require_convergence: true,
    };
    let report = minimize_box(f, grad, &DVector::zeros(n), &lo, &hi, &opts)?;
    Ok((report.x, report.objective))
}

/// Outer-loop control design: choose the next batch's input increment under
/// the filtered state estimate.
pub fn b2b_ilc_solve(
    state: &BatchKalmanState,
    model: &LiftedBatchModel,
    obj: &IlcObjectiveConfig,
) -> Result<IlcSolution> {
    let dims = &model.dims;
    if dims.n_u != 1 {
        return Err(Error::Dimension(
            "the economic control design assumes a single input channel".into(),
        ));
    }
    if state.u_applied.len() != dims.n_steps {
        return Err(Error::Dimension(format!(
            "u_applied has {} entries, expected {}",
            state.u_applied.len(),
            dims.n_steps
        )));
    }
    let g = quality_gain(model, obj.quality_index);
    let c0 = quality_offset(model, &state.x_hat, obj);
    let (delta_u, predicted_j) = solve_economic_qp(c0, &g, &state.u_applied, 0.0, obj)?;
    let u_next = &state.u_applied + &delta_u;
    let predicted_x = model.incremental_predict(&state.x_hat, &delta_u)?;
    Ok(IlcSolution {
        delta_u,
        u_next,
        predicted_x,
        predicted_j,
    })
}

/// Inner-loop control design at time `t` (0-based): optimize the remaining
/// increments; the caller applies only the first one.
pub fn wb_ilc_solve(
    x_hat: &DVector<f64>,
    u_h: &DVector<f64>,
    model: &LiftedBatchModel,
    obj: &IlcObjectiveConfig,
    t: usize,
) -> Result<WbIlcSolution> {
    let dims = &model.dims;
    if dims.n_u != 1 {
        return Err(Error::Dimension(
            "the economic control design assumes a single input channel".into(),
        ));
    }
    if t >= dims.n_steps {
        return Err(Error::Dimension(format!(
            "wb_ilc_solve time index {t} outside 0..{}",
            dims.n_steps
        )));
    }
    if u_h.len() != dims.n_steps {
        return Err(Error::Dimension(format!(
            "u_h has {} entries, expected {}",
            u_h.len(),
            dims.n_steps
        )));
    }
    let g_full = quality_gain(model, obj.quality_index);
    let c0 = quality_offset(model, x_hat, obj);
    let future = dims.n_steps - t;
    let g = DVector::from_fn(future, |i, _| g_full[t + i]);
    let u_base = DVector::from_fn(future, |i, _| u_h[t + i]);
    // inputs already applied are constants in the decision variables but
    // still belong to the reported objective value
    let elapsed_cost: f64 = obj.flow_cost * (0..t).map(|i| u_h[i] * u_h[i]).sum::<f64>();
    let (delta_u_future, predicted_j) = solve_economic_qp(c0, &g, &u_base, elapsed_cost, obj)?;
    let applied = DVector::from_element(1, (u_h[t] + delta_u_future[0]).clamp(obj.u_min, obj.u_max));
    Ok(WbIlcSolution {
        delta_u_future,
        applied,
        predicted_j,
    })
}

/// Inner-loop filter state for the running batch.
#[derive(Debug, Clone)]
pub struct InnerState {
    pub x_hat: DVector<f64>,
    pub p: DMatrix<f64>,
    /// Absolute base input trajectory inherited from the previous batch.
    pub u_base: DVector<f64>,
}

/// Initialize the inner loop of a new batch from the outer loop's posterior
/// of the previous batch: same estimate, same covariance, same input.
pub fn hierarchical_init(posterior: &BatchKalmanState) -> InnerState {
    InnerState {
        x_hat: posterior.x_hat.clone(),
        p: posterior.p.clone(),
        u_base: posterior.u_applied.clone(),
    }
}

/// Knobs of the closed-loop informer that are not part of the economics.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IlcConfig {
    /// First-batch prior covariance scale: P_0 = p0 I.
    pub p0: f64,
    /// Refine the remaining trajectory at every step inside a batch; when
    /// false the batch plan from the outer loop is applied open-loop.
    pub within_batch: bool,
}

impl Default for IlcConfig {
    fn default() -> Self {
        IlcConfig {
            p0: 1.0,
            within_batch: true,
        }
    }
}

/// Per-batch diagnostics of the informer.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BatchIlcRecord {
    pub batch_index: u64,
    pub trace_p_posterior: f64,
    pub innovation_norm: f64,
    pub ilc_objective: f64,
    pub applied_u: Vec<f64>,
}

/// The hierarchical informer: owns both filter layers and exposes the
/// step/batch cycle the training loops and experiments drive.
#[derive(Debug, Clone)]
pub struct HierarchicalInformer {
    pub model: LiftedBatchModel,
    pub cov: NoiseCovariances,
    pub obj: IlcObjectiveConfig,
    pub cfg: IlcConfig,
    /// Outer-loop posterior after the last completed batch.
    b2b: BatchKalmanState,
    inner: InnerState,
    /// Next control index inside the running batch.
    t: usize,
    /// Increments applied so far in the running batch.
    du_applied: DVector<f64>,
    /// Batch plan used when within-batch refinement is disabled.
    plan: Option<DVector<f64>>,
    /// Deviation-form measurements collected during the running batch.
    z_dev: DVector<f64>,
    y_dev: Option<DVector<f64>>,
    z_nom: DVector<f64>,
    y_nom: DVector<f64>,
    batches_done: u64,
    last_wb_objective: f64,
}

impl HierarchicalInformer {
    pub fn new(
        model: LiftedBatchModel,
        cov: NoiseCovariances,
        obj: IlcObjectiveConfig,
        cfg: IlcConfig,
    ) -> Result<Self> {
        let dims = &model.dims;
        if dims.n_u != 1 {
            return Err(Error::Dimension(
                "the informer drives a single input channel".into(),
            ));
        }
        if obj.quality_index >= dims.n_y {
            return Err(Error::Config(format!(
                "quality_index {} outside the {} terminal-quality rows",
                obj.quality_index, dims.n_y
            )));
        }
        if !(cfg.p0.is_finite() && cfg.p0 > 0.0) {
            return Err(Error::Config(format!(
                "ilc.p0 must be finite and positive, got {}",
                cfg.p0
            )));
        }
        let lifted = dims.lifted();
        let u_nominal = DVector::from_fn(dims.n_steps, |i, _| model.nominal_u[i][0]);
        let z_nom = model.nominal_z_stacked();
        let y_nom = model.nominal_y_terminal();
        let b2b = BatchKalmanState {
            x_hat: DVector::zeros(lifted),
            p: DMatrix::identity(lifted, lifted) * cfg.p0,
            u_applied: u_nominal,
        };
        let inner = hierarchical_init(&b2b);
        let n_steps = dims.n_steps;
        Ok(HierarchicalInformer {
            model,
            cov,
            obj,
            cfg,
            b2b,
            inner,
            t: 0,
            du_applied: DVector::zeros(n_steps),
            plan: None,
            z_dev: DVector::zeros(0),
            y_dev: None,
            z_nom,
            y_nom,
            batches_done: 0,
            last_wb_objective: f64::NAN,
        })
    }

    pub fn batches_done(&self) -> u64 {
        self.batches_done
    }

    /// Outer-loop posterior of the last completed batch.
    pub fn outer_posterior(&self) -> &BatchKalmanState {
        &self.b2b
    }

    /// Absolute base input of the running batch.
    pub fn u_base(&self) -> &DVector<f64> {
        &self.inner.u_base
    }

    /// Absolute state estimate at sampling instant `time` (0..=n_steps) of
    /// the running batch; instant 0 is the known initial state.
    pub fn estimate_abs(&self, time: usize) -> DVector<f64> {
        let n_x = self.model.dims.n_x;
        if time == 0 {
            return self.model.nominal_x[0].clone();
        }
        &self.model.nominal_x[time] + self.inner.x_hat.rows((time - 1) * n_x, n_x).clone_owned()
    }

    /// Reset the inner loop for a new batch from the outer posterior.
    pub fn begin_batch(&mut self) -> Result<()> {
        self.inner = hierarchical_init(&self.b2b);
        self.t = 0;
        self.du_applied.fill(0.0);
        self.z_dev = DVector::zeros(self.model.dims.n_z * self.model.dims.n_steps);
        self.y_dev = None;
        self.plan = if self.cfg.within_batch {
            None
        } else {
            let solution = b2b_ilc_solve(&self.b2b, &self.model, &self.obj)?;
            self.last_wb_objective = solution.predicted_j;
            Some(solution.u_next)
        };
        Ok(())
    }

    /// Expert action for the current step (absolute flow).
    pub fn compute_action(&mut self) -> Result<f64> {
        let t = self.t;
        if t >= self.model.dims.n_steps {
            return Err(Error::Dimension(
                "compute_action called past the end of the batch".into(),
            ));
        }
        match &self.plan {
            Some(u_plan) => Ok(u_plan[t].clamp(self.obj.u_min, self.obj.u_max)),
            None => {
                let solution =
                    wb_ilc_solve(&self.inner.x_hat, &self.inner.u_base, &self.model, &self.obj, t)?;
                self.last_wb_objective = solution.predicted_j;
                Ok(solution.applied[0])
            }
        }
    }

    /// Advance the inner loop after the plant executed `u_applied_abs` and
    /// produced the absolute observation `z_next_abs` at instant t+1. The
    /// terminal quality measurement must accompany the final step.
    pub fn advance(
        &mut self,
        u_applied_abs: f64,
        z_next_abs: &[f64],
        y_terminal_abs: Option<&[f64]>,
    ) -> Result<()> {
        let dims = self.model.dims;
        let t = self.t;
        if t >= dims.n_steps {
            return Err(Error::Dimension("advance called past the end of the batch".into()));
        }
        if z_next_abs.len() != dims.n_z {
            return Err(Error::Dimension(format!(
                "observation has {} entries, expected {}",
                z_next_abs.len(),
                dims.n_z
            )));
        }
        let at_terminal = t + 1 == dims.n_steps;
        if at_terminal != y_terminal_abs.is_some() {
            return Err(Error::Config(
                "terminal quality must be supplied exactly at the final step".into(),
            ));
        }

        let du = u_applied_abs - self.inner.u_base[t];
        self.du_applied[t] = du;
        let du_vec = DVector::from_element(1, du);
        let (x_pred, p_pred) =
            wb_predict(&self.inner.x_hat, &self.inner.p, &du_vec, &self.model, &self.cov, t)?;

        let time = t + 1;
        let z_dev = DVector::from_fn(dims.n_z, |i, _| {
            z_next_abs[i] - self.z_nom[(time - 1) * dims.n_z + i]
        });
        self.z_dev
            .rows_mut((time - 1) * dims.n_z, dims.n_z)
            .copy_from(&z_dev);
        let y_dev = y_terminal_abs.map(|y| DVector::from_fn(dims.n_y, |i, _| y[i] - self.y_nom[i]));
        self.y_dev = y_dev.clone();

        let (x_hat, p, _innovation) = wb_update(
            &x_pred,
            &p_pred,
            &z_dev,
            y_dev.as_ref(),
            time,
            &self.model,
            &self.cov,
        )?;
        self.inner.x_hat = x_hat;
        self.inner.p = p;
        self.t = time;
        Ok(())
    }

    /// Close the batch: run the outer-loop filter over the collected batch
    /// measurements and make its posterior the next batch's starting point.
    pub fn finish_batch(&mut self) -> Result<BatchIlcRecord> {
        let dims = self.model.dims;
        if self.t != dims.n_steps {
            return Err(Error::Config(format!(
                "finish_batch called after {} of {} steps",
                self.t, dims.n_steps
            )));
        }
        let y_dev = self
            .y_dev
            .clone()
            .ok_or_else(|| Error::Config("terminal quality missing at batch end".into()))?;

        let u_applied = &self.inner.u_base + &self.du_applied;
        let delta_u_batch = &u_applied - &self.b2b.u_applied;
        let (x_pred, p_pred) = b2b_predict(&self.b2b, &delta_u_batch, &self.model, &self.cov)?;
        let (posterior, innovation) = b2b_update(
            &x_pred,
            &p_pred,
            &self.z_dev,
            &y_dev,
            &self.model,
            &self.cov,
            u_applied.clone(),
        )?;
        self.b2b = posterior;
        self.batches_done += 1;
        Ok(BatchIlcRecord {
            batch_index: self.batches_done,
            trace_p_posterior: self.b2b.p.trace(),
            innovation_norm: innovation.norm(),
            ilc_objective: self.last_wb_objective,
            applied_u: u_applied.as_slice().to_vec(),
        })
    }
}
