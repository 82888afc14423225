//! Linearization of the plant along a nominal trajectory and the lifted
//! batch-wise form of the resulting linear time-varying model: the whole
//! batch becomes one linear map from (initial state, inputs, disturbances)
//! to the stacked state trajectory, with block-structured observation and
//! terminal-quality maps.
//!
//! All lifted-model quantities are deviations from the stored nominal
//! trajectory; absolute values are recovered by adding nominals at module
//! boundaries.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::reactor::{integrate_step, BatchTimeGrid, ReactorParams, ReactorState};

/// Dimensions of one batch model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub n_x: usize,
    pub n_u: usize,
    pub n_d: usize,
    pub n_z: usize,
    pub n_y: usize,
    pub n_steps: usize,
}

impl ModelDims {
    /// Length of the stacked state vector.
    pub fn lifted(&self) -> usize {
        self.n_x * self.n_steps
    }
}

/// Time-varying matrices of the one-step model
/// `x(t+1) = A(t) x(t) + B_u(t) u(t) + B_d(t) d(t)`,
/// with observations `z(t) = F(t) x(t)` and terminal quality `y(T) = C_T x(T)`.
#[derive(Debug, Clone)]
pub struct LtvMatrices {
    pub a: Vec<DMatrix<f64>>,
    pub b_u: Vec<DMatrix<f64>>,
    pub b_d: Vec<DMatrix<f64>>,
    /// Observation selectors for measurement times 1..=n_steps.
    pub f_obs: Vec<DMatrix<f64>>,
    pub c_t: DMatrix<f64>,
}

impl LtvMatrices {
    pub fn dims(&self) -> Result<ModelDims> {
        let n_steps = self.a.len();
        if n_steps == 0 {
            return Err(Error::Dimension("LTV model needs at least one step".into()));
        }
        if self.b_u.len() != n_steps || self.b_d.len() != n_steps || self.f_obs.len() != n_steps {
            return Err(Error::Dimension(format!(
                "LTV matrix lists disagree: A {}, B_u {}, B_d {}, F {}",
                self.a.len(),
                self.b_u.len(),
                self.b_d.len(),
                self.f_obs.len()
            )));
        }
        let n_x = self.a[0].nrows();
        let n_u = self.b_u[0].ncols();
        let n_d = self.b_d[0].ncols();
        let n_z = self.f_obs[0].nrows();
        let n_y = self.c_t.nrows();
        for t in 0..n_steps {
            if self.a[t].shape() != (n_x, n_x)
                || self.b_u[t].shape() != (n_x, n_u)
                || self.b_d[t].shape() != (n_x, n_d)
                || self.f_obs[t].shape() != (n_z, n_x)
            {
                return Err(Error::Dimension(format!(
                    "inconsistent LTV matrix shapes at step {t}"
                )));
            }
            for m in [&self.a[t], &self.b_u[t], &self.b_d[t]] {
                if m.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Numeric(format!(
                        "non-finite LTV matrix entry at step {t}"
                    )));
                }
            }
        }
        if self.c_t.ncols() != n_x {
            return Err(Error::Dimension(
                "terminal quality matrix must have n_x columns".into(),
            ));
        }
        Ok(ModelDims {
            n_x,
            n_u,
            n_d,
            n_z,
            n_y,
            n_steps,
        })
    }
}

/// Lifted batch-wise model: `x = Phi x(0) + Psi_u u + Psi_d d`,
/// `z = Omega x`, `y(T) = Gamma x`, all in deviation variables.
#[derive(Debug, Clone)]
pub struct LiftedBatchModel {
    pub dims: ModelDims,
    /// (n_x T) x n_x
    pub phi: DMatrix<f64>,
    /// (n_x T) x (n_u T), block lower triangular
    pub psi_u: DMatrix<f64>,
    /// (n_x T) x (n_d T), block lower triangular
    pub psi_d: DMatrix<f64>,
    /// (n_z T) x (n_x T), block diagonal
    pub omega: DMatrix<f64>,
    /// n_y x (n_x T), nonzero only in the last block column
    pub gamma: DMatrix<f64>,
    /// Nominal states at instants 0..=n_steps (absolute values).
    pub nominal_x: Vec<DVector<f64>>,
    /// Nominal inputs at intervals 0..n_steps (absolute values).
    pub nominal_u: Vec<DVector<f64>>,
}

impl LiftedBatchModel {
    /// Block column of `Psi_u` for input time `t` (0-based).
    pub fn psi_u_col(&self, t: usize) -> DMatrix<f64> {
        let n_u = self.dims.n_u;
        self.psi_u.columns(t * n_u, n_u).into_owned()
    }

    /// Block column of `Psi_d` for disturbance time `t` (0-based).
    pub fn psi_d_col(&self, t: usize) -> DMatrix<f64> {
        let n_d = self.dims.n_d;
        self.psi_d.columns(t * n_d, n_d).into_owned()
    }

    /// Block row of `Omega` for measurement time `t` (1-based).
    pub fn omega_row(&self, t: usize) -> DMatrix<f64> {
        let n_z = self.dims.n_z;
        self.omega.rows((t - 1) * n_z, n_z).into_owned()
    }

    /// Stacked nominal observations for measurement times 1..=n_steps,
    /// computed by applying the observation blocks to the nominal states.
    pub fn nominal_z_stacked(&self) -> DVector<f64> {
        let n_z = self.dims.n_z;
        let n_x = self.dims.n_x;
        let mut z = DVector::zeros(n_z * self.dims.n_steps);
        for t in 1..=self.dims.n_steps {
            let block = self.omega.view(((t - 1) * n_z, (t - 1) * n_x), (n_z, n_x));
            let zt = block * &self.nominal_x[t];
            z.rows_mut((t - 1) * n_z, n_z).copy_from(&zt);
        }
        z
    }

    /// Nominal terminal quality, from the last block column of `gamma`.
    pub fn nominal_y_terminal(&self) -> DVector<f64> {
        let n_x = self.dims.n_x;
        let n = self.dims.n_steps;
        let block = self.gamma.view((0, (n - 1) * n_x), (self.dims.n_y, n_x));
        block * &self.nominal_x[n]
    }

    /// `x = Phi x0 + Psi_u u + Psi_d d` (deviation variables).
    pub fn predict_batch(
        &self,
        x0: &DVector<f64>,
        u: &DVector<f64>,
        d: &DVector<f64>,
    ) -> Result<DVector<f64>> {
        let dims = &self.dims;
        if x0.len() != dims.n_x {
            return Err(Error::Dimension(format!(
                "x0 has {} entries, expected {}",
                x0.len(),
                dims.n_x
            )));
        }
        if u.len() != dims.n_u * dims.n_steps {
            return Err(Error::Dimension(format!(
                "u has {} entries, expected {}",
                u.len(),
                dims.n_u * dims.n_steps
            )));
        }
        if d.len() != dims.n_d * dims.n_steps {
            return Err(Error::Dimension(format!(
                "d has {} entries, expected {}",
                d.len(),
                dims.n_d * dims.n_steps
            )));
        }
        Ok(&self.phi * x0 + &self.psi_u * u + &self.psi_d * d)
    }

    /// `x = x_prev + Psi_u delta_u`: the noise-free batch-to-batch increment.
    pub fn incremental_predict(
        &self,
        x_prev: &DVector<f64>,
        delta_u: &DVector<f64>,
    ) -> Result<DVector<f64>> {
        let dims = &self.dims;
        if x_prev.len() != dims.lifted() {
            return Err(Error::Dimension(format!(
                "x_prev has {} entries, expected {}",
                x_prev.len(),
                dims.lifted()
            )));
        }
        if delta_u.len() != dims.n_u * dims.n_steps {
            return Err(Error::Dimension(format!(
                "delta_u has {} entries, expected {}",
                delta_u.len(),
                dims.n_u * dims.n_steps
            )));
        }
        Ok(x_prev + &self.psi_u * delta_u)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&LiftedModelFile::from(self))?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: LiftedModelFile = serde_json::from_str(text)?;
        file.try_into()
    }
}

/// JSON layout for model caching: explicit dimensions plus row-major values,
/// so readers in any language can load it without knowing this crate's
/// matrix memory order.
#[derive(Debug, Serialize, Deserialize)]
struct MatrixJson {
    rows: usize,
    cols: usize,
    /// Row-major entries, length rows*cols.
    data: Vec<f64>,
}

impl From<&DMatrix<f64>> for MatrixJson {
    fn from(m: &DMatrix<f64>) -> Self {
        let mut data = Vec::with_capacity(m.nrows() * m.ncols());
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                data.push(m[(i, j)]);
            }
        }
        MatrixJson {
            rows: m.nrows(),
            cols: m.ncols(),
            data,
        }
    }
}

impl TryFrom<MatrixJson> for DMatrix<f64> {
    type Error = Error;
    fn try_from(m: MatrixJson) -> Result<Self> {
        if m.data.len() != m.rows * m.cols {
            return Err(Error::Dimension(format!(
                "matrix payload has {} values for a {}x{} matrix",
                m.data.len(),
                m.rows,
                m.cols
            )));
        }
        Ok(DMatrix::from_row_slice(m.rows, m.cols, &m.data))
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct LiftedModelFile {
    schema_version: u32,
    dims: ModelDims,
    phi: MatrixJson,
    psi_u: MatrixJson,
    psi_d: MatrixJson,
    omega: MatrixJson,
    gamma: MatrixJson,
    nominal_x: Vec<Vec<f64>>,
    nominal_u: Vec<Vec<f64>>,
}

impl From<&LiftedBatchModel> for LiftedModelFile {
    fn from(m: &LiftedBatchModel) -> Self {
        LiftedModelFile {
            schema_version: 1,
            dims: m.dims,
            phi: (&m.phi).into(),
            psi_u: (&m.psi_u).into(),
            psi_d: (&m.psi_d).into(),
            omega: (&m.omega).into(),
            gamma: (&m.gamma).into(),
            nominal_x: m.nominal_x.iter().map(|v| v.as_slice().to_vec()).collect(),
            nominal_u: m.nominal_u.iter().map(|v| v.as_slice().to_vec()).collect(),
        }
    }
}

impl TryFrom<LiftedModelFile> for LiftedBatchModel {
    type Error = Error;
    fn try_from(f: LiftedModelFile) -> Result<Self> {
        if f.schema_version != 1 {
            return Err(Error::Config(format!(
                "unsupported lifted-model schema version {}",
                f.schema_version
            )));
        }
        Ok(LiftedBatchModel {
            dims: f.dims,
            phi: f.phi.try_into()?,
            psi_u: f.psi_u.try_into()?,
            psi_d: f.psi_d.try_into()?,
            omega: f.omega.try_into()?,
            gamma: f.gamma.try_into()?,
            nominal_x: f.nominal_x.iter().map(|v| DVector::from_row_slice(v)).collect(),
            nominal_u: f.nominal_u.iter().map(|v| DVector::from_row_slice(v)).collect(),
        })
    }
}

/// Central finite-difference Jacobians of the one-interval map along the
/// nominal trajectory, evaluated at disturbance zero.
///
/// The observation rows select (T, T_J); the terminal-quality rows select
/// (C_A, C_B).
pub fn linearize(
    params: &ReactorParams,
    grid: &BatchTimeGrid,
    nominal_x: &[ReactorState],
    nominal_u: &[f64],
) -> Result<LtvMatrices> {
    let n = grid.n_steps;
    if nominal_x.len() != n + 1 || nominal_u.len() != n {
        return Err(Error::Dimension(format!(
            "nominal trajectory has {} states / {} inputs, expected {} / {}",
            nominal_x.len(),
            nominal_u.len(),
            n + 1,
            n
        )));
    }
    let step = |x: &DVector<f64>, u: f64, d: f64| -> Result<DVector<f64>> {
        let s = ReactorState {
            c_a: x[0],
            c_b: x[1],
            temp: x[2],
            temp_jacket: x[3],
        };
        let next = integrate_step(&s, u, params.t_j0_nominal + d, params, grid)?;
        Ok(DVector::from_row_slice(&[
            next.c_a,
            next.c_b,
            next.temp,
            next.temp_jacket,
        ]))
    };

    let fd = |v: f64| -> f64 { (1e-6 * v.abs()).max(1e-8) };
    let mut a = Vec::with_capacity(n);
    let mut b_u = Vec::with_capacity(n);
    let mut b_d = Vec::with_capacity(n);
    let mut f_obs = Vec::with_capacity(n);
    for t in 0..n {
        let x = DVector::from_row_slice(&[
            nominal_x[t].c_a,
            nominal_x[t].c_b,
            nominal_x[t].temp,
            nominal_x[t].temp_jacket,
        ]);
        let u = nominal_u[t];

        let mut at = DMatrix::zeros(4, 4);
        for j in 0..4 {
            let h = fd(x[j]);
            // Concentrations live on [0, inf); a minus-side probe below zero
            // would be clamped by the integrator, so switch to a one-sided
            // second-order stencil at the boundary.
            let col = if j < 2 && x[j] - h < 0.0 {
                let f0 = step(&x, u, 0.0)?;
                let mut x1 = x.clone();
                x1[j] += h;
                let f1 = step(&x1, u, 0.0)?;
                let mut x2 = x.clone();
                x2[j] += 2.0 * h;
                let f2 = step(&x2, u, 0.0)?;
                (f1 * 4.0 - f2 - f0 * 3.0) / (2.0 * h)
            } else {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[j] += h;
                xm[j] -= h;
                (step(&xp, u, 0.0)? - step(&xm, u, 0.0)?) / (2.0 * h)
            };
            at.set_column(j, &col);
        }
        let hu = fd(u);
        // keep both probe points inside the admissible flow range
        let but = if u - hu < 0.0 {
            let f0 = step(&x, u, 0.0)?;
            let f1 = step(&x, u + hu, 0.0)?;
            let f2 = step(&x, u + 2.0 * hu, 0.0)?;
            (f1 * 4.0 - f2 - f0 * 3.0) / (2.0 * hu)
        } else {
            (step(&x, u + hu, 0.0)? - step(&x, u - hu, 0.0)?) / (2.0 * hu)
        };
        let hd = 1e-4;
        let bdt = (step(&x, u, hd)? - step(&x, u, -hd)?) / (2.0 * hd);

        if at.iter().any(|v| !v.is_finite())
            || but.iter().any(|v| !v.is_finite())
            || bdt.iter().any(|v| !v.is_finite())
        {
            return Err(Error::Numeric(format!(
                "non-finite Jacobian entries at step {t}"
            )));
        }
        a.push(at);
        b_u.push(DMatrix::from_column_slice(4, 1, but.as_slice()));
        b_d.push(DMatrix::from_column_slice(4, 1, bdt.as_slice()));
        f_obs.push(DMatrix::from_row_slice(
            2,
            4,
            &[0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0],
        ));
    }
    let c_t = DMatrix::from_row_slice(2, 4, &[1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
    Ok(LtvMatrices {
        a,
        b_u,
        b_d,
        f_obs,
        c_t,
    })
}

/// Assemble the lifted batch-wise matrices from one-step LTV matrices.
pub fn build_lifted(
    ltv: &LtvMatrices,
    nominal_x: Vec<DVector<f64>>,
    nominal_u: Vec<DVector<f64>>,
) -> Result<LiftedBatchModel> {
    let dims = ltv.dims()?;
    let (n_x, n_u, n_d, n_z, n_y, n) = (
        dims.n_x,
        dims.n_u,
        dims.n_d,
        dims.n_z,
        dims.n_y,
        dims.n_steps,
    );
    if nominal_x.len() != n + 1 || nominal_u.len() != n {
        return Err(Error::Dimension(format!(
            "nominal trajectory has {} states / {} inputs, expected {} / {}",
            nominal_x.len(),
            nominal_u.len(),
            n + 1,
            n
        )));
    }
    let lifted = dims.lifted();

    // Phi: block row i holds A(i) ... A(0)
    let mut phi = DMatrix::zeros(lifted, n_x);
    let mut acc = DMatrix::identity(n_x, n_x);
    for i in 0..n {
        acc = &ltv.a[i] * &acc;
        phi.view_mut((i * n_x, 0), (n_x, n_x)).copy_from(&acc);
    }

    // Psi blocks: (i, j) = A(i) ... A(j+1) B(j) for j <= i, built by
    // propagating each input column forward.
    let mut psi_u = DMatrix::zeros(lifted, n_u * n);
    let mut psi_d = DMatrix::zeros(lifted, n_d * n);
    for j in 0..n {
        let mut blk_u = ltv.b_u[j].clone();
        let mut blk_d = ltv.b_d[j].clone();
        for i in j..n {
            if i > j {
                blk_u = &ltv.a[i] * &blk_u;
                blk_d = &ltv.a[i] * &blk_d;
            }
            psi_u
                .view_mut((i * n_x, j * n_u), (n_x, n_u))
                .copy_from(&blk_u);
            psi_d
                .view_mut((i * n_x, j * n_d), (n_x, n_d))
                .copy_from(&blk_d);
        }
    }

    let mut omega = DMatrix::zeros(n_z * n, lifted);
    for t in 0..n {
        omega
            .view_mut((t * n_z, t * n_x), (n_z, n_x))
            .copy_from(&ltv.f_obs[t]);
    }
    let mut gamma = DMatrix::zeros(n_y, lifted);
    gamma
        .view_mut((0, (n - 1) * n_x), (n_y, n_x))
        .copy_from(&ltv.c_t);

    Ok(LiftedBatchModel {
        dims,
        phi,
        psi_u,
        psi_d,
        omega,
        gamma,
        nominal_x,
        nominal_u,
    })
}
