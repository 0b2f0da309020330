//! Single-bus DC microgrid plant: `n` current-controlled converters, each
//! behind an output capacitor and an RL line, feeding a bus capacitor with a
//! resistive load in parallel with a constant power load (CPL).
//!
//! The state is interleaved as `(v_1, i_t1, ..., v_n, i_tn, v_L)` and the
//! input is the vector of converter source currents. Everything here is in
//! SI units.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Physical constants of the microgrid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridParams {
    /// Converter output capacitances `C_j` [F].
    pub cap: Vec<f64>,
    /// Line resistances `R_j` [Ω].
    pub res: Vec<f64>,
    /// Line inductances `L_j` [H].
    pub ind: Vec<f64>,
    /// Bus capacitance `C_L` [F].
    pub cap_load: f64,
    /// Aggregate resistive load `R_L` [Ω].
    pub res_load: f64,
    /// CPL power rating `P_L` [W]. Zero disables the CPL.
    pub p_load: f64,
    /// Voltage below which the CPL draws its saturated current [V].
    pub v_cpl_min: f64,
    /// Lower safety bound on each converter voltage [V].
    pub v_safe_lo: Vec<f64>,
    /// Upper safety bound on each converter voltage [V].
    pub v_safe_hi: Vec<f64>,
}

impl GridParams {
    /// Validates and returns the parameter set.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        cap: Vec<f64>,
        res: Vec<f64>,
        ind: Vec<f64>,
        cap_load: f64,
        res_load: f64,
        p_load: f64,
        v_cpl_min: f64,
        v_safe_lo: Vec<f64>,
        v_safe_hi: Vec<f64>,
    ) -> Result<Self> {
        let params = Self {
            cap,
            res,
            ind,
            cap_load,
            res_load,
            p_load,
            v_cpl_min,
            v_safe_lo,
            v_safe_hi,
        };
        params.validate()?;
        Ok(params)
    }

    /// The five-converter grid of the reference experiment, with a 5 V CPL
    /// cutoff and a (5 V, 50 V) safety box on every converter.
    pub fn table1() -> Self {
        let ms = |v: &[f64]| v.iter().map(|x| x * 1e-3).collect::<Vec<_>>();
        Self {
            cap: ms(&[0.49, 0.47, 0.49, 0.57, 0.47]),
            res: ms(&[8.78, 17.78, 16.78, 19.78, 27.78]),
            ind: vec![0.09, 0.08, 0.09, 0.09, 0.08],
            cap_load: 0.47e-3,
            res_load: 1.5,
            p_load: 1875.0,
            v_cpl_min: 5.0,
            v_safe_lo: vec![5.0; 5],
            v_safe_hi: vec![50.0; 5],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.cap.len();
        if n == 0 {
            return Err(Error::InvalidParams {
                field: "cap",
                reason: "at least one converter is required".into(),
            });
        }
        for (field, v) in [
            ("res", &self.res),
            ("ind", &self.ind),
            ("v_safe_lo", &self.v_safe_lo),
            ("v_safe_hi", &self.v_safe_hi),
        ] {
            if v.len() != n {
                return Err(Error::InvalidParams {
                    field,
                    reason: format!("expected {n} entries, got {}", v.len()),
                });
            }
        }
        let positive = |field: &'static str, vals: &[f64]| -> Result<()> {
            match vals.iter().find(|x| !(x.is_finite() && **x > 0.0)) {
                Some(bad) => Err(Error::InvalidParams {
                    field,
                    reason: format!("must be finite and strictly positive, got {bad}"),
                }),
                None => Ok(()),
            }
        };
        positive("cap", &self.cap)?;
        positive("res", &self.res)?;
        positive("ind", &self.ind)?;
        positive("cap_load", &[self.cap_load])?;
        positive("res_load", &[self.res_load])?;
        positive("v_cpl_min", &[self.v_cpl_min])?;
        if !(self.p_load.is_finite() && self.p_load >= 0.0) {
            return Err(Error::InvalidParams {
                field: "p_load",
                reason: format!("must be finite and non-negative, got {}", self.p_load),
            });
        }
        for j in 0..n {
            let (lo, hi) = (self.v_safe_lo[j], self.v_safe_hi[j]);
            if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                return Err(Error::InvalidParams {
                    field: "v_safe_lo",
                    reason: format!("converter {}: need lo < hi, got ({lo}, {hi})", j + 1),
                });
            }
        }
        Ok(())
    }

    /// Number of converters.
    #[inline]
    pub fn n(&self) -> usize {
        self.cap.len()
    }

    /// State dimension `2n + 1`.
    #[inline]
    pub fn state_dim(&self) -> usize {
        2 * self.n() + 1
    }

    /// Saturated CPL current; makes the IV curve continuous at the cutoff.
    #[inline]
    pub fn i_cpl_max(&self) -> f64 {
        self.p_load / self.v_cpl_min
    }
}

/// Index of converter `j`'s terminal voltage in the state vector (0-based `j`).
#[inline]
pub const fn v_idx(j: usize) -> usize {
    2 * j
}

/// Index of line `j`'s current in the state vector (0-based `j`).
#[inline]
pub const fn it_idx(j: usize) -> usize {
    2 * j + 1
}

/// Grid state `(v_1, i_t1, ..., v_n, i_tn, v_L)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GridState(pub DVector<f64>);

impl GridState {
    pub fn new(x: DVector<f64>, params: &GridParams) -> Result<Self> {
        let s = Self(x);
        s.check(params)?;
        Ok(s)
    }

    /// Builds a state from per-converter voltages, line currents and the bus voltage.
    pub fn from_parts(v: &[f64], i_t: &[f64], v_load: f64) -> Self {
        assert_eq!(v.len(), i_t.len(), "voltage and current counts differ");
        let n = v.len();
        let mut x = DVector::zeros(2 * n + 1);
        for j in 0..n {
            x[v_idx(j)] = v[j];
            x[it_idx(j)] = i_t[j];
        }
        x[2 * n] = v_load;
        Self(x)
    }

    pub fn check(&self, params: &GridParams) -> Result<()> {
        if self.0.len() != params.state_dim() {
            return Err(Error::Dimension {
                what: "grid state",
                expected: params.state_dim(),
                got: self.0.len(),
            });
        }
        if self.0.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("grid state"));
        }
        Ok(())
    }

    #[inline]
    pub fn n(&self) -> usize {
        (self.0.len() - 1) / 2
    }

    #[inline]
    pub fn v(&self, j: usize) -> f64 {
        self.0[v_idx(j)]
    }

    #[inline]
    pub fn i_t(&self, j: usize) -> f64 {
        self.0[it_idx(j)]
    }

    #[inline]
    pub fn v_load(&self) -> f64 {
        self.0[self.0.len() - 1]
    }

    pub fn voltages(&self) -> Vec<f64> {
        (0..self.n()).map(|j| self.v(j)).collect()
    }

    pub fn currents(&self) -> Vec<f64> {
        (0..self.n()).map(|j| self.i_t(j)).collect()
    }

    pub fn as_vector(&self) -> &DVector<f64> {
        &self.0
    }
}

/// Converter source currents `i_s` [A].
#[derive(Debug, Clone, PartialEq)]
pub struct ControlInput(pub DVector<f64>);

impl ControlInput {
    pub fn zeros(n: usize) -> Self {
        Self(DVector::zeros(n))
    }

    pub fn from_slice(u: &[f64]) -> Self {
        Self(DVector::from_column_slice(u))
    }

    pub fn check(&self, params: &GridParams) -> Result<()> {
        if self.0.len() != params.n() {
            return Err(Error::Dimension {
                what: "control input",
                expected: params.n(),
                got: self.0.len(),
            });
        }
        if self.0.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("control input"));
        }
        Ok(())
    }

    pub fn as_vector(&self) -> &DVector<f64> {
        &self.0
    }
}

/// Current drawn by the CPL at bus voltage `v_load`.
#[inline]
pub fn cpl_current(v_load: f64, params: &GridParams) -> f64 {
    if v_load <= params.v_cpl_min {
        params.i_cpl_max()
    } else {
        params.p_load / v_load
    }
}

/// Drift vector field `f(x)`.
pub fn drift(x: &GridState, params: &GridParams) -> DVector<f64> {
    let n = params.n();
    let v_load = x.v_load();
    let mut f = DVector::zeros(2 * n + 1);
    let mut line_sum = 0.0;
    for j in 0..n {
        let (v, i) = (x.v(j), x.i_t(j));
        f[v_idx(j)] = -i / params.cap[j];
        f[it_idx(j)] = (v - i * params.res[j] - v_load) / params.ind[j];
        line_sum += i;
    }
    f[2 * n] = (line_sum - v_load / params.res_load - cpl_current(v_load, params)) / params.cap_load;
    f
}

/// Input matrix `g`, constant in `x`: `1/C_j` at row `v_j`, column `j`.
pub fn ctrl_matrix(params: &GridParams) -> DMatrix<f64> {
    let n = params.n();
    let mut g = DMatrix::zeros(2 * n + 1, n);
    for j in 0..n {
        g[(v_idx(j), j)] = 1.0 / params.cap[j];
    }
    g
}

/// `f(x) + g u`.
pub fn vector_field(x: &GridState, u: &ControlInput, params: &GridParams) -> DVector<f64> {
    let mut dx = drift(x, params);
    for j in 0..params.n() {
        dx[v_idx(j)] += u.0[j] / params.cap[j];
    }
    dx
}

/// Analytic Jacobian `∂f/∂x`, evaluated on whichever CPL branch `v_L` sits on.
pub fn drift_jacobian(x: &GridState, params: &GridParams) -> DMatrix<f64> {
    let n = params.n();
    let dim = 2 * n + 1;
    let vl = 2 * n;
    let mut jac = DMatrix::zeros(dim, dim);
    for j in 0..n {
        let (c, r, l) = (params.cap[j], params.res[j], params.ind[j]);
        jac[(v_idx(j), it_idx(j))] = -1.0 / c;
        jac[(it_idx(j), v_idx(j))] = 1.0 / l;
        jac[(it_idx(j), it_idx(j))] = -r / l;
        jac[(it_idx(j), vl)] = -1.0 / l;
        jac[(vl, it_idx(j))] = 1.0 / params.cap_load;
    }
    let v_load = x.v_load();
    let dcpl = if v_load <= params.v_cpl_min {
        0.0
    } else {
        -params.p_load / (v_load * v_load)
    };
    jac[(vl, vl)] = -(1.0 / params.res_load + dcpl) / params.cap_load;
    jac
}

/// Stored energy `½ΣC_j v_j² + ½ΣL_j i_j² + ½C_L v_L²` [J].
pub fn stored_energy(x: &GridState, params: &GridParams) -> f64 {
    let mut e = 0.5 * params.cap_load * x.v_load().powi(2);
    for j in 0..params.n() {
        e += 0.5 * params.cap[j] * x.v(j).powi(2) + 0.5 * params.ind[j] * x.i_t(j).powi(2);
    }
    e
}
