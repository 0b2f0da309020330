//! Output coordinates and feedback linearization.
//!
//! Outputs are the bus-voltage error `h_0 = v_L - v*` (relative degree 3)
//! and the neighbouring terminal-voltage differences `h_j = v_j - v_{j+1}`
//! (relative degree 1). Stacking `h_0` with its first two Lie derivatives
//! and the `h_j` gives `η ∈ R^{n+2}`; the remaining coordinates are the
//! current-sharing mismatches `z_j = R_j i_j - R_{j+1} i_{j+1}`.
//!
//! All derivatives are closed forms valid on the constant-power branch of
//! the load (`v_L > V_min`).

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::equilibrium::Equilibrium;
use crate::error::{Error, Result};
use crate::model::{drift, it_idx, v_idx, ControlInput, GridParams, GridState};

/// Largest accepted condition number of the decoupling matrix.
pub const MAX_DECOUPLING_CONDITION: f64 = 1e12;

#[derive(Debug, Clone, PartialEq)]
pub struct OutputCoords {
    /// `(h_0, L_f h_0, L_f² h_0, h_1, ..., h_{n-1})`
    pub eta: DVector<f64>,
    /// `z_j = R_j i_j - R_{j+1} i_{j+1}`
    pub zee: DVector<f64>,
    /// `∂(η, z)/∂x`, rows ordered as `η` then `z`.
    pub jac: DMatrix<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OutputDynamics {
    pub f_eta: DVector<f64>,
    /// `(n+2) × n`; the first two rows vanish identically.
    pub g_eta: DMatrix<f64>,
    pub f_reduced: DVector<f64>,
    pub g_reduced: DMatrix<f64>,
}

impl OutputDynamics {
    /// Dynamics in terms of the input offset `u − u_ref`: the drift becomes
    /// `f_η + g_η u_ref`, which vanishes at a forced equilibrium.
    pub fn about_input(&self, u_ref: &ControlInput) -> Self {
        let f_eta = &self.f_eta + &self.g_eta * &u_ref.0;
        let f_reduced = &self.f_reduced + &self.g_reduced * &u_ref.0;
        Self {
            f_eta,
            g_eta: self.g_eta.clone(),
            f_reduced,
            g_reduced: self.g_reduced.clone(),
        }
    }
}

/// Closed-loop pole locations [rad/s].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoleSpec {
    /// Poles of the third-order bus-voltage chain.
    pub chain: [f64; 3],
    /// One pole per voltage-difference channel (`n - 1` entries).
    pub channels: Vec<f64>,
}

impl PoleSpec {
    pub fn default_for(n: usize) -> Self {
        Self {
            chain: [-2.0e3, -4.0e3, -6.0e3],
            channels: vec![-2.0e3; n.saturating_sub(1)],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BrunovskyPair {
    pub f: DMatrix<f64>,
    pub g: DMatrix<f64>,
    pub k: DMatrix<f64>,
    pub a_cl: DMatrix<f64>,
}

/// `L_f h_0` through `L_f³ h_0` together with the gradient data they share.
struct BusChain {
    y1: f64,
    y2: f64,
    y3: f64,
    grad_y1: DVector<f64>,
    grad_y2: DVector<f64>,
}

fn require_smooth_branch(x: &GridState, params: &GridParams) -> Result<()> {
    x.check(params)?;
    if x.v_load() <= params.v_cpl_min {
        return Err(Error::SaturatedLoad {
            v_load: x.v_load(),
            v_min: params.v_cpl_min,
        });
    }
    Ok(())
}

fn bus_chain(x: &GridState, params: &GridParams) -> BusChain {
    let n = params.n();
    let vl_i = 2 * n;
    let (c_l, r_l, p_l) = (params.cap_load, params.res_load, params.p_load);
    let vl = x.v_load();

    // φ(v) = v/R_L + P_L/v is the total load current on the smooth branch
    let phi = vl / r_l + p_l / vl;
    let dphi = 1.0 / r_l - p_l / (vl * vl);
    let d2phi = 2.0 * p_l / (vl * vl * vl);

    let line_sum: f64 = (0..n).map(|j| x.i_t(j)).sum();
    let f_l = (line_sum - phi) / c_l;
    let mut line_accel = 0.0;
    let mut inv_ind_sum = 0.0;
    for j in 0..n {
        line_accel += (x.v(j) - params.res[j] * x.i_t(j) - vl) / params.ind[j];
        inv_ind_sum += 1.0 / params.ind[j];
    }

    let y1 = f_l;
    let y2 = (line_accel - dphi * f_l) / c_l;

    let mut grad_y1 = DVector::zeros(2 * n + 1);
    let mut grad_y2 = DVector::zeros(2 * n + 1);
    for j in 0..n {
        grad_y1[it_idx(j)] = 1.0 / c_l;
        grad_y2[v_idx(j)] = 1.0 / (params.ind[j] * c_l);
        grad_y2[it_idx(j)] = (-params.res[j] / params.ind[j] - dphi / c_l) / c_l;
    }
    grad_y1[vl_i] = -dphi / c_l;
    grad_y2[vl_i] = (-inv_ind_sum - d2phi * f_l + dphi * dphi / c_l) / c_l;

    let y3 = grad_y2.dot(&drift(x, params));
    BusChain {
        y1,
        y2,
        y3,
        grad_y1,
        grad_y2,
    }
}

/// Output coordinates `Φ(x) = (η, z)` and their Jacobian.
pub fn outputs(x: &GridState, eq: &Equilibrium, params: &GridParams) -> Result<OutputCoords> {
    require_smooth_branch(x, params)?;
    let n = params.n();
    let dim = 2 * n + 1;
    let chain = bus_chain(x, params);

    let mut eta = DVector::zeros(n + 2);
    eta[0] = x.v_load() - eq.v_bus_target;
    eta[1] = chain.y1;
    eta[2] = chain.y2;
    let mut zee = DVector::zeros(n - 1);
    let mut jac = DMatrix::zeros(dim, dim);
    jac[(0, 2 * n)] = 1.0;
    jac.row_mut(1).copy_from(&chain.grad_y1.transpose());
    jac.row_mut(2).copy_from(&chain.grad_y2.transpose());
    for j in 0..n - 1 {
        eta[3 + j] = x.v(j) - x.v(j + 1);
        jac[(3 + j, v_idx(j))] = 1.0;
        jac[(3 + j, v_idx(j + 1))] = -1.0;

        zee[j] = params.res[j] * x.i_t(j) - params.res[j + 1] * x.i_t(j + 1);
        jac[(n + 2 + j, it_idx(j))] = params.res[j];
        jac[(n + 2 + j, it_idx(j + 1))] = -params.res[j + 1];
    }
    Ok(OutputCoords { eta, zee, jac })
}

/// Drift and input matrix of `η̇ = f_η + g_η u`.
///
/// Fails when the decoupling matrix `g̃_η` is numerically singular.
pub fn output_dynamics(
    x: &GridState,
    _eq: &Equilibrium,
    params: &GridParams,
) -> Result<OutputDynamics> {
    require_smooth_branch(x, params)?;
    let n = params.n();
    let chain = bus_chain(x, params);

    let mut f_eta = DVector::zeros(n + 2);
    let mut g_eta = DMatrix::zeros(n + 2, n);
    f_eta[0] = chain.y1;
    f_eta[1] = chain.y2;
    f_eta[2] = chain.y3;
    for k in 0..n {
        g_eta[(2, k)] = chain.grad_y2[v_idx(k)] / params.cap[k];
    }
    for j in 0..n - 1 {
        f_eta[3 + j] = -x.i_t(j) / params.cap[j] + x.i_t(j + 1) / params.cap[j + 1];
        g_eta[(3 + j, j)] = 1.0 / params.cap[j];
        g_eta[(3 + j, j + 1)] = -1.0 / params.cap[j + 1];
    }
    let f_reduced = f_eta.rows(2, n).into_owned();
    let g_reduced = g_eta.rows(2, n).into_owned();

    let sv = g_reduced.singular_values();
    let cond = sv.max() / sv.min();
    if cond.is_nan() || cond > MAX_DECOUPLING_CONDITION {
        return Err(Error::IllConditionedDecoupling(cond));
    }
    Ok(OutputDynamics {
        f_eta,
        g_eta,
        f_reduced,
        g_reduced,
    })
}

/// Monic characteristic polynomial coefficients `[c_0, c_1, ..., c_{d-1}]`
/// of the given real roots (leading coefficient 1 omitted).
fn poly_from_roots(roots: &[f64]) -> Vec<f64> {
    let mut coeffs = vec![1.0];
    for &r in roots {
        let mut next = vec![0.0; coeffs.len() + 1];
        for (i, c) in coeffs.iter().enumerate() {
            next[i + 1] += c;
            next[i] -= r * c;
        }
        coeffs = next;
    }
    coeffs.pop();
    coeffs
}

/// Block Brunovsky pair for one third-order chain plus `n - 1` integrators,
/// with `K` chosen so that `F + G K` has the requested poles.
pub fn make_brunovsky(n: usize, poles: &PoleSpec) -> Result<BrunovskyPair> {
    if n == 0 {
        return Err(Error::InvalidParams {
            field: "n",
            reason: "at least one converter is required".into(),
        });
    }
    if poles.channels.len() != n - 1 {
        return Err(Error::Dimension {
            what: "channel poles",
            expected: n - 1,
            got: poles.channels.len(),
        });
    }
    if let Some(&bad) = poles
        .chain
        .iter()
        .chain(&poles.channels)
        .find(|p| !(p.is_finite() && **p < 0.0))
    {
        return Err(Error::UnstablePole(bad));
    }

    let d = n + 2;
    let mut f = DMatrix::zeros(d, d);
    f[(0, 1)] = 1.0;
    f[(1, 2)] = 1.0;
    let mut g = DMatrix::zeros(d, n);
    for k in 0..n {
        g[(2 + k, k)] = 1.0;
    }

    let mut k = DMatrix::zeros(n, d);
    let c = poly_from_roots(&poles.chain);
    for i in 0..3 {
        k[(0, i)] = -c[i];
    }
    for (j, &p) in poles.channels.iter().enumerate() {
        k[(1 + j, 3 + j)] = p;
    }
    let a_cl = &f + &g * &k;
    Ok(BrunovskyPair { f, g, k, a_cl })
}

/// `u_FL = g̃_η⁻¹ (−f̃_η + K η)`.
pub fn feedback_linearizing_control(
    x: &GridState,
    eq: &Equilibrium,
    brunovsky: &BrunovskyPair,
    params: &GridParams,
) -> Result<ControlInput> {
    let coords = outputs(x, eq, params)?;
    let dynamics = output_dynamics(x, eq, params)?;
    fl_from_parts(&coords.eta, &dynamics, brunovsky)
}

pub(crate) fn fl_from_parts(
    eta: &DVector<f64>,
    dynamics: &OutputDynamics,
    brunovsky: &BrunovskyPair,
) -> Result<ControlInput> {
    let rhs = &brunovsky.k * eta - &dynamics.f_reduced;
    let u = dynamics
        .g_reduced
        .clone()
        .lu()
        .solve(&rhs)
        .ok_or(Error::Singular("decoupling matrix"))?;
    if u.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("feedback-linearizing control"));
    }
    Ok(ControlInput(u))
}

/// Decay rate `-(R_j + R_{j+1}) / (L_j + L_{j+1})` of the `j`-th sharing
/// mismatch once the outputs are pinned (exact for two converters).
pub fn pairwise_zero_dynamics_rate(params: &GridParams, j: usize) -> f64 {
    -(params.res[j] + params.res[j + 1]) / (params.ind[j] + params.ind[j + 1])
}
