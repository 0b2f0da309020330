//! Minimum-loss operating point for a chosen bus voltage.
//!
//! Among the infinitely many equilibria with `v_L = v*`, the one that
//! minimizes `Σ R_j i_j²` subject to the lines carrying the load current
//! splits that current in inverse proportion to the line resistances.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::model::{it_idx, v_idx, ControlInput, GridParams, GridState};

#[derive(Debug, Clone, PartialEq)]
pub struct Equilibrium {
    pub x_star: GridState,
    pub u_star: ControlInput,
    pub v_bus_target: f64,
}

impl Equilibrium {
    /// Line current split `i*_t`.
    pub fn line_currents(&self) -> Vec<f64> {
        self.x_star.currents()
    }

    /// Common converter terminal voltage.
    pub fn terminal_voltage(&self) -> f64 {
        self.x_star.v(0)
    }
}

/// Steady-state load current `v*/R_L + P_L/v*` on the constant-power branch.
pub fn load_current(v_bus: f64, params: &GridParams) -> f64 {
    v_bus / params.res_load + params.p_load / v_bus
}

fn check_target(v_bus_target: f64, params: &GridParams) -> Result<()> {
    params.validate()?;
    if !(v_bus_target.is_finite() && v_bus_target > params.v_cpl_min) {
        return Err(Error::TargetBelowCutoff {
            target: v_bus_target,
            v_min: params.v_cpl_min,
        });
    }
    Ok(())
}

fn assemble(v_bus: f64, currents: &[f64], params: &GridParams) -> Equilibrium {
    let n = params.n();
    let mut x = DVector::zeros(2 * n + 1);
    for j in 0..n {
        x[it_idx(j)] = currents[j];
        x[v_idx(j)] = v_bus + params.res[j] * currents[j];
    }
    x[2 * n] = v_bus;
    Equilibrium {
        x_star: GridState(x),
        u_star: ControlInput::from_slice(currents),
        v_bus_target: v_bus,
    }
}

/// Closed-form minimum-loss equilibrium.
pub fn closed_form_equilibrium(v_bus_target: f64, params: &GridParams) -> Result<Equilibrium> {
    check_target(v_bus_target, params)?;
    let n = params.n();
    let i_load = load_current(v_bus_target, params);
    // Π R_j / Σ_j Π_{i≠j} R_i, the parallel resistance of all lines
    let prod: f64 = params.res.iter().product();
    let denom: f64 = (0..n)
        .map(|j| {
            (0..n)
                .filter(|&i| i != j)
                .map(|i| params.res[i])
                .product::<f64>()
        })
        .sum();
    let r_par = prod / denom;
    let drop = r_par * i_load;

    let mut x = DVector::zeros(2 * n + 1);
    let mut u = DVector::zeros(n);
    for j in 0..n {
        let i_j = drop / params.res[j];
        x[v_idx(j)] = drop + v_bus_target;
        x[it_idx(j)] = i_j;
        u[j] = i_j;
    }
    x[2 * n] = v_bus_target;
    Ok(Equilibrium {
        x_star: GridState(x),
        u_star: ControlInput(u),
        v_bus_target,
    })
}

/// Solves the loss-minimization program through its KKT system
///
/// ```text
/// [ 2 diag(R)  -1 ] [ i ]   [ 0   ]
/// [ 1ᵀ          0 ] [ λ ] = [ I_L ]
/// ```
///
/// and builds the equilibrium from the line currents via KVL.
pub fn oracle_equilibrium(v_bus_target: f64, params: &GridParams) -> Result<Equilibrium> {
    check_target(v_bus_target, params)?;
    let n = params.n();
    let i_load = load_current(v_bus_target, params);
    let mut kkt = DMatrix::zeros(n + 1, n + 1);
    let mut rhs = DVector::zeros(n + 1);
    for j in 0..n {
        kkt[(j, j)] = 2.0 * params.res[j];
        kkt[(j, n)] = -1.0;
        kkt[(n, j)] = 1.0;
    }
    rhs[n] = i_load;
    let sol = kkt.lu().solve(&rhs).ok_or(Error::Singular("equilibrium KKT system"))?;
    let currents: Vec<f64> = sol.rows(0, n).iter().copied().collect();
    Ok(assemble(v_bus_target, &currents, params))
}
