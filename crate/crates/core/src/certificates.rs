//! Lyapunov and barrier certificates, and the linear constraint rows they
//! contribute to the per-step quadratic program.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linearization::{BrunovskyPair, OutputDynamics};
use crate::model::{GridParams, GridState};

/// Solves `Aᵀ P + P A + Q = 0` for symmetric `P` through the Kronecker-sum
/// form `(I ⊗ Aᵀ + Aᵀ ⊗ I) vec(P) = −vec(Q)`.
///
/// `A` must be Hurwitz and `Q` symmetric positive definite; the result is
/// then symmetric positive definite.
pub fn solve_lyapunov(a: &DMatrix<f64>, q: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let d = a.nrows();
    if a.ncols() != d {
        return Err(Error::Dimension {
            what: "Lyapunov A (columns)",
            expected: d,
            got: a.ncols(),
        });
    }
    if q.shape() != (d, d) {
        return Err(Error::Dimension {
            what: "Lyapunov Q",
            expected: d,
            got: q.nrows(),
        });
    }
    if a.iter().chain(q.iter()).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("Lyapunov data"));
    }
    let abscissa = a
        .complex_eigenvalues()
        .iter()
        .map(|z| z.re)
        .fold(f64::NEG_INFINITY, f64::max);
    if abscissa.is_nan() || abscissa >= 0.0 {
        return Err(Error::NotHurwitz(abscissa));
    }
    check_spd(q, "Q")?;

    // Solve the similar problem for Ã = D⁻¹AD, Q̃ = DQD; then P = D⁻¹P̃D⁻¹.
    let scale = balancing_scale(a);
    let a_bal = DMatrix::from_fn(d, d, |i, j| a[(i, j)] * scale[j] / scale[i]);
    let q_bal = DMatrix::from_fn(d, d, |i, j| q[(i, j)] * scale[i] * scale[j]);

    let eye = DMatrix::<f64>::identity(d, d);
    let at = a_bal.transpose();
    let kron = eye.kronecker(&at) + at.kronecker(&eye);
    let lu = kron.lu();
    let neg_q = DVector::from_column_slice((-&q_bal).as_slice());
    let mut vec_p = lu.solve(&neg_q).ok_or(Error::Singular("Lyapunov Kronecker system"))?;
    for _ in 0..2 {
        let p = DMatrix::from_column_slice(d, d, vec_p.as_slice());
        let resid = -&q_bal - (&at * &p + &p * &a_bal);
        let corr = lu
            .solve(&DVector::from_column_slice(resid.as_slice()))
            .ok_or(Error::Singular("Lyapunov Kronecker system"))?;
        vec_p += corr;
    }
    let p_bal = DMatrix::from_column_slice(d, d, vec_p.as_slice());
    let p = DMatrix::from_fn(d, d, |i, j| {
        0.5 * (p_bal[(i, j)] + p_bal[(j, i)]) / (scale[i] * scale[j])
    });
    check_spd(&p, "P")?;
    Ok(p)
}

/// Power-of-two diagonal scaling `D` that equalizes row and column norms of
/// `D⁻¹AD` (Parlett–Reinsch).
fn balancing_scale(a: &DMatrix<f64>) -> Vec<f64> {
    let d = a.nrows();
    let mut scale = vec![1.0; d];
    let mut work = a.clone();
    let mut converged = false;
    while !converged {
        converged = true;
        for i in 0..d {
            let c: f64 = (0..d).filter(|&k| k != i).map(|k| work[(k, i)].abs()).sum();
            let r: f64 = (0..d).filter(|&k| k != i).map(|k| work[(i, k)].abs()).sum();
            if c == 0.0 || r == 0.0 {
                continue;
            }
            let mut f = 1.0;
            let (mut cc, mut rr) = (c, r);
            while cc < rr / 2.0 {
                cc *= 2.0;
                rr /= 2.0;
                f *= 2.0;
            }
            while cc >= rr * 2.0 {
                cc /= 2.0;
                rr *= 2.0;
                f /= 2.0;
            }
            if (cc + rr) < 0.95 * (c + r) {
                converged = false;
                scale[i] *= f;
                for k in 0..d {
                    work[(i, k)] /= f;
                    work[(k, i)] *= f;
                }
            }
        }
    }
    scale
}

fn check_spd(m: &DMatrix<f64>, what: &'static str) -> Result<()> {
    let scale = m.amax().max(f64::MIN_POSITIVE);
    if (m - m.transpose()).amax() > 1e-12 * scale {
        return Err(Error::NotPositiveDefinite(what));
    }
    if m.clone().cholesky().is_none() {
        return Err(Error::NotPositiveDefinite(what));
    }
    Ok(())
}

fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    m.clone().symmetric_eigenvalues().min()
}

/// Quadratic CLF `V(η) = ηᵀ P η` for the linearized output dynamics.
#[derive(Debug, Clone, PartialEq)]
pub struct ClfCertificate {
    pub p: DMatrix<f64>,
    pub q: DMatrix<f64>,
    /// Required decay `V̇ ≤ −α‖η‖²`.
    pub alpha: f64,
}

impl ClfCertificate {
    /// Solves the Lyapunov equation for `A_cl`. `alpha = None` picks
    /// `λ_min(Q) / 2`.
    pub fn new(brunovsky: &BrunovskyPair, q: DMatrix<f64>, alpha: Option<f64>) -> Result<Self> {
        let p = solve_lyapunov(&brunovsky.a_cl, &q)?;
        let lam_q = min_eigenvalue(&q);
        let alpha = alpha.unwrap_or(0.5 * lam_q);
        if !(alpha > 0.0 && alpha <= lam_q) {
            return Err(Error::InvalidParams {
                field: "alpha",
                reason: format!("must lie in (0, λ_min(Q) = {lam_q}], got {alpha}"),
            });
        }
        Ok(Self { p, q, alpha })
    }

    /// Identity `Q` of matching size.
    pub fn with_identity(brunovsky: &BrunovskyPair, alpha: Option<f64>) -> Result<Self> {
        let d = brunovsky.a_cl.nrows();
        Self::new(brunovsky, DMatrix::identity(d, d), alpha)
    }

    pub fn lambda_min_q(&self) -> f64 {
        min_eigenvalue(&self.q)
    }
}

/// Reciprocal barriers on each converter voltage.
#[derive(Debug, Clone, PartialEq)]
pub struct CbfCertificate {
    pub beta: f64,
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl CbfCertificate {
    pub fn new(beta: f64, lo: Vec<f64>, hi: Vec<f64>) -> Result<Self> {
        if !(beta.is_finite() && beta > 0.0) {
            return Err(Error::InvalidParams {
                field: "beta",
                reason: format!("must be strictly positive, got {beta}"),
            });
        }
        if lo.len() != hi.len() {
            return Err(Error::Dimension {
                what: "barrier bounds",
                expected: lo.len(),
                got: hi.len(),
            });
        }
        if let Some(j) = (0..lo.len()).find(|&j| lo[j].is_nan() || hi[j].is_nan() || lo[j] >= hi[j]) {
            return Err(Error::InvalidParams {
                field: "v_safe_lo",
                reason: format!("converter {}: bounds not ordered", j + 1),
            });
        }
        Ok(Self { beta, lo, hi })
    }

    /// Barriers on the grid's own safety box.
    pub fn from_params(params: &GridParams, beta: f64) -> Result<Self> {
        Self::new(beta, params.v_safe_lo.clone(), params.v_safe_hi.clone())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RowKind {
    Clf,
    Cbf(usize),
    /// Sampled-data guard on converter `j` (see [`hold_guard_rows`]).
    Hold(usize),
    InputLower(usize),
    InputUpper(usize),
}

/// `coeff_u · u + coeff_delta · δ ≤ rhs`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstraintRow {
    pub coeff_u: DVector<f64>,
    pub coeff_delta: DVector<f64>,
    pub rhs: f64,
    pub kind: RowKind,
}

impl ConstraintRow {
    /// Replaces `rhs = −p` by `rhs = −γ(p)`.
    pub fn scale_rhs_with(&mut self, gamma: impl Fn(f64) -> f64) {
        self.rhs = -gamma(-self.rhs);
    }

    /// Rewrites a row stated in `u − u_ref` as a row in `u`.
    pub fn shift_input(&mut self, u_ref: &DVector<f64>) {
        self.rhs += self.coeff_u.dot(u_ref);
    }

    pub fn lhs(&self, u: &DVector<f64>, delta: &DVector<f64>) -> f64 {
        self.coeff_u.dot(u) + self.coeff_delta.dot(delta)
    }
}

pub fn clf_value(eta: &DVector<f64>, cert: &ClfCertificate) -> f64 {
    (eta.transpose() * &cert.p * eta)[(0, 0)]
}

/// CLF decrease row before the `γ` scaling:
/// `L_g V (u + δ) ≤ −(L_f V + α‖η‖²)`.
pub fn clf_row(eta: &DVector<f64>, cert: &ClfCertificate, dynamics: &OutputDynamics) -> ConstraintRow {
    let p_eta = &cert.p * eta;
    let lf_v = 2.0 * p_eta.dot(&dynamics.f_eta);
    let lg_v = (dynamics.g_eta.transpose() * &p_eta) * 2.0;
    ConstraintRow {
        coeff_u: lg_v.clone(),
        coeff_delta: lg_v,
        rhs: -(lf_v + cert.alpha * eta.norm_squared()),
        kind: RowKind::Clf,
    }
}

/// `(L_f V, L_g V)` at `η`.
pub fn clf_lie_derivatives(
    eta: &DVector<f64>,
    cert: &ClfCertificate,
    dynamics: &OutputDynamics,
) -> (f64, DVector<f64>) {
    let p_eta = &cert.p * eta;
    (
        2.0 * p_eta.dot(&dynamics.f_eta),
        (dynamics.g_eta.transpose() * &p_eta) * 2.0,
    )
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BarrierValue {
    /// `b_j > 0`, with `B_j = 1/b_j`.
    Inside { b: f64, barrier: f64 },
    /// `b_j ≤ 0`: the voltage is on or beyond a bound.
    Outside { b: f64 },
}

impl BarrierValue {
    pub fn b(&self) -> f64 {
        match *self {
            BarrierValue::Inside { b, .. } | BarrierValue::Outside { b } => b,
        }
    }

    pub fn is_inside(&self) -> bool {
        matches!(self, BarrierValue::Inside { .. })
    }
}

/// `b_j = −(v_j − lo_j)(v_j − hi_j)`.
pub fn barrier_margin(v: f64, lo: f64, hi: f64) -> f64 {
    -(v - lo) * (v - hi)
}

pub fn cbf_value(x: &GridState, j: usize, cert: &CbfCertificate) -> BarrierValue {
    let b = barrier_margin(x.v(j), cert.lo[j], cert.hi[j]);
    if b > 0.0 {
        BarrierValue::Inside { b, barrier: 1.0 / b }
    } else {
        BarrierValue::Outside { b }
    }
}

/// Smallest `b_j` over all converters.
pub fn min_barrier_margin(x: &GridState, cert: &CbfCertificate) -> f64 {
    (0..cert.lo.len())
        .map(|j| barrier_margin(x.v(j), cert.lo[j], cert.hi[j]))
        .fold(f64::INFINITY, f64::min)
}

/// Hard row `L_f B_j + L_g B_j u ≤ β / B_j`. Only `u_j` appears.
pub fn cbf_row(
    x: &GridState,
    j: usize,
    cert: &CbfCertificate,
    params: &GridParams,
) -> Result<ConstraintRow> {
    let n = params.n();
    let v = x.v(j);
    let b = match cbf_value(x, j, cert) {
        BarrierValue::Inside { b, .. } => b,
        BarrierValue::Outside { .. } => {
            return Err(Error::OutsideSafeSet {
                converter: j + 1,
                voltage: v,
                lo: cert.lo[j],
                hi: cert.hi[j],
            })
        }
    };
    // ∂B/∂v_j = s / b² with s = (v − lo) + (v − hi)
    let s = (v - cert.lo[j]) + (v - cert.hi[j]);
    let dbdv = s / (b * b);
    let lf_b = dbdv * (-x.i_t(j) / params.cap[j]);
    let mut coeff_u = DVector::zeros(n);
    coeff_u[j] = dbdv / params.cap[j];
    Ok(ConstraintRow {
        coeff_u,
        coeff_delta: DVector::zeros(n),
        rhs: cert.beta * b - lf_b,
        kind: RowKind::Cbf(j),
    })
}

/// Rows that keep the zero-order-hold prediction of `v_j` inside the level
/// set `b_j ≥ (1 − decay)·b_j(x)`.
///
/// Over one hold of length `period` the voltage moves by
/// `period·(u_j − i_j)/C_j` to first order in the line current, so the
/// predicted end point is affine in `u_j`; `b_j` is concave in `v_j`, so the
/// level set is an interval and the condition is one upper and one lower
/// bound on `u_j`. Both contain `u_j = i_j` for any `decay ∈ (0, 1)`.
pub fn hold_guard_rows(
    x: &GridState,
    j: usize,
    cert: &CbfCertificate,
    params: &GridParams,
    period: f64,
    decay: f64,
) -> Result<[ConstraintRow; 2]> {
    let n = params.n();
    let (lo, hi, v) = (cert.lo[j], cert.hi[j], x.v(j));
    let b = match cbf_value(x, j, cert) {
        BarrierValue::Inside { b, .. } => b,
        BarrierValue::Outside { .. } => {
            return Err(Error::OutsideSafeSet {
                converter: j + 1,
                voltage: v,
                lo,
                hi,
            })
        }
    };
    let mid = 0.5 * (lo + hi);
    let half = 0.5 * (hi - lo);
    let reach = (half * half - (1.0 - decay) * b).max(0.0).sqrt();
    let gain = params.cap[j] / period;
    let row = |sign: f64, rhs: f64| {
        let mut coeff_u = DVector::zeros(n);
        coeff_u[j] = sign;
        ConstraintRow {
            coeff_u,
            coeff_delta: DVector::zeros(n),
            rhs,
            kind: RowKind::Hold(j),
        }
    };
    let i = x.i_t(j);
    Ok([
        row(1.0, i + gain * (mid + reach - v)),
        row(-1.0, -(i + gain * (mid - reach - v))),
    ])
}
