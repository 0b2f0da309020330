//! Per-step feedback laws: the safety-critical QP controller, its
//! feedback-linearization-only ablation, and a robust droop baseline.
//!
//! Every controller maps the sampled state to a source-current command; the
//! simulator holds that command for one control period.

use std::time::{Duration, Instant};

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::certificates::{
    cbf_row, clf_row, clf_value, hold_guard_rows, min_barrier_margin, CbfCertificate,
    ClfCertificate, ConstraintRow, RowKind,
};
use crate::equilibrium::Equilibrium;
use crate::error::{Error, Result};
use crate::linearization::{
    fl_from_parts, make_brunovsky, output_dynamics, outputs, BrunovskyPair, PoleSpec,
};
use crate::model::{ControlInput, GridParams, GridState};
use crate::qp::{solve_qp, QpProblem};

/// Per-converter admissible box for the source currents [A].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputBounds {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl InputBounds {
    pub fn uniform(n: usize, lo: f64, hi: f64) -> Self {
        Self {
            lo: vec![lo; n],
            hi: vec![hi; n],
        }
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        for (what, v) in [("input lower bounds", &self.lo), ("input upper bounds", &self.hi)] {
            if v.len() != n {
                return Err(Error::Dimension {
                    what,
                    expected: n,
                    got: v.len(),
                });
            }
        }
        if let Some(j) = (0..n).find(|&j| self.lo[j].is_nan() || self.hi[j].is_nan() || self.lo[j] > self.hi[j]) {
            return Err(Error::InvalidParams {
                field: "u_bounds",
                reason: format!("converter {}: lower bound exceeds upper bound", j + 1),
            });
        }
        Ok(())
    }

    fn clamp(&self, u: &mut DVector<f64>) {
        for (j, v) in u.iter_mut().enumerate() {
            *v = v.clamp(self.lo[j], self.hi[j]);
        }
    }

    /// `u_j ≤ hi_j` and `−u_j ≤ −lo_j` for every finite bound.
    fn rows(&self) -> Vec<ConstraintRow> {
        let n = self.lo.len();
        let mut rows = Vec::with_capacity(2 * n);
        for j in 0..n {
            for (sign, bound, kind) in [
                (1.0, self.hi[j], RowKind::InputUpper(j)),
                (-1.0, -self.lo[j], RowKind::InputLower(j)),
            ] {
                if bound.is_finite() {
                    let mut coeff_u = DVector::zeros(n);
                    coeff_u[j] = sign;
                    rows.push(ConstraintRow {
                        coeff_u,
                        coeff_delta: DVector::zeros(n),
                        rhs: bound,
                        kind,
                    });
                }
            }
        }
        rows
    }
}

/// Scaling applied to the CLF decrease requirement before it enters the QP.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GammaRule {
    /// Slope `(m + 1)/m` on the non-negative branch, i.e. the slope paired
    /// with the slack penalty so that `γ·m/(m+1) = 1`.
    Paired,
    /// A fixed slope on the non-negative branch; the negative branch is
    /// always the identity.
    Slope(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SccConfig {
    /// Penalty on the CLF slack.
    pub m: f64,
    pub gamma: GammaRule,
    /// CLF decay rate; `None` selects half the smallest eigenvalue of `Q`.
    pub alpha: Option<f64>,
    /// Barrier relaxation weight.
    pub beta: f64,
    /// Closed-loop poles of the linearized outputs; `None` uses the defaults.
    pub poles: Option<PoleSpec>,
    /// Optional admissible input box.
    pub u_bounds: Option<InputBounds>,
    /// Largest fraction of a barrier margin that one zero-order hold may
    /// consume; `None` keeps only the instantaneous barrier rows.
    pub hold_guard: Option<f64>,
}

impl Default for SccConfig {
    fn default() -> Self {
        Self {
            m: 100.0,
            gamma: GammaRule::Paired,
            alpha: None,
            beta: 1.0,
            poles: None,
            u_bounds: None,
            hold_guard: Some(0.5),
        }
    }
}

impl SccConfig {
    pub fn validate(&self, n: usize) -> Result<()> {
        if !(self.m.is_finite() && self.m > 0.0) {
            return Err(Error::InvalidParams {
                field: "m",
                reason: format!("slack penalty must be positive, got {}", self.m),
            });
        }
        if let GammaRule::Slope(s) = self.gamma {
            if !(s.is_finite() && s > 0.0) {
                return Err(Error::InvalidParams {
                    field: "gamma",
                    reason: format!("slope must be positive, got {s}"),
                });
            }
        }
        if let Some(bounds) = &self.u_bounds {
            bounds.validate(n)?;
        }
        if let Some(decay) = self.hold_guard {
            if !(decay > 0.0 && decay < 1.0) {
                return Err(Error::InvalidParams {
                    field: "hold_guard",
                    reason: format!("must lie in (0, 1), got {decay}"),
                });
            }
        }
        Ok(())
    }

    pub fn gamma_slope(&self) -> f64 {
        match self.gamma {
            GammaRule::Paired => (self.m + 1.0) / self.m,
            GammaRule::Slope(s) => s,
        }
    }

    /// `γ(p)`: scaled on `p ≥ 0`, identity below.
    pub fn gamma(&self, p: f64) -> f64 {
        if p >= 0.0 {
            self.gamma_slope() * p
        } else {
            p
        }
    }

    pub fn pole_spec(&self, n: usize) -> PoleSpec {
        self.poles.clone().unwrap_or_else(|| PoleSpec::default_for(n))
    }
}

/// Proportional voltage loop around a current-droop reference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DroopConfig {
    /// No-load voltage reference [V].
    pub v_nominal: f64,
    /// Reference droop per ampere of line current [V/A].
    pub droop_gain: Vec<f64>,
    /// Voltage-loop bandwidth [1/s].
    pub k_p: f64,
    pub u_bounds: Option<InputBounds>,
}

impl DroopConfig {
    /// Droop with gains `R_j` whose steady state is the given equilibrium:
    /// `v_nominal − R_j i*_j = v*_j` holds because every `R_j i*_j` equals
    /// the common line drop.
    pub fn matched(eq: &Equilibrium, params: &GridParams) -> Self {
        let drop = eq.terminal_voltage() - eq.v_bus_target;
        Self {
            v_nominal: eq.terminal_voltage() + drop,
            droop_gain: params.res.clone(),
            k_p: 2.0e3,
            u_bounds: Some(InputBounds::uniform(params.n(), 0.0, 100.0)),
        }
    }

    /// Rated droop: no-load reference at the lowest upper safety bound and
    /// virtual resistance equal to each line resistance. Its operating point
    /// sits near the top of the safety box, not at a chosen bus voltage.
    pub fn rated(params: &GridParams) -> Self {
        let v_nominal = params.v_safe_hi.iter().copied().fold(f64::INFINITY, f64::min);
        Self {
            v_nominal,
            droop_gain: params.res.clone(),
            k_p: 2.0e3,
            u_bounds: Some(InputBounds::uniform(params.n(), 0.0, 100.0)),
        }
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        if !self.v_nominal.is_finite() {
            return Err(Error::NonFinite("v_nominal"));
        }
        if self.droop_gain.len() != n {
            return Err(Error::Dimension {
                what: "droop gains",
                expected: n,
                got: self.droop_gain.len(),
            });
        }
        if self.droop_gain.iter().any(|g| !(g.is_finite() && *g >= 0.0)) {
            return Err(Error::InvalidParams {
                field: "droop_gain",
                reason: "gains must be finite and non-negative".into(),
            });
        }
        if !(self.k_p.is_finite() && self.k_p > 0.0) {
            return Err(Error::InvalidParams {
                field: "k_p",
                reason: format!("must be positive, got {}", self.k_p),
            });
        }
        if let Some(bounds) = &self.u_bounds {
            bounds.validate(n)?;
        }
        Ok(())
    }
}

/// `v_ref = clamp(v_nominal − k_d i_t, lo, hi)`, `u = i_t + k_p C (v_ref − v)`,
/// saturated to the configured input box.
pub fn droop_step(x: &GridState, config: &DroopConfig, params: &GridParams) -> ControlInput {
    let n = params.n();
    let mut u = DVector::from_fn(n, |j, _| {
        let i = x.i_t(j);
        let v_ref = (config.v_nominal - config.droop_gain[j] * i)
            .clamp(params.v_safe_lo[j], params.v_safe_hi[j]);
        i + config.k_p * params.cap[j] * (v_ref - x.v(j))
    });
    if let Some(bounds) = &config.u_bounds {
        bounds.clamp(&mut u);
    }
    ControlInput(u)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepMode {
    /// CLF/CBF quadratic program around the feedback-linearizing input.
    Qp,
    /// Barrier-filtered droop while the load sits on its saturated branch.
    Fallback,
    FeedbackLinearization,
    Droop,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ControlStepLog {
    pub mode: StepMode,
    pub u_applied: DVector<f64>,
    /// CLF slack (zero outside QP steps).
    pub delta: DVector<f64>,
    pub active_constraints: Vec<RowKind>,
    /// CLF value; NaN where the output coordinates are undefined.
    pub v_eta: f64,
    pub min_b: f64,
    /// Scaled stationarity residual of the QP, NaN when no QP was solved.
    pub kkt_residual: f64,
    pub wall_time: Duration,
}

impl ControlStepLog {
    fn plain(mode: StepMode, u: &ControlInput, v_eta: f64, min_b: f64, start: Instant) -> Self {
        Self {
            mode,
            u_applied: u.0.clone(),
            delta: DVector::zeros(u.0.len()),
            active_constraints: Vec::new(),
            v_eta,
            min_b,
            kkt_residual: f64::NAN,
            wall_time: start.elapsed(),
        }
    }

    pub fn barrier_active(&self) -> bool {
        self.active_constraints
            .iter()
            .any(|k| matches!(k, RowKind::Cbf(_) | RowKind::Hold(_)))
    }
}

/// A sampled-data state-feedback law.
pub trait Controller: Send + Sync {
    fn name(&self) -> &'static str;
    fn step(&self, x: &GridState) -> Result<(ControlInput, ControlStepLog)>;
}

/// Keeps, per converter and direction, only the tightest of the rows that
/// bound a single input; the feasible set is unchanged. Trivially satisfied
/// empty rows are dropped.
fn merge_single_input_rows(rows: Vec<ConstraintRow>) -> Vec<ConstraintRow> {
    let mut coupled = Vec::new();
    let mut upper: Vec<(usize, f64, ConstraintRow)> = Vec::new();
    let mut lower: Vec<(usize, f64, ConstraintRow)> = Vec::new();
    for row in rows {
        let support: Vec<usize> = row
            .coeff_u
            .iter()
            .enumerate()
            .filter(|(_, a)| **a != 0.0)
            .map(|(j, _)| j)
            .collect();
        let slack_free = row.coeff_delta.iter().all(|c| *c == 0.0);
        match (support.as_slice(), slack_free) {
            ([], true) if row.rhs >= 0.0 => {}
            (&[j], true) => {
                let a = row.coeff_u[j];
                let bound = row.rhs / a;
                let (list, tighter): (_, fn(f64, f64) -> bool) = if a > 0.0 {
                    (&mut upper, |new, old| new < old)
                } else {
                    (&mut lower, |new, old| new > old)
                };
                match list.iter_mut().find(|(k, _, _)| *k == j) {
                    Some(entry) if tighter(bound, entry.1) => *entry = (j, bound, row),
                    Some(_) => {}
                    None => list.push((j, bound, row)),
                }
            }
            _ => coupled.push(row),
        }
    }
    let mut single: Vec<_> = upper.into_iter().chain(lower).collect();
    single.sort_by_key(|(j, _, row)| (*j, row.coeff_u[*j] < 0.0));
    coupled.extend(single.into_iter().map(|(_, _, row)| row));
    coupled
}

/// Input, slack, active rows and objective value of one projection.
type Projection = (DVector<f64>, DVector<f64>, Vec<RowKind>, f64);

/// Minimizes `‖u − target‖² + m‖δ‖²` subject to `rows`.
fn project(
    target: &DVector<f64>,
    m: f64,
    rows: &[ConstraintRow],
) -> Result<Projection> {
    let n = target.len();
    let sol = solve_qp(&QpProblem::over_input_and_slack(target, m, rows))?;
    let u = sol.w.rows(0, n).into_owned();
    let delta = sol.w.rows(n, n).into_owned();
    let active = sol.active_set.iter().map(|&i| rows[i].kind).collect();
    Ok((u, delta, active, sol.kkt_residual))
}

/// Safety-critical controller: the feedback-linearizing input, minimally
/// modified so that a relaxed CLF decrease row and hard barrier rows hold.
#[derive(Debug, Clone)]
pub struct SccController {
    params: GridParams,
    eq: Equilibrium,
    brunovsky: BrunovskyPair,
    clf: ClfCertificate,
    cbf: CbfCertificate,
    config: SccConfig,
    fallback: DroopConfig,
    sample_period: Option<f64>,
}

impl SccController {
    pub fn new(
        params: GridParams,
        eq: Equilibrium,
        config: SccConfig,
        fallback: DroopConfig,
    ) -> Result<Self> {
        params.validate()?;
        let n = params.n();
        config.validate(n)?;
        fallback.validate(n)?;
        let brunovsky = make_brunovsky(n, &config.pole_spec(n))?;
        let clf = ClfCertificate::with_identity(&brunovsky, config.alpha)?;
        let cbf = CbfCertificate::from_params(&params, config.beta)?;
        Ok(Self {
            params,
            eq,
            brunovsky,
            clf,
            cbf,
            config,
            fallback,
            sample_period: None,
        })
    }

    /// Declares the zero-order-hold period the controller is sampled at,
    /// which enables the hold guard and mid-hold current prediction.
    pub fn with_sample_period(mut self, period: f64) -> Result<Self> {
        if !(period.is_finite() && period > 0.0) {
            return Err(Error::InvalidParams {
                field: "sample_period",
                reason: format!("must be positive, got {period}"),
            });
        }
        self.sample_period = Some(period);
        Ok(self)
    }

    pub fn clf(&self) -> &ClfCertificate {
        &self.clf
    }

    pub fn cbf(&self) -> &CbfCertificate {
        &self.cbf
    }

    pub fn brunovsky(&self) -> &BrunovskyPair {
        &self.brunovsky
    }

    pub fn config(&self) -> &SccConfig {
        &self.config
    }

    pub fn equilibrium(&self) -> &Equilibrium {
        &self.eq
    }

    /// Barrier rows (plus guard and input-box rows), merged per input.
    ///
    /// With a hold guard the barrier rows are evaluated at the line currents
    /// predicted for the middle of the coming hold, which is what the
    /// capacitor actually integrates against over the hold.
    fn hard_rows(&self, x: &GridState) -> Result<Vec<ConstraintRow>> {
        let params = &self.params;
        let n = params.n();
        let guard = self.sample_period.zip(self.config.hold_guard);
        let mut at = x.clone();
        if let Some((period, _)) = guard {
            for j in 0..n {
                let di = (x.v(j) - params.res[j] * x.i_t(j) - x.v_load()) / params.ind[j];
                at.0[2 * j + 1] += 0.5 * period * di;
            }
        }
        let mut rows = Vec::with_capacity(3 * n);
        for j in 0..n {
            rows.push(cbf_row(&at, j, &self.cbf, params)?);
            if let Some((period, decay)) = guard {
                rows.extend(hold_guard_rows(&at, j, &self.cbf, params, period, decay)?);
            }
        }
        if let Some(bounds) = &self.config.u_bounds {
            rows.extend(bounds.rows());
        }
        Ok(rows)
    }

    /// Feedback-linearizing input at `x` (smooth load branch only).
    pub fn u_fl(&self, x: &GridState) -> Result<ControlInput> {
        let coords = outputs(x, &self.eq, &self.params)?;
        let dynamics = output_dynamics(x, &self.eq, &self.params)?;
        fl_from_parts(&coords.eta, &dynamics, &self.brunovsky)
    }
}

impl Controller for SccController {
    fn name(&self) -> &'static str {
        "scc"
    }

    fn step(&self, x: &GridState) -> Result<(ControlInput, ControlStepLog)> {
        let start = Instant::now();
        let params = &self.params;
        x.check(params)?;

        // Fails with `OutsideSafeSet` before anything else is evaluated.
        let mut rows = self.hard_rows(x)?;
        let min_b = min_barrier_margin(x, &self.cbf);

        if x.v_load() <= params.v_cpl_min {
            let rows = merge_single_input_rows(rows);
            let target = droop_step(x, &self.fallback, params);
            let (u, _, active, kkt) = project(&target.0, self.config.m, &rows)?;
            let u = ControlInput(u);
            let mut log = ControlStepLog::plain(StepMode::Fallback, &u, f64::NAN, min_b, start);
            log.active_constraints = active;
            log.kkt_residual = kkt;
            log.wall_time = start.elapsed();
            return Ok((u, log));
        }

        let coords = outputs(x, &self.eq, params)?;
        let dynamics = output_dynamics(x, &self.eq, params)?;
        let u_fl = fl_from_parts(&coords.eta, &dynamics, &self.brunovsky)?;
        // The decrease condition is posed about the equilibrium input so that
        // its drift term vanishes at x*; otherwise γ would demand extra decay
        // proportional to ‖η‖ and the law would jump at the equilibrium.
        let mut clf = clf_row(&coords.eta, &self.clf, &dynamics.about_input(&self.eq.u_star));
        clf.scale_rhs_with(|p| self.config.gamma(p));
        clf.shift_input(&self.eq.u_star.0);
        rows.insert(0, clf);
        let rows = merge_single_input_rows(rows);

        let (u, delta, active, kkt) = project(&u_fl.0, self.config.m, &rows)?;
        let u = ControlInput(u);
        let log = ControlStepLog {
            mode: StepMode::Qp,
            u_applied: u.0.clone(),
            delta,
            active_constraints: active,
            v_eta: clf_value(&coords.eta, &self.clf),
            min_b,
            kkt_residual: kkt,
            wall_time: start.elapsed(),
        };
        Ok((u, log))
    }
}

/// `u_FL` alone, without the QP; droop takes over on the saturated load
/// branch where the linearizing input is undefined.
#[derive(Debug, Clone)]
pub struct FlController {
    params: GridParams,
    eq: Equilibrium,
    brunovsky: BrunovskyPair,
    clf: ClfCertificate,
    cbf: CbfCertificate,
    fallback: DroopConfig,
}

impl FlController {
    pub fn new(
        params: GridParams,
        eq: Equilibrium,
        poles: PoleSpec,
        fallback: DroopConfig,
    ) -> Result<Self> {
        params.validate()?;
        fallback.validate(params.n())?;
        let brunovsky = make_brunovsky(params.n(), &poles)?;
        let clf = ClfCertificate::with_identity(&brunovsky, None)?;
        let cbf = CbfCertificate::from_params(&params, 1.0)?;
        Ok(Self {
            params,
            eq,
            brunovsky,
            clf,
            cbf,
            fallback,
        })
    }
}

impl Controller for FlController {
    fn name(&self) -> &'static str {
        "fl"
    }

    fn step(&self, x: &GridState) -> Result<(ControlInput, ControlStepLog)> {
        let start = Instant::now();
        x.check(&self.params)?;
        let min_b = min_barrier_margin(x, &self.cbf);
        if x.v_load() <= self.params.v_cpl_min {
            let u = droop_step(x, &self.fallback, &self.params);
            let log = ControlStepLog::plain(StepMode::Fallback, &u, f64::NAN, min_b, start);
            return Ok((u, log));
        }
        let coords = outputs(x, &self.eq, &self.params)?;
        let dynamics = output_dynamics(x, &self.eq, &self.params)?;
        let u = fl_from_parts(&coords.eta, &dynamics, &self.brunovsky)?;
        let v_eta = clf_value(&coords.eta, &self.clf);
        let log = ControlStepLog::plain(StepMode::FeedbackLinearization, &u, v_eta, min_b, start);
        Ok((u, log))
    }
}

#[derive(Debug, Clone)]
pub struct DroopController {
    params: GridParams,
    config: DroopConfig,
    cbf: CbfCertificate,
}

impl DroopController {
    pub fn new(params: GridParams, config: DroopConfig) -> Result<Self> {
        params.validate()?;
        config.validate(params.n())?;
        let cbf = CbfCertificate::from_params(&params, 1.0)?;
        Ok(Self {
            params,
            config,
            cbf,
        })
    }
}

impl Controller for DroopController {
    fn name(&self) -> &'static str {
        "droop"
    }

    fn step(&self, x: &GridState) -> Result<(ControlInput, ControlStepLog)> {
        let start = Instant::now();
        x.check(&self.params)?;
        let u = droop_step(x, &self.config, &self.params);
        let min_b = min_barrier_margin(x, &self.cbf);
        Ok((u.clone(), ControlStepLog::plain(StepMode::Droop, &u, f64::NAN, min_b, start)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::certificates::{cbf_row, clf_lie_derivatives};
    use crate::equilibrium::closed_form_equilibrium;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn setup() -> (GridParams, Equilibrium, SccController) {
        let p = GridParams::table1();
        let eq = closed_form_equilibrium(24.0, &p).unwrap();
        let ctrl = SccController::new(
            p.clone(),
            eq.clone(),
            SccConfig::default(),
            DroopConfig::matched(&eq, &p),
        )
        .unwrap();
        (p, eq, ctrl)
    }

    fn random_state(rng: &mut ChaCha8Rng, p: &GridParams) -> GridState {
        let n = p.n();
        let v: Vec<f64> = (0..n).map(|j| rng.random_range(p.v_safe_lo[j] + 0.5..p.v_safe_hi[j] - 0.5)).collect();
        let i: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..40.0)).collect();
        GridState::from_parts(&v, &i, rng.random_range(10.0..45.0))
    }

    #[test]
    fn equilibrium_is_a_fixed_point_of_the_qp() {
        let (_, eq, ctrl) = setup();
        let (u, log) = ctrl.step(&eq.x_star).unwrap();
        for j in 0..5 {
            assert!((u.0[j] - eq.u_star.0[j]).abs() <= 1e-9 * eq.u_star.0[j]);
        }
        assert_eq!(log.mode, StepMode::Qp);
        assert!(log.delta.iter().all(|d| *d == 0.0));
        assert!(log.active_constraints.is_empty());
        assert!(log.v_eta < 1e-12);
    }

    #[test]
    fn inactive_rows_return_the_linearizing_input() {
        let (p, eq, ctrl) = setup();
        let mut x = eq.x_star.clone();
        x.0[10] += 1e-4;
        x.0[1] += 1e-4;
        let (u, log) = ctrl.step(&x).unwrap();
        let u_fl = ctrl.u_fl(&x).unwrap();
        assert!(log.active_constraints.is_empty(), "{:?}", log.active_constraints);
        assert!((&u.0 - &u_fl.0).norm() <= 1e-9 * u_fl.0.norm().max(1.0));
        let _ = p;
    }

    #[test]
    fn barrier_rows_hold_at_the_solution() {
        let (p, _, ctrl) = setup();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..300 {
            let mut x = random_state(&mut rng, &p);
            // push one converter close to a bound
            let j = rng.random_range(0..5);
            x.0[2 * j] = if rng.random_bool(0.5) { 5.01 } else { 49.99 };
            let (u, log) = ctrl.step(&x).unwrap();
            for k in 0..5 {
                let row = cbf_row(&x, k, ctrl.cbf(), &p).unwrap();
                let slack = row.rhs - row.lhs(&u.0, &log.delta);
                assert!(slack >= -1e-9 * row.rhs.abs().max(1.0), "converter {k}: {slack}");
            }
            assert!(log.kkt_residual <= 1e-8);
        }
    }

    #[test]
    fn clf_decrease_when_barriers_inactive() {
        let (p, eq, ctrl) = setup();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut checked = 0;
        for _ in 0..300 {
            let dx = DVector::from_fn(11, |k, _| rng.random_range(-1.0..1.0) * if k % 2 == 1 && k < 10 { 3.0 } else { 2.0 });
            let x = GridState(&eq.x_star.0 + dx);
            let (u, log) = ctrl.step(&x).unwrap();
            if log.barrier_active() {
                continue;
            }
            let coords = outputs(&x, &eq, &p).unwrap();
            let dynamics = output_dynamics(&x, &eq, &p).unwrap();
            let (lf, lg) = clf_lie_derivatives(&coords.eta, ctrl.clf(), &dynamics);
            let vdot = lf + lg.dot(&u.0);
            let bound = -ctrl.clf().alpha * coords.eta.norm_squared();
            let scale = lf.abs() + (lg.abs().dot(&u.0.abs()));
            assert!(vdot <= bound + 1e-9 * scale, "{vdot} > {bound}");
            checked += 1;
        }
        assert!(checked > 50);
    }

    #[test]
    fn continuous_at_equilibrium() {
        let (p, eq, ctrl) = setup();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10 {
            let dir = DVector::from_fn(11, |_, _| rng.random_range(-1.0..1.0)).normalize();
            let mut prev = f64::INFINITY;
            for k in 1..8 {
                let eps = 10f64.powi(-k);
                let x = GridState(&eq.x_star.0 + &dir * eps);
                let (u, _) = ctrl.step(&x).unwrap();
                let err = (&u.0 - &eq.u_star.0).norm();
                assert!(err < prev);
                prev = err;
            }
            assert!(prev < 1e-1, "{prev}");
        }
        let _ = p;
    }

    #[test]
    fn outside_safe_set_is_reported() {
        let (p, eq, ctrl) = setup();
        let mut x = eq.x_star.clone();
        x.0[4] = p.v_safe_hi[2] + 1.0;
        assert!(matches!(
            ctrl.step(&x),
            Err(Error::OutsideSafeSet { converter: 3, .. })
        ));
    }

    #[test]
    fn saturated_load_uses_filtered_droop() {
        let (p, eq, ctrl) = setup();
        let mut x = eq.x_star.clone();
        x.0[10] = 3.0;
        x.0[0] = 5.001;
        let (u, log) = ctrl.step(&x).unwrap();
        assert_eq!(log.mode, StepMode::Fallback);
        assert!(log.v_eta.is_nan());
        let row = cbf_row(&x, 0, ctrl.cbf(), &p).unwrap();
        assert!(row.lhs(&u.0, &log.delta) <= row.rhs + 1e-9);
    }

    #[test]
    fn repeated_steps_are_bit_identical() {
        let (p, _, ctrl) = setup();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random_state(&mut rng, &p);
        let (a, _) = ctrl.step(&x).unwrap();
        let (b, _) = ctrl.step(&x).unwrap();
        assert_eq!(a.0.as_slice(), b.0.as_slice());
    }

    #[test]
    fn gamma_rule() {
        let c = SccConfig::default();
        assert_eq!(c.gamma(2.0), 2.0 * 101.0 / 100.0);
        assert_eq!(c.gamma(-2.0), -2.0);
        assert_eq!(c.gamma_slope() * c.m / (c.m + 1.0), 1.0);
        let c = SccConfig {
            gamma: GammaRule::Slope(3.0),
            ..SccConfig::default()
        };
        assert_eq!(c.gamma(1.0), 3.0);
        assert!(SccConfig { m: 0.0, ..SccConfig::default() }.validate(5).is_err());
        assert!(SccConfig {
            gamma: GammaRule::Slope(-1.0),
            ..SccConfig::default()
        }
        .validate(5)
        .is_err());
    }

    #[test]
    fn input_bounds_become_rows() {
        let (p, eq, _) = setup();
        let config = SccConfig {
            u_bounds: Some(InputBounds::uniform(5, 0.0, 30.0)),
            ..SccConfig::default()
        };
        let ctrl = SccController::new(p.clone(), eq.clone(), config, DroopConfig::matched(&eq, &p)).unwrap();
        let mut x = eq.x_star.clone();
        x.0[10] = 20.0;
        let (u, _) = ctrl.step(&x).unwrap();
        assert!(u.0.iter().all(|v| (-1e-9..=30.0 + 1e-9).contains(v)));
    }

    #[test]
    fn droop_zero_error_passes_line_current() {
        let p = GridParams::table1();
        let eq = closed_form_equilibrium(24.0, &p).unwrap();
        let cfg = DroopConfig::matched(&eq, &p);
        // the matched droop is at rest at the equilibrium
        let u = droop_step(&eq.x_star, &cfg, &p);
        for j in 0..5 {
            assert!((u.0[j] - eq.x_star.i_t(j)).abs() < 1e-9);
        }
    }

    #[test]
    fn droop_without_gain_regulates_to_nominal() {
        let p = GridParams::table1();
        let cfg = DroopConfig {
            v_nominal: 30.0,
            droop_gain: vec![0.0; 5],
            k_p: 1000.0,
            u_bounds: None,
        };
        let x = GridState::from_parts(&[20.0; 5], &[10.0; 5], 24.0);
        let u = droop_step(&x, &cfg, &p);
        for j in 0..5 {
            assert!((u.0[j] - (10.0 + 1000.0 * p.cap[j] * 10.0)).abs() < 1e-12);
        }
        // the reference is clamped to the safety box
        let cfg = DroopConfig { v_nominal: 80.0, ..cfg };
        let u = droop_step(&x, &cfg, &p);
        assert!((u.0[0] - (10.0 + 1000.0 * p.cap[0] * 30.0)).abs() < 1e-12);
    }

    #[test]
    fn droop_saturates_to_input_box() {
        let p = GridParams::table1();
        let eq = closed_form_equilibrium(24.0, &p).unwrap();
        let cfg = DroopConfig::matched(&eq, &p);
        let x = GridState::from_parts(&[49.0; 5], &[10.0; 5], 24.0);
        assert!(droop_step(&x, &cfg, &p).0.iter().all(|u| *u == 0.0));
        let x = GridState::from_parts(&[6.0; 5], &[90.0; 5], 24.0);
        assert!(droop_step(&x, &cfg, &p).0.iter().all(|u| *u == 100.0));
    }

    #[test]
    fn rated_droop_references_upper_bound_at_no_load() {
        let p = GridParams::table1();
        let cfg = DroopConfig::rated(&p);
        cfg.validate(5).unwrap();
        assert_eq!(cfg.v_nominal, 50.0);
        // no line current and the capacitor already at 50 V: nothing to inject
        let x = GridState::from_parts(&[50.0; 5], &[0.0; 5], 49.0);
        assert!(droop_step(&x, &cfg, &p).0.iter().all(|u| u.abs() < 1e-12));
        // loaded lines pull the reference down by R_j i_j
        let x = GridState::from_parts(&[50.0; 5], &[20.0; 5], 49.0);
        let u = droop_step(&x, &cfg, &p);
        for j in 0..5 {
            let expected = 20.0 - cfg.k_p * p.cap[j] * p.res[j] * 20.0;
            assert!((u.0[j] - expected).abs() < 1e-9);
        }
    }
}
