//! Fixed-step closed-loop simulation with separate plant and controller
//! rates.
//!
//! The plant advances with classical fourth-order Runge–Kutta on a fine grid;
//! the controller is sampled on a coarser grid and its output is held
//! constant in between. A run never silently continues past a failure: a
//! controller error or a non-finite state ends the trace early and is
//! reported in the summary.

use std::time::Instant;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::certificates::{clf_value, min_barrier_margin, CbfCertificate, ClfCertificate};
use crate::controllers::{
    Controller, ControlStepLog, DroopConfig, DroopController, FlController, SccConfig,
    SccController, StepMode,
};
use crate::equilibrium::{closed_form_equilibrium, Equilibrium};
use crate::error::{Error, Result};
use crate::linearization::{make_brunovsky, outputs};
use crate::model::{vector_field, ControlInput, GridParams, GridState};

/// Record flag: the load was on its saturated branch.
pub const FLAG_LOAD_SATURATED: u32 = 1;
/// Record flag: the controller ran its saturated-load fallback.
pub const FLAG_FALLBACK: u32 = 2;
/// Record flag: the CLF slack was non-zero.
pub const FLAG_SLACK: u32 = 4;
/// Record flag: at least one barrier row was active.
pub const FLAG_BARRIER_ACTIVE: u32 = 8;
/// Record flag: some plant step since the previous record left the safe box.
pub const FLAG_UNSAFE: u32 = 16;
/// Record flag: the run stopped here.
pub const FLAG_ABORTED: u32 = 32;

/// One explicit RK4 step of the plant with `u` held constant.
pub fn integrate_step(
    x: &GridState,
    u: &ControlInput,
    dt: f64,
    params: &GridParams,
) -> Result<GridState> {
    if !(dt.is_finite() && dt > 0.0) {
        return Err(Error::InvalidParams {
            field: "dt",
            reason: format!("step must be positive, got {dt}"),
        });
    }
    let f = |y: &DVector<f64>| vector_field(&GridState(y.clone()), u, params);
    let y = &x.0;
    let k1 = f(y);
    let k2 = f(&(y + &k1 * (0.5 * dt)));
    let k3 = f(&(y + &k2 * (0.5 * dt)));
    let k4 = f(&(y + &k3 * dt));
    let next = y + (k1 + (k2 + k3) * 2.0 + k4) * (dt / 6.0);
    if next.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("plant state"));
    }
    Ok(GridState(next))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControllerKind {
    Scc,
    Droop,
    /// Feedback linearization without the QP.
    Fl,
}

impl ControllerKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ControllerKind::Scc => "scc",
            ControllerKind::Droop => "droop",
            ControllerKind::Fl => "fl",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub params: GridParams,
    pub v_bus_target: f64,
    pub x0: GridState,
    pub controller: ControllerKind,
    /// Plant integration step [s].
    pub dt_plant: f64,
    /// Controller sampling period [s]; an integer multiple of `dt_plant`.
    pub dt_control: f64,
    pub t_final: f64,
    /// Plant steps between trace records.
    pub record_every: usize,
    /// Length of the final averaging window [s].
    pub avg_window: f64,
    /// Bus-voltage band that counts as regulated [V].
    pub settle_tol: f64,
    pub scc: SccConfig,
    /// Droop baseline; `None` uses [`DroopConfig::rated`].
    pub droop: Option<DroopConfig>,
    /// Droop used by the SCC and FL controllers below the CPL cutoff; `None`
    /// uses the droop matched to the equilibrium.
    pub fallback: Option<DroopConfig>,
}

/// Initial state of the reference experiment.
pub fn reference_initial_state() -> GridState {
    GridState::from_parts(
        &[39.37, 46.37, 9.37, 39.37, 46.37],
        &[14.61, 15.71, 16.94, 13.61, 8.25],
        9.00,
    )
}

/// `k` such that `k · unit = span`, if one exists.
fn whole_multiple(span: f64, unit: f64) -> Option<usize> {
    let k = (span / unit).round();
    ((k * unit - span).abs() <= 1e-9 * span.abs().max(unit) && k >= 0.0).then_some(k as usize)
}

impl Scenario {
    /// Five-converter reference grid, 24 V target, the far-from-equilibrium
    /// initial state, 1 µs plant and 10 µs controller rates, 0.5 s horizon.
    pub fn reference(controller: ControllerKind) -> Self {
        Self {
            params: GridParams::table1(),
            v_bus_target: 24.0,
            x0: reference_initial_state(),
            controller,
            dt_plant: 1e-6,
            dt_control: 1e-5,
            t_final: 0.5,
            record_every: 10,
            avg_window: 1e-5,
            settle_tol: 0.05,
            scc: SccConfig::default(),
            droop: None,
            fallback: None,
        }
    }

    pub fn plant_steps(&self) -> Result<usize> {
        whole_multiple(self.t_final, self.dt_plant).ok_or_else(|| Error::InvalidParams {
            field: "t_final",
            reason: format!(
                "{} s is not a whole number of {} s plant steps",
                self.t_final, self.dt_plant
            ),
        })
    }

    pub fn control_ratio(&self) -> Result<usize> {
        match whole_multiple(self.dt_control, self.dt_plant) {
            Some(k) if k >= 1 => Ok(k),
            _ => Err(Error::InvalidParams {
                field: "dt_control",
                reason: format!(
                    "{} s is not a positive multiple of the {} s plant step",
                    self.dt_control, self.dt_plant
                ),
            }),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.params.validate()?;
        self.x0.check(&self.params)?;
        for (field, v) in [
            ("dt_plant", self.dt_plant),
            ("dt_control", self.dt_control),
            ("avg_window", self.avg_window),
            ("settle_tol", self.settle_tol),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidParams {
                    field,
                    reason: format!("must be positive, got {v}"),
                });
            }
        }
        if !(self.t_final.is_finite() && self.t_final >= 0.0) {
            return Err(Error::InvalidParams {
                field: "t_final",
                reason: format!("must be non-negative, got {}", self.t_final),
            });
        }
        if self.record_every == 0 {
            return Err(Error::InvalidParams {
                field: "record_every",
                reason: "must be at least one plant step".into(),
            });
        }
        self.plant_steps()?;
        self.control_ratio()?;
        if self.controller == ControllerKind::Scc {
            let cbf = CbfCertificate::from_params(&self.params, self.scc.beta)?;
            if let Some(j) = (0..self.params.n()).find(|&j| {
                let v = self.x0.v(j);
                !(v > cbf.lo[j] && v < cbf.hi[j])
            }) {
                return Err(Error::OutsideSafeSet {
                    converter: j + 1,
                    voltage: self.x0.v(j),
                    lo: cbf.lo[j],
                    hi: cbf.hi[j],
                });
            }
        }
        Ok(())
    }

    pub fn equilibrium(&self) -> Result<Equilibrium> {
        closed_form_equilibrium(self.v_bus_target, &self.params)
    }

    pub fn droop_config(&self) -> DroopConfig {
        self.droop
            .clone()
            .unwrap_or_else(|| DroopConfig::rated(&self.params))
    }

    pub fn fallback_config(&self, eq: &Equilibrium) -> DroopConfig {
        self.fallback
            .clone()
            .unwrap_or_else(|| DroopConfig::matched(eq, &self.params))
    }

    pub fn build_controller(&self) -> Result<Box<dyn Controller>> {
        let eq = self.equilibrium()?;
        let fallback = self.fallback_config(&eq);
        let n = self.params.n();
        Ok(match self.controller {
            ControllerKind::Scc => Box::new(
                SccController::new(self.params.clone(), eq, self.scc.clone(), fallback)?
                    .with_sample_period(self.dt_control)?,
            ),
            ControllerKind::Fl => Box::new(FlController::new(
                self.params.clone(),
                eq,
                self.scc.pole_spec(n),
                fallback,
            )?),
            ControllerKind::Droop => {
                Box::new(DroopController::new(self.params.clone(), self.droop_config())?)
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Record {
    pub t: f64,
    pub x: Vec<f64>,
    /// Input held over the step starting at `t`.
    pub u: Vec<f64>,
    /// CLF value; NaN on the saturated load branch.
    pub v_eta: f64,
    pub min_b: f64,
    pub z: Vec<f64>,
    pub flags: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub controller: ControllerKind,
    /// Completed the horizon with the bus inside the band over the final window.
    pub converged: bool,
    /// First recorded time after which the bus never leaves the band again.
    pub settle_time: Option<f64>,
    /// Largest bus-voltage error over the final averaging window.
    pub max_bus_error_window: f64,
    pub safety_violated: bool,
    /// Why the run stopped before `t_final`, if it did.
    pub aborted: Option<String>,
    /// The run stopped on a numerical failure (non-finite state or a failed
    /// controller solve) rather than on a state outside the safe set.
    pub numerical_failure: bool,
    pub t_end: f64,
    /// State and input averaged over the final window.
    pub avg_state: Vec<f64>,
    pub avg_input: Vec<f64>,
    pub avg_v_bus: f64,
    /// Smallest barrier margin seen at any plant step.
    pub min_b: f64,
    pub control_steps: usize,
    pub fallback_steps: usize,
    pub slack_steps: usize,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    pub n: usize,
    pub records: Vec<Record>,
    pub final_state: GridState,
    pub summary: Summary,
}

/// Output-coordinate diagnostics shared by every controller kind.
struct Diagnostics {
    eq: Equilibrium,
    clf: ClfCertificate,
    cbf: CbfCertificate,
}

impl Diagnostics {
    fn new(scenario: &Scenario) -> Result<Self> {
        let n = scenario.params.n();
        let eq = scenario.equilibrium()?;
        let brunovsky = make_brunovsky(n, &scenario.scc.pole_spec(n))?;
        let clf = ClfCertificate::with_identity(&brunovsky, scenario.scc.alpha)?;
        let cbf = CbfCertificate::from_params(&scenario.params, scenario.scc.beta)?;
        Ok(Self { eq, clf, cbf })
    }

    fn v_eta(&self, x: &GridState, params: &GridParams) -> f64 {
        outputs(x, &self.eq, params)
            .map(|c| clf_value(&c.eta, &self.clf))
            .unwrap_or(f64::NAN)
    }
}

fn sharing_mismatch(x: &GridState, params: &GridParams) -> Vec<f64> {
    (0..params.n() - 1)
        .map(|j| params.res[j] * x.i_t(j) - params.res[j + 1] * x.i_t(j + 1))
        .collect()
}

fn step_flags(log: &ControlStepLog) -> u32 {
    let mut flags = 0;
    if log.mode == StepMode::Fallback {
        flags |= FLAG_FALLBACK;
    }
    if log.delta.iter().any(|d| *d != 0.0) {
        flags |= FLAG_SLACK;
    }
    if log.barrier_active() {
        flags |= FLAG_BARRIER_ACTIVE;
    }
    flags
}

/// Simulates the scenario's closed loop.
///
/// Returns `Err` only for an invalid scenario; failures during the run are
/// reported through the trace.
pub fn run(scenario: &Scenario) -> Result<Trace> {
    scenario.validate()?;
    let controller = scenario.build_controller()?;
    run_with(scenario, controller.as_ref())
}

/// Like [`run`], with an explicit controller instance.
pub fn run_with(scenario: &Scenario, controller: &dyn Controller) -> Result<Trace> {
    scenario.validate()?;
    let started = Instant::now();
    let params = &scenario.params;
    let n = params.n();
    let diag = Diagnostics::new(scenario)?;
    let steps = scenario.plant_steps()?;
    let ratio = scenario.control_ratio()?;
    let window = ((scenario.avg_window / scenario.dt_plant).round() as usize).clamp(1, steps + 1);
    let dt = scenario.dt_plant;

    let mut records = Vec::with_capacity(steps / scenario.record_every + 1);
    let mut x = scenario.x0.clone();
    let mut u = ControlInput::zeros(n);
    let mut held_flags = 0;
    let mut pending_unsafe = false;
    let mut safety_violated = false;
    let mut min_b = min_barrier_margin(&x, &diag.cbf);
    if min_b <= 0.0 {
        safety_violated = true;
        pending_unsafe = true;
    }
    let mut aborted = None;
    let mut numerical_failure = false;
    let (mut control_steps, mut fallback_steps, mut slack_steps) = (0, 0, 0);
    let mut sum_x = DVector::zeros(2 * n + 1);
    let mut sum_u = DVector::zeros(n);
    let mut max_window_err: f64 = 0.0;
    let mut window_count = 0usize;
    let mut k_end = 0;

    for k in 0..=steps {
        k_end = k;
        let mut step_error = None;
        if k % ratio == 0 {
            match controller.step(&x) {
                Ok((cmd, log)) => {
                    control_steps += 1;
                    if log.mode == StepMode::Fallback {
                        fallback_steps += 1;
                    }
                    held_flags = step_flags(&log);
                    if held_flags & FLAG_SLACK != 0 {
                        slack_steps += 1;
                    }
                    u = cmd;
                }
                Err(e) => step_error = Some(e),
            }
        }

        let mut flags = held_flags;
        if x.v_load() <= params.v_cpl_min {
            flags |= FLAG_LOAD_SATURATED;
        }
        if let Some(e) = &step_error {
            flags |= FLAG_ABORTED;
            if matches!(e, Error::OutsideSafeSet { .. }) {
                safety_violated = true;
            } else {
                numerical_failure = true;
            }
            aborted = Some(format!(
                "controller failed at t = {:.9e} s: {e}; state = {:?}",
                k as f64 * dt,
                x.0.as_slice()
            ));
        }
        if k % scenario.record_every == 0 || step_error.is_some() {
            if pending_unsafe {
                flags |= FLAG_UNSAFE;
                pending_unsafe = false;
            }
            records.push(Record {
                t: k as f64 * dt,
                x: x.0.iter().copied().collect(),
                u: u.0.iter().copied().collect(),
                v_eta: diag.v_eta(&x, params),
                min_b: min_barrier_margin(&x, &diag.cbf),
                z: sharing_mismatch(&x, params),
                flags,
            });
        }
        if step_error.is_some() {
            break;
        }
        if k + window > steps {
            sum_x += &x.0;
            sum_u += &u.0;
            window_count += 1;
            max_window_err = max_window_err.max((x.v_load() - scenario.v_bus_target).abs());
        }
        if k == steps {
            break;
        }

        match integrate_step(&x, &u, dt, params) {
            Ok(next) => x = next,
            Err(e) => {
                numerical_failure = true;
                aborted = Some(format!(
                    "integration failed after t = {:.9e} s: {e}",
                    k as f64 * dt
                ));
                if let Some(last) = records.last_mut() {
                    last.flags |= FLAG_ABORTED;
                }
                break;
            }
        }
        let b = min_barrier_margin(&x, &diag.cbf);
        min_b = min_b.min(b);
        if b <= 0.0 {
            safety_violated = true;
            pending_unsafe = true;
        }
    }

    let completed = aborted.is_none();
    let (avg_state, avg_input) = if window_count > 0 {
        let c = window_count as f64;
        (sum_x / c, sum_u / c)
    } else {
        (x.0.clone(), u.0.clone())
    };
    if window_count == 0 {
        max_window_err = f64::NAN;
    }
    let in_band = |v: f64| (v - scenario.v_bus_target).abs() <= scenario.settle_tol;
    let converged = completed && window_count > 0 && max_window_err <= scenario.settle_tol;
    let settle_time = if converged {
        let last_out = records
            .iter()
            .rposition(|r| !in_band(r.x[2 * n]));
        match last_out {
            None => records.first().map(|r| r.t),
            Some(i) => records.get(i + 1).map(|r| r.t),
        }
    } else {
        None
    };

    let summary = Summary {
        controller: scenario.controller,
        converged,
        settle_time,
        max_bus_error_window: max_window_err,
        safety_violated,
        aborted,
        numerical_failure,
        t_end: k_end as f64 * dt,
        avg_v_bus: avg_state[2 * n],
        avg_state: avg_state.iter().copied().collect(),
        avg_input: avg_input.iter().copied().collect(),
        min_b,
        control_steps,
        fallback_steps,
        slack_steps,
        wall_time_s: started.elapsed().as_secs_f64(),
    };
    Ok(Trace {
        n,
        records,
        final_state: x,
        summary,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{drift_jacobian, stored_energy};
    use nalgebra::DMatrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn linear_params() -> GridParams {
        let mut p = GridParams::table1();
        p.p_load = 0.0;
        p
    }

    /// `x(t)` of `ẋ = A x + B u` via the exponential of the augmented matrix.
    fn exact_linear(x0: &GridState, u: &ControlInput, t: f64, p: &GridParams) -> DVector<f64> {
        let d = x0.0.len();
        let zero = GridState(DVector::zeros(d));
        let a = drift_jacobian(&zero, p);
        let bu = vector_field(&zero, u, p);
        let mut aug = DMatrix::zeros(d + 1, d + 1);
        aug.view_mut((0, 0), (d, d)).copy_from(&(a * t));
        aug.view_mut((0, d), (d, 1)).copy_from(&(bu * t));
        let mut y0 = DVector::zeros(d + 1);
        y0.rows_mut(0, d).copy_from(&x0.0);
        y0[d] = 1.0;
        (aug.exp() * y0).rows(0, d).into_owned()
    }

    fn rk4_to(x0: &GridState, u: &ControlInput, t: f64, steps: usize, p: &GridParams) -> DVector<f64> {
        let dt = t / steps as f64;
        let mut x = x0.clone();
        for _ in 0..steps {
            x = integrate_step(&x, u, dt, p).unwrap();
        }
        x.0
    }

    #[test]
    fn equilibrium_is_fixed() {
        let p = GridParams::table1();
        let eq = closed_form_equilibrium(24.0, &p).unwrap();
        let next = integrate_step(&eq.x_star, &eq.u_star, 1e-6, &p).unwrap();
        assert!((next.0 - &eq.x_star.0).amax() <= 1e-12 * eq.x_star.0.amax());
    }

    #[test]
    fn matches_matrix_exponential_without_cpl() {
        let p = linear_params();
        let x0 = reference_initial_state();
        let u = ControlInput::from_slice(&[20.0, 10.0, 15.0, 12.0, 8.0]);
        let exact = exact_linear(&x0, &u, 1e-3, &p);
        let approx = rk4_to(&x0, &u, 1e-3, 1000, &p);
        assert!((approx - &exact).amax() <= 1e-9 * exact.amax(), "mismatch");
    }

    #[test]
    fn fourth_order_convergence() {
        let p = linear_params();
        let x0 = reference_initial_state();
        let u = ControlInput::from_slice(&[20.0, 10.0, 15.0, 12.0, 8.0]);
        let exact = exact_linear(&x0, &u, 1e-3, &p);
        let e1 = (rk4_to(&x0, &u, 1e-3, 10, &p) - &exact).norm();
        let e2 = (rk4_to(&x0, &u, 1e-3, 20, &p) - &exact).norm();
        let order = (e1 / e2).log2();
        assert!(order >= 3.8, "observed order {order}");
    }

    #[test]
    fn passive_energy_never_grows() {
        let p = linear_params();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let u = ControlInput::zeros(5);
        for _ in 0..10 {
            let v: Vec<f64> = (0..5).map(|_| rng.random_range(0.0..50.0)).collect();
            let i: Vec<f64> = (0..5).map(|_| rng.random_range(-30.0..30.0)).collect();
            let mut x = GridState::from_parts(&v, &i, rng.random_range(0.0..50.0));
            let mut e = stored_energy(&x, &p);
            for _ in 0..2000 {
                x = integrate_step(&x, &u, 1e-6, &p).unwrap();
                let e_next = stored_energy(&x, &p);
                assert!(e_next <= e * (1.0 + 1e-14));
                e = e_next;
            }
        }
    }

    #[test]
    fn rejects_bad_steps() {
        let p = GridParams::table1();
        let x = reference_initial_state();
        assert!(integrate_step(&x, &ControlInput::zeros(5), 0.0, &p).is_err());
        let mut s = Scenario::reference(ControllerKind::Scc);
        s.dt_control = 1.5e-6;
        assert!(run(&s).is_err());
        let mut s = Scenario::reference(ControllerKind::Scc);
        s.x0.0[0] = 60.0;
        assert!(matches!(run(&s), Err(Error::OutsideSafeSet { .. })));
    }

    #[test]
    fn zero_horizon_gives_initial_record() {
        let mut s = Scenario::reference(ControllerKind::Droop);
        s.t_final = 0.0;
        let trace = run(&s).unwrap();
        assert_eq!(trace.records.len(), 1);
        assert_eq!(trace.records[0].t, 0.0);
        assert_eq!(trace.records[0].x, s.x0.0.iter().copied().collect::<Vec<_>>());
    }

    #[test]
    fn record_count_and_time_grid() {
        let mut s = Scenario::reference(ControllerKind::Droop);
        s.t_final = 2e-3;
        let trace = run(&s).unwrap();
        assert_eq!(trace.records.len(), 201);
        assert!(trace.records.windows(2).all(|w| w[1].t > w[0].t));
        s.record_every = 1;
        assert_eq!(run(&s).unwrap().records.len(), 2001);
    }

    #[test]
    fn runs_are_bit_identical() {
        let mut s = Scenario::reference(ControllerKind::Scc);
        s.t_final = 1e-3;
        let a = run(&s).unwrap();
        let b = run(&s).unwrap();
        let bits = |t: &Trace| -> Vec<u64> {
            t.records
                .iter()
                .flat_map(|r| {
                    [r.t, r.v_eta, r.min_b, r.flags as f64]
                        .into_iter()
                        .chain(r.x.iter().chain(&r.u).chain(&r.z).copied())
                })
                .map(f64::to_bits)
                .collect()
        };
        assert_eq!(bits(&a), bits(&b));
        assert_eq!(a.final_state, b.final_state);
    }

    #[test]
    fn settles_from_equilibrium() {
        let mut s = Scenario::reference(ControllerKind::Scc);
        s.x0 = s.equilibrium().unwrap().x_star;
        s.t_final = 1e-3;
        let trace = run(&s).unwrap();
        assert!(trace.summary.converged);
        assert_eq!(trace.summary.settle_time, Some(0.0));
        assert!(!trace.summary.safety_violated);
        assert!(trace.summary.max_bus_error_window < 1e-9);
    }

    #[test]
    fn diverging_integration_ends_the_trace_as_numerical_failure() {
        let scenario = Scenario {
            dt_plant: 1e-2,
            dt_control: 1e-2,
            t_final: 20.0,
            record_every: 1,
            ..Scenario::reference(ControllerKind::Droop)
        };
        let trace = run(&scenario).unwrap();
        let s = &trace.summary;
        assert!(s.numerical_failure);
        assert!(s.aborted.is_some());
        assert!(s.t_end < scenario.t_final);
        assert!(!s.converged);
        assert_ne!(trace.records.last().unwrap().flags & FLAG_ABORTED, 0);
    }
}
