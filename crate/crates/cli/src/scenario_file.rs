//! JSON scenario files. Keys carry their units so a file can be checked
//! against a parameter table by eye; unknown keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use scc_core::controllers::{DroopConfig, GammaRule, InputBounds, SccConfig};
use scc_core::linearization::PoleSpec;
use scc_core::model::{GridParams, GridState};
use scc_core::simulation::{ControllerKind, Scenario};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    pub grid: GridSection,
    #[serde(rename = "v_bus_target_V")]
    pub v_bus_target_v: f64,
    pub initial_state: InitialState,
    #[serde(default = "default_controller")]
    pub controller: ControllerKind,
    #[serde(default)]
    pub timing: TimingSection,
    #[serde(rename = "settle_tol_V", default = "default_settle_tol")]
    pub settle_tol_v: f64,
    #[serde(default)]
    pub scc: SccSection,
    /// Droop baseline; omitted means the rated droop.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub droop: Option<DroopSection>,
    /// Droop used below the load cutoff; omitted means the droop matched to
    /// the equilibrium.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fallback: Option<DroopSection>,
    #[serde(default)]
    pub sweep: SweepSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSection {
    #[serde(rename = "cap_mF")]
    pub cap_mf: Vec<f64>,
    #[serde(rename = "res_mOhm")]
    pub res_mohm: Vec<f64>,
    #[serde(rename = "ind_H")]
    pub ind_h: Vec<f64>,
    #[serde(rename = "cap_load_mF")]
    pub cap_load_mf: f64,
    #[serde(rename = "res_load_mOhm")]
    pub res_load_mohm: f64,
    #[serde(rename = "p_load_W")]
    pub p_load_w: f64,
    #[serde(rename = "v_cpl_min_V")]
    pub v_cpl_min_v: f64,
    #[serde(rename = "v_safe_lo_V")]
    pub v_safe_lo_v: Vec<f64>,
    #[serde(rename = "v_safe_hi_V")]
    pub v_safe_hi_v: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialState {
    #[serde(rename = "v_V")]
    pub v_v: Vec<f64>,
    #[serde(rename = "it_A")]
    pub it_a: Vec<f64>,
    #[serde(rename = "vL_V")]
    pub vl_v: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimingSection {
    #[serde(rename = "dt_plant_s")]
    pub dt_plant_s: f64,
    #[serde(rename = "dt_control_s")]
    pub dt_control_s: f64,
    #[serde(rename = "t_final_s")]
    pub t_final_s: f64,
    /// Trace decimation in plant steps.
    pub record_every: usize,
    #[serde(rename = "avg_window_s")]
    pub avg_window_s: f64,
}

impl Default for TimingSection {
    fn default() -> Self {
        let r = Scenario::reference(ControllerKind::Scc);
        Self {
            dt_plant_s: r.dt_plant,
            dt_control_s: r.dt_control,
            t_final_s: r.t_final,
            record_every: r.record_every,
            avg_window_s: r.avg_window,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoleSection {
    #[serde(rename = "chain_rad_s")]
    pub chain_rad_s: [f64; 3],
    #[serde(rename = "channels_rad_s")]
    pub channels_rad_s: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputBoundsSection {
    #[serde(rename = "lo_A")]
    pub lo_a: Vec<f64>,
    #[serde(rename = "hi_A")]
    pub hi_a: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SccSection {
    pub m: f64,
    pub gamma: GammaRule,
    #[serde(default)]
    pub alpha: Option<f64>,
    pub beta: f64,
    #[serde(default)]
    pub poles: Option<PoleSection>,
    #[serde(default)]
    pub u_bounds: Option<InputBoundsSection>,
    #[serde(default)]
    pub hold_guard: Option<f64>,
}

impl Default for SccSection {
    fn default() -> Self {
        let c = SccConfig::default();
        Self {
            m: c.m,
            gamma: c.gamma,
            alpha: c.alpha,
            beta: c.beta,
            poles: None,
            u_bounds: None,
            hold_guard: c.hold_guard,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DroopSection {
    #[serde(rename = "v_nominal_V")]
    pub v_nominal_v: f64,
    #[serde(rename = "droop_gain_Ohm")]
    pub droop_gain_ohm: Vec<f64>,
    #[serde(rename = "k_p_per_s")]
    pub k_p_per_s: f64,
    #[serde(default)]
    pub u_bounds: Option<InputBoundsSection>,
}

/// Random initial states for `sweep`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    pub samples: usize,
    #[serde(rename = "t_final_s")]
    pub t_final_s: f64,
    /// Converter voltages are drawn from this fraction of each safety box,
    /// centred in it.
    pub box_fraction: f64,
    #[serde(rename = "it_range_A")]
    pub it_range_a: [f64; 2],
    #[serde(rename = "vL_range_V")]
    pub vl_range_v: [f64; 2],
}

impl Default for SweepSection {
    fn default() -> Self {
        Self {
            samples: 16,
            t_final_s: 0.05,
            box_fraction: 0.9,
            it_range_a: [0.0, 40.0],
            vl_range_v: [10.0, 45.0],
        }
    }
}

fn default_controller() -> ControllerKind {
    ControllerKind::Scc
}

fn default_settle_tol() -> f64 {
    Scenario::reference(ControllerKind::Scc).settle_tol
}

fn bounds_from(section: &InputBoundsSection) -> InputBounds {
    InputBounds {
        lo: section.lo_a.clone(),
        hi: section.hi_a.clone(),
    }
}

fn bounds_to(bounds: &InputBounds) -> InputBoundsSection {
    InputBoundsSection {
        lo_a: bounds.lo.clone(),
        hi_a: bounds.hi.clone(),
    }
}

impl DroopSection {
    fn to_config(&self) -> DroopConfig {
        DroopConfig {
            v_nominal: self.v_nominal_v,
            droop_gain: self.droop_gain_ohm.clone(),
            k_p: self.k_p_per_s,
            u_bounds: self.u_bounds.as_ref().map(bounds_from),
        }
    }
}

impl ScenarioFile {
    /// The reference experiment as a file.
    pub fn reference() -> Self {
        let s = Scenario::reference(ControllerKind::Scc);
        let p = &s.params;
        let milli = |v: &[f64]| v.iter().map(|x| round_sig(x * 1e3)).collect::<Vec<_>>();
        Self {
            grid: GridSection {
                cap_mf: milli(&p.cap),
                res_mohm: milli(&p.res),
                ind_h: p.ind.clone(),
                cap_load_mf: round_sig(p.cap_load * 1e3),
                res_load_mohm: round_sig(p.res_load * 1e3),
                p_load_w: p.p_load,
                v_cpl_min_v: p.v_cpl_min,
                v_safe_lo_v: p.v_safe_lo.clone(),
                v_safe_hi_v: p.v_safe_hi.clone(),
            },
            v_bus_target_v: s.v_bus_target,
            initial_state: InitialState {
                v_v: s.x0.voltages(),
                it_a: s.x0.currents(),
                vl_v: s.x0.v_load(),
            },
            controller: s.controller,
            timing: TimingSection::default(),
            settle_tol_v: s.settle_tol,
            scc: SccSection::default(),
            droop: None,
            fallback: None,
            sweep: SweepSection::default(),
        }
    }

    /// Parses a scenario file; errors name the offending key and position.
    pub fn from_json(text: &str, origin: &str) -> Result<Self, CliError> {
        serde_json::from_str(text).map_err(|e| CliError::Config(format!("{origin}:{}:{}: {e}", e.line(), e.column())))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text, &path.display().to_string())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenario files always serialize")
    }

    /// Converts to SI units and validates the result.
    pub fn to_scenario(&self) -> Result<Scenario, CliError> {
        let g = &self.grid;
        let milli = |v: &[f64]| v.iter().map(|x| x * 1e-3).collect::<Vec<_>>();
        let params = GridParams::new(
            milli(&g.cap_mf),
            milli(&g.res_mohm),
            g.ind_h.clone(),
            g.cap_load_mf * 1e-3,
            g.res_load_mohm * 1e-3,
            g.p_load_w,
            g.v_cpl_min_v,
            g.v_safe_lo_v.clone(),
            g.v_safe_hi_v.clone(),
        )
        .map_err(|e| CliError::Config(format!("grid: {e}")))?;

        let n = params.n();
        let init = &self.initial_state;
        if init.v_v.len() != n || init.it_a.len() != n {
            return Err(CliError::Config(format!(
                "initial_state: expected {n} entries in v_V and it_A, got {} and {}",
                init.v_v.len(),
                init.it_a.len()
            )));
        }
        let x0 = GridState::from_parts(&init.v_v, &init.it_a, init.vl_v);

        let sc = &self.scc;
        let scc = SccConfig {
            m: sc.m,
            gamma: sc.gamma,
            alpha: sc.alpha,
            beta: sc.beta,
            poles: sc.poles.as_ref().map(|p| PoleSpec {
                chain: p.chain_rad_s,
                channels: p.channels_rad_s.clone(),
            }),
            u_bounds: sc.u_bounds.as_ref().map(bounds_from),
            hold_guard: sc.hold_guard,
        };
        scc.validate(n).map_err(|e| CliError::Config(format!("scc: {e}")))?;
        let droop = self.droop.as_ref().map(DroopSection::to_config);
        let fallback = self.fallback.as_ref().map(DroopSection::to_config);
        for (key, cfg) in [("droop", &droop), ("fallback", &fallback)] {
            if let Some(cfg) = cfg {
                cfg.validate(n).map_err(|e| CliError::Config(format!("{key}: {e}")))?;
            }
        }

        let t = &self.timing;
        let scenario = Scenario {
            params,
            v_bus_target: self.v_bus_target_v,
            x0,
            controller: self.controller,
            dt_plant: t.dt_plant_s,
            dt_control: t.dt_control_s,
            t_final: t.t_final_s,
            record_every: t.record_every,
            avg_window: t.avg_window_s,
            settle_tol: self.settle_tol_v,
            scc,
            droop,
            fallback,
        };
        scenario
            .equilibrium()
            .map_err(|e| CliError::Config(format!("v_bus_target_V: {e}")))?;
        Ok(scenario)
    }
}

impl From<&DroopConfig> for DroopSection {
    fn from(c: &DroopConfig) -> Self {
        Self {
            v_nominal_v: c.v_nominal,
            droop_gain_ohm: c.droop_gain.clone(),
            k_p_per_s: c.k_p,
            u_bounds: c.u_bounds.as_ref().map(bounds_to),
        }
    }
}

/// Removes the binary noise a unit conversion leaves behind.
fn round_sig(x: f64) -> f64 {
    format!("{x:.12e}").parse().unwrap_or(x)
}
