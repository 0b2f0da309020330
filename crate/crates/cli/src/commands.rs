use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use scc_core::model::GridState;
use scc_core::simulation::{run, ControllerKind, Scenario, Summary, Trace};

use crate::error::CliError;
use crate::output::{fmt_float, trace_csv, write_atomic};
use crate::scenario_file::ScenarioFile;

/// Environment variable that sets the number of sweep workers.
pub const WORKERS_ENV: &str = "SCC_WORKERS";

/// Command-line overrides shared by every subcommand.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub controller: Option<ControllerKind>,
    pub t_final: Option<f64>,
    pub dt_plant: Option<f64>,
    pub dt_control: Option<f64>,
    pub raw_trace: bool,
}

impl Overrides {
    fn apply(&self, file: &mut ScenarioFile) {
        if let Some(c) = self.controller {
            file.controller = c;
        }
        if let Some(t) = self.t_final {
            file.timing.t_final_s = t;
        }
        if let Some(dt) = self.dt_plant {
            file.timing.dt_plant_s = dt;
        }
        if let Some(dt) = self.dt_control {
            file.timing.dt_control_s = dt;
        }
        if self.raw_trace {
            file.timing.record_every = 1;
        }
    }
}

fn load(path: &Path, overrides: &Overrides) -> Result<(ScenarioFile, Scenario), CliError> {
    let mut file = ScenarioFile::load(path)?;
    overrides.apply(&mut file);
    let scenario = file.to_scenario()?;
    scenario
        .validate()
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    Ok((file, scenario))
}

fn simulate(scenario: &Scenario) -> Result<Trace, CliError> {
    run(scenario).map_err(|e| CliError::Config(e.to_string()))
}

/// Maps a finished trace onto the command outcome.
fn verdict(summary: &Summary) -> Result<(), CliError> {
    if summary.numerical_failure {
        let reason = summary.aborted.clone().unwrap_or_default();
        return Err(CliError::Numerical(reason));
    }
    if summary.safety_violated {
        return Err(CliError::Safety(format!(
            "{} controller left the safety box (smallest barrier margin {:.3e})",
            summary.controller.as_str(),
            summary.min_b
        )));
    }
    if let Some(reason) = &summary.aborted {
        return Err(CliError::Numerical(reason.clone()));
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct EquilibriumReport {
    v_bus: f64,
    terminal_voltage: f64,
    line_currents: Vec<f64>,
    source_currents: Vec<f64>,
}

#[derive(Debug, Serialize)]
struct SummaryFile<'a> {
    scenario: String,
    seed: Option<u64>,
    dt_plant: f64,
    dt_control: f64,
    t_final: f64,
    equilibrium: EquilibriumReport,
    summary: &'a Summary,
}

pub struct RunReport {
    pub trace_path: PathBuf,
    pub summary_path: PathBuf,
    pub summary: Summary,
}

/// `run`: one closed-loop simulation, written as `trace.csv` and
/// `summary.json` in `out_dir`. A run that violates safety or aborts still
/// writes both files before reporting the failure.
pub fn cmd_run(
    scenario_path: &Path,
    overrides: &Overrides,
    out_dir: &Path,
    seed: Option<u64>,
) -> Result<RunReport, CliError> {
    let (_, scenario) = load(scenario_path, overrides)?;
    let eq = scenario
        .equilibrium()
        .map_err(|e| CliError::Config(e.to_string()))?;
    let trace = simulate(&scenario)?;

    let report = SummaryFile {
        scenario: scenario_path.display().to_string(),
        seed,
        dt_plant: scenario.dt_plant,
        dt_control: scenario.dt_control,
        t_final: scenario.t_final,
        equilibrium: EquilibriumReport {
            v_bus: eq.v_bus_target,
            terminal_voltage: eq.terminal_voltage(),
            line_currents: eq.line_currents(),
            source_currents: eq.u_star.0.iter().copied().collect(),
        },
        summary: &trace.summary,
    };
    let summary_json = serde_json::to_string_pretty(&report)
        .map_err(|e| CliError::Numerical(format!("summary serialization: {e}")))?;
    let trace_path = out_dir.join("trace.csv");
    let summary_path = out_dir.join("summary.json");
    write_atomic(&trace_path, &trace_csv(&trace))?;
    write_atomic(&summary_path, &(summary_json + "\n"))?;

    verdict(&trace.summary)?;
    Ok(RunReport {
        trace_path,
        summary_path,
        summary: trace.summary,
    })
}

/// One row of the side-by-side results table.
#[derive(Debug, Clone, PartialEq)]
pub struct TableRow {
    pub state: String,
    pub equilibrium: f64,
    /// `None` where the initial state does not define the quantity.
    pub initial: Option<f64>,
    pub scc: f64,
    pub droop: f64,
    pub unit: &'static str,
}

pub struct Table2 {
    pub rows: Vec<TableRow>,
    pub scc: Summary,
    pub droop: Summary,
}

impl Table2 {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("state,equilibrium,initial,scc,droop,unit\n");
        for r in &self.rows {
            let initial = r.initial.map(fmt_float).unwrap_or_default();
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                r.state,
                fmt_float(r.equilibrium),
                initial,
                fmt_float(r.scc),
                fmt_float(r.droop),
                r.unit
            );
        }
        out
    }

    pub fn to_text(&self) -> String {
        let mut out = format!(
            "{:<6} {:>12} {:>12} {:>12} {:>12}  {}\n",
            "state", "equilibrium", "initial", "scc", "droop", "unit"
        );
        for r in &self.rows {
            let initial = r.initial.map(|v| format!("{v:.2}")).unwrap_or_else(|| "-".into());
            let _ = writeln!(
                out,
                "{:<6} {:>12.2} {:>12} {:>12.2} {:>12.2}  [{}]",
                r.state, r.equilibrium, initial, r.scc, r.droop, r.unit
            );
        }
        out
    }
}

fn build_table(scenario: &Scenario, scc: &Trace, droop: &Trace) -> Result<Vec<TableRow>, CliError> {
    let eq = scenario
        .equilibrium()
        .map_err(|e| CliError::Config(e.to_string()))?;
    let n = scenario.params.n();
    let x0 = &scenario.x0;
    let (s, d) = (&scc.summary, &droop.summary);
    let mut rows = Vec::with_capacity(3 * n + 1);
    for j in 0..n {
        let k = j + 1;
        rows.push(TableRow {
            state: format!("v{k}"),
            equilibrium: eq.x_star.v(j),
            initial: Some(x0.v(j)),
            scc: s.avg_state[2 * j],
            droop: d.avg_state[2 * j],
            unit: "V",
        });
        rows.push(TableRow {
            state: format!("is{k}"),
            equilibrium: eq.u_star.0[j],
            initial: None,
            scc: s.avg_input[j],
            droop: d.avg_input[j],
            unit: "A",
        });
        rows.push(TableRow {
            state: format!("it{k}"),
            equilibrium: eq.x_star.i_t(j),
            initial: Some(x0.i_t(j)),
            scc: s.avg_state[2 * j + 1],
            droop: d.avg_state[2 * j + 1],
            unit: "A",
        });
    }
    rows.push(TableRow {
        state: "vbus".into(),
        equilibrium: eq.v_bus_target,
        initial: Some(x0.v_load()),
        scc: s.avg_v_bus,
        droop: d.avg_v_bus,
        unit: "V",
    });
    Ok(rows)
}

/// `table2`: runs the SCC and the droop baseline on the same scenario and
/// writes the side-by-side table as CSV at `out_path` and as aligned text
/// next to it (same stem, `.txt`).
pub fn cmd_table2(scenario_path: &Path, overrides: &Overrides, out_path: &Path) -> Result<Table2, CliError> {
    let (file, _) = load(scenario_path, overrides)?;
    let traces: Vec<(Scenario, Trace)> = [ControllerKind::Scc, ControllerKind::Droop]
        .into_iter()
        .map(|kind| {
            let mut f = file.clone();
            f.controller = kind;
            let scenario = f.to_scenario()?;
            let trace = simulate(&scenario)?;
            Ok((scenario, trace))
        })
        .collect::<Result<_, CliError>>()?;
    let (scenario, scc) = &traces[0];
    let droop = &traces[1].1;
    for t in [scc, droop] {
        if let Some(reason) = &t.summary.aborted {
            return Err(CliError::Numerical(reason.clone()));
        }
    }
    let table = Table2 {
        rows: build_table(scenario, scc, droop)?,
        scc: scc.summary.clone(),
        droop: droop.summary.clone(),
    };
    write_atomic(out_path, &table.to_csv())?;
    write_atomic(&out_path.with_extension("txt"), &table.to_text())?;
    verdict(&table.scc)?;
    Ok(table)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub sample: usize,
    pub x0: GridState,
    pub summary: Summary,
}

impl SweepRow {
    pub fn success(&self) -> bool {
        self.summary.converged && !self.summary.safety_violated && self.summary.aborted.is_none()
    }
}

pub fn sweep_csv(n: usize, rows: &[SweepRow]) -> String {
    let mut cols = vec!["sample".to_string(), "controller".to_string()];
    cols.extend((1..=n).map(|j| format!("v{j}_0")));
    cols.extend((1..=n).map(|j| format!("it{j}_0")));
    cols.push("vL_0".into());
    cols.extend(
        [
            "success",
            "converged",
            "safety_violated",
            "aborted",
            "settle_time",
            "avg_v_bus",
            "max_bus_error",
            "min_b",
            "fallback_steps",
        ]
        .map(String::from),
    );
    let mut out = cols.join(",");
    out.push('\n');
    for r in rows {
        let s = &r.summary;
        let mut fields = vec![r.sample.to_string(), s.controller.as_str().to_string()];
        fields.extend(r.x0.voltages().into_iter().map(fmt_float));
        fields.extend(r.x0.currents().into_iter().map(fmt_float));
        fields.push(fmt_float(r.x0.v_load()));
        fields.push(r.success().to_string());
        fields.push(s.converged.to_string());
        fields.push(s.safety_violated.to_string());
        fields.push(s.aborted.is_some().to_string());
        fields.push(s.settle_time.map(fmt_float).unwrap_or_default());
        fields.push(fmt_float(s.avg_v_bus));
        fields.push(fmt_float(s.max_bus_error_window));
        fields.push(fmt_float(s.min_b));
        fields.push(s.fallback_steps.to_string());
        out.push_str(&fields.join(","));
        out.push('\n');
    }
    out
}

/// Initial states drawn uniformly from the sweep ranges of the file.
pub fn sample_initial_states(file: &ScenarioFile, scenario: &Scenario, samples: usize, seed: u64) -> Vec<GridState> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = &scenario.params;
    let sw = &file.sweep;
    let draw = |rng: &mut ChaCha8Rng, lo: f64, hi: f64| if hi > lo { rng.random_range(lo..hi) } else { lo };
    (0..samples)
        .map(|_| {
            let v: Vec<f64> = (0..p.n())
                .map(|j| {
                    let (lo, hi) = (p.v_safe_lo[j], p.v_safe_hi[j]);
                    let half = 0.5 * sw.box_fraction * (hi - lo);
                    let mid = 0.5 * (lo + hi);
                    draw(&mut rng, mid - half, mid + half)
                })
                .collect();
            let i: Vec<f64> = (0..p.n())
                .map(|_| draw(&mut rng, sw.it_range_a[0], sw.it_range_a[1]))
                .collect();
            let vl = draw(&mut rng, sw.vl_range_v[0], sw.vl_range_v[1]);
            GridState::from_parts(&v, &i, vl)
        })
        .collect()
}

fn worker_count() -> Result<usize, CliError> {
    match std::env::var(WORKERS_ENV) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(k) if k > 0 => Ok(k),
            _ => Err(CliError::Config(format!("{WORKERS_ENV} must be a positive integer, got {v:?}"))),
        },
        Err(_) => Ok(std::thread::available_parallelism().map(|k| k.get()).unwrap_or(1)),
    }
}

#[derive(Debug, Clone, Default)]
pub struct SweepOptions {
    pub samples: Option<usize>,
    pub seed: Option<u64>,
}

/// `sweep`: random initial states, each run with the SCC and the droop
/// baseline, written to `sweep.csv` in `out_dir`. Rows are ordered by
/// sample then controller, so the file depends only on the inputs and the
/// seed, not on the number of workers.
pub fn cmd_sweep(
    scenario_path: &Path,
    overrides: &Overrides,
    options: &SweepOptions,
    out_dir: &Path,
) -> Result<Vec<SweepRow>, CliError> {
    let mut file = ScenarioFile::load(scenario_path)?;
    overrides.apply(&mut file);
    if overrides.t_final.is_none() {
        file.timing.t_final_s = file.sweep.t_final_s;
    }
    let base = file.to_scenario()?;
    let samples = options.samples.unwrap_or(file.sweep.samples);
    let seed = options.seed.unwrap_or(0);
    let starts = sample_initial_states(&file, &base, samples, seed);

    let plant_steps = base
        .plant_steps()
        .map_err(|e| CliError::Config(e.to_string()))?;
    let jobs: Vec<(usize, GridState, ControllerKind)> = starts
        .iter()
        .enumerate()
        .flat_map(|(k, x0)| [ControllerKind::Scc, ControllerKind::Droop].map(|c| (k, x0.clone(), c)))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(worker_count()?)
        .build()
        .map_err(|e| CliError::Config(format!("worker pool: {e}")))?;
    let rows: Vec<SweepRow> = pool.install(|| {
        jobs.into_par_iter()
            .map(|(sample, x0, controller)| {
                let scenario = Scenario {
                    x0: x0.clone(),
                    controller,
                    record_every: plant_steps.max(1),
                    ..base.clone()
                };
                let trace = simulate(&scenario)?;
                Ok(SweepRow {
                    sample,
                    x0,
                    summary: trace.summary,
                })
            })
            .collect::<Result<_, CliError>>()
    })?;
    write_atomic(&out_dir.join("sweep.csv"), &sweep_csv(base.params.n(), &rows))?;
    Ok(rows)
}
