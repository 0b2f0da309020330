use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use scc_cli::commands::{cmd_run, cmd_sweep, cmd_table2, Overrides, SweepOptions};
use scc_cli::CliError;
use scc_core::simulation::ControllerKind;

#[derive(Parser)]
#[command(name = "scc-sim", version, about = "Closed-loop DC microgrid simulations with a CLF/CBF quadratic-program controller")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate one scenario and write trace.csv and summary.json
    Run {
        #[command(flatten)]
        common: Common,
        /// Output directory
        #[arg(long, default_value = ".")]
        out: PathBuf,
        /// Recorded in summary.json; the simulation itself is deterministic
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run the controller and the droop baseline and tabulate averaged states
    Table2 {
        #[command(flatten)]
        common: Common,
        /// CSV output path; aligned text goes next to it with a .txt extension
        #[arg(long, default_value = "table2.csv")]
        out: PathBuf,
    },
    /// Run both controllers from random initial states and write sweep.csv
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Output directory
        #[arg(long, default_value = ".")]
        out: PathBuf,
        /// Seed for the initial-state sampler
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Number of initial states (overrides the scenario file)
        #[arg(long)]
        samples: Option<usize>,
    },
}

#[derive(Args)]
struct Common {
    /// Scenario file (JSON)
    scenario: PathBuf,
    #[arg(long, value_enum)]
    controller: Option<ControllerArg>,
    /// Simulated horizon [s]
    #[arg(long)]
    t_final: Option<f64>,
    /// Plant integration step [s]
    #[arg(long)]
    dt_plant: Option<f64>,
    /// Controller update period [s]; a whole multiple of the plant step
    #[arg(long)]
    dt_control: Option<f64>,
    /// Record every plant step instead of the scenario's decimation
    #[arg(long)]
    raw_trace: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum ControllerArg {
    Scc,
    Droop,
    Fl,
}

impl From<ControllerArg> for ControllerKind {
    fn from(c: ControllerArg) -> Self {
        match c {
            ControllerArg::Scc => ControllerKind::Scc,
            ControllerArg::Droop => ControllerKind::Droop,
            ControllerArg::Fl => ControllerKind::Fl,
        }
    }
}

impl Common {
    fn overrides(&self) -> Overrides {
        Overrides {
            controller: self.controller.map(Into::into),
            t_final: self.t_final,
            dt_plant: self.dt_plant,
            dt_control: self.dt_control,
            raw_trace: self.raw_trace,
        }
    }
}

fn execute(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Run { common, out, seed } => {
            let report = cmd_run(&common.scenario, &common.overrides(), &out, seed)?;
            let s = &report.summary;
            println!(
                "{}: converged {}, averaged bus {:.4} V, smallest barrier margin {:.4e}, \
                 fallback {}/{} control steps",
                s.controller.as_str(),
                s.converged,
                s.avg_v_bus,
                s.min_b,
                s.fallback_steps,
                s.control_steps
            );
            println!("wrote {} and {}", report.trace_path.display(), report.summary_path.display());
        }
        Command::Table2 { common, out } => {
            let table = cmd_table2(&common.scenario, &common.overrides(), &out)?;
            print!("{}", table.to_text());
        }
        Command::Sweep {
            common,
            out,
            seed,
            samples,
        } => {
            let options = SweepOptions {
                samples,
                seed: Some(seed),
            };
            let rows = cmd_sweep(&common.scenario, &common.overrides(), &options, &out)?;
            for kind in [ControllerKind::Scc, ControllerKind::Droop] {
                let runs: Vec<_> = rows.iter().filter(|r| r.summary.controller == kind).collect();
                let ok = runs.iter().filter(|r| r.success()).count();
                println!("{}: {ok}/{} runs converged safely", kind.as_str(), runs.len());
            }
            println!("wrote {}", out.join("sweep.csv").display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
