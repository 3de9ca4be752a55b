use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use bsp_core::io::commands::{
    run_ablation, run_execute, run_monte_carlo, run_plan, run_sweep, CommandArgs, Outcome,
};
use bsp_core::io::scenario::SolverMode;
use bsp_core::sensing::VisibilityMode;

/// Belief-space planning with covariance constraints.
#[derive(Parser)]
#[command(name = "bsp", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve the scenario and write policy, report and plan table.
    Plan(Common),
    /// Run a policy once with sampled noise.
    Execute {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Policy file; defaults to OUT/policy.json.
        #[arg(long)]
        policy: Option<PathBuf>,
    },
    /// Run a policy over a batch of seeds.
    Montecarlo {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 100)]
        runs: usize,
        #[arg(long)]
        policy: Option<PathBuf>,
    },
    /// Solve with smooth and with hard visibility.
    Ablation(Common),
    /// Solve under loose, medium and tight bounds.
    Sweep(Common),
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    scenario: PathBuf,
    /// Map file overriding the one named in the scenario.
    #[arg(long)]
    map: Option<PathBuf>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    #[arg(long, value_enum)]
    visibility: Option<VisibilityArg>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Constrained,
    Unconstrained,
}

#[derive(Clone, Copy, ValueEnum)]
enum VisibilityArg {
    Smooth,
    Hard,
}

impl Common {
    fn args(&self) -> CommandArgs {
        CommandArgs {
            scenario: self.scenario.clone(),
            map: self.map.clone(),
            out: self.out.clone(),
            mode: self.mode.map(|m| match m {
                ModeArg::Constrained => SolverMode::Constrained,
                ModeArg::Unconstrained => SolverMode::Unconstrained,
            }),
            visibility: self.visibility.map(|v| match v {
                VisibilityArg::Smooth => VisibilityMode::Smooth,
                VisibilityArg::Hard => VisibilityMode::Hard,
            }),
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match &cli.command {
        Command::Plan(c) => run_plan(&c.args()),
        Command::Execute { common, seed, policy } => run_execute(&common.args(), policy.as_deref(), *seed),
        Command::Montecarlo {
            common,
            seed,
            runs,
            policy,
        } => run_monte_carlo(&common.args(), policy.as_deref(), *runs, *seed),
        Command::Ablation(c) => run_ablation(&c.args()),
        Command::Sweep(c) => run_sweep(&c.args()),
    };
    match result {
        Ok(outcome) => {
            if outcome == Outcome::Infeasible {
                eprintln!("bsp: constraints could not be satisfied; see the report for the maximum violation");
            }
            ExitCode::from(outcome.exit_code() as u8)
        }
        Err(e) => {
            eprintln!("bsp: {e}");
            ExitCode::from(1)
        }
    }
}
