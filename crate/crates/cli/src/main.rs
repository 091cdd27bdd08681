//! `herd`: run scenarios, searches, optimizations and diagnostics from the shell.
//!
//! Exit status: 0 on success, 1 when a target is not reached, an optimization
//! stagnates or a run fails numerically, 2 on usage or validation errors.

mod commands;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::{Common, Outcome};
use herding::HerdError;

#[derive(Parser, Debug)]
#[command(
    name = "herd",
    version,
    about = "Guidance-by-repulsion herding toolkit"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Integrate the scenario's open-loop schedule and write the trajectory.
    Simulate {
        #[command(flatten)]
        common: Common,
        /// Also write gnuplot data to this file.
        #[arg(long)]
        plot: Option<PathBuf>,
        /// Plot blocks: tracks, markers, controls, radius, energy, lyapunov:K.
        #[arg(long, value_delimiter = ',', default_value = "tracks,markers,controls")]
        series: Vec<String>,
    },
    /// Search an off-bang-off (or constant) control that sends the evader to the target.
    Reach {
        #[command(flatten)]
        common: Common,
        /// Search constant gains instead of off-bang-off switching times.
        #[arg(long)]
        constant: bool,
    },
    /// Pass the scenario's waypoints one after another.
    Waypoints {
        #[command(flatten)]
        common: Common,
    },
    /// Solve the scenario's optimal control problem.
    Optimize {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        max_iter: Option<usize>,
        /// Write the cost of every accepted iterate to this CSV file.
        #[arg(long)]
        history: Option<PathBuf>,
    },
    /// Run the closed-loop feedback law.
    Feedback {
        #[command(flatten)]
        common: Common,
    },
    /// Energy, Lyapunov and asymptotic-fit report of a simulation.
    Diagnose {
        #[command(flatten)]
        common: Common,
        /// Fraction of the run used for the asymptotic fits.
        #[arg(long, default_value_t = 0.3)]
        tail: f64,
    },
    /// Compare the adjoint gradient with central finite differences.
    ValidateGradient {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 1e-5)]
        step: f64,
        #[arg(long, default_value_t = 1e-4)]
        threshold: f64,
    },
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<HerdError>() {
        Some(
            HerdError::Singularity { .. } | HerdError::Divergence { .. } | HerdError::Domain { .. },
        ) => 1,
        _ => 2,
    }
}

fn run(command: &Command) -> anyhow::Result<(Outcome, bool)> {
    Ok(match command {
        Command::Simulate {
            common,
            plot,
            series,
        } => (
            commands::simulate(common, plot.as_deref(), series)?,
            common.json,
        ),
        Command::Reach { common, constant } => (commands::reach(common, *constant)?, common.json),
        Command::Waypoints { common } => (commands::waypoints(common)?, common.json),
        Command::Optimize {
            common,
            max_iter,
            history,
        } => (
            commands::optimize(common, *max_iter, history.as_deref())?,
            common.json,
        ),
        Command::Feedback { common } => (commands::feedback(common)?, common.json),
        Command::Diagnose { common, tail } => (commands::diagnose(common, *tail)?, common.json),
        Command::ValidateGradient {
            common,
            step,
            threshold,
        } => (
            commands::validate_gradient(common, *step, *threshold)?,
            common.json,
        ),
    })
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(&cli.command) {
        Ok((outcome, json)) => {
            println!("{}", outcome.report.render(json));
            ExitCode::from(if outcome.success { 0 } else { 1 })
        }
        Err(e) => {
            eprintln!("herd: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
