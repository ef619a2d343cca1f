use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use safeplan::mpc::Variant;
use safeplan::sim::{self, EmitFormat, Outcome, RunOptions, Scenario};
use safeplan::PlanError;

#[derive(Parser)]
#[command(name = "plan", version, about = "Closed-loop simulation of the safe trajectory planner")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a scenario with one controller variant.
    Run {
        scenario: PathBuf,
        #[arg(long, value_enum)]
        variant: Variant,
        #[arg(long)]
        out: PathBuf,
        /// Maximum number of ticks.
        #[arg(long)]
        ticks: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// SQP iteration cap per solve.
        #[arg(long)]
        iter_cap: Option<usize>,
        /// Number of homotopy steps.
        #[arg(long)]
        homotopy_z: Option<usize>,
        #[arg(long, value_enum, default_value_t = EmitFormat::Csv)]
        emit: EmitFormat,
        /// Also write the union of all accepted plans.
        #[arg(long)]
        aggregate: bool,
        /// Merge a solve-time summary row into `table.csv`.
        #[arg(long)]
        table: bool,
    },
}

const EXIT_FAILED: u8 = 2;
const EXIT_INVALID: u8 = 3;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let Command::Run { scenario, variant, out, ticks, seed, iter_cap, homotopy_z, emit, aggregate, table } = cli.command;

    let scenario = match Scenario::load(&scenario) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_INVALID);
        }
    };
    let options = RunOptions { ticks, seed, iteration_cap: iter_cap, homotopy_z, record_snapshots: true, record_plans: aggregate };
    let result = match sim::run(&scenario, variant, &options) {
        Ok(r) => r,
        Err(e @ PlanError::Scenario(_)) => {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_INVALID);
        }
        Err(e) => {
            eprintln!("error: simulation aborted: {e}");
            return ExitCode::FAILURE;
        }
    };
    if let Err(e) = sim::emit(&result, &out, emit, aggregate, table) {
        eprintln!("error: writing {}: {e}", out.display());
        return ExitCode::FAILURE;
    }

    let stats = result.stats();
    println!(
        "{} {}: {} after {} ticks (mean solve {:.1} ms, max {:.1} ms, min speed {:.2} m/s)",
        result.scenario,
        variant.label(),
        result.outcome.name(),
        stats.ticks,
        stats.mean_ms,
        stats.max_ms,
        stats.min_speed
    );
    if table {
        println!("{}", sim::TABLE_HEADER);
        println!("{}", sim::table_row(&result));
    }
    if result.collision {
        eprintln!("warning: collision detected");
    }
    match &result.outcome {
        Outcome::Completed | Outcome::HaltedAtBlockade { .. } => ExitCode::SUCCESS,
        Outcome::Failed { tick, s, x, y, reason } => {
            eprintln!("failed at tick {tick}, s = {s:.2} m, (x, y) = ({x:.2}, {y:.2}): {reason}");
            ExitCode::from(EXIT_FAILED)
        }
    }
}
