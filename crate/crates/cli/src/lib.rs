//! The `regerr` command line: simulate misalignments, build patch datasets,
//! train and apply the error regressor, and report results.

pub mod config;
pub mod data_cmds;
pub mod error;
pub mod histogram;
pub mod model_cmds;
pub mod selfcheck;

use std::ffi::OsString;

use clap::{ArgAction, Args, CommandFactory, FromArgMatches, Parser, Subcommand};

pub use error::CliError;

#[derive(Debug, Parser)]
#[command(name = "regerr", version, about = "Dense MRI/iUS registration-error estimation", propagate_version = true)]
pub struct Cli {
    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a procedural MRI/iUS cohort with case descriptors.
    Synth(data_cmds::SynthArgs),
    /// Draw random misalignments for one case.
    Simulate(data_cmds::SimulateArgs),
    /// Build the landmark-centred patch dataset for a cohort.
    BuildDataset(data_cmds::BuildDatasetArgs),
    /// Subject-wise train/val/test split.
    Split(data_cmds::SplitArgs),
    /// Train the error regressor.
    Train(model_cmds::TrainArgs),
    /// Predict dense error maps.
    Predict(model_cmds::PredictArgs),
    /// Evaluate a predictor on a dataset split.
    Evaluate(model_cmds::EvaluateArgs),
    /// Re-render an evaluation report.
    Report(model_cmds::ReportArgs),
    /// Run the embedded property checks.
    Selfcheck(SelfcheckArgs),
}

#[derive(Debug, Clone, Args)]
pub struct SelfcheckArgs {
    #[arg(long, hide = true)]
    pub perturb_basis: bool,
}

fn selfcheck(a: &SelfcheckArgs) -> Result<(), CliError> {
    let results = selfcheck::run_all(a.perturb_basis);
    for r in &results {
        println!("{r}");
    }
    let failed = results.iter().filter(|r| !r.passed).count();
    if failed > 0 {
        return Err(CliError::Check(format!("{failed} of {} checks failed", results.len())));
    }
    println!("all {} checks ok", results.len());
    Ok(())
}

/// Parses `argv`, runs the command and returns the process exit code.
pub fn run(argv: impl IntoIterator<Item = impl Into<OsString> + Clone>) -> u8 {
    let matches = match Cli::command().try_get_matches_from(argv) {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let cli = Cli::from_arg_matches(&matches).expect("matches come from this parser");
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).try_init();
    let sub = matches.subcommand().expect("subcommand is required").1;
    let result = match &cli.command {
        Command::Synth(a) => data_cmds::synth(a, sub),
        Command::Simulate(a) => data_cmds::simulate(a, sub),
        Command::BuildDataset(a) => data_cmds::build(a, sub),
        Command::Split(a) => data_cmds::split(a, sub),
        Command::Train(a) => model_cmds::train(a, sub),
        Command::Predict(a) => model_cmds::predict(a, sub),
        Command::Evaluate(a) => model_cmds::evaluate_cmd(a, sub),
        Command::Report(a) => model_cmds::report(a, sub),
        Command::Selfcheck(a) => selfcheck(a),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
