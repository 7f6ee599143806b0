use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;

/// Runs the acceptance criteria and prints one pass/fail line per criterion.
#[derive(Parser)]
#[command(name = "acceptance")]
struct Args {
    /// Desk benchmark configuration for the few-shot experiments.
    #[arg(long, default_value = "configs/desk.toml")]
    config: PathBuf,
    /// Skip the few-shot benchmark (criteria 4 and 5 then report FAIL).
    #[arg(long)]
    skip_benchmark: bool,
    /// Working directory; a temporary one when omitted.
    #[arg(long)]
    work: Option<PathBuf>,
}

fn main() -> ExitCode {
    let args = Args::parse();
    let tmp = tempfile::tempdir().expect("temporary directory");
    let work = args.work.unwrap_or_else(|| tmp.path().to_path_buf());
    let bench = (!args.skip_benchmark).then_some(args.config.as_path());
    let outcomes = mpl_acceptance::run_all(bench, &work);
    for o in &outcomes {
        println!("{o}");
    }
    if outcomes.iter().all(|o| o.pass || o.experimental) {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
