use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use daestruct::cli::pipeline::{run, write_trajectories, PipelineOptions};
use daestruct::integrate::Method;

/// Structural analysis, degeneration detection and regularization of DAEs.
///
/// Exit codes: 0 all components solved (or analyzed), 2 structural failure,
/// 3 regularization failure, 4 integration failure, 5 parse or usage error.
#[derive(Parser, Debug)]
#[command(name = "daestruct", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Structural analysis, witness points, degeneration check and IIR.
    Analyze(Common),
    /// Everything `analyze` does, then integrate from every point.
    Solve {
        #[command(flatten)]
        common: Common,
        /// Step size (default: a thousandth of the interval).
        #[arg(long)]
        h: Option<f64>,
        #[arg(long, default_value = "rk4")]
        method: Method,
        /// End of the integration interval (default: from `indep`).
        #[arg(long)]
        tf: Option<f64>,
        /// Directory for the trajectory CSV files.
        #[arg(long, short, default_value = ".")]
        out: PathBuf,
    },
}

#[derive(Args, Debug)]
struct Common {
    /// Input `.dae` file.
    input: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Relative singular-value cutoff for numerical rank.
    #[arg(long, default_value_t = 1e-8)]
    tol_rank: f64,
    #[arg(long, default_value_t = 1e-6)]
    abstol: f64,
    #[arg(long, default_value_t = 1e-3)]
    reltol: f64,
    /// Maximum number of IIR rounds.
    #[arg(long, default_value_t = 10)]
    max_iir: usize,
    /// Write the report here instead of stdout.
    #[arg(long)]
    report: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 5 } else { 0 });
        }
    };
    let (common, solve) = match cli.command {
        Command::Analyze(c) => (c, None),
        Command::Solve { common, h, method, tf, out } => (common, Some((h, method, tf, out))),
    };
    let mut opts = PipelineOptions {
        seed: common.seed,
        tol_rank: common.tol_rank,
        abstol: common.abstol,
        reltol: common.reltol,
        max_iir: common.max_iir,
        ..Default::default()
    };
    if let Some((h, method, tf, _)) = &solve {
        opts.solve = true;
        opts.h = *h;
        opts.method = *method;
        opts.t_end = *tf;
    }
    let text = match std::fs::read_to_string(&common.input) {
        Ok(t) => t,
        Err(e) => {
            eprintln!("daestruct: cannot read {}: {e}", common.input.display());
            return ExitCode::from(5);
        }
    };
    let input = common.input.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let outcome = run(&input, &text, &opts);
    if let Some((_, _, _, out)) = &solve {
        if let Err(e) = write_trajectories(out, &outcome.trajectories) {
            eprintln!("daestruct: cannot write trajectories to {}: {e}", out.display());
            return ExitCode::from(4);
        }
    }
    let json = outcome.report.to_json();
    match &common.report {
        Some(path) => {
            if let Err(e) = std::fs::write(path, json) {
                eprintln!("daestruct: cannot write {}: {e}", path.display());
                return ExitCode::from(5);
            }
        }
        None => print!("{json}"),
    }
    if let Some(err) = &outcome.report.error {
        eprintln!("daestruct: {err}");
    }
    ExitCode::from(outcome.exit_code() as u8)
}
