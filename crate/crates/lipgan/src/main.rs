//! Command-line front end for the experiment runner.
//!
//! Exit codes: 0 success, 1 spec/usage error, 2 runtime failure (divergence,
//! I/O), 3 completed run with failing checks.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use lipgan::experiments::{
    aggregate_report, field_csv, field_svg, gradient_field, load_spec, output_dir,
    run_experiment, validate_spec, ExperimentError, FieldBox, OUTPUT_ENV,
};
use lipgan::nn::Mlp;

#[derive(Parser)]
#[command(
    name = "lipgan",
    version,
    about = "Trains Lipschitz-constrained critics against exact transport oracles",
    after_help = concat!(
        "Artifacts land in {output}/{name}-seed{seed}; the ",
        "LIPGAN_OUT environment variable overrides the output root."
    )
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Execute an experiment spec and write its artifact directory.
    Run {
        /// TOML spec file.
        spec: PathBuf,
    },
    /// Parse and check a spec file without training anything.
    Validate {
        /// TOML spec file.
        spec: PathBuf,
    },
    /// Sample a checkpoint's input-gradient field over a 2-D box.
    Field {
        /// Model checkpoint written by a run.
        checkpoint: PathBuf,
        /// Box as X_LO X_HI Y_LO Y_HI (default -1.5 1.5 -1.5 1.5).
        #[arg(long = "box", num_args = 4, allow_negative_numbers = true,
              value_names = ["X_LO", "X_HI", "Y_LO", "Y_HI"])]
        bbox: Option<Vec<f64>>,
        /// Grid resolution per axis.
        #[arg(long, default_value_t = 17)]
        res: usize,
        /// CSV destination; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write an SVG arrow plot.
        #[arg(long)]
        svg: Option<PathBuf>,
    },
    /// Recompute summaries from run directories into one CSV on stdout.
    Report {
        /// Artifact directories produced by `run`.
        #[arg(required = true)]
        dirs: Vec<PathBuf>,
    },
}

fn failure_code(err: &ExperimentError) -> u8 {
    match err {
        ExperimentError::Parse { .. }
        | ExperimentError::Invalid { .. }
        | ExperimentError::NotTwoDimensional { .. } => 1,
        _ => 2,
    }
}

fn run(spec_path: &PathBuf) -> ExitCode {
    let spec = match load_spec(spec_path) {
        Ok(spec) => spec,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    };
    match run_experiment(&spec) {
        Ok(outcome) => {
            for (name, check) in &outcome.summary.checks {
                let verdict = if check.pass { "pass" } else { "FAIL" };
                println!("check {name}: {verdict} ({})", check.detail);
            }
            println!("artifacts: {}", outcome.dir.display());
            if outcome.pass {
                ExitCode::SUCCESS
            } else {
                eprintln!("error: one or more checks failed");
                ExitCode::from(3)
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            if matches!(e, ExperimentError::Train { .. }) {
                eprintln!("partial metrics retained in {}", output_dir(&spec).display());
            }
            ExitCode::from(failure_code(&e))
        }
    }
}

fn validate(spec_path: &PathBuf) -> ExitCode {
    match load_spec(spec_path).and_then(|spec| {
        validate_spec(&spec)?;
        Ok(spec)
    }) {
        Ok(spec) => {
            println!("ok: {} ({})", spec.name, spec.scenario);
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn field(
    checkpoint: &PathBuf,
    bbox: Option<Vec<f64>>,
    res: usize,
    out: Option<PathBuf>,
    svg: Option<PathBuf>,
) -> ExitCode {
    let model = match Mlp::load(checkpoint) {
        Ok(model) => model,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    };
    let b = bbox.unwrap_or_else(|| vec![-1.5, 1.5, -1.5, 1.5]);
    let bbox = FieldBox { x_lo: b[0], x_hi: b[1], y_lo: b[2], y_hi: b[3] };
    let rows = match gradient_field(&model, &bbox, res) {
        Ok(rows) => rows,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(failure_code(&e));
        }
    };
    let csv = field_csv(&rows);
    let write_result = match &out {
        Some(path) => std::fs::write(path, &csv),
        None => {
            print!("{csv}");
            Ok(())
        }
    };
    if let Err(e) = write_result {
        eprintln!("error: {e}");
        return ExitCode::from(2);
    }
    if let Some(path) = svg {
        if let Err(e) = std::fs::write(path, field_svg(&rows, &bbox, res)) {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    ExitCode::SUCCESS
}

fn report(dirs: &[PathBuf]) -> ExitCode {
    match aggregate_report(dirs) {
        Ok(csv) => {
            print!("{csv}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn main() -> ExitCode {
    // Referencing the constant here keeps the help text honest if it moves.
    debug_assert_eq!(OUTPUT_ENV, "LIPGAN_OUT");
    let cli = Cli::parse();
    match cli.command {
        Command::Run { spec } => run(&spec),
        Command::Validate { spec } => validate(&spec),
        Command::Field { checkpoint, bbox, res, out, svg } => {
            field(&checkpoint, bbox, res, out, svg)
        }
        Command::Report { dirs } => report(&dirs),
    }
}
