use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use gbnn::curvature::{self, CurvaturePoint, OutputActivation};
use gbnn::heads::HeadKind;
use gbnn::runner::{self, RunConfig};

#[derive(Parser)]
#[command(
    name = "gbnn",
    version,
    about = "Train and compare output heads, check gradients, inspect curvature"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the configured network for every trial and write diagnostics.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Paired comparison of several heads on identical data and seeds.
    Compare {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated head kinds, e.g. softmax_ce,exp_gb,pow3_gb
        #[arg(long, value_delimiter = ',', required = true)]
        heads: Vec<HeadKind>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference checks of every backward pass, head and Hessian.
    CheckGrad {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Hessian first-term ordering over a grid, plus closed-form vs numeric Hessians.
    Curvature {
        /// Softmax normalization term.
        #[arg(long)]
        s: f64,
        /// Grid as lo:hi:step
        #[arg(long, allow_hyphen_values = true)]
        grid: String,
        /// Target used in the Hessian table.
        #[arg(long, default_value_t = 1.0, allow_hyphen_values = true)]
        t: f64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_grid(spec: &str) -> Result<(f64, f64, f64), String> {
    let parts: Vec<&str> = spec.split(':').collect();
    let [lo, hi, step] = parts.as_slice() else {
        return Err(format!("grid {spec:?} is not lo:hi:step"));
    };
    let num = |s: &str| s.trim().parse::<f64>().map_err(|e| format!("grid value {s:?}: {e}"));
    Ok((num(lo)?, num(hi)?, num(step)?))
}

fn run(cli: Cli) -> Result<bool, Box<dyn std::error::Error>> {
    match cli.command {
        Command::Run { config, out } => {
            let cfg = RunConfig::load(&config)?;
            let summary = runner::run_trials(&cfg)?;
            runner::write_trials(&summary, &out)?;
            for w in &summary.warnings {
                eprintln!("warning: {w}");
            }
            println!(
                "{}: median min error {:.4}, median convergence epoch {}, median final error {:.4}",
                summary.head.kind,
                summary.median_min_error,
                summary.median_convergence_epoch,
                summary.median_final_error
            );
            Ok(true)
        }
        Command::Compare { config, heads, out } => {
            let cfg = RunConfig::load(&config)?;
            let specs: Vec<_> = heads.iter().map(|&k| cfg.head_for(k)).collect();
            let cmp = runner::compare_heads(&cfg, &specs)?;
            cmp.write(&out)?;
            for row in &cmp.rows {
                for w in &row.warnings {
                    eprintln!("warning: {}: {w}", row.head.kind);
                }
            }
            print!("{}", cmp.comparison_csv());
            Ok(true)
        }
        Command::CheckGrad { seed } => {
            let report = runner::check_gradients(seed);
            print!("{report}");
            Ok(report.passed())
        }
        Command::Curvature { s, grid, t, out } => {
            let (lo, hi, step) = parse_grid(&grid)?;
            let xs = curvature::grid(lo, hi, step)?;
            let report = curvature::first_term_ordering(&xs, s)?;
            let mut checks = Vec::new();
            for activation in OutputActivation::ALL {
                for &x in &xs {
                    checks.push(curvature::check_hessian(activation, &CurvaturePoint::new(x, t, s)?));
                }
            }
            fs::create_dir_all(&out)?;
            fs::write(out.join("ordering.csv"), report.to_csv())?;
            fs::write(out.join("hessians.csv"), curvature::hessian_table_csv(&checks))?;
            match report.longest_window {
                Some((a, b)) => println!("ordering holds on [{a}, {b}] for s = {s}"),
                None => println!("ordering holds nowhere on the grid for s = {s}"),
            }
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
