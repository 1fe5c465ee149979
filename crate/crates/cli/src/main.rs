use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use refavg_cli::acceptance::{self, CriterionResult};
use refavg_cli::commands::{self, Context, RateMethod, Report, SimulateScheme};
use refavg_cli::{exit, CliError, ExperimentConfig, Format, Overrides, OUT_DIR_ENV};

#[derive(Parser)]
#[command(name = "refavg", version, about = "Slow-fast SDE averaging experiments")]
struct Cli {
    /// Worker threads for replica simulation (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Csv,
    Json,
}

#[derive(Args)]
struct Common {
    /// Experiment file.
    config: PathBuf,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (default: [outputs] directory, then $REFAVG_OUT_DIR, then `.`).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum)]
    format: Option<FormatArg>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SchemeArg {
    Coupled,
    Original,
    Averaged,
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Auto,
    Oracle,
    Mc,
}

#[derive(Subcommand)]
enum Command {
    /// Tabulate sigma_bar, <sigma>, Sigma and the identity residual on 64 x-points.
    AvgTable(Common),
    /// Endpoint samples of the coupled, original or averaged system.
    Simulate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "coupled")]
        scheme: SchemeArg,
        /// Also write a binary endpoint cache.
        #[arg(long)]
        cache: bool,
    },
    /// Endpoint samples of the limit system.
    Limit {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        cache: bool,
    },
    /// KS and covariance comparison of the coupled system against its limit.
    Compare(Common),
    /// Weak error over the epsilon list and the fitted log-log slope.
    RateSweep {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "auto")]
        method: MethodArg,
    },
    /// Residuals and centering of the two Poisson solutions on 64 x-points.
    PoissonCheck {
        #[command(flatten)]
        common: Common,
        /// Hermite truncation degree.
        #[arg(long)]
        degree: Option<usize>,
    },
    /// Run every acceptance criterion and print a pass/fail table.
    Acceptance {
        #[arg(long, default_value_t = acceptance::DEFAULT_SEED)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn context(common: &Common) -> Result<Context, CliError> {
    let overrides = Overrides {
        epsilon: common.epsilon,
        samples: common.samples,
        seed: common.seed,
        format: common.format.map(|f| match f {
            FormatArg::Csv => Format::Csv,
            FormatArg::Json => Format::Json,
        }),
    };
    let config = ExperimentConfig::load(&common.config)?.apply(&overrides)?;
    for w in &config.warnings {
        eprintln!("warning: {w}");
    }
    let env = std::env::var(OUT_DIR_ENV).ok();
    let out_dir = commands::resolve_out_dir(common.out.as_deref(), Some(&config), env.as_deref());
    let ctx = Context { config, out_dir };
    ctx.prepare_output()?;
    Ok(ctx)
}

fn print_report(report: &Report) {
    for line in &report.lines {
        println!("{line}");
    }
    for path in &report.artifacts {
        println!("wrote {}", path.display());
    }
}

fn run(cli: Cli) -> Result<i32, CliError> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Usage("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Usage(format!("worker pool: {e}")))?;
    }
    let report = match &cli.command {
        Command::AvgTable(c) => commands::avg_table(&context(c)?)?,
        Command::Simulate { common, scheme, cache } => {
            let scheme = match scheme {
                SchemeArg::Coupled => SimulateScheme::Coupled,
                SchemeArg::Original => SimulateScheme::Original,
                SchemeArg::Averaged => SimulateScheme::Averaged,
            };
            commands::simulate(&context(common)?, scheme, *cache)?
        }
        Command::Limit { common, cache } => commands::limit(&context(common)?, *cache)?,
        Command::Compare(c) => commands::compare(&context(c)?)?,
        Command::RateSweep { common, method } => {
            let method = match method {
                MethodArg::Auto => RateMethod::Auto,
                MethodArg::Oracle => RateMethod::Oracle,
                MethodArg::Mc => RateMethod::MonteCarlo,
            };
            commands::rate_sweep(&context(common)?, method)?
        }
        Command::PoissonCheck { common, degree } => commands::poisson_check(&context(common)?, *degree)?,
        Command::Acceptance { seed, out } => {
            let env = std::env::var(OUT_DIR_ENV).ok();
            let dir = commands::resolve_out_dir(out.as_deref(), None, env.as_deref());
            let mut progress = |c: &CriterionResult| println!("{}", c.line());
            let report = acceptance::run_acceptance(*seed, Some(&dir), &mut progress)?;
            println!("{}", report.summary_line());
            println!("artifacts in {}", dir.display());
            return Ok(if report.all_passed() {
                exit::OK
            } else {
                exit::CRITERION_FAILED
            });
        }
    };
    print_report(&report);
    Ok(if report.failed { exit::CRITERION_FAILED } else { exit::OK })
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { exit::USAGE } else { exit::OK };
            let _ = e.print();
            if code != exit::OK {
                let record = serde_json::json!({
                    "error": "usage",
                    "exit_code": code,
                    "message": e.kind().to_string(),
                });
                eprintln!("{record}");
            }
            return ExitCode::from(code as u8);
        }
    };
    match run(cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            eprintln!("{}", e.record());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
