use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use nfmc::harness::{
    build_experiment_target, parse_config, rank_report, read_reports, run_batch, run_experiment,
    write_report, Grouping,
};
use nfmc::Error;

const OK: u8 = 0;
const CONFIG_ERROR: u8 = 1;
const RUNTIME_FAILURE: u8 = 2;
const PARTIAL_BATCH: u8 = 3;

#[derive(Parser)]
#[command(name = "nfmc", version, about = "Run and rank normalizing-flow MCMC experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write its report.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Report path. Defaults to the config's `output`, else stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run every *.json config in a directory.
    Batch {
        #[arg(long)]
        config_dir: PathBuf,
        #[arg(long, default_value_t = 1)]
        workers: usize,
        /// Where reports.ndjson and summary.csv go. Defaults to
        /// `<config-dir>/results`.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Rank methods by b² across report files.
    Rank {
        /// Glob of report files (single reports or ndjson batches).
        #[arg(long)]
        reports: String,
        #[arg(long)]
        out: PathBuf,
        /// target, family or global.
        #[arg(long, default_value = "family")]
        group_by: Grouping,
    },
    /// Check a config without running it.
    Validate {
        #[arg(long)]
        config: PathBuf,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config { .. } => CONFIG_ERROR,
        _ => RUNTIME_FAILURE,
    }
}

fn fail(e: Error) -> u8 {
    eprintln!("error: {e}");
    exit_code(&e)
}

fn run(config: PathBuf, out: Option<PathBuf>) -> Result<u8, Error> {
    let config = parse_config(&config)?;
    let (report, timings) = run_experiment(&config)?;
    match out.or_else(|| config.output.as_ref().map(|p| config.resolve_path(p))) {
        Some(path) => {
            write_report(&path, &report, &timings)?;
            eprintln!("wrote {}", path.display());
        }
        None => {
            let mut stdout = std::io::stdout().lock();
            writeln!(stdout, "{}", report.to_json()?)?;
        }
    }
    if let Some(e) = &report.error {
        eprintln!("run failed ({}): {}", e.kind, e.message);
        return Ok(RUNTIME_FAILURE);
    }
    match report.b2 {
        Some(b2) => eprintln!("b2 = {b2:.6e}"),
        None => eprintln!("b2 unavailable: no reference moments"),
    }
    Ok(OK)
}

fn batch(config_dir: PathBuf, workers: usize, out_dir: Option<PathBuf>) -> Result<u8, Error> {
    let out_dir = out_dir.unwrap_or_else(|| config_dir.join("results"));
    let outcome = run_batch(&config_dir, workers, &out_dir)?;
    let total = outcome.reports.len();
    eprintln!(
        "{} of {total} experiments succeeded; reports in {}, summary in {}",
        total - outcome.failed,
        outcome.reports_path.display(),
        outcome.summary_path.display()
    );
    for r in outcome.reports.iter().filter(|r| r.failed()) {
        let e = r.error.as_ref().expect("failed report has an error");
        eprintln!("  {}: {}: {}", r.source.as_deref().unwrap_or("?"), e.kind, e.message);
    }
    Ok(match outcome.failed {
        0 => OK,
        n if n == total => RUNTIME_FAILURE,
        _ => PARTIAL_BATCH,
    })
}

fn rank(pattern: String, out: PathBuf, group_by: Grouping) -> Result<u8, Error> {
    let reports = read_reports(&pattern)?;
    let summary = rank_report(&reports, group_by);
    summary.write_csv(&out)?;
    eprintln!(
        "ranked {} group(s) from {} report(s); {} excluded, {} degenerate",
        summary.groups.len(),
        reports.len(),
        summary.missing.len(),
        summary.degenerate.len()
    );
    Ok(OK)
}

fn validate(config: PathBuf) -> Result<u8, Error> {
    let config = parse_config(&config)?;
    // Dataset and reference files count as configuration here.
    let target = build_experiment_target(&config).map_err(|e| Error::Config {
        path: "target".into(),
        message: e.to_string(),
    })?;
    println!("ok: {} on {} (dim {})", config.method(), target.name(), target.dimension());
    Ok(OK)
}

fn main() -> ExitCode {
    // Usage errors are config errors; clap would otherwise exit with 2.
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { CONFIG_ERROR } else { OK });
        }
    };
    let result = match cli.command {
        Command::Run { config, out } => run(config, out),
        Command::Batch {
            config_dir,
            workers,
            out_dir,
        } => batch(config_dir, workers, out_dir),
        Command::Rank { reports, out, group_by } => rank(reports, out, group_by),
        Command::Validate { config } => validate(config),
    };
    ExitCode::from(result.unwrap_or_else(fail))
}
