use std::fs::{File, OpenOptions};
use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::Serialize;

use super::{parse_config, run_experiment, ExperimentReport, ReportError};
use crate::error::{Error, Result};
use crate::samplers::RunTimings;

/// One line of `summary.csv`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SummaryRow {
    pub target: String,
    pub sampler: String,
    pub flow: String,
    pub hyperparam_id: String,
    pub seed: Option<u64>,
    pub b2: Option<f64>,
    pub accept_local: Option<f64>,
    pub accept_jump: Option<f64>,
    pub warmup_s: Option<f64>,
    pub sampling_s: Option<f64>,
    pub param_count: Option<usize>,
}

impl SummaryRow {
    fn new(report: &ExperimentReport, timings: Option<&RunTimings>) -> Self {
        let config = report.config.as_ref();
        let result = report.result.as_ref();
        Self {
            target: report
                .target
                .clone()
                .or_else(|| report.source.clone())
                .unwrap_or_default(),
            sampler: config
                .map(|c| c.sampler.kind.to_string())
                .unwrap_or_default(),
            flow: report.flow_label(),
            hyperparam_id: report.hyperparameter_id(),
            seed: config.map(|c| c.seed),
            b2: report.b2,
            accept_local: result.and_then(|r| r.accept_rate_local),
            accept_jump: result.and_then(|r| r.accept_rate_jump),
            // Fit and refit time count towards the phase they precede.
            warmup_s: timings.map(|t| t.fit_seconds + t.warmup_seconds),
            sampling_s: timings.map(|t| t.refit_seconds + t.sampling_seconds),
            param_count: report.flow_parameter_count,
        }
    }

    fn sort_key(&self) -> (&str, &str, &str, &str, Option<u64>) {
        (
            &self.target,
            &self.sampler,
            &self.flow,
            &self.hyperparam_id,
            self.seed,
        )
    }
}

#[derive(Clone, Debug)]
pub struct BatchOutcome {
    pub reports: Vec<ExperimentReport>,
    pub failed: usize,
    pub reports_path: PathBuf,
    pub summary_path: PathBuf,
}

/// Config files in `dir`: every `*.json`, in name order.
fn config_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|e| e == "json"))
        .collect();
    files.sort();
    Ok(files)
}

fn run_one(path: &Path) -> (ExperimentReport, Option<RunTimings>) {
    let source = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let config = match parse_config(path) {
        Ok(c) => c,
        Err(e) => return (ExperimentReport::config_failure(source, &e), None),
    };
    match catch_unwind(AssertUnwindSafe(|| run_experiment(&config))) {
        Ok(Ok((mut report, timings))) => {
            report.source = Some(source);
            (report, Some(timings))
        }
        Ok(Err(e)) => (ExperimentReport::config_failure(source, &e), None),
        Err(panic) => {
            let message = panic
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "unknown panic".into());
            let mut report = ExperimentReport::config_failure(
                source,
                &Error::ContractViolation(message.clone()),
            );
            report.config = Some(config);
            report.error = Some(ReportError {
                kind: "panic".into(),
                message,
            });
            (report, None)
        }
    }
}

/// Runs every config in `config_dir` on up to `workers` threads. Each report
/// is appended to `<out_dir>/reports.ndjson` as soon as it finishes; a
/// sorted `summary.csv` is written at the end. A failing experiment is
/// recorded and never stops the others.
pub fn run_batch(config_dir: &Path, workers: usize, out_dir: &Path) -> Result<BatchOutcome> {
    if workers == 0 {
        return Err(Error::config("workers", "must be at least 1"));
    }
    let files = config_files(config_dir)?;
    if files.is_empty() {
        return Err(Error::config(
            "config_dir",
            format!("no *.json configs in {}", config_dir.display()),
        ));
    }
    std::fs::create_dir_all(out_dir)?;
    let reports_path = out_dir.join("reports.ndjson");
    let summary_path = out_dir.join("summary.csv");
    let sink = Mutex::new(
        OpenOptions::new()
            .create(true)
            .write(true)
            .truncate(true)
            .open(&reports_path)?,
    );
    // Experiments run on plain threads. As rayon tasks, a worker waiting on
    // its own chain-level parallel loop could steal a whole other experiment
    // and overrun its time budgets.
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<Result<(ExperimentReport, Option<RunTimings>)>>>> =
        files.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|s| {
        for _ in 0..workers.min(files.len()) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(path) = files.get(i) else { break };
                let (report, timings) = run_one(path);
                let written = report.to_json().and_then(|line| {
                    let mut f = sink.lock().unwrap_or_else(|p| p.into_inner());
                    writeln!(f, "{line}")?;
                    f.flush()?;
                    Ok(())
                });
                *slots[i].lock().unwrap_or_else(|p| p.into_inner()) =
                    Some(written.map(|_| (report, timings)));
            });
        }
    });
    let results: Vec<Result<(ExperimentReport, Option<RunTimings>)>> = slots
        .into_iter()
        .map(|m| {
            m.into_inner()
                .unwrap_or_else(|p| p.into_inner())
                .expect("every config is run")
        })
        .collect();
    let results = results.into_iter().collect::<Result<Vec<_>>>()?;

    let mut rows: Vec<SummaryRow> = results
        .iter()
        .map(|(r, t)| SummaryRow::new(r, t.as_ref()))
        .collect();
    rows.sort_by(|a, b| a.sort_key().cmp(&b.sort_key()));
    let mut w = csv::Writer::from_writer(File::create(&summary_path)?);
    for row in &rows {
        w.serialize(row)?;
    }
    w.flush()?;

    let failed = results.iter().filter(|(r, _)| r.failed()).count();
    Ok(BatchOutcome {
        reports: results.into_iter().map(|(r, _)| r).collect(),
        failed,
        reports_path,
        summary_path,
    })
}
