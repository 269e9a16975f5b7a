//! Experiment configuration, execution and reporting.

mod batch;
mod config;
mod rank;

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flows::build_flow;
use crate::metrics::squared_bias;
use crate::samplers::{run_sampler, RunResult, RunTimings};
use crate::targets::{
    build_target, PosteriorDataset, ReferenceMoments, TargetDistribution, TargetSpec,
};

pub use batch::{run_batch, BatchOutcome, SummaryRow};
pub use config::{parse_config, ExperimentConfig, FlowSpec, Hyperparameters};
pub use rank::{rank_report, read_reports, write_rank_csv, GroupRanks, Grouping, RankSummary};

/// Reproducible record of one experiment. Wall-clock timings live in a
/// sidecar so that reruns produce identical bytes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    /// Config file the experiment came from, when run from disk.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<String>,
    /// `None` only when the config itself could not be parsed.
    pub config: Option<ExperimentConfig>,
    pub target: Option<String>,
    pub family: Option<String>,
    pub dimension: Option<usize>,
    pub method: Option<String>,
    /// Absent when the target has no reference moments or the run failed.
    pub b2: Option<f64>,
    pub result: Option<RunResult>,
    pub flow_parameter_count: Option<usize>,
    pub error: Option<ReportError>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportError {
    pub kind: String,
    pub message: String,
}

impl ReportError {
    pub fn from_error(e: &Error) -> Self {
        Self {
            kind: error_kind(e).into(),
            message: e.to_string(),
        }
    }
}

fn error_kind(e: &Error) -> &'static str {
    match e {
        Error::Numerical { .. } => "numerical",
        Error::ContractViolation(_) => "contract_violation",
        Error::Spec(_) => "spec",
        Error::Data(_) => "data",
        Error::Input(_) => "input",
        Error::MomentsUnavailable(_) => "moments_unavailable",
        Error::Convergence { .. } => "convergence",
        Error::TrainingDiverged { .. } => "training_diverged",
        Error::DivergentTrajectory { .. } => "divergent_trajectory",
        Error::Config { .. } => "config",
        Error::DegenerateRanks(_) => "degenerate_ranks",
        Error::Io(_) => "io",
        Error::Json(_) => "json",
        Error::Csv(_) => "csv",
    }
}

impl ExperimentReport {
    fn empty(config: Option<ExperimentConfig>) -> Self {
        Self {
            source: None,
            method: config.as_ref().map(ExperimentConfig::method),
            config,
            target: None,
            family: None,
            dimension: None,
            b2: None,
            result: None,
            flow_parameter_count: None,
            error: None,
        }
    }

    /// Report for a config file that failed to parse.
    pub fn config_failure(source: impl Into<String>, e: &Error) -> Self {
        let mut r = Self::empty(None);
        r.source = Some(source.into());
        r.error = Some(ReportError::from_error(e));
        r
    }

    pub fn failed(&self) -> bool {
        self.error.is_some()
    }

    /// Parameter-free description of the flow, e.g. `realnvp` or `none`.
    pub fn flow_label(&self) -> String {
        match self.config.as_ref().and_then(|c| c.flow.as_ref()) {
            Some(f) => f.architecture.to_string(),
            None => "none".into(),
        }
    }

    pub fn hyperparameter_id(&self) -> String {
        match self.config.as_ref().and_then(|c| c.flow.as_ref()) {
            Some(f) => f
                .hyperparameters
                .values()
                .resolve(f.architecture)
                .map(|h| h.id())
                .unwrap_or_default(),
            None => String::new(),
        }
    }

    /// One line of JSON.
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

/// Reads and validates a posterior dataset. Files naming one of the built-in
/// models are also checked against that model's requirements.
pub fn load_dataset(path: &Path) -> Result<PosteriorDataset> {
    let ds = PosteriorDataset::load(path)?;
    let spec = match ds.name.as_str() {
        "eight_schools" => Some(TargetSpec::EightSchools {
            dataset: String::new(),
            reference: None,
        }),
        "german_credit" => Some(TargetSpec::GermanCredit {
            dataset: String::new(),
            reference: None,
        }),
        "sparse_german_credit" => Some(TargetSpec::SparseGermanCredit {
            dataset: String::new(),
            reference: None,
        }),
        _ => None,
    };
    if let Some(spec) = spec {
        build_target(&spec, Some(&ds))?;
    }
    Ok(ds)
}

/// Builds the config's target, loading its dataset and reference moments
/// relative to the config's directory.
pub fn build_experiment_target(config: &ExperimentConfig) -> Result<TargetDistribution> {
    let dataset = match config.target.dataset_path() {
        Some(p) => Some(load_dataset(&config.resolve_path(Path::new(p)))?),
        None => None,
    };
    let mut target = build_target(&config.target, dataset.as_ref())?;
    if let Some(p) = config.target.reference_path() {
        target =
            target.with_reference(ReferenceMoments::load(&config.resolve_path(Path::new(p)))?)?;
    }
    Ok(target)
}

/// Runs one experiment. Configuration errors are returned; failures while
/// building or sampling are recorded in the report instead.
pub fn run_experiment(config: &ExperimentConfig) -> Result<(ExperimentReport, RunTimings)> {
    config.validate()?;
    let mut echo = config.clone();
    echo.base_dir = None;
    let mut report = ExperimentReport::empty(Some(echo));
    let mut timings = RunTimings::default();
    if let Err(e) = execute(config, &mut report, &mut timings) {
        report.error = Some(ReportError::from_error(&e));
    }
    Ok((report, timings))
}

fn execute(
    config: &ExperimentConfig,
    report: &mut ExperimentReport,
    timings: &mut RunTimings,
) -> Result<()> {
    let target = build_experiment_target(config)?;
    report.target = Some(target.name().to_string());
    report.family = Some(target.family().to_string());
    report.dimension = Some(target.dimension());
    let mut flow = match (&config.flow, config.flow_hyperparameters()) {
        (Some(f), Some(hp)) => Some(build_flow(f.architecture, target.dimension(), &hp?)?),
        _ => None,
    };
    report.flow_parameter_count = flow.as_ref().map(|f| f.parameter_count());
    let (result, t) = run_sampler(&config.sampler, &target, flow.as_mut(), config.seed)?;
    *timings = t;
    if result
        .second_moment
        .iter()
        .chain(&result.first_moment)
        .any(|v| !v.is_finite())
    {
        return Err(Error::numerical("estimated moments"));
    }
    report.b2 = match target.reference_moments() {
        Ok((m2, var)) => Some(squared_bias(&result.second_moment, &m2, &var)?),
        Err(Error::MomentsUnavailable(_)) => None,
        Err(e) => return Err(e),
    };
    report.result = Some(result);
    Ok(())
}

/// Sidecar path holding the wall timings of the report at `path`.
pub fn timings_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".timings.json");
    PathBuf::from(s)
}

/// Writes the report and its timings sidecar.
pub fn write_report(path: &Path, report: &ExperimentReport, timings: &RunTimings) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "{}", report.to_json()?)?;
    std::fs::write(
        timings_path(path),
        serde_json::to_string_pretty(timings)? + "\n",
    )?;
    Ok(())
}
