use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::ExperimentReport;
use crate::error::{Error, Result};
use crate::metrics::{aggregate_ranks, MethodRank, RankTable};

/// How targets are pooled before ranks are averaged.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Grouping {
    /// Each target on its own.
    Target,
    /// Targets pooled by family (gaussian, non_gaussian, ...).
    #[default]
    Family,
    /// All targets together.
    Global,
}

impl FromStr for Grouping {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "target" => Ok(Grouping::Target),
            "family" => Ok(Grouping::Family),
            "global" => Ok(Grouping::Global),
            _ => Err(Error::config(
                "group_by",
                format!("expected target, family or global, got `{s}`"),
            )),
        }
    }
}

impl fmt::Display for Grouping {
    fn fmt(&self, f: &mut fmt::Formatter) -> fmt::Result {
        f.write_str(match self {
            Grouping::Target => "target",
            Grouping::Family => "family",
            Grouping::Global => "global",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroupRanks {
    pub group: String,
    pub methods: Vec<MethodRank>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RankSummary {
    pub groups: Vec<GroupRanks>,
    /// `(target, reason)` for targets left out of their group's ranking.
    pub degenerate: Vec<(String, String)>,
    /// Reports without a b² value, as `target method seed: reason`.
    pub missing: Vec<String>,
    /// `(group, method)` pairs dropped because the method did not cover
    /// every ranked target in the group.
    pub incomplete: Vec<(String, String)>,
}

fn describe(r: &ExperimentReport) -> String {
    let target = r.target.as_deref().or(r.source.as_deref()).unwrap_or("?");
    let method = r.method.as_deref().unwrap_or("?");
    let seed = r
        .config
        .as_ref()
        .map_or("?".to_string(), |c| c.seed.to_string());
    let reason = match &r.error {
        Some(e) => format!("{}: {}", e.kind, e.message),
        None => "no reference moments".into(),
    };
    format!("{target} {method} seed {seed}: {reason}")
}

/// Ranks methods by b² within each target (the mean over seeds), then
/// averages standardized ranks over the targets of each group.
///
/// Targets whose ranks are degenerate (fewer than two methods, or all tied)
/// are flagged and excluded. The result does not depend on report order.
pub fn rank_report(reports: &[ExperimentReport], grouping: Grouping) -> RankSummary {
    let mut summary = RankSummary::default();
    // target -> (family, method -> b² over seeds)
    let mut by_target: BTreeMap<String, (String, BTreeMap<String, Vec<f64>>)> = BTreeMap::new();
    for r in reports {
        match (&r.target, &r.family, &r.method, r.b2) {
            (Some(t), Some(f), Some(m), Some(b2)) if r.error.is_none() && b2.is_finite() => {
                by_target
                    .entry(t.clone())
                    .or_insert_with(|| (f.clone(), BTreeMap::new()))
                    .1
                    .entry(m.clone())
                    .or_default()
                    .push(b2);
            }
            _ => summary.missing.push(describe(r)),
        }
    }
    summary.missing.sort();

    let mut groups: BTreeMap<String, Vec<RankTable>> = BTreeMap::new();
    for (target, (family, methods)) in by_target {
        let mut table = RankTable::new(target.clone());
        for (m, mut v) in methods {
            v.sort_by(f64::total_cmp);
            table.insert(m, v.iter().sum::<f64>() / v.len() as f64);
        }
        if let Err(e) = table.standardized() {
            summary.degenerate.push((target, e.to_string()));
            continue;
        }
        let key = match grouping {
            Grouping::Target => target,
            Grouping::Family => family,
            Grouping::Global => "all".into(),
        };
        groups.entry(key).or_default().push(table);
    }

    for (group, tables) in groups {
        let mut common: BTreeSet<&String> = tables[0].values.keys().collect();
        for t in &tables[1..] {
            common.retain(|m| t.values.contains_key(*m));
        }
        let all: BTreeSet<&String> = tables.iter().flat_map(|t| t.values.keys()).collect();
        for m in all.difference(&common) {
            summary.incomplete.push((group.clone(), (*m).clone()));
        }
        let common: BTreeSet<String> = common.into_iter().cloned().collect();
        let mut restricted = Vec::new();
        for t in &tables {
            let mut r = RankTable::new(t.target.clone());
            for (m, v) in &t.values {
                if common.contains(m) {
                    r.insert(m.clone(), *v);
                }
            }
            match r.standardized() {
                Ok(_) => restricted.push(r),
                Err(e) => summary.degenerate.push((t.target.clone(), e.to_string())),
            }
        }
        if restricted.is_empty() {
            continue;
        }
        match aggregate_ranks(&restricted) {
            Ok(methods) => summary.groups.push(GroupRanks { group, methods }),
            Err(e) => summary.degenerate.push((group, e.to_string())),
        }
    }
    summary.degenerate.sort();
    summary
}

/// Reads reports from every file matching `pattern`, one JSON object per
/// line. Timing sidecars are skipped.
pub fn read_reports(pattern: &str) -> Result<Vec<ExperimentReport>> {
    let paths = glob::glob(pattern).map_err(|e| Error::config("reports", e.to_string()))?;
    let mut reports = Vec::new();
    let mut matched = 0;
    for p in paths {
        let p = p.map_err(|e| Error::Io(e.into()))?;
        if !p.is_file() || p.to_string_lossy().ends_with(".timings.json") {
            continue;
        }
        matched += 1;
        let text = std::fs::read_to_string(&p)?;
        for (i, line) in text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
        {
            let r = ExperimentReport::from_json(line)
                .map_err(|e| Error::Input(format!("{} line {}: {e}", p.display(), i + 1)))?;
            reports.push(r);
        }
    }
    if matched == 0 {
        return Err(Error::config(
            "reports",
            format!("no files match `{pattern}`"),
        ));
    }
    Ok(reports)
}

#[derive(Serialize)]
struct Row<'a> {
    group: &'a str,
    method: &'a str,
    mean_rank: f64,
    std_error: Option<f64>,
    targets: usize,
}

/// CSV with columns `group, method, mean_rank, std_error, targets`, followed
/// by `#` comment lines listing excluded targets and reports.
pub fn write_rank_csv(summary: &RankSummary, out: &mut dyn Write) -> Result<()> {
    {
        let mut w = csv::Writer::from_writer(&mut *out);
        for g in &summary.groups {
            for m in &g.methods {
                w.serialize(Row {
                    group: &g.group,
                    method: &m.method,
                    mean_rank: m.mean_rank,
                    std_error: m.std_error,
                    targets: m.targets,
                })?;
            }
        }
        if summary.groups.is_empty() {
            w.write_record(["group", "method", "mean_rank", "std_error", "targets"])?;
        }
        w.flush()?;
    }
    for (target, reason) in &summary.degenerate {
        writeln!(out, "# degenerate {target}: {reason}")?;
    }
    for (group, method) in &summary.incomplete {
        writeln!(
            out,
            "# incomplete {group}: {method} lacks b2 on some targets"
        )?;
    }
    for m in &summary.missing {
        writeln!(out, "# missing {m}")?;
    }
    Ok(())
}

impl RankSummary {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        let mut f = std::fs::File::create(path)?;
        write_rank_csv(self, &mut f)
    }
}
