use std::path::{Path, PathBuf};

use nfmc::harness::*;
use nfmc::samplers::SamplerKind;
use nfmc::targets::{build_target, TargetSpec};
use nfmc::Error;
use proptest::prelude::*;
use serde_json::json;

fn write(dir: &Path, name: &str, value: &serde_json::Value) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, serde_json::to_string_pretty(value).unwrap()).unwrap();
    p
}

fn gaussian(dim: usize) -> serde_json::Value {
    json!({"family": "gaussian", "kind": "standard", "dim": dim})
}

fn mh_config(seed: u64) -> serde_json::Value {
    json!({
        "seed": seed,
        "target": gaussian(3),
        "sampler": {"kind": "mh", "chains": 20, "warmup": {"steps": 200}, "sampling": {"steps": 300}}
    })
}

fn parse_value(v: &serde_json::Value) -> nfmc::Result<ExperimentConfig> {
    ExperimentConfig::from_json(&v.to_string())
}

fn config_path(e: Error) -> String {
    match e {
        Error::Config { path, .. } => path,
        other => panic!("expected a config error, got {other}"),
    }
}

#[test]
fn minimal_config_fills_defaults() {
    let c = parse_value(&json!({
        "seed": 1,
        "target": gaussian(10),
        "sampler": {"kind": "mh", "warmup": {"seconds": 1.0}, "sampling": {"seconds": 2.0}}
    }))
    .unwrap();
    assert_eq!(c.sampler.chains, 100);
    assert_eq!(c.sampler.leapfrog_steps, 10);
    assert!(c.flow.is_none());
    assert_eq!(c.method(), "mh");
}

#[test]
fn flow_hyperparameters_default_or_explicit() {
    let mut v = json!({
        "seed": 3,
        "target": gaussian(4),
        "sampler": {"kind": "jump_hmc", "warmup": {"steps": 1}, "sampling": {"steps": 1}},
        "flow": {"architecture": "realnvp", "hyperparameters": "default"}
    });
    let c = parse_value(&v).unwrap();
    assert_eq!(c.method(), "jump_hmc/realnvp/L2-h10-d2");
    assert_eq!(c.flow_hyperparameters().unwrap().unwrap().seed, 3);

    v["flow"]["hyperparameters"] = json!({"layers": 5, "hidden": 100});
    assert_eq!(
        parse_value(&v).unwrap().method(),
        "jump_hmc/realnvp/L5-h100-d5"
    );

    v["flow"]["hyperparameters"] = json!({"layers": 3});
    assert_eq!(
        config_path(parse_value(&v).unwrap_err()),
        "flow.hyperparameters"
    );

    v["flow"]["hyperparameters"] = json!("big");
    assert_eq!(
        config_path(parse_value(&v).unwrap_err()),
        "flow.hyperparameters"
    );
}

#[test]
fn jump_sampler_without_flow_is_rejected() {
    let v = json!({
        "seed": 1,
        "target": gaussian(2),
        "sampler": {"kind": "jump_hmc", "warmup": {"steps": 1}, "sampling": {"steps": 1}}
    });
    assert_eq!(config_path(parse_value(&v).unwrap_err()), "flow");
}

#[test]
fn zero_jump_interval_is_rejected() {
    let v = json!({
        "seed": 1,
        "target": gaussian(2),
        "sampler": {"kind": "jump_mh", "jump_interval": 0, "warmup": {"steps": 1}, "sampling": {"steps": 1}},
        "flow": {"architecture": "realnvp"}
    });
    assert_eq!(
        config_path(parse_value(&v).unwrap_err()),
        "sampler.jump_interval"
    );
}

#[test]
fn unknown_keys_report_their_path() {
    let mut v = mh_config(1);
    v["sampler"]["warmup"]["minutes"] = json!(3);
    assert_eq!(
        config_path(parse_value(&v).unwrap_err()),
        "sampler.warmup.minutes"
    );

    let mut v = mh_config(1);
    v["colour"] = json!("red");
    assert_eq!(config_path(parse_value(&v).unwrap_err()), "colour");

    let mut v = mh_config(1);
    v["sampler"]["chains"] = json!("many");
    assert_eq!(config_path(parse_value(&v).unwrap_err()), "sampler.chains");

    assert!(matches!(
        ExperimentConfig::from_json("{"),
        Err(Error::Config { .. })
    ));
}

#[test]
fn parse_config_reads_files() {
    let dir = tempfile::tempdir().unwrap();
    let p = write(dir.path(), "a.json", &mh_config(5));
    let c = parse_config(&p).unwrap();
    assert_eq!(c.seed, 5);
    assert_eq!(c.base_dir.as_deref(), Some(dir.path()));
    assert!(matches!(
        parse_config(&dir.path().join("missing.json")),
        Err(Error::Config { .. })
    ));
}

#[test]
fn reports_round_trip_and_reruns_are_identical() {
    let dir = tempfile::tempdir().unwrap();
    let c = parse_value(&mh_config(7)).unwrap();
    let (a, ta) = run_experiment(&c).unwrap();
    let (b, _) = run_experiment(&c).unwrap();
    assert!(a.error.is_none(), "{:?}", a.error);
    assert!(a.b2.is_some());
    let pa = dir.path().join("a.json");
    let pb = dir.path().join("b.json");
    write_report(&pa, &a, &ta).unwrap();
    write_report(&pb, &b, &ta).unwrap();
    let bytes = std::fs::read(&pa).unwrap();
    assert_eq!(bytes, std::fs::read(&pb).unwrap());
    let back = ExperimentReport::from_json(std::str::from_utf8(&bytes).unwrap().trim()).unwrap();
    assert_eq!(back, a);
    assert!(timings_path(&pa).exists());
}

#[test]
fn hmc_on_a_ten_dimensional_gaussian() {
    let c = parse_value(&json!({
        "seed": 11,
        "target": gaussian(10),
        "sampler": {"kind": "hmc", "warmup": {"steps": 500}, "sampling": {"steps": 1500}}
    }))
    .unwrap();
    let (r, _) = run_experiment(&c).unwrap();
    assert_eq!(r.dimension, Some(10));
    assert!(r.b2.unwrap() < 0.05, "b2 = {:?}", r.b2);
}

#[test]
fn imh_with_the_identity_flow_always_accepts() {
    let c = parse_value(&json!({
        "seed": 2,
        "target": gaussian(3),
        "sampler": {
            "kind": "imh", "jump_interval": 1, "chains": 10,
            "warmup": {"steps": 10}, "sampling": {"steps": 100},
            "fit": {"max_steps": 0}, "refit": {"max_steps": 0}
        },
        "flow": {"architecture": "identity"}
    }))
    .unwrap();
    let (r, _) = run_experiment(&c).unwrap();
    assert_eq!(r.result.unwrap().accept_rate_jump, Some(1.0));
    assert_eq!(r.flow_parameter_count, Some(0));
}

#[test]
fn posterior_without_reference_has_no_b2() {
    let dir = tempfile::tempdir().unwrap();
    let data = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/eight_schools.json");
    std::fs::copy(data, dir.path().join("schools.json")).unwrap();
    let p = write(
        dir.path(),
        "cfg.json",
        &json!({
            "seed": 1,
            "target": {"family": "eight_schools", "dataset": "schools.json"},
            "sampler": {"kind": "mh", "chains": 10, "warmup": {"steps": 50}, "sampling": {"steps": 50}}
        }),
    );
    let (r, _) = run_experiment(&parse_config(&p).unwrap()).unwrap();
    assert!(r.error.is_none(), "{:?}", r.error);
    assert_eq!(r.dimension, Some(10));
    assert_eq!(r.b2, None);
    assert!(r.result.is_some());

    std::fs::write(
        dir.path().join("ref.json"),
        json!({"second_moment": vec![1.0; 10], "variance": vec![1.0; 10]}).to_string(),
    )
    .unwrap();
    let mut c = parse_config(&p).unwrap();
    c.target = TargetSpec::EightSchools {
        dataset: "schools.json".into(),
        reference: Some("ref.json".into()),
    };
    assert!(run_experiment(&c).unwrap().0.b2.is_some());
}

#[test]
fn missing_dataset_is_recorded_not_raised() {
    let c = parse_value(&json!({
        "seed": 1,
        "target": {"family": "german_credit", "dataset": "/nonexistent/credit.json"},
        "sampler": {"kind": "mh", "warmup": {"steps": 1}, "sampling": {"steps": 1}}
    }))
    .unwrap();
    let (r, _) = run_experiment(&c).unwrap();
    assert_eq!(r.error.unwrap().kind, "data");
    assert!(r.result.is_none());
}

#[test]
fn eight_schools_dataset() {
    let data = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/eight_schools.json");
    let ds = load_dataset(&data).unwrap();
    let spec = TargetSpec::EightSchools {
        dataset: String::new(),
        reference: None,
    };
    assert_eq!(build_target(&spec, Some(&ds)).unwrap().dimension(), 10);

    let dir = tempfile::tempdir().unwrap();
    let bad = write(
        dir.path(),
        "bad.json",
        &json!({"name": "eight_schools", "columns": {"y": [1.0, 2.0], "sigma": [1.0, 0.0]}}),
    );
    assert!(matches!(load_dataset(&bad), Err(Error::Data(_))));
}

fn credit_dataset(rows: usize, features: usize, label: f64) -> serde_json::Value {
    let x: Vec<Vec<f64>> = (0..rows)
        .map(|i| {
            (0..features)
                .map(|j| ((i * 7 + j * 3) % 11) as f64 / 5.0 - 1.0)
                .collect()
        })
        .collect();
    let y: Vec<f64> = (0..rows)
        .map(|i| if i == 0 { label } else { (i % 2) as f64 })
        .collect();
    json!({"name": "german_credit", "columns": {"x": x, "y": y}})
}

#[test]
fn german_credit_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let p = write(dir.path(), "credit.json", &credit_dataset(40, 25, 1.0));
    let ds = load_dataset(&p).unwrap();
    let spec = TargetSpec::GermanCredit {
        dataset: String::new(),
        reference: None,
    };
    assert_eq!(build_target(&spec, Some(&ds)).unwrap().dimension(), 26);
    let sparse = TargetSpec::SparseGermanCredit {
        dataset: String::new(),
        reference: None,
    };
    assert_eq!(build_target(&sparse, Some(&ds)).unwrap().dimension(), 51);

    let bad = write(dir.path(), "labels.json", &credit_dataset(40, 25, 2.0));
    assert!(matches!(load_dataset(&bad), Err(Error::Data(_))));

    let mut ragged = credit_dataset(4, 3, 0.0);
    ragged["columns"]["x"][2] = json!([1.0]);
    let bad = write(dir.path(), "ragged.json", &ragged);
    assert!(matches!(load_dataset(&bad), Err(Error::Data(_))));
}

#[test]
fn a_failing_config_does_not_stop_the_batch() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "a.json", &mh_config(1));
    write(dir.path(), "b.json", &mh_config(2));
    let mut broken = mh_config(3);
    broken["sampler"]["kind"] = json!("gibbs");
    write(dir.path(), "c.json", &broken);
    write(
        dir.path(),
        "d.json",
        &json!({
            "seed": 4,
            "target": {"family": "rosenbrock", "dim": 3},
            "sampler": {"kind": "mh", "warmup": {"steps": 1}, "sampling": {"steps": 1}}
        }),
    );
    let out = dir.path().join("out");
    let outcome = run_batch(dir.path(), 2, &out).unwrap();
    assert_eq!(outcome.reports.len(), 4);
    assert_eq!(outcome.failed, 2);

    let lines = std::fs::read_to_string(&outcome.reports_path).unwrap();
    assert_eq!(lines.lines().count(), 4);
    let summary = std::fs::read_to_string(&outcome.summary_path).unwrap();
    let header = summary.lines().next().unwrap();
    assert_eq!(
        header,
        "target,sampler,flow,hyperparam_id,seed,b2,accept_local,accept_jump,warmup_s,sampling_s,param_count"
    );
    assert_eq!(summary.lines().count(), 5);

    let reports = read_reports(&format!("{}/*.ndjson", out.display())).unwrap();
    let ok: Vec<_> = reports.iter().filter(|r| !r.failed()).collect();
    assert_eq!(ok.len(), 2);
    assert!(ok.iter().all(|r| r.b2.is_some()));
    let errors: Vec<_> = reports
        .iter()
        .filter_map(|r| r.error.as_ref())
        .map(|e| e.kind.as_str())
        .collect();
    assert!(
        errors.contains(&"config") && errors.contains(&"spec"),
        "{errors:?}"
    );
}

#[test]
fn batch_rejects_zero_workers() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(
        run_batch(dir.path(), 0, dir.path()),
        Err(Error::Config { .. })
    ));
}

/// A completed report with only the fields ranking looks at.
fn fake(target: &str, family: &str, method: &str, seed: u64, b2: Option<f64>) -> ExperimentReport {
    let mut c = parse_value(&mh_config(seed)).unwrap();
    c.sampler.kind = SamplerKind::Mh;
    ExperimentReport {
        source: None,
        config: Some(c),
        target: Some(target.into()),
        family: Some(family.into()),
        dimension: Some(3),
        method: Some(method.into()),
        b2,
        result: None,
        flow_parameter_count: None,
        error: None,
    }
}

fn grid() -> Vec<ExperimentReport> {
    let mut out = Vec::new();
    for (t, target) in ["t1", "t2", "t3", "t4"].iter().enumerate() {
        for (m, method) in ["a", "b", "c"].iter().enumerate() {
            // Strictly ordered: a < b < c on every target.
            out.push(fake(
                target,
                "gaussian",
                method,
                0,
                Some((m + 1) as f64 * 0.1 + t as f64),
            ));
        }
    }
    out
}

#[test]
fn strictly_ordered_methods() {
    let s = rank_report(&grid(), Grouping::Global);
    assert_eq!(s.groups.len(), 1);
    let m = &s.groups[0].methods;
    assert_eq!(
        m.iter().map(|r| r.method.as_str()).collect::<Vec<_>>(),
        ["a", "b", "c"]
    );
    assert_eq!(m[0].mean_rank, -1.0);
    assert_eq!(m[1].mean_rank, 0.0);
    assert_eq!(m[2].mean_rank, 1.0);
    assert!(m.iter().all(|r| r.std_error == Some(0.0) && r.targets == 4));
}

#[test]
fn single_target_groups_have_no_standard_error() {
    let s = rank_report(&grid(), Grouping::Target);
    assert_eq!(s.groups.len(), 4);
    assert!(s
        .groups
        .iter()
        .flat_map(|g| &g.methods)
        .all(|m| m.std_error.is_none()));
}

#[test]
fn seeds_are_averaged_and_gaps_listed() {
    let mut reports = grid();
    // Seed 1 of `a` on t1 is terrible; the mean over seeds puts `a` last there.
    reports.push(fake("t1", "gaussian", "a", 1, Some(100.0)));
    reports.push(fake("t1", "gaussian", "b", 1, None));
    let mut failed = fake("t2", "gaussian", "c", 9, None);
    failed.error = Some(ReportError {
        kind: "numerical".into(),
        message: "boom".into(),
    });
    reports.push(failed);
    reports.push(fake("t5", "gaussian", "a", 0, Some(1.0)));

    let s = rank_report(&reports, Grouping::Target);
    let t1 = s.groups.iter().find(|g| g.group == "t1").unwrap();
    assert_eq!(t1.methods.last().unwrap().method, "a");
    assert_eq!(s.missing.len(), 2);
    assert_eq!(s.degenerate.len(), 1);
    assert_eq!(s.degenerate[0].0, "t5");

    let mut csv = Vec::new();
    write_rank_csv(&s, &mut csv).unwrap();
    let text = String::from_utf8(csv).unwrap();
    assert!(text.starts_with("group,method,mean_rank,std_error,targets\n"));
    assert_eq!(
        text.lines().filter(|l| l.starts_with("# missing")).count(),
        2
    );
    assert_eq!(
        text.lines()
            .filter(|l| l.starts_with("# degenerate t5"))
            .count(),
        1
    );
}

#[test]
fn methods_missing_from_some_targets_are_dropped_from_the_group() {
    let mut reports = grid();
    reports.push(fake("t1", "gaussian", "d", 0, Some(0.01)));
    let s = rank_report(&reports, Grouping::Family);
    assert_eq!(s.groups[0].methods.len(), 3);
    assert_eq!(
        s.incomplete,
        vec![("gaussian".to_string(), "d".to_string())]
    );
}

#[test]
fn family_grouping() {
    let mut reports = grid();
    for (m, method) in ["a", "b", "c"].iter().enumerate() {
        reports.push(fake(
            "funnel",
            "non_gaussian",
            method,
            0,
            Some(3.0 - m as f64),
        ));
    }
    let s = rank_report(&reports, Grouping::Family);
    let groups: Vec<&str> = s.groups.iter().map(|g| g.group.as_str()).collect();
    assert_eq!(groups, ["gaussian", "non_gaussian"]);
    assert_eq!(s.groups[1].methods[0].method, "c");
    assert_eq!("global".parse::<Grouping>().unwrap(), Grouping::Global);
    assert!("nope".parse::<Grouping>().is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn ranking_ignores_report_order(
        values in prop::collection::vec(0.0f64..1.0, 24),
        perm in Just((0..24).collect::<Vec<usize>>()).prop_shuffle(),
    ) {
        let mut reports = Vec::new();
        for t in 0..4 {
            for m in 0..3 {
                for seed in 0..2 {
                    let i = (t * 3 + m) * 2 + seed;
                    reports.push(fake(&format!("t{t}"), "gaussian", &format!("m{m}"), seed as u64, Some(values[i])));
                }
            }
        }
        let shuffled: Vec<_> = perm.iter().map(|&i| reports[i].clone()).collect();
        for g in [Grouping::Target, Grouping::Family, Grouping::Global] {
            prop_assert_eq!(rank_report(&reports, g), rank_report(&shuffled, g));
        }
    }
}
