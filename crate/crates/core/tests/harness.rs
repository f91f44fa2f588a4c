use std::fs;

use fbm_smp::harness::*;
use fbm_smp::problem::{Builtin, PolicySpec};
use fbm_smp::verify::VariationalReport;
use fbm_smp::Error;

fn small(experiments: Vec<Experiment>) -> ExperimentConfig {
    let mut c = ExperimentConfig::for_problem(Builtin::lq_basic());
    c.experiments = experiments;
    c.n_steps = 16;
    c.m_paths = 2000;
    c.policy = PolicySpec::LqOptimal;
    c
}

#[test]
fn trivial_single_path_run_passes() {
    let mut c = ExperimentConfig::for_problem(Builtin::Trivial);
    c.experiments = vec![Experiment::Simulate, Experiment::Cost];
    c.m_paths = 1;
    c.n_steps = 4;
    let r = run(&c).unwrap();
    assert!(r.pass);
    assert_eq!(r.failed_checks().count(), 0);
    assert!(r.results.contains_key("simulate") && r.results.contains_key("cost"));
}

#[test]
fn runs_are_deterministic_and_fingerprinted() {
    let c = small(vec![
        Experiment::SampleFbm,
        Experiment::CheckGirsanov,
        Experiment::SolveBsde,
    ]);
    let a = run(&c).unwrap();
    let b = run(&c).unwrap();
    assert_eq!(a.payload(), b.payload());
    assert_eq!(a.fingerprint, c.fingerprint());
    assert_eq!(a.fingerprint.len(), 64);
    let mut other = c.clone();
    other.seed = 1;
    assert_ne!(other.fingerprint(), c.fingerprint());
    assert!(a.pass, "{:?}", a.failed_checks().collect::<Vec<_>>());
}

#[test]
fn suboptimal_policy_fails_the_verification() {
    let mut c = small(vec![Experiment::VerifyMp]);
    c.policy = PolicySpec::Constant { value: 0.0 };
    let r = run(&c).unwrap();
    assert!(!r.pass);
    let failed: Vec<_> = r.failed_checks().map(|c| c.name.as_str()).collect();
    assert_eq!(failed, ["variational_inequality"]);
    let vi: VariationalReport = r.result(Experiment::VerifyMp).unwrap();
    assert_eq!(vi.at_current_max_abs, 0.0);
    assert!(!vi.rejections.is_empty());
}

#[test]
fn record_is_written_with_tables() {
    let c = small(vec![Experiment::SampleFbm, Experiment::VerifyMp]);
    let r = run(&c).unwrap();
    let tmp = tempfile::tempdir().unwrap();
    let dir = write_record(&r, tmp.path()).unwrap();
    assert_eq!(dir, tmp.path().join(&r.fingerprint));
    let cfg: ExperimentConfig = serde_json::from_str(&fs::read_to_string(dir.join("config.json")).unwrap()).unwrap();
    assert_eq!(cfg, c);
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["pass"], serde_json::json!(r.pass));
    let cov = fs::read_to_string(dir.join("tables/covariance.csv")).unwrap();
    assert!(cov.starts_with("t,s,empirical,exact,diff\n"));
    assert_eq!(cov.lines().count(), 1 + 16 * 16);
    let vi = fs::read_to_string(dir.join("tables/vi.csv")).unwrap();
    assert!(vi.starts_with("tau,candidate,theta,se\n"));
}

#[test]
fn plot_data_requires_the_matching_experiment() {
    let r = run(&small(vec![Experiment::SampleFbm])).unwrap();
    let tmp = tempfile::tempdir().unwrap();
    let path = emit_plot_data(&r, PlotKind::Covariance, tmp.path()).unwrap();
    assert!(path.ends_with("covariance.csv"));
    assert!(matches!(
        emit_plot_data(&r, PlotKind::Vi, tmp.path()),
        Err(Error::NotFound(_))
    ));
    assert!(matches!("histogram".parse::<PlotKind>(), Err(Error::NotFound(_))));
    assert_eq!("scaling".parse::<PlotKind>().unwrap(), PlotKind::Scaling);
}

#[test]
fn config_errors_carry_field_paths() {
    let err = |text: &str| match ExperimentConfig::from_json_str(text) {
        Err(Error::Config { path, .. }) => path,
        other => panic!("expected a config error, got {other:?}"),
    };
    assert_eq!(err(r#"{"problem":{"name":"lq_basic"},"hurst":0.7}"#), "hurst");
    assert_eq!(
        err(r#"{"problem":{"name":"lq_basic"},"tolerances":{"n_se":-1}}"#),
        "tolerances.n_se"
    );
    assert_eq!(err(r#"{"problem":{"name":"lq_basic"},"m_paths":"many"}"#), "m_paths");
    assert_eq!(
        err(r#"{"problem":{"name":"trivial"},"policy":{"kind":"lq_optimal"}}"#),
        "policy"
    );
    assert_eq!(
        err(r#"{"problem":{"name":"classical_h_half"},"experiments":["simulate"]}"#),
        "hurst"
    );
    assert!(ExperimentConfig::from_json_str(r#"{"problem":{"name":"trivial"},"colour":1}"#).is_err());
    let tmp = tempfile::tempdir().unwrap();
    assert!(matches!(
        ExperimentConfig::from_path(tmp.path().join("missing.json")),
        Err(Error::NotFound(_))
    ));
}

#[test]
fn shipped_configs_parse() {
    let dir = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut n = 0;
    for entry in fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        ExperimentConfig::from_path(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        n += 1;
    }
    assert!(n >= 2);
}
