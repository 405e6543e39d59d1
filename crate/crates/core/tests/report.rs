// SPDX-License-Identifier: Apache-2.0

use gpusim::experiment::{load_str, simulate, write_outputs, ExperimentRun, DEFAULT_EXPERIMENT};
use gpusim::metrics::{diff_reports, MetricsReport};
use gpusim::workload::JobStatus;

fn small(seed: u64, jobs: usize, edit: impl FnOnce(&mut gpusim::experiment::ExperimentConfig)) -> ExperimentRun {
    let mut l = load_str(DEFAULT_EXPERIMENT).unwrap();
    l.config.workload.as_mut().unwrap().job_count = jobs;
    edit(&mut l.config);
    let w = l.world(Some(seed), None).unwrap();
    simulate(w, &l.hash, &l.config.report).unwrap()
}

#[test]
fn json_round_trip_is_lossless() {
    let run = small(2, 400, |_| {});
    let text = run.report.to_json();
    let back = MetricsReport::from_json(&text).unwrap();
    assert_eq!(back, run.report);
    assert_eq!(back.to_json(), text);
}

#[test]
fn every_job_lands_in_one_status_bucket() {
    let run = small(3, 500, |_| {});
    let s = &run.report.status;
    assert_eq!(s.counts.values().sum::<u64>(), 500);
    let total: f64 = run.output.jobs.iter().map(|j| j.gpu_time).sum();
    let by_status: f64 = s.gpu_time.values().sum();
    assert!((total - by_status).abs() <= 1e-6 * total.max(1.0));
    let shares: f64 = s.gpu_time_share.values().sum();
    assert!((shares - 100.0).abs() < 1e-9, "{shares}");
}

#[test]
fn all_passing_run_is_fully_passed() {
    let run = small(1, 200, |c| {
        c.options.inject_failures = false;
        let w = c.workload.as_mut().unwrap();
        w.killed_fraction = serde_json::from_str(r#"{"b1":0,"b2_4":0,"b5_8":0,"b_gt8":0}"#).unwrap();
        w.killed_long_fraction = None;
        c.scheduler.preemption = false;
    });
    let s = &run.report.status;
    assert_eq!(s.counts.get(&JobStatus::Passed), Some(&200));
    assert_eq!(s.gpu_time_share.get(&JobStatus::Passed), Some(&100.0));
    assert_eq!(s.non_passed_gpu_time_share, 0.0);
}

#[test]
fn outputs_are_written_and_identical_reports_diff_to_zero() {
    let dir = tempfile::tempdir().unwrap();
    let run = small(5, 300, |_| {});
    let m = write_outputs(&run, dir.path()).unwrap();
    for f in &m.files {
        assert!(dir.path().join(f).is_file(), "{f}");
    }
    assert!(m.files.iter().any(|f| f == "delay_causes.csv"));
    let text = std::fs::read_to_string(dir.path().join("report.json")).unwrap();
    let d = diff_reports(&text, &text).unwrap();
    assert!(d.paired && d.same_config);
    assert!(!d.rows.is_empty());
    assert_eq!(d.changed().count(), 0);
    assert!(d.rows.iter().all(|r| r.delta.is_none_or(|x| x == 0.0)));

    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 5);
    assert_eq!(manifest["config_hash"].as_str().unwrap().len(), 64);
}

#[test]
fn jobs_csv_has_one_row_per_job() {
    let dir = tempfile::tempdir().unwrap();
    let run = small(6, 250, |_| {});
    write_outputs(&run, dir.path()).unwrap();
    let mut r = csv::Reader::from_path(dir.path().join("jobs.csv")).unwrap();
    assert!(r.headers().unwrap().iter().any(|h| h == "queue_delay"));
    assert_eq!(r.records().count(), 250);
}
