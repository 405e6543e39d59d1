// SPDX-License-Identifier: Apache-2.0

use gpusim::experiment::{load_str, simulate, ExperimentConfig, ExperimentRun, DEFAULT_EXPERIMENT};
use gpusim::failure::FailureReason;

fn run(jobs: usize, edit: impl FnOnce(&mut ExperimentConfig)) -> ExperimentRun {
    let mut l = load_str(DEFAULT_EXPERIMENT).unwrap();
    l.config.workload.as_mut().unwrap().job_count = jobs;
    l.config.options.harmless_replays = 0;
    edit(&mut l.config);
    let w = l.world(Some(1), None).unwrap();
    simulate(w, &l.hash, &l.config.report).unwrap()
}

#[test]
fn dedicated_servers_never_colocate() {
    let r = run(1500, |c| c.scenario.dedicated_servers = true);
    assert!(r.report.placement.placements > 0);
    assert_eq!(r.report.placement.colocated, 0);
}

#[test]
fn prerun_pool_keeps_syntax_errors_off_the_cluster() {
    let lost = |r: &ExperimentRun| {
        r.report
            .failures
            .cluster_gpu_minutes_lost
            .get(FailureReason::SyntaxError.label())
            .copied()
            .unwrap_or(0.0)
    };
    let base = run(4000, |_| {});
    let pool = run(4000, |c| c.scenario.prerun_pool = true);
    assert!(lost(&base) > 0.0);
    assert_eq!(lost(&pool), 0.0);
    assert!(pool.report.failures.pool_caught > 0);
    assert_eq!(pool.report.failures.pool_screened, 4000);
}

#[test]
fn migration_tightens_sixteen_gpu_jobs() {
    let servers = |r: &ExperimentRun| r.report.placement.by_demand[&16].mean_servers;
    let base = run(10_000, |_| {});
    let mig = run(10_000, |c| c.scenario.migration = true);
    assert!(mig.report.run.migrations > 0);
    assert!(servers(&mig) < servers(&base), "{} vs {}", servers(&mig), servers(&base));
}

#[test]
fn scenario_id_names_the_flags() {
    let r = run(50, |c| {
        c.scenario.wait_for_locality = true;
        c.scenario.migration = true;
    });
    assert!(r.report.scenario.contains("wait_for_locality(30)"), "{}", r.report.scenario);
    assert!(r.report.scenario.contains("migration"));
}
