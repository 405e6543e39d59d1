// SPDX-License-Identifier: Apache-2.0

//! Aggregate report built from one simulation run.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::cdf::{compute_cdf, mean, quantile, thin_cdf, CdfPoint};
use crate::exec::{convergence_report, executed_prefix, ConvergenceGroup, ConvergenceInput};
use crate::failure::{demand_class, failure_stats, FailureReason, FailureStats};
use crate::scheduler::DelayCause;
use crate::sim::{JobOutcome, SimOutput, World, UTIL_BINS};
use crate::workload::{GpuBucket, JobStatus};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReportOptions {
    /// Loss thresholds for the convergence section.
    pub deltas: Vec<f64>,
    /// Cap on points per emitted CDF.
    pub cdf_points: usize,
}

impl Default for ReportOptions {
    fn default() -> Self {
        ReportOptions {
            deltas: vec![0.0, 0.001, 0.002],
            cdf_points: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportMeta {
    pub scenario: String,
    pub seed: u64,
    pub config_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub schema_version: u32,
    pub scenario: String,
    pub seed: u64,
    pub config_hash: String,
    pub status: StatusSection,
    pub queueing: QueueingSection,
    /// Keyed by bucket, plus "all".
    pub delay_causes: BTreeMap<String, CauseSummary>,
    /// Bucket -> relaxation stage at placement -> delays.
    pub relaxation: BTreeMap<String, BTreeMap<u32, StageSummary>>,
    pub out_of_order: OutOfOrderSection,
    pub placement: PlacementSection,
    pub utilization: UtilizationSection,
    pub convergence: ConvergenceSection,
    pub failures: FailureSection,
    pub run: RunSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatusSection {
    pub submitted: u64,
    pub counts: BTreeMap<JobStatus, u64>,
    pub gpu_time: BTreeMap<JobStatus, f64>,
    /// Percent of all GPU-minutes.
    pub gpu_time_share: BTreeMap<JobStatus, f64>,
    pub non_passed_gpu_time_share: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DelaySummary {
    pub jobs: u64,
    pub mean: f64,
    pub p50: f64,
    pub p90: f64,
    pub p99: f64,
    pub max: f64,
    pub cdf: Vec<CdfPoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueueingSection {
    pub by_vc: BTreeMap<String, BTreeMap<GpuBucket, DelaySummary>>,
    pub by_bucket: BTreeMap<GpuBucket, DelaySummary>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CauseSummary {
    pub delayed_jobs: u64,
    pub fair_share_occurrences: u64,
    pub fragmentation_occurrences: u64,
    /// Percent of occurrences.
    pub fragmentation_occurrence_share: f64,
    pub fair_share_minutes: f64,
    pub fragmentation_minutes: f64,
    /// Percent of delay minutes.
    pub fragmentation_time_share: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageSummary {
    pub jobs: u64,
    pub median_delay: f64,
    pub mean_delay: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutOfOrderSection {
    pub decisions: u64,
    pub out_of_order: u64,
    pub fraction: f64,
    pub harmless_checked: u64,
    pub harmless: u64,
    pub harmless_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeSummary {
    pub jobs: u64,
    pub mean_slowdown: f64,
    pub mean_servers: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlacementSection {
    pub placements: u64,
    pub colocated: u64,
    pub by_bucket: BTreeMap<GpuBucket, ShapeSummary>,
    pub by_demand: BTreeMap<u32, ShapeSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanSamples {
    pub mean: f64,
    pub samples: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtilizationSection {
    pub mean: f64,
    pub samples: u64,
    pub by_bucket: BTreeMap<GpuBucket, Vec<CdfPoint>>,
    pub by_status: BTreeMap<JobStatus, Vec<CdfPoint>>,
    /// Keyed "<gpus>x<servers>".
    pub by_shape: BTreeMap<String, MeanSamples>,
    pub cluster_used_mean: f64,
    pub empty_server_fraction_mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceGroupSummary {
    pub jobs: u64,
    /// One CDF of epoch fractions per delta.
    pub cdf: Vec<Vec<CdfPoint>>,
    /// Percent of the group's GPU time spent past each threshold.
    pub gpu_time_past_share: Vec<f64>,
    pub mean_fraction_past: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceSection {
    pub deltas: Vec<f64>,
    pub passed: ConvergenceGroupSummary,
    pub killed: ConvergenceGroupSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureSection {
    pub stats: FailureStats,
    /// GPU-minutes lost on the cluster (RTF x demand), by reason label.
    pub cluster_gpu_minutes_lost: BTreeMap<String, f64>,
    pub pool_screened: u64,
    pub pool_caught: u64,
    pub pool_gpu_minutes: f64,
    /// Failed attempts per submitted job, by demand class (1, 2-4, >4 GPUs).
    pub retries_by_demand: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSection {
    pub events: u64,
    pub passes: u64,
    pub end_time: f64,
    pub preemptions: u64,
    pub migrations: u64,
    pub invariant_violations: u64,
}

fn finite(x: f64) -> f64 {
    if x.is_finite() {
        x
    } else {
        0.0
    }
}

fn pct(part: f64, total: f64) -> f64 {
    if total > 0.0 {
        100.0 * part / total
    } else {
        0.0
    }
}

fn delay_summary(mut xs: Vec<f64>, points: usize) -> DelaySummary {
    xs.sort_by(f64::total_cmp);
    DelaySummary {
        jobs: xs.len() as u64,
        mean: mean(&xs),
        p50: finite(quantile(&xs, 0.5)),
        p90: finite(quantile(&xs, 0.9)),
        p99: finite(quantile(&xs, 0.99)),
        max: xs.last().copied().unwrap_or(0.0),
        cdf: thin_cdf(&compute_cdf(&xs), points),
    }
}

fn hist_cdf(hist: &[u64]) -> Vec<CdfPoint> {
    let total: u64 = hist.iter().sum();
    let mut acc = 0u64;
    let mut out = Vec::new();
    for (bin, n) in hist.iter().enumerate() {
        if *n == 0 {
            continue;
        }
        acc += n;
        out.push(CdfPoint {
            value: bin as f64,
            probability: acc as f64 / total as f64,
        });
    }
    out
}

/// Counts each cause present in a job's wait once.
pub fn cause_summary<'a>(jobs: impl Iterator<Item = &'a JobOutcome>) -> CauseSummary {
    let mut s = CauseSummary::default();
    for j in jobs {
        if j.queue_delay.unwrap_or(0.0) <= 0.0 {
            continue;
        }
        s.delayed_jobs += 1;
        let fs: f64 = j.ledger.iter().filter(|i| i.cause == DelayCause::FairShare).map(|i| i.end - i.start).sum();
        let fr: f64 = j.ledger.iter().filter(|i| i.cause == DelayCause::Fragmentation).map(|i| i.end - i.start).sum();
        s.fair_share_occurrences += u64::from(fs > 0.0);
        s.fragmentation_occurrences += u64::from(fr > 0.0);
        s.fair_share_minutes += fs;
        s.fragmentation_minutes += fr;
    }
    s.fragmentation_occurrence_share = pct(
        s.fragmentation_occurrences as f64,
        (s.fragmentation_occurrences + s.fair_share_occurrences) as f64,
    );
    s.fragmentation_time_share = pct(s.fragmentation_minutes, s.fragmentation_minutes + s.fair_share_minutes);
    s
}

fn shape_summary<'a>(jobs: impl Iterator<Item = &'a JobOutcome>) -> ShapeSummary {
    let (mut n, mut f, mut s) = (0u64, 0.0, 0.0);
    for j in jobs.filter(|j| j.first_start.is_some() && j.mean_slowdown > 0.0) {
        n += 1;
        f += j.mean_slowdown;
        s += j.mean_servers;
    }
    ShapeSummary {
        jobs: n,
        mean_slowdown: if n > 0 { f / n as f64 } else { 0.0 },
        mean_servers: if n > 0 { s / n as f64 } else { 0.0 },
    }
}

fn convergence_group(g: &ConvergenceGroup, points: usize) -> ConvergenceGroupSummary {
    ConvergenceGroupSummary {
        jobs: g.jobs as u64,
        cdf: g.fractions.iter().map(|f| thin_cdf(&compute_cdf(f), points)).collect(),
        gpu_time_past_share: g.gpu_time_past.iter().map(|p| pct(*p, g.gpu_time)).collect(),
        mean_fraction_past: g.mean_fraction_past.clone(),
    }
}

pub fn build_report(world: &World, out: &SimOutput, meta: &ReportMeta, opts: &ReportOptions) -> MetricsReport {
    let points = opts.cdf_points;

    let mut counts: BTreeMap<JobStatus, u64> = JobStatus::ALL.iter().map(|s| (*s, 0)).collect();
    let mut gpu_time: BTreeMap<JobStatus, f64> = JobStatus::ALL.iter().map(|s| (*s, 0.0)).collect();
    for j in &out.jobs {
        *counts.get_mut(&j.status).expect("all statuses") += 1;
        *gpu_time.get_mut(&j.status).expect("all statuses") += j.gpu_time;
    }
    let total_gpu: f64 = gpu_time.values().sum();
    let gpu_time_share: BTreeMap<JobStatus, f64> = gpu_time.iter().map(|(s, g)| (*s, pct(*g, total_gpu))).collect();
    let status = StatusSection {
        submitted: out.jobs.len() as u64,
        non_passed_gpu_time_share: pct(total_gpu - gpu_time[&JobStatus::Passed], total_gpu),
        counts,
        gpu_time,
        gpu_time_share,
    };

    let mut by_vc: BTreeMap<String, BTreeMap<GpuBucket, Vec<f64>>> = BTreeMap::new();
    let mut by_bucket: BTreeMap<GpuBucket, Vec<f64>> = BTreeMap::new();
    for j in &out.jobs {
        if let Some(d) = j.queue_delay {
            by_vc.entry(j.vc.clone()).or_default().entry(j.bucket).or_default().push(d);
            by_bucket.entry(j.bucket).or_default().push(d);
        }
    }
    let queueing = QueueingSection {
        by_vc: by_vc
            .into_iter()
            .map(|(vc, m)| (vc, m.into_iter().map(|(b, xs)| (b, delay_summary(xs, points))).collect()))
            .collect(),
        by_bucket: by_bucket.into_iter().map(|(b, xs)| (b, delay_summary(xs, points))).collect(),
    };

    let mut delay_causes: BTreeMap<String, CauseSummary> = GpuBucket::ALL
        .iter()
        .map(|b| (b.as_str().to_string(), cause_summary(out.jobs.iter().filter(|j| j.bucket == *b))))
        .collect();
    delay_causes.insert("all".into(), cause_summary(out.jobs.iter()));

    let mut stages: BTreeMap<String, BTreeMap<u32, Vec<f64>>> = BTreeMap::new();
    for j in &out.jobs {
        if let (Some(stage), Some(d)) = (j.placed_stage, j.queue_delay) {
            stages.entry(j.bucket.as_str().into()).or_default().entry(stage).or_default().push(d);
        }
    }
    let relaxation = stages
        .into_iter()
        .map(|(b, m)| {
            let m = m
                .into_iter()
                .map(|(k, mut xs)| {
                    xs.sort_by(f64::total_cmp);
                    let s = StageSummary {
                        jobs: xs.len() as u64,
                        median_delay: finite(quantile(&xs, 0.5)),
                        mean_delay: mean(&xs),
                    };
                    (k, s)
                })
                .collect();
            (b, m)
        })
        .collect();

    let ooo = out.decisions.iter().filter(|d| d.out_of_order).count() as u64;
    let out_of_order = OutOfOrderSection {
        decisions: out.decisions.len() as u64,
        out_of_order: ooo,
        fraction: pct(ooo as f64, out.decisions.len() as f64) / 100.0,
        harmless_checked: out.harmless.checked as u64,
        harmless: out.harmless.harmless as u64,
        harmless_fraction: pct(out.harmless.harmless as f64, out.harmless.checked as f64) / 100.0,
    };

    let mut demands: Vec<u32> = out.jobs.iter().map(|j| j.gpu_demand).collect();
    demands.sort_unstable();
    demands.dedup();
    let placement = PlacementSection {
        placements: out.stats.placements,
        colocated: out.stats.colocated_placements,
        by_bucket: GpuBucket::ALL
            .iter()
            .map(|b| (*b, shape_summary(out.jobs.iter().filter(|j| j.bucket == *b))))
            .collect(),
        by_demand: demands
            .iter()
            .map(|d| (*d, shape_summary(out.jobs.iter().filter(|j| j.gpu_demand == *d))))
            .collect(),
    };

    let mut bucket_hist: BTreeMap<GpuBucket, Vec<u64>> = BTreeMap::new();
    let mut status_hist: BTreeMap<JobStatus, Vec<u64>> = BTreeMap::new();
    for ((b, s), h) in &out.util.hist {
        let acc = bucket_hist.entry(*b).or_insert_with(|| vec![0; UTIL_BINS]);
        acc.iter_mut().zip(h).for_each(|(a, v)| *a += v);
        let acc = status_hist.entry(*s).or_insert_with(|| vec![0; UTIL_BINS]);
        acc.iter_mut().zip(h).for_each(|(a, v)| *a += v);
    }
    let used: Vec<f64> = out.cluster.iter().map(|c| c.used_fraction).collect();
    let empty: Vec<f64> = out.cluster.iter().map(|c| c.empty_server_fraction).collect();
    let utilization = UtilizationSection {
        mean: if out.util.count > 0 { out.util.sum / out.util.count as f64 } else { 0.0 },
        samples: out.util.count,
        by_bucket: bucket_hist.iter().map(|(k, h)| (*k, hist_cdf(h))).collect(),
        by_status: status_hist.iter().map(|(k, h)| (*k, hist_cdf(h))).collect(),
        by_shape: out
            .util
            .by_shape
            .iter()
            .map(|((d, s), (sum, n))| {
                (
                    format!("{d}x{s}"),
                    MeanSamples {
                        mean: sum / *n as f64,
                        samples: *n,
                    },
                )
            })
            .collect(),
        cluster_used_mean: mean(&used),
        empty_server_fraction_mean: mean(&empty),
    };

    let inputs: Vec<ConvergenceInput<'_>> = world
        .jobs
        .iter()
        .zip(&out.jobs)
        .filter_map(|(job, o)| {
            let curve = job.loss_curve.as_deref()?;
            let curve = match o.status {
                JobStatus::Passed => curve,
                JobStatus::Killed => executed_prefix(curve, o.progress),
                JobStatus::Unsuccessful => return None,
            };
            (!curve.is_empty()).then_some(ConvergenceInput {
                status: o.status,
                curve,
                gpu_time: o.gpu_time,
            })
        })
        .collect();
    let conv = convergence_report(&inputs, &opts.deltas);
    let convergence = ConvergenceSection {
        deltas: conv.deltas.clone(),
        passed: convergence_group(&conv.passed, points),
        killed: convergence_group(&conv.killed, points),
    };

    let mut lost: BTreeMap<String, f64> = BTreeMap::new();
    let mut trials = [0u64; 3];
    let mut jobs_in = [0u64; 3];
    for r in &out.failures {
        if !r.pool {
            *lost.entry(r.reason.label().to_string()).or_default() += r.rtf_minutes * r.gpu_demand as f64;
        }
        if r.reason != FailureReason::JobPreempted {
            trials[demand_class(r.gpu_demand)] += 1;
        }
    }
    for j in &out.jobs {
        jobs_in[demand_class(j.gpu_demand)] += 1;
    }
    let failures = FailureSection {
        stats: failure_stats(&out.failures),
        cluster_gpu_minutes_lost: lost,
        pool_screened: out.stats.pool_screened,
        pool_caught: out.stats.pool_caught,
        pool_gpu_minutes: out.stats.pool_gpu_minutes,
        retries_by_demand: [0, 1, 2].map(|k| if jobs_in[k] > 0 { trials[k] as f64 / jobs_in[k] as f64 } else { 0.0 }),
    };

    MetricsReport {
        schema_version: SCHEMA_VERSION,
        scenario: meta.scenario.clone(),
        seed: meta.seed,
        config_hash: meta.config_hash.clone(),
        status,
        queueing,
        delay_causes,
        relaxation,
        out_of_order,
        placement,
        utilization,
        convergence,
        failures,
        run: RunSection {
            events: out.stats.events,
            passes: out.stats.passes,
            end_time: out.stats.end_time,
            preemptions: out.stats.preemptions,
            migrations: out.stats.migrations,
            invariant_violations: out.stats.violations,
        },
    }
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }
}

fn csv_file(dir: &Path, name: &str) -> Result<csv::Writer<std::fs::File>, csv::Error> {
    Ok(csv::Writer::from_path(dir.join(name))?)
}

/// Writes the per-section CSVs; returns the file names.
pub fn write_csvs(report: &MetricsReport, out: &SimOutput, dir: &Path) -> Result<Vec<String>, csv::Error> {
    let mut files = Vec::new();

    let mut w = csv_file(dir, "status.csv")?;
    w.write_record(["status", "jobs", "gpu_minutes", "gpu_time_share"])?;
    for (s, n) in &report.status.counts {
        w.write_record([
            s.as_str().to_string(),
            n.to_string(),
            report.status.gpu_time[s].to_string(),
            report.status.gpu_time_share[s].to_string(),
        ])?;
    }
    w.flush()?;
    files.push("status.csv".into());

    let mut w = csv_file(dir, "queueing_delay.csv")?;
    w.write_record(["vc", "bucket", "delay_min", "probability"])?;
    let all = report.queueing.by_bucket.iter().map(|(b, s)| ("all", b, s));
    let per = report
        .queueing
        .by_vc
        .iter()
        .flat_map(|(vc, m)| m.iter().map(move |(b, s)| (vc.as_str(), b, s)));
    for (vc, b, s) in all.chain(per) {
        for p in &s.cdf {
            w.write_record([vc, b.as_str(), &p.value.to_string(), &p.probability.to_string()])?;
        }
    }
    w.flush()?;
    files.push("queueing_delay.csv".into());

    let mut w = csv_file(dir, "delay_causes.csv")?;
    w.write_record([
        "bucket",
        "delayed_jobs",
        "fair_share_occurrences",
        "fragmentation_occurrences",
        "fragmentation_occurrence_share",
        "fair_share_minutes",
        "fragmentation_minutes",
        "fragmentation_time_share",
    ])?;
    for (b, c) in &report.delay_causes {
        w.write_record([
            b.clone(),
            c.delayed_jobs.to_string(),
            c.fair_share_occurrences.to_string(),
            c.fragmentation_occurrences.to_string(),
            c.fragmentation_occurrence_share.to_string(),
            c.fair_share_minutes.to_string(),
            c.fragmentation_minutes.to_string(),
            c.fragmentation_time_share.to_string(),
        ])?;
    }
    w.flush()?;
    files.push("delay_causes.csv".into());

    let mut w = csv_file(dir, "utilization.csv")?;
    w.write_record(["group", "key", "utilization", "probability"])?;
    for (b, cdf) in &report.utilization.by_bucket {
        for p in cdf {
            w.write_record(["bucket", b.as_str(), &p.value.to_string(), &p.probability.to_string()])?;
        }
    }
    for (s, cdf) in &report.utilization.by_status {
        for p in cdf {
            w.write_record(["status", s.as_str(), &p.value.to_string(), &p.probability.to_string()])?;
        }
    }
    w.flush()?;
    files.push("utilization.csv".into());

    let mut w = csv_file(dir, "convergence.csv")?;
    w.write_record(["status", "delta", "fraction_of_epochs", "probability"])?;
    for (name, g) in [("passed", &report.convergence.passed), ("killed", &report.convergence.killed)] {
        for (delta, cdf) in report.convergence.deltas.iter().zip(&g.cdf) {
            for p in cdf {
                w.write_record([name, &delta.to_string(), &p.value.to_string(), &p.probability.to_string()])?;
            }
        }
    }
    w.flush()?;
    files.push("convergence.csv".into());

    let mut w = csv_file(dir, "failures.csv")?;
    w.write_record([
        "reason",
        "categories",
        "trials",
        "jobs",
        "users",
        "rtf_p50",
        "rtf_p90",
        "rtf_p95",
        "rtf_share",
        "demand_1",
        "demand_2_4",
        "demand_gt4",
        "rtf_demand_share",
    ])?;
    for r in &report.failures.stats.reasons {
        let cats: Vec<String> = r.categories.to_vec().iter().map(|c| format!("{c:?}")).collect();
        w.write_record([
            r.reason.label().to_string(),
            cats.join("+"),
            r.trials.to_string(),
            r.jobs.to_string(),
            r.users.to_string(),
            r.rtf_p50.to_string(),
            r.rtf_p90.to_string(),
            r.rtf_p95.to_string(),
            r.rtf_share.to_string(),
            r.demand[0].to_string(),
            r.demand[1].to_string(),
            r.demand[2].to_string(),
            r.rtf_demand_share.to_string(),
        ])?;
    }
    w.flush()?;
    files.push("failures.csv".into());

    let mut w = csv_file(dir, "jobs.csv")?;
    w.write_record([
        "job_id",
        "vc",
        "gpu_demand",
        "submit_time",
        "queue_enter",
        "first_start",
        "end_time",
        "status",
        "queue_delay",
        "fair_share_delay",
        "fragmentation_delay",
        "placed_stage",
        "mean_servers",
        "mean_slowdown",
        "runs",
        "gpu_time",
    ])?;
    let opt = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_default();
    for j in &out.jobs {
        let by = |c: DelayCause| j.ledger.iter().filter(|i| i.cause == c).map(|i| i.end - i.start).sum::<f64>();
        w.write_record([
            j.job_id.clone(),
            j.vc.clone(),
            j.gpu_demand.to_string(),
            j.submit_time.to_string(),
            opt(j.queue_enter),
            opt(j.first_start),
            j.end_time.to_string(),
            j.status.as_str().to_string(),
            opt(j.queue_delay),
            by(DelayCause::FairShare).to_string(),
            by(DelayCause::Fragmentation).to_string(),
            j.placed_stage.map(|s| s.to_string()).unwrap_or_default(),
            j.mean_servers.to_string(),
            j.mean_slowdown.to_string(),
            j.runs.to_string(),
            j.gpu_time.to_string(),
        ])?;
    }
    w.flush()?;
    files.push("jobs.csv".into());
    Ok(files)
}

/// Writes `report.json` into `dir`.
pub fn write_report(report: &MetricsReport, dir: &Path) -> std::io::Result<()> {
    let mut f = std::fs::File::create(dir.join("report.json"))?;
    f.write_all(report.to_json().as_bytes())
}
