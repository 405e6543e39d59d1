// SPDX-License-Identifier: Apache-2.0

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::profile::{demand_class, CategorySet, FailureReason};
use crate::cluster::JobId;
use crate::engine::Minutes;
use crate::metrics::cdf::quantile;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureRecord {
    pub job: JobId,
    pub user: String,
    pub attempt_index: u32,
    pub reason: FailureReason,
    pub categories: CategorySet,
    pub rtf_minutes: f64,
    pub gpu_demand: u32,
    pub time: Minutes,
    /// Caught on the pre-run screening pool rather than the cluster.
    #[serde(default)]
    pub pool: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReasonStats {
    pub reason: FailureReason,
    pub categories: CategorySet,
    pub trials: u64,
    pub jobs: u64,
    pub users: u64,
    pub rtf_p50: f64,
    pub rtf_p90: f64,
    pub rtf_p95: f64,
    /// Share of summed RTF, percent.
    pub rtf_share: f64,
    pub demand: [u64; 3],
    pub rtf_demand: f64,
    /// Share of summed RTF x demand, percent.
    pub rtf_demand_share: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureStats {
    /// Sorted by trials, descending.
    pub reasons: Vec<ReasonStats>,
    pub total_trials: u64,
    /// Mean trials per job and per user over the eight most frequent reasons.
    pub job_repetition: f64,
    pub user_repetition: f64,
}

pub fn failure_stats(records: &[FailureRecord]) -> FailureStats {
    #[derive(Default)]
    struct Acc {
        rtf: Vec<f64>,
        jobs: BTreeSet<JobId>,
        users: BTreeSet<String>,
        demand: [u64; 3],
        rtf_demand: f64,
    }
    let mut by: BTreeMap<FailureReason, Acc> = BTreeMap::new();
    for r in records {
        let a = by.entry(r.reason).or_default();
        a.rtf.push(r.rtf_minutes);
        a.jobs.insert(r.job);
        a.users.insert(r.user.clone());
        a.demand[demand_class(r.gpu_demand)] += 1;
        a.rtf_demand += r.rtf_minutes * r.gpu_demand as f64;
    }
    let total_rtf: f64 = records.iter().map(|r| r.rtf_minutes).sum();
    let total_rd: f64 = by.values().map(|a| a.rtf_demand).sum();
    let share = |x: f64, total: f64| if total > 0.0 { 100.0 * x / total } else { 0.0 };
    let mut reasons: Vec<ReasonStats> = by
        .into_iter()
        .map(|(reason, mut a)| {
            a.rtf.sort_by(f64::total_cmp);
            let sum: f64 = a.rtf.iter().sum();
            ReasonStats {
                reason,
                categories: reason.categories(),
                trials: a.rtf.len() as u64,
                jobs: a.jobs.len() as u64,
                users: a.users.len() as u64,
                rtf_p50: quantile(&a.rtf, 0.5),
                rtf_p90: quantile(&a.rtf, 0.9),
                rtf_p95: quantile(&a.rtf, 0.95),
                rtf_share: share(sum, total_rtf),
                demand: a.demand,
                rtf_demand: a.rtf_demand,
                rtf_demand_share: share(a.rtf_demand, total_rd),
            }
        })
        .collect();
    reasons.sort_by(|a, b| b.trials.cmp(&a.trials).then(a.reason.cmp(&b.reason)));
    let top: Vec<&ReasonStats> = reasons.iter().take(8).collect();
    let rep = |f: fn(&ReasonStats) -> u64| {
        if top.is_empty() {
            0.0
        } else {
            top.iter().map(|r| r.trials as f64 / f(r).max(1) as f64).sum::<f64>() / top.len() as f64
        }
    };
    FailureStats {
        total_trials: records.len() as u64,
        job_repetition: rep(|r| r.jobs),
        user_repetition: rep(|r| r.users),
        reasons,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(job: u32, reason: FailureReason, rtf: f64, demand: u32) -> FailureRecord {
        FailureRecord {
            job: JobId(job),
            user: format!("u{}", job % 2),
            attempt_index: 0,
            reason,
            categories: reason.categories(),
            rtf_minutes: rtf,
            gpu_demand: demand,
            time: 0.0,
            pool: false,
        }
    }

    #[test]
    fn single_record_takes_full_share() {
        let s = failure_stats(&[rec(0, FailureReason::CoreDump, 3.0, 2)]);
        assert_eq!(s.reasons.len(), 1);
        assert_eq!(s.reasons[0].rtf_share, 100.0);
        assert_eq!(s.reasons[0].rtf_demand_share, 100.0);
        assert_eq!(s.reasons[0].demand, [0, 1, 0]);
    }

    #[test]
    fn demand_weighting_splits_twenty_eighty() {
        let s = failure_stats(&[rec(0, FailureReason::CoreDump, 10.0, 1), rec(1, FailureReason::MpiError, 10.0, 4)]);
        let get = |r| s.reasons.iter().find(|x| x.reason == r).unwrap();
        assert!((get(FailureReason::CoreDump).rtf_demand_share - 20.0).abs() < 1e-12);
        assert!((get(FailureReason::MpiError).rtf_demand_share - 80.0).abs() < 1e-12);
        assert_eq!(get(FailureReason::MpiError).rtf_share, 50.0);
    }

    #[test]
    fn repetition_factors() {
        let recs: Vec<_> = (0..6).map(|i| rec(i % 3, FailureReason::CudaFailure, 1.0, 1)).collect();
        let s = failure_stats(&recs);
        assert_eq!(s.job_repetition, 2.0);
        assert_eq!(s.user_repetition, 3.0);
    }
}
