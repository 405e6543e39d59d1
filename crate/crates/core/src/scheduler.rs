// SPDX-License-Identifier: Apache-2.0

//! Scheduling primitives: locality constraints and their relaxation, gang
//! acquisition, delay attribution and preemption victim selection.
//!
//! The event loop that drives these lives in [`crate::sim`].

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cluster::{rank_candidates, AllocationState, ClusterTopology, JobId, RackId, ServerId, Slot, VcId};
use crate::engine::Minutes;
use crate::failure::RetryPolicy;

#[derive(Debug, Error, PartialEq)]
pub enum SchedError {
    #[error("unknown virtual cluster {0:?}")]
    UnknownVc(String),
    #[error("quotas sum to {sum} GPUs but the cluster has {total}")]
    QuotaExceedsCluster { sum: u32, total: u32 },
    #[error("invalid scheduler setting {key}: {message}")]
    Invalid { key: &'static str, message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SchedulerConfig {
    pub acquisition_timeout_min: f64,
    pub backoff_min: f64,
    pub relax_after: u32,
    pub preempt_threshold: f64,
    pub preemption: bool,
    pub preempt_check_min: f64,
    pub checkpoint_interval_min: f64,
    pub max_retries: u32,
    pub retry_policy: RetryPolicy,
    pub migration_check_min: f64,
    pub migration_cost_min: f64,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        SchedulerConfig {
            acquisition_timeout_min: 2.5,
            backoff_min: 2.0,
            relax_after: 3,
            preempt_threshold: 0.90,
            preemption: true,
            preempt_check_min: 5.0,
            checkpoint_interval_min: 30.0,
            max_retries: 5,
            retry_policy: RetryPolicy::Static,
            migration_check_min: 10.0,
            migration_cost_min: 5.0,
        }
    }
}

impl SchedulerConfig {
    pub fn validate(&self) -> Result<(), SchedError> {
        let pos = |key: &'static str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(SchedError::Invalid {
                    key,
                    message: format!("must be positive, got {v}"),
                })
            }
        };
        pos("acquisition_timeout_min", self.acquisition_timeout_min)?;
        pos("backoff_min", self.backoff_min)?;
        pos("preempt_check_min", self.preempt_check_min)?;
        pos("checkpoint_interval_min", self.checkpoint_interval_min)?;
        pos("migration_check_min", self.migration_check_min)?;
        if self.relax_after == 0 {
            return Err(SchedError::Invalid {
                key: "relax_after",
                message: "must be at least 1".into(),
            });
        }
        if !(0.0..=1.0).contains(&self.preempt_threshold) {
            return Err(SchedError::Invalid {
                key: "preempt_threshold",
                message: "must lie in [0, 1]".into(),
            });
        }
        if !(self.migration_cost_min >= 0.0) {
            return Err(SchedError::Invalid {
                key: "migration_cost_min",
                message: "must be non-negative".into(),
            });
        }
        Ok(())
    }
}

/// Policy variants evaluated as scenarios.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Scenario {
    pub wait_for_locality: bool,
    pub extra_wait_min: f64,
    pub migration: bool,
    pub dedicated_servers: bool,
    pub prerun_pool: bool,
    pub pool_gpus: u32,
    pub screen_min: f64,
}

impl Default for Scenario {
    fn default() -> Self {
        Scenario {
            wait_for_locality: false,
            extra_wait_min: 30.0,
            migration: false,
            dedicated_servers: false,
            prerun_pool: false,
            pool_gpus: 8,
            screen_min: 10.0,
        }
    }
}

impl Scenario {
    pub fn id(&self) -> String {
        let mut parts = Vec::new();
        if self.wait_for_locality {
            parts.push(format!("wait_for_locality({})", self.extra_wait_min));
        }
        if self.migration {
            parts.push("migration".to_string());
        }
        if self.dedicated_servers {
            parts.push("dedicated_servers".to_string());
        }
        if self.prerun_pool {
            parts.push(format!("prerun_pool({})", self.pool_gpus));
        }
        if parts.is_empty() {
            "baseline".to_string()
        } else {
            parts.join("+")
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct LocalityConstraint {
    pub max_servers: u32,
    pub require_single_rdma_domain: bool,
}

/// Tightest constraint for a job: the fewest servers that could hold it,
/// all in one RDMA domain.
pub fn base_constraint(gpu_demand: u32, topo: &ClusterTopology) -> LocalityConstraint {
    let per = topo.max_gpus_per_server().max(1);
    LocalityConstraint {
        max_servers: gpu_demand.div_ceil(per).max(1).min(topo.server_count() as u32),
        require_single_rdma_domain: true,
    }
}

/// Constraint after `retry_count` failed attempts: stage `k = retry_count /
/// relax_after` allows `base * 2^k` servers (capped at the server count) and
/// drops the RDMA requirement from stage 2 on.
pub fn relax(base: LocalityConstraint, retry_count: u32, relax_after: u32, n_servers: u32) -> LocalityConstraint {
    let k = relaxation_stage(retry_count, relax_after);
    let widened = (base.max_servers as u64) << k.min(32);
    LocalityConstraint {
        max_servers: widened.min(n_servers.max(base.max_servers) as u64) as u32,
        require_single_rdma_domain: base.require_single_rdma_domain && k < 2,
    }
}

pub fn relaxation_stage(retry_count: u32, relax_after: u32) -> u32 {
    retry_count / relax_after.max(1)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AcquireOutcome {
    /// New slots that complete the gang.
    Complete(Vec<Slot>),
    /// New slots taken toward the gang; more are still needed.
    Partial(Vec<Slot>),
    NoProgress,
}

/// Walks the candidate ranking and picks free GPUs for `job` on top of what
/// it already holds, within `constraint`.
///
/// A job that fits on one server goes to the fullest server that can take
/// it whole. Otherwise servers are filled in rank order (held servers
/// first) until the demand or `max_servers` is reached. With `dedicated`,
/// only servers nobody else holds are used.
pub fn try_acquire(
    job: JobId,
    gpu_demand: u32,
    held: &[Slot],
    constraint: &LocalityConstraint,
    state: &AllocationState,
    topo: &ClusterTopology,
    dedicated: bool,
) -> AcquireOutcome {
    let need = gpu_demand.saturating_sub(held.len() as u32);
    if need == 0 {
        return AcquireOutcome::Complete(Vec::new());
    }
    let mut held_servers: Vec<ServerId> = Vec::new();
    for s in held {
        if !held_servers.contains(&s.server) {
            held_servers.push(s.server);
        }
    }
    let held_rack: Option<RackId> = held_servers.first().map(|s| topo.server(*s).rack);
    let usable = |s: ServerId| !dedicated || !state.has_foreign(s, job);
    let ranking = rank_candidates(state, topo);

    // Fullest single server that takes the whole remainder.
    if held_servers.len() <= 1 {
        let fit = ranking
            .servers()
            .filter(|(_, s, free)| *free >= need && usable(*s))
            .filter(|(_, s, _)| held_servers.is_empty() || held_servers[0] == *s)
            .min_by_key(|(_, s, free)| (*free, s.0));
        if let Some((_, s, _)) = fit {
            return AcquireOutcome::Complete(state.free_slots_on(s).take(need as usize).collect());
        }
    }

    let room = constraint.max_servers.saturating_sub(held_servers.len() as u32) as usize;
    let fill = |order: &mut dyn Iterator<Item = ServerId>| -> Vec<Slot> {
        let mut picked = Vec::new();
        let mut extra = 0usize;
        let mut left = need as usize;
        for s in held_servers.iter().copied().chain(order.filter(|s| !held_servers.contains(s))) {
            if left == 0 {
                break;
            }
            let is_held = held_servers.contains(&s);
            if !is_held {
                if extra >= room {
                    break;
                }
                if !usable(s) || state.free_on(s) == 0 {
                    continue;
                }
                extra += 1;
            }
            let take: Vec<Slot> = state.free_slots_on(s).take(left).collect();
            left -= take.len();
            picked.extend(take);
        }
        picked
    };

    let picked = if constraint.require_single_rdma_domain {
        let racks: Vec<&crate::cluster::RackCandidate> = ranking
            .racks
            .iter()
            .filter(|r| held_rack.is_none_or(|h| h == r.rack))
            .collect();
        let mut best: Vec<Slot> = Vec::new();
        for rack in racks {
            let got = fill(&mut rack.servers.iter().map(|(s, _)| *s));
            if got.len() as u32 == need {
                best = got;
                break;
            }
            if got.len() > best.len() {
                best = got;
            }
        }
        best
    } else {
        let mut all: Vec<(ServerId, u32, usize)> = ranking
            .servers()
            .enumerate()
            .map(|(i, (_, s, free))| (s, free, i))
            .collect();
        all.sort_by(|a, b| b.1.cmp(&a.1).then(a.2.cmp(&b.2)));
        fill(&mut all.into_iter().map(|(s, _, _)| s))
    };

    if picked.len() as u32 == need {
        AcquireOutcome::Complete(picked)
    } else if picked.is_empty() {
        AcquireOutcome::NoProgress
    } else {
        AcquireOutcome::Partial(picked)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum DelayCause {
    FairShare,
    Fragmentation,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DelayInterval {
    pub start: Minutes,
    pub end: Minutes,
    pub cause: DelayCause,
}

/// FairShare iff the VC, not counting the job's own partial holds, cannot
/// take the job's demand within its quota.
pub fn attribute_delay(vc_usage_excl_own: u32, gpu_demand: u32, quota: u32) -> DelayCause {
    if vc_usage_excl_own + gpu_demand > quota {
        DelayCause::FairShare
    } else {
        DelayCause::Fragmentation
    }
}

/// Per-job ledger tiling the wait from queue entry to start.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DelayLedger {
    pub intervals: Vec<DelayInterval>,
    open: Option<(Minutes, Option<DelayCause>)>,
}

impl DelayLedger {
    pub fn open(&mut self, at: Minutes) {
        self.open = Some((at, None));
    }

    pub fn is_open(&self) -> bool {
        self.open.is_some()
    }

    /// Labels the wait from `now` on with `cause`, splitting if it changed.
    pub fn observe(&mut self, now: Minutes, cause: DelayCause) {
        match self.open {
            Some((start, None)) => self.open = Some((start, Some(cause))),
            Some((start, Some(c))) if c != cause => {
                self.push(start, now, c);
                self.open = Some((now, Some(cause)));
            }
            _ => {}
        }
    }

    pub fn close(&mut self, at: Minutes, fallback: DelayCause) {
        if let Some((start, c)) = self.open.take() {
            self.push(start, at, c.unwrap_or(fallback));
        }
    }

    fn push(&mut self, start: Minutes, end: Minutes, cause: DelayCause) {
        if end <= start {
            return;
        }
        match self.intervals.last_mut() {
            Some(last) if last.cause == cause && last.end == start => last.end = end,
            _ => self.intervals.push(DelayInterval { start, end, cause }),
        }
    }

    pub fn total(&self, cause: Option<DelayCause>) -> f64 {
        self.intervals
            .iter()
            .filter(|i| cause.is_none_or(|c| c == i.cause))
            .map(|i| i.end - i.start)
            .sum()
    }
}

/// A running job as seen by the preemption policy.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunningJob {
    pub job: JobId,
    pub vc: VcId,
    pub gpus: u32,
    pub started: Minutes,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WaitingJob {
    pub job: JobId,
    pub vc: VcId,
    pub gpus: u32,
}

/// Chooses victims to restore fair share. Nothing happens below
/// `threshold` usage, without an over-quota VC, or without a waiting job
/// whose VC is within quota. Victims come from the most-over-quota VC,
/// youngest first, while that VC stays over quota, until the freed GPUs
/// cover the starved job.
pub fn maybe_preempt(
    used: u32,
    total: u32,
    threshold: f64,
    vc_usage: &[u32],
    quotas: &[u32],
    running: &[RunningJob],
    waiting: &[WaitingJob],
) -> Vec<JobId> {
    if total == 0 || (used as f64) < threshold * total as f64 {
        return Vec::new();
    }
    let over = |v: usize| vc_usage[v] as i64 - quotas[v] as i64;
    let Some(victim_vc) = (0..vc_usage.len())
        .filter(|v| over(*v) > 0)
        .max_by_key(|v| (over(*v), std::cmp::Reverse(*v)))
    else {
        return Vec::new();
    };
    let Some(starved) = waiting.iter().find(|w| {
        let v = w.vc.0 as usize;
        v != victim_vc && vc_usage[v] + w.gpus <= quotas[v]
    }) else {
        return Vec::new();
    };
    let mut pool: Vec<&RunningJob> = running.iter().filter(|r| r.vc.0 as usize == victim_vc).collect();
    pool.sort_by(|a, b| b.started.total_cmp(&a.started).then(b.job.cmp(&a.job)));
    let mut usage = vc_usage[victim_vc];
    let mut freed = 0u32;
    let mut victims = Vec::new();
    for r in pool {
        if freed >= starved.gpus || usage <= quotas[victim_vc] {
            break;
        }
        victims.push(r.job);
        freed += r.gpus;
        usage -= r.gpus;
    }
    victims
}

/// Servers a placement spans.
pub fn servers_of(slots: &[Slot]) -> BTreeSet<ServerId> {
    slots.iter().map(|s| s.server).collect()
}

/// A placement for `job` on at most `max_servers` servers, treating its
/// current slots as free. Returns the full new slot list.
pub fn plan_migration(
    job: JobId,
    current: &[Slot],
    max_servers: u32,
    state: &AllocationState,
    topo: &ClusterTopology,
    dedicated: bool,
) -> Option<Vec<Slot>> {
    let mut scratch = state.clone();
    scratch.release(job);
    let constraint = LocalityConstraint {
        max_servers,
        require_single_rdma_domain: false,
    };
    let probe = JobId(u32::MAX);
    match try_acquire(probe, current.len() as u32, &[], &constraint, &scratch, topo, dedicated) {
        AcquireOutcome::Complete(slots) if (servers_of(&slots).len() as u32) <= max_servers => Some(slots),
        _ => None,
    }
}
