// SPDX-License-Identifier: Apache-2.0

//! The simulation world and its event loop.
//!
//! A job moves through arrival, optional pre-run screening, its VC queue,
//! gang acquisition, one or more run segments, and a terminal status. One
//! scheduling pass runs per instant, after every other event at that instant.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cluster::{fragmentation_report, AllocationState, ClusterTopology, JobId, Slot, VcId};
use crate::engine::{EngineError, EventKind, EventQueue, Minutes};
use crate::exec::{
    placement_class, sample_utilization, slowdown_or_fallback, truncated_location, Calibration, PlacementClass,
};
use crate::failure::{apply_retry_policy, FailureProfile, FailureReason, FailureRecord, RetryDecision};
use crate::rng::{stable_hash, RngStreams};
use crate::scheduler::{
    attribute_delay, base_constraint, maybe_preempt, plan_migration, relax, relaxation_stage, servers_of, try_acquire,
    AcquireOutcome, DelayCause, DelayInterval, DelayLedger, LocalityConstraint, RunningJob, SchedError,
    SchedulerConfig, Scenario, WaitingJob,
};
use crate::workload::{bucket_of, GpuBucket, Job, JobStatus};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VcSpec {
    pub name: String,
    pub quota: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunOptions {
    pub max_events: u64,
    /// Re-verify allocation invariants after every event.
    pub check_invariants: bool,
    /// Counterfactual replays used to judge out-of-order placements.
    pub harmless_replays: usize,
    pub cluster_sample_min: f64,
    /// Every placement runs at ideal throughput.
    pub unit_slowdown: bool,
    pub inject_failures: bool,
    pub sample_utilization: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            max_events: 200_000_000,
            check_invariants: false,
            harmless_replays: 8,
            cluster_sample_min: 10.0,
            unit_slowdown: false,
            inject_failures: true,
            sample_utilization: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct World {
    pub topo: ClusterTopology,
    pub vcs: Vec<VcSpec>,
    pub jobs: Vec<Job>,
    pub sched: SchedulerConfig,
    pub scenario: Scenario,
    pub calibration: Calibration,
    pub profile: FailureProfile,
    pub seed: u64,
    pub options: RunOptions,
}

#[derive(Debug, Error, PartialEq)]
pub enum SimError {
    #[error(transparent)]
    Sched(#[from] SchedError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error("job {job}: {message}")]
    InvalidJob { job: String, message: String },
    #[error("{0} jobs can never be placed")]
    Stalled(usize),
}

impl World {
    pub fn validate(&self) -> Result<(), SimError> {
        self.sched.validate()?;
        let total = self.topo.total_gpus();
        let sum: u32 = self.vcs.iter().map(|v| v.quota).sum();
        if sum > total {
            return Err(SchedError::QuotaExceedsCluster { sum, total }.into());
        }
        let names: BTreeSet<&str> = self.vcs.iter().map(|v| v.name.as_str()).collect();
        for job in &self.jobs {
            if !names.contains(job.vc.as_str()) {
                return Err(SchedError::UnknownVc(job.vc.clone()).into());
            }
            let bad = |message: String| SimError::InvalidJob {
                job: job.job_id.clone(),
                message,
            };
            job.validate().map_err(bad)?;
            if job.gpu_demand > total {
                return Err(bad(format!("demand {} exceeds the cluster's {total} GPUs", job.gpu_demand)));
            }
        }
        Ok(())
    }
}

/// Final record of one job.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobOutcome {
    pub job_id: String,
    pub vc: String,
    pub user: String,
    pub gpu_demand: u32,
    pub bucket: GpuBucket,
    pub submit_time: Minutes,
    /// Entry into the cluster queue (after screening, if any).
    pub queue_enter: Option<Minutes>,
    pub first_start: Option<Minutes>,
    pub end_time: Minutes,
    pub status: JobStatus,
    pub queue_delay: Option<f64>,
    pub ledger: Vec<DelayInterval>,
    pub placed_stage: Option<u32>,
    pub first_class: Option<PlacementClass>,
    /// Run-time weighted mean over segments.
    pub mean_servers: f64,
    pub mean_slowdown: f64,
    pub runs: u32,
    pub failures: u32,
    pub preemptions: u32,
    pub gpu_time: f64,
    pub exec_minutes: f64,
    /// Fraction of the job's work completed.
    pub progress: f64,
    pub screened: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlacementDecision {
    pub job: JobId,
    pub time: Minutes,
    pub bucket: GpuBucket,
    pub out_of_order: bool,
    /// Earlier-queued jobs still waiting at the decision (at most 64).
    pub waiters: Vec<JobId>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct HarmlessCheck {
    pub checked: usize,
    pub harmless: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClusterSample {
    pub time: Minutes,
    pub used_fraction: f64,
    pub empty_server_fraction: f64,
}

pub const UTIL_BINS: usize = 101;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct UtilAggregate {
    /// Per (bucket, status): counts in 1%-wide bins.
    pub hist: BTreeMap<(GpuBucket, JobStatus), Vec<u64>>,
    /// Per (gpu demand, servers used): (sum, count).
    pub by_shape: BTreeMap<(u32, u32), (f64, u64)>,
    pub sum: f64,
    pub count: u64,
}

impl UtilAggregate {
    pub fn mean_for(&self, demand: u32, servers: u32) -> Option<(f64, u64)> {
        self.by_shape.get(&(demand, servers)).map(|(s, n)| (s / *n as f64, *n))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunStats {
    pub events: u64,
    pub passes: u64,
    pub end_time: Minutes,
    pub placements: u64,
    pub colocated_placements: u64,
    pub preemptions: u64,
    pub migrations: u64,
    pub pool_screened: u64,
    pub pool_caught: u64,
    pub pool_gpu_minutes: f64,
    pub violations: u64,
    pub violation_samples: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimOutput {
    pub jobs: Vec<JobOutcome>,
    pub failures: Vec<FailureRecord>,
    pub decisions: Vec<PlacementDecision>,
    pub harmless: HarmlessCheck,
    pub util: UtilAggregate,
    pub cluster: Vec<ClusterSample>,
    pub stats: RunStats,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Wait {
    Idle,
    Acquiring,
    Backoff,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Phase {
    NotArrived,
    PoolQueued,
    Screening,
    Queued(Wait),
    RetryWait,
    Running,
    Done(JobStatus),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Planned {
    Finish,
    Kill,
    Fail(FailureReason),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Keep {
    All,
    Checkpoint,
}

#[derive(Debug, Clone)]
struct Rt {
    vc: VcId,
    demand: u32,
    ideal: f64,
    user: String,
    phase: Phase,
    key: i64,
    order: (u64, usize),
    attempt: u32,
    attempt_started: Minutes,
    attempt_seq: u64,
    retry_count: u32,
    relax_retries: u32,
    wait_since: Minutes,
    constraint: LocalityConstraint,
    run: u32,
    run_start: Minutes,
    pause: f64,
    factor: f64,
    class: Option<PlacementClass>,
    servers: u32,
    planned: Planned,
    fail_rtf: f64,
    exec_attempt: u32,
    progress: f64,
    exec_minutes: f64,
    gpu_time: f64,
    fault: Option<FailureReason>,
    force_fault: bool,
    no_failures: bool,
    kill_exec: Option<f64>,
    max_retries: u32,
    queue_enter: Option<Minutes>,
    first_start: Option<Minutes>,
    placed_stage: Option<u32>,
    first_class: Option<PlacementClass>,
    ledger: DelayLedger,
    weighted_servers: f64,
    weighted_factor: f64,
    run_time: f64,
    failures: u32,
    preemptions: u32,
    end_time: Minutes,
    util_hist: Option<Box<[u64; UTIL_BINS]>>,
    screened: bool,
    retry_token: u32,
}

struct Control {
    exclude: Option<usize>,
    stop_when_started: Option<Vec<usize>>,
}

struct Sim<'w> {
    w: &'w World,
    q: EventQueue,
    state: AllocationState,
    rt: Vec<Rt>,
    queues: Vec<BTreeMap<i64, usize>>,
    head_key: Vec<i64>,
    tail_key: Vec<i64>,
    waiting: BTreeSet<(u64, usize)>,
    acquiring: BTreeMap<u64, usize>,
    running: BTreeSet<usize>,
    attempt_counter: u64,
    pass_pending: bool,
    job_events: u64,
    pool_free: u32,
    pool_queue: VecDeque<usize>,
    streams: RngStreams,
    locations: BTreeMap<(u32, u32), f64>,
    finished: usize,
    expected: usize,
    failures: Vec<FailureRecord>,
    decisions: Vec<PlacementDecision>,
    util: UtilAggregate,
    cluster: Vec<ClusterSample>,
    stats: RunStats,
    control: Control,
    quotas: Vec<u32>,
    n_servers: u32,
}

fn is_periodic(k: &EventKind) -> bool {
    matches!(k, EventKind::PreemptCheck | EventKind::UtilizationSample | EventKind::MigrationCheck)
}

/// Runs the world to completion.
pub fn run(world: &World) -> Result<SimOutput, SimError> {
    world.validate()?;
    let mut out = run_controlled(
        world,
        Control {
            exclude: None,
            stop_when_started: None,
        },
    )?;
    if world.options.harmless_replays > 0 {
        out.harmless = check_harmless(world, &out)?;
    }
    Ok(out)
}

fn run_controlled(world: &World, control: Control) -> Result<SimOutput, SimError> {
    let mut sim = Sim::new(world, control);
    sim.main_loop()?;
    Ok(sim.finish())
}

/// Replays a sample of out-of-order placements that happened while large
/// jobs waited, without the placed job, and checks whether any of those
/// waiters would have started earlier.
fn check_harmless(world: &World, out: &SimOutput) -> Result<HarmlessCheck, SimError> {
    let large = |j: &JobId| matches!(out.jobs[j.0 as usize].bucket, GpuBucket::B5_8 | GpuBucket::BGt8);
    let candidates: Vec<(&PlacementDecision, Vec<usize>)> = out
        .decisions
        .iter()
        .filter(|d| d.out_of_order)
        .filter_map(|d| {
            let w: Vec<usize> = d.waiters.iter().filter(|j| large(j)).map(|j| j.0 as usize).collect();
            (!w.is_empty()).then_some((d, w))
        })
        .collect();
    let k = world.options.harmless_replays.min(candidates.len());
    let mut check = HarmlessCheck::default();
    for i in 0..k {
        let (d, waiters) = &candidates[i * candidates.len() / k];
        let cf = run_controlled(
            world,
            Control {
                exclude: Some(d.job.0 as usize),
                stop_when_started: Some(waiters.clone()),
            },
        )?;
        check.checked += 1;
        let delayed = waiters.iter().any(|w| {
            match (out.jobs[*w].first_start, cf.jobs[*w].first_start) {
                (Some(base), Some(alt)) => alt + 1e-9 < base,
                _ => false,
            }
        });
        if !delayed {
            check.harmless += 1;
        }
    }
    Ok(check)
}

impl<'w> Sim<'w> {
    fn new(w: &'w World, control: Control) -> Self {
        let streams = RngStreams::new(w.seed);
        let mut modes: BTreeMap<&str, Vec<FailureReason>> = BTreeMap::new();
        let rt: Vec<Rt> = w
            .jobs
            .iter()
            .enumerate()
            .map(|(i, job)| {
                let vc = VcId(w.vcs.iter().position(|v| v.name == job.vc).expect("validated") as u16);
                let user = job.user_name().to_string();
                let m = modes
                    .entry(job.user_name())
                    .or_insert_with(|| w.profile.user_modes(&mut streams.stream("user-modes", stable_hash(job.user_name()))));
                let mut frng = streams.stream("fault", i as u64);
                let (fault, force, none) = match job.status {
                    Some(JobStatus::Passed) => (None, false, true),
                    Some(JobStatus::Unsuccessful) => {
                        let r = w.profile.sample_reason(job.gpu_demand, &mut frng).unwrap_or(FailureReason::NoSignature);
                        (Some(r), true, false)
                    }
                    _ => (w.profile.job_fault(job.gpu_demand, m, &mut frng), false, false),
                };
                let kill_exec = match job.status {
                    Some(JobStatus::Passed) | Some(JobStatus::Unsuccessful) => None,
                    _ => job.kill_time,
                };
                Rt {
                    vc,
                    demand: job.gpu_demand,
                    ideal: job.ideal_runtime(),
                    user,
                    phase: Phase::NotArrived,
                    key: 0,
                    order: (0, i),
                    attempt: 0,
                    attempt_started: 0.0,
                    attempt_seq: 0,
                    retry_count: 0,
                    relax_retries: 0,
                    wait_since: 0.0,
                    constraint: base_constraint(job.gpu_demand, &w.topo),
                    run: 0,
                    run_start: 0.0,
                    pause: 0.0,
                    factor: 1.0,
                    class: None,
                    servers: 0,
                    planned: Planned::Finish,
                    fail_rtf: 0.0,
                    exec_attempt: 0,
                    progress: 0.0,
                    exec_minutes: 0.0,
                    gpu_time: 0.0,
                    fault,
                    force_fault: force,
                    no_failures: none,
                    kill_exec,
                    max_retries: job.max_retries.unwrap_or(w.sched.max_retries),
                    queue_enter: None,
                    first_start: None,
                    placed_stage: None,
                    first_class: None,
                    ledger: DelayLedger::default(),
                    weighted_servers: 0.0,
                    weighted_factor: 0.0,
                    run_time: 0.0,
                    failures: 0,
                    preemptions: 0,
                    end_time: 0.0,
                    util_hist: None,
                    screened: false,
                    retry_token: 0,
                }
            })
            .collect();
        let nvc = w.vcs.len();
        let expected = w.jobs.len() - usize::from(control.exclude.is_some());
        Sim {
            w,
            q: EventQueue::new(),
            state: AllocationState::new(&w.topo, nvc),
            rt,
            queues: vec![BTreeMap::new(); nvc],
            head_key: vec![0; nvc],
            tail_key: vec![0; nvc],
            waiting: BTreeSet::new(),
            acquiring: BTreeMap::new(),
            running: BTreeSet::new(),
            attempt_counter: 0,
            pass_pending: false,
            job_events: 0,
            pool_free: w.scenario.pool_gpus,
            pool_queue: VecDeque::new(),
            streams,
            locations: BTreeMap::new(),
            finished: 0,
            expected,
            failures: Vec::new(),
            decisions: Vec::new(),
            util: UtilAggregate::default(),
            cluster: Vec::new(),
            stats: RunStats::default(),
            control,
            quotas: w.vcs.iter().map(|v| v.quota).collect(),
            n_servers: w.topo.server_count() as u32,
        }
    }

    fn schedule(&mut self, at: Minutes, kind: EventKind) -> Result<(), SimError> {
        if !is_periodic(&kind) {
            self.job_events += 1;
        }
        self.q.schedule(at, kind)?;
        Ok(())
    }

    fn request_pass(&mut self) -> Result<(), SimError> {
        if !self.pass_pending {
            self.pass_pending = true;
            self.schedule(self.q.now(), EventKind::SchedAttempt)?;
        }
        Ok(())
    }

    fn stop_reached(&self) -> bool {
        match &self.control.stop_when_started {
            Some(list) => list.iter().all(|j| self.rt[*j].first_start.is_some()),
            None => false,
        }
    }

    fn main_loop(&mut self) -> Result<(), SimError> {
        for (i, job) in self.w.jobs.iter().enumerate() {
            if self.control.exclude == Some(i) {
                continue;
            }
            self.schedule(job.submit_time, EventKind::JobArrival(JobId(i as u32)))?;
        }
        if self.expected > 0 {
            if self.w.sched.preemption {
                self.schedule(self.w.sched.preempt_check_min, EventKind::PreemptCheck)?;
            }
            if self.w.scenario.migration {
                self.schedule(self.w.sched.migration_check_min, EventKind::MigrationCheck)?;
            }
            self.schedule(0.0, EventKind::UtilizationSample)?;
        }
        while let Some(ev) = self.q.pop() {
            self.stats.events += 1;
            if self.stats.events > self.w.options.max_events {
                return Err(EngineError::LivelockGuard(self.stats.events).into());
            }
            if !is_periodic(&ev.kind) {
                self.job_events -= 1;
            }
            self.dispatch(ev.kind)?;
            if self.w.options.check_invariants {
                self.check_invariants();
            }
            if self.stop_reached() {
                break;
            }
            if self.job_events == 0 && self.finished < self.expected {
                let stuck = self.expected - self.finished;
                return Err(SimError::Stalled(stuck));
            }
        }
        self.stats.end_time = self.q.now();
        Ok(())
    }

    fn reschedule_periodic(&mut self, kind: EventKind, every: f64) -> Result<(), SimError> {
        if self.finished < self.expected {
            self.schedule(self.q.now() + every, kind)?;
        }
        Ok(())
    }

    fn dispatch(&mut self, kind: EventKind) -> Result<(), SimError> {
        let now = self.q.now();
        match kind {
            EventKind::JobArrival(j) => {
                let i = j.0 as usize;
                if self.w.scenario.prerun_pool {
                    self.rt[i].phase = Phase::PoolQueued;
                    self.pool_queue.push_back(i);
                    self.start_screens()?;
                } else {
                    self.enqueue(i, false);
                    self.request_pass()?;
                }
            }
            EventKind::ScreenDone(j) => {
                let i = j.0 as usize;
                self.pool_free += 1;
                self.stats.pool_gpu_minutes += now - self.rt[i].run_start;
                if self.rt[i].planned != Planned::Finish {
                    if let Planned::Fail(reason) = self.rt[i].planned {
                        self.stats.pool_caught += 1;
                        let rec = self.record(i, reason, now - self.rt[i].run_start);
                        self.failures.push(rec);
                    }
                    self.rt[i].end_time = now;
                    self.finish_job(i, JobStatus::Unsuccessful);
                } else {
                    self.enqueue(i, false);
                    self.request_pass()?;
                }
                self.start_screens()?;
            }
            EventKind::SchedAttempt => {
                if self.q.peek_time() == Some(now) {
                    self.schedule(now, EventKind::SchedAttempt)?;
                } else {
                    self.pass_pending = false;
                    self.pass()?;
                }
            }
            EventKind::AcquisitionTimeout { job, attempt } => {
                let i = job.0 as usize;
                let r = &self.rt[i];
                if r.phase == Phase::Queued(Wait::Acquiring) && r.attempt == attempt {
                    self.acquiring.remove(&r.attempt_seq);
                    self.state.release(job);
                    let waited = now - self.rt[i].wait_since;
                    let r = &mut self.rt[i];
                    r.retry_count += 1;
                    // each relaxation stage costs an extra wait under wait_for_locality
                    let next = relaxation_stage(r.relax_retries + 1, self.w.sched.relax_after) as f64;
                    if !self.w.scenario.wait_for_locality || waited >= self.w.scenario.extra_wait_min * next {
                        r.relax_retries += 1;
                    }
                    r.phase = Phase::Queued(Wait::Backoff);
                    self.schedule(now + self.w.sched.backoff_min, EventKind::BackoffExpired { job, attempt })?;
                    self.request_pass()?;
                }
            }
            EventKind::BackoffExpired { job, attempt } => {
                let i = job.0 as usize;
                match self.rt[i].phase {
                    Phase::Queued(Wait::Backoff) if self.rt[i].attempt == attempt => {
                        self.rt[i].phase = Phase::Queued(Wait::Idle);
                        self.request_pass()?;
                    }
                    Phase::RetryWait if self.rt[i].retry_token == attempt => {
                        self.enqueue(i, false);
                        self.request_pass()?;
                    }
                    _ => {}
                }
            }
            EventKind::JobFinish { job, run } => {
                let i = job.0 as usize;
                if self.rt[i].phase == Phase::Running && self.rt[i].run == run {
                    let status = if self.rt[i].planned == Planned::Kill {
                        JobStatus::Killed
                    } else {
                        JobStatus::Passed
                    };
                    self.end_segment(i, Keep::All);
                    if status == JobStatus::Passed {
                        self.rt[i].progress = self.rt[i].ideal;
                    }
                    self.state.release(job);
                    self.rt[i].end_time = now;
                    self.finish_job(i, status);
                    self.request_pass()?;
                }
            }
            EventKind::FailureFired { job, run } => {
                let i = job.0 as usize;
                if self.rt[i].phase == Phase::Running && self.rt[i].run == run {
                    let Planned::Fail(reason) = self.rt[i].planned else {
                        unreachable!("failure event without a planned failure")
                    };
                    let rtf = now - self.rt[i].run_start - self.rt[i].pause;
                    self.end_segment(i, Keep::Checkpoint);
                    self.state.release(job);
                    let rec = self.record(i, reason, rtf.max(0.0));
                    self.failures.push(rec);
                    let r = &mut self.rt[i];
                    r.failures += 1;
                    let decision = apply_retry_policy(
                        r.exec_attempt,
                        r.max_retries,
                        reason,
                        self.w.sched.retry_policy,
                        &self.w.profile,
                        self.w.sched.backoff_min,
                    );
                    r.exec_attempt += 1;
                    match decision {
                        RetryDecision::Retry { backoff } => {
                            r.phase = Phase::RetryWait;
                            r.retry_token += 1;
                            let token = r.retry_token;
                            self.schedule(now + backoff, EventKind::BackoffExpired { job, attempt: token })?;
                        }
                        RetryDecision::MarkUnsuccessful => {
                            self.rt[i].end_time = now;
                            self.finish_job(i, JobStatus::Unsuccessful);
                        }
                    }
                    self.request_pass()?;
                }
            }
            EventKind::PreemptCheck => {
                self.preempt_check()?;
                self.reschedule_periodic(EventKind::PreemptCheck, self.w.sched.preempt_check_min)?;
            }
            EventKind::MigrationCheck => {
                self.migration_check()?;
                self.reschedule_periodic(EventKind::MigrationCheck, self.w.sched.migration_check_min)?;
            }
            EventKind::UtilizationSample => {
                let total = self.w.topo.total_gpus() as f64;
                self.cluster.push(ClusterSample {
                    time: now,
                    used_fraction: self.state.total_used() as f64 / total,
                    empty_server_fraction: fragmentation_report(&self.state, &self.w.topo).empty_server_fraction,
                });
                self.reschedule_periodic(EventKind::UtilizationSample, self.w.options.cluster_sample_min)?;
            }
        }
        Ok(())
    }

    fn record(&self, i: usize, reason: FailureReason, rtf: f64) -> FailureRecord {
        let r = &self.rt[i];
        FailureRecord {
            job: JobId(i as u32),
            user: r.user.clone(),
            attempt_index: r.exec_attempt,
            reason,
            categories: reason.categories(),
            rtf_minutes: rtf,
            gpu_demand: r.demand,
            time: self.q.now(),
            pool: r.phase == Phase::Screening,
        }
    }

    fn start_screens(&mut self) -> Result<(), SimError> {
        let now = self.q.now();
        while self.pool_free > 0 {
            let Some(i) = self.pool_queue.pop_front() else { break };
            self.pool_free -= 1;
            self.stats.pool_screened += 1;
            let screen = self.w.scenario.screen_min;
            let r = &mut self.rt[i];
            r.phase = Phase::Screening;
            r.screened = true;
            r.run_start = now;
            let mut rng = self.streams.stream("screen", i as u64);
            let caught = r.fault.filter(|f| self.w.profile.is_screenable(*f));
            let dur = match caught {
                Some(reason) => {
                    r.planned = Planned::Fail(reason);
                    self.w.profile.sample_rtf(reason, &mut rng).min(screen)
                }
                None => {
                    r.planned = Planned::Finish;
                    screen
                }
            };
            self.schedule(now + dur, EventKind::ScreenDone(JobId(i as u32)))?;
        }
        Ok(())
    }

    fn enqueue(&mut self, i: usize, at_head: bool) {
        let now = self.q.now();
        let vc = self.rt[i].vc.0 as usize;
        let key = if at_head {
            self.head_key[vc] -= 1;
            self.head_key[vc]
        } else {
            self.tail_key[vc] += 1;
            self.tail_key[vc]
        };
        let r = &mut self.rt[i];
        r.key = key;
        r.phase = Phase::Queued(Wait::Idle);
        r.retry_count = 0;
        r.relax_retries = 0;
        r.wait_since = now;
        if r.queue_enter.is_none() {
            r.queue_enter = Some(now);
            r.ledger.open(now);
        }
        r.order = (r.queue_enter.unwrap_or(now).to_bits(), i);
        self.queues[vc].insert(key, i);
        self.waiting.insert(r.order);
    }

    fn finish_job(&mut self, i: usize, status: JobStatus) {
        let r = &mut self.rt[i];
        r.phase = Phase::Done(status);
        self.finished += 1;
        if let Some(h) = r.util_hist.take() {
            let e = self
                .util
                .hist
                .entry((bucket_of(r.demand), status))
                .or_insert_with(|| vec![0; UTIL_BINS]);
            for (a, b) in e.iter_mut().zip(h.iter()) {
                *a += b;
            }
        }
    }

    fn own_holds(&self, i: usize) -> u32 {
        self.state.slots_of(JobId(i as u32)).len() as u32
    }

    fn within_quota(&self, i: usize) -> bool {
        let r = &self.rt[i];
        self.state.vc_usage(r.vc) - self.own_holds(i) + r.demand <= self.quotas[r.vc.0 as usize]
    }

    fn vc_order(&self) -> Vec<usize> {
        let mut v: Vec<usize> = (0..self.queues.len()).collect();
        let ratio = |i: usize| {
            let q = self.quotas[i];
            if q == 0 {
                f64::INFINITY
            } else {
                self.state.vc_usage(VcId(i as u16)) as f64 / q as f64
            }
        };
        v.sort_by(|a, b| ratio(*a).total_cmp(&ratio(*b)).then(a.cmp(b)));
        v
    }

    fn current_constraint(&self, i: usize) -> LocalityConstraint {
        let r = &self.rt[i];
        relax(
            base_constraint(r.demand, &self.w.topo),
            r.relax_retries,
            self.w.sched.relax_after,
            self.n_servers,
        )
    }

    fn acquire(&self, i: usize, c: &LocalityConstraint) -> AcquireOutcome {
        let job = JobId(i as u32);
        let holding = self.holding_out(i);
        let out = try_acquire(
            job,
            self.rt[i].demand,
            self.state.slots_of(job),
            c,
            &self.state,
            &self.w.topo,
            self.w.scenario.dedicated_servers || holding,
        );
        match out {
            AcquireOutcome::Partial(_) if holding => AcquireOutcome::NoProgress,
            o => o,
        }
    }

    /// Under wait_for_locality a multi-server job takes only whole,
    /// unshared placements until it has waited `extra_wait_min`.
    fn holding_out(&self, i: usize) -> bool {
        let sc = &self.w.scenario;
        sc.wait_for_locality
            && self.rt[i].demand > self.w.topo.max_gpus_per_server()
            && self.q.now() - self.rt[i].wait_since < sc.extra_wait_min
    }

    fn take(&mut self, i: usize, slots: &[Slot]) {
        let vc = self.rt[i].vc;
        self.state
            .allocate(JobId(i as u32), vc, slots)
            .expect("acquisition picks free slots");
    }

    fn pass(&mut self) -> Result<(), SimError> {
        self.stats.passes += 1;
        let now = self.q.now();
        loop {
            let mut progress = false;

            let pending: Vec<usize> = self.acquiring.values().copied().collect();
            for i in pending {
                let c = self.rt[i].constraint;
                match self.acquire(i, &c) {
                    AcquireOutcome::Complete(s) => {
                        self.take(i, &s);
                        self.start(i)?;
                        progress = true;
                    }
                    AcquireOutcome::Partial(s) => {
                        self.take(i, &s);
                        progress = true;
                    }
                    AcquireOutcome::NoProgress => {}
                }
            }

            loop {
                let mut started = false;
                for vc in self.vc_order() {
                    let Some((_, &i)) = self.queues[vc].first_key_value() else { continue };
                    if self.rt[i].phase != Phase::Queued(Wait::Idle) || !self.within_quota(i) {
                        continue;
                    }
                    let c = self.current_constraint(i);
                    self.attempt_counter += 1;
                    let r = &mut self.rt[i];
                    r.attempt += 1;
                    r.attempt_started = now;
                    r.attempt_seq = self.attempt_counter;
                    r.constraint = c;
                    progress = true;
                    match self.acquire(i, &c) {
                        AcquireOutcome::Complete(s) => {
                            self.take(i, &s);
                            self.start(i)?;
                            started = true;
                        }
                        outcome => {
                            if let AcquireOutcome::Partial(s) = outcome {
                                self.take(i, &s);
                            }
                            let r = &mut self.rt[i];
                            r.phase = Phase::Queued(Wait::Acquiring);
                            let (job, attempt) = (JobId(i as u32), r.attempt);
                            self.acquiring.insert(self.attempt_counter, i);
                            self.schedule(
                                now + self.w.sched.acquisition_timeout_min,
                                EventKind::AcquisitionTimeout { job, attempt },
                            )?;
                        }
                    }
                }
                if !started {
                    break;
                }
            }

            let total = self.w.topo.total_gpus() as f64;
            // an idle job holds nothing, so the outcome depends only on
            // (demand, constraint) until the next placement
            let mut failed: BTreeSet<(u32, LocalityConstraint, bool)> = BTreeSet::new();
            for vc in self.vc_order() {
                let members: Vec<usize> = self.queues[vc].values().copied().collect();
                for i in members {
                    if self.rt[i].phase != Phase::Queued(Wait::Idle) {
                        continue;
                    }
                    let d = self.rt[i].demand;
                    if d > self.state.total_free() {
                        continue;
                    }
                    let ok = self.within_quota(i)
                        || ((self.state.total_used() + d) as f64) < self.w.sched.preempt_threshold * total;
                    if !ok {
                        continue;
                    }
                    let c = self.current_constraint(i);
                    let key = (d, c, self.holding_out(i));
                    if failed.contains(&key) {
                        continue;
                    }
                    if let AcquireOutcome::Complete(s) = self.acquire(i, &c) {
                        self.rt[i].constraint = c;
                        self.take(i, &s);
                        self.start(i)?;
                        progress = true;
                        failed.clear();
                    } else {
                        failed.insert(key);
                    }
                }
            }

            if !progress {
                break;
            }
        }

        let waiting: Vec<usize> = self.waiting.iter().map(|(_, i)| *i).collect();
        for i in waiting {
            if self.rt[i].ledger.is_open() {
                let r = &self.rt[i];
                let used = self.state.vc_usage(r.vc) - self.own_holds(i);
                let cause = attribute_delay(used, r.demand, self.quotas[r.vc.0 as usize]);
                self.rt[i].ledger.observe(now, cause);
            }
        }
        Ok(())
    }

    fn start(&mut self, i: usize) -> Result<(), SimError> {
        let now = self.q.now();
        let job = JobId(i as u32);
        let vc = self.rt[i].vc.0 as usize;
        let (key, order) = (self.rt[i].key, self.rt[i].order);
        self.queues[vc].remove(&key);
        self.waiting.remove(&order);
        if self.rt[i].phase == Phase::Queued(Wait::Acquiring) {
            self.acquiring.remove(&self.rt[i].attempt_seq);
        }
        let waiters: Vec<JobId> = self
            .waiting
            .range(..order)
            .take(64)
            .map(|(_, j)| JobId(*j as u32))
            .collect();
        self.decisions.push(PlacementDecision {
            job,
            time: now,
            bucket: bucket_of(self.rt[i].demand),
            out_of_order: !waiters.is_empty(),
            waiters,
        });

        let slots = self.state.slots_of(job).to_vec();
        let class = placement_class(job, &slots, &self.state);
        self.stats.placements += 1;
        if class.colocated() {
            self.stats.colocated_placements += 1;
        }
        let stage = relaxation_stage(self.rt[i].relax_retries, self.w.sched.relax_after);
        let r = &mut self.rt[i];
        if r.first_start.is_none() {
            r.first_start = Some(now);
            r.placed_stage = Some(stage);
            r.first_class = Some(class);
            r.ledger.close(now, DelayCause::Fragmentation);
        }
        self.running.insert(i);
        self.begin_run(i, class, 0.0)
    }

    fn begin_run(&mut self, i: usize, class: PlacementClass, pause: f64) -> Result<(), SimError> {
        let now = self.q.now();
        let factor = if self.w.options.unit_slowdown {
            1.0
        } else {
            slowdown_or_fallback(class, &self.w.calibration)
        };
        let servers = class.servers_used();
        let r = &mut self.rt[i];
        r.phase = Phase::Running;
        r.run += 1;
        r.run_start = now;
        r.pause = pause;
        r.factor = factor;
        r.class = Some(class);
        r.servers = servers;
        let runtime = (r.ideal - r.progress).max(0.0) * factor;
        let mut end = (runtime, Planned::Finish);
        if let Some(k) = r.kill_exec {
            let left = (k - r.exec_minutes).max(0.0);
            if left <= end.0 {
                end = (left, Planned::Kill);
            }
        }
        if self.w.options.inject_failures && !r.no_failures {
            let mut rng = self.streams.stream2("run", i as u64, r.run as u64);
            let reason = if r.force_fault {
                r.fault
            } else {
                self.w.profile.attempt_failure(r.fault, r.exec_attempt, r.demand, &mut rng)
            };
            if let Some(reason) = reason {
                let rtf = self.w.profile.sample_rtf(reason, &mut rng).min(runtime);
                if rtf <= end.0 {
                    end = (rtf, Planned::Fail(reason));
                }
            }
        }
        r.planned = end.1;
        r.fail_rtf = end.0;
        let (job, run) = (JobId(i as u32), r.run);
        let kind = match end.1 {
            Planned::Fail(_) => EventKind::FailureFired { job, run },
            _ => EventKind::JobFinish { job, run },
        };
        self.schedule(now + pause + end.0, kind)
    }

    /// Closes the current run segment at `now`.
    fn end_segment(&mut self, i: usize, keep: Keep) {
        let now = self.q.now();
        let ckpt = self.w.sched.checkpoint_interval_min;
        let r = &mut self.rt[i];
        let wall = (now - r.run_start).max(0.0);
        let exec = (wall - r.pause).max(0.0);
        r.gpu_time += wall * r.demand as f64;
        r.exec_minutes += exec;
        r.run_time += wall;
        r.weighted_servers += wall * r.servers as f64;
        r.weighted_factor += wall * r.factor;
        let done = match keep {
            Keep::All => exec / r.factor,
            Keep::Checkpoint => (exec / ckpt).floor() * ckpt / r.factor,
        };
        r.progress = (r.progress + done).min(r.ideal);
        self.running.remove(&i);

        if self.w.options.sample_utilization && exec >= 1.0 {
            let minutes = exec.floor() as u64;
            let class = r.class.expect("running job has a class");
            let mean = self.w.calibration.utilization_mean(r.demand, class.servers_used());
            let sigma = self.w.calibration.utilization.sigma;
            let key = (r.demand, class.servers_used());
            let loc = *self
                .locations
                .entry(key)
                .or_insert_with(|| truncated_location(mean, sigma));
            let mut rng = self.streams.stream2("util", i as u64, r.run as u64);
            let hist = r.util_hist.get_or_insert_with(|| Box::new([0; UTIL_BINS]));
            let mut sum = 0.0;
            for _ in 0..minutes {
                let x = sample_utilization(loc, sigma, &mut rng);
                sum += x;
                hist[(x.round() as usize).min(UTIL_BINS - 1)] += 1;
            }
            let e = self.util.by_shape.entry(key).or_insert((0.0, 0));
            e.0 += sum;
            e.1 += minutes;
            self.util.sum += sum;
            self.util.count += minutes;
        }
    }

    fn preempt_check(&mut self) -> Result<(), SimError> {
        let running: Vec<RunningJob> = self
            .running
            .iter()
            .map(|i| RunningJob {
                job: JobId(*i as u32),
                vc: self.rt[*i].vc,
                gpus: self.rt[*i].demand,
                started: self.rt[*i].run_start,
            })
            .collect();
        let waiting: Vec<WaitingJob> = self
            .waiting
            .iter()
            .map(|(_, i)| WaitingJob {
                job: JobId(*i as u32),
                vc: self.rt[*i].vc,
                gpus: self.rt[*i].demand,
            })
            .collect();
        let usage: Vec<u32> = (0..self.quotas.len()).map(|v| self.state.vc_usage(VcId(v as u16))).collect();
        let victims = maybe_preempt(
            self.state.total_used(),
            self.w.topo.total_gpus(),
            self.w.sched.preempt_threshold,
            &usage,
            &self.quotas,
            &running,
            &waiting,
        );
        for job in &victims {
            let i = job.0 as usize;
            let rtf = self.q.now() - self.rt[i].run_start;
            let rec = self.record(i, FailureReason::JobPreempted, rtf.max(0.0));
            self.failures.push(rec);
            self.end_segment(i, Keep::Checkpoint);
            self.state.release(*job);
            self.rt[i].preemptions += 1;
            self.stats.preemptions += 1;
            self.enqueue(i, true);
        }
        if !victims.is_empty() {
            self.request_pass()?;
        }
        Ok(())
    }

    fn migration_check(&mut self) -> Result<(), SimError> {
        let mut order: Vec<usize> = self.running.iter().copied().collect();
        order.sort_by(|a, b| self.rt[*a].run_start.total_cmp(&self.rt[*b].run_start).then(a.cmp(b)));
        for i in order {
            let job = JobId(i as u32);
            let r = &self.rt[i];
            let min = base_constraint(r.demand, &self.w.topo).max_servers;
            if r.servers <= min || self.q.now() < r.run_start + r.pause {
                continue;
            }
            let current = self.state.slots_of(job).to_vec();
            let Some(slots) = plan_migration(
                job,
                &current,
                r.servers - 1,
                &self.state,
                &self.w.topo,
                self.w.scenario.dedicated_servers,
            ) else {
                continue;
            };
            let old_factor = r.factor;
            self.end_segment(i, Keep::All);
            self.state.release(job);
            self.take(i, &slots);
            let class = placement_class(job, &slots, &self.state);
            let factor = slowdown_or_fallback(class, &self.w.calibration);
            if class.servers_used() as usize >= servers_of(&current).len() || factor > old_factor {
                // not an improvement after all: put it back
                self.state.release(job);
                self.take(i, &current);
                let back = placement_class(job, &current, &self.state);
                self.running.insert(i);
                self.begin_run(i, back, 0.0)?;
                continue;
            }
            self.stats.migrations += 1;
            self.running.insert(i);
            let cost = self.w.sched.migration_cost_min;
            self.begin_run(i, class, cost)?;
        }
        Ok(())
    }

    fn check_invariants(&mut self) {
        let now = self.q.now();
        let mut bad: Vec<String> = Vec::new();
        for i in &self.running {
            let held = self.state.slots_of(JobId(*i as u32)).len() as u32;
            if held != self.rt[*i].demand {
                bad.push(format!("running job {i} holds {held} of {}", self.rt[*i].demand));
            }
        }
        if let Err(e) = self.state.reconcile() {
            bad.push(e);
        }
        for i in self.acquiring.values() {
            let r = &self.rt[*i];
            if now - r.attempt_started > self.w.sched.acquisition_timeout_min + 1e-9 {
                bad.push(format!("job {i} holds a partial allocation past its timeout"));
            }
            if self.own_holds(*i) >= r.demand {
                bad.push(format!("job {i} holds a full gang without running"));
            }
        }
        for (j, slots) in self.state.holders() {
            let r = &self.rt[j.0 as usize];
            let ok = match r.phase {
                Phase::Running => true,
                Phase::Queued(Wait::Acquiring) => true,
                _ => slots.is_empty(),
            };
            if !ok {
                bad.push(format!("job {} holds GPUs while {:?}", j.0, r.phase));
            }
        }
        self.stats.violations += bad.len() as u64;
        for b in bad {
            if self.stats.violation_samples.len() < 20 {
                self.stats.violation_samples.push(format!("t={now}: {b}"));
            }
        }
    }

    fn finish(self) -> SimOutput {
        let jobs = self
            .w
            .jobs
            .iter()
            .zip(self.rt)
            .map(|(job, r)| {
                let status = match r.phase {
                    Phase::Done(s) => s,
                    _ => JobStatus::Unsuccessful,
                };
                JobOutcome {
                    job_id: job.job_id.clone(),
                    vc: job.vc.clone(),
                    user: r.user,
                    gpu_demand: r.demand,
                    bucket: bucket_of(r.demand),
                    submit_time: job.submit_time,
                    queue_enter: r.queue_enter,
                    first_start: r.first_start,
                    end_time: r.end_time,
                    status,
                    queue_delay: r.first_start.zip(r.queue_enter).map(|(s, q)| s - q),
                    ledger: r.ledger.intervals,
                    placed_stage: r.placed_stage,
                    first_class: r.first_class,
                    mean_servers: if r.run_time > 0.0 { r.weighted_servers / r.run_time } else { 0.0 },
                    mean_slowdown: if r.run_time > 0.0 { r.weighted_factor / r.run_time } else { 0.0 },
                    runs: r.run,
                    failures: r.failures,
                    preemptions: r.preemptions,
                    gpu_time: r.gpu_time,
                    exec_minutes: r.exec_minutes,
                    progress: if r.ideal > 0.0 { r.progress / r.ideal } else { 1.0 },
                    screened: r.screened,
                }
            })
            .collect();
        SimOutput {
            jobs,
            failures: self.failures,
            decisions: self.decisions,
            harmless: HarmlessCheck::default(),
            util: self.util,
            cluster: self.cluster,
            stats: self.stats,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cluster::{build_topology, ServerSku, TopologySpec};

    fn world(gpus_per_server: u32, servers: usize, jobs: Vec<Job>) -> World {
        World {
            topo: build_topology(&TopologySpec::uniform(1, servers, ServerSku { gpus: gpus_per_server, cpu_cores: 8, mem_gb: 64 }))
                .unwrap(),
            vcs: vec![VcSpec { name: "vc".into(), quota: gpus_per_server * servers as u32 }],
            jobs,
            sched: SchedulerConfig::default(),
            scenario: Scenario::default(),
            calibration: Calibration::default(),
            profile: FailureProfile::default(),
            seed: 1,
            options: RunOptions {
                inject_failures: false,
                harmless_replays: 0,
                check_invariants: true,
                ..RunOptions::default()
            },
        }
    }

    #[test]
    fn empty_workload() {
        let out = run(&world(1, 1, vec![])).unwrap();
        assert!(out.jobs.is_empty());
        assert_eq!(out.stats.events, 0);
    }

    #[test]
    fn lone_job_starts_at_submit() {
        let out = run(&world(8, 1, vec![Job::new("a", "vc", 5.0, 1, 60.0)])).unwrap();
        let j = &out.jobs[0];
        assert_eq!(j.first_start, Some(5.0));
        assert_eq!(j.queue_delay, Some(0.0));
        assert_eq!(j.end_time, 65.0);
        assert_eq!(j.status, JobStatus::Passed);
        assert!(j.ledger.is_empty());
    }

    #[test]
    fn second_job_waits_for_first() {
        let out = run(&world(1, 1, vec![Job::new("a", "vc", 0.0, 1, 10.0), Job::new("b", "vc", 0.0, 1, 5.0)])).unwrap();
        assert_eq!(out.jobs[1].first_start, Some(out.jobs[0].end_time));
        assert_eq!(out.jobs[1].end_time, 15.0);
        let l = &out.jobs[1].ledger;
        assert_eq!(l.iter().map(|i| i.end - i.start).sum::<f64>(), 10.0);
        assert_eq!(out.stats.violations, 0);
    }

    #[test]
    fn unknown_vc_rejected() {
        let w = world(1, 1, vec![Job::new("a", "nope", 0.0, 1, 1.0)]);
        assert_eq!(run(&w).unwrap_err(), SimError::Sched(SchedError::UnknownVc("nope".into())));
    }

    #[test]
    fn killed_job_stops_at_kill_time() {
        let mut j = Job::new("a", "vc", 0.0, 2, 100.0);
        j.kill_time = Some(7.0);
        let out = run(&world(2, 1, vec![j])).unwrap();
        assert_eq!(out.jobs[0].status, JobStatus::Killed);
        assert_eq!(out.jobs[0].end_time, 7.0);
        assert_eq!(out.jobs[0].gpu_time, 14.0);
    }

    #[test]
    fn unsuccessful_replay_exhausts_retries() {
        let mut j = Job::new("a", "vc", 0.0, 1, 1e6);
        j.status = Some(JobStatus::Unsuccessful);
        j.max_retries = Some(2);
        let mut w = world(1, 1, vec![j]);
        w.options.inject_failures = true;
        let out = run(&w).unwrap();
        assert_eq!(out.jobs[0].status, JobStatus::Unsuccessful);
        assert_eq!(out.jobs[0].runs, 3);
        assert_eq!(out.failures.len(), 3);
    }

    #[test]
    fn two_server_job_spans_two_servers() {
        let out = run(&world(8, 2, vec![Job::new("a", "vc", 0.0, 16, 160.0)])).unwrap();
        assert_eq!(out.jobs[0].first_class, Some(PlacementClass::DiffServer));
        let f = 114.8 / 98.0;
        assert!((out.jobs[0].end_time - 10.0 * f).abs() < 1e-9);
    }
}
