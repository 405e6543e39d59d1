// SPDX-License-Identifier: Apache-2.0

//! Minute-stepped reference scheduler and micro-instance enumeration.
//!
//! The reference walks integer minutes and re-applies the queueing rules
//! directly: arrivals, finishes, timeouts and backoff expiries at each
//! minute, then one scheduling pass if anything happened. It shares only the
//! placement primitive (`try_acquire`) and the allocation table with the
//! event-driven engine.

#![allow(dead_code)]

use gpusim::cluster::{build_topology, AllocationState, ClusterTopology, JobId, ServerSku, TopologySpec, VcId};
use gpusim::exec::Calibration;
use gpusim::failure::FailureProfile;
use gpusim::scheduler::{base_constraint, relax, try_acquire, AcquireOutcome, LocalityConstraint, SchedulerConfig, Scenario};
use gpusim::sim::{run, RunOptions, VcSpec, World};
use gpusim::workload::{Job, JobStatus};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const TIMEOUT: i64 = 3;
pub const BACKOFF: i64 = 2;
pub const RELAX_AFTER: u32 = 3;
const THRESHOLD: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MicroJob {
    pub vc: usize,
    pub demand: u32,
    pub submit: i64,
    pub dur: i64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Shape {
    pub racks: usize,
    pub servers_per_rack: usize,
    pub gpus: u32,
}

impl Shape {
    pub fn total(&self) -> u32 {
        (self.racks * self.servers_per_rack) as u32 * self.gpus
    }

    pub fn topology(&self) -> ClusterTopology {
        build_topology(&TopologySpec::uniform(
            self.racks,
            self.servers_per_rack,
            ServerSku { gpus: self.gpus, cpu_cores: 8, mem_gb: 64 },
        ))
        .unwrap()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub shape: Shape,
    pub quotas: Vec<u32>,
    pub jobs: Vec<MicroJob>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Ph {
    Pending,
    Idle,
    Acquiring { deadline: i64, seq: u64 },
    Backoff { until: i64 },
    Running { end: i64 },
    Done,
}

struct RJob {
    spec: MicroJob,
    ph: Ph,
    key: i64,
    retries: u32,
    constraint: LocalityConstraint,
    start: Option<i64>,
}

struct Reference<'a> {
    topo: &'a ClusterTopology,
    quotas: &'a [u32],
    state: AllocationState,
    jobs: Vec<RJob>,
    tail: Vec<i64>,
    seq: u64,
}

impl Reference<'_> {
    fn queued(&self, i: usize) -> bool {
        matches!(self.jobs[i].ph, Ph::Idle | Ph::Acquiring { .. } | Ph::Backoff { .. })
    }

    fn members(&self, vc: usize) -> Vec<usize> {
        let mut v: Vec<usize> = (0..self.jobs.len())
            .filter(|i| self.jobs[*i].spec.vc == vc && self.queued(*i))
            .collect();
        v.sort_by_key(|i| self.jobs[*i].key);
        v
    }

    fn vc_order(&self) -> Vec<usize> {
        let ratio = |v: usize| {
            if self.quotas[v] == 0 {
                f64::INFINITY
            } else {
                self.state.vc_usage(VcId(v as u16)) as f64 / self.quotas[v] as f64
            }
        };
        let mut v: Vec<usize> = (0..self.quotas.len()).collect();
        v.sort_by(|a, b| ratio(*a).total_cmp(&ratio(*b)).then(a.cmp(b)));
        v
    }

    fn holds(&self, i: usize) -> u32 {
        self.state.slots_of(JobId(i as u32)).len() as u32
    }

    fn within_quota(&self, i: usize) -> bool {
        let j = &self.jobs[i];
        self.state.vc_usage(VcId(j.spec.vc as u16)) - self.holds(i) + j.spec.demand <= self.quotas[j.spec.vc]
    }

    fn acquire(&self, i: usize, c: &LocalityConstraint) -> AcquireOutcome {
        let job = JobId(i as u32);
        try_acquire(job, self.jobs[i].spec.demand, self.state.slots_of(job), c, &self.state, self.topo, false)
    }

    fn take(&mut self, i: usize, slots: &[gpusim::cluster::Slot]) {
        let vc = VcId(self.jobs[i].spec.vc as u16);
        self.state.allocate(JobId(i as u32), vc, slots).unwrap();
    }

    fn start(&mut self, i: usize, t: i64) {
        let j = &mut self.jobs[i];
        j.ph = Ph::Running { end: t + j.spec.dur };
        j.start = Some(t);
    }

    fn current(&self, i: usize) -> LocalityConstraint {
        let j = &self.jobs[i];
        relax(
            base_constraint(j.spec.demand, self.topo),
            j.retries,
            RELAX_AFTER,
            self.topo.server_count() as u32,
        )
    }

    fn pass(&mut self, t: i64) {
        loop {
            let mut progress = false;
            let mut acq: Vec<(u64, usize)> = (0..self.jobs.len())
                .filter_map(|i| match self.jobs[i].ph {
                    Ph::Acquiring { seq, .. } => Some((seq, i)),
                    _ => None,
                })
                .collect();
            acq.sort();
            for (_, i) in acq {
                let c = self.jobs[i].constraint;
                match self.acquire(i, &c) {
                    AcquireOutcome::Complete(s) => {
                        self.take(i, &s);
                        self.start(i, t);
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
                    let Some(&i) = self.members(vc).first() else { continue };
                    if self.jobs[i].ph != Ph::Idle || !self.within_quota(i) {
                        continue;
                    }
                    let c = self.current(i);
                    self.seq += 1;
                    self.jobs[i].constraint = c;
                    progress = true;
                    match self.acquire(i, &c) {
                        AcquireOutcome::Complete(s) => {
                            self.take(i, &s);
                            self.start(i, t);
                            started = true;
                        }
                        o => {
                            if let AcquireOutcome::Partial(s) = o {
                                self.take(i, &s);
                            }
                            self.jobs[i].ph = Ph::Acquiring { deadline: t + TIMEOUT, seq: self.seq };
                        }
                    }
                }
                if !started {
                    break;
                }
            }
            let total = self.topo.total_gpus();
            for vc in self.vc_order() {
                for i in self.members(vc) {
                    if self.jobs[i].ph != Ph::Idle {
                        continue;
                    }
                    let d = self.jobs[i].spec.demand;
                    if d > self.state.total_free() {
                        continue;
                    }
                    let ok = self.within_quota(i) || ((self.state.total_used() + d) as f64) < THRESHOLD * total as f64;
                    if !ok {
                        continue;
                    }
                    let c = self.current(i);
                    if let AcquireOutcome::Complete(s) = self.acquire(i, &c) {
                        self.jobs[i].constraint = c;
                        self.take(i, &s);
                        self.start(i, t);
                        progress = true;
                    }
                }
            }
            if !progress {
                break;
            }
        }
    }
}

/// Start and end minute of each job, or `None` if the reference gives up.
pub fn reference(inst: &Instance) -> Option<Vec<(i64, i64)>> {
    let topo = inst.shape.topology();
    let mut r = Reference {
        topo: &topo,
        quotas: &inst.quotas,
        state: AllocationState::new(&topo, inst.quotas.len()),
        jobs: inst
            .jobs
            .iter()
            .map(|j| RJob {
                spec: *j,
                ph: Ph::Pending,
                key: 0,
                retries: 0,
                constraint: base_constraint(j.demand, &topo),
                start: None,
            })
            .collect(),
        tail: vec![0; inst.quotas.len()],
        seq: 0,
    };
    for t in 0..10_000i64 {
        if r.jobs.iter().all(|j| j.ph == Ph::Done) {
            break;
        }
        let mut any = false;
        for i in 0..r.jobs.len() {
            let j = &mut r.jobs[i];
            if j.ph == Ph::Pending && j.spec.submit == t {
                r.tail[j.spec.vc] += 1;
                j.key = r.tail[j.spec.vc];
                j.ph = Ph::Idle;
                j.retries = 0;
                any = true;
            }
        }
        for i in 0..r.jobs.len() {
            match r.jobs[i].ph {
                Ph::Running { end } if end == t => {
                    r.state.release(JobId(i as u32));
                    r.jobs[i].ph = Ph::Done;
                    any = true;
                }
                Ph::Acquiring { deadline, .. } if deadline == t => {
                    r.state.release(JobId(i as u32));
                    r.jobs[i].retries += 1;
                    r.jobs[i].ph = Ph::Backoff { until: t + BACKOFF };
                    any = true;
                }
                Ph::Backoff { until } if until == t => {
                    r.jobs[i].ph = Ph::Idle;
                    any = true;
                }
                _ => {}
            }
        }
        if any {
            r.pass(t);
        }
    }
    r.jobs
        .iter()
        .map(|j| match (j.ph, j.start) {
            (Ph::Done, Some(s)) => Some((s, s + j.spec.dur)),
            _ => None,
        })
        .collect()
}

/// Start and end minute of each job under the event-driven engine.
pub fn engine(inst: &Instance) -> Option<Vec<(i64, i64)>> {
    let vcs: Vec<VcSpec> = inst
        .quotas
        .iter()
        .enumerate()
        .map(|(i, q)| VcSpec { name: format!("vc{i}"), quota: *q })
        .collect();
    let jobs: Vec<Job> = inst
        .jobs
        .iter()
        .enumerate()
        .map(|(i, j)| {
            let mut job = Job::new(format!("j{i}"), format!("vc{}", j.vc), j.submit as f64, j.demand, (j.dur * j.demand as i64) as f64);
            job.status = Some(JobStatus::Passed);
            job
        })
        .collect();
    let world = World {
        topo: inst.shape.topology(),
        vcs,
        jobs,
        sched: SchedulerConfig {
            acquisition_timeout_min: TIMEOUT as f64,
            backoff_min: BACKOFF as f64,
            relax_after: RELAX_AFTER,
            preempt_threshold: THRESHOLD,
            preemption: false,
            ..SchedulerConfig::default()
        },
        scenario: Scenario::default(),
        calibration: Calibration::default(),
        profile: FailureProfile::default(),
        seed: 0,
        options: RunOptions {
            harmless_replays: 0,
            unit_slowdown: true,
            inject_failures: false,
            sample_utilization: false,
            check_invariants: true,
            ..RunOptions::default()
        },
    };
    let out = run(&world).ok()?;
    if out.stats.violations > 0 {
        return None;
    }
    out.jobs
        .iter()
        .map(|j| {
            let s = j.first_start?;
            (s.fract() == 0.0 && j.end_time.fract() == 0.0).then_some((s as i64, j.end_time as i64))
        })
        .collect()
}

pub const SHAPES: [Shape; 5] = [
    Shape { racks: 1, servers_per_rack: 1, gpus: 2 },
    Shape { racks: 1, servers_per_rack: 2, gpus: 2 },
    Shape { racks: 1, servers_per_rack: 3, gpus: 2 },
    Shape { racks: 3, servers_per_rack: 1, gpus: 2 },
    Shape { racks: 1, servers_per_rack: 2, gpus: 4 },
];

fn quota_sets(total: u32) -> Vec<Vec<u32>> {
    vec![vec![total], vec![total.div_ceil(2), total / 2]]
}

/// A job larger than its VC quota never heads a queue attempt, so it cannot
/// climb the relaxation stages and may wait forever.
fn placeable(j: &MicroJob, quotas: &[u32], total: u32) -> bool {
    j.demand <= total && j.demand <= quotas[j.vc]
}

/// Every instance over the small grid with up to `exhaustive` jobs, then
/// `sampled` seeded draws from the wider grid for each size up to six.
pub fn micro_instances(exhaustive: usize, sampled: usize) -> Vec<Instance> {
    let mut out = Vec::new();
    for shape in SHAPES {
        let total = shape.total();
        for quotas in quota_sets(total) {
            let nvc = quotas.len();
            let mut grid = Vec::new();
            for submit in [0, 2] {
                for demand in [1, 2, 3, 4] {
                    for dur in [1, 4] {
                        for vc in 0..nvc {
                            let j = MicroJob { vc, demand, submit, dur };
                            if placeable(&j, &quotas, total) {
                                grid.push(j);
                            }
                        }
                    }
                }
            }
            for n in 1..=exhaustive {
                let mut idx = vec![0usize; n];
                loop {
                    out.push(Instance {
                        shape,
                        quotas: quotas.clone(),
                        jobs: idx.iter().map(|k| grid[*k]).collect(),
                    });
                    let mut p = 0;
                    while p < n {
                        idx[p] += 1;
                        if idx[p] < grid.len() {
                            break;
                        }
                        idx[p] = 0;
                        p += 1;
                    }
                    if p == n {
                        break;
                    }
                }
            }
            let mut rng = ChaCha8Rng::seed_from_u64(total as u64 * 31 + nvc as u64 + shape.racks as u64 * 7);
            for n in (exhaustive + 1)..=6 {
                let mut made = 0;
                while made < sampled {
                    let j = MicroJob {
                        vc: rng.random_range(0..nvc),
                        demand: rng.random_range(1..=total.min(6)),
                        submit: rng.random_range(0..=6),
                        dur: rng.random_range(1..=7),
                    };
                    let jobs: Vec<MicroJob> = std::iter::once(j)
                        .chain((1..n).map(|_| MicroJob {
                            vc: rng.random_range(0..nvc),
                            demand: rng.random_range(1..=total.min(6)),
                            submit: rng.random_range(0..=6),
                            dur: rng.random_range(1..=7),
                        }))
                        .collect();
                    if jobs.iter().all(|j| placeable(j, &quotas, total)) {
                        out.push(Instance { shape, quotas: quotas.clone(), jobs });
                        made += 1;
                    }
                }
            }
        }
    }
    out
}
