// SPDX-License-Identifier: Apache-2.0

//! Execution model: placement class, throughput slowdown, per-minute GPU
//! utilization, and loss-curve convergence.

use std::collections::BTreeSet;
use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Continuous, ContinuousCDF, Normal};
use thiserror::Error;

use crate::cluster::{AllocationState, JobId, Slot};
use crate::workload::{std_normal, JobStatus};

#[derive(Debug, Error, PartialEq)]
pub enum ExecError {
    #[error("no calibration entry for placement class {0}")]
    UnknownClass(PlacementClass),
    #[error("loss curve is empty")]
    EmptyCurve,
    #[error("invalid calibration: {0}")]
    Calibration(String),
}

/// Locality/colocation configuration of a running job.
///
/// One server without foreign jobs is `SameServer`; with foreign jobs on it,
/// `IntraServer`. Two servers: `DiffServer` when dedicated, `InterServer`
/// when any of them is shared. Three or more servers are `Spread`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum PlacementClass {
    SameServer,
    DiffServer,
    IntraServer,
    InterServer,
    Spread { servers: u32, colocated: bool },
}

impl PlacementClass {
    pub fn from_shape(servers: u32, colocated: bool) -> Self {
        match (servers, colocated) {
            (0 | 1, false) => PlacementClass::SameServer,
            (0 | 1, true) => PlacementClass::IntraServer,
            (2, false) => PlacementClass::DiffServer,
            (2, true) => PlacementClass::InterServer,
            (n, c) => PlacementClass::Spread { servers: n, colocated: c },
        }
    }

    pub fn servers_used(self) -> u32 {
        match self {
            PlacementClass::SameServer | PlacementClass::IntraServer => 1,
            PlacementClass::DiffServer | PlacementClass::InterServer => 2,
            PlacementClass::Spread { servers, .. } => servers,
        }
    }

    pub fn colocated(self) -> bool {
        match self {
            PlacementClass::SameServer | PlacementClass::DiffServer => false,
            PlacementClass::IntraServer | PlacementClass::InterServer => true,
            PlacementClass::Spread { colocated, .. } => colocated,
        }
    }
}

impl fmt::Display for PlacementClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PlacementClass::SameServer => f.write_str("SameServer"),
            PlacementClass::DiffServer => f.write_str("DiffServer"),
            PlacementClass::IntraServer => f.write_str("IntraServer"),
            PlacementClass::InterServer => f.write_str("InterServer"),
            PlacementClass::Spread { servers, colocated } => {
                write!(f, "Spread{servers}{}", if *colocated { "+colocated" } else { "" })
            }
        }
    }
}

pub fn placement_class(job: JobId, slots: &[Slot], state: &AllocationState) -> PlacementClass {
    let servers: BTreeSet<_> = slots.iter().map(|s| s.server).collect();
    let colocated = servers.iter().any(|s| state.has_foreign(*s, job));
    PlacementClass::from_shape(servers.len() as u32, colocated)
}

/// Relative training throughput per placement class (images/s of the
/// reference model). Missing entries fall back to the spread anchors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThroughputTable {
    pub same_server: f64,
    pub diff_server: Option<f64>,
    pub intra_server: Option<f64>,
    pub inter_server: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassUtilization {
    pub same_server: f64,
    pub diff_server: f64,
    pub intra_server: f64,
    pub inter_server: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtilizationTable {
    /// Standard deviation of per-minute samples, percentage points.
    pub sigma: f64,
    /// (gpu demand, mean utilization %) anchors.
    pub by_size: Vec<(u32, f64)>,
    /// (servers used, mean utilization %) anchors for large spread jobs.
    pub spread: Vec<(u32, f64)>,
    /// Demand at or above which `spread` applies.
    pub spread_min_demand: u32,
}

/// Synthetic loss curve family: exponential decay to a floor, optional
/// multiplicative noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossCurveShape {
    pub epochs_min: u32,
    pub epochs_max: u32,
    pub floor_min: f64,
    pub floor_max: f64,
    /// Initial loss is `floor * (1 + initial_gap)`.
    pub initial_gap: f64,
    /// Decay rate per full run is log-normal: exp(N(ln rate_median, rate_sigma)).
    pub rate_median: f64,
    pub rate_sigma: f64,
    pub noisy_fraction: f64,
    pub noise_sigma: f64,
}

impl LossCurveShape {
    pub fn sample<R: Rng>(&self, rng: &mut R) -> Vec<f64> {
        let epochs = rng.random_range(self.epochs_min.max(1)..=self.epochs_max.max(self.epochs_min.max(1)));
        let floor = self.floor_min + (self.floor_max - self.floor_min) * rng.random::<f64>();
        let rate = (self.rate_median.ln() + self.rate_sigma * std_normal(rng)).exp();
        let noisy = rng.random::<f64>() < self.noisy_fraction;
        (0..epochs)
            .map(|e| {
                let x = (e + 1) as f64 / epochs as f64;
                let clean = floor * (1.0 + self.initial_gap * (-rate * x).exp());
                if noisy {
                    clean * (1.0 + self.noise_sigma * std_normal(rng)).max(0.5)
                } else {
                    clean
                }
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub throughput: ThroughputTable,
    /// Reference-model utilization per class. Kept separate from the fleet
    /// tables; not used for sampling.
    pub class_utilization: ClassUtilization,
    pub utilization: UtilizationTable,
    pub loss_curve: LossCurveShape,
}

pub const DEFAULT_CALIBRATION: &str = include_str!("../data/calibration.toml");

impl Default for Calibration {
    fn default() -> Self {
        Calibration::from_toml(DEFAULT_CALIBRATION).expect("shipped calibration parses")
    }
}

fn interp_log2(anchors: &[(u32, f64)], x: u32, extrapolate_up: bool) -> f64 {
    debug_assert!(!anchors.is_empty());
    let lx = (x.max(1) as f64).log2();
    let pts: Vec<(f64, f64)> = anchors.iter().map(|(k, v)| ((*k as f64).log2(), *v)).collect();
    if pts.len() == 1 || lx <= pts[0].0 {
        return pts[0].1;
    }
    for w in pts.windows(2) {
        let ((x0, y0), (x1, y1)) = (w[0], w[1]);
        if lx <= x1 {
            return y0 + (y1 - y0) * (lx - x0) / (x1 - x0);
        }
    }
    let ((x0, y0), (x1, y1)) = (pts[pts.len() - 2], pts[pts.len() - 1]);
    if extrapolate_up {
        y1 + (y1 - y0) * (lx - x1) / (x1 - x0)
    } else {
        y1
    }
}

impl Calibration {
    pub fn from_toml(text: &str) -> Result<Self, ExecError> {
        let cal: Calibration = toml::from_str(text).map_err(|e| ExecError::Calibration(e.to_string()))?;
        cal.validate()?;
        Ok(cal)
    }

    pub fn validate(&self) -> Result<(), ExecError> {
        let bad = |m: &str| Err(ExecError::Calibration(m.to_string()));
        let t = &self.throughput;
        if !(t.same_server > 0.0) {
            return bad("throughput.same_server must be positive");
        }
        for v in [t.diff_server, t.intra_server, t.inter_server].into_iter().flatten() {
            if !(v > 0.0 && v < t.same_server) {
                return bad("class throughput must be positive and below same_server");
            }
        }
        let u = &self.utilization;
        if u.by_size.is_empty() || u.spread.is_empty() {
            return bad("utilization anchors must be non-empty");
        }
        for (k, v) in u.by_size.iter().chain(&u.spread) {
            if *k == 0 || !(0.0..=100.0).contains(v) {
                return bad("utilization anchors must be percentages keyed by positive integers");
            }
        }
        if u.by_size.windows(2).any(|w| w[0].0 >= w[1].0) || u.spread.windows(2).any(|w| w[0].0 >= w[1].0) {
            return bad("utilization anchors must be sorted by key");
        }
        if u.spread.windows(2).any(|w| w[1].1 > w[0].1) {
            return bad("spread utilization must be non-increasing in servers used");
        }
        if !(u.sigma > 0.0) {
            return bad("utilization.sigma must be positive");
        }
        Ok(())
    }

    fn class_throughput(&self, class: PlacementClass) -> Option<f64> {
        let t = &self.throughput;
        match class {
            PlacementClass::SameServer => Some(t.same_server),
            PlacementClass::DiffServer => t.diff_server,
            PlacementClass::IntraServer => t.intra_server,
            PlacementClass::InterServer => t.inter_server,
            PlacementClass::Spread { .. } => None,
        }
    }

    /// Slowdown of a placement spread over `servers` servers. Anchored at
    /// two servers on the DiffServer (dedicated) or InterServer (shared)
    /// factor and scaled by the spread-utilization ratio.
    pub fn spread_slowdown(&self, servers: u32, colocated: bool) -> f64 {
        let base = if colocated {
            self.throughput.inter_server.or(self.throughput.diff_server)
        } else {
            self.throughput.diff_server
        }
        .map(|x| self.throughput.same_server / x)
        .unwrap_or(1.0);
        let spread = &self.utilization.spread;
        let u2 = interp_log2(spread, 2, false);
        let un = interp_log2(spread, servers.max(2), true).max(1e-6);
        let f = base * u2 / un;
        // an extrapolated anchor set must not dip below the two-server factor
        f.max(base)
    }

    pub fn utilization_mean(&self, demand: u32, servers: u32) -> f64 {
        let u = &self.utilization;
        let m = if demand >= u.spread_min_demand && servers >= 2 {
            interp_log2(&u.spread, servers, false)
        } else {
            interp_log2(&u.by_size, demand, false)
        };
        m.clamp(0.0, 100.0)
    }
}

/// Factor by which a placement stretches ideal run time; `>= 1`.
pub fn slowdown_factor(class: PlacementClass, cal: &Calibration) -> Result<f64, ExecError> {
    match class {
        PlacementClass::Spread { servers, colocated } => Ok(cal.spread_slowdown(servers, colocated)),
        c => cal
            .class_throughput(c)
            .map(|t| cal.throughput.same_server / t)
            .ok_or(ExecError::UnknownClass(c)),
    }
}

/// Like [`slowdown_factor`], falling back to the nearest spread entry.
pub fn slowdown_or_fallback(class: PlacementClass, cal: &Calibration) -> f64 {
    slowdown_factor(class, cal).unwrap_or_else(|e| {
        log::warn!("{e}; using spread fallback");
        cal.spread_slowdown(class.servers_used().max(2), class.colocated())
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UtilizationSample {
    pub job: JobId,
    pub minute: u64,
    /// SM-active fraction of the minute, an upper bound on SM occupancy.
    pub percent: f64,
}

/// Location of a normal whose truncation to `[0, 100]` has mean `target`.
pub fn truncated_location(target: f64, sigma: f64) -> f64 {
    let std = Normal::new(0.0, 1.0).expect("unit normal");
    let mean_of = |mu: f64| {
        let a = (0.0 - mu) / sigma;
        let b = (100.0 - mu) / sigma;
        let z = (std.cdf(b) - std.cdf(a)).max(1e-300);
        mu + sigma * (std.pdf(a) - std.pdf(b)) / z
    };
    let target = target.clamp(5.0, 95.0);
    let (mut lo, mut hi) = (-4.0 * sigma, 100.0 + 4.0 * sigma);
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if mean_of(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// One per-minute sample from a normal at `location` truncated to
/// `[0, 100]` (rejection, then clamp as a last resort).
pub fn sample_utilization<R: Rng>(location: f64, sigma: f64, rng: &mut R) -> f64 {
    for _ in 0..64 {
        let x = location + sigma * std_normal(rng);
        if (0.0..=100.0).contains(&x) {
            return x;
        }
    }
    location.clamp(0.0, 100.0)
}

/// Per-minute utilization for `minutes` minutes of a job's run.
pub fn utilization_trace<R: Rng>(
    job: JobId,
    demand: u32,
    class: PlacementClass,
    start_minute: u64,
    minutes: u64,
    cal: &Calibration,
    rng: &mut R,
) -> Vec<UtilizationSample> {
    let mean = cal.utilization_mean(demand, class.servers_used());
    let loc = truncated_location(mean, cal.utilization.sigma);
    (0..minutes)
        .map(|m| UtilizationSample {
            job,
            minute: start_minute + m,
            percent: sample_utilization(loc, cal.utilization.sigma, rng),
        })
        .collect()
}

/// Fraction of epochs needed to first come within `delta` (relative) of the
/// curve's minimum.
pub fn epochs_to_threshold(curve: &[f64], delta: f64) -> Result<f64, ExecError> {
    if curve.is_empty() {
        return Err(ExecError::EmptyCurve);
    }
    let min = curve.iter().copied().fold(f64::INFINITY, f64::min);
    let threshold = min + delta.max(0.0) * min.abs();
    let idx = curve
        .iter()
        .position(|v| *v <= threshold)
        .expect("minimum is always within threshold");
    Ok((idx + 1) as f64 / curve.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceInput<'a> {
    pub status: JobStatus,
    pub curve: &'a [f64],
    /// GPU-minutes the job consumed.
    pub gpu_time: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceGroup {
    pub jobs: usize,
    /// Per delta: sorted per-job fractions of epochs.
    pub fractions: Vec<Vec<f64>>,
    pub gpu_time: f64,
    /// Per delta: GPU-minutes spent after the threshold epoch.
    pub gpu_time_past: Vec<f64>,
    /// Per delta: mean over jobs of (1 - fraction).
    pub mean_fraction_past: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceReport {
    pub deltas: Vec<f64>,
    pub passed: ConvergenceGroup,
    pub killed: ConvergenceGroup,
}

pub fn convergence_report(jobs: &[ConvergenceInput<'_>], deltas: &[f64]) -> ConvergenceReport {
    let mut passed = ConvergenceGroup::default();
    let mut killed = ConvergenceGroup::default();
    for g in [&mut passed, &mut killed] {
        g.fractions = vec![Vec::new(); deltas.len()];
        g.gpu_time_past = vec![0.0; deltas.len()];
        g.mean_fraction_past = vec![0.0; deltas.len()];
    }
    for job in jobs {
        let g = match job.status {
            JobStatus::Passed => &mut passed,
            JobStatus::Killed => &mut killed,
            JobStatus::Unsuccessful => continue,
        };
        let Ok(_) = epochs_to_threshold(job.curve, 0.0) else { continue };
        g.jobs += 1;
        g.gpu_time += job.gpu_time;
        for (k, d) in deltas.iter().enumerate() {
            let f = epochs_to_threshold(job.curve, *d).expect("non-empty");
            g.fractions[k].push(f);
            g.gpu_time_past[k] += (1.0 - f) * job.gpu_time;
            g.mean_fraction_past[k] += 1.0 - f;
        }
    }
    for g in [&mut passed, &mut killed] {
        for k in 0..deltas.len() {
            g.fractions[k].sort_by(f64::total_cmp);
            if g.jobs > 0 {
                g.mean_fraction_past[k] /= g.jobs as f64;
            }
        }
    }
    ConvergenceReport {
        deltas: deltas.to_vec(),
        passed,
        killed,
    }
}

/// Loss curve truncated to the epochs a partially executed job completed.
pub fn executed_prefix(curve: &[f64], progress: f64) -> &[f64] {
    let n = ((curve.len() as f64) * progress.clamp(0.0, 1.0)).ceil() as usize;
    &curve[..n.clamp(1, curve.len().max(1)).min(curve.len())]
}
