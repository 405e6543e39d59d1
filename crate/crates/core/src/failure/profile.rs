// SPDX-License-Identifier: Apache-2.0

use std::fmt;

use rand::distr::{weighted::WeightedIndex, Distribution};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_PROFILE: &str = include_str!("../../data/failure_profile.toml");

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Category {
    IF,
    AE,
    U,
}

/// Subset of {IF, AE, U}.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash)]
pub struct CategorySet(u8);

impl CategorySet {
    pub const fn of(cats: &[Category]) -> Self {
        let mut bits = 0u8;
        let mut i = 0;
        while i < cats.len() {
            bits |= 1 << cats[i] as u8;
            i += 1;
        }
        CategorySet(bits)
    }

    pub fn contains(self, c: Category) -> bool {
        self.0 & (1 << c as u8) != 0
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn to_vec(self) -> Vec<Category> {
        [Category::IF, Category::AE, Category::U]
            .into_iter()
            .filter(|c| self.contains(*c))
            .collect()
    }
}

impl fmt::Display for CategorySet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<String> = self.to_vec().iter().map(|c| format!("{c:?}")).collect();
        f.write_str(&names.join("+"))
    }
}

impl Serialize for CategorySet {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        self.to_vec().serialize(s)
    }
}

impl<'de> Deserialize<'de> for CategorySet {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let v = Vec::<Category>::deserialize(d)?;
        Ok(CategorySet::of(&v))
    }
}

macro_rules! reasons {
    ($($variant:ident => $label:literal, [$($cat:ident),*];)*) => {
        #[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        #[serde(try_from = "String", into = "&'static str")]
        pub enum FailureReason { $($variant,)* }

        impl FailureReason {
            pub const ALL: &'static [FailureReason] = &[$(FailureReason::$variant,)*];

            pub fn label(self) -> &'static str {
                match self { $(FailureReason::$variant => $label,)* }
            }

            pub fn categories(self) -> CategorySet {
                match self { $(FailureReason::$variant => CategorySet::of(&[$(Category::$cat),*]),)* }
            }

            pub fn from_label(s: &str) -> Option<Self> {
                match s { $($label => Some(FailureReason::$variant),)* _ => None }
            }
        }
    };
}

reasons! {
    CpuOutOfMemory => "CPU out of memory", [AE, U];
    IncorrectInputs => "Incorrect inputs", [IF, U];
    SemanticError => "Semantic error", [IF, U];
    CoreDump => "Core dump", [AE, U];
    InvalidMemAccess => "Invalid mem access", [U];
    ModelCkptError => "Model ckpt error", [IF];
    CudaFailure => "CUDA failure", [AE];
    SyntaxError => "Syntax error", [IF, U];
    TracebackFromCrash => "Traceback from crash", [IF, AE, U];
    MpiError => "MPI error", [IF];
    GpuOutOfMemory => "GPU out of memory", [AE];
    MpiRuntimeFailure => "MPI runtime failure", [IF];
    PermissionError => "Permission error", [U];
    ImportError => "Import error", [IF, U];
    JobPreempted => "Job preempted", [IF];
    CudaInitFailed => "CUDA init failed", [AE];
    ModelDiverged => "Model diverged", [U];
    CudaVerMismatch => "CUDA ver. mismatch", [AE];
    GpuEccError => "GPU ECC error", [AE];
    OutputNodeError => "Output node error", [U];
    CannotLoadLibs => "Cannot load libs", [AE];
    NoSignature => "No signature", [];
}

impl FailureReason {
    /// The reasons a signature can identify (everything but `NoSignature`).
    pub fn classified() -> impl Iterator<Item = FailureReason> {
        Self::ALL.iter().copied().filter(|r| *r != FailureReason::NoSignature)
    }
}

impl fmt::Display for FailureReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl TryFrom<String> for FailureReason {
    type Error = String;
    fn try_from(s: String) -> Result<Self, String> {
        FailureReason::from_label(&s).ok_or_else(|| format!("unknown failure reason {s:?}"))
    }
}

impl From<FailureReason> for &'static str {
    fn from(r: FailureReason) -> Self {
        r.label()
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum ProfileError {
    #[error("failure profile: {0}")]
    Parse(String),
    #[error("failure profile: reason {reason}: {message}")]
    Invalid { reason: String, message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReasonProfile {
    #[serde(rename = "name")]
    pub reason: FailureReason,
    pub categories: CategorySet,
    pub trials: u64,
    pub jobs: u64,
    pub users: u64,
    /// 50th, 90th and 95th percentile of runtime to failure, minutes.
    pub rtf: [f64; 3],
    /// Occurrences by demand: 1 GPU, 2-4, more than 4.
    pub demand: [u64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureParams {
    pub fault_prob: [f64; 3],
    pub recurrence: f64,
    pub transient_prob: f64,
    pub stickiness: f64,
    pub modes_per_user: usize,
    pub deterministic: Vec<FailureReason>,
    pub screenable: Vec<FailureReason>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureProfile {
    pub params: FailureParams,
    #[serde(rename = "reason")]
    pub reasons: Vec<ReasonProfile>,
}

impl Default for FailureProfile {
    fn default() -> Self {
        FailureProfile::from_toml(DEFAULT_PROFILE).expect("shipped profile parses")
    }
}

/// Index into the three failure-demand columns.
pub fn demand_class(gpu_demand: u32) -> usize {
    match gpu_demand {
        0 | 1 => 0,
        2..=4 => 1,
        _ => 2,
    }
}

/// Inverse CDF through the (50, 90, 95) percentile anchors.
///
/// Log-linear between anchors; the 50-90 segment is extended below the
/// median; above the 95th the tail is exponential with density matched at
/// the anchor.
pub fn rtf_quantile(anchors: [f64; 3], u: f64) -> f64 {
    let [p50, p90, p95] = anchors.map(|x| x.max(1e-6));
    let (l50, l90, l95) = (p50.ln(), p90.ln(), p95.ln());
    let u = u.clamp(0.0, 1.0 - 1e-12);
    if u <= 0.9 {
        (l50 + (u - 0.5) / 0.4 * (l90 - l50)).exp()
    } else if u <= 0.95 {
        (l90 + (u - 0.9) / 0.05 * (l95 - l90)).exp()
    } else {
        let theta = p95 * (l95 - l90);
        p95 + theta * -((1.0 - u) / 0.05).ln()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RetryPolicy {
    Static,
    Adaptive,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RetryDecision {
    Retry { backoff: f64 },
    MarkUnsuccessful,
}

/// Decides what happens after attempt `attempt_index` (0-based) failed.
pub fn apply_retry_policy(
    attempt_index: u32,
    max_retries: u32,
    reason: FailureReason,
    policy: RetryPolicy,
    profile: &FailureProfile,
    backoff: f64,
) -> RetryDecision {
    if policy == RetryPolicy::Adaptive && profile.is_deterministic(reason) {
        return RetryDecision::MarkUnsuccessful;
    }
    if attempt_index >= max_retries {
        RetryDecision::MarkUnsuccessful
    } else {
        RetryDecision::Retry { backoff }
    }
}

impl FailureProfile {
    pub fn from_toml(text: &str) -> Result<Self, ProfileError> {
        let p: FailureProfile = toml::from_str(text).map_err(|e| ProfileError::Parse(e.to_string()))?;
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), ProfileError> {
        let invalid = |r: FailureReason, m: &str| {
            Err(ProfileError::Invalid {
                reason: r.label().to_string(),
                message: m.to_string(),
            })
        };
        for rp in &self.reasons {
            if rp.categories != rp.reason.categories() {
                return invalid(rp.reason, "categories differ from the taxonomy");
            }
            if !rp.rtf.iter().all(|x| x.is_finite() && *x >= 0.0) || rp.rtf[0] > rp.rtf[1] || rp.rtf[1] > rp.rtf[2] {
                return invalid(rp.reason, "rtf anchors must be finite and non-decreasing");
            }
        }
        for r in FailureReason::ALL {
            if self.reasons.iter().filter(|p| p.reason == *r).count() > 1 {
                return invalid(*r, "listed twice");
            }
        }
        let p = &self.params;
        let prob = |x: f64| (0.0..=1.0).contains(&x);
        if !p.fault_prob.iter().all(|x| prob(*x)) || !prob(p.recurrence) || !prob(p.transient_prob) || !prob(p.stickiness) {
            return Err(ProfileError::Parse("params: probabilities must lie in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn get(&self, reason: FailureReason) -> Option<&ReasonProfile> {
        self.reasons.iter().find(|r| r.reason == reason)
    }

    pub fn is_deterministic(&self, reason: FailureReason) -> bool {
        self.params.deterministic.contains(&reason)
    }

    pub fn is_screenable(&self, reason: FailureReason) -> bool {
        self.params.screenable.contains(&reason)
    }

    /// Reasons that can be injected directly. Preemption is produced by the
    /// scheduler, not sampled.
    fn injectable(&self) -> impl Iterator<Item = &ReasonProfile> {
        self.reasons.iter().filter(|r| r.reason != FailureReason::JobPreempted)
    }

    pub fn sample_reason<R: Rng>(&self, gpu_demand: u32, rng: &mut R) -> Option<FailureReason> {
        let k = demand_class(gpu_demand);
        let rows: Vec<&ReasonProfile> = self.injectable().collect();
        let w = WeightedIndex::new(rows.iter().map(|r| r.demand[k] as f64)).ok()?;
        Some(rows[w.sample(rng)].reason)
    }

    pub fn sample_rtf<R: Rng>(&self, reason: FailureReason, rng: &mut R) -> f64 {
        let anchors = self.get(reason).map(|r| r.rtf).unwrap_or([1.0, 1.0, 1.0]);
        rtf_quantile(anchors, rng.random())
    }

    /// One independent failure draw with probability `p`.
    pub fn sample_failure<R: Rng>(&self, gpu_demand: u32, p: f64, rng: &mut R) -> Option<(FailureReason, f64)> {
        if p <= 0.0 || rng.random::<f64>() >= p {
            return None;
        }
        let reason = self.sample_reason(gpu_demand, rng)?;
        Some((reason, self.sample_rtf(reason, rng)))
    }

    /// Sticky failure modes of one user, drawn by occurrence count.
    pub fn user_modes<R: Rng>(&self, rng: &mut R) -> Vec<FailureReason> {
        let rows: Vec<&ReasonProfile> = self.injectable().collect();
        let Ok(w) = WeightedIndex::new(rows.iter().map(|r| r.trials as f64)) else {
            return Vec::new();
        };
        (0..self.params.modes_per_user).map(|_| rows[w.sample(rng)].reason).collect()
    }

    /// The persistent fault a job carries, if any.
    pub fn job_fault<R: Rng>(&self, gpu_demand: u32, modes: &[FailureReason], rng: &mut R) -> Option<FailureReason> {
        if rng.random::<f64>() >= self.params.fault_prob[demand_class(gpu_demand)] {
            return None;
        }
        if !modes.is_empty() && rng.random::<f64>() < self.params.stickiness {
            return Some(modes[rng.random_range(0..modes.len())]);
        }
        self.sample_reason(gpu_demand, rng)
    }

    /// Reason that fires on attempt `attempt` of a job carrying `fault`.
    pub fn attempt_failure<R: Rng>(
        &self,
        fault: Option<FailureReason>,
        attempt: u32,
        gpu_demand: u32,
        rng: &mut R,
    ) -> Option<FailureReason> {
        if let Some(r) = fault {
            if attempt == 0 || self.is_deterministic(r) || rng.random::<f64>() < self.params.recurrence {
                return Some(r);
            }
        }
        let p = self.params.transient_prob;
        if p <= 0.0 || rng.random::<f64>() >= p {
            return None;
        }
        // a clean job does not suddenly develop a deterministic bug
        let k = demand_class(gpu_demand);
        let rows: Vec<&ReasonProfile> = self.injectable().filter(|r| !self.is_deterministic(r.reason)).collect();
        let w = WeightedIndex::new(rows.iter().map(|r| r.demand[k] as f64)).ok()?;
        Some(rows[w.sample(rng)].reason)
    }
}
