// SPDX-License-Identifier: Apache-2.0

//! Failure taxonomy, injection, retry policy and log classification.

mod classify;
mod profile;
mod stats;

pub use classify::{classify_log, Classification, PatternKind, RuleError, RuleSet, SignatureRule, DEFAULT_RULES, LABELED_CORPUS};
pub use profile::{
    demand_class,
    apply_retry_policy, rtf_quantile, Category, CategorySet, FailureParams, FailureProfile, FailureReason, ProfileError,
    ReasonProfile, RetryDecision, RetryPolicy, DEFAULT_PROFILE,
};
pub use stats::{failure_stats, FailureRecord, FailureStats, ReasonStats};
