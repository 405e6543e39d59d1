// SPDX-License-Identifier: Apache-2.0

use std::collections::BTreeMap;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::profile::{CategorySet, FailureReason};

pub const DEFAULT_RULES: &str = include_str!("../../data/rules.jsonl");
/// JSONL of `{log_id, reason, text}`.
pub const LABELED_CORPUS: &str = include_str!("../../data/labeled_logs.jsonl");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PatternKind {
    Substring,
    Regex,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SignatureRule {
    pub rule_id: String,
    pub priority: i64,
    pub pattern: String,
    pub pattern_kind: PatternKind,
    pub reason: FailureReason,
}

#[derive(Debug, Error, PartialEq)]
pub enum RuleError {
    #[error("rules line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("rules line {line}: bad regex in {rule_id}: {message}")]
    BadRegex { line: usize, rule_id: String, message: String },
    #[error("rules line {line}: priority {priority} already used by {other}")]
    DuplicatePriority { line: usize, priority: i64, other: String },
}

#[derive(Debug)]
enum Matcher {
    Substring(String),
    Regex(Regex),
}

#[derive(Debug)]
struct CompiledRule {
    rule: SignatureRule,
    matcher: Matcher,
}

/// Signature rules sorted by priority (lowest number first).
#[derive(Debug)]
pub struct RuleSet {
    rules: Vec<CompiledRule>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Classification {
    pub reason: FailureReason,
    pub categories: CategorySet,
    pub rule_id: Option<String>,
}

impl RuleSet {
    pub fn parse(text: &str) -> Result<RuleSet, RuleError> {
        let mut rules = Vec::new();
        let mut seen: BTreeMap<i64, String> = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            if raw.trim().is_empty() {
                continue;
            }
            let rule: SignatureRule = serde_json::from_str(raw).map_err(|e| RuleError::Parse {
                line,
                message: e.to_string(),
            })?;
            if let Some(other) = seen.insert(rule.priority, rule.rule_id.clone()) {
                return Err(RuleError::DuplicatePriority {
                    line,
                    priority: rule.priority,
                    other,
                });
            }
            let matcher = match rule.pattern_kind {
                PatternKind::Substring => Matcher::Substring(rule.pattern.clone()),
                PatternKind::Regex => Matcher::Regex(Regex::new(&rule.pattern).map_err(|e| RuleError::BadRegex {
                    line,
                    rule_id: rule.rule_id.clone(),
                    message: e.to_string(),
                })?),
            };
            rules.push(CompiledRule { rule, matcher });
        }
        rules.sort_by_key(|r| r.rule.priority);
        Ok(RuleSet { rules })
    }

    pub fn default_rules() -> RuleSet {
        RuleSet::parse(DEFAULT_RULES).expect("shipped rules parse")
    }

    pub fn len(&self) -> usize {
        self.rules.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rules.is_empty()
    }

    pub fn rules(&self) -> impl Iterator<Item = &SignatureRule> {
        self.rules.iter().map(|r| &r.rule)
    }

    /// Classified reasons with no rule.
    pub fn missing_reasons(&self) -> Vec<FailureReason> {
        FailureReason::classified()
            .filter(|r| !self.rules.iter().any(|c| c.rule.reason == *r))
            .collect()
    }
}

/// The matching rule closest to the root cause wins; no match is
/// `NoSignature`.
pub fn classify_log(rules: &RuleSet, text: &str) -> Classification {
    let hit = rules.rules.iter().find(|c| match &c.matcher {
        Matcher::Substring(s) => text.contains(s.as_str()),
        Matcher::Regex(re) => re.is_match(text),
    });
    match hit {
        Some(c) => Classification {
            reason: c.rule.reason,
            categories: c.rule.reason.categories(),
            rule_id: Some(c.rule.rule_id.clone()),
        },
        None => Classification {
            reason: FailureReason::NoSignature,
            categories: CategorySet::default(),
            rule_id: None,
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::failure::Category;

    #[derive(Deserialize)]
    struct Labeled {
        log_id: String,
        reason: FailureReason,
        text: String,
    }

    #[test]
    fn rules_cover_every_reason() {
        let rs = RuleSet::default_rules();
        assert!(rs.missing_reasons().is_empty(), "{:?}", rs.missing_reasons());
        assert!(rs.len() >= 40);
    }

    #[test]
    fn corpus_agrees() {
        let rs = RuleSet::default_rules();
        for line in LABELED_CORPUS.lines() {
            let l: Labeled = serde_json::from_str(line).unwrap();
            assert_eq!(classify_log(&rs, &l.text).reason, l.reason, "{}", l.log_id);
        }
    }

    #[test]
    fn root_cause_outranks_traceback() {
        let rs = RuleSet::default_rules();
        let log = "Traceback (most recent call last):\n  File \"x.py\"\nfree(): invalid pointer\n";
        assert_eq!(classify_log(&rs, log).reason, FailureReason::InvalidMemAccess);
    }

    #[test]
    fn import_error_categories() {
        let rs = RuleSet::default_rules();
        let c = classify_log(&rs, "ImportError: No module named cntk");
        assert_eq!(c.reason, FailureReason::ImportError);
        assert_eq!(c.categories.to_vec(), vec![Category::IF, Category::U]);
    }

    #[test]
    fn empty_log_has_no_signature() {
        let c = classify_log(&RuleSet::default_rules(), "");
        assert_eq!(c.reason, FailureReason::NoSignature);
        assert!(c.rule_id.is_none());
    }

    #[test]
    fn bad_rule_files() {
        let dup = "{\"rule_id\":\"a\",\"priority\":1,\"pattern\":\"x\",\"pattern_kind\":\"substring\",\"reason\":\"Core dump\"}\n\
                   {\"rule_id\":\"b\",\"priority\":1,\"pattern\":\"y\",\"pattern_kind\":\"substring\",\"reason\":\"Core dump\"}";
        assert!(matches!(RuleSet::parse(dup), Err(RuleError::DuplicatePriority { line: 2, .. })));
        let bad = "{\"rule_id\":\"a\",\"priority\":1,\"pattern\":\"(\",\"pattern_kind\":\"regex\",\"reason\":\"Core dump\"}";
        assert!(matches!(RuleSet::parse(bad), Err(RuleError::BadRegex { .. })));
        let unknown = "{\"rule_id\":\"a\",\"priority\":1,\"pattern\":\"x\",\"pattern_kind\":\"regex\",\"reason\":\"Gremlins\"}";
        assert!(matches!(RuleSet::parse(unknown), Err(RuleError::Parse { line: 1, .. })));
    }
}
