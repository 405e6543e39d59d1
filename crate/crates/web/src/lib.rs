// SPDX-License-Identifier: Apache-2.0

//! Browser bindings: a small simulation, runtime-to-failure sampling and log
//! classification. The plain functions return JSON strings so they can be
//! exercised natively.

use gpusim::experiment::{load_str, simulate, DEFAULT_EXPERIMENT};
use gpusim::failure::{classify_log, FailureProfile, FailureReason, RuleSet};
use gpusim::metrics::quantile;
use gpusim::workload::GpuBucket;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

/// Jobs per demo run; keeps a browser run under a second or two.
pub const DEMO_JOBS: usize = 1500;

/// Shipped experiment trimmed to demo size.
pub fn demo_config() -> String {
    DEFAULT_EXPERIMENT.replace("job_count = 10000", &format!("job_count = {DEMO_JOBS}"))
}

pub fn run_summary(config_toml: &str, seed: u64) -> Result<Value, String> {
    let loaded = load_str(config_toml).map_err(|e| e.to_string())?;
    let world = loaded.world(Some(seed), None).map_err(|e| e.to_string())?;
    let run = simulate(world, &loaded.hash, &loaded.config.report).map_err(|e| e.to_string())?;
    let r = &run.report;
    let buckets: Vec<Value> = GpuBucket::ALL
        .iter()
        .map(|b| {
            let q = r.queueing.by_bucket.get(b);
            let c = r.delay_causes.get(b.as_str());
            let p = r.placement.by_bucket.get(b);
            json!({
                "bucket": b.as_str(),
                "jobs": q.map_or(0, |q| q.jobs),
                "mean_delay": q.map_or(0.0, |q| q.mean),
                "p90_delay": q.map_or(0.0, |q| q.p90),
                "fragmentation_share": c.map_or(0.0, |c| c.fragmentation_occurrence_share),
                "mean_slowdown": p.map_or(0.0, |p| p.mean_slowdown),
            })
        })
        .collect();
    let status: Vec<Value> = r
        .status
        .counts
        .iter()
        .map(|(s, n)| json!({"status": s.as_str(), "jobs": n, "gpu_share": r.status.gpu_time_share.get(s).copied().unwrap_or(0.0)}))
        .collect();
    Ok(json!({
        "scenario": r.scenario,
        "seed": r.seed,
        "events": r.run.events,
        "end_time": r.run.end_time,
        "status": status,
        "non_passed_gpu_share": r.status.non_passed_gpu_time_share,
        "buckets": buckets,
        "utilization_mean": r.utilization.mean,
        "colocated": r.placement.colocated,
        "placements": r.placement.placements,
    }))
}

pub fn rtf_summary(reason: &str, n: usize, seed: u64) -> Result<Value, String> {
    let reason = FailureReason::from_label(reason).ok_or_else(|| format!("unknown failure reason {reason:?}"))?;
    let profile = FailureProfile::default();
    let target = profile.get(reason).map(|p| p.rtf);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut xs: Vec<f64> = (0..n.max(1)).map(|_| profile.sample_rtf(reason, &mut rng)).collect();
    xs.sort_by(f64::total_cmp);
    // log10-minute histogram, 0.5-decade bins from 0.1 min
    let mut bins = vec![0u64; 12];
    for x in &xs {
        let k = (((x.max(0.1)).log10() + 1.0) * 2.0).floor().clamp(0.0, 11.0) as usize;
        bins[k] += 1;
    }
    Ok(json!({
        "reason": reason.label(),
        "samples": xs.len(),
        "p50": quantile(&xs, 0.5),
        "p90": quantile(&xs, 0.9),
        "p95": quantile(&xs, 0.95),
        "target": target,
        "histogram": bins,
    }))
}

pub fn classify_summary(log: &str) -> Value {
    let c = classify_log(&RuleSet::default_rules(), log);
    json!({
        "reason": c.reason.label(),
        "categories": c.categories.to_vec(),
        "rule_id": c.rule_id,
    })
}

pub fn reason_labels() -> Vec<&'static str> {
    FailureReason::classified().map(|r| r.label()).collect()
}

#[wasm_bindgen(js_name = defaultConfig)]
pub fn default_config() -> String {
    demo_config()
}

#[wasm_bindgen(js_name = failureReasons)]
pub fn failure_reasons() -> String {
    json!(reason_labels()).to_string()
}

#[wasm_bindgen(js_name = runSimulation)]
pub fn run_simulation(config_toml: &str, seed: u32) -> Result<String, JsError> {
    run_summary(config_toml, seed as u64)
        .map(|v| v.to_string())
        .map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = sampleRtf)]
pub fn sample_rtf(reason: &str, n: u32, seed: u32) -> Result<String, JsError> {
    rtf_summary(reason, n as usize, seed as u64)
        .map(|v| v.to_string())
        .map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = classifyLog)]
pub fn classify(log: &str) -> String {
    classify_summary(log).to_string()
}
