// SPDX-License-Identifier: Apache-2.0

//! Job model, JSONL trace ingestion, and the calibrated synthetic generator.

use std::fmt;

use rand::Rng;
use rand_distr::{Distribution, Exp, StandardNormal};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

use crate::exec::LossCurveShape;
use crate::rng::RngStreams;

/// Final status of a job.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JobStatus {
    Passed,
    Killed,
    Unsuccessful,
}

impl JobStatus {
    pub const ALL: [JobStatus; 3] = [JobStatus::Passed, JobStatus::Killed, JobStatus::Unsuccessful];

    pub fn as_str(self) -> &'static str {
        match self {
            JobStatus::Passed => "passed",
            JobStatus::Killed => "killed",
            JobStatus::Unsuccessful => "unsuccessful",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "passed" => Some(JobStatus::Passed),
            "killed" => Some(JobStatus::Killed),
            "unsuccessful" => Some(JobStatus::Unsuccessful),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Job {
    pub job_id: String,
    pub vc: String,
    /// Submitting user; drives sticky failure modes. Defaults to the job id.
    pub user: Option<String>,
    /// Minutes since trace epoch.
    pub submit_time: f64,
    pub gpu_demand: u32,
    /// GPU-minutes at ideal (SameServer) throughput.
    pub work: f64,
    pub status: Option<JobStatus>,
    /// Execution minutes after which the user kills the job.
    pub kill_time: Option<f64>,
    pub loss_curve: Option<Vec<f64>>,
    pub max_retries: Option<u32>,
}

impl Job {
    pub fn new(job_id: impl Into<String>, vc: impl Into<String>, submit_time: f64, gpu_demand: u32, work: f64) -> Self {
        Job {
            job_id: job_id.into(),
            vc: vc.into(),
            user: None,
            submit_time,
            gpu_demand,
            work,
            status: None,
            kill_time: None,
            loss_curve: None,
            max_retries: None,
        }
    }

    pub fn bucket(&self) -> GpuBucket {
        bucket_of(self.gpu_demand)
    }

    /// Ideal wall-clock run time on dedicated, single-server GPUs.
    pub fn ideal_runtime(&self) -> f64 {
        self.work / self.gpu_demand as f64
    }

    pub fn user_name(&self) -> &str {
        self.user.as_deref().unwrap_or(&self.job_id)
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.gpu_demand < 1 {
            return Err("gpu_demand must be >= 1".into());
        }
        if !(self.work > 0.0 && self.work.is_finite()) {
            return Err("work must be positive and finite".into());
        }
        if !(self.submit_time >= 0.0 && self.submit_time.is_finite()) {
            return Err("submit_time must be >= 0".into());
        }
        if let Some(curve) = &self.loss_curve {
            if curve.is_empty() || curve.iter().any(|v| !v.is_finite()) {
                return Err("loss_curve must be non-empty and finite".into());
            }
        }
        if let Some(k) = self.kill_time {
            if !(k >= 0.0 && k.is_finite()) {
                return Err("kill_time must be >= 0".into());
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum GpuBucket {
    B1,
    B2_4,
    B5_8,
    #[serde(rename = "B_GT8")]
    BGt8,
}

impl GpuBucket {
    pub const ALL: [GpuBucket; 4] = [GpuBucket::B1, GpuBucket::B2_4, GpuBucket::B5_8, GpuBucket::BGt8];

    pub fn as_str(self) -> &'static str {
        match self {
            GpuBucket::B1 => "1",
            GpuBucket::B2_4 => "2-4",
            GpuBucket::B5_8 => "5-8",
            GpuBucket::BGt8 => ">8",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for GpuBucket {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

pub fn bucket_of(demand: u32) -> GpuBucket {
    match demand {
        0 | 1 => GpuBucket::B1,
        2..=4 => GpuBucket::B2_4,
        5..=8 => GpuBucket::B5_8,
        _ => GpuBucket::BGt8,
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
#[error("line {line}: field `{field}`: {message}")]
pub struct SchemaError {
    pub line: usize,
    pub field: String,
    pub message: String,
}

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("{} invalid trace record(s); first: {}", .0.len(), .0[0])]
    Schema(Vec<SchemaError>),
    #[error("reading trace: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub enum TraceWarning {
    /// Record at `line` was submitted earlier than its predecessor; the
    /// output is re-sorted.
    NonMonotonicTime { line: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParsedTrace {
    pub jobs: Vec<Job>,
    pub warnings: Vec<TraceWarning>,
}

fn schema(line: usize, field: &str, message: impl Into<String>) -> SchemaError {
    SchemaError {
        line,
        field: field.to_string(),
        message: message.into(),
    }
}

fn req<'a>(obj: &'a Map<String, Value>, line: usize, field: &str) -> Result<&'a Value, SchemaError> {
    obj.get(field).ok_or_else(|| schema(line, field, "missing required field"))
}

fn as_str(v: &Value, line: usize, field: &str) -> Result<String, SchemaError> {
    v.as_str()
        .map(str::to_string)
        .ok_or_else(|| schema(line, field, "expected string"))
}

fn as_num(v: &Value, line: usize, field: &str) -> Result<f64, SchemaError> {
    v.as_f64().ok_or_else(|| schema(line, field, "expected number"))
}

fn as_uint(v: &Value, line: usize, field: &str) -> Result<u32, SchemaError> {
    v.as_u64()
        .and_then(|n| u32::try_from(n).ok())
        .ok_or_else(|| schema(line, field, "expected non-negative integer"))
}

fn parse_record(text: &str, line: usize) -> Result<Job, SchemaError> {
    let value: Value = serde_json::from_str(text).map_err(|e| schema(line, "<record>", e.to_string()))?;
    let obj = value
        .as_object()
        .ok_or_else(|| schema(line, "<record>", "expected a JSON object"))?;
    let opt = |k: &str| obj.get(k).filter(|v| !v.is_null());
    let mut job = Job {
        job_id: as_str(req(obj, line, "job_id")?, line, "job_id")?,
        vc: as_str(req(obj, line, "vc")?, line, "vc")?,
        user: opt("user").map(|v| as_str(v, line, "user")).transpose()?,
        submit_time: as_num(req(obj, line, "submit_time")?, line, "submit_time")?,
        gpu_demand: as_uint(req(obj, line, "gpu_demand")?, line, "gpu_demand")?,
        work: as_num(req(obj, line, "work")?, line, "work")?,
        status: None,
        kill_time: opt("kill_time").map(|v| as_num(v, line, "kill_time")).transpose()?,
        loss_curve: None,
        max_retries: opt("max_retries").map(|v| as_uint(v, line, "max_retries")).transpose()?,
    };
    if let Some(v) = opt("status") {
        let s = as_str(v, line, "status")?;
        job.status = Some(JobStatus::parse(&s).ok_or_else(|| schema(line, "status", format!("unknown status {s:?}")))?);
    }
    if let Some(v) = opt("loss_curve") {
        let arr = v
            .as_array()
            .ok_or_else(|| schema(line, "loss_curve", "expected array of numbers"))?;
        let curve = arr
            .iter()
            .map(|x| as_num(x, line, "loss_curve"))
            .collect::<Result<Vec<_>, _>>()?;
        job.loss_curve = Some(curve);
    }
    job.validate().map_err(|m| {
        let field = m.split_whitespace().next().unwrap_or("<record>").to_string();
        schema(line, &field, m)
    })?;
    Ok(job)
}

/// Parses one job per line. Blank lines and `#` comments are skipped.
pub fn parse_trace(text: &str) -> Result<ParsedTrace, TraceError> {
    let mut jobs = Vec::new();
    let mut errors = Vec::new();
    let mut warnings = Vec::new();
    let mut last = f64::NEG_INFINITY;
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let t = raw.trim();
        if t.is_empty() || t.starts_with('#') {
            continue;
        }
        match parse_record(t, line) {
            Ok(job) => {
                if job.submit_time < last {
                    warnings.push(TraceWarning::NonMonotonicTime { line });
                }
                last = last.max(job.submit_time);
                jobs.push(job);
            }
            Err(e) => errors.push(e),
        }
    }
    if !errors.is_empty() {
        return Err(TraceError::Schema(errors));
    }
    // stable: equal submit times keep file order
    jobs.sort_by(|a, b| a.submit_time.total_cmp(&b.submit_time));
    Ok(ParsedTrace { jobs, warnings })
}

pub fn serialize_trace(jobs: &[Job]) -> String {
    let mut out = String::new();
    for job in jobs {
        let mut obj = Map::new();
        obj.insert("job_id".into(), job.job_id.clone().into());
        obj.insert("vc".into(), job.vc.clone().into());
        if let Some(u) = &job.user {
            obj.insert("user".into(), u.clone().into());
        }
        obj.insert("submit_time".into(), job.submit_time.into());
        obj.insert("gpu_demand".into(), job.gpu_demand.into());
        obj.insert("work".into(), job.work.into());
        if let Some(s) = job.status {
            obj.insert("status".into(), s.as_str().into());
        }
        if let Some(k) = job.kill_time {
            obj.insert("kill_time".into(), k.into());
        }
        if let Some(c) = &job.loss_curve {
            obj.insert("loss_curve".into(), c.clone().into());
        }
        if let Some(r) = job.max_retries {
            obj.insert("max_retries".into(), r.into());
        }
        out.push_str(&Value::Object(obj).to_string());
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VcArrival {
    pub name: String,
    /// Fraction of all arrivals submitted to this VC.
    pub share: f64,
    /// Number of distinct synthetic users in this VC.
    #[serde(default = "default_users")]
    pub users: u32,
}

fn default_long_runtime() -> f64 {
    1440.0
}

fn default_users() -> u32 {
    20
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DemandWeight {
    pub gpus: u32,
    pub weight: f64,
}

/// Log-normal body of the ideal run time, in minutes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RuntimeBody {
    pub median_min: f64,
    pub sigma: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerBucket<T> {
    pub b1: T,
    pub b2_4: T,
    pub b5_8: T,
    pub b_gt8: T,
}

impl<T: Copy> PerBucket<T> {
    pub fn get(&self, b: GpuBucket) -> T {
        match b {
            GpuBucket::B1 => self.b1,
            GpuBucket::B2_4 => self.b2_4,
            GpuBucket::B5_8 => self.b5_8,
            GpuBucket::BGt8 => self.b_gt8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkloadParams {
    pub job_count: usize,
    /// Overridden by the experiment seed when run from a config.
    #[serde(default)]
    pub seed: u64,
    /// Cluster-wide arrivals per minute (Poisson).
    pub arrival_rate_per_min: f64,
    pub vcs: Vec<VcArrival>,
    pub demand: Vec<DemandWeight>,
    pub runtime: PerBucket<RuntimeBody>,
    /// Probability mass of run times beyond `tail_threshold_min`.
    pub tail_fraction: f64,
    pub tail_threshold_min: f64,
    /// Pareto shape of the tail.
    pub tail_alpha: f64,
    /// Probability a job of each bucket is killed by its user.
    pub killed_fraction: PerBucket<f64>,
    /// Kill point as a fraction of ideal run time, drawn uniformly in this range.
    pub kill_point: (f64, f64),
    /// Kill probability for jobs whose ideal run time reaches
    /// `long_runtime_min`, replacing the per-bucket value.
    #[serde(default)]
    pub killed_long_fraction: Option<f64>,
    #[serde(default = "default_long_runtime")]
    pub long_runtime_min: f64,
    /// Fraction of jobs carrying a synthetic loss curve.
    #[serde(default)]
    pub loss_curve_fraction: f64,
    #[serde(default)]
    pub loss_curve: Option<LossCurveShape>,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum WorkloadError {
    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),
}

fn invalid(msg: impl Into<String>) -> WorkloadError {
    WorkloadError::InvalidDistribution(msg.into())
}

fn check_probability(name: &str, p: f64) -> Result<(), WorkloadError> {
    if !(0.0..=1.0).contains(&p) {
        return Err(invalid(format!("{name} = {p} is not a probability")));
    }
    Ok(())
}

impl WorkloadParams {
    pub fn validate(&self) -> Result<(), WorkloadError> {
        if self.vcs.is_empty() {
            return Err(invalid("no virtual clusters"));
        }
        let share: f64 = self.vcs.iter().map(|v| v.share).sum();
        if self.vcs.iter().any(|v| v.share < 0.0) || (share - 1.0).abs() > 1e-9 {
            return Err(invalid(format!("vc shares sum to {share}, expected 1")));
        }
        let w: f64 = self.demand.iter().map(|d| d.weight).sum();
        if self.demand.is_empty() || self.demand.iter().any(|d| d.weight < 0.0 || d.gpus == 0) || (w - 1.0).abs() > 1e-9 {
            return Err(invalid(format!("demand weights sum to {w}, expected 1 with gpus >= 1")));
        }
        if !(self.arrival_rate_per_min > 0.0) {
            return Err(invalid("arrival_rate_per_min must be positive"));
        }
        for b in GpuBucket::ALL {
            let body = self.runtime.get(b);
            if !(body.median_min > 0.0 && body.sigma > 0.0) {
                return Err(invalid(format!("runtime body for bucket {b} must be positive")));
            }
            if body.median_min >= self.tail_threshold_min {
                return Err(invalid("runtime median must lie below the tail threshold"));
            }
            check_probability("killed_fraction", self.killed_fraction.get(b))?;
        }
        check_probability("tail_fraction", self.tail_fraction)?;
        if let Some(p) = self.killed_long_fraction {
            check_probability("killed_long_fraction", p)?;
        }
        check_probability("loss_curve_fraction", self.loss_curve_fraction)?;
        if !(self.tail_alpha > 0.0 && self.tail_threshold_min > 0.0) {
            return Err(invalid("tail parameters must be positive"));
        }
        let (lo, hi) = self.kill_point;
        if !(0.0 < lo && lo <= hi && hi <= 1.0) {
            return Err(invalid("kill_point must satisfy 0 < lo <= hi <= 1"));
        }
        if self.loss_curve_fraction > 0.0 && self.loss_curve.is_none() {
            return Err(invalid("loss_curve_fraction > 0 needs a loss_curve shape"));
        }
        Ok(())
    }
}

fn pick_weighted<R: Rng>(rng: &mut R, weights: impl Iterator<Item = f64> + Clone) -> usize {
    let total: f64 = weights.clone().sum();
    let mut x = rng.random::<f64>() * total;
    let mut last = 0;
    for (i, w) in weights.enumerate() {
        if w > 0.0 {
            last = i;
            if x < w {
                return i;
            }
            x -= w;
        }
    }
    last
}

/// Ideal run time: log-normal body truncated below the threshold, Pareto
/// tail above it with exactly `tail_fraction` of the mass.
fn sample_runtime<R: Rng>(rng: &mut R, body: RuntimeBody, p: &WorkloadParams) -> f64 {
    if rng.random::<f64>() < p.tail_fraction {
        let u: f64 = 1.0 - rng.random::<f64>();
        return p.tail_threshold_min * u.powf(-1.0 / p.tail_alpha);
    }
    let std = Normal::new(0.0, 1.0).expect("unit normal");
    let z_cap = (p.tail_threshold_min.ln() - body.median_min.ln()) / body.sigma;
    let u_cap = std.cdf(z_cap);
    let u = (rng.random::<f64>() * u_cap).clamp(1e-12, u_cap * (1.0 - 1e-12));
    let z = std.inverse_cdf(u);
    (body.median_min.ln() + body.sigma * z).exp()
}

pub fn generate_workload(params: &WorkloadParams) -> Result<Vec<Job>, WorkloadError> {
    params.validate()?;
    let streams = RngStreams::new(params.seed);
    let mut rng = streams.stream("workload", 0);
    let mut curve_rng = streams.stream("loss-curves", 0);
    let gaps = Exp::new(params.arrival_rate_per_min).map_err(|e| invalid(e.to_string()))?;
    let mut t = 0.0;
    let mut jobs = Vec::with_capacity(params.job_count);
    for i in 0..params.job_count {
        t += gaps.sample(&mut rng);
        let vc = &params.vcs[pick_weighted(&mut rng, params.vcs.iter().map(|v| v.share))];
        // skewed user popularity: a few heavy submitters per VC
        let uu: f64 = rng.random();
        let user = ((uu * uu) * vc.users.max(1) as f64) as u32;
        let demand = params.demand[pick_weighted(&mut rng, params.demand.iter().map(|d| d.weight))].gpus;
        let bucket = bucket_of(demand);
        let runtime = sample_runtime(&mut rng, params.runtime.get(bucket), params);
        let p_kill = match params.killed_long_fraction {
            Some(p) if runtime >= params.long_runtime_min => p,
            _ => params.killed_fraction.get(bucket),
        };
        let killed = rng.random::<f64>() < p_kill;
        let (lo, hi) = params.kill_point;
        let kill_frac = lo + (hi - lo) * rng.random::<f64>();
        let mut job = Job::new(format!("j{i:06}"), vc.name.clone(), t, demand, runtime * demand as f64);
        job.user = Some(format!("{}-u{user}", vc.name));
        if killed {
            job.kill_time = Some(runtime * kill_frac);
        }
        if let Some(shape) = &params.loss_curve {
            if curve_rng.random::<f64>() < params.loss_curve_fraction {
                job.loss_curve = Some(shape.sample(&mut curve_rng));
            }
        }
        jobs.push(job);
    }
    Ok(jobs)
}

/// Standard-normal helper shared by samplers in this crate.
pub(crate) fn std_normal<R: Rng>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    pub(crate) fn params(n: usize, seed: u64) -> WorkloadParams {
        WorkloadParams {
            job_count: n,
            seed,
            arrival_rate_per_min: 0.1,
            vcs: vec![
                VcArrival { name: "vc1".into(), share: 0.6, users: 10 },
                VcArrival { name: "vc2".into(), share: 0.4, users: 10 },
            ],
            demand: vec![
                DemandWeight { gpus: 1, weight: 0.5 },
                DemandWeight { gpus: 2, weight: 0.1 },
                DemandWeight { gpus: 4, weight: 0.15 },
                DemandWeight { gpus: 8, weight: 0.15 },
                DemandWeight { gpus: 16, weight: 0.1 },
            ],
            runtime: PerBucket {
                b1: RuntimeBody { median_min: 30.0, sigma: 1.5 },
                b2_4: RuntimeBody { median_min: 60.0, sigma: 1.5 },
                b5_8: RuntimeBody { median_min: 120.0, sigma: 1.5 },
                b_gt8: RuntimeBody { median_min: 240.0, sigma: 1.5 },
            },
            tail_fraction: 0.005,
            tail_threshold_min: 7.0 * 24.0 * 60.0,
            tail_alpha: 2.0,
            killed_fraction: PerBucket { b1: 0.1, b2_4: 0.1, b5_8: 0.2, b_gt8: 0.2 },
            kill_point: (0.2, 1.0),
            killed_long_fraction: None,
            long_runtime_min: 1440.0,
            loss_curve_fraction: 0.0,
            loss_curve: None,
        }
    }

    #[test]
    fn buckets() {
        assert_eq!(bucket_of(1), GpuBucket::B1);
        assert_eq!(bucket_of(2), GpuBucket::B2_4);
        assert_eq!(bucket_of(4), GpuBucket::B2_4);
        assert_eq!(bucket_of(5), GpuBucket::B5_8);
        assert_eq!(bucket_of(8), GpuBucket::B5_8);
        assert_eq!(bucket_of(9), GpuBucket::BGt8);
        assert_eq!(bucket_of(16), GpuBucket::BGt8);
    }

    #[test]
    fn parses_minimal_record() {
        let t = parse_trace(r#"{"job_id":"a","vc":"vc1","submit_time":0,"gpu_demand":1,"work":60}"#).unwrap();
        assert_eq!(t.jobs, vec![Job::new("a", "vc1", 0.0, 1, 60.0)]);
        assert!(t.warnings.is_empty());
    }

    #[test]
    fn missing_field_is_named() {
        let err = parse_trace("{\"job_id\":\"a\",\"vc\":\"v\",\"submit_time\":0,\"work\":1}\n").unwrap_err();
        let TraceError::Schema(errs) = err else { panic!() };
        assert_eq!(errs[0].field, "gpu_demand");
        assert_eq!(errs[0].line, 1);
    }

    #[test]
    fn wrong_type_and_bad_line_reported_with_numbers() {
        let text = "{\"job_id\":\"a\",\"vc\":\"v\",\"submit_time\":0,\"gpu_demand\":1,\"work\":1}\n\
                    {\"job_id\":\"b\",\"vc\":\"v\",\"submit_time\":\"x\",\"gpu_demand\":1,\"work\":1}\n\
                    not json\n";
        let TraceError::Schema(errs) = parse_trace(text).unwrap_err() else { panic!() };
        assert_eq!(errs.len(), 2);
        assert_eq!((errs[0].line, errs[0].field.as_str()), (2, "submit_time"));
        assert_eq!(errs[1].line, 3);
    }

    #[test]
    fn shuffled_times_are_sorted_with_warning() {
        let text = [5.0, 1.0, 3.0]
            .iter()
            .enumerate()
            .map(|(i, t)| format!("{{\"job_id\":\"{i}\",\"vc\":\"v\",\"submit_time\":{t},\"gpu_demand\":2,\"work\":4,\"extra\":true}}"))
            .collect::<Vec<_>>()
            .join("\n");
        let t = parse_trace(&text).unwrap();
        let mut oracle = vec![5.0, 1.0, 3.0];
        oracle.sort_by(f64::total_cmp);
        let got: Vec<f64> = t.jobs.iter().map(|j| j.submit_time).collect();
        assert_eq!(got, oracle);
        assert_eq!(t.warnings, vec![TraceWarning::NonMonotonicTime { line: 2 }, TraceWarning::NonMonotonicTime { line: 3 }]);
    }

    #[test]
    fn generator_is_deterministic() {
        let a = generate_workload(&params(500, 11)).unwrap();
        let b = generate_workload(&params(500, 11)).unwrap();
        assert_eq!(a, b);
        let c = generate_workload(&params(500, 12)).unwrap();
        assert_ne!(a, c);
        for j in &a {
            j.validate().unwrap();
        }
    }

    #[test]
    fn rejects_bad_distribution() {
        let mut p = params(10, 1);
        p.demand[0].weight = 0.9;
        assert!(matches!(generate_workload(&p), Err(WorkloadError::InvalidDistribution(_))));
    }

    #[test]
    fn bucket_shares_and_tail_fraction_at_scale() {
        let p = params(100_000, 5);
        let jobs = generate_workload(&p).unwrap();
        let mut counts = [0usize; 4];
        for j in &jobs {
            counts[j.bucket().index()] += 1;
        }
        let want = [0.5, 0.25, 0.15, 0.10];
        for (c, w) in counts.iter().zip(want) {
            let share = *c as f64 / jobs.len() as f64;
            assert!((share - w).abs() < 0.02, "share {share} vs {w}");
        }
        let tail = jobs.iter().filter(|j| j.ideal_runtime() > p.tail_threshold_min).count() as f64 / jobs.len() as f64;
        assert!((0.002..=0.008).contains(&tail), "tail fraction {tail}");
        assert!((tail - 0.005).abs() <= 0.003);
    }

    #[test]
    fn mean_work_monotone_over_buckets() {
        let jobs = generate_workload(&params(40_000, 3)).unwrap();
        let mut sum = [0.0; 4];
        let mut n = [0.0; 4];
        for j in &jobs {
            sum[j.bucket().index()] += j.work;
            n[j.bucket().index()] += 1.0;
        }
        let means: Vec<f64> = (0..4).map(|i| sum[i] / n[i]).collect();
        assert!(means.windows(2).all(|w| w[0] < w[1]), "{means:?}");
    }

    fn job_strategy() -> impl Strategy<Value = Job> {
        (
            "[a-z0-9]{1,8}",
            "vc[0-9]",
            0u32..100_000,
            1u32..64,
            1u32..100_000,
            proptest::option::of(prop_oneof![Just(JobStatus::Passed), Just(JobStatus::Killed), Just(JobStatus::Unsuccessful)]),
            proptest::option::of(proptest::collection::vec(-1e3f64..1e3, 1..5)),
            proptest::option::of(0u32..10),
        )
            .prop_map(|(id, vc, t, d, w, status, curve, retries)| Job {
                job_id: id,
                vc,
                user: None,
                submit_time: t as f64 / 4.0,
                gpu_demand: d,
                work: w as f64 / 8.0,
                status,
                kill_time: None,
                loss_curve: curve,
                max_retries: retries,
            })
    }

    proptest! {
        #[test]
        fn serialize_then_parse_is_identity(mut jobs in proptest::collection::vec(job_strategy(), 0..20)) {
            jobs.sort_by(|a, b| a.submit_time.total_cmp(&b.submit_time));
            let parsed = parse_trace(&serialize_trace(&jobs)).unwrap();
            prop_assert_eq!(parsed.jobs, jobs);
        }
    }
}
