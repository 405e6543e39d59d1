// SPDX-License-Identifier: Apache-2.0

//! Experiment configs: loading, world construction, and report output.

use std::path::{Path, PathBuf};

use log::{info, warn};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::cluster::{build_topology, ServerSku, TopologySpec};
use crate::exec::Calibration;
use crate::failure::FailureProfile;
use crate::metrics::{build_report, write_csvs, write_report, MetricsReport, ReportMeta, ReportOptions, SCHEMA_VERSION};
use crate::scheduler::{SchedError, SchedulerConfig, Scenario};
use crate::sim::{run, RunOptions, SimError, SimOutput, VcSpec, World};
use crate::workload::{generate_workload, parse_trace, TraceError, TraceWarning, WorkloadParams};

pub const DEFAULT_EXPERIMENT: &str = include_str!("../data/default_experiment.toml");

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config key `{key}`: {message}")]
    Key { key: String, message: String },
}

impl ConfigError {
    pub fn key(key: impl Into<String>, message: impl ToString) -> Self {
        ConfigError::Key {
            key: key.into(),
            message: message.to_string(),
        }
    }

    pub fn offending_key(&self) -> &str {
        match self {
            ConfigError::Key { key, .. } => key,
        }
    }
}

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl ExperimentError {
    /// Process exit code for the CLI.
    pub fn exit_code(&self) -> i32 {
        match self {
            ExperimentError::Config(_) => 2,
            ExperimentError::Io { .. } => 3,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ExperimentError + '_ {
    move |source| ExperimentError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RackGroup {
    /// Number of identical racks in this group.
    #[serde(default = "one")]
    pub count: usize,
    pub servers: usize,
    pub gpus_per_server: u32,
    #[serde(default = "default_cores")]
    pub cpu_cores: u32,
    #[serde(default = "default_mem")]
    pub mem_gb: u32,
}

fn one() -> usize {
    1
}
fn default_cores() -> u32 {
    64
}
fn default_mem() -> u32 {
    512
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TopologyConfig {
    pub racks: Vec<RackGroup>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelFiles {
    /// Throughput and utilization tables; the shipped defaults when absent.
    pub calibration: Option<PathBuf>,
    pub failure_profile: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: Option<u64>,
    pub topology: TopologyConfig,
    pub vc: Vec<VcSpec>,
    pub workload: Option<WorkloadParams>,
    /// JSONL trace replayed instead of a synthetic workload.
    pub trace: Option<PathBuf>,
    #[serde(default)]
    pub scheduler: SchedulerConfig,
    #[serde(default)]
    pub scenario: Scenario,
    #[serde(default)]
    pub models: ModelFiles,
    #[serde(default)]
    pub options: RunOptions,
    #[serde(default)]
    pub report: ReportOptions,
}

/// Dotted key of the TOML entry covering byte `offset`.
fn key_at(text: &str, offset: usize) -> Option<String> {
    let upto = &text[..offset.min(text.len())];
    let line_start = upto.rfind('\n').map_or(0, |i| i + 1);
    let line = &text[line_start..text[line_start..].find('\n').map_or(text.len(), |i| line_start + i)];
    let mut table = String::new();
    for l in upto[..line_start].lines() {
        let t = l.trim();
        if t.starts_with('[') {
            table = t.trim_matches(|c| c == '[' || c == ']').trim().to_string();
        }
    }
    let key = line.split('=').next().map(str::trim).filter(|k| !k.is_empty() && !k.starts_with('['));
    match (table.is_empty(), key) {
        (_, None) if !table.is_empty() => Some(table),
        (true, Some(k)) => Some(k.to_string()),
        (false, Some(k)) => Some(format!("{table}.{k}")),
        _ => None,
    }
}

fn toml_error(text: &str, e: toml::de::Error) -> ConfigError {
    let message = e.message().to_string();
    let named = message
        .split('`')
        .nth(1)
        .filter(|_| message.starts_with("unknown field") || message.starts_with("missing field"));
    let at = e.span().and_then(|s| key_at(text, s.start));
    let key = match (named, at) {
        (Some(field), Some(at)) if message.starts_with("unknown field") => {
            if at.ends_with(field) {
                at
            } else {
                format!("{at}.{field}")
            }
        }
        (Some(field), Some(at)) => format!("{at}.{field}"),
        (Some(field), None) => field.to_string(),
        (None, Some(at)) => at,
        (None, None) => "<root>".into(),
    };
    ConfigError::key(key, message)
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| toml_error(text, e))
    }
}

/// A parsed config plus where it came from.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub config: ExperimentConfig,
    pub base_dir: PathBuf,
    pub hash: String,
}

pub fn config_hash(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

pub fn load_config(path: &Path) -> Result<LoadedConfig, ExperimentError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    let config = ExperimentConfig::parse(&text)?;
    Ok(LoadedConfig {
        config,
        base_dir: path.parent().map(Path::to_path_buf).unwrap_or_default(),
        hash: config_hash(&text),
    })
}

pub fn load_str(text: &str) -> Result<LoadedConfig, ConfigError> {
    Ok(LoadedConfig {
        config: ExperimentConfig::parse(text)?,
        base_dir: PathBuf::from("."),
        hash: config_hash(text),
    })
}

fn sched_key(e: &SchedError) -> String {
    match e {
        SchedError::UnknownVc(_) => "vc".into(),
        SchedError::QuotaExceedsCluster { .. } => "vc.quota".into(),
        SchedError::Invalid { key, .. } => format!("scheduler.{key}"),
    }
}

impl LoadedConfig {
    fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    /// Builds the world; `seed` and `trace` override the file.
    pub fn world(&self, seed: Option<u64>, trace: Option<&Path>) -> Result<World, ExperimentError> {
        let c = &self.config;
        let seed = seed
            .or(c.seed)
            .ok_or_else(|| ConfigError::key("seed", "a seed is required (config or --seed)"))?;
        let spec = TopologySpec {
            racks: c
                .topology
                .racks
                .iter()
                .flat_map(|g| {
                    let sku = ServerSku {
                        gpus: g.gpus_per_server,
                        cpu_cores: g.cpu_cores,
                        mem_gb: g.mem_gb,
                    };
                    std::iter::repeat_n(vec![sku; g.servers], g.count)
                })
                .collect(),
        };
        let topo = build_topology(&spec).map_err(|e| ConfigError::key("topology.racks", e))?;

        let calibration = match &c.models.calibration {
            Some(p) => {
                let p = self.resolve(p);
                let text = std::fs::read_to_string(&p).map_err(io_err(&p))?;
                Calibration::from_toml(&text).map_err(|e| ConfigError::key("models.calibration", e))?
            }
            None => Calibration::default(),
        };
        let profile = match &c.models.failure_profile {
            Some(p) => {
                let p = self.resolve(p);
                let text = std::fs::read_to_string(&p).map_err(io_err(&p))?;
                FailureProfile::from_toml(&text).map_err(|e| ConfigError::key("models.failure_profile", e))?
            }
            None => FailureProfile::default(),
        };

        let trace = trace.map(Path::to_path_buf).or_else(|| c.trace.as_ref().map(|p| self.resolve(p)));
        let jobs = match (trace, &c.workload) {
            (Some(path), _) => {
                let text = std::fs::read_to_string(&path).map_err(io_err(&path))?;
                let parsed = parse_trace(&text).map_err(|e| match e {
                    TraceError::Io(source) => ExperimentError::Io { path: path.clone(), source },
                    other => ConfigError::key("trace", other).into(),
                })?;
                for w in &parsed.warnings {
                    let TraceWarning::NonMonotonicTime { line } = w;
                    warn!("trace line {line}: submit time goes backwards; re-sorted");
                }
                parsed.jobs
            }
            (None, Some(params)) => {
                let mut params = params.clone();
                params.seed = seed;
                generate_workload(&params).map_err(|e| ConfigError::key("workload", e))?
            }
            (None, None) => return Err(ConfigError::key("workload", "neither [workload] nor trace is set").into()),
        };

        let world = World {
            topo,
            vcs: c.vc.clone(),
            jobs,
            sched: c.scheduler.clone(),
            scenario: c.scenario.clone(),
            calibration,
            profile,
            seed,
            options: c.options.clone(),
        };
        world.validate().map_err(|e| match e {
            SimError::Sched(s) => ConfigError::key(sched_key(&s), s),
            SimError::InvalidJob { .. } => ConfigError::key("trace", e),
            other => ConfigError::key("<world>", other),
        })?;
        Ok(world)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub tool_version: String,
    pub config_hash: String,
    pub seed: u64,
    pub scenario: String,
    pub jobs: usize,
    pub files: Vec<String>,
}

/// One finished experiment.
#[derive(Debug, Clone)]
pub struct ExperimentRun {
    pub world: World,
    pub output: SimOutput,
    pub report: MetricsReport,
}

/// Simulates the world and builds its report without touching disk.
pub fn simulate(world: World, hash: &str, opts: &ReportOptions) -> Result<ExperimentRun, ExperimentError> {
    let output = run(&world).map_err(|e| ConfigError::key("<world>", e))?;
    let meta = ReportMeta {
        scenario: world.scenario.id(),
        seed: world.seed,
        config_hash: hash.to_string(),
    };
    let report = build_report(&world, &output, &meta, opts);
    Ok(ExperimentRun { world, output, report })
}

/// Writes report.json, the CSVs and manifest.json into `out`.
pub fn write_outputs(run: &ExperimentRun, out: &Path) -> Result<Manifest, ExperimentError> {
    std::fs::create_dir_all(out).map_err(io_err(out))?;
    write_report(&run.report, out).map_err(io_err(out))?;
    let mut files = vec!["report.json".to_string()];
    files.extend(write_csvs(&run.report, &run.output, out).map_err(|e| ExperimentError::Io {
        path: out.to_path_buf(),
        source: std::io::Error::other(e),
    })?);
    files.push("manifest.json".into());
    let manifest = Manifest {
        schema_version: SCHEMA_VERSION,
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        config_hash: run.report.config_hash.clone(),
        seed: run.report.seed,
        scenario: run.report.scenario.clone(),
        jobs: run.world.jobs.len(),
        files,
    };
    let path = out.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n";
    std::fs::write(&path, text).map_err(io_err(&path))?;
    Ok(manifest)
}

/// Loads `config`, runs it and writes all outputs into `out`.
pub fn run_experiment(
    config: &Path,
    seed: Option<u64>,
    trace: Option<&Path>,
    out: &Path,
) -> Result<ExperimentRun, ExperimentError> {
    let loaded = load_config(config)?;
    let world = loaded.world(seed, trace)?;
    info!(
        "running {} jobs on {} GPUs, scenario {}",
        world.jobs.len(),
        world.topo.total_gpus(),
        world.scenario.id()
    );
    let run = simulate(world, &loaded.hash, &loaded.config.report)?;
    write_outputs(&run, out)?;
    info!("wrote {}", out.display());
    Ok(run)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shipped_default_parses() {
        let l = load_str(DEFAULT_EXPERIMENT).unwrap();
        let w = l.world(Some(1), None).unwrap();
        assert_eq!(w.topo.total_gpus(), 256);
    }

    #[test]
    fn error_names_nested_key() {
        let bad = DEFAULT_EXPERIMENT.replace("backoff_min = 2.0", "backoff_min = \"two\"");
        assert_ne!(bad, DEFAULT_EXPERIMENT);
        let e = ExperimentConfig::parse(&bad).unwrap_err();
        assert_eq!(e.offending_key(), "scheduler.backoff_min");
    }

    #[test]
    fn error_names_unknown_key() {
        let bad = DEFAULT_EXPERIMENT.replace("[scheduler]", "[scheduler]\nbogus_knob = 1");
        let e = ExperimentConfig::parse(&bad).unwrap_err();
        assert_eq!(e.offending_key(), "scheduler.bogus_knob");
    }

    #[test]
    fn missing_seed_is_a_config_error() {
        let l = load_str(&DEFAULT_EXPERIMENT.replace("seed = 1\n", "")).unwrap();
        let e = l.world(None, None).unwrap_err();
        assert_eq!(e.exit_code(), 2);
        assert!(e.to_string().contains("`seed`"));
    }

    #[test]
    fn invalid_value_names_key() {
        let bad = DEFAULT_EXPERIMENT.replace("relax_after = 3", "relax_after = 0");
        let e = load_str(&bad).unwrap().world(Some(1), None).unwrap_err();
        assert!(e.to_string().contains("relax_after"), "{e}");
    }

    #[test]
    fn missing_trace_is_io() {
        let l = load_str(DEFAULT_EXPERIMENT).unwrap();
        let e = l.world(Some(1), Some(Path::new("/nonexistent/trace.jsonl"))).unwrap_err();
        assert_eq!(e.exit_code(), 3);
    }
}
