//! On-disk configuration documents (JSON) and their loaders.
//!
//! Three document kinds exist: topology files describing the grid, workload
//! files describing either an explicit replay list of jobs or a generator for
//! the production-campaign shape, and setting files overriding protocol
//! overhead and link background parameters for a run.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::AppliedSetting;
use crate::transfer::ProfileKind;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}: {source}")]
    Parse { path: String, source: serde_json::Error },
    #[error("{0}")]
    Invalid(String),
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.display().to_string(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|source| ConfigError::Parse {
        path: path.display().to_string(),
        source,
    })
}

// ---------------------------------------------------------------------------
// Topology

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TopologyConfig {
    pub protocols: Vec<ProtocolConfig>,
    pub data_centers: Vec<DataCenterConfig>,
    pub links: Vec<LinkConfig>,
    #[serde(default)]
    pub ddm: DdmSection,
}

impl TopologyConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        read_json(path)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProtocolConfig {
    pub name: String,
    pub overhead: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataCenterConfig {
    pub id: String,
    #[serde(default)]
    pub storage_elements: Vec<SeConfig>,
    #[serde(default)]
    pub worker_nodes: Vec<WnConfig>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeConfig {
    pub id: String,
    pub capacity_mb: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dp_quota_mb: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WnConfig {
    pub id: String,
    #[serde(default = "default_mips")]
    pub mips: f64,
    #[serde(default = "default_slots")]
    pub slots: u32,
    /// Scratch space for staged-in inputs; omit for unlimited.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scratch_mb: Option<f64>,
}

fn default_mips() -> f64 {
    1000.0
}

fn default_slots() -> u32 {
    1
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkConfig {
    pub src: String,
    pub dst: String,
    pub bandwidth_mbps: f64,
    #[serde(default)]
    pub bg_mu: f64,
    #[serde(default)]
    pub bg_sigma: f64,
    #[serde(default = "default_bg_period")]
    pub bg_update_period: u64,
}

fn default_bg_period() -> u64 {
    1
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DdmSection {
    #[serde(default = "default_sweep_period")]
    pub sweep_period: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub placement_ttl: Option<u64>,
}

impl Default for DdmSection {
    fn default() -> Self {
        DdmSection { sweep_period: default_sweep_period(), placement_ttl: None }
    }
}

fn default_sweep_period() -> u64 {
    3600
}

// ---------------------------------------------------------------------------
// Workload

/// Worker-node selection policy of the workload management system.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlacementPolicy {
    RoundRobin,
    LeastLoaded,
    /// Every job names its node explicitly.
    Pinned,
}

impl Default for PlacementPolicy {
    fn default() -> Self {
        PlacementPolicy::RoundRobin
    }
}

/// A workload file holds either an explicit `replay` list or a `generator`
/// block, never both.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkloadConfig {
    #[serde(default)]
    pub policy: PlacementPolicy,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator: Option<GeneratorSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub replay: Option<Vec<ReplayJob>>,
}

impl WorkloadConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let cfg: WorkloadConfig = read_json(path)?;
        match (&cfg.generator, &cfg.replay) {
            (Some(_), Some(_)) => Err(ConfigError::Invalid(format!(
                "{}: workload declares both `generator` and `replay`",
                path.display()
            ))),
            (None, None) => Err(ConfigError::Invalid(format!(
                "{}: workload declares neither `generator` nor `replay`",
                path.display()
            ))),
            _ => Ok(cfg),
        }
    }
}

/// One job of an explicit replay workload.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReplayJob {
    pub tick: u64,
    #[serde(default = "default_threads")]
    pub n_threads: u32,
    pub files_mb: Vec<f64>,
    pub profile: ProfileKind,
    pub protocol: String,
    /// Source storage element of every file of this job.
    pub src: String,
    /// Explicit worker node; required under the `pinned` policy.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub node: Option<String>,
    /// Intermediate storage element for data placement; defaults to the first
    /// storage element of the chosen node's data centre.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub via: Option<String>,
    #[serde(default)]
    pub compute_mi: f64,
}

fn default_threads() -> u32 {
    1
}

/// Production-campaign workload shape: `steps` bursts a fixed cadence apart,
/// each submitting a drawn number of jobs with drawn thread counts and file
/// sizes.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorSpec {
    pub steps: u32,
    pub period_ticks: u64,
    /// Inclusive range of jobs per step.
    pub jobs_per_step: [u32; 2],
    /// Inclusive range of threads per job.
    pub threads: [u32; 2],
    /// Inclusive range of file sizes in MB; one file per thread.
    pub file_mb: [f64; 2],
    pub profile: ProfileKind,
    pub protocol: String,
    pub src: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub node: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub via: Option<String>,
    #[serde(default)]
    pub compute_mi: f64,
    /// When set, file accesses are thinned uniformly (seeded) to exactly this
    /// count; an error if fewer were drawn.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_observations: Option<usize>,
    /// Materialization seed. When absent the driver derives one from the run
    /// seed, which ties the workload to it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

// ---------------------------------------------------------------------------
// Setting and prior

/// Run-time override of protocol overhead and link background parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SettingFile {
    pub overhead: f64,
    pub mu: f64,
    pub sigma: f64,
    /// Restrict the overhead override to one protocol.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub protocol: Option<String>,
    /// Restrict the background override to these `src->dst` links.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub links: Option<Vec<String>>,
}

impl SettingFile {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        read_json(path)
    }

    pub fn to_applied(&self) -> AppliedSetting {
        AppliedSetting {
            overhead: self.overhead,
            bg_mu: self.mu,
            bg_sigma: self.sigma,
            protocol: self.protocol.clone(),
            links: self.links.clone(),
        }
    }
}

/// Uniform prior box over (overhead, mu, sigma).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriorConfig {
    pub overhead: [f64; 2],
    pub mu: [f64; 2],
    pub sigma: [f64; 2],
}

impl PriorConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        read_json(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn workload_with_both_blocks_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.json");
        std::fs::write(
            &path,
            r#"{"replay": [], "generator": {"steps": 1, "period_ticks": 1,
                "jobs_per_step": [1,1], "threads": [1,1], "file_mb": [1,1],
                "profile": "remote_access", "protocol": "p", "src": "s"}}"#,
        )
        .unwrap();
        assert!(matches!(WorkloadConfig::load(&path), Err(ConfigError::Invalid(_))));
    }

    #[test]
    fn workload_with_neither_block_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.json");
        std::fs::write(&path, r#"{"policy": "round_robin"}"#).unwrap();
        assert!(matches!(WorkloadConfig::load(&path), Err(ConfigError::Invalid(_))));
    }

    #[test]
    fn unknown_fields_rejected() {
        let r: Result<TopologyConfig, _> =
            serde_json::from_str(r#"{"protocols": [], "data_centers": [], "links": [], "bogus": 1}"#);
        assert!(r.is_err());
    }

    #[test]
    fn replay_defaults() {
        let j: ReplayJob = serde_json::from_str(
            r#"{"tick": 0, "files_mb": [100.0], "profile": "stage_in",
                "protocol": "p", "src": "se"}"#,
        )
        .unwrap();
        assert_eq!(j.n_threads, 1);
        assert_eq!(j.compute_mi, 0.0);
        assert!(j.node.is_none());
    }

    #[test]
    fn setting_file_parses() {
        let s: SettingFile =
            serde_json::from_str(r#"{"overhead": 0.02, "mu": 36.9, "sigma": 14.4}"#).unwrap();
        let a = s.to_applied();
        assert_eq!(a.overhead, 0.02);
        assert_eq!(a.bg_mu, 36.9);
        assert_eq!(a.bg_sigma, 14.4);
    }
}
