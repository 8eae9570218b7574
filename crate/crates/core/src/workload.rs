//! Workload description, worker-node placement and replica management.
//!
//! A workload is a list of job entries with submission ticks, either written
//! out explicitly (`replay`) or materialized from the production-campaign
//! generator. The WMS places queued jobs onto worker nodes; the DDM sweeps
//! expired replica leases.

use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::config::{GeneratorSpec, PlacementPolicy, WorkloadConfig};
use crate::grid::Grid;
use crate::transfer::ProfileKind;

/// One job to submit: stream `files_mb` from `src` under `profile`, then
/// compute for `compute_mi`.
#[derive(Debug, Clone)]
pub struct JobEntry {
    pub submit_tick: u64,
    pub n_threads: u32,
    pub files_mb: Vec<f64>,
    pub profile: ProfileKind,
    pub protocol: String,
    pub src: String,
    pub node: Option<String>,
    pub via: Option<String>,
    pub compute_mi: f64,
}

/// A fully materialized workload, ready to run.
#[derive(Debug, Clone)]
pub struct Workload {
    pub policy: PlacementPolicy,
    pub jobs: Vec<JobEntry>,
}

impl Workload {
    /// Total number of file accesses (one observation each, two for data
    /// placement once the local stage-in is counted).
    pub fn n_accesses(&self) -> usize {
        self.jobs.iter().map(|j| j.files_mb.len()).sum()
    }
}

#[derive(Debug, Error)]
pub enum WorkloadError {
    #[error("generator {field}: {detail}")]
    BadRange { field: String, detail: String },
    #[error("generator drew {drawn} file accesses, fewer than target_observations {target}")]
    TargetUnreachable { drawn: usize, target: usize },
}

/// Materializes a workload config: replay lists pass through, generator specs
/// are drawn with their own seed (falling back to `default_seed`).
pub fn materialize(cfg: &WorkloadConfig, default_seed: u64) -> Result<Workload, WorkloadError> {
    if let Some(entries) = &cfg.replay {
        let jobs = entries
            .iter()
            .map(|e| JobEntry {
                submit_tick: e.tick,
                n_threads: e.n_threads.max(1),
                files_mb: e.files_mb.clone(),
                profile: e.profile,
                protocol: e.protocol.clone(),
                src: e.src.clone(),
                node: e.node.clone(),
                via: e.via.clone(),
                compute_mi: e.compute_mi,
            })
            .collect();
        return Ok(Workload { policy: cfg.policy, jobs });
    }
    let spec = cfg.generator.as_ref().expect("validated at load time");
    let jobs = generate_production_workload(spec, spec.seed.unwrap_or(default_seed))?;
    Ok(Workload { policy: cfg.policy, jobs })
}

fn check_range<T: PartialOrd + std::fmt::Display>(
    field: &str,
    lo: T,
    hi: T,
    min_lo: T,
) -> Result<(), WorkloadError> {
    if lo < min_lo {
        return Err(WorkloadError::BadRange {
            field: field.into(),
            detail: format!("lower bound {lo} below minimum {min_lo}"),
        });
    }
    if hi < lo {
        return Err(WorkloadError::BadRange {
            field: field.into(),
            detail: format!("inverted range [{lo}, {hi}]"),
        });
    }
    Ok(())
}

/// Draws the production-campaign shape: `steps` bursts `period_ticks` apart,
/// each with a drawn number of jobs, each job streaming one file per thread.
///
/// With `target_observations` set, a surplus draw is thinned uniformly at
/// random across the whole run (jobs left empty are dropped), keeping the
/// burst structure while hitting the target exactly.
pub fn generate_production_workload(
    spec: &GeneratorSpec,
    seed: u64,
) -> Result<Vec<JobEntry>, WorkloadError> {
    if spec.steps == 0 {
        return Err(WorkloadError::BadRange {
            field: "steps".into(),
            detail: "must be at least 1".into(),
        });
    }
    if spec.period_ticks == 0 {
        return Err(WorkloadError::BadRange {
            field: "period_ticks".into(),
            detail: "must be at least 1".into(),
        });
    }
    check_range("jobs_per_step", spec.jobs_per_step[0], spec.jobs_per_step[1], 1)?;
    check_range("threads", spec.threads[0], spec.threads[1], 1)?;
    check_range("file_mb", spec.file_mb[0], spec.file_mb[1], f64::MIN_POSITIVE)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut jobs = Vec::new();
    for step in 0..spec.steps {
        let tick = u64::from(step) * spec.period_ticks;
        let n_jobs = rng.gen_range(spec.jobs_per_step[0]..=spec.jobs_per_step[1]);
        for _ in 0..n_jobs {
            let threads = rng.gen_range(spec.threads[0]..=spec.threads[1]);
            let files_mb =
                (0..threads).map(|_| rng.gen_range(spec.file_mb[0]..=spec.file_mb[1])).collect();
            jobs.push(JobEntry {
                submit_tick: tick,
                n_threads: threads,
                files_mb,
                profile: spec.profile,
                protocol: spec.protocol.clone(),
                src: spec.src.clone(),
                node: spec.node.clone(),
                via: spec.via.clone(),
                compute_mi: spec.compute_mi,
            });
        }
    }

    if let Some(target) = spec.target_observations {
        let total: usize = jobs.iter().map(|j| j.files_mb.len()).sum();
        if total < target {
            return Err(WorkloadError::TargetUnreachable { drawn: total, target });
        }
        if total > target {
            let mut slots: Vec<(usize, usize)> = jobs
                .iter()
                .enumerate()
                .flat_map(|(j, job)| (0..job.files_mb.len()).map(move |f| (j, f)))
                .collect();
            // Fisher-Yates prefix selection of the accesses to keep.
            for i in 0..target {
                let pick = rng.gen_range(i..slots.len());
                slots.swap(i, pick);
            }
            let keep: HashSet<(usize, usize)> = slots[..target].iter().copied().collect();
            let mut thinned = Vec::with_capacity(jobs.len());
            for (j, mut job) in jobs.into_iter().enumerate() {
                let files: Vec<f64> = job
                    .files_mb
                    .iter()
                    .enumerate()
                    .filter(|(f, _)| keep.contains(&(j, *f)))
                    .map(|(_, &s)| s)
                    .collect();
                if !files.is_empty() {
                    job.files_mb = files;
                    thinned.push(job);
                }
            }
            jobs = thinned;
        }
    }
    Ok(jobs)
}

/// Worker-node selector. Round robin keeps a cursor over the candidate list;
/// least-loaded picks the emptiest node; pinned jobs name their node.
#[derive(Debug, Clone)]
pub struct Wms {
    pub policy: PlacementPolicy,
    rr_cursor: usize,
}

impl Wms {
    pub fn new(policy: PlacementPolicy) -> Self {
        Wms { policy, rr_cursor: 0 }
    }

    /// Picks a node with a free slot from `candidates` (worker-node indices in
    /// declaration order). `running` holds the per-node job counts. Returns
    /// `None` when every candidate is saturated; the job stays queued.
    pub fn place(
        &mut self,
        pinned: Option<usize>,
        candidates: &[usize],
        running: &[u32],
        slots: &[u32],
    ) -> Option<usize> {
        let free = |wn: usize| running[wn] < slots[wn];
        if let Some(node) = pinned {
            return free(node).then_some(node);
        }
        match self.policy {
            PlacementPolicy::RoundRobin => {
                for k in 0..candidates.len() {
                    let pos = (self.rr_cursor + k) % candidates.len();
                    let node = candidates[pos];
                    if free(node) {
                        self.rr_cursor = (pos + 1) % candidates.len();
                        return Some(node);
                    }
                }
                None
            }
            PlacementPolicy::LeastLoaded => candidates
                .iter()
                .copied()
                .filter(|&wn| free(wn))
                .min_by_key(|&wn| (running[wn], wn)),
            // Entries without an explicit node are rejected at run start.
            PlacementPolicy::Pinned => None,
        }
    }
}

/// Removes expired, unprotected replica leases, returning the removed ids.
/// `protected` lists replicas currently under transfer.
pub fn ddm_cleanup(grid: &mut Grid, now: u64, protected: &HashSet<usize>) -> Vec<usize> {
    let expired: Vec<usize> = grid
        .replicas
        .iter()
        .enumerate()
        .filter(|(i, r)| !r.removed && r.expired(now) && !protected.contains(i))
        .map(|(i, _)| i)
        .collect();
    for &i in &expired {
        grid.remove_replica(i);
    }
    expired
}
