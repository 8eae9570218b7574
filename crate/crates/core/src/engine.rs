//! Tick-synchronous simulation engine.
//!
//! One tick is one second. Each tick runs four phases in a fixed order:
//! background-load updaters, the workload driver (submissions, placements and
//! the DDM sweep), per-link chunk allocation, and completion bookkeeping. A
//! transfer registered during tick t first holds bandwidth at tick t+1, and
//! its observed duration T counts exactly the ticks it held bandwidth.
//!
//! Runs are pure functions of (grid, workload, setting, seed, horizon). Every
//! link draws its background load from its own RNG substream derived from the
//! run seed and the link's `src->dst` name, so adding traffic or links
//! elsewhere never perturbs another link's draws.

use std::collections::{HashSet, VecDeque};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Distribution;
use thiserror::Error;

use crate::analysis::Observation;
use crate::config::PlacementPolicy;
use crate::grid::{AppliedSetting, Grid, HostRef, StorageError, TopologyError};
use crate::transfer::{
    advance_link_tick, update_background_load, ActiveTransfer, ProcKey, ProfileKind,
};
use crate::workload::{ddm_cleanup, JobEntry, Wms, Workload};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("negative sigma {0}")]
    NegativeSigma(f64),
    #[error(transparent)]
    Topology(#[from] TopologyError),
    #[error(transparent)]
    Storage(#[from] StorageError),
    #[error("job `{job}`: unknown protocol `{protocol}`")]
    UnknownProtocol { job: String, protocol: String },
    #[error("job `{job}`: unknown host `{host}`")]
    UnknownHost { job: String, host: String },
    #[error("job `{job}`: `{host}` is not a {expected}")]
    WrongHostKind { job: String, host: String, expected: &'static str },
    #[error("no link from `{src}` to `{dst}`")]
    MissingLink { src: String, dst: String },
    #[error("job `{job}`: no worker node reachable from `{src}` for profile {profile}")]
    NoRoute { job: String, src: String, profile: &'static str },
    #[error("job `{job}`: pinned placement requires an explicit node")]
    PinnedRequired { job: String },
    #[error("job `{job}`: data placement needs a storage element in the node's data centre")]
    NoLocalSe { job: String },
    #[error("job `{job}`: file size {size} must be positive")]
    BadFileSize { job: String, size: f64 },
    #[error("job `{job}` submits at tick {tick}, beyond horizon {horizon}")]
    SubmitBeyondHorizon { job: String, tick: u64, horizon: u64 },
}

/// Stable 64-bit mix used to derive substream seeds.
pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a64(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x100_0000_01b3);
    }
    h
}

/// Seed of the substream identified by `label` under the run seed.
pub fn substream_seed(seed: u64, label: &str) -> u64 {
    splitmix64(seed ^ fnv1a64(label))
}

/// Per-link RNG substreams of one run.
pub struct RandomSource {
    link_rngs: Vec<ChaCha8Rng>,
}

impl RandomSource {
    pub fn for_grid(seed: u64, grid: &Grid) -> Self {
        let link_rngs = (0..grid.links.len())
            .map(|i| ChaCha8Rng::seed_from_u64(substream_seed(seed, &grid.link_id(i))))
            .collect();
        RandomSource { link_rngs }
    }

    pub fn link_rng(&mut self, link: usize) -> &mut ChaCha8Rng {
        &mut self.link_rngs[link]
    }
}

/// Draws N(mu, sigma). Sigma zero returns mu exactly; negative sigma is an
/// error.
pub fn normal_draw<R: Rng + ?Sized>(rng: &mut R, mu: f64, sigma: f64) -> Result<f64, SimError> {
    if sigma < 0.0 {
        return Err(SimError::NegativeSigma(sigma));
    }
    if sigma == 0.0 {
        return Ok(mu);
    }
    let normal = rand_distr::Normal::new(mu, sigma).expect("sigma validated");
    Ok(normal.sample(rng))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProcState {
    Pending,
    Active,
    Done,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProcId {
    Transfer(u64),
    Compute(usize),
}

/// Lifecycle record of a simulated process. The normal path is
/// pending -> active -> done; `cancel` is the abnormal jump used when a
/// failing job aborts its outstanding work.
#[derive(Debug, Clone)]
pub struct SimProcess {
    pub id: ProcId,
    pub state: ProcState,
}

impl SimProcess {
    pub fn new(id: ProcId) -> Self {
        SimProcess { id, state: ProcState::Pending }
    }

    pub fn advance(&mut self, to: ProcState) {
        let legal = matches!(
            (self.state, to),
            (ProcState::Pending, ProcState::Active) | (ProcState::Active, ProcState::Done)
        );
        assert!(legal, "illegal process transition {:?} -> {:?}", self.state, to);
        self.state = to;
    }

    pub fn cancel(&mut self) {
        self.state = ProcState::Done;
    }
}

/// One line of the optional event log, rendered as
/// `tick,event_kind,subject_id,detail`.
#[derive(Debug, Clone)]
pub struct Event {
    pub tick: u64,
    pub kind: &'static str,
    pub subject: String,
    pub detail: String,
}

impl std::fmt::Display for Event {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{},{},{},{}", self.tick, self.kind, self.subject, self.detail)
    }
}

#[derive(Debug, Clone)]
pub struct RunOptions {
    pub seed: u64,
    pub horizon: u64,
    pub record_events: bool,
}

impl RunOptions {
    pub fn new(seed: u64, horizon: u64) -> Self {
        RunOptions { seed, horizon, record_events: false }
    }
}

#[derive(Debug, Clone)]
pub struct SimulationResult {
    pub observations: Vec<Observation>,
    pub events: Vec<Event>,
    /// First tick that did not execute (<= horizon).
    pub end_tick: u64,
    pub jobs_completed: usize,
    pub jobs_failed: Vec<(String, String)>,
    /// Jobs still queued, fetching or computing when the horizon cut off.
    pub jobs_unfinished: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum JobState {
    Queued,
    Fetching,
    Computing,
    Done,
    Failed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ItemState {
    Waiting,
    Placing,
    AwaitStage,
    Staging,
    Streaming,
    Done,
}

#[derive(Debug, Clone, Copy)]
enum Leg {
    Stream,
    StageIn,
    Placement,
}

#[derive(Debug, Clone, Copy)]
struct TransferTag {
    job: usize,
    item: usize,
    leg: Leg,
    replica: usize,
}

struct JobRt {
    label: String,
    entry: JobEntry,
    protocol: usize,
    src_se: usize,
    pinned: Option<usize>,
    /// (worker node, data-placement via SE) pairs the WMS may choose from.
    candidates: Vec<(usize, Option<usize>)>,
    src_replicas: Vec<usize>,
    via_replicas: Vec<Option<usize>>,
    items: Vec<ItemState>,
    state: JobState,
    node: usize,
    via: usize,
    next_stream: usize,
    active_streams: u32,
    stage_queue: VecDeque<usize>,
    stage_active: bool,
    scratch_charged: f64,
    compute_until: u64,
}

struct Sim {
    grid: Grid,
    rng: RandomSource,
    opts: RunOptions,
    wms: Wms,
    jobs: Vec<JobRt>,
    submit_order: Vec<usize>,
    next_due: usize,
    queued: VecDeque<usize>,
    running: Vec<u32>,
    slots: Vec<u32>,
    scratch_used: Vec<f64>,
    arena: Vec<ActiveTransfer>,
    tags: Vec<TransferTag>,
    transfer_procs: Vec<SimProcess>,
    compute_procs: Vec<SimProcess>,
    per_link: Vec<Vec<usize>>,
    link_ids: Vec<String>,
    active_transfers: usize,
    unfinished_jobs: usize,
    observations: Vec<Observation>,
    events: Vec<Event>,
    failed: Vec<(String, String)>,
    now: u64,
}

/// Runs the workload on a copy of the grid and returns the observation and
/// event logs. Deterministic for fixed inputs and seed.
pub fn run(
    grid: &Grid,
    workload: &Workload,
    setting: Option<&AppliedSetting>,
    opts: &RunOptions,
) -> Result<SimulationResult, SimError> {
    let mut sim = Sim::init(grid, workload, setting, opts)?;
    sim.execute();
    Ok(sim.finish())
}

impl Sim {
    fn init(
        grid: &Grid,
        workload: &Workload,
        setting: Option<&AppliedSetting>,
        opts: &RunOptions,
    ) -> Result<Self, SimError> {
        let mut grid = grid.clone();
        if let Some(s) = setting {
            grid.apply_setting(s)?;
        }
        let rng = RandomSource::for_grid(opts.seed, &grid);
        let link_ids: Vec<String> = (0..grid.links.len()).map(|i| grid.link_id(i)).collect();

        let mut jobs = Vec::with_capacity(workload.jobs.len());
        for (j, entry) in workload.jobs.iter().enumerate() {
            let label = format!("job-{j}");
            if entry.submit_tick >= opts.horizon {
                return Err(SimError::SubmitBeyondHorizon {
                    job: label,
                    tick: entry.submit_tick,
                    horizon: opts.horizon,
                });
            }
            let protocol = grid.protocol(&entry.protocol).ok_or_else(|| {
                SimError::UnknownProtocol { job: label.clone(), protocol: entry.protocol.clone() }
            })?;
            let src_se = match grid.host(&entry.src) {
                Some(HostRef::Se(i)) => i,
                Some(_) => {
                    return Err(SimError::WrongHostKind {
                        job: label,
                        host: entry.src.clone(),
                        expected: "storage element",
                    })
                }
                None => return Err(SimError::UnknownHost { job: label, host: entry.src.clone() }),
            };
            let pinned = match &entry.node {
                Some(id) => match grid.host(id) {
                    Some(HostRef::Wn(i)) => Some(i),
                    Some(_) => {
                        return Err(SimError::WrongHostKind {
                            job: label,
                            host: id.clone(),
                            expected: "worker node",
                        })
                    }
                    None => return Err(SimError::UnknownHost { job: label, host: id.clone() }),
                },
                None => None,
            };
            if workload.policy == PlacementPolicy::Pinned && pinned.is_none() {
                return Err(SimError::PinnedRequired { job: label });
            }
            let via_named = match &entry.via {
                Some(id) => match grid.host(id) {
                    Some(HostRef::Se(i)) => Some(i),
                    Some(_) => {
                        return Err(SimError::WrongHostKind {
                            job: label,
                            host: id.clone(),
                            expected: "storage element",
                        })
                    }
                    None => return Err(SimError::UnknownHost { job: label, host: id.clone() }),
                },
                None => None,
            };

            let candidates =
                Self::route_candidates(&grid, &label, entry, src_se, pinned, via_named)?;

            let mut src_replicas = Vec::with_capacity(entry.files_mb.len());
            for (k, &size) in entry.files_mb.iter().enumerate() {
                if size <= 0.0 {
                    return Err(SimError::BadFileSize { job: label, size });
                }
                let r = grid.add_replica(format!("{label}-f{k}"), size, src_se, 0, None)?;
                src_replicas.push(r);
            }

            let n = entry.files_mb.len();
            jobs.push(JobRt {
                label,
                entry: entry.clone(),
                protocol,
                src_se,
                pinned,
                candidates,
                src_replicas,
                via_replicas: vec![None; n],
                items: vec![ItemState::Waiting; n],
                state: JobState::Queued,
                node: usize::MAX,
                via: usize::MAX,
                next_stream: 0,
                active_streams: 0,
                stage_queue: VecDeque::new(),
                stage_active: false,
                scratch_charged: 0.0,
                compute_until: 0,
            });
        }

        let mut submit_order: Vec<usize> = (0..jobs.len()).collect();
        submit_order.sort_by_key(|&j| (jobs[j].entry.submit_tick, j));

        let n_links = grid.links.len();
        let slots: Vec<u32> = grid.worker_nodes.iter().map(|w| w.slots).collect();
        let n_wn = grid.worker_nodes.len();
        let unfinished_jobs = jobs.len();
        Ok(Sim {
            grid,
            rng,
            opts: opts.clone(),
            wms: Wms::new(workload.policy),
            jobs,
            submit_order,
            next_due: 0,
            queued: VecDeque::new(),
            running: vec![0; n_wn],
            slots,
            scratch_used: vec![0.0; n_wn],
            arena: Vec::new(),
            tags: Vec::new(),
            transfer_procs: Vec::new(),
            compute_procs: Vec::new(),
            per_link: vec![Vec::new(); n_links],
            link_ids,
            active_transfers: 0,
            unfinished_jobs,
            observations: Vec::new(),
            events: Vec::new(),
            failed: Vec::new(),
            now: 0,
        })
    }

    /// Worker nodes (with their data-placement via SE) that have every link
    /// the profile needs. A pinned node with a missing link is a hard error
    /// naming the pair.
    fn route_candidates(
        grid: &Grid,
        label: &str,
        entry: &JobEntry,
        src_se: usize,
        pinned: Option<usize>,
        via_named: Option<usize>,
    ) -> Result<Vec<(usize, Option<usize>)>, SimError> {
        let check_node = |wn: usize| -> Result<Option<usize>, SimError> {
            let require = |src: HostRef, dst: HostRef| -> Result<(), SimError> {
                if grid.find_link(src, dst).is_none() {
                    return Err(SimError::MissingLink {
                        src: grid.host_id(src).to_owned(),
                        dst: grid.host_id(dst).to_owned(),
                    });
                }
                Ok(())
            };
            match entry.profile {
                ProfileKind::RemoteAccess | ProfileKind::StageIn => {
                    require(HostRef::Se(src_se), HostRef::Wn(wn))?;
                    Ok(None)
                }
                ProfileKind::DataPlacement => {
                    let via = match via_named {
                        Some(v) => v,
                        None => *grid.data_centers[grid.worker_nodes[wn].dc]
                            .storage_elements
                            .first()
                            .ok_or_else(|| SimError::NoLocalSe { job: label.to_owned() })?,
                    };
                    require(HostRef::Se(src_se), HostRef::Se(via))?;
                    require(HostRef::Se(via), HostRef::Wn(wn))?;
                    Ok(Some(via))
                }
            }
        };

        if let Some(wn) = pinned {
            let via = check_node(wn)?;
            return Ok(vec![(wn, via)]);
        }
        let mut out = Vec::new();
        for wn in 0..grid.worker_nodes.len() {
            if let Ok(via) = check_node(wn) {
                out.push((wn, via));
            }
        }
        if out.is_empty() {
            return Err(SimError::NoRoute {
                job: label.to_owned(),
                src: entry.src.clone(),
                profile: entry.profile.as_str(),
            });
        }
        Ok(out)
    }

    fn event(&mut self, kind: &'static str, subject: String, detail: String) {
        if self.opts.record_events {
            self.events.push(Event { tick: self.now, kind, subject, detail });
        }
    }

    fn execute(&mut self) {
        while self.now < self.opts.horizon {
            let idle = self.unfinished_jobs == 0
                && self.active_transfers == 0
                && self.next_due == self.submit_order.len();
            if idle {
                break;
            }
            self.phase_background();
            self.phase_driver();
            let completed = self.phase_allocation();
            self.phase_bookkeeping(&completed);
            self.now += 1;
        }
    }

    fn phase_background(&mut self) {
        for i in 0..self.grid.links.len() {
            if self.now % self.grid.links[i].bg_update_period == 0 {
                update_background_load(&mut self.grid.links[i], self.rng.link_rng(i))
                    .expect("sigma validated at build");
            }
        }
    }

    fn phase_driver(&mut self) {
        if self.now > 0 && self.now % self.grid.ddm.sweep_period == 0 {
            let protected: HashSet<usize> = self
                .arena
                .iter()
                .enumerate()
                .filter(|(_, t)| !t.done)
                .map(|(i, _)| self.tags[i].replica)
                .collect();
            let removed = ddm_cleanup(&mut self.grid, self.now, &protected);
            if self.opts.record_events {
                for r in removed {
                    let se = self.grid.replicas[r].se;
                    let file = self.grid.replicas[r].file;
                    let subject = self.grid.files[file].id.clone();
                    let detail = format!("se={}", self.grid.storage_elements[se].id);
                    self.event("replica_expired", subject, detail);
                }
            }
        }

        while self.next_due < self.submit_order.len() {
            let j = self.submit_order[self.next_due];
            if self.jobs[j].entry.submit_tick != self.now {
                break;
            }
            self.next_due += 1;
            self.queued.push_back(j);
            let label = self.jobs[j].label.clone();
            self.event("job_submitted", label, String::new());
        }

        let mut still_queued = VecDeque::new();
        while let Some(j) = self.queued.pop_front() {
            let pinned = self.jobs[j].pinned;
            let cands: Vec<usize> = self.jobs[j].candidates.iter().map(|&(w, _)| w).collect();
            match self.wms.place(pinned, &cands, &self.running, &self.slots) {
                Some(node) => self.place_job(j, node),
                None => still_queued.push_back(j),
            }
        }
        self.queued = still_queued;
    }

    fn place_job(&mut self, j: usize, node: usize) {
        self.running[node] += 1;
        let via = self.jobs[j]
            .candidates
            .iter()
            .find(|&&(w, _)| w == node)
            .and_then(|&(_, v)| v)
            .unwrap_or(usize::MAX);
        {
            let job = &mut self.jobs[j];
            job.state = JobState::Fetching;
            job.node = node;
            job.via = via;
        }
        let label = self.jobs[j].label.clone();
        let detail = format!("node={}", self.grid.worker_nodes[node].id);
        self.event("job_placed", label, detail);

        match self.jobs[j].entry.profile {
            ProfileKind::RemoteAccess => self.start_streams(j),
            ProfileKind::StageIn => {
                self.jobs[j].stage_queue = (0..self.jobs[j].items.len()).collect();
                self.start_next_stage(j);
            }
            ProfileKind::DataPlacement => {
                for item in 0..self.jobs[j].items.len() {
                    if self.jobs[j].state != JobState::Fetching {
                        break;
                    }
                    self.start_placement(j, item);
                }
            }
        }
        self.maybe_finish_inputs(j);
    }

    #[allow(clippy::too_many_arguments)]
    fn register_transfer(
        &mut self,
        link: usize,
        owner: ProcKey,
        owner_threads: u32,
        j: usize,
        item: usize,
        leg: Leg,
        replica: usize,
        profile: ProfileKind,
    ) {
        let file = self.grid.replicas[replica].file;
        let size_mb = self.grid.files[file].size_mb;
        let id = self.arena.len() as u64;
        self.arena.push(ActiveTransfer {
            id,
            link,
            protocol: self.jobs[j].protocol,
            owner,
            owner_threads,
            job: Some(j),
            profile,
            file,
            size_mb,
            remaining_mb: size_mb,
            start_tick: self.now + 1,
            conth_mb: 0.0,
            conpr_mb: 0.0,
            done: false,
        });
        self.tags.push(TransferTag { job: j, item, leg, replica });
        self.transfer_procs.push(SimProcess::new(ProcId::Transfer(id)));
        self.per_link[link].push(id as usize);
        self.active_transfers += 1;
        if self.opts.record_events {
            let subject = format!("xfer-{id}");
            let detail = format!(
                "job={} link={} file={} size={}",
                self.jobs[j].label, self.link_ids[link], self.grid.files[file].id, size_mb
            );
            self.event("transfer_started", subject, detail);
        }
    }

    fn start_streams(&mut self, j: usize) {
        while self.jobs[j].state == JobState::Fetching
            && self.jobs[j].active_streams < self.jobs[j].entry.n_threads
            && self.jobs[j].next_stream < self.jobs[j].items.len()
        {
            let item = self.jobs[j].next_stream;
            self.jobs[j].next_stream += 1;
            let replica = self.jobs[j].src_replicas[item];
            if self.grid.replicas[replica].removed {
                self.fail_job(j, format!("source replica of item {item} expired"));
                return;
            }
            let node = self.jobs[j].node;
            let link = self
                .grid
                .find_link(HostRef::Se(self.jobs[j].src_se), HostRef::Wn(node))
                .expect("validated route");
            self.jobs[j].items[item] = ItemState::Streaming;
            self.jobs[j].active_streams += 1;
            let threads = self.jobs[j].entry.n_threads;
            self.register_transfer(
                link,
                ProcKey::Stream { job: j },
                threads,
                j,
                item,
                Leg::Stream,
                replica,
                ProfileKind::RemoteAccess,
            );
        }
    }

    fn start_next_stage(&mut self, j: usize) {
        if self.jobs[j].stage_active || self.jobs[j].state != JobState::Fetching {
            return;
        }
        let Some(item) = self.jobs[j].stage_queue.pop_front() else {
            return;
        };
        // Stage-in reads the placed replica for data placement, the source
        // replica otherwise, over the corresponding local link.
        let (replica, src) = match self.jobs[j].entry.profile {
            ProfileKind::DataPlacement => {
                (self.jobs[j].via_replicas[item].expect("placed before staging"), self.jobs[j].via)
            }
            _ => (self.jobs[j].src_replicas[item], self.jobs[j].src_se),
        };
        if self.grid.replicas[replica].removed {
            self.fail_job(j, format!("staged replica of item {item} expired"));
            return;
        }
        let node = self.jobs[j].node;
        let size = self.grid.replica_size(replica);
        if let Some(scratch) = self.grid.worker_nodes[node].scratch_mb {
            let free = scratch - self.scratch_used[node];
            if size > free {
                let reason = format!(
                    "scratch exhausted on {} (need {size} MB, {free} MB free)",
                    self.grid.worker_nodes[node].id
                );
                self.fail_job(j, reason);
                return;
            }
        }
        self.scratch_used[node] += size;
        self.jobs[j].scratch_charged += size;
        let link =
            self.grid.find_link(HostRef::Se(src), HostRef::Wn(node)).expect("validated route");
        self.jobs[j].items[item] = ItemState::Staging;
        self.jobs[j].stage_active = true;
        self.register_transfer(
            link,
            ProcKey::StageIn { job: j },
            1,
            j,
            item,
            Leg::StageIn,
            replica,
            ProfileKind::StageIn,
        );
    }

    fn start_placement(&mut self, j: usize, item: usize) {
        let replica = self.jobs[j].src_replicas[item];
        if self.grid.replicas[replica].removed {
            self.fail_job(j, format!("source replica of item {item} expired"));
            return;
        }
        let via = self.jobs[j].via;
        let file = self.grid.replicas[replica].file;
        if let Err(e) = self.grid.admit_placement(file, via) {
            self.fail_job(j, e.to_string());
            return;
        }
        let link = self
            .grid
            .find_link(HostRef::Se(self.jobs[j].src_se), HostRef::Se(via))
            .expect("validated route");
        self.jobs[j].items[item] = ItemState::Placing;
        let uid = self.arena.len() as u64;
        self.register_transfer(
            link,
            ProcKey::Placement { uid },
            1,
            j,
            item,
            Leg::Placement,
            replica,
            ProfileKind::DataPlacement,
        );
    }

    fn phase_allocation(&mut self) -> Vec<usize> {
        let mut completed = Vec::new();
        for link in 0..self.per_link.len() {
            if self.per_link[link].is_empty() {
                continue;
            }
            let now = self.now;
            let arena_ref = &self.arena;
            let on_link: Vec<usize> =
                self.per_link[link].iter().copied().filter(|&t| arena_ref[t].eligible(now)).collect();
            if on_link.is_empty() {
                continue;
            }
            let credits = advance_link_tick(
                &mut self.grid.links[link],
                &mut self.arena,
                &on_link,
                &self.grid.protocols,
            );
            for c in &credits {
                if self.transfer_procs[c.transfer].state == ProcState::Pending {
                    self.transfer_procs[c.transfer].advance(ProcState::Active);
                }
                if c.completed {
                    completed.push(c.transfer);
                }
            }
            let arena = &self.arena;
            self.per_link[link].retain(|&t| !arena[t].done);
        }
        completed
    }

    fn phase_bookkeeping(&mut self, completed: &[usize]) {
        for &t in completed {
            self.finalize_transfer(t);
        }
        for j in 0..self.jobs.len() {
            if self.jobs[j].state == JobState::Computing && self.jobs[j].compute_until <= self.now {
                self.finish_job(j);
            }
        }
    }

    fn finalize_transfer(&mut self, t: usize) {
        self.transfer_procs[t].advance(ProcState::Done);
        self.active_transfers -= 1;
        let tag = self.tags[t];
        let (t_ticks, tr_id) = {
            let tr = &self.arena[t];
            (self.now - tr.start_tick + 1, tr.id)
        };
        let obs = {
            let tr = &self.arena[t];
            Observation {
                t_ticks,
                s_mb: tr.size_mb,
                conth_mb: tr.conth_mb,
                conpr_mb: tr.conpr_mb,
                start_tick: tr.start_tick,
                link: self.link_ids[tr.link].clone(),
                job: self.jobs[tag.job].label.clone(),
                profile: tr.profile,
            }
        };
        if self.opts.record_events {
            let subject = format!("xfer-{tr_id}");
            let detail = format!(
                "T={} S={} conth={} conpr={}",
                obs.t_ticks, obs.s_mb, obs.conth_mb, obs.conpr_mb
            );
            self.event("transfer_done", subject, detail);
        }
        self.observations.push(obs);

        let j = tag.job;
        match tag.leg {
            Leg::Stream => {
                self.jobs[j].items[tag.item] = ItemState::Done;
                self.jobs[j].active_streams -= 1;
                if self.jobs[j].state == JobState::Fetching {
                    self.start_streams(j);
                }
            }
            Leg::StageIn => {
                self.jobs[j].items[tag.item] = ItemState::Done;
                self.jobs[j].stage_active = false;
                self.start_next_stage(j);
            }
            Leg::Placement => {
                let file = self.grid.replicas[tag.replica].file;
                let via = self.jobs[j].via;
                let ttl = self.grid.ddm.placement_ttl;
                let placed = self.grid.materialize_replica(file, via, self.now, ttl);
                self.jobs[j].via_replicas[tag.item] = Some(placed);
                if self.opts.record_events {
                    let subject = self.grid.files[file].id.clone();
                    let detail = format!("se={}", self.grid.storage_elements[via].id);
                    self.event("replica_placed", subject, detail);
                }
                self.jobs[j].items[tag.item] = ItemState::AwaitStage;
                self.jobs[j].stage_queue.push_back(tag.item);
                self.start_next_stage(j);
            }
        }
        self.maybe_finish_inputs(j);
    }

    fn maybe_finish_inputs(&mut self, j: usize) {
        if self.jobs[j].state != JobState::Fetching {
            return;
        }
        if !self.jobs[j].items.iter().all(|&s| s == ItemState::Done) {
            return;
        }
        let node = self.jobs[j].node;
        let mips = self.grid.worker_nodes[node].mips;
        let ticks = (self.jobs[j].entry.compute_mi / mips).ceil() as u64;
        if ticks == 0 {
            self.finish_job(j);
        } else {
            self.jobs[j].state = JobState::Computing;
            self.jobs[j].compute_until = self.now + ticks;
            let mut proc = SimProcess::new(ProcId::Compute(j));
            proc.advance(ProcState::Active);
            self.compute_procs.push(proc);
        }
    }

    fn finish_job(&mut self, j: usize) {
        if let Some(p) = self
            .compute_procs
            .iter_mut()
            .find(|p| p.id == ProcId::Compute(j) && p.state == ProcState::Active)
        {
            p.advance(ProcState::Done);
        }
        self.release_job(j, JobState::Done);
        let label = self.jobs[j].label.clone();
        self.event("job_done", label, String::new());
    }

    fn fail_job(&mut self, j: usize, reason: String) {
        // Abort outstanding transfers of this job; they leave no observation.
        let mine: Vec<usize> = self
            .tags
            .iter()
            .enumerate()
            .filter(|&(t, tag)| tag.job == j && !self.arena[t].done)
            .map(|(t, _)| t)
            .collect();
        for t in mine {
            self.arena[t].done = true;
            self.transfer_procs[t].cancel();
            self.active_transfers -= 1;
            if matches!(self.tags[t].leg, Leg::Placement) {
                // The admission reserved space and quota at the destination;
                // an aborted copy gives both back.
                let file = self.arena[t].file;
                self.grid.revoke_placement(file, self.jobs[j].via);
            }
            let link = self.arena[t].link;
            let arena = &self.arena;
            self.per_link[link].retain(|&x| !arena[x].done);
        }
        let label = self.jobs[j].label.clone();
        self.event("job_failed", label.clone(), reason.clone());
        self.release_job(j, JobState::Failed);
        self.failed.push((label, reason));
    }

    fn release_job(&mut self, j: usize, terminal: JobState) {
        let node = self.jobs[j].node;
        let charged = self.jobs[j].scratch_charged;
        if node != usize::MAX {
            self.running[node] -= 1;
            self.scratch_used[node] -= charged;
            self.jobs[j].scratch_charged = 0.0;
        }
        self.jobs[j].state = terminal;
        self.unfinished_jobs -= 1;
    }

    fn finish(self) -> SimulationResult {
        let jobs_completed = self.jobs.iter().filter(|x| x.state == JobState::Done).count();
        let jobs_unfinished = self
            .jobs
            .iter()
            .filter(|x| !matches!(x.state, JobState::Done | JobState::Failed))
            .count();
        SimulationResult {
            observations: self.observations,
            events: self.events,
            end_tick: self.now,
            jobs_completed,
            jobs_failed: self.failed,
            jobs_unfinished,
        }
    }
}
