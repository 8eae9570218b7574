//! Chunk-based file transfers over fair-share links.
//!
//! Every tick, each link divides its bandwidth equally among the processes
//! holding it: the sampled background load plus every campaign process. A
//! process splits its share equally among its threads, loses the protocol
//! overhead fraction, and credits the rest to the transfer. The final tick is
//! truncated to the bytes still missing.

use serde::{Deserialize, Serialize};

use crate::grid::{Protocol, VirtualLink};

/// The three data-access profiles a transfer can belong to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProfileKind {
    /// Replication between storage elements ahead of processing, followed by
    /// a local stage-in.
    DataPlacement,
    /// Copy from a local storage element onto worker-node scratch.
    StageIn,
    /// Direct streaming from a possibly remote storage element.
    RemoteAccess,
}

impl ProfileKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ProfileKind::DataPlacement => "data_placement",
            ProfileKind::StageIn => "stage_in",
            ProfileKind::RemoteAccess => "remote_access",
        }
    }
}

/// Identity of the bandwidth-holding process that owns a transfer.
///
/// Campaign load counts distinct owners, not transfers: a job streaming four
/// files over one link is a single process with four threads, while four
/// data-placement copies are four processes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ProcKey {
    /// A job's remote-access streaming process.
    Stream { job: usize },
    /// A job's stage-in process (always single-threaded).
    StageIn { job: usize },
    /// An individual data-placement copy.
    Placement { uid: u64 },
}

/// A transfer currently holding (or about to hold) bandwidth on one link.
#[derive(Debug, Clone)]
pub struct ActiveTransfer {
    pub id: u64,
    pub link: usize,
    pub protocol: usize,
    pub owner: ProcKey,
    /// Thread divisor of the owning process (the job's declared thread count
    /// for streams, 1 for stage-in and placement processes).
    pub owner_threads: u32,
    /// Owning job, if any; data-placement copies triggered by a job keep it
    /// for observation labelling.
    pub job: Option<usize>,
    pub profile: ProfileKind,
    pub file: usize,
    pub size_mb: f64,
    pub remaining_mb: f64,
    /// First tick the transfer holds bandwidth (the tick after registration).
    pub start_tick: u64,
    /// Competing traffic from sibling threads of the same process, MB.
    pub conth_mb: f64,
    /// Competing traffic from other campaign processes on the link, MB.
    pub conpr_mb: f64,
    pub done: bool,
}

impl ActiveTransfer {
    pub fn eligible(&self, now: u64) -> bool {
        !self.done && now >= self.start_tick
    }
}

/// Listing-style per-thread chunk for one tick.
///
/// `link.campaign_load` must already count the owning process. The result is
/// strictly positive whenever bandwidth is.
pub fn chunk_size(link: &VirtualLink, n_threads: u32, protocol: &Protocol) -> f64 {
    debug_assert!(link.campaign_load >= 1);
    debug_assert!(n_threads >= 1);
    let mut chunk =
        link.bandwidth / (link.background_load + f64::from(link.campaign_load)) / f64::from(n_threads);
    chunk -= chunk * protocol.overhead;
    chunk
}

/// Credit granted to one transfer during a tick.
#[derive(Debug, Clone, Copy)]
pub struct ChunkCredit {
    /// Index into the transfer arena.
    pub transfer: usize,
    pub credited_mb: f64,
    pub completed: bool,
}

/// Advances one link by one tick: recomputes the campaign load, credits every
/// eligible transfer its truncated chunk and accumulates the competing-traffic
/// observables.
///
/// `on_link` indexes `arena` and must list exactly the eligible transfers on
/// this link, in registration order.
pub fn advance_link_tick(
    link: &mut VirtualLink,
    arena: &mut [ActiveTransfer],
    on_link: &[usize],
    protocols: &[Protocol],
) -> Vec<ChunkCredit> {
    let mut owners: Vec<(ProcKey, f64)> = Vec::new();
    for &t in on_link {
        let owner = arena[t].owner;
        if !owners.iter().any(|(o, _)| *o == owner) {
            owners.push((owner, 0.0));
        }
    }
    link.campaign_load = owners.len() as u32;
    if owners.is_empty() {
        return Vec::new();
    }

    // Chunks are computed against the frozen loads before any credit lands,
    // so allocation within the tick is order-independent.
    let mut credits = Vec::with_capacity(on_link.len());
    for &t in on_link {
        let tr = &arena[t];
        let chunk = chunk_size(link, tr.owner_threads, &protocols[tr.protocol]);
        let credited = chunk.min(tr.remaining_mb);
        credits.push(ChunkCredit { transfer: t, credited_mb: credited, completed: false });
    }

    let mut total = 0.0;
    for c in &credits {
        let owner = arena[c.transfer].owner;
        let slot = owners.iter_mut().find(|(o, _)| *o == owner).unwrap();
        slot.1 += c.credited_mb;
        total += c.credited_mb;
    }

    for c in &mut credits {
        let tr = &mut arena[c.transfer];
        let own_process: f64 = owners.iter().find(|(o, _)| *o == tr.owner).unwrap().1;
        tr.conth_mb += own_process - c.credited_mb;
        tr.conpr_mb += total - own_process;
        tr.remaining_mb -= c.credited_mb;
        if tr.remaining_mb <= 0.0 {
            tr.remaining_mb = 0.0;
            tr.done = true;
            c.completed = true;
        }
    }
    credits
}

/// Re-draws the link's background load from N(bg_mu, bg_sigma), clamped at
/// zero (load is a count of competing processes and cannot be negative).
/// Returns the applied value.
pub fn update_background_load<R: rand::Rng + ?Sized>(
    link: &mut VirtualLink,
    rng: &mut R,
) -> Result<f64, crate::engine::SimError> {
    let draw = crate::engine::normal_draw(rng, link.bg_mu, link.bg_sigma)?;
    link.background_load = draw.max(0.0);
    Ok(link.background_load)
}
