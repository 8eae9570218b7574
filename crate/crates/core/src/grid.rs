//! Static grid topology and its mutable storage state.
//!
//! A grid is a set of data centres holding storage elements (SEs) and worker
//! nodes (WNs), joined by uni-directional virtual links. Links in opposite
//! directions between the same pair of hosts are independent objects with
//! their own bandwidth and background-load parameters. All volumes are MB and
//! bandwidth is MB per tick (1 tick = 1 s), converted from Mbps on build.

use std::collections::HashMap;

use thiserror::Error;

use crate::config::{
    DataCenterConfig, LinkConfig, ProtocolConfig, SeConfig, TopologyConfig, WnConfig,
};

/// Reference to a host by arena index, either a storage element or a worker node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum HostRef {
    Se(usize),
    Wn(usize),
}

/// Transfer protocol with its per-chunk efficiency loss.
#[derive(Debug, Clone, PartialEq)]
pub struct Protocol {
    pub name: String,
    /// Fraction of every chunk lost to protocol overhead, in `[0, 1)`.
    pub overhead: f64,
}

#[derive(Debug, Clone)]
pub struct StorageElement {
    pub id: String,
    /// Index of the owning data centre.
    pub dc: usize,
    pub capacity_mb: f64,
    /// Sum of the sizes of resident replicas.
    pub used_mb: f64,
    /// Admissible data-placement volume; `None` means unlimited.
    pub dp_quota_mb: Option<f64>,
    /// Data-placement volume admitted so far, counted against the quota.
    pub dp_placed_mb: f64,
}

impl StorageElement {
    pub fn free_mb(&self) -> f64 {
        self.capacity_mb - self.used_mb
    }
}

#[derive(Debug, Clone)]
pub struct WorkerNode {
    pub id: String,
    pub dc: usize,
    /// Compute speed used to convert a job's MI into whole ticks.
    pub mips: f64,
    /// Concurrent job capacity.
    pub slots: u32,
    /// Local scratch space available to staged-in inputs; `None` is unlimited.
    pub scratch_mb: Option<f64>,
}

/// One direction of traffic between two hosts.
///
/// `background_load` and `campaign_load` are the live state used by the chunk
/// allocator: the first is the stochastic non-campaign process count sampled
/// from N(bg_mu, bg_sigma) and clamped at zero, the second the number of
/// campaign processes currently holding bandwidth.
#[derive(Debug, Clone)]
pub struct VirtualLink {
    pub src: HostRef,
    pub dst: HostRef,
    /// MB per tick.
    pub bandwidth: f64,
    pub bg_mu: f64,
    pub bg_sigma: f64,
    /// Ticks between background-load re-draws.
    pub bg_update_period: u64,
    pub background_load: f64,
    pub campaign_load: u32,
}

#[derive(Debug, Clone)]
pub struct FileMeta {
    pub id: String,
    pub size_mb: f64,
}

/// A copy of a file resident on a storage element.
#[derive(Debug, Clone)]
pub struct Replica {
    pub file: usize,
    pub se: usize,
    pub created_at: u64,
    /// Lease in ticks; expired replicas are removed by the DDM sweep.
    pub ttl: Option<u64>,
    pub removed: bool,
    /// True when the copy counts against the element's data-placement quota.
    pub dp: bool,
}

impl Replica {
    pub fn expired(&self, now: u64) -> bool {
        match self.ttl {
            Some(ttl) => now >= self.created_at + ttl,
            None => false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct DataCenter {
    pub id: String,
    pub storage_elements: Vec<usize>,
    pub worker_nodes: Vec<usize>,
}

/// Data-management parameters: how often the replica sweep runs and which
/// lease newly placed replicas receive.
#[derive(Debug, Clone, PartialEq)]
pub struct DdmParams {
    pub sweep_period: u64,
    pub placement_ttl: Option<u64>,
}

/// Override of protocol overhead and link background parameters, optionally
/// scoped to one protocol and a subset of links.
#[derive(Debug, Clone)]
pub struct AppliedSetting {
    pub overhead: f64,
    pub bg_mu: f64,
    pub bg_sigma: f64,
    pub protocol: Option<String>,
    pub links: Option<Vec<String>>,
}

#[derive(Debug, Error)]
pub enum TopologyError {
    #[error("duplicate identifier `{0}`")]
    DuplicateId(String),
    #[error("link references unknown host `{0}`")]
    UnknownHost(String),
    #[error("duplicate link {0}")]
    DuplicateLink(String),
    #[error("link from `{0}` to itself")]
    SelfLink(String),
    #[error("{field}: {detail}")]
    InvalidValue { field: String, detail: String },
    #[error("unknown protocol `{0}`")]
    UnknownProtocol(String),
    #[error("unknown link `{0}`")]
    UnknownLink(String),
}

#[derive(Debug, Error)]
pub enum StorageError {
    #[error("storage element `{se}` cannot hold {need_mb} MB ({free_mb} MB free)")]
    CapacityExceeded { se: String, need_mb: f64, free_mb: f64 },
    #[error("data-placement quota on `{se}` cannot admit {need_mb} MB ({left_mb} MB left)")]
    QuotaExceeded { se: String, need_mb: f64, left_mb: f64 },
}

fn invalid(field: impl Into<String>, detail: impl Into<String>) -> TopologyError {
    TopologyError::InvalidValue { field: field.into(), detail: detail.into() }
}

/// The full topology plus live storage state (files and replicas).
#[derive(Debug, Clone)]
pub struct Grid {
    pub protocols: Vec<Protocol>,
    pub data_centers: Vec<DataCenter>,
    pub storage_elements: Vec<StorageElement>,
    pub worker_nodes: Vec<WorkerNode>,
    pub links: Vec<VirtualLink>,
    pub files: Vec<FileMeta>,
    pub replicas: Vec<Replica>,
    pub ddm: DdmParams,
    hosts: HashMap<String, HostRef>,
    link_index: HashMap<(HostRef, HostRef), usize>,
    protocol_index: HashMap<String, usize>,
}

impl Grid {
    /// Builds and validates a grid from its configuration document.
    pub fn build(cfg: &TopologyConfig) -> Result<Self, TopologyError> {
        let mut grid = Grid {
            protocols: Vec::new(),
            data_centers: Vec::new(),
            storage_elements: Vec::new(),
            worker_nodes: Vec::new(),
            links: Vec::new(),
            files: Vec::new(),
            replicas: Vec::new(),
            ddm: DdmParams {
                sweep_period: cfg.ddm.sweep_period,
                placement_ttl: cfg.ddm.placement_ttl,
            },
            hosts: HashMap::new(),
            link_index: HashMap::new(),
            protocol_index: HashMap::new(),
        };
        if grid.ddm.sweep_period == 0 {
            return Err(invalid("ddm.sweep_period", "must be at least 1 tick"));
        }

        for p in &cfg.protocols {
            if !(0.0..1.0).contains(&p.overhead) {
                return Err(invalid(
                    format!("protocol `{}` overhead", p.name),
                    format!("{} outside [0, 1)", p.overhead),
                ));
            }
            if grid.protocol_index.insert(p.name.clone(), grid.protocols.len()).is_some() {
                return Err(TopologyError::DuplicateId(p.name.clone()));
            }
            grid.protocols.push(Protocol { name: p.name.clone(), overhead: p.overhead });
        }

        let mut dc_ids = HashMap::new();
        for dc_cfg in &cfg.data_centers {
            let dc_idx = grid.data_centers.len();
            if dc_ids.insert(dc_cfg.id.clone(), dc_idx).is_some() {
                return Err(TopologyError::DuplicateId(dc_cfg.id.clone()));
            }
            let mut dc = DataCenter {
                id: dc_cfg.id.clone(),
                storage_elements: Vec::new(),
                worker_nodes: Vec::new(),
            };
            for se in &dc_cfg.storage_elements {
                if se.capacity_mb < 0.0 {
                    return Err(invalid(format!("se `{}` capacity_mb", se.id), "negative"));
                }
                let idx = grid.storage_elements.len();
                if grid.hosts.insert(se.id.clone(), HostRef::Se(idx)).is_some() {
                    return Err(TopologyError::DuplicateId(se.id.clone()));
                }
                grid.storage_elements.push(StorageElement {
                    id: se.id.clone(),
                    dc: dc_idx,
                    capacity_mb: se.capacity_mb,
                    used_mb: 0.0,
                    dp_quota_mb: se.dp_quota_mb,
                    dp_placed_mb: 0.0,
                });
                dc.storage_elements.push(idx);
            }
            for wn in &dc_cfg.worker_nodes {
                if wn.mips <= 0.0 {
                    return Err(invalid(format!("wn `{}` mips", wn.id), "must be positive"));
                }
                if wn.slots == 0 {
                    return Err(invalid(format!("wn `{}` slots", wn.id), "must be at least 1"));
                }
                let idx = grid.worker_nodes.len();
                if grid.hosts.insert(wn.id.clone(), HostRef::Wn(idx)).is_some() {
                    return Err(TopologyError::DuplicateId(wn.id.clone()));
                }
                grid.worker_nodes.push(WorkerNode {
                    id: wn.id.clone(),
                    dc: dc_idx,
                    mips: wn.mips,
                    slots: wn.slots,
                    scratch_mb: wn.scratch_mb,
                });
                dc.worker_nodes.push(idx);
            }
            grid.data_centers.push(dc);
        }

        for l in &cfg.links {
            let src = *grid
                .hosts
                .get(&l.src)
                .ok_or_else(|| TopologyError::UnknownHost(l.src.clone()))?;
            let dst = *grid
                .hosts
                .get(&l.dst)
                .ok_or_else(|| TopologyError::UnknownHost(l.dst.clone()))?;
            if src == dst {
                return Err(TopologyError::SelfLink(l.src.clone()));
            }
            if l.bandwidth_mbps <= 0.0 {
                return Err(invalid(
                    format!("link {}->{} bandwidth_mbps", l.src, l.dst),
                    "must be positive",
                ));
            }
            if l.bg_sigma < 0.0 {
                return Err(invalid(format!("link {}->{} bg_sigma", l.src, l.dst), "negative"));
            }
            if l.bg_update_period == 0 {
                return Err(invalid(
                    format!("link {}->{} bg_update_period", l.src, l.dst),
                    "must be at least 1 tick",
                ));
            }
            let idx = grid.links.len();
            if grid.link_index.insert((src, dst), idx).is_some() {
                return Err(TopologyError::DuplicateLink(format!("{}->{}", l.src, l.dst)));
            }
            grid.links.push(VirtualLink {
                src,
                dst,
                // Mbps to MB per tick; ticks are seconds.
                bandwidth: l.bandwidth_mbps / 8.0,
                bg_mu: l.bg_mu,
                bg_sigma: l.bg_sigma,
                bg_update_period: l.bg_update_period,
                background_load: 0.0,
                campaign_load: 0,
            });
        }

        Ok(grid)
    }

    /// Emits a configuration document equivalent to this grid's static state.
    pub fn to_config(&self) -> TopologyConfig {
        TopologyConfig {
            protocols: self
                .protocols
                .iter()
                .map(|p| ProtocolConfig { name: p.name.clone(), overhead: p.overhead })
                .collect(),
            data_centers: self
                .data_centers
                .iter()
                .map(|dc| DataCenterConfig {
                    id: dc.id.clone(),
                    storage_elements: dc
                        .storage_elements
                        .iter()
                        .map(|&i| {
                            let se = &self.storage_elements[i];
                            SeConfig {
                                id: se.id.clone(),
                                capacity_mb: se.capacity_mb,
                                dp_quota_mb: se.dp_quota_mb,
                            }
                        })
                        .collect(),
                    worker_nodes: dc
                        .worker_nodes
                        .iter()
                        .map(|&i| {
                            let wn = &self.worker_nodes[i];
                            WnConfig {
                                id: wn.id.clone(),
                                mips: wn.mips,
                                slots: wn.slots,
                                scratch_mb: wn.scratch_mb,
                            }
                        })
                        .collect(),
                })
                .collect(),
            links: self
                .links
                .iter()
                .map(|l| LinkConfig {
                    src: self.host_id(l.src).to_owned(),
                    dst: self.host_id(l.dst).to_owned(),
                    bandwidth_mbps: l.bandwidth * 8.0,
                    bg_mu: l.bg_mu,
                    bg_sigma: l.bg_sigma,
                    bg_update_period: l.bg_update_period,
                })
                .collect(),
            ddm: crate::config::DdmSection {
                sweep_period: self.ddm.sweep_period,
                placement_ttl: self.ddm.placement_ttl,
            },
        }
    }

    pub fn host(&self, id: &str) -> Option<HostRef> {
        self.hosts.get(id).copied()
    }

    pub fn host_id(&self, host: HostRef) -> &str {
        match host {
            HostRef::Se(i) => &self.storage_elements[i].id,
            HostRef::Wn(i) => &self.worker_nodes[i].id,
        }
    }

    pub fn protocol(&self, name: &str) -> Option<usize> {
        self.protocol_index.get(name).copied()
    }

    /// Looks up the directed link from `src` to `dst`, if one is declared.
    pub fn find_link(&self, src: HostRef, dst: HostRef) -> Option<usize> {
        self.link_index.get(&(src, dst)).copied()
    }

    /// Canonical `src->dst` name of a link, used in logs and observations.
    pub fn link_id(&self, link: usize) -> String {
        let l = &self.links[link];
        format!("{}->{}", self.host_id(l.src), self.host_id(l.dst))
    }

    pub fn find_link_by_id(&self, id: &str) -> Option<usize> {
        (0..self.links.len()).find(|&i| self.link_id(i) == id)
    }

    /// Registers a new file with a replica on `se`, charging its capacity.
    pub fn add_replica(
        &mut self,
        file_id: String,
        size_mb: f64,
        se: usize,
        now: u64,
        ttl: Option<u64>,
    ) -> Result<usize, StorageError> {
        let elem = &mut self.storage_elements[se];
        if elem.used_mb + size_mb > elem.capacity_mb {
            return Err(StorageError::CapacityExceeded {
                se: elem.id.clone(),
                need_mb: size_mb,
                free_mb: elem.free_mb(),
            });
        }
        elem.used_mb += size_mb;
        let file = self.files.len();
        self.files.push(FileMeta { id: file_id, size_mb });
        let idx = self.replicas.len();
        self.replicas.push(Replica { file, se, created_at: now, ttl, removed: false, dp: false });
        Ok(idx)
    }

    /// Admits a data-placement copy of `file` onto `se`, reserving capacity
    /// and quota up front. The check is atomic: free space and quota headroom
    /// are both verified before any state changes. The replica itself appears
    /// only when the copy completes (`materialize_replica`); an aborted copy
    /// must return its reservation via `revoke_placement`.
    pub fn admit_placement(&mut self, file: usize, se: usize) -> Result<(), StorageError> {
        let size_mb = self.files[file].size_mb;
        let elem = &mut self.storage_elements[se];
        let headroom = elem.free_mb();
        if size_mb > headroom {
            return Err(StorageError::QuotaExceeded {
                se: elem.id.clone(),
                need_mb: size_mb,
                left_mb: headroom,
            });
        }
        if let Some(quota) = elem.dp_quota_mb {
            let left = quota - elem.dp_placed_mb;
            if size_mb > left {
                return Err(StorageError::QuotaExceeded {
                    se: elem.id.clone(),
                    need_mb: size_mb,
                    left_mb: left,
                });
            }
        }
        elem.used_mb += size_mb;
        elem.dp_placed_mb += size_mb;
        Ok(())
    }

    /// Records the replica of a completed, previously admitted placement.
    /// Storage was already charged at admission.
    pub fn materialize_replica(
        &mut self,
        file: usize,
        se: usize,
        now: u64,
        ttl: Option<u64>,
    ) -> usize {
        let idx = self.replicas.len();
        self.replicas.push(Replica { file, se, created_at: now, ttl, removed: false, dp: true });
        idx
    }

    /// Returns the reservation of an admitted but never materialized
    /// placement (the copy was aborted mid-transfer).
    pub fn revoke_placement(&mut self, file: usize, se: usize) {
        let size_mb = self.files[file].size_mb;
        let elem = &mut self.storage_elements[se];
        elem.used_mb -= size_mb;
        elem.dp_placed_mb -= size_mb;
    }

    /// Copies an existing file onto `se` under the data-placement quota, in
    /// one step (admission plus materialization).
    pub fn place_replica(
        &mut self,
        file: usize,
        se: usize,
        now: u64,
        ttl: Option<u64>,
    ) -> Result<usize, StorageError> {
        self.admit_placement(file, se)?;
        Ok(self.materialize_replica(file, se, now, ttl))
    }

    /// Releases a replica and returns its storage (and, for data-placement
    /// copies, quota headroom) to the element.
    pub fn remove_replica(&mut self, replica: usize) {
        let r = &mut self.replicas[replica];
        if r.removed {
            return;
        }
        r.removed = true;
        let size = self.files[r.file].size_mb;
        self.storage_elements[r.se].used_mb -= size;
        if r.dp {
            self.storage_elements[r.se].dp_placed_mb -= size;
        }
    }

    pub fn replica_size(&self, replica: usize) -> f64 {
        self.files[self.replicas[replica].file].size_mb
    }

    /// Applies a protocol-overhead and background-load override.
    pub fn apply_setting(&mut self, s: &AppliedSetting) -> Result<(), TopologyError> {
        if !(0.0..1.0).contains(&s.overhead) {
            return Err(invalid("setting overhead", format!("{} outside [0, 1)", s.overhead)));
        }
        if s.bg_sigma < 0.0 {
            return Err(invalid("setting sigma", "negative"));
        }
        match &s.protocol {
            Some(name) => {
                let idx = self
                    .protocol(name)
                    .ok_or_else(|| TopologyError::UnknownProtocol(name.clone()))?;
                self.protocols[idx].overhead = s.overhead;
            }
            None => {
                for p in &mut self.protocols {
                    p.overhead = s.overhead;
                }
            }
        }
        match &s.links {
            Some(ids) => {
                for id in ids {
                    let idx = self
                        .find_link_by_id(id)
                        .ok_or_else(|| TopologyError::UnknownLink(id.clone()))?;
                    self.links[idx].bg_mu = s.bg_mu;
                    self.links[idx].bg_sigma = s.bg_sigma;
                }
            }
            None => {
                for l in &mut self.links {
                    l.bg_mu = s.bg_mu;
                    l.bg_sigma = s.bg_sigma;
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::TopologyConfig;
    use proptest::prelude::*;

    fn two_dc_config() -> TopologyConfig {
        serde_json::from_str(
            r#"{
              "protocols": [{"name": "webdav", "overhead": 0.02}],
              "data_centers": [
                {"id": "dc_a",
                 "storage_elements": [{"id": "se_a", "capacity_mb": 100000.0}],
                 "worker_nodes": [{"id": "wn_a", "mips": 1000.0, "slots": 4, "scratch_mb": 50000.0}]},
                {"id": "dc_b",
                 "storage_elements": [{"id": "se_b", "capacity_mb": 100000.0, "dp_quota_mb": 5000.0}]}
              ],
              "links": [
                {"src": "se_a", "dst": "wn_a", "bandwidth_mbps": 10000.0,
                 "bg_mu": 36.9, "bg_sigma": 14.4, "bg_update_period": 60},
                {"src": "se_a", "dst": "se_b", "bandwidth_mbps": 800.0},
                {"src": "se_b", "dst": "se_a", "bandwidth_mbps": 400.0}
              ]
            }"#,
        )
        .unwrap()
    }

    #[test]
    fn bandwidth_converted_to_mb_per_tick() {
        let grid = Grid::build(&two_dc_config()).unwrap();
        assert_eq!(grid.links[0].bandwidth, 1250.0);
        assert_eq!(grid.links[1].bandwidth, 100.0);
    }

    #[test]
    fn links_are_directional() {
        let grid = Grid::build(&two_dc_config()).unwrap();
        let se_a = grid.host("se_a").unwrap();
        let wn_a = grid.host("wn_a").unwrap();
        let se_b = grid.host("se_b").unwrap();
        assert!(grid.find_link(se_a, wn_a).is_some());
        assert!(grid.find_link(wn_a, se_a).is_none());
        // Opposite directions resolve to distinct links with their own parameters.
        let ab = grid.find_link(se_a, se_b).unwrap();
        let ba = grid.find_link(se_b, se_a).unwrap();
        assert_ne!(ab, ba);
        assert_eq!(grid.links[ab].bandwidth, 100.0);
        assert_eq!(grid.links[ba].bandwidth, 50.0);
    }

    #[test]
    fn duplicate_host_id_rejected() {
        let mut cfg = two_dc_config();
        cfg.data_centers[1].storage_elements[0].id = "se_a".into();
        assert!(matches!(Grid::build(&cfg), Err(TopologyError::DuplicateId(id)) if id == "se_a"));
    }

    #[test]
    fn dangling_link_rejected() {
        let mut cfg = two_dc_config();
        cfg.links[0].dst = "nowhere".into();
        assert!(matches!(Grid::build(&cfg), Err(TopologyError::UnknownHost(h)) if h == "nowhere"));
    }

    #[test]
    fn duplicate_link_rejected() {
        let mut cfg = two_dc_config();
        let dup = cfg.links[0].clone();
        cfg.links.push(dup);
        assert!(matches!(Grid::build(&cfg), Err(TopologyError::DuplicateLink(_))));
    }

    #[test]
    fn overhead_out_of_range_rejected() {
        let mut cfg = two_dc_config();
        cfg.protocols[0].overhead = 1.0;
        assert!(Grid::build(&cfg).is_err());
        cfg.protocols[0].overhead = -0.1;
        assert!(Grid::build(&cfg).is_err());
    }

    #[test]
    fn topology_round_trips_through_config() {
        let grid = Grid::build(&two_dc_config()).unwrap();
        let emitted = grid.to_config();
        let reparsed: TopologyConfig =
            serde_json::from_str(&serde_json::to_string(&emitted).unwrap()).unwrap();
        let again = Grid::build(&reparsed).unwrap();
        assert_eq!(serde_json::to_value(again.to_config()).unwrap(),
                   serde_json::to_value(&emitted).unwrap());
        assert_eq!(again.links[0].bandwidth, grid.links[0].bandwidth);
    }

    #[test]
    fn replica_capacity_enforced() {
        let mut grid = Grid::build(&two_dc_config()).unwrap();
        let err = grid.add_replica("big".into(), 100001.0, 0, 0, None).unwrap_err();
        assert!(matches!(err, StorageError::CapacityExceeded { .. }));
        assert_eq!(grid.storage_elements[0].used_mb, 0.0);
    }

    #[test]
    fn placement_quota_enforced() {
        let mut grid = Grid::build(&two_dc_config()).unwrap();
        let f = grid.add_replica("f".into(), 4000.0, 0, 0, None).unwrap();
        let file = grid.replicas[f].file;
        // se_b has a 5000 MB data-placement quota.
        grid.place_replica(file, 1, 0, None).unwrap();
        let err = grid.place_replica(file, 1, 0, None).unwrap_err();
        assert!(matches!(err, StorageError::QuotaExceeded { .. }));
        assert_eq!(grid.storage_elements[1].dp_placed_mb, 4000.0);
    }

    #[test]
    fn removing_a_placed_replica_refunds_quota_and_space() {
        let mut grid = Grid::build(&two_dc_config()).unwrap();
        let f = grid.add_replica("f".into(), 4000.0, 0, 0, None).unwrap();
        let file = grid.replicas[f].file;
        let placed = grid.place_replica(file, 1, 0, Some(100)).unwrap();
        grid.remove_replica(placed);
        assert_eq!(grid.storage_elements[1].dp_placed_mb, 0.0);
        assert_eq!(grid.storage_elements[1].used_mb, 0.0);
        // Quota headroom is back, so the same placement succeeds again.
        grid.place_replica(file, 1, 0, None).unwrap();
    }

    #[test]
    fn aborted_placement_reservation_is_revocable() {
        let mut grid = Grid::build(&two_dc_config()).unwrap();
        let f = grid.add_replica("f".into(), 4000.0, 0, 0, None).unwrap();
        let file = grid.replicas[f].file;
        grid.admit_placement(file, 1).unwrap();
        assert_eq!(grid.storage_elements[1].used_mb, 4000.0);
        assert_eq!(grid.storage_elements[1].dp_placed_mb, 4000.0);
        grid.revoke_placement(file, 1);
        assert_eq!(grid.storage_elements[1].used_mb, 0.0);
        assert_eq!(grid.storage_elements[1].dp_placed_mb, 0.0);
    }

    #[test]
    fn quota_example_placement_larger_than_free_space() {
        let mut cfg = two_dc_config();
        cfg.data_centers[1].storage_elements[0].capacity_mb = 200.0;
        cfg.data_centers[1].storage_elements[0].dp_quota_mb = None;
        let mut grid = Grid::build(&cfg).unwrap();
        let f = grid.add_replica("f".into(), 300.0, 0, 0, None).unwrap();
        let file = grid.replicas[f].file;
        let err = grid.place_replica(file, 1, 0, None).unwrap_err();
        assert!(matches!(err, StorageError::QuotaExceeded { .. }));
    }

    #[test]
    fn ttl_expiry() {
        let r = Replica { file: 0, se: 0, created_at: 10, ttl: Some(5), removed: false, dp: false };
        assert!(!r.expired(14));
        assert!(r.expired(15));
        let forever =
            Replica { file: 0, se: 0, created_at: 10, ttl: None, removed: false, dp: false };
        assert!(!forever.expired(u64::MAX));
    }

    proptest! {
        // used_mb must always equal the sum of resident replica sizes, no
        // matter the interleaving of adds and removes.
        #[test]
        fn storage_accounting_invariant(ops in proptest::collection::vec((0.0f64..500.0, any::<bool>()), 1..40)) {
            let mut grid = Grid::build(&two_dc_config()).unwrap();
            let mut live: Vec<usize> = Vec::new();
            for (k, (size, remove)) in ops.into_iter().enumerate() {
                if remove && !live.is_empty() {
                    let idx = live.remove(k % live.len());
                    grid.remove_replica(idx);
                } else if let Ok(idx) = grid.add_replica(format!("f{k}"), size, 0, 0, None) {
                    live.push(idx);
                }
                let expect: f64 = grid
                    .replicas
                    .iter()
                    .filter(|r| !r.removed && r.se == 0)
                    .map(|r| grid.files[r.file].size_mb)
                    .sum();
                prop_assert!((grid.storage_elements[0].used_mb - expect).abs() < 1e-9);
            }
        }
    }
}
