// SPDX-License-Identifier: Apache-2.0

//! Cluster topology and instantaneous GPU allocation state.
//!
//! Racks are RDMA domains. Every server in a rack has the same GPU count; SKUs
//! may differ only across racks. A GPU is identified by `(server, gpu_index)`.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct RackId(pub u32);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ServerId(pub u32);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct JobId(pub u32);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct VcId(pub u16);

impl fmt::Display for JobId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "job#{}", self.0)
    }
}

/// One GPU.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Slot {
    pub server: ServerId,
    pub gpu: u32,
}

impl Slot {
    pub fn new(server: u32, gpu: u32) -> Self {
        Slot { server: ServerId(server), gpu }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum ClusterError {
    #[error("topology has no racks or a rack has no servers")]
    EmptyTopology,
    #[error("rack {rack} mixes server SKUs ({first} and {other} GPUs per server)")]
    MixedSkuInRack { rack: usize, first: u32, other: u32 },
    #[error("server in rack {rack} declares zero GPUs")]
    ZeroGpuServer { rack: usize },
    #[error("slot {0:?} is already held")]
    SlotBusy(Slot),
    #[error("slot {0:?} does not exist in the topology")]
    NoSuchSlot(Slot),
}

/// Hardware description of one server.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ServerSku {
    pub gpus: u32,
    pub cpu_cores: u32,
    pub mem_gb: u32,
}

/// Input to [`build_topology`]: one entry per rack, one SKU per server.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TopologySpec {
    pub racks: Vec<Vec<ServerSku>>,
}

impl TopologySpec {
    /// `racks` copies of a rack with `servers` identical servers.
    pub fn uniform(racks: usize, servers: usize, sku: ServerSku) -> Self {
        TopologySpec {
            racks: vec![vec![sku; servers]; racks],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Server {
    pub id: ServerId,
    pub rack: RackId,
    pub gpu_count: u32,
    pub cpu_cores: u32,
    pub mem_gb: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rack {
    pub id: RackId,
    pub servers: Vec<ServerId>,
    pub gpus_per_server: u32,
}

/// Validated topology. Server ids are dense indices into `servers`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterTopology {
    pub racks: Vec<Rack>,
    pub servers: Vec<Server>,
}

pub fn build_topology(spec: &TopologySpec) -> Result<ClusterTopology, ClusterError> {
    if spec.racks.is_empty() || spec.racks.iter().any(|r| r.is_empty()) {
        return Err(ClusterError::EmptyTopology);
    }
    let mut racks = Vec::with_capacity(spec.racks.len());
    let mut servers = Vec::new();
    for (ri, rack) in spec.racks.iter().enumerate() {
        let first = rack[0].gpus;
        let mut ids = Vec::with_capacity(rack.len());
        for sku in rack {
            if sku.gpus == 0 {
                return Err(ClusterError::ZeroGpuServer { rack: ri });
            }
            if sku.gpus != first {
                return Err(ClusterError::MixedSkuInRack {
                    rack: ri,
                    first,
                    other: sku.gpus,
                });
            }
            let id = ServerId(servers.len() as u32);
            servers.push(Server {
                id,
                rack: RackId(ri as u32),
                gpu_count: sku.gpus,
                cpu_cores: sku.cpu_cores,
                mem_gb: sku.mem_gb,
            });
            ids.push(id);
        }
        racks.push(Rack {
            id: RackId(ri as u32),
            servers: ids,
            gpus_per_server: first,
        });
    }
    Ok(ClusterTopology { racks, servers })
}

impl ClusterTopology {
    pub fn total_gpus(&self) -> u32 {
        self.servers.iter().map(|s| s.gpu_count).sum()
    }

    pub fn server(&self, id: ServerId) -> &Server {
        &self.servers[id.0 as usize]
    }

    pub fn max_gpus_per_server(&self) -> u32 {
        self.servers.iter().map(|s| s.gpu_count).max().unwrap_or(0)
    }

    pub fn server_count(&self) -> usize {
        self.servers.len()
    }

    /// CPU cores and memory reserved for `gpus` GPUs on `server`, proportional
    /// to the server's GPU count.
    pub fn host_share(&self, server: ServerId, gpus: u32) -> (f64, f64) {
        let s = self.server(server);
        let frac = gpus as f64 / s.gpu_count as f64;
        (frac * s.cpu_cores as f64, frac * s.mem_gb as f64)
    }
}

/// Who holds each GPU right now.
#[derive(Debug, Clone, PartialEq)]
pub struct AllocationState {
    holder: Vec<Vec<Option<JobId>>>,
    free: Vec<u32>,
    rack_free: Vec<u32>,
    vc_usage: Vec<u32>,
    owned: BTreeMap<JobId, (VcId, Vec<Slot>)>,
    rack_of: Vec<u32>,
}

impl AllocationState {
    pub fn new(topo: &ClusterTopology, vc_count: usize) -> Self {
        AllocationState {
            holder: topo
                .servers
                .iter()
                .map(|s| vec![None; s.gpu_count as usize])
                .collect(),
            free: topo.servers.iter().map(|s| s.gpu_count).collect(),
            rack_free: topo
                .racks
                .iter()
                .map(|r| r.servers.len() as u32 * r.gpus_per_server)
                .collect(),
            vc_usage: vec![0; vc_count],
            owned: BTreeMap::new(),
            rack_of: topo.servers.iter().map(|s| s.rack.0).collect(),
        }
    }

    pub fn holder(&self, slot: Slot) -> Option<JobId> {
        self.holder
            .get(slot.server.0 as usize)
            .and_then(|row| row.get(slot.gpu as usize))
            .copied()
            .flatten()
    }

    pub fn free_on(&self, server: ServerId) -> u32 {
        self.free[server.0 as usize]
    }

    pub fn free_in_rack(&self, rack: RackId) -> u32 {
        self.rack_free[rack.0 as usize]
    }

    pub fn total_free(&self) -> u32 {
        self.free.iter().sum()
    }

    pub fn total_used(&self) -> u32 {
        self.vc_usage.iter().sum()
    }

    pub fn vc_usage(&self, vc: VcId) -> u32 {
        self.vc_usage[vc.0 as usize]
    }

    pub fn vc_count(&self) -> usize {
        self.vc_usage.len()
    }

    /// Slots currently held by `job`, in acquisition order.
    pub fn slots_of(&self, job: JobId) -> &[Slot] {
        self.owned.get(&job).map(|(_, s)| s.as_slice()).unwrap_or(&[])
    }

    pub fn holders(&self) -> impl Iterator<Item = (JobId, &[Slot])> {
        self.owned.iter().map(|(j, (_, s))| (*j, s.as_slice()))
    }

    /// Free GPUs on `server`, in index order.
    pub fn free_slots_on(&self, server: ServerId) -> impl Iterator<Item = Slot> + '_ {
        self.holder[server.0 as usize]
            .iter()
            .enumerate()
            .filter(|(_, h)| h.is_none())
            .map(move |(g, _)| Slot {
                server,
                gpu: g as u32,
            })
    }

    /// Distinct jobs other than `job` holding any GPU on `server`.
    pub fn has_foreign(&self, server: ServerId, job: JobId) -> bool {
        self.holder[server.0 as usize]
            .iter()
            .any(|h| matches!(h, Some(other) if *other != job))
    }

    pub fn is_empty_server(&self, server: ServerId) -> bool {
        self.holder[server.0 as usize].iter().all(|h| h.is_none())
    }

    /// Takes `slots` for `job` (appending to what it already holds). All or
    /// nothing: on error the state is untouched.
    pub fn allocate(&mut self, job: JobId, vc: VcId, slots: &[Slot]) -> Result<(), ClusterError> {
        for (i, slot) in slots.iter().enumerate() {
            let row = self
                .holder
                .get(slot.server.0 as usize)
                .ok_or(ClusterError::NoSuchSlot(*slot))?;
            match row.get(slot.gpu as usize) {
                None => return Err(ClusterError::NoSuchSlot(*slot)),
                Some(Some(_)) => return Err(ClusterError::SlotBusy(*slot)),
                Some(None) => {}
            }
            if slots[..i].contains(slot) {
                return Err(ClusterError::SlotBusy(*slot));
            }
        }
        for slot in slots {
            let s = slot.server.0 as usize;
            self.holder[s][slot.gpu as usize] = Some(job);
            self.free[s] -= 1;
            self.rack_free[self.rack_of[s] as usize] -= 1;
        }
        self.vc_usage[vc.0 as usize] += slots.len() as u32;
        self.owned
            .entry(job)
            .or_insert_with(|| (vc, Vec::new()))
            .1
            .extend_from_slice(slots);
        Ok(())
    }

    /// Frees everything `job` holds and returns the released slots.
    pub fn release(&mut self, job: JobId) -> Vec<Slot> {
        let Some((vc, slots)) = self.owned.remove(&job) else {
            return Vec::new();
        };
        for slot in &slots {
            let s = slot.server.0 as usize;
            self.holder[s][slot.gpu as usize] = None;
            self.free[s] += 1;
            self.rack_free[self.rack_of[s] as usize] += 1;
        }
        self.vc_usage[vc.0 as usize] -= slots.len() as u32;
        slots
    }

    /// Recounts holders from scratch and compares against the incremental
    /// counters. Returns a description of the first mismatch.
    pub fn reconcile(&self) -> Result<(), String> {
        let mut vc = vec![0u32; self.vc_usage.len()];
        let mut held = 0u32;
        for (s, row) in self.holder.iter().enumerate() {
            let free = row.iter().filter(|h| h.is_none()).count() as u32;
            if free != self.free[s] {
                return Err(format!("server {s}: free counter {} != {free}", self.free[s]));
            }
            for (g, h) in row.iter().enumerate() {
                if let Some(job) = h {
                    held += 1;
                    let Some((v, slots)) = self.owned.get(job) else {
                        return Err(format!("slot {s}/{g} held by unknown {job}"));
                    };
                    if !slots.contains(&Slot::new(s as u32, g as u32)) {
                        return Err(format!("slot {s}/{g} not in {job}'s list"));
                    }
                    vc[v.0 as usize] += 1;
                }
            }
        }
        if vc != self.vc_usage {
            return Err(format!("vc usage {:?} != recount {:?}", self.vc_usage, vc));
        }
        let listed: usize = self.owned.values().map(|(_, s)| s.len()).sum();
        if listed as u32 != held {
            return Err(format!("owned lists {listed} slots, holder map {held}"));
        }
        let mut rack = vec![0u32; self.rack_free.len()];
        for (s, f) in self.free.iter().enumerate() {
            rack[self.rack_of[s] as usize] += f;
        }
        if rack != self.rack_free {
            return Err("rack free counters drifted".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RackCandidate {
    pub rack: RackId,
    pub free: u32,
    pub servers: Vec<(ServerId, u32)>,
}

/// Racks by decreasing free GPUs, servers within each rack the same way,
/// ties by ascending id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CandidateRanking {
    pub racks: Vec<RackCandidate>,
}

impl CandidateRanking {
    /// Every server in rank order (rack order, then server order).
    pub fn servers(&self) -> impl Iterator<Item = (RackId, ServerId, u32)> + '_ {
        self.racks
            .iter()
            .flat_map(|r| r.servers.iter().map(move |(s, f)| (r.rack, *s, *f)))
    }
}

pub fn rank_candidates(state: &AllocationState, topo: &ClusterTopology) -> CandidateRanking {
    let mut racks: Vec<RackCandidate> = topo
        .racks
        .iter()
        .map(|rack| {
            let mut servers: Vec<(ServerId, u32)> = rack
                .servers
                .iter()
                .map(|s| (*s, state.free_on(*s)))
                .collect();
            servers.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
            RackCandidate {
                rack: rack.id,
                free: state.free_in_rack(rack.id),
                servers,
            }
        })
        .collect();
    racks.sort_by(|a, b| b.free.cmp(&a.free).then(a.rack.cmp(&b.rack)));
    CandidateRanking { racks }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FragmentationReport {
    pub empty_server_fraction: f64,
    pub empty_servers_per_rack: BTreeMap<u32, u32>,
}

pub fn fragmentation_report(state: &AllocationState, topo: &ClusterTopology) -> FragmentationReport {
    let mut per_rack = BTreeMap::new();
    let mut empty = 0u32;
    for rack in &topo.racks {
        let n = rack
            .servers
            .iter()
            .filter(|s| state.is_empty_server(**s))
            .count() as u32;
        per_rack.insert(rack.id.0, n);
        empty += n;
    }
    FragmentationReport {
        empty_server_fraction: empty as f64 / topo.servers.len() as f64,
        empty_servers_per_rack: per_rack,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::seq::SliceRandom;
    use rand::SeedableRng;

    fn sku(gpus: u32) -> ServerSku {
        ServerSku {
            gpus,
            cpu_cores: gpus * 8,
            mem_gb: gpus * 64,
        }
    }

    #[test]
    fn one_rack_two_servers() {
        let topo = build_topology(&TopologySpec::uniform(1, 2, sku(8))).unwrap();
        assert_eq!(topo.total_gpus(), 16);
    }

    #[test]
    fn skus_may_differ_across_racks() {
        let spec = TopologySpec {
            racks: vec![vec![sku(8); 2], vec![sku(2); 4]],
        };
        let topo = build_topology(&spec).unwrap();
        assert_eq!(topo.total_gpus(), 24);
        assert_eq!(topo.racks[1].gpus_per_server, 2);
    }

    #[test]
    fn mixed_sku_rejected() {
        let spec = TopologySpec {
            racks: vec![vec![sku(2), sku(8)]],
        };
        assert!(matches!(
            build_topology(&spec),
            Err(ClusterError::MixedSkuInRack { rack: 0, .. })
        ));
        assert_eq!(
            build_topology(&TopologySpec::default()),
            Err(ClusterError::EmptyTopology)
        );
        assert_eq!(
            build_topology(&TopologySpec { racks: vec![vec![]] }),
            Err(ClusterError::EmptyTopology)
        );
    }

    #[test]
    fn ranking_ties_by_id_when_all_free() {
        let topo = build_topology(&TopologySpec::uniform(3, 2, sku(4))).unwrap();
        let st = AllocationState::new(&topo, 1);
        let r = rank_candidates(&st, &topo);
        let ids: Vec<u32> = r.racks.iter().map(|r| r.rack.0).collect();
        assert_eq!(ids, vec![0, 1, 2]);
    }

    #[test]
    fn less_occupied_rack_first() {
        // rack 0 (A): 50% occupied, rack 1 (B): 10% occupied (of 10 GPUs each)
        let spec = TopologySpec {
            racks: vec![vec![sku(5); 2], vec![sku(5); 2]],
        };
        let topo = build_topology(&spec).unwrap();
        let mut st = AllocationState::new(&topo, 1);
        let a: Vec<Slot> = (0..5).map(|g| Slot::new(0, g)).collect();
        st.allocate(JobId(0), VcId(0), &a).unwrap();
        st.allocate(JobId(1), VcId(0), &[Slot::new(2, 0)]).unwrap();
        let r = rank_candidates(&st, &topo);
        assert_eq!(r.racks[0].rack, RackId(1));
        assert_eq!(r.racks[0].free, 9);
        assert_eq!(r.racks[1].free, 5);
    }

    #[test]
    fn emptier_server_first_within_rack() {
        let topo = build_topology(&TopologySpec::uniform(1, 2, sku(8))).unwrap();
        let mut st = AllocationState::new(&topo, 1);
        let slots: Vec<Slot> = (0..5).map(|g| Slot::new(0, g)).collect();
        st.allocate(JobId(0), VcId(0), &slots).unwrap();
        let r = rank_candidates(&st, &topo);
        assert_eq!(r.racks[0].servers, vec![(ServerId(1), 8), (ServerId(0), 3)]);
    }

    #[test]
    fn allocate_release_roundtrip_and_busy() {
        let topo = build_topology(&TopologySpec::uniform(1, 2, sku(8))).unwrap();
        let orig = AllocationState::new(&topo, 2);
        let mut st = orig.clone();
        st.allocate(JobId(3), VcId(1), &[Slot::new(0, 0), Slot::new(1, 7)])
            .unwrap();
        assert_eq!(st.vc_usage(VcId(1)), 2);
        let before = st.clone();
        assert_eq!(
            st.allocate(JobId(4), VcId(0), &[Slot::new(1, 1), Slot::new(0, 0)]),
            Err(ClusterError::SlotBusy(Slot::new(0, 0)))
        );
        assert_eq!(st, before, "failed allocate must not mutate");
        st.release(JobId(3));
        assert_eq!(st, orig);
    }

    #[test]
    fn full_server_not_counted_empty() {
        let topo = build_topology(&TopologySpec::uniform(1, 2, sku(8))).unwrap();
        let mut st = AllocationState::new(&topo, 1);
        assert_eq!(fragmentation_report(&st, &topo).empty_server_fraction, 1.0);
        let slots: Vec<Slot> = (0..8).map(|g| Slot::new(1, g)).collect();
        st.allocate(JobId(0), VcId(0), &slots).unwrap();
        let rep = fragmentation_report(&st, &topo);
        assert_eq!(rep.empty_server_fraction, 0.5);
        assert_eq!(rep.empty_servers_per_rack[&0], 1);
        st.allocate(JobId(1), VcId(0), &[Slot::new(0, 3)]).unwrap();
        assert_eq!(fragmentation_report(&st, &topo).empty_server_fraction, 0.0);
    }

    #[test]
    fn two_thirds_random_fill_matches_bruteforce_count() {
        let topo = build_topology(&TopologySpec::uniform(4, 8, sku(8))).unwrap();
        let mut st = AllocationState::new(&topo, 1);
        let mut all: Vec<Slot> = topo
            .servers
            .iter()
            .flat_map(|s| (0..s.gpu_count).map(move |g| Slot::new(s.id.0, g)))
            .collect();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        all.shuffle(&mut rng);
        let used = all.len() * 2 / 3;
        for (i, slot) in all[..used].iter().enumerate() {
            st.allocate(JobId(i as u32), VcId(0), &[*slot]).unwrap();
        }
        let mut grid = vec![[false; 8]; 32];
        for slot in &all[..used] {
            grid[slot.server.0 as usize][slot.gpu as usize] = true;
        }
        let brute = grid.iter().filter(|row| row.iter().all(|b| !*b)).count();
        let rep = fragmentation_report(&st, &topo);
        assert_eq!(rep.empty_server_fraction, brute as f64 / 32.0);
    }

    #[test]
    fn host_share_is_proportional() {
        let topo = build_topology(&TopologySpec::uniform(
            1,
            1,
            ServerSku {
                gpus: 8,
                cpu_cores: 64,
                mem_gb: 512,
            },
        ))
        .unwrap();
        assert_eq!(topo.host_share(ServerId(0), 4), (32.0, 256.0));
    }

    proptest! {
        #[test]
        fn counters_reconcile_after_random_ops(ops in proptest::collection::vec((0u32..6, 0u32..12, 0u32..4, any::<bool>()), 1..80)) {
            let topo = build_topology(&TopologySpec::uniform(2, 3, sku(4))).unwrap();
            let mut st = AllocationState::new(&topo, 2);
            for (job, start, n, rel) in ops {
                if rel {
                    st.release(JobId(job));
                } else {
                    let slots: Vec<Slot> = (0..n).map(|k| {
                        let flat = (start + k) % 24;
                        Slot::new(flat / 4, flat % 4)
                    }).collect();
                    let before = st.clone();
                    if st.allocate(JobId(job), VcId((job % 2) as u16), &slots).is_err() {
                        prop_assert_eq!(&st, &before);
                    }
                }
                prop_assert!(st.reconcile().is_ok());
                prop_assert_eq!(st.total_free() + st.total_used(), 24);
            }
        }

        #[test]
        fn ranking_matches_bruteforce_sort(fill in proptest::collection::vec(0u32..=4, 6)) {
            let topo = build_topology(&TopologySpec::uniform(2, 3, sku(4))).unwrap();
            let mut st = AllocationState::new(&topo, 1);
            for (s, n) in fill.iter().enumerate() {
                let slots: Vec<Slot> = (0..*n).map(|g| Slot::new(s as u32, g)).collect();
                st.allocate(JobId(s as u32), VcId(0), &slots).unwrap();
            }
            let r = rank_candidates(&st, &topo);
            // brute force: enumerate racks and sort by (used asc, id asc)
            let mut racks: Vec<(u32, u32)> = (0..2).map(|k| {
                let used: u32 = fill[k * 3..k * 3 + 3].iter().sum();
                (used, k as u32)
            }).collect();
            racks.sort();
            let got: Vec<u32> = r.racks.iter().map(|c| c.rack.0).collect();
            let want: Vec<u32> = racks.iter().map(|x| x.1).collect();
            prop_assert_eq!(got, want);
            let mut seen: Vec<u32> = r.servers().map(|(_, s, _)| s.0).collect();
            for rc in &r.racks {
                for w in rc.servers.windows(2) {
                    prop_assert!(w[0].1 > w[1].1 || (w[0].1 == w[1].1 && w[0].0 < w[1].0));
                }
            }
            seen.sort();
            prop_assert_eq!(seen, vec![0, 1, 2, 3, 4, 5]);
        }
    }
}
