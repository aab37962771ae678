//! Optical transport simulation: topology validation, link-disjoint path
//! computation, first-fit traffic grooming, and per-packet transport with
//! token-bucket policing and BER-driven corruption drops.

use std::collections::{BTreeMap, BTreeSet, BinaryHeap};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::mobility::mix64;
use crate::pcapio::{PacketRecord, PcapStream};
use crate::traffic5g::SyntheticPacketHeader;

/// Propagation delay in fiber, light at roughly 2e8 m/s.
pub const PROPAGATION_US_PER_KM: f64 = 5.0;
/// Token bucket burst, in packets of average size.
pub const BURST_PACKETS: f64 = 10.0;

#[derive(Debug, thiserror::Error)]
pub enum OtnError {
    #[error("topology parse error: {0}")]
    Parse(String),
    #[error("duplicate node id {0}")]
    DuplicateNode(u16),
    #[error("duplicate link id {0}")]
    DuplicateLink(u32),
    #[error("link {0} references unknown node {1}")]
    UnknownEndpoint(u32, u16),
    #[error("amplifier node {0} has degree {1}, expected 2")]
    AmplifierDegree(u16, usize),
    #[error("egress node {0} is not a receiver")]
    EgressNotReceiver(u16),
    #[error("bit error rate {1} on link {0} out of range")]
    BadBer(u32, f64),
    #[error("switch subgraph is disconnected")]
    Disconnected,
    #[error("src and dst must differ")]
    DegeneratePair,
    #[error("node {0} is not in the ingress set")]
    NotIngress(u16),
    #[error("node {0} is not in the egress set")]
    NotEgress(u16),
    #[error("no path from {0} to {1}")]
    NoPath(u16, u16),
    #[error("no disjoint path set for flow ({0}, {1})")]
    MissingPathSet(u16, u16),
    #[error("packet from user {0} has no groomed channel")]
    NoChannel(u64),
    #[error("egress sequence {0} absent from ingress stream")]
    OrphanEgress(u64),
    #[error("packet without a synthetic header at record {0}")]
    MissingHeader(usize),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeKind {
    Switch,
    Amplifier,
    Receiver,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OtnNode {
    pub id: u16,
    pub kind: NodeKind,
    #[serde(default)]
    pub processing_delay_us: u64,
    /// Map position, used to attach users to their nearest ingress.
    #[serde(default)]
    pub position: Option<(f64, f64)>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OtnLink {
    pub id: u32,
    pub endpoints: (u16, u16),
    pub length_km: f64,
    pub wavelength_count: u32,
    pub wavelength_capacity_bps: f64,
    #[serde(default)]
    pub bit_error_rate: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OtnTopology {
    pub nodes: Vec<OtnNode>,
    pub links: Vec<OtnLink>,
    pub ingress_set: BTreeSet<u16>,
    pub egress_set: BTreeSet<u16>,
}

#[derive(Debug, Deserialize)]
struct TopologyFile {
    #[serde(rename = "node")]
    nodes: Vec<OtnNode>,
    #[serde(rename = "link")]
    links: Vec<OtnLink>,
    topology: TopologySets,
}

#[derive(Debug, Deserialize)]
struct TopologySets {
    ingress: Vec<u16>,
    egress: Vec<u16>,
}

impl OtnTopology {
    pub fn node(&self, id: u16) -> Option<&OtnNode> {
        self.nodes.iter().find(|n| n.id == id)
    }

    pub fn link(&self, id: u32) -> Option<&OtnLink> {
        self.links.iter().find(|l| l.id == id)
    }

    pub fn ingress_positions(&self) -> Vec<(u16, (f64, f64))> {
        self.ingress_set
            .iter()
            .filter_map(|&id| Some((id, self.node(id)?.position?)))
            .collect()
    }

    pub fn validate(&self) -> Result<(), OtnError> {
        let mut node_ids = BTreeSet::new();
        for n in &self.nodes {
            if !node_ids.insert(n.id) {
                return Err(OtnError::DuplicateNode(n.id));
            }
        }
        let mut link_ids = BTreeSet::new();
        let mut degree: BTreeMap<u16, usize> = BTreeMap::new();
        for l in &self.links {
            if !link_ids.insert(l.id) {
                return Err(OtnError::DuplicateLink(l.id));
            }
            for end in [l.endpoints.0, l.endpoints.1] {
                if !node_ids.contains(&end) {
                    return Err(OtnError::UnknownEndpoint(l.id, end));
                }
                *degree.entry(end).or_default() += 1;
            }
            if !(0.0..1.0).contains(&l.bit_error_rate) {
                return Err(OtnError::BadBer(l.id, l.bit_error_rate));
            }
        }
        for n in &self.nodes {
            if n.kind == NodeKind::Amplifier {
                let d = degree.get(&n.id).copied().unwrap_or(0);
                if d != 2 {
                    return Err(OtnError::AmplifierDegree(n.id, d));
                }
            }
        }
        for &e in &self.egress_set {
            match self.node(e) {
                Some(n) if n.kind == NodeKind::Receiver => {}
                _ => return Err(OtnError::EgressNotReceiver(e)),
            }
        }

        // every switch must reach every other switch
        let switches: Vec<u16> = self
            .nodes
            .iter()
            .filter(|n| n.kind == NodeKind::Switch)
            .map(|n| n.id)
            .collect();
        if switches.len() > 1 {
            let mut adj: BTreeMap<u16, Vec<u16>> = BTreeMap::new();
            for l in &self.links {
                adj.entry(l.endpoints.0).or_default().push(l.endpoints.1);
                adj.entry(l.endpoints.1).or_default().push(l.endpoints.0);
            }
            let mut seen = BTreeSet::new();
            let mut stack = vec![switches[0]];
            while let Some(v) = stack.pop() {
                if !seen.insert(v) {
                    continue;
                }
                if let Some(next) = adj.get(&v) {
                    stack.extend(next.iter().copied());
                }
            }
            if switches.iter().any(|s| !seen.contains(s)) {
                return Err(OtnError::Disconnected);
            }
        }
        Ok(())
    }
}

/// 8-node reference fixture: 4 switches in a ring with a diagonal,
/// an amplifier span, and two receivers.
pub const REFERENCE_TOPOLOGY_TOML: &str =
    include_str!("../fixtures/reference_topology.toml");

pub fn reference_topology() -> OtnTopology {
    build_topology_from_str(REFERENCE_TOPOLOGY_TOML).unwrap()
}

/// Parses and validates a TOML topology description.
pub fn build_topology(path: &Path) -> Result<OtnTopology, OtnError> {
    let text = std::fs::read_to_string(path)?;
    build_topology_from_str(&text)
}

pub fn build_topology_from_str(text: &str) -> Result<OtnTopology, OtnError> {
    let file: TopologyFile = toml::from_str(text).map_err(|e| OtnError::Parse(e.to_string()))?;
    let topology = OtnTopology {
        nodes: file.nodes,
        links: file.links,
        ingress_set: file.topology.ingress.into_iter().collect(),
        egress_set: file.topology.egress.into_iter().collect(),
    };
    topology.validate()?;
    Ok(topology)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DisjointPathSet {
    pub src: u16,
    pub dst: u16,
    /// Link-id sequences ordered by total length, pairwise link-disjoint.
    pub paths: Vec<Vec<u32>>,
    pub requested: usize,
}

impl DisjointPathSet {
    pub fn shortfall(&self) -> bool {
        self.paths.len() < self.requested
    }

    pub fn assert_disjoint(&self) {
        for (i, a) in self.paths.iter().enumerate() {
            for b in self.paths.iter().skip(i + 1) {
                let sa: BTreeSet<u32> = a.iter().copied().collect();
                assert!(
                    b.iter().all(|id| !sa.contains(id)),
                    "paths share a link between {} and {}",
                    self.src,
                    self.dst
                );
            }
        }
    }
}

/// Length of a path in integer millimeters, so comparisons are exact.
fn path_cost_mm(topology: &OtnTopology, path: &[u32]) -> u64 {
    path.iter()
        .map(|&id| (topology.link(id).unwrap().length_km * 1e6) as u64)
        .sum()
}

/// Dijkstra over the link set `available`, deterministic tie-breaking by
/// node id. Returns the link-id sequence from src to dst.
fn shortest_path(
    topology: &OtnTopology,
    available: &BTreeSet<u32>,
    src: u16,
    dst: u16,
) -> Option<Vec<u32>> {
    let mut adj: BTreeMap<u16, Vec<(u16, u32, u64)>> = BTreeMap::new();
    for l in &topology.links {
        if !available.contains(&l.id) {
            continue;
        }
        let w = (l.length_km * 1e6) as u64;
        adj.entry(l.endpoints.0).or_default().push((l.endpoints.1, l.id, w));
        adj.entry(l.endpoints.1).or_default().push((l.endpoints.0, l.id, w));
    }
    let mut dist: BTreeMap<u16, u64> = BTreeMap::new();
    let mut back: BTreeMap<u16, (u16, u32)> = BTreeMap::new();
    let mut heap: BinaryHeap<std::cmp::Reverse<(u64, u16)>> = BinaryHeap::new();
    dist.insert(src, 0);
    heap.push(std::cmp::Reverse((0, src)));
    while let Some(std::cmp::Reverse((d, v))) = heap.pop() {
        if d > dist.get(&v).copied().unwrap_or(u64::MAX) {
            continue;
        }
        if v == dst {
            break;
        }
        // receivers terminate lightpaths; traffic never transits one
        if topology
            .node(v)
            .map_or(false, |n| n.kind == NodeKind::Receiver)
        {
            continue;
        }
        if let Some(edges) = adj.get(&v) {
            for &(next, link_id, w) in edges {
                let nd = d + w;
                let best = dist.get(&next).copied().unwrap_or(u64::MAX);
                if nd < best {
                    dist.insert(next, nd);
                    back.insert(next, (v, link_id));
                    heap.push(std::cmp::Reverse((nd, next)));
                }
            }
        }
    }
    if !dist.contains_key(&dst) {
        return None;
    }
    let mut path = Vec::new();
    let mut v = dst;
    while v != src {
        let (prev, link_id) = back[&v];
        path.push(link_id);
        v = prev;
    }
    path.reverse();
    Some(path)
}

/// Up to `k` pairwise link-disjoint paths by successive shortest-path
/// with link removal; paths come back ordered by total length.
pub fn compute_disjoint_paths(
    topology: &OtnTopology,
    src: u16,
    dst: u16,
    k: usize,
) -> Result<DisjointPathSet, OtnError> {
    if src == dst {
        return Err(OtnError::DegeneratePair);
    }
    if !topology.ingress_set.contains(&src) {
        return Err(OtnError::NotIngress(src));
    }
    if !topology.egress_set.contains(&dst) {
        return Err(OtnError::NotEgress(dst));
    }
    let mut available: BTreeSet<u32> = topology.links.iter().map(|l| l.id).collect();
    let mut paths = Vec::new();
    for _ in 0..k {
        match shortest_path(topology, &available, src, dst) {
            Some(path) => {
                for id in &path {
                    available.remove(id);
                }
                paths.push(path);
            }
            None => break,
        }
    }
    if paths.is_empty() {
        return Err(OtnError::NoPath(src, dst));
    }
    paths.sort_by_key(|p| path_cost_mm(topology, p));
    let set = DisjointPathSet {
        src,
        dst,
        paths,
        requested: k,
    };
    set.assert_disjoint();
    Ok(set)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Flow {
    pub id: u64,
    pub src: u16,
    pub dst: u16,
    pub mean_rate_bps: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroomedChannel {
    pub id: u32,
    pub src: u16,
    pub dst: u16,
    pub wavelength_index: u32,
    pub path_index: usize,
    pub committed_rate_bps: f64,
    pub member_flows: Vec<u64>,
}

#[derive(Debug, Clone)]
pub struct GroomingResult {
    pub channels: Vec<GroomedChannel>,
    pub unroutable: Vec<u64>,
}

fn channel_capacity(topology: &OtnTopology, path: &[u32]) -> f64 {
    path.iter()
        .map(|&id| topology.link(id).unwrap().wavelength_capacity_bps)
        .fold(f64::INFINITY, f64::min)
}

fn path_wavelength_limit(topology: &OtnTopology, path: &[u32]) -> u32 {
    path.iter()
        .map(|&id| topology.link(id).unwrap().wavelength_count)
        .min()
        .unwrap_or(0)
}

/// First-fit grooming. Flows are handled in id order; each joins the
/// oldest channel for its (src, dst) with spare committed capacity,
/// otherwise a new channel opens on the least-loaded path (channel count,
/// lowest path index on ties) and the lowest wavelength free on every
/// link of that path.
pub fn groom(
    flows: &[Flow],
    topology: &OtnTopology,
    path_sets: &BTreeMap<(u16, u16), DisjointPathSet>,
) -> Result<GroomingResult, OtnError> {
    let mut sorted: Vec<&Flow> = flows.iter().collect();
    sorted.sort_by_key(|f| f.id);

    let mut channels: Vec<GroomedChannel> = Vec::new();
    let mut unroutable = Vec::new();
    // link id -> wavelength indices in use
    let mut used: BTreeMap<u32, BTreeSet<u32>> = BTreeMap::new();
    let mut next_id = 0u32;

    'flows: for flow in sorted {
        let set = path_sets
            .get(&(flow.src, flow.dst))
            .ok_or(OtnError::MissingPathSet(flow.src, flow.dst))?;

        for ch in channels.iter_mut() {
            if ch.src == flow.src && ch.dst == flow.dst {
                let cap = channel_capacity(topology, &set.paths[ch.path_index]);
                if ch.committed_rate_bps + flow.mean_rate_bps <= cap {
                    ch.committed_rate_bps += flow.mean_rate_bps;
                    ch.member_flows.push(flow.id);
                    continue 'flows;
                }
            }
        }

        // open a new channel: least-loaded path first
        let mut order: Vec<usize> = (0..set.paths.len()).collect();
        let load = |pi: usize| {
            channels
                .iter()
                .filter(|c| c.src == flow.src && c.dst == flow.dst && c.path_index == pi)
                .count()
        };
        order.sort_by_key(|&pi| (load(pi), pi));
        for pi in order {
            let path = &set.paths[pi];
            if flow.mean_rate_bps > channel_capacity(topology, path) {
                continue;
            }
            let limit = path_wavelength_limit(topology, path);
            let free = (0..limit).find(|w| {
                path.iter()
                    .all(|id| !used.get(id).map_or(false, |s| s.contains(w)))
            });
            if let Some(w) = free {
                for id in path {
                    used.entry(*id).or_default().insert(w);
                }
                channels.push(GroomedChannel {
                    id: next_id,
                    src: flow.src,
                    dst: flow.dst,
                    wavelength_index: w,
                    path_index: pi,
                    committed_rate_bps: flow.mean_rate_bps,
                    member_flows: vec![flow.id],
                });
                next_id += 1;
                continue 'flows;
            }
        }
        unroutable.push(flow.id);
    }
    Ok(GroomingResult {
        channels,
        unroutable,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DropCause {
    Capacity,
    Corruption,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PacketOutcome {
    Delivered { egress_us: u64 },
    Dropped { cause: DropCause },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TransportRecord {
    pub user_id: u64,
    pub sequence: u64,
    pub ingress_us: u64,
    pub outcome: PacketOutcome,
}

/// Node sequence visited by a path, endpoints included.
fn path_nodes(topology: &OtnTopology, src: u16, path: &[u32]) -> Vec<u16> {
    let mut nodes = vec![src];
    let mut at = src;
    for &id in path {
        let l = topology.link(id).unwrap();
        at = if l.endpoints.0 == at {
            l.endpoints.1
        } else {
            l.endpoints.0
        };
        nodes.push(at);
    }
    nodes
}

/// Fixed per-channel latency: propagation over every link plus processing
/// at every node on the path.
pub fn channel_latency_us(topology: &OtnTopology, src: u16, path: &[u32]) -> u64 {
    let prop: f64 = path
        .iter()
        .map(|&id| topology.link(id).unwrap().length_km * PROPAGATION_US_PER_KM)
        .sum();
    let proc: u64 = path_nodes(topology, src, path)
        .iter()
        .map(|&n| topology.node(n).map_or(0, |n| n.processing_delay_us))
        .sum();
    prop.round() as u64 + proc
}

struct IngressPacket {
    user_id: u64,
    sequence: u64,
    ingress_us: u64,
    bytes: u32,
    record: PacketRecord,
}

/// Runs every ingress stream through its groomed channel. Per-channel
/// token buckets police the committed rate; each link corrupts a packet
/// with probability 1-(1-BER)^(8*bytes), seeded per channel.
///
/// Returns the transport records and the per-(user, src, dst) egress
/// streams (delivered packets only, restamped at egress time).
pub fn simulate_transport(
    ingress: &[((u64, u16, u16), PcapStream)],
    grooming: &GroomingResult,
    topology: &OtnTopology,
    path_sets: &BTreeMap<(u16, u16), DisjointPathSet>,
    seed: u64,
) -> Result<(Vec<TransportRecord>, BTreeMap<(u64, u16, u16), PcapStream>), OtnError> {
    // user -> channel index
    let mut channel_of: BTreeMap<u64, usize> = BTreeMap::new();
    for (ci, ch) in grooming.channels.iter().enumerate() {
        for &f in &ch.member_flows {
            channel_of.insert(f, ci);
        }
    }

    // gather packets per channel, merged in ingress-time order
    let mut per_channel: BTreeMap<usize, Vec<IngressPacket>> = BTreeMap::new();
    let mut egress: BTreeMap<(u64, u16, u16), PcapStream> = BTreeMap::new();
    for ((user, src, dst), stream) in ingress {
        let ci = *channel_of
            .get(user)
            .ok_or(OtnError::NoChannel(*user))?;
        egress.insert((*user, *src, *dst), PcapStream {
            link_type: stream.link_type,
            snap_len: stream.snap_len,
            records: Vec::new(),
        });
        for (i, rec) in stream.records.iter().enumerate() {
            let header = SyntheticPacketHeader::decode(&rec.payload)
                .ok_or(OtnError::MissingHeader(i))?;
            per_channel.entry(ci).or_default().push(IngressPacket {
                user_id: *user,
                sequence: header.sequence,
                ingress_us: rec.time_us(),
                bytes: rec.captured_len(),
                record: rec.clone(),
            });
        }
    }

    let mut records = Vec::new();
    for (ci, mut packets) in per_channel {
        let ch = &grooming.channels[ci];
        let set = &path_sets[&(ch.src, ch.dst)];
        let path = &set.paths[ch.path_index];
        let latency = channel_latency_us(topology, ch.src, path);
        let link_bers: Vec<f64> = path
            .iter()
            .map(|&id| topology.link(id).unwrap().bit_error_rate)
            .collect();

        packets.sort_by_key(|p| (p.ingress_us, p.user_id, p.sequence));
        let avg_bytes = if packets.is_empty() {
            0.0
        } else {
            packets.iter().map(|p| p.bytes as f64).sum::<f64>() / packets.len() as f64
        };
        let burst_bits = BURST_PACKETS * avg_bytes * 8.0;
        let mut tokens = burst_bits;
        let mut last_us = packets.first().map(|p| p.ingress_us).unwrap_or(0);

        let mut rng = ChaCha8Rng::seed_from_u64(mix64(seed ^ ch.id as u64).wrapping_add(0x07));

        for p in packets {
            tokens = (tokens
                + ch.committed_rate_bps * (p.ingress_us - last_us) as f64 / 1e6)
                .min(burst_bits);
            last_us = p.ingress_us;

            let need = p.bytes as f64 * 8.0;
            let outcome = if tokens < need {
                PacketOutcome::Dropped {
                    cause: DropCause::Capacity,
                }
            } else {
                tokens -= need;
                // one uniform per link keeps the draw stream aligned
                // with the oracle regardless of drop position
                let mut corrupted = false;
                for &ber in &link_bers {
                    let p_corrupt = 1.0 - (1.0 - ber).powf(8.0 * p.bytes as f64);
                    let u: f64 = rng.gen();
                    if u < p_corrupt {
                        corrupted = true;
                    }
                }
                if corrupted {
                    PacketOutcome::Dropped {
                        cause: DropCause::Corruption,
                    }
                } else {
                    PacketOutcome::Delivered {
                        egress_us: p.ingress_us + latency,
                    }
                }
            };
            records.push(TransportRecord {
                user_id: p.user_id,
                sequence: p.sequence,
                ingress_us: p.ingress_us,
                outcome,
            });
            if let PacketOutcome::Delivered { egress_us } = outcome {
                let mut rec = p.record;
                rec.timestamp_s = (egress_us / 1_000_000) as u32;
                rec.timestamp_us = (egress_us % 1_000_000) as u32;
                let key = (p.user_id, ch.src, ch.dst);
                if let Some(stream) = egress.get_mut(&key) {
                    stream.records.push(rec);
                }
            }
        }
    }

    records.sort_by_key(|r| (r.ingress_us, r.user_id, r.sequence));
    for stream in egress.values_mut() {
        stream
            .records
            .sort_by_key(|r| (r.timestamp_s, r.timestamp_us));
    }
    Ok((records, egress))
}

/// Keeps, per sequence number, the ingress record and (when delivered)
/// the matching egress record; interior hops are already absent by
/// construction. Output is time-sorted.
pub fn truncate_stream(
    ingress: &PcapStream,
    egress: &PcapStream,
) -> Result<PcapStream, OtnError> {
    let mut ingress_seqs: BTreeSet<u64> = BTreeSet::new();
    for (i, rec) in ingress.records.iter().enumerate() {
        let h = SyntheticPacketHeader::decode(&rec.payload)
            .ok_or(OtnError::MissingHeader(i))?;
        ingress_seqs.insert(h.sequence);
    }
    let mut merged: Vec<PacketRecord> = Vec::new();
    for (i, rec) in egress.records.iter().enumerate() {
        let h = SyntheticPacketHeader::decode(&rec.payload)
            .ok_or(OtnError::MissingHeader(i))?;
        if !ingress_seqs.contains(&h.sequence) {
            return Err(OtnError::OrphanEgress(h.sequence));
        }
        merged.push(rec.clone());
    }
    merged.extend(ingress.records.iter().cloned());
    merged.sort_by_key(|r| (r.timestamp_s, r.timestamp_us));
    Ok(PcapStream {
        link_type: ingress.link_type,
        snap_len: ingress.snap_len,
        records: merged,
    })
}
