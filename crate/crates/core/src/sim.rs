//! Deterministic model of QUIC frontend clusters.
//!
//! A cluster exposes a set of VIPs; an L4 stage hashes each packet to one of
//! the cluster's L7LB instances (by 5-tuple, or by connection ID when the
//! cluster is CID-aware), and the instance runs a minimal QUIC server: it
//! answers fresh Initials with an Initial/Handshake flight, retransmits that
//! flight on an exponential schedule until acknowledged, and silently drops
//! packets that conflict with connection state it still holds.
//!
//! Everything runs on a virtual clock driven by a seeded generator, so a
//! scenario replays bit for bit. The simulator is the ground truth for the
//! passive analyses and the target of the active prober.

use std::cmp::{Ordering, Reverse};
use std::collections::{BinaryHeap, HashMap, HashSet};
use std::net::{IpAddr, Ipv4Addr};
use std::path::Path;

use ipnet::Ipv4Net;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scid::{decode_facebook_scid, encode_facebook_scid, FacebookScidFields, CLOUDFLARE_FIRST_OCTET, CLOUDFLARE_SCID_LEN};
use crate::wire::{encode_long_header, varint, ConnectionId, Datagram, LongHeader, PacketType, MAX_CID_LEN, QUIC_PORT};
use crate::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SimError {
    #[error("invalid deployment config: {0}")]
    InvalidConfig(String),
    #[error("{0} is not a VIP of this deployment")]
    NotAVip(IpAddr),
}

/// Unix time of virtual time 0 (2022-01-01T00:00:00Z).
pub const TIME_BASE: f64 = 1_640_995_200.0;

pub const UDP: u8 = 17;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScidSchemeKind {
    FacebookV1,
    FacebookV2,
    CloudflareFixed,
    EchoClientDcid,
    UniformRandom,
}

impl ScidSchemeKind {
    /// Largest host ID the scheme can carry.
    pub fn max_host_id(self) -> u32 {
        match self {
            ScidSchemeKind::FacebookV1 => u16::MAX as u32,
            ScidSchemeKind::FacebookV2 => (1 << 24) - 1,
            _ => u32::MAX,
        }
    }

    fn facebook_version(self) -> Option<u8> {
        match self {
            ScidSchemeKind::FacebookV1 => Some(1),
            ScidSchemeKind::FacebookV2 => Some(2),
            _ => None,
        }
    }
}

/// Target datagram lengths (octets) of the server flight.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PaddingPolicy {
    pub initial: usize,
    pub handshake: usize,
    pub coalesced: usize,
}

impl Default for PaddingPolicy {
    fn default() -> Self {
        PaddingPolicy {
            initial: 1200,
            handshake: 1200,
            coalesced: 1200,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StackProfile {
    pub operator: String,
    pub initial_rto: f64,
    #[serde(default = "default_backoff")]
    pub backoff_base: f64,
    pub max_retransmissions: u32,
    /// Lower end of the per-session retransmission count; each session draws
    /// uniformly from `min..=max`. Defaults to `max_retransmissions`.
    #[serde(default)]
    pub min_retransmissions: Option<u32>,
    pub coalescence: bool,
    pub scid_scheme: ScidSchemeKind,
    #[serde(default)]
    pub padding: PaddingPolicy,
    #[serde(default = "default_version")]
    pub version: u32,
}

fn default_backoff() -> f64 {
    2.0
}

fn default_version() -> u32 {
    1
}

impl StackProfile {
    pub fn cloudflare() -> Self {
        StackProfile {
            operator: "Cloudflare".into(),
            initial_rto: 1.0,
            backoff_base: 2.0,
            max_retransmissions: 6,
            min_retransmissions: Some(3),
            coalescence: true,
            scid_scheme: ScidSchemeKind::CloudflareFixed,
            padding: PaddingPolicy {
                coalesced: 1200,
                ..PaddingPolicy::default()
            },
            version: 1,
        }
    }

    pub fn facebook() -> Self {
        StackProfile {
            operator: "Facebook".into(),
            initial_rto: 0.4,
            backoff_base: 2.0,
            max_retransmissions: 9,
            min_retransmissions: Some(7),
            coalescence: false,
            scid_scheme: ScidSchemeKind::FacebookV1,
            padding: PaddingPolicy {
                initial: 1232,
                handshake: 1232,
                coalesced: 1232,
            },
            version: 1,
        }
    }

    pub fn google() -> Self {
        StackProfile {
            operator: "Google".into(),
            initial_rto: 0.3,
            backoff_base: 2.0,
            max_retransmissions: 6,
            min_retransmissions: Some(3),
            coalescence: true,
            scid_scheme: ScidSchemeKind::EchoClientDcid,
            padding: PaddingPolicy {
                coalesced: 1250,
                ..PaddingPolicy::default()
            },
            version: 1,
        }
    }

    pub fn builtin() -> Vec<StackProfile> {
        vec![Self::cloudflare(), Self::facebook(), Self::google()]
    }

    /// Built-in profile by operator name, case-insensitive.
    pub fn by_name(name: &str) -> Option<StackProfile> {
        Self::builtin().into_iter().find(|p| p.operator.eq_ignore_ascii_case(name))
    }

    pub fn retransmission_range(&self) -> (u32, u32) {
        (self.min_retransmissions.unwrap_or(self.max_retransmissions), self.max_retransmissions)
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let (lo, hi) = self.retransmission_range();
        if !(self.initial_rto > 0.0) || !(self.backoff_base >= 1.0) || lo > hi {
            return Err(SimError::InvalidConfig(format!(
                "profile {}: need initial_rto > 0, backoff_base >= 1, min <= max retransmissions",
                self.operator
            )));
        }
        Ok(())
    }

    /// Offsets of the resends after the first response: `rto * base^k`.
    pub fn resend_offsets(&self, retransmissions: u32) -> Vec<f64> {
        (0..retransmissions as i32).map(|k| self.initial_rto * self.backoff_base.powi(k)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RoutingMode {
    #[default]
    FiveTuple,
    CidAware,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FiveTuple {
    pub src_ip: IpAddr,
    pub dst_ip: IpAddr,
    pub src_port: u16,
    pub dst_port: u16,
    pub protocol: u8,
}

impl FiveTuple {
    pub fn udp(src_ip: IpAddr, src_port: u16, dst_ip: IpAddr, dst_port: u16) -> Self {
        FiveTuple {
            src_ip,
            dst_ip,
            src_port,
            dst_port,
            protocol: UDP,
        }
    }

    fn hash(&self) -> u64 {
        let mut h = Fnv::default();
        for ip in [self.src_ip, self.dst_ip] {
            match ip {
                IpAddr::V4(v4) => h.write(&v4.octets()),
                IpAddr::V6(v6) => h.write(&v6.octets()),
            }
        }
        h.write(&self.src_port.to_be_bytes());
        h.write(&self.dst_port.to_be_bytes());
        h.write(&[self.protocol]);
        h.0
    }
}

struct Fnv(u64);

impl Default for Fnv {
    fn default() -> Self {
        Fnv(0xcbf2_9ce4_8422_2325)
    }
}

impl Fnv {
    fn write(&mut self, bytes: &[u8]) {
        for b in bytes {
            self.0 ^= u64::from(*b);
            self.0 = self.0.wrapping_mul(0x0100_0000_01b3);
        }
    }
}

/// splitmix64 finalizer.
fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ConnState {
    Established,
    Closed,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Connection {
    pub state: ConnState,
    pub client: FiveTuple,
    pub expires: f64,
}

#[derive(Debug, Clone)]
pub struct L7LBInstance {
    pub host_id: u32,
    pub workers: u32,
    pub process_id: u8,
    pub state_lifetime: f64,
    pub connections: HashMap<ConnectionId, Connection>,
}

impl L7LBInstance {
    pub fn new(host_id: u32, workers: u32, state_lifetime: f64) -> Self {
        L7LBInstance {
            host_id,
            workers: workers.max(1),
            process_id: 0,
            state_lifetime,
            connections: HashMap::new(),
        }
    }

    pub fn live(&self, cid: &ConnectionId, now: f64) -> Option<&Connection> {
        self.connections.get(cid).filter(|c| now < c.expires)
    }

    fn purge(&mut self, now: f64) {
        self.connections.retain(|_, c| now < c.expires);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PacketVerdict {
    Accept,
    SilentDiscard,
    NewConnection,
}

/// Server-side admission of one packet against the instance's connection
/// table.
///
/// A packet addressed to a live server CID is accepted when it continues the
/// connection; a fresh Initial from another 5-tuple (or anything for a
/// closed connection) is dropped without reply. An Initial for an unknown CID
/// opens a connection; other packets for unknown CIDs are dropped. Dropped
/// packets do not refresh state.
pub fn handle_packet(instance: &mut L7LBInstance, packet: &LongHeader, from: &FiveTuple, now: f64) -> PacketVerdict {
    let lifetime = instance.state_lifetime;
    match instance.connections.get_mut(&packet.dcid).filter(|c| now < c.expires) {
        Some(conn) => {
            let conflicting = conn.state == ConnState::Closed
                || (packet.packet_type == PacketType::Initial && conn.client != *from);
            if conflicting {
                PacketVerdict::SilentDiscard
            } else {
                conn.expires = now + lifetime;
                PacketVerdict::Accept
            }
        }
        None if packet.packet_type == PacketType::Initial => PacketVerdict::NewConnection,
        None => PacketVerdict::SilentDiscard,
    }
}

/// The server's answer to a client Initial.
#[derive(Debug, Clone, PartialEq)]
pub struct ServerFlight {
    pub scid: ConnectionId,
    /// UDP payloads of one round, in send order.
    pub datagrams: Vec<Vec<u8>>,
    /// Offsets of resend rounds after the first response.
    pub resend_offsets: Vec<f64>,
}

fn generate_scid(
    profile: &StackProfile,
    instance: &L7LBInstance,
    client_dcid: &ConnectionId,
    rng: &mut ChaCha8Rng,
) -> ConnectionId {
    match profile.scid_scheme {
        ScidSchemeKind::FacebookV1 | ScidSchemeKind::FacebookV2 => {
            let fields = FacebookScidFields {
                scid_version: profile.scid_scheme.facebook_version().expect("facebook scheme"),
                host_id: instance.host_id,
                worker_id: rng.gen_range(0..instance.workers.min(256)) as u8,
                process_id: instance.process_id,
            };
            encode_facebook_scid(&fields, rng.next_u64()).expect("host IDs validated at build time")
        }
        ScidSchemeKind::CloudflareFixed => {
            let mut b = [0u8; CLOUDFLARE_SCID_LEN];
            rng.fill_bytes(&mut b);
            b[0] = CLOUDFLARE_FIRST_OCTET;
            ConnectionId::new(&b).expect("20 octets")
        }
        ScidSchemeKind::EchoClientDcid => {
            let d = client_dcid.as_bytes();
            if d.len() >= 8 {
                ConnectionId::new(&d[..8]).expect("8 octets")
            } else {
                let mut b = [0u8; 8];
                b[..d.len()].copy_from_slice(d);
                rng.fill_bytes(&mut b[d.len()..]);
                ConnectionId::new(&b).expect("8 octets")
            }
        }
        ScidSchemeKind::UniformRandom => ConnectionId::new(&rng.gen::<[u8; 8]>()).expect("8 octets"),
    }
}

/// Encodes a packet whose wire length is `target` octets, or as close above
/// as the header allows. Payload bytes stand in for ciphertext.
fn packet_of_len(h: &LongHeader, target: usize, rng: &mut ChaCha8Rng) -> Vec<u8> {
    let fixed = 7 + h.dcid.len() + h.scid.len() + if h.packet_type == PacketType::Initial { 1 } else { 0 };
    let mut len = target.saturating_sub(fixed + 2).max(20);
    while len > 20 && fixed + varint::encoded_len(len as u64) + len > target {
        len -= 1;
    }
    let mut payload = vec![0u8; len];
    rng.fill_bytes(&mut payload);
    encode_long_header(h, &payload).expect("CIDs within bounds")
}

/// Answers a client Initial: picks the server CID per scheme, builds the
/// Initial/Handshake flight (one datagram when coalescing) and the resend
/// schedule. `retransmissions` is the number of resend rounds.
pub fn serve_initial(
    profile: &StackProfile,
    instance: &L7LBInstance,
    client_initial: &LongHeader,
    retransmissions: u32,
    rng: &mut ChaCha8Rng,
) -> ServerFlight {
    let scid = generate_scid(profile, instance, &client_initial.dcid, rng);
    build_flight(profile, scid, client_initial, retransmissions, rng)
}

fn build_flight(
    profile: &StackProfile,
    scid: ConnectionId,
    client_initial: &LongHeader,
    retransmissions: u32,
    rng: &mut ChaCha8Rng,
) -> ServerFlight {
    let to_client = client_initial.scid;
    let initial = LongHeader::new(PacketType::Initial, profile.version, to_client, scid);
    let handshake = LongHeader::new(PacketType::Handshake, profile.version, to_client, scid);
    let pad = profile.padding;
    let datagrams = if profile.coalescence {
        let mut d = packet_of_len(&initial, 180, rng);
        let rest = pad.coalesced.saturating_sub(d.len());
        d.extend(packet_of_len(&handshake, rest, rng));
        vec![d]
    } else {
        vec![packet_of_len(&initial, pad.initial, rng), packet_of_len(&handshake, pad.handshake, rng)]
    };
    ServerFlight {
        scid,
        datagrams,
        resend_offsets: profile.resend_offsets(retransmissions),
    }
}

/// A frontend cluster: VIPs, L7LB instances and the L4 routing stage.
#[derive(Debug, Clone)]
pub struct FrontendCluster {
    pub name: String,
    pub vips: Vec<IpAddr>,
    pub l7lbs: Vec<L7LBInstance>,
    pub routing_mode: RoutingMode,
    pub profile: StackProfile,
    salt: u64,
    vip_set: HashSet<IpAddr>,
    host_index: HashMap<u32, usize>,
    cid_index: HashMap<ConnectionId, usize>,
}

/// Cluster description inside a [`DeploymentConfig`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClusterConfig {
    pub name: String,
    /// Operator name of a built-in or `[[profile]]` stack profile.
    pub profile: String,
    #[serde(default)]
    pub vips: Vec<IpAddr>,
    /// First VIP when `vips` is empty; VIPs are consecutive addresses.
    #[serde(default)]
    pub vip_base: Option<Ipv4Addr>,
    #[serde(default = "one")]
    pub vip_count: u32,
    #[serde(default = "one")]
    pub l7lbs: u32,
    #[serde(default)]
    pub host_ids: Vec<u32>,
    /// First host ID for sequential assignment; defaults to continuing after
    /// the previous cluster's IDs.
    #[serde(default)]
    pub host_id_base: Option<u32>,
    #[serde(default = "default_workers")]
    pub workers: u32,
    #[serde(default)]
    pub process_id: u8,
    #[serde(default)]
    pub routing: RoutingMode,
    #[serde(default = "default_lifetime")]
    pub state_lifetime: f64,
}

fn one() -> u32 {
    1
}

fn default_workers() -> u32 {
    16
}

fn default_lifetime() -> f64 {
    240.0
}

pub const DEFAULT_STATE_LIFETIME: f64 = 240.0;

impl ClusterConfig {
    pub fn new(name: impl Into<String>, profile: impl Into<String>) -> Self {
        ClusterConfig {
            name: name.into(),
            profile: profile.into(),
            vips: Vec::new(),
            vip_base: None,
            vip_count: 1,
            l7lbs: 1,
            host_ids: Vec::new(),
            host_id_base: None,
            workers: default_workers(),
            process_id: 0,
            routing: RoutingMode::FiveTuple,
            state_lifetime: DEFAULT_STATE_LIFETIME,
        }
    }
}

/// Spoofed-flood parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FloodConfig {
    /// Number of distinct spoofed (telescope) source addresses.
    pub sources: u32,
    pub initials_per_source: u32,
    pub telescope: Ipv4Net,
    /// Capture end, virtual seconds.
    pub duration: f64,
    /// Client Initials arrive uniformly within `[0, arrival_window)`.
    pub arrival_window: f64,
    /// Probability that a client acknowledges the first flight.
    pub ack_probability: f64,
}

impl Default for FloodConfig {
    fn default() -> Self {
        FloodConfig {
            sources: 1000,
            initials_per_source: 1,
            telescope: "44.0.0.0/9".parse().expect("literal prefix"),
            duration: 600.0,
            arrival_window: 60.0,
            ack_probability: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeploymentConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub flood: FloodConfig,
    #[serde(default)]
    pub profile: Vec<StackProfile>,
    #[serde(default)]
    pub cluster: Vec<ClusterConfig>,
}

impl DeploymentConfig {
    pub fn parse(text: &str) -> Result<Self, Error> {
        toml::from_str(text).map_err(|e| Error::Config(format!("deployment: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self, Error> {
        Self::parse(&crate::read_text(path)?)
    }

    pub fn profile(&self, name: &str) -> Option<StackProfile> {
        self.profile
            .iter()
            .find(|p| p.operator.eq_ignore_ascii_case(name))
            .cloned()
            .or_else(|| StackProfile::by_name(name))
    }
}

pub const DEFAULT_DEPLOYMENT: &str = include_str!("../config/deployment.toml");

fn salt_for(seed: u64, name: &str) -> u64 {
    let mut h = Fnv::default();
    h.write(name.as_bytes());
    mix64(seed ^ h.0)
}

/// Builds one cluster. `next_host_id` supplies the default sequential base.
pub fn build_cluster(cfg: &ClusterConfig, profile: StackProfile, seed: u64, next_host_id: u32) -> Result<FrontendCluster, SimError> {
    profile.validate()?;
    let invalid = |m: String| SimError::InvalidConfig(format!("cluster {}: {m}", cfg.name));
    let vips: Vec<IpAddr> = if !cfg.vips.is_empty() {
        cfg.vips.clone()
    } else {
        let base = cfg.vip_base.ok_or_else(|| invalid("needs vips or vip_base".into()))?;
        let start = u32::from(base);
        (0..cfg.vip_count)
            .map(|i| start.checked_add(i).map(|a| IpAddr::V4(Ipv4Addr::from(a))))
            .collect::<Option<_>>()
            .ok_or_else(|| invalid("VIP range overflows the address space".into()))?
    };
    if vips.is_empty() {
        return Err(invalid("no VIPs".into()));
    }
    let vip_set: HashSet<IpAddr> = vips.iter().copied().collect();
    if vip_set.len() != vips.len() {
        return Err(invalid("duplicate VIPs".into()));
    }
    let host_ids: Vec<u32> = if !cfg.host_ids.is_empty() {
        cfg.host_ids.clone()
    } else {
        let base = cfg.host_id_base.unwrap_or(next_host_id);
        (0..cfg.l7lbs)
            .map(|i| base.checked_add(i))
            .collect::<Option<_>>()
            .ok_or_else(|| invalid("host ID range overflows".into()))?
    };
    if host_ids.is_empty() {
        return Err(invalid("no L7LB instances".into()));
    }
    let max = profile.scid_scheme.max_host_id();
    if let Some(bad) = host_ids.iter().find(|&&h| h > max) {
        return Err(invalid(format!("host ID {bad} exceeds scheme maximum {max}")));
    }
    if cfg.process_id > 1 {
        return Err(invalid("process_id must be 0 or 1".into()));
    }
    if !(cfg.state_lifetime > 0.0) {
        return Err(invalid("state_lifetime must be positive".into()));
    }
    let mut host_index = HashMap::new();
    for (i, h) in host_ids.iter().enumerate() {
        if host_index.insert(*h, i).is_some() {
            return Err(invalid(format!("duplicate host ID {h}")));
        }
    }
    let l7lbs = host_ids
        .iter()
        .map(|&h| {
            let mut inst = L7LBInstance::new(h, cfg.workers, cfg.state_lifetime);
            inst.process_id = cfg.process_id;
            inst
        })
        .collect();
    Ok(FrontendCluster {
        name: cfg.name.clone(),
        vips,
        l7lbs,
        routing_mode: cfg.routing,
        profile,
        salt: salt_for(seed, &cfg.name),
        vip_set,
        host_index,
        cid_index: HashMap::new(),
    })
}

/// Outcome of a client Initial reaching a cluster.
#[derive(Debug, Clone, PartialEq)]
pub enum InitialOutcome {
    Served { instance: usize, flight: ServerFlight },
    Discarded { instance: usize },
}

impl FrontendCluster {
    pub fn is_vip(&self, ip: IpAddr) -> bool {
        self.vip_set.contains(&ip)
    }

    pub fn host_ids(&self) -> impl Iterator<Item = u32> + '_ {
        self.l7lbs.iter().map(|i| i.host_id)
    }

    /// Rendezvous hash of the 5-tuple over the instances.
    fn hash_route(&self, ft: &FiveTuple) -> usize {
        let key = mix64(ft.hash() ^ self.salt);
        let mut best = (0u64, 0usize);
        for (i, inst) in self.l7lbs.iter().enumerate() {
            let w = mix64(key ^ mix64(u64::from(inst.host_id)));
            if i == 0 || w > best.0 {
                best = (w, i);
            }
        }
        best.1
    }

    /// Index of the instance that receives a packet with this 5-tuple and DCID.
    pub fn route(&self, ft: &FiveTuple, dcid: &ConnectionId, now: f64) -> Result<usize, SimError> {
        if !self.is_vip(ft.dst_ip) {
            return Err(SimError::NotAVip(ft.dst_ip));
        }
        if self.routing_mode == RoutingMode::CidAware {
            if let Some(&i) = self.cid_index.get(dcid) {
                if self.l7lbs[i].live(dcid, now).is_some() {
                    return Ok(i);
                }
            }
            if self.profile.scid_scheme.facebook_version().is_some() {
                if let Ok(f) = decode_facebook_scid(dcid) {
                    if let Some(&i) = self.host_index.get(&f.host_id) {
                        return Ok(i);
                    }
                }
            }
        }
        Ok(self.hash_route(ft))
    }

    fn draw_retransmissions(&self, rng: &mut ChaCha8Rng) -> u32 {
        let (lo, hi) = self.profile.retransmission_range();
        rng.gen_range(lo..=hi)
    }

    /// Routes a client Initial and admits it against the chosen instance's
    /// state. A new connection gets a server CID and is recorded; the result
    /// is the instance index and the CID, or `None` when silently dropped.
    pub fn admit_initial(
        &mut self,
        now: f64,
        from: &FiveTuple,
        initial: &LongHeader,
        rng: &mut ChaCha8Rng,
    ) -> Result<(usize, Option<ConnectionId>), SimError> {
        let idx = self.route(from, &initial.dcid, now)?;
        if handle_packet(&mut self.l7lbs[idx], initial, from, now) != PacketVerdict::NewConnection {
            return Ok((idx, None));
        }
        let scid = generate_scid(&self.profile, &self.l7lbs[idx], &initial.dcid, rng);
        let n = self.l7lbs[idx].connections.len();
        if n >= 4096 && n.is_power_of_two() {
            self.l7lbs[idx].purge(now);
            self.cid_index.retain(|cid, i| self.l7lbs[*i].live(cid, now).is_some());
        }
        let inst = &mut self.l7lbs[idx];
        inst.connections.insert(
            scid,
            Connection {
                state: ConnState::Established,
                client: *from,
                expires: now + inst.state_lifetime,
            },
        );
        self.cid_index.insert(scid, idx);
        Ok((idx, Some(scid)))
    }

    /// Like [`admit_initial`](Self::admit_initial), and builds the server
    /// flight with a retransmission count drawn from the profile's range.
    pub fn receive_initial(
        &mut self,
        now: f64,
        from: &FiveTuple,
        initial: &LongHeader,
        rng: &mut ChaCha8Rng,
    ) -> Result<InitialOutcome, SimError> {
        let (instance, scid) = self.admit_initial(now, from, initial, rng)?;
        let Some(scid) = scid else {
            return Ok(InitialOutcome::Discarded { instance });
        };
        let n = self.draw_retransmissions(rng);
        let flight = build_flight(&self.profile, scid, initial, n, rng);
        Ok(InitialOutcome::Served { instance, flight })
    }

    /// Delivers any other client packet (e.g. an acknowledgement).
    pub fn receive(&mut self, now: f64, from: &FiveTuple, packet: &LongHeader) -> Result<(usize, PacketVerdict), SimError> {
        let idx = self.route(from, &packet.dcid, now)?;
        Ok((idx, handle_packet(&mut self.l7lbs[idx], packet, from, now)))
    }

    /// Closes a connection; its CID stays known (and blocks reuse) until the
    /// state expires.
    pub fn close(&mut self, scid: &ConnectionId) {
        if let Some(&i) = self.cid_index.get(scid) {
            if let Some(c) = self.l7lbs[i].connections.get_mut(scid) {
                c.state = ConnState::Closed;
            }
        }
    }
}

/// Every cluster of a deployment, indexed by VIP.
#[derive(Debug, Clone)]
pub struct Deployment {
    pub seed: u64,
    pub clusters: Vec<FrontendCluster>,
    vip_index: HashMap<IpAddr, usize>,
}

impl Deployment {
    pub fn build(cfg: &DeploymentConfig) -> Result<Self, SimError> {
        let mut clusters = Vec::with_capacity(cfg.cluster.len());
        let mut next_host_id = 1u32;
        let mut vip_index = HashMap::new();
        for c in &cfg.cluster {
            let profile = cfg
                .profile(&c.profile)
                .ok_or_else(|| SimError::InvalidConfig(format!("cluster {}: unknown profile {}", c.name, c.profile)))?;
            let cluster = build_cluster(c, profile, cfg.seed, next_host_id)?;
            next_host_id = cluster.host_ids().max().unwrap_or(0).saturating_add(1);
            for v in &cluster.vips {
                if vip_index.insert(*v, clusters.len()).is_some() {
                    return Err(SimError::InvalidConfig(format!("VIP {v} in more than one cluster")));
                }
            }
            clusters.push(cluster);
        }
        Ok(Deployment {
            seed: cfg.seed,
            clusters,
            vip_index,
        })
    }

    pub fn from_clusters(seed: u64, clusters: Vec<FrontendCluster>) -> Result<Self, SimError> {
        let mut vip_index = HashMap::new();
        for (i, c) in clusters.iter().enumerate() {
            for v in &c.vips {
                if vip_index.insert(*v, i).is_some() {
                    return Err(SimError::InvalidConfig(format!("VIP {v} in more than one cluster")));
                }
            }
        }
        Ok(Deployment {
            seed,
            clusters,
            vip_index,
        })
    }

    pub fn cluster_of(&self, vip: IpAddr) -> Result<usize, SimError> {
        self.vip_index.get(&vip).copied().ok_or(SimError::NotAVip(vip))
    }

    pub fn vips(&self) -> impl Iterator<Item = IpAddr> + '_ {
        self.clusters.iter().flat_map(|c| c.vips.iter().copied())
    }
}

struct Scheduled<E> {
    time: f64,
    seq: u64,
    event: E,
}

impl<E> PartialEq for Scheduled<E> {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl<E> Eq for Scheduled<E> {}

impl<E> PartialOrd for Scheduled<E> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl<E> Ord for Scheduled<E> {
    fn cmp(&self, other: &Self) -> Ordering {
        self.time.total_cmp(&other.time).then(self.seq.cmp(&other.seq))
    }
}

/// Event queue on virtual time. Events at equal times pop in scheduling
/// order, so runs are reproducible.
pub struct VirtualClock<E> {
    now: f64,
    seq: u64,
    queue: BinaryHeap<Reverse<Scheduled<E>>>,
}

impl<E> Default for VirtualClock<E> {
    fn default() -> Self {
        VirtualClock {
            now: 0.0,
            seq: 0,
            queue: BinaryHeap::new(),
        }
    }
}

impl<E> VirtualClock<E> {
    pub fn now(&self) -> f64 {
        self.now
    }

    /// Schedules `event` at `time`, clamped so time never runs backwards.
    pub fn schedule(&mut self, time: f64, event: E) {
        let time = time.max(self.now);
        self.queue.push(Reverse(Scheduled { time, seq: self.seq, event }));
        self.seq += 1;
    }

    pub fn pop(&mut self) -> Option<(f64, E)> {
        let Reverse(s) = self.queue.pop()?;
        self.now = s.time;
        Some((s.time, s.event))
    }

    pub fn len(&self) -> usize {
        self.queue.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queue.is_empty()
    }
}

/// Ground truth for one served spoofed session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServedSession {
    pub vip: IpAddr,
    pub spoofed_source: IpAddr,
    pub host_id: u32,
    pub scid: ConnectionId,
    pub client_dcid: ConnectionId,
    pub start: f64,
    pub planned_resends: u32,
    pub acked: bool,
}

#[derive(Debug, Clone, Default)]
pub struct FloodOutput {
    /// Backscatter arriving at the telescope, in time order.
    pub datagrams: Vec<Datagram>,
    pub sessions: Vec<ServedSession>,
}

enum FloodEvent {
    ClientInitial { from: FiveTuple, initial: LongHeader },
    Ack { session: usize },
    Round { session: usize },
}

struct Pending {
    flight: Vec<Vec<u8>>,
    to: FiveTuple,
    acked: bool,
}

/// Draws `n` distinct addresses from the telescope prefix.
pub fn spoofed_sources(telescope: Ipv4Net, n: u32, rng: &mut ChaCha8Rng) -> Result<Vec<IpAddr>, SimError> {
    let size = 1u64 << (32 - telescope.prefix_len());
    if u64::from(n) > size {
        return Err(SimError::InvalidConfig(format!("{n} sources do not fit {telescope}")));
    }
    let base = u32::from(telescope.network());
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(n as usize);
    while out.len() < n as usize {
        let a = base + (rng.gen_range(0..size) as u32);
        if seen.insert(a) {
            out.push(IpAddr::V4(Ipv4Addr::from(a)));
        }
    }
    Ok(out)
}

fn random_cid(rng: &mut ChaCha8Rng, lens: std::ops::RangeInclusive<usize>) -> ConnectionId {
    let mut b = [0u8; MAX_CID_LEN];
    let n = rng.gen_range(lens);
    rng.fill_bytes(&mut b[..n]);
    ConnectionId::new(&b[..n]).expect("length within bounds")
}

/// Replays a spoofed Initial flood against every cluster of the deployment
/// and returns the backscatter reaching the telescope.
///
/// Each spoofed source sends `initials_per_source` Initials to random VIPs,
/// at uniform times within the arrival window. Spoofed clients are dark and
/// never acknowledge unless `ack_probability` says otherwise, so servers run
/// their full resend schedule; anything scheduled at or after `duration` is
/// cut off.
pub fn simulate_flood(deployment: &mut Deployment, flood: &FloodConfig, seed: u64) -> Result<FloodOutput, SimError> {
    if !(flood.duration > 0.0) {
        return Err(SimError::InvalidConfig("flood duration must be positive".into()));
    }
    if !(0.0..=1.0).contains(&flood.ack_probability) {
        return Err(SimError::InvalidConfig("ack_probability must be within [0, 1]".into()));
    }
    let vips: Vec<IpAddr> = deployment.vips().collect();
    if vips.is_empty() {
        return Err(SimError::InvalidConfig("deployment has no clusters".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sources = spoofed_sources(flood.telescope, flood.sources, &mut rng)?;
    let window = flood.arrival_window.clamp(0.0, flood.duration);
    let mut clock = VirtualClock::default();
    for src in &sources {
        for _ in 0..flood.initials_per_source {
            let vip = vips[rng.gen_range(0..vips.len())];
            let from = FiveTuple::udp(*src, rng.gen_range(1024..=u16::MAX), vip, QUIC_PORT);
            let initial = LongHeader::new(
                PacketType::Initial,
                1,
                random_cid(&mut rng, 8..=MAX_CID_LEN),
                random_cid(&mut rng, 8..=8),
            );
            clock.schedule(rng.gen::<f64>() * window, FloodEvent::ClientInitial { from, initial });
        }
    }

    let mut out = FloodOutput::default();
    let mut pending: Vec<Pending> = Vec::new();
    while let Some((now, event)) = clock.pop() {
        if now >= flood.duration {
            break;
        }
        match event {
            FloodEvent::ClientInitial { from, initial } => {
                let ci = deployment.cluster_of(from.dst_ip)?;
                let cluster = &mut deployment.clusters[ci];
                let InitialOutcome::Served { instance, flight } = cluster.receive_initial(now, &from, &initial, &mut rng)? else {
                    continue;
                };
                let acked = flood.ack_probability > 0.0 && rng.gen_bool(flood.ack_probability);
                let session = pending.len();
                out.sessions.push(ServedSession {
                    vip: from.dst_ip,
                    spoofed_source: from.src_ip,
                    host_id: cluster.l7lbs[instance].host_id,
                    scid: flight.scid,
                    client_dcid: initial.dcid,
                    start: now,
                    planned_resends: flight.resend_offsets.len() as u32,
                    acked,
                });
                clock.schedule(now, FloodEvent::Round { session });
                for off in &flight.resend_offsets {
                    clock.schedule(now + off, FloodEvent::Round { session });
                }
                if acked {
                    // Half the first RTO: the acknowledgement beats every resend.
                    clock.schedule(now + cluster.profile.initial_rto / 2.0, FloodEvent::Ack { session });
                }
                pending.push(Pending {
                    flight: flight.datagrams,
                    to: from,
                    acked: false,
                });
            }
            FloodEvent::Ack { session } => pending[session].acked = true,
            FloodEvent::Round { session } => {
                let p = &pending[session];
                if p.acked {
                    continue;
                }
                for payload in &p.flight {
                    out.datagrams.push(Datagram {
                        timestamp: TIME_BASE + now,
                        src_ip: p.to.dst_ip,
                        dst_ip: p.to.src_ip,
                        src_port: p.to.dst_port,
                        dst_port: p.to.src_port,
                        payload: payload.clone(),
                    });
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::capture::{capture_bytes, LinkType};
    use crate::wire::split_datagram;

    fn cluster(profile: StackProfile, l7lbs: u32, vips: u32, mode: RoutingMode) -> FrontendCluster {
        let mut cfg = ClusterConfig::new("test", profile.operator.clone());
        cfg.vip_base = Some("157.240.0.1".parse().unwrap());
        cfg.vip_count = vips;
        cfg.l7lbs = l7lbs;
        cfg.routing = mode;
        build_cluster(&cfg, profile, 7, 1).unwrap()
    }

    fn client(port: u16, vip: IpAddr) -> FiveTuple {
        FiveTuple::udp("198.51.100.7".parse().unwrap(), port, vip, 443)
    }

    fn cid(b: &[u8]) -> ConnectionId {
        ConnectionId::new(b).unwrap()
    }

    #[test]
    fn build_validation() {
        let c = cluster(StackProfile::facebook(), 453, 22, RoutingMode::FiveTuple);
        assert_eq!(c.vips.len(), 22);
        let ids: HashSet<u32> = c.host_ids().collect();
        assert_eq!(ids.len(), 453);
        let min = cluster(StackProfile::facebook(), 1, 1, RoutingMode::FiveTuple);
        assert_eq!((min.vips.len(), min.l7lbs.len()), (1, 1));

        let mut cfg = ClusterConfig::new("dup", "Facebook");
        cfg.vip_base = Some("10.0.0.1".parse().unwrap());
        cfg.host_ids = vec![4, 5, 4];
        assert!(matches!(build_cluster(&cfg, StackProfile::facebook(), 0, 1), Err(SimError::InvalidConfig(_))));
        cfg.host_ids = vec![70_000];
        assert!(matches!(build_cluster(&cfg, StackProfile::facebook(), 0, 1), Err(SimError::InvalidConfig(_))));
        assert!(build_cluster(&cfg, StackProfile::google(), 0, 1).is_ok());
        cfg.vip_base = None;
        assert!(build_cluster(&cfg, StackProfile::google(), 0, 1).is_err());
    }

    #[test]
    fn five_tuple_routing() {
        let c = cluster(StackProfile::facebook(), 400, 1, RoutingMode::FiveTuple);
        let vip = c.vips[0];
        let d = cid(&[9; 8]);
        assert_eq!(c.route(&client(5000, vip), &d, 0.0).unwrap(), c.route(&client(5000, vip), &d, 99.0).unwrap());
        let mut hit = vec![false; 400];
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10_000 {
            hit[c.route(&client(rng.gen(), vip), &d, 0.0).unwrap()] = true;
        }
        // Balls into bins: expected coverage 1 - (1 - 1/400)^10000, essentially 1.
        let covered = hit.iter().filter(|h| **h).count();
        assert!(covered as f64 >= 0.95 * 400.0, "{covered}");
        assert_eq!(
            c.route(&client(1, "1.2.3.4".parse().unwrap()), &d, 0.0),
            Err(SimError::NotAVip("1.2.3.4".parse().unwrap()))
        );
    }

    #[test]
    fn cid_aware_routing_follows_live_connection() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for profile in [StackProfile::google(), StackProfile::facebook()] {
            let mut c = cluster(profile, 64, 2, RoutingMode::CidAware);
            let vip = c.vips[0];
            let init = LongHeader::new(PacketType::Initial, 1, cid(&[1; 12]), cid(&[2; 8]));
            let InitialOutcome::Served { instance, flight } = c.receive_initial(0.0, &client(40_000, vip), &init, &mut rng).unwrap() else {
                panic!()
            };
            for port in [1u16, 2, 3, 4000, 65535] {
                assert_eq!(c.route(&client(port, c.vips[1]), &flight.scid, 10.0).unwrap(), instance);
            }
        }
    }

    #[test]
    fn facebook_scids_carry_host_id() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut c = cluster(StackProfile::facebook(), 32, 1, RoutingMode::FiveTuple);
        let vip = c.vips[0];
        for port in 0..200u16 {
            let init = LongHeader::new(PacketType::Initial, 1, random_cid(&mut rng, 8..=20), cid(&[2; 8]));
            let InitialOutcome::Served { instance, flight } = c.receive_initial(0.0, &client(port, vip), &init, &mut rng).unwrap() else {
                panic!()
            };
            let f = decode_facebook_scid(&flight.scid).unwrap();
            assert_eq!(f.host_id, c.l7lbs[instance].host_id);
            assert!(u32::from(f.worker_id) < c.l7lbs[instance].workers);
        }
    }

    #[test]
    fn serve_initial_flights() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let inst = L7LBInstance::new(5, 4, 240.0);
        let client_dcid = cid(&[0xab; 16]);
        let init = LongHeader::new(PacketType::Initial, 1, client_dcid, cid(&[2; 8]));

        let fb = serve_initial(&StackProfile::facebook(), &inst, &init, 8, &mut rng);
        assert_eq!(fb.datagrams.len(), 2);
        assert!(fb.datagrams.iter().all(|d| d.len() == 1232));
        let first = split_datagram(&fb.datagrams[0]);
        assert_eq!(first.packets.len(), 1);
        assert_eq!(first.packets[0].packet_type, PacketType::Initial);
        assert_eq!(first.packets[0].dcid, cid(&[2; 8]));
        assert_eq!(fb.resend_offsets.len(), 8);
        for (k, off) in fb.resend_offsets.iter().enumerate() {
            assert!((off - 0.4 * f64::from(1u32 << k)).abs() < 1e-12);
        }

        let g = serve_initial(&StackProfile::google(), &inst, &init, 4, &mut rng);
        assert_eq!(g.datagrams.len(), 1);
        assert_eq!(g.datagrams[0].len(), 1250);
        let split = split_datagram(&g.datagrams[0]);
        assert!(split.fully_consumed());
        let types: Vec<_> = split.packets.iter().map(|p| p.packet_type).collect();
        assert_eq!(types, [PacketType::Initial, PacketType::Handshake]);
        assert_eq!(g.scid.as_bytes(), &client_dcid.as_bytes()[..8]);

        let cf = serve_initial(&StackProfile::cloudflare(), &inst, &init, 3, &mut rng);
        assert_eq!(cf.scid.len(), 20);
        assert_eq!(cf.scid.as_bytes()[0], 1);
    }

    #[test]
    fn handle_packet_semantics() {
        let mut inst = L7LBInstance::new(1, 1, 240.0);
        let s1 = cid(&[7; 8]);
        let a = client(1000, "10.0.0.1".parse().unwrap());
        let b = client(1001, "10.0.0.1".parse().unwrap());
        inst.connections.insert(s1, Connection { state: ConnState::Established, client: a, expires: 240.0 });
        let reuse = LongHeader::new(PacketType::Initial, 1, s1, cid(&[3; 8]));
        assert_eq!(handle_packet(&mut inst, &reuse, &b, 10.0), PacketVerdict::SilentDiscard);
        // Dropped packets do not refresh state.
        assert_eq!(inst.connections[&s1].expires, 240.0);
        let fresh = LongHeader::new(PacketType::Initial, 1, cid(&[4; 9]), cid(&[3; 8]));
        assert_eq!(handle_packet(&mut inst, &fresh, &b, 10.0), PacketVerdict::NewConnection);
        let ack = LongHeader::new(PacketType::Handshake, 1, s1, cid(&[3; 8]));
        assert_eq!(handle_packet(&mut inst, &ack, &a, 10.0), PacketVerdict::Accept);
        // The accepted packet pushed expiry to 250.
        assert_eq!(handle_packet(&mut inst, &reuse, &b, 249.0), PacketVerdict::SilentDiscard);
        assert_eq!(handle_packet(&mut inst, &reuse, &b, 10.0 + 240.0), PacketVerdict::NewConnection);
        let unknown = LongHeader::new(PacketType::Handshake, 1, cid(&[5; 8]), cid(&[3; 8]));
        assert_eq!(handle_packet(&mut inst, &unknown, &a, 0.0), PacketVerdict::SilentDiscard);
    }

    #[test]
    fn clock_orders_events() {
        let mut c = VirtualClock::default();
        c.schedule(2.0, "b");
        c.schedule(1.0, "a");
        c.schedule(2.0, "c");
        assert_eq!(c.pop(), Some((1.0, "a")));
        c.schedule(0.5, "late");
        assert_eq!(c.pop(), Some((1.0, "late")));
        assert_eq!(c.pop(), Some((2.0, "b")));
        assert_eq!(c.pop(), Some((2.0, "c")));
        assert!(c.pop().is_none());
        assert_eq!(c.now(), 2.0);
    }

    fn deployment(profile: StackProfile) -> Deployment {
        Deployment::from_clusters(1, vec![cluster(profile, 16, 4, RoutingMode::FiveTuple)]).unwrap()
    }

    fn rounds_per_session(out: &FloodOutput) -> HashMap<IpAddr, usize> {
        let mut m = HashMap::new();
        for d in &out.datagrams {
            if split_datagram(&d.payload).packets[0].packet_type == PacketType::Initial {
                *m.entry(d.dst_ip).or_insert(0) += 1;
            }
        }
        m
    }

    #[test]
    fn facebook_flood_resends() {
        let mut d = deployment(StackProfile::facebook());
        let flood = FloodConfig {
            sources: 300,
            ..FloodConfig::default()
        };
        let out = simulate_flood(&mut d, &flood, 11).unwrap();
        assert_eq!(out.sessions.len(), 300);
        let rounds = rounds_per_session(&out);
        assert_eq!(rounds.len(), 300);
        assert!(rounds.values().all(|r| (8..=10).contains(r)));
        assert!(out.datagrams.windows(2).all(|w| w[0].timestamp <= w[1].timestamp));
        for s in &out.sessions {
            assert_eq!(decode_facebook_scid(&s.scid).unwrap().host_id, s.host_id);
        }
    }

    #[test]
    fn flood_is_deterministic() {
        let flood = FloodConfig {
            sources: 50,
            ..FloodConfig::default()
        };
        let a = simulate_flood(&mut deployment(StackProfile::google()), &flood, 9).unwrap();
        let b = simulate_flood(&mut deployment(StackProfile::google()), &flood, 9).unwrap();
        assert_eq!(
            capture_bytes(LinkType::RawIp, &a.datagrams).unwrap(),
            capture_bytes(LinkType::RawIp, &b.datagrams).unwrap()
        );
        let c = simulate_flood(&mut deployment(StackProfile::google()), &flood, 10).unwrap();
        assert_ne!(a.datagrams, c.datagrams);
    }

    #[test]
    fn short_duration_truncates() {
        let mut d = deployment(StackProfile::facebook());
        let flood = FloodConfig {
            sources: 100,
            duration: 0.3,
            arrival_window: 0.0,
            ..FloodConfig::default()
        };
        let out = simulate_flood(&mut d, &flood, 12).unwrap();
        let rounds = rounds_per_session(&out);
        assert_eq!(rounds.len(), 100);
        assert!(rounds.values().all(|r| *r == 1));
    }

    #[test]
    fn acks_cancel_resends() {
        let mut d = deployment(StackProfile::google());
        let flood = FloodConfig {
            sources: 40,
            ack_probability: 1.0,
            ..FloodConfig::default()
        };
        let out = simulate_flood(&mut d, &flood, 13).unwrap();
        assert_eq!(out.datagrams.len(), 40);
    }

    #[test]
    fn shipped_deployment_config_builds() {
        let cfg = DeploymentConfig::parse(DEFAULT_DEPLOYMENT).unwrap();
        let d = Deployment::build(&cfg).unwrap();
        assert_eq!(d.clusters.len(), 5);
        for c in &d.clusters {
            let ids: Vec<u32> = c.host_ids().collect();
            assert_eq!(ids.len(), ids.iter().collect::<HashSet<_>>().len());
        }
        let offnet = d.clusters.iter().find(|c| c.name == "facebook-offnet").unwrap();
        assert!(offnet.host_ids().all(|h| h < 128));
        assert!(DeploymentConfig::parse("[[cluster]]\nname='x'\nprofile='Nope'\nvip_base='1.1.1.1'").map(|c| Deployment::build(&c)).unwrap().is_err());
    }
}
