//! Active measurement campaigns.
//!
//! Campaigns talk to servers through a [`Transport`], which completes (or
//! fails to complete) QUIC handshakes at a given campaign time. The default
//! transport is the in-process simulator; campaigns never read wall-clock
//! time, so a run is reproducible from its seed.

use std::collections::{BTreeSet, HashMap};
use std::net::IpAddr;
use std::path::Path;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::scid::decode_facebook_scid;
use crate::sim::{Deployment, FiveTuple, SimError};
use crate::table::{fixed, Table};
use crate::wire::{ConnectionId, LongHeader, PacketType, QUIC_PORT};
use crate::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ProbeError {
    #[error("transport unavailable: {0}")]
    TransportUnavailable(String),
    #[error("harvest is empty")]
    EmptyHarvest,
    #[error("{failures} of {attempts} handshakes failed")]
    TooManyFailures { failures: usize, attempts: usize },
    #[error("initial handshake to {0} did not complete")]
    InitialHandshakeFailed(IpAddr),
    #[error("invalid campaign: {0}")]
    InvalidCampaign(String),
}

impl From<SimError> for ProbeError {
    fn from(e: SimError) -> Self {
        ProbeError::TransportUnavailable(e.to_string())
    }
}

/// One client handshake attempt.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HandshakeAttempt {
    pub src_ip: IpAddr,
    pub src_port: u16,
    pub vip: IpAddr,
    /// DCID of the client's first Initial.
    pub dcid: ConnectionId,
    /// The client's own connection ID.
    pub client_cid: ConnectionId,
}

pub trait Transport {
    /// Runs a handshake at campaign time `at` (seconds). `Ok(Some(scid))`
    /// when the server completed it, `Ok(None)` on timeout.
    fn handshake(&mut self, attempt: &HandshakeAttempt, at: f64) -> Result<Option<ConnectionId>, ProbeError>;

    /// Closes a completed connection.
    fn close(&mut self, vip: IpAddr, server_cid: &ConnectionId, at: f64) -> Result<(), ProbeError>;
}

/// Loopback transport into a simulated deployment.
pub struct SimTransport {
    pub deployment: Deployment,
    rng: ChaCha8Rng,
}

impl SimTransport {
    pub fn new(deployment: Deployment, seed: u64) -> Self {
        SimTransport {
            deployment,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }
}

impl Transport for SimTransport {
    fn handshake(&mut self, a: &HandshakeAttempt, at: f64) -> Result<Option<ConnectionId>, ProbeError> {
        let ci = self.deployment.cluster_of(a.vip)?;
        let cluster = &mut self.deployment.clusters[ci];
        let from = FiveTuple::udp(a.src_ip, a.src_port, a.vip, QUIC_PORT);
        let initial = LongHeader::new(PacketType::Initial, 1, a.dcid, a.client_cid);
        let (_, scid) = cluster.admit_initial(at, &from, &initial, &mut self.rng)?;
        let Some(scid) = scid else {
            return Ok(None);
        };
        // The client finishes with a Handshake packet addressed to the server CID.
        let finish = LongHeader::new(PacketType::Handshake, 1, scid, a.client_cid);
        cluster.receive(at, &from, &finish)?;
        Ok(Some(scid))
    }

    fn close(&mut self, vip: IpAddr, server_cid: &ConnectionId, _at: f64) -> Result<(), ProbeError> {
        let ci = self.deployment.cluster_of(vip)?;
        self.deployment.clusters[ci].close(server_cid);
        Ok(())
    }
}

/// Decoder from server CID to host ID.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum HostIdCodec {
    /// Facebook SCID layout, either version.
    #[default]
    Facebook,
}

impl HostIdCodec {
    pub fn host_id(self, scid: &ConnectionId) -> Option<u32> {
        match self {
            HostIdCodec::Facebook => decode_facebook_scid(scid).ok().map(|f| f.host_id),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PortStrategy {
    /// Start at `start_port` and count down, wrapping back to it below 1024.
    #[default]
    DecreasingFromMax,
    RandomSeeded,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeCampaign {
    pub targets: Vec<IpAddr>,
    pub handshakes_per_vip: usize,
    pub port_strategy: PortStrategy,
    pub start_port: u16,
    /// Campaign seconds between handshakes.
    pub inter_probe_gap: f64,
    /// Source address of the prober.
    pub client_ip: IpAddr,
    pub codec: HostIdCodec,
    pub jaccard_threshold: f64,
    pub seed: u64,
}

impl Default for ProbeCampaign {
    fn default() -> Self {
        ProbeCampaign {
            targets: Vec::new(),
            handshakes_per_vip: 1000,
            port_strategy: PortStrategy::DecreasingFromMax,
            start_port: u16::MAX,
            inter_probe_gap: 0.01,
            client_ip: "198.51.100.1".parse().expect("literal address"),
            codec: HostIdCodec::Facebook,
            jaccard_threshold: DEFAULT_JACCARD_THRESHOLD,
            seed: 0,
        }
    }
}

impl ProbeCampaign {
    pub fn parse(text: &str) -> Result<Self, Error> {
        let c: ProbeCampaign = toml::from_str(text).map_err(|e| Error::Config(format!("campaign: {e}")))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self, Error> {
        Self::parse(&crate::read_text(path)?)
    }

    pub fn validate(&self) -> Result<(), ProbeError> {
        if self.handshakes_per_vip == 0 {
            return Err(ProbeError::InvalidCampaign("handshakes_per_vip must be at least 1".into()));
        }
        if self.start_port < 1024 {
            return Err(ProbeError::InvalidCampaign("start_port must be at least 1024".into()));
        }
        Ok(())
    }

    fn port(&self, i: usize, rng: &mut ChaCha8Rng) -> u16 {
        match self.port_strategy {
            PortStrategy::DecreasingFromMax => {
                let span = usize::from(self.start_port) - 1024 + 1;
                self.start_port - (i % span) as u16
            }
            PortStrategy::RandomSeeded => rng.gen_range(1024..=u16::MAX),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HostIdHarvest {
    pub vip: IpAddr,
    /// (handshake index, decoded host ID) for every decodable handshake.
    pub entries: Vec<(usize, u32)>,
    pub attempts: usize,
    pub failures: usize,
    pub unique_ids: BTreeSet<u32>,
}

impl HostIdHarvest {
    pub fn new(vip: IpAddr) -> Self {
        HostIdHarvest {
            vip,
            entries: Vec::new(),
            attempts: 0,
            failures: 0,
            unique_ids: BTreeSet::new(),
        }
    }

    pub fn record(&mut self, index: usize, host_id: Option<u32>) {
        self.attempts += 1;
        match host_id {
            Some(h) => {
                self.entries.push((index, h));
                self.unique_ids.insert(h);
            }
            None => self.failures += 1,
        }
    }
}

fn random_cid(rng: &mut ChaCha8Rng, len: usize) -> ConnectionId {
    let mut b = [0u8; 20];
    rng.fill_bytes(&mut b[..len]);
    ConnectionId::new(&b[..len]).expect("length within bounds")
}

/// Completes up to `campaign.handshakes_per_vip` handshakes with `vip`,
/// starting at campaign time `start`, and decodes each server CID.
/// Timeouts and undecodable CIDs are recorded as failures; more than half
/// failing aborts the harvest.
pub fn harvest_host_ids<T: Transport>(
    vip: IpAddr,
    campaign: &ProbeCampaign,
    transport: &mut T,
    start: f64,
) -> Result<HostIdHarvest, ProbeError> {
    campaign.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(campaign.seed ^ ip_seed(vip));
    let mut h = HostIdHarvest::new(vip);
    for i in 0..campaign.handshakes_per_vip {
        let at = start + i as f64 * campaign.inter_probe_gap;
        let attempt = HandshakeAttempt {
            src_ip: campaign.client_ip,
            src_port: campaign.port(i, &mut rng),
            vip,
            dcid: random_cid(&mut rng, 16),
            client_cid: random_cid(&mut rng, 8),
        };
        let scid = transport.handshake(&attempt, at)?;
        if let Some(s) = &scid {
            transport.close(vip, s, at)?;
        }
        h.record(i, scid.and_then(|s| campaign.codec.host_id(&s)));
    }
    if h.failures * 2 > h.attempts {
        return Err(ProbeError::TooManyFailures {
            failures: h.failures,
            attempts: h.attempts,
        });
    }
    Ok(h)
}

fn ip_seed(ip: IpAddr) -> u64 {
    match ip {
        IpAddr::V4(v4) => u64::from(u32::from(v4)),
        IpAddr::V6(v6) => {
            let x = u128::from(v6);
            (x as u64) ^ ((x >> 64) as u64)
        }
    }
}

/// (handshakes so far, fraction of the final unique set seen), one point per
/// decoded handshake. Monotone and ending at 1.0.
pub fn discovery_curve(h: &HostIdHarvest) -> Result<Vec<(usize, f64)>, ProbeError> {
    if h.entries.is_empty() {
        return Err(ProbeError::EmptyHarvest);
    }
    let total = h.unique_ids.len() as f64;
    let mut seen = BTreeSet::new();
    let mut curve = Vec::with_capacity(h.entries.len());
    for &(i, id) in &h.entries {
        seen.insert(id);
        curve.push((i + 1, seen.len() as f64 / total));
    }
    Ok(curve)
}

/// Fraction reached after `handshakes` handshakes (0 before the first point).
pub fn fraction_at(curve: &[(usize, f64)], handshakes: usize) -> f64 {
    curve.iter().take_while(|(n, _)| *n <= handshakes).last().map_or(0.0, |p| p.1)
}

pub const DEFAULT_JACCARD_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterReport {
    pub vips: Vec<IpAddr>,
    /// Row-major symmetric matrix over `vips`.
    pub jaccard: Vec<f64>,
    /// Partition of `vips`, each cluster in input order.
    pub clusters: Vec<Vec<IpAddr>>,
}

impl ClusterReport {
    pub fn j(&self, a: usize, b: usize) -> f64 {
        self.jaccard[a * self.vips.len() + b]
    }

    pub fn to_table(&self) -> Table {
        let mut t = Table::new(["cluster", "vip", "size"]);
        for (i, c) in self.clusters.iter().enumerate() {
            for v in c {
                t.push(vec![json!(i), json!(v.to_string()), json!(c.len())]);
            }
        }
        t
    }
}

struct UnionFind(Vec<usize>);

impl UnionFind {
    fn find(&mut self, mut x: usize) -> usize {
        while self.0[x] != x {
            self.0[x] = self.0[self.0[x]];
            x = self.0[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            self.0[ra.max(rb)] = ra.min(rb);
        }
    }
}

/// Pairwise Jaccard index of the harvested host-ID sets; VIPs connected by
/// J ≥ `threshold` form one cluster.
pub fn cluster_vips(harvests: &[HostIdHarvest], threshold: f64) -> ClusterReport {
    let n = harvests.len();
    let mut by_host: HashMap<u32, Vec<usize>> = HashMap::new();
    for (i, h) in harvests.iter().enumerate() {
        for id in &h.unique_ids {
            by_host.entry(*id).or_default().push(i);
        }
    }
    let mut shared: HashMap<(usize, usize), usize> = HashMap::new();
    for members in by_host.values() {
        for (k, &a) in members.iter().enumerate() {
            for &b in &members[k + 1..] {
                *shared.entry((a, b)).or_default() += 1;
            }
        }
    }
    let mut jaccard = vec![0.0; n * n];
    for i in 0..n {
        jaccard[i * n + i] = 1.0;
    }
    let mut uf = UnionFind((0..n).collect());
    let mut pairs: Vec<_> = shared.into_iter().collect();
    pairs.sort_unstable();
    for ((a, b), inter) in pairs {
        let union = harvests[a].unique_ids.len() + harvests[b].unique_ids.len() - inter;
        let j = inter as f64 / union as f64;
        jaccard[a * n + b] = j;
        jaccard[b * n + a] = j;
        if j >= threshold {
            uf.union(a, b);
        }
    }
    let mut groups: Vec<Vec<IpAddr>> = Vec::new();
    let mut slot: HashMap<usize, usize> = HashMap::new();
    for i in 0..n {
        let root = uf.find(i);
        let g = *slot.entry(root).or_insert_with(|| {
            groups.push(Vec::new());
            groups.len() - 1
        });
        groups[g].push(harvests[i].vip);
    }
    ClusterReport {
        vips: harvests.iter().map(|h| h.vip).collect(),
        jaccard,
        clusters: groups,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum LbTypeVerdict {
    CidAware { fail_window: f64 },
    FiveTuple,
    Inconclusive,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LbProbeConfig {
    pub probe_interval: f64,
    pub max_wait: f64,
    /// Follow-ups failing for less than this long before one succeeds are
    /// attributed to hitting the held instance by chance, not to CID-aware
    /// routing.
    pub min_fail_window: f64,
}

impl Default for LbProbeConfig {
    fn default() -> Self {
        LbProbeConfig {
            probe_interval: 1.0,
            max_wait: 600.0,
            min_fail_window: 3.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LbTypeReport {
    pub vip: IpAddr,
    pub verdict: LbTypeVerdict,
    pub held_host_id: Option<u32>,
    /// Host ID of the first successful follow-up, when decodable.
    pub follow_up_host_id: Option<u32>,
    pub follow_ups: usize,
}

/// Tells 5-tuple from CID-aware load balancing.
///
/// Completes one handshake and keeps it idle, then every `probe_interval`
/// sends a follow-up Initial from a new port with a new client CID but the
/// held connection's server CID as DCID. A CID-aware balancer delivers the
/// follow-ups to the holding instance, which drops them until its state
/// expires; a 5-tuple balancer spreads them over other instances, which
/// answer at once.
pub fn detect_lb_type<T: Transport>(
    vip: IpAddr,
    transport: &mut T,
    cfg: &LbProbeConfig,
    codec: HostIdCodec,
    client_ip: IpAddr,
    start: f64,
    seed: u64,
) -> Result<LbTypeReport, ProbeError> {
    if !(cfg.probe_interval > 0.0) {
        return Err(ProbeError::InvalidCampaign("probe_interval must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ip_seed(vip));
    let mut port = u16::MAX;
    let held = HandshakeAttempt {
        src_ip: client_ip,
        src_port: port,
        vip,
        dcid: random_cid(&mut rng, 16),
        client_cid: random_cid(&mut rng, 8),
    };
    let s1 = transport.handshake(&held, start)?.ok_or(ProbeError::InitialHandshakeFailed(vip))?;
    let held_host_id = codec.host_id(&s1);
    let mut report = LbTypeReport {
        vip,
        verdict: LbTypeVerdict::Inconclusive,
        held_host_id,
        follow_up_host_id: None,
        follow_ups: 0,
    };
    let mut k = 1usize;
    while k as f64 * cfg.probe_interval <= cfg.max_wait {
        port = if port <= 1024 { u16::MAX - 1 } else { port - 1 };
        let at = start + k as f64 * cfg.probe_interval;
        let follow = HandshakeAttempt {
            src_ip: client_ip,
            src_port: port,
            vip,
            dcid: s1,
            client_cid: random_cid(&mut rng, 8),
        };
        report.follow_ups = k;
        if let Some(s2) = transport.handshake(&follow, at)? {
            transport.close(vip, &s2, at)?;
            report.follow_up_host_id = codec.host_id(&s2);
            let window = at - start;
            report.verdict = if k == 1 || window < cfg.min_fail_window {
                LbTypeVerdict::FiveTuple
            } else {
                LbTypeVerdict::CidAware { fail_window: window }
            };
            return Ok(report);
        }
        k += 1;
    }
    Ok(report)
}

/// Completes `n` handshakes with random client DCIDs and returns the
/// (client DCID, server CID) pairs, the input for echo detection.
pub fn probe_echo<T: Transport>(
    vip: IpAddr,
    n: usize,
    transport: &mut T,
    client_ip: IpAddr,
    start: f64,
    seed: u64,
) -> Result<Vec<(ConnectionId, ConnectionId)>, ProbeError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ip_seed(vip) ^ 0xec40);
    let mut pairs = Vec::with_capacity(n);
    for i in 0..n {
        let len = rng.gen_range(8..=20);
        let attempt = HandshakeAttempt {
            src_ip: client_ip,
            src_port: rng.gen_range(1024..=u16::MAX),
            vip,
            dcid: random_cid(&mut rng, len),
            client_cid: random_cid(&mut rng, 8),
        };
        let at = start + i as f64 * 0.01;
        if let Some(s) = transport.handshake(&attempt, at)? {
            transport.close(vip, &s, at)?;
            pairs.push((attempt.dcid, s));
        }
    }
    Ok(pairs)
}

pub fn harvest_table(harvests: &[HostIdHarvest]) -> Table {
    let mut t = Table::new(["vip", "attempts", "failures", "unique_host_ids"]);
    for h in harvests {
        t.push(vec![json!(h.vip.to_string()), json!(h.attempts), json!(h.failures), json!(h.unique_ids.len())]);
    }
    t
}

pub fn curve_table(vip: IpAddr, curve: &[(usize, f64)]) -> Table {
    let mut t = Table::new(["vip", "handshakes", "fraction"]);
    for (n, f) in curve {
        t.push(vec![json!(vip.to_string()), json!(n), fixed(*f, 6)]);
    }
    t
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{build_cluster, ClusterConfig, RoutingMode, StackProfile};

    fn deployment(clusters: &[(u32, u32, RoutingMode, StackProfile)]) -> Deployment {
        let mut next = 1;
        let built = clusters
            .iter()
            .enumerate()
            .map(|(i, (vips, l7, mode, p))| {
                let mut cfg = ClusterConfig::new(format!("c{i}"), p.operator.clone());
                cfg.vip_base = Some(std::net::Ipv4Addr::from(0x9df0_0000 + (i as u32) * 256 + 1));
                cfg.vip_count = *vips;
                cfg.l7lbs = *l7;
                cfg.routing = *mode;
                let c = build_cluster(&cfg, p.clone(), 3, next).unwrap();
                next += l7;
                c
            })
            .collect();
        Deployment::from_clusters(3, built).unwrap()
    }

    fn campaign(n: usize) -> ProbeCampaign {
        ProbeCampaign {
            handshakes_per_vip: n,
            ..ProbeCampaign::default()
        }
    }

    #[test]
    fn single_handshake_and_single_instance() {
        let d = deployment(&[(1, 1, RoutingMode::FiveTuple, StackProfile::facebook())]);
        let vip = d.clusters[0].vips[0];
        let mut t = SimTransport::new(d, 1);
        let h = harvest_host_ids(vip, &campaign(1), &mut t, 0.0).unwrap();
        assert_eq!(h.entries.len(), 1);
        assert_eq!(h.unique_ids.len(), 1);
        let h = harvest_host_ids(vip, &campaign(50), &mut t, 10.0).unwrap();
        let curve = discovery_curve(&h).unwrap();
        assert!(curve.iter().all(|p| p.1 == 1.0));
    }

    #[test]
    fn distinct_per_draw_curve_is_linear() {
        let mut h = HostIdHarvest::new("10.0.0.1".parse().unwrap());
        for i in 0..10 {
            h.record(i, Some(i as u32));
        }
        let c = discovery_curve(&h).unwrap();
        for (k, (n, f)) in c.iter().enumerate() {
            assert_eq!(*n, k + 1);
            assert!((f - (k + 1) as f64 / 10.0).abs() < 1e-12);
        }
        assert_eq!(fraction_at(&c, 0), 0.0);
        assert_eq!(fraction_at(&c, 5), 0.5);
        assert_eq!(discovery_curve(&HostIdHarvest::new(h.vip)), Err(ProbeError::EmptyHarvest));
    }

    #[test]
    fn harvest_stays_within_cluster() {
        let d = deployment(&[(2, 40, RoutingMode::FiveTuple, StackProfile::facebook()), (2, 40, RoutingMode::FiveTuple, StackProfile::facebook())]);
        let allowed: BTreeSet<u32> = d.clusters[0].host_ids().collect();
        let vip = d.clusters[0].vips[1];
        let mut t = SimTransport::new(d, 2);
        let h = harvest_host_ids(vip, &campaign(600), &mut t, 0.0).unwrap();
        assert!(h.unique_ids.is_subset(&allowed));
        assert_eq!(h.unique_ids.len(), 40);
    }

    #[test]
    fn unreachable_vip() {
        let d = deployment(&[(1, 1, RoutingMode::FiveTuple, StackProfile::facebook())]);
        let mut t = SimTransport::new(d, 1);
        let vip: IpAddr = "192.0.2.1".parse().unwrap();
        assert!(matches!(harvest_host_ids(vip, &campaign(3), &mut t, 0.0), Err(ProbeError::TransportUnavailable(_))));
        let r = detect_lb_type(vip, &mut t, &LbProbeConfig::default(), HostIdCodec::Facebook, "198.51.100.1".parse().unwrap(), 0.0, 1);
        assert!(matches!(r, Err(ProbeError::TransportUnavailable(_))));
    }

    #[test]
    fn undecodable_scids_abort() {
        let d = deployment(&[(1, 4, RoutingMode::FiveTuple, StackProfile::google())]);
        let vip = d.clusters[0].vips[0];
        let mut t = SimTransport::new(d, 1);
        assert!(matches!(
            harvest_host_ids(vip, &campaign(20), &mut t, 0.0),
            Err(ProbeError::TooManyFailures { .. })
        ));
    }

    #[test]
    fn jaccard_partition() {
        let d = deployment(&[(3, 8, RoutingMode::FiveTuple, StackProfile::facebook()), (2, 8, RoutingMode::FiveTuple, StackProfile::facebook())]);
        let vips: Vec<IpAddr> = d.vips().collect();
        let mut t = SimTransport::new(d, 4);
        let harvests: Vec<_> = vips.iter().map(|v| harvest_host_ids(*v, &campaign(200), &mut t, 0.0).unwrap()).collect();
        let r = cluster_vips(&harvests, DEFAULT_JACCARD_THRESHOLD);
        assert_eq!(r.clusters.len(), 2);
        assert_eq!(r.clusters[0].len(), 3);
        for a in 0..vips.len() {
            assert_eq!(r.j(a, a), 1.0);
            for b in 0..vips.len() {
                assert_eq!(r.j(a, b), r.j(b, a));
            }
        }
        assert_eq!(r.j(0, 1), 1.0);
        assert_eq!(r.j(0, 4), 0.0);

        let mut a = HostIdHarvest::new("10.0.0.1".parse().unwrap());
        a.record(0, Some(1));
        let mut b = HostIdHarvest::new("10.0.0.2".parse().unwrap());
        b.record(0, Some(2));
        assert_eq!(cluster_vips(&[a, b], 0.5).clusters.len(), 2);
    }

    #[test]
    fn lb_type_both_modes() {
        let client: IpAddr = "198.51.100.9".parse().unwrap();
        let cfg = LbProbeConfig::default();
        for profile in [StackProfile::google(), StackProfile::facebook()] {
            let d = deployment(&[(1, 50, RoutingMode::CidAware, profile)]);
            let vip = d.clusters[0].vips[0];
            let mut t = SimTransport::new(d, 5);
            let r = detect_lb_type(vip, &mut t, &cfg, HostIdCodec::Facebook, client, 100.0, 5).unwrap();
            match r.verdict {
                LbTypeVerdict::CidAware { fail_window } => assert!((fail_window - 240.0).abs() <= 1.0, "{fail_window}"),
                other => panic!("{other:?}"),
            }
        }
        let d = deployment(&[(1, 50, RoutingMode::FiveTuple, StackProfile::facebook())]);
        let vip = d.clusters[0].vips[0];
        let mut t = SimTransport::new(d, 5);
        let r = detect_lb_type(vip, &mut t, &cfg, HostIdCodec::Facebook, client, 100.0, 5).unwrap();
        assert_eq!(r.verdict, LbTypeVerdict::FiveTuple);
        assert_ne!(r.held_host_id, r.follow_up_host_id);
    }

    #[test]
    fn short_wait_is_inconclusive() {
        let d = deployment(&[(1, 10, RoutingMode::CidAware, StackProfile::google())]);
        let vip = d.clusters[0].vips[0];
        let mut t = SimTransport::new(d, 6);
        let cfg = LbProbeConfig {
            max_wait: 30.0,
            ..LbProbeConfig::default()
        };
        let r = detect_lb_type(vip, &mut t, &cfg, HostIdCodec::Facebook, "198.51.100.9".parse().unwrap(), 0.0, 1).unwrap();
        assert_eq!(r.verdict, LbTypeVerdict::Inconclusive);
        assert_eq!(r.follow_ups, 30);
    }

    #[test]
    fn echo_pairs() {
        let d = deployment(&[(1, 10, RoutingMode::FiveTuple, StackProfile::google())]);
        let vip = d.clusters[0].vips[0];
        let mut t = SimTransport::new(d, 7);
        let pairs = probe_echo(vip, 30, &mut t, "198.51.100.9".parse().unwrap(), 0.0, 1).unwrap();
        assert_eq!(pairs.len(), 30);
        assert!(pairs.iter().all(|(d, s)| d.as_bytes()[..8] == s.as_bytes()[..8]));
    }

    #[test]
    fn campaign_config() {
        let c = ProbeCampaign::parse("targets = [\"157.240.0.1\"]\nhandshakes_per_vip = 20\nport_strategy = \"random_seeded\"\nseed = 4").unwrap();
        assert_eq!(c.handshakes_per_vip, 20);
        assert!(ProbeCampaign::parse("handshakes_per_vip = 0").is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let d = ProbeCampaign::default();
        assert_eq!(d.port(0, &mut rng), 65535);
        assert_eq!(d.port(1, &mut rng), 65534);
        assert_eq!(d.port(65535 - 1024 + 1, &mut rng), 65535);
    }
}
