//! Stack fingerprinting from sessionized backscatter.
//!
//! Operators configure their QUIC stacks differently: which versions they
//! speak, whether Initial and Handshake packets share a datagram, how they
//! pad, and how aggressively they retransmit when the (spoofed, silent)
//! client never acknowledges. The aggregations here expose those choices and
//! [`match_profile`] maps an observed combination back to a known operator.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::ingest::{CaptureRecord, Session};
use crate::scid::ScidScheme;
use crate::table::{fixed, Table};
use crate::wire::{Direction, PacketType, VersionRegistry};
use crate::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FingerprintError {
    #[error("{have} qualifying sessions, at least {need} required")]
    InsufficientData { have: usize, need: usize },
}

pub const UNKNOWN_PROFILE: &str = "Unknown";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FingerprintConfig {
    /// Sessions with at least two resends needed for an RTO estimate.
    pub min_sessions: usize,
    /// Packets within this many seconds of a round's first packet belong to
    /// the same retransmission round.
    pub round_epsilon: f64,
    /// Share of coalesced datagrams above which an operator counts as
    /// coalescing.
    pub coalescence_min_share: f64,
    /// Maximum relative initial-RTO distance for a profile match.
    pub rto_tolerance: f64,
}

impl Default for FingerprintConfig {
    fn default() -> Self {
        FingerprintConfig {
            min_sessions: 30,
            round_epsilon: 0.05,
            coalescence_min_share: 0.01,
            rto_tolerance: 0.25,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Role {
    Client,
    Server,
}

impl Role {
    pub fn of(direction: Direction) -> Option<Role> {
        match direction {
            Direction::Request => Some(Role::Client),
            Direction::Response => Some(Role::Server),
            Direction::NonQuic => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Role::Client => "client",
            Role::Server => "server",
        }
    }
}

/// Session counts per (role, version label).
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct VersionTally {
    pub counts: BTreeMap<Role, BTreeMap<String, u64>>,
}

impl VersionTally {
    pub fn total(&self, role: Role) -> u64 {
        self.counts.get(&role).map_or(0, |m| m.values().sum())
    }

    pub fn share(&self, role: Role, label: &str) -> f64 {
        let total = self.total(role);
        if total == 0 {
            return 0.0;
        }
        let n = self.counts.get(&role).and_then(|m| m.get(label)).copied().unwrap_or(0);
        n as f64 / total as f64
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    pub fn merge(&mut self, other: &VersionTally) {
        for (role, m) in &other.counts {
            let mine = self.counts.entry(*role).or_default();
            for (label, n) in m {
                *mine.entry(label.clone()).or_default() += n;
            }
        }
    }

    pub fn to_table(&self) -> Table {
        let mut t = Table::new(["role", "version", "sessions", "share"]);
        for (role, m) in &self.counts {
            for (label, n) in m {
                t.push(vec![json!(role.as_str()), json!(label), json!(n), fixed(self.share(*role, label), 6)]);
            }
        }
        t
    }
}

/// Counts every session once, under the label of its first packet's version.
pub fn version_tally<'a>(sessions: impl IntoIterator<Item = &'a Session>, registry: &VersionRegistry) -> VersionTally {
    let mut tally = VersionTally::default();
    for s in sessions {
        if let Some(role) = Role::of(s.direction) {
            let label = registry.label_or_others(s.version).to_string();
            *tally.counts.entry(role).or_default().entry(label).or_default() += 1;
        }
    }
    tally
}

/// Category of a datagram: its single packet type, or the coalesced types
/// joined with " & ".
pub fn datagram_category(types: &[PacketType]) -> String {
    types.iter().map(|t| t.as_str()).collect::<Vec<_>>().join(" & ")
}

/// Datagram counts per operator and category.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PacketTypeStats {
    pub counts: BTreeMap<String, BTreeMap<String, u64>>,
}

impl PacketTypeStats {
    pub fn total(&self, operator: &str) -> u64 {
        self.counts.get(operator).map_or(0, |m| m.values().sum())
    }

    pub fn percentage(&self, operator: &str, category: &str) -> f64 {
        let total = self.total(operator);
        if total == 0 {
            return 0.0;
        }
        let n = self.counts.get(operator).and_then(|m| m.get(category)).copied().unwrap_or(0);
        100.0 * n as f64 / total as f64
    }

    /// Fraction (0..=1) of an operator's datagrams carrying more than one packet.
    pub fn coalesced_share(&self, operator: &str) -> f64 {
        let total = self.total(operator);
        if total == 0 {
            return 0.0;
        }
        let n: u64 = self.counts[operator]
            .iter()
            .filter(|(k, _)| k.contains(" & "))
            .map(|(_, n)| n)
            .sum();
        n as f64 / total as f64
    }

    pub fn merge(&mut self, other: &PacketTypeStats) {
        for (op, m) in &other.counts {
            let mine = self.counts.entry(op.clone()).or_default();
            for (k, n) in m {
                *mine.entry(k.clone()).or_default() += n;
            }
        }
    }

    pub fn to_table(&self) -> Table {
        let mut t = Table::new(["operator", "category", "datagrams", "percent"]);
        for (op, m) in &self.counts {
            for (k, n) in m {
                t.push(vec![json!(op), json!(k), json!(n), fixed(self.percentage(op, k), 3)]);
            }
        }
        t
    }
}

pub fn packet_type_stats<'a>(records: impl IntoIterator<Item = (&'a str, &'a CaptureRecord)>) -> PacketTypeStats {
    let mut stats = PacketTypeStats::default();
    for (op, rec) in records {
        if rec.packets.is_empty() {
            continue;
        }
        let cat = datagram_category(&rec.type_tuple());
        *stats.counts.entry(op.to_string()).or_default().entry(cat).or_default() += 1;
    }
    stats
}

pub type LengthKey = (Vec<PacketType>, usize);

/// Datagram counts per operator, packet-type tuple and datagram length.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LengthHistogram {
    pub counts: BTreeMap<String, BTreeMap<LengthKey, u64>>,
}

impl LengthHistogram {
    /// The `k` most frequent keys of an operator, ties broken by key order.
    pub fn top_k(&self, operator: &str, k: usize) -> Vec<(LengthKey, u64)> {
        let Some(m) = self.counts.get(operator) else {
            return Vec::new();
        };
        let mut v: Vec<_> = m.iter().map(|(key, n)| (key.clone(), *n)).collect();
        v.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        v.truncate(k);
        v
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    pub fn merge(&mut self, other: &LengthHistogram) {
        for (op, m) in &other.counts {
            let mine = self.counts.entry(op.clone()).or_default();
            for (k, n) in m {
                *mine.entry(k.clone()).or_default() += n;
            }
        }
    }

    pub fn to_table(&self, k: usize) -> Table {
        let mut t = Table::new(["operator", "rank", "packet_types", "length", "datagrams"]);
        for op in self.counts.keys() {
            for (rank, ((types, len), n)) in self.top_k(op, k).into_iter().enumerate() {
                let types: Vec<&str> = types.iter().map(|t| t.as_str()).collect();
                t.push(vec![json!(op), json!(rank + 1), json!(types.join(",")), json!(len), json!(n)]);
            }
        }
        t
    }
}

pub fn length_histogram<'a>(records: impl IntoIterator<Item = (&'a str, &'a CaptureRecord)>) -> LengthHistogram {
    let mut h = LengthHistogram::default();
    for (op, rec) in records {
        if rec.packets.is_empty() {
            continue;
        }
        let key = (rec.type_tuple(), rec.datagram.payload.len());
        *h.counts.entry(op.to_string()).or_default().entry(key).or_default() += 1;
    }
    h
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RtoEstimate {
    pub initial_rto: f64,
    pub backoff_base: f64,
    /// (5th, 95th) percentile of resends per session.
    pub max_retransmissions: (u32, u32),
    pub sample_count: usize,
}

/// Start offsets of the retransmission rounds in a session: handshake-flight
/// packets sent within `epsilon` of a round's first packet belong to it.
pub fn resend_rounds(session: &Session, epsilon: f64) -> Vec<f64> {
    let mut rounds: Vec<f64> = Vec::new();
    for e in session.timeline.iter().filter(|e| e.packet_type.is_handshake_flight()) {
        match rounds.last() {
            Some(&start) if e.offset - start <= epsilon => {}
            _ => rounds.push(e.offset),
        }
    }
    rounds
}

/// Resends in a session: retransmission rounds after the first response.
pub fn resend_count(session: &Session, epsilon: f64) -> usize {
    resend_rounds(session, epsilon).len().saturating_sub(1)
}

/// Histogram of resends per session. Total mass equals the session count.
pub fn resend_count_distribution<'a>(sessions: impl IntoIterator<Item = &'a Session>, epsilon: f64) -> BTreeMap<usize, u64> {
    let mut h = BTreeMap::new();
    for s in sessions {
        *h.entry(resend_count(s, epsilon)).or_default() += 1;
    }
    h
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Nearest-rank percentile of a sorted slice, `p` in (0, 1].
fn percentile(sorted: &[u32], p: f64) -> u32 {
    let rank = (p * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

/// Estimates the retransmission behaviour of one operator's sessions.
///
/// Only server sessions with at least two resends are used. The initial RTO
/// is the median first-resend offset, the backoff base the median ratio of
/// consecutive gaps between rounds (the first gap measured from offset 0),
/// and the retransmission range the 5th and 95th percentile of resends.
pub fn estimate_rto<'a>(
    sessions: impl IntoIterator<Item = &'a Session>,
    cfg: &FingerprintConfig,
) -> Result<RtoEstimate, FingerprintError> {
    let mut first = Vec::new();
    let mut ratios = Vec::new();
    let mut counts = Vec::new();
    for s in sessions {
        if s.direction != Direction::Response {
            continue;
        }
        let rounds = resend_rounds(s, cfg.round_epsilon);
        if rounds.len() < 3 {
            continue;
        }
        first.push(rounds[1]);
        let gaps: Vec<f64> = rounds.windows(2).map(|w| w[1] - w[0]).collect();
        ratios.extend(gaps.windows(2).filter(|g| g[0] > 0.0).map(|g| g[1] / g[0]));
        counts.push((rounds.len() - 1) as u32);
    }
    let need = cfg.min_sessions.max(1);
    if first.len() < need {
        return Err(FingerprintError::InsufficientData { have: first.len(), need });
    }
    counts.sort_unstable();
    Ok(RtoEstimate {
        initial_rto: median(&mut first),
        backoff_base: if ratios.is_empty() { 1.0 } else { median(&mut ratios).max(1.0) },
        max_retransmissions: (percentile(&counts, 0.05), percentile(&counts, 0.95)),
        sample_count: counts.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FingerprintProfile {
    pub operator: String,
    pub rto: RtoEstimate,
    pub coalescence: bool,
    pub server_chosen_ids: bool,
    pub structured_scids: bool,
}

impl FingerprintProfile {
    pub fn table_header() -> Table {
        Table::new([
            "operator",
            "initial_rto_s",
            "backoff_base",
            "retransmissions_min",
            "retransmissions_max",
            "sessions",
            "coalescence",
            "server_chosen_ids",
            "structured_scids",
        ])
    }

    pub fn table_row(&self) -> Vec<serde_json::Value> {
        vec![
            json!(self.operator),
            fixed(self.rto.initial_rto, 3),
            fixed(self.rto.backoff_base, 3),
            json!(self.rto.max_retransmissions.0),
            json!(self.rto.max_retransmissions.1),
            json!(self.rto.sample_count),
            json!(self.coalescence),
            json!(self.server_chosen_ids),
            json!(self.structured_scids),
        ]
    }
}

/// Assembles an observed profile from an operator's sessions, its
/// packet-type statistics and the classified SCID scheme.
pub fn observe_profile<'a>(
    operator: &str,
    sessions: impl IntoIterator<Item = &'a Session>,
    stats: &PacketTypeStats,
    scheme: &ScidScheme,
    cfg: &FingerprintConfig,
) -> Result<FingerprintProfile, FingerprintError> {
    Ok(FingerprintProfile {
        operator: operator.to_string(),
        rto: estimate_rto(sessions, cfg)?,
        coalescence: stats.coalesced_share(operator) >= cfg.coalescence_min_share,
        server_chosen_ids: *scheme != ScidScheme::EchoOfClientDcid,
        structured_scids: scheme.is_structured(),
    })
}

/// Returns the operator of the closest known profile, or [`UNKNOWN_PROFILE`].
///
/// Coalescence and SCID structure must agree exactly; the initial RTO must be
/// within `tolerance` relative distance. Ties go to the smallest distance,
/// then to the earlier profile.
pub fn match_profile(observed: &FingerprintProfile, known: &[FingerprintProfile], tolerance: f64) -> String {
    let mut best: Option<(f64, &FingerprintProfile)> = None;
    for k in known {
        if k.coalescence != observed.coalescence || k.structured_scids != observed.structured_scids {
            continue;
        }
        let d = (observed.rto.initial_rto - k.rto.initial_rto).abs() / k.rto.initial_rto;
        if d <= tolerance && best.map_or(true, |(bd, _)| d < bd) {
            best = Some((d, k));
        }
    }
    best.map_or_else(|| UNKNOWN_PROFILE.to_string(), |(_, k)| k.operator.clone())
}

#[derive(Debug, Deserialize)]
struct ProfileFile {
    profile: Vec<ProfileEntry>,
}

#[derive(Debug, Deserialize)]
struct ProfileEntry {
    operator: String,
    initial_rto: f64,
    #[serde(default = "two")]
    backoff_base: f64,
    retransmissions: (u32, u32),
    coalescence: bool,
    server_chosen_ids: bool,
    structured_scids: bool,
}

fn two() -> f64 {
    2.0
}

/// Parses a known-profile table (TOML, `[[profile]]` entries).
pub fn parse_profiles(text: &str) -> Result<Vec<FingerprintProfile>, Error> {
    let file: ProfileFile = toml::from_str(text).map_err(|e| Error::Config(format!("profiles: {e}")))?;
    file.profile
        .into_iter()
        .map(|p| {
            if !(p.initial_rto > 0.0) || p.retransmissions.0 > p.retransmissions.1 {
                return Err(Error::Config(format!("profile {}: invalid RTO or retransmission range", p.operator)));
            }
            Ok(FingerprintProfile {
                operator: p.operator,
                rto: RtoEstimate {
                    initial_rto: p.initial_rto,
                    backoff_base: p.backoff_base,
                    max_retransmissions: p.retransmissions,
                    sample_count: 0,
                },
                coalescence: p.coalescence,
                server_chosen_ids: p.server_chosen_ids,
                structured_scids: p.structured_scids,
            })
        })
        .collect()
}

pub fn load_profiles(path: &Path) -> Result<Vec<FingerprintProfile>, Error> {
    parse_profiles(&crate::read_text(path)?)
}

pub const DEFAULT_PROFILES: &str = include_str!("../config/profiles.toml");

/// The shipped Cloudflare, Facebook and Google profiles.
pub fn default_profiles() -> Vec<FingerprintProfile> {
    parse_profiles(DEFAULT_PROFILES).expect("shipped profile table parses")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::{SessionKey, TimelineEntry};
    use crate::wire::{ConnectionId, Datagram, LongHeader};
    use proptest::prelude::*;

    fn key(i: u32) -> SessionKey {
        SessionKey {
            src_ip: "10.0.0.1".parse().unwrap(),
            dst_ip: std::net::IpAddr::V4(std::net::Ipv4Addr::from(0x2c00_0000 + i)),
            scid: ConnectionId::new(&[1; 8]).unwrap(),
            dcid: ConnectionId::new(&[2; 8]).unwrap(),
        }
    }

    fn session(i: u32, version: u32, dir: Direction, offsets: &[f64]) -> Session {
        Session {
            key: key(i),
            direction: dir,
            version,
            start: 0.0,
            timeline: offsets
                .iter()
                .map(|&o| TimelineEntry {
                    offset: o,
                    packet_type: PacketType::Initial,
                    datagram_len: 1200,
                    coalesced: false,
                })
                .collect(),
        }
    }

    // Running sums of doubling gaps: rto, 3 rto, 7 rto, ...
    fn doubling_offsets(rto: f64, resends: usize) -> Vec<f64> {
        let mut v = vec![0.0];
        let mut gap = rto;
        for _ in 0..resends {
            v.push(v.last().unwrap() + gap);
            gap *= 2.0;
        }
        v
    }

    #[test]
    fn google_like_doubling() {
        let offsets = doubling_offsets(0.3, 5);
        assert!((offsets[1] - 0.3).abs() < 1e-12 && (offsets[2] - 0.9).abs() < 1e-12 && (offsets[3] - 2.1).abs() < 1e-12);
        let sessions: Vec<_> = (0..40).map(|i| session(i, 1, Direction::Response, &offsets)).collect();
        let e = estimate_rto(&sessions, &FingerprintConfig::default()).unwrap();
        assert!((e.initial_rto - 0.3).abs() < 1e-9);
        assert!((e.backoff_base - 2.0).abs() < 1e-9);
        assert_eq!(e.max_retransmissions, (5, 5));
        assert_eq!(e.sample_count, 40);
    }

    #[test]
    fn facebook_like_range() {
        let sessions: Vec<_> = (0..300)
            .map(|i| {
                let n = 7 + (i % 3) as usize;
                let offs: Vec<f64> = std::iter::once(0.0).chain((0..n).map(|k| 0.4 * 2f64.powi(k as i32))).collect();
                session(i, 1, Direction::Response, &offs)
            })
            .collect();
        let e = estimate_rto(&sessions, &FingerprintConfig::default()).unwrap();
        assert!((e.initial_rto - 0.4).abs() < 1e-9);
        assert_eq!(e.max_retransmissions, (7, 9));
        assert!((e.backoff_base - 2.0).abs() < 1e-9);
    }

    #[test]
    fn insufficient() {
        let sessions: Vec<_> = (0..5).map(|i| session(i, 1, Direction::Response, &doubling_offsets(0.3, 4))).collect();
        assert_eq!(
            estimate_rto(&sessions, &FingerprintConfig::default()),
            Err(FingerprintError::InsufficientData { have: 5, need: 30 })
        );
    }

    #[test]
    fn rounds_group_coalesced_and_split_flights() {
        let mut s = session(0, 1, Direction::Response, &[0.0, 0.0, 0.001, 0.4, 0.401, 1.2]);
        s.timeline[1].packet_type = PacketType::Handshake;
        assert_eq!(resend_rounds(&s, 0.05), vec![0.0, 0.4, 1.2]);
        assert_eq!(resend_count(&s, 0.05), 2);
        let single = session(1, 1, Direction::Response, &[0.0]);
        let dist = resend_count_distribution([&single, &single], 0.05);
        assert_eq!(dist, BTreeMap::from([(0, 2)]));
    }

    #[test]
    fn tally_counts_sessions_once() {
        let mut reg = VersionRegistry::empty();
        reg.insert(1, "QUICv1");
        reg.insert(0xfaceb002, "Facebook mvfst 2");
        reg.insert(0xff00001d, "draft-29");
        let mut sessions = Vec::new();
        // 1000 client sessions shaped 77.7 / 21.2 / 0.5 / 0.6.
        for (v, n) in [(1u32, 777), (0xfaceb002, 212), (0xff00001d, 5), (0x5a5a5a5a, 6)] {
            for _ in 0..n {
                sessions.push(session(sessions.len() as u32, v, Direction::Request, &[0.0, 0.1, 0.2, 0.3, 0.4]));
            }
        }
        let t = version_tally(&sessions, &reg);
        assert_eq!(t.total(Role::Client), 1000);
        assert!((t.share(Role::Client, "QUICv1") - 0.777).abs() < 0.005);
        assert!((t.share(Role::Client, "Facebook mvfst 2") - 0.212).abs() < 0.005);
        assert!((t.share(Role::Client, "draft-29") - 0.005).abs() < 0.005);
        assert!((t.share(Role::Client, "others") - 0.006).abs() < 0.005);
        assert!(version_tally(&[], &reg).is_empty());
    }

    proptest! {
        #[test]
        fn tally_permutation_invariant(versions in proptest::collection::vec(0u32..4, 0..60), seed in any::<u64>()) {
            let reg = VersionRegistry::default();
            let sessions: Vec<_> = versions.iter().enumerate()
                .map(|(i, v)| session(i as u32, *v, if i % 2 == 0 { Direction::Request } else { Direction::Response }, &[0.0]))
                .collect();
            let mut shuffled = sessions.clone();
            let n = shuffled.len();
            if n > 1 {
                for i in 0..n {
                    let j = (seed as usize).wrapping_mul(i + 7) % n;
                    shuffled.swap(i, j);
                }
            }
            let a = version_tally(&sessions, &reg);
            let b = version_tally(&shuffled, &reg);
            prop_assert_eq!(&a, &b);
            for role in [Role::Client, Role::Server] {
                if a.total(role) > 0 {
                    let sum: f64 = a.counts[&role].keys().map(|l| a.share(role, l)).sum();
                    prop_assert!((sum - 1.0).abs() < 1e-9);
                }
            }
        }

        #[test]
        fn distribution_mass(n in 0usize..40) {
            let sessions: Vec<_> = (0..n).map(|i| session(i as u32, 1, Direction::Response, &doubling_offsets(0.3, i % 5))).collect();
            let d = resend_count_distribution(&sessions, 0.05);
            prop_assert_eq!(d.values().sum::<u64>() as usize, n);
        }
    }

    fn record(types: &[PacketType], len: usize) -> CaptureRecord {
        let cid = ConnectionId::new(&[3; 8]).unwrap();
        CaptureRecord {
            datagram: Datagram {
                timestamp: 0.0,
                src_ip: "10.0.0.1".parse().unwrap(),
                dst_ip: "44.0.0.1".parse().unwrap(),
                src_port: 443,
                dst_port: 1000,
                payload: vec![0; len],
            },
            direction: Direction::Response,
            packets: types.iter().map(|t| LongHeader::new(*t, 1, cid, cid)).collect(),
        }
    }

    #[test]
    fn packet_types_and_lengths() {
        let recs = vec![
            record(&[PacketType::Initial, PacketType::Handshake], 1250),
            record(&[PacketType::Initial, PacketType::Handshake], 1250),
            record(&[PacketType::Handshake], 1200),
            record(&[PacketType::Initial], 1200),
        ];
        let stats = packet_type_stats(recs.iter().map(|r| ("Google", r)));
        assert!((stats.percentage("Google", "Initial & Handshake") - 50.0).abs() < 1e-9);
        assert!((stats.coalesced_share("Google") - 0.5).abs() < 1e-9);
        let sum: f64 = stats.counts["Google"].keys().map(|k| stats.percentage("Google", k)).sum();
        assert!((sum - 100.0).abs() < 0.01);

        let only_initial = [record(&[PacketType::Initial], 1200)];
        let s = packet_type_stats(only_initial.iter().map(|r| ("X", r)));
        assert_eq!(s.percentage("X", "Initial"), 100.0);
        assert_eq!(s.coalesced_share("X"), 0.0);

        let h = length_histogram(recs.iter().map(|r| ("Google", r)));
        let top = h.top_k("Google", 7);
        assert_eq!(top[0], ((vec![PacketType::Initial, PacketType::Handshake], 1250), 2));
        assert_eq!(top.len(), 3);
        assert!(length_histogram(std::iter::empty()).is_empty());
    }

    fn observed(rto: f64, coalescence: bool, structured: bool) -> FingerprintProfile {
        FingerprintProfile {
            operator: "observed".into(),
            rto: RtoEstimate {
                initial_rto: rto,
                backoff_base: 2.0,
                max_retransmissions: (3, 6),
                sample_count: 100,
            },
            coalescence,
            server_chosen_ids: structured,
            structured_scids: structured,
        }
    }

    #[test]
    fn profile_matching() {
        let known = default_profiles();
        assert_eq!(known.len(), 3);
        assert_eq!(match_profile(&observed(0.31, true, false), &known, 0.25), "Google");
        assert_eq!(match_profile(&observed(1.0, true, true), &known, 0.25), "Cloudflare");
        assert_eq!(match_profile(&observed(0.4, false, true), &known, 0.25), "Facebook");
        assert_eq!(match_profile(&observed(5.0, false, false), &known, 0.25), UNKNOWN_PROFILE);
        // 0.3 s and 0.4 s are told apart.
        assert_eq!(match_profile(&observed(0.4, true, false), &known, 0.25), UNKNOWN_PROFILE);
    }

    #[test]
    fn profile_file_validation() {
        assert!(parse_profiles("[[profile]]\noperator='x'\ninitial_rto=0\nretransmissions=[1,2]\ncoalescence=true\nserver_chosen_ids=true\nstructured_scids=false").is_err());
        assert!(parse_profiles("nonsense").is_err());
    }
}
