//! Telescope ingestion: filter QUIC traffic out of a capture, drop
//! acknowledged scanners, attribute sources to operators and group packets
//! into sessions.

use std::collections::{BTreeMap, HashMap};
use std::io::Read;
use std::net::IpAddr;
use std::path::Path;

use ipnet::IpNet;
use serde::{Deserialize, Serialize};

use crate::capture::{CaptureError, CaptureReader, Frame};
use crate::wire::{
    classify_direction, is_plausible_quic, split_datagram, ConnectionId, Datagram, Direction, LongHeader,
    PacketType, PlausibilityPolicy, VersionRegistry,
};
use crate::Error;

/// Label used for sources not covered by the prefix table.
pub const UNKNOWN_OPERATOR: &str = "Unknown";

/// Default gap after which packets with the same key start a new session.
pub const DEFAULT_IDLE_GAP: f64 = 60.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptureRecord {
    pub datagram: Datagram,
    pub direction: Direction,
    pub packets: Vec<LongHeader>,
}

impl CaptureRecord {
    pub fn is_coalesced(&self) -> bool {
        self.packets.len() > 1
    }

    /// Packet types in datagram order, e.g. `[Initial, Handshake]`.
    pub fn type_tuple(&self) -> Vec<PacketType> {
        self.packets.iter().map(|p| p.packet_type).collect()
    }
}

#[derive(Debug, Clone, Default)]
pub struct FilterConfig {
    pub registry: VersionRegistry,
    pub policy: PlausibilityPolicy,
}

/// Accounting for one ingest pass. Every frame lands in exactly one bucket.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestCounters {
    pub frames: u64,
    pub malformed: u64,
    pub not_udp: u64,
    pub non_quic_port: u64,
    pub implausible: u64,
    pub records: u64,
}

impl IngestCounters {
    pub fn skipped(&self) -> u64 {
        self.frames - self.records
    }
}

/// Why a datagram did not become a record.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Rejection {
    NonQuicPort,
    Implausible,
}

/// Classifies one datagram and, if it is plausible QUIC, splits it.
pub fn classify_datagram(d: Datagram, filter: &FilterConfig) -> Result<CaptureRecord, Rejection> {
    let direction = classify_direction(&d);
    if direction == Direction::NonQuic {
        return Err(Rejection::NonQuicPort);
    }
    if !is_plausible_quic(&d.payload, &filter.registry, filter.policy) {
        return Err(Rejection::Implausible);
    }
    let packets = split_datagram(&d.payload).packets;
    Ok(CaptureRecord {
        datagram: d,
        direction,
        packets,
    })
}

/// Streaming reader producing records in file order while counting.
pub struct RecordStream<'f, R: Read> {
    frames: CaptureReader<R>,
    filter: &'f FilterConfig,
    counters: IngestCounters,
}

impl<'f, R: Read> RecordStream<'f, R> {
    pub fn new(frames: CaptureReader<R>, filter: &'f FilterConfig) -> Self {
        RecordStream {
            frames,
            filter,
            counters: IngestCounters::default(),
        }
    }

    pub fn counters(&self) -> IngestCounters {
        self.counters
    }
}

impl<R: Read> Iterator for RecordStream<'_, R> {
    type Item = Result<CaptureRecord, CaptureError>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            let frame = match self.frames.next()? {
                Ok(f) => f,
                Err(e) => return Some(Err(e)),
            };
            self.counters.frames += 1;
            let d = match frame {
                Frame::Udp(d) => d,
                Frame::NotUdp => {
                    self.counters.not_udp += 1;
                    continue;
                }
                Frame::Malformed => {
                    self.counters.malformed += 1;
                    continue;
                }
            };
            match classify_datagram(d, self.filter) {
                Ok(rec) => {
                    self.counters.records += 1;
                    return Some(Ok(rec));
                }
                Err(Rejection::NonQuicPort) => self.counters.non_quic_port += 1,
                Err(Rejection::Implausible) => self.counters.implausible += 1,
            }
        }
    }
}

/// Reads a whole capture and returns its QUIC records in timestamp order.
pub fn ingest<R: Read>(reader: R, filter: &FilterConfig) -> Result<(Vec<CaptureRecord>, IngestCounters), Error> {
    let mut stream = RecordStream::new(CaptureReader::new(reader)?, filter);
    let mut records = Vec::new();
    for rec in stream.by_ref() {
        records.push(rec?);
    }
    records.sort_by(|a, b| a.datagram.timestamp.total_cmp(&b.datagram.timestamp));
    Ok((records, stream.counters()))
}

pub fn ingest_file(path: &Path, filter: &FilterConfig) -> Result<(Vec<CaptureRecord>, IngestCounters), Error> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    ingest(std::io::BufReader::new(file), filter)
}

/// Longest-prefix-match map over IPv4 and IPv6 prefixes.
///
/// When the same prefix is inserted twice the smaller value wins, so the
/// result never depends on insertion order.
#[derive(Debug, Clone)]
pub struct PrefixMap<V> {
    // (is_v6, prefix_len) -> network bits -> value; iterated longest first.
    buckets: BTreeMap<(bool, u8), HashMap<u128, V>>,
}

impl<V> Default for PrefixMap<V> {
    fn default() -> Self {
        PrefixMap {
            buckets: BTreeMap::new(),
        }
    }
}

fn addr_bits(ip: IpAddr) -> (bool, u128) {
    match ip {
        IpAddr::V4(v4) => (false, u128::from(u32::from(v4))),
        IpAddr::V6(v6) => (true, u128::from(v6)),
    }
}

fn mask(bits: u128, is_v6: bool, len: u8) -> u128 {
    let width = if is_v6 { 128 } else { 32 };
    if len == 0 {
        0
    } else {
        bits & (u128::MAX << (width - u32::from(len))) & if is_v6 { u128::MAX } else { u128::from(u32::MAX) }
    }
}

impl<V: Ord> PrefixMap<V> {
    pub fn insert(&mut self, net: IpNet, value: V) {
        let (is_v6, bits) = addr_bits(net.addr());
        let len = net.prefix_len();
        let bucket = self.buckets.entry((is_v6, len)).or_default();
        let key = mask(bits, is_v6, len);
        match bucket.get(&key) {
            Some(existing) if *existing <= value => {}
            _ => {
                bucket.insert(key, value);
            }
        }
    }

    pub fn lookup(&self, ip: IpAddr) -> Option<&V> {
        let (is_v6, bits) = addr_bits(ip);
        self.buckets
            .iter()
            .rev()
            .filter(|((v6, _), _)| *v6 == is_v6)
            .find_map(|((_, len), bucket)| bucket.get(&mask(bits, is_v6, *len)))
    }

    pub fn len(&self) -> usize {
        self.buckets.values().map(HashMap::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn parse_net(s: &str) -> Option<IpNet> {
    s.parse::<IpNet>().ok().or_else(|| s.parse::<IpAddr>().ok().map(IpNet::from))
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct AsInfo {
    pub asn: u32,
    pub label: String,
}

/// Source-address to AS/operator mapping.
///
/// Text format: `prefix<TAB>asn<TAB>label`, `#` comments allowed.
#[derive(Debug, Clone, Default)]
pub struct PrefixTable {
    map: PrefixMap<AsInfo>,
}

impl PrefixTable {
    pub fn parse(text: &str) -> Result<Self, Error> {
        let mut table = PrefixTable::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut cols = line.split('\t').map(str::trim);
            let (Some(prefix), Some(asn), Some(label)) = (cols.next(), cols.next(), cols.next()) else {
                return Err(Error::parse("prefix table", n + 1, "expected prefix<TAB>asn<TAB>label"));
            };
            let net = parse_net(prefix).ok_or_else(|| Error::parse("prefix table", n + 1, format!("bad prefix {prefix:?}")))?;
            let asn = asn
                .trim_start_matches("AS")
                .parse()
                .map_err(|_| Error::parse("prefix table", n + 1, format!("bad asn {asn:?}")))?;
            table.insert(net, asn, label);
        }
        Ok(table)
    }

    pub fn load(path: &Path) -> Result<Self, Error> {
        Self::parse(&crate::read_text(path)?)
    }

    pub fn insert(&mut self, net: IpNet, asn: u32, label: impl Into<String>) {
        self.map.insert(net, AsInfo { asn, label: label.into() });
    }

    /// Longest-prefix match; `None` when no prefix covers `ip`.
    pub fn map_to_as(&self, ip: IpAddr) -> Option<&AsInfo> {
        self.map.lookup(ip)
    }

    /// Operator label, or [`UNKNOWN_OPERATOR`].
    pub fn operator_of(&self, ip: IpAddr) -> &str {
        self.map_to_as(ip).map_or(UNKNOWN_OPERATOR, |a| a.label.as_str())
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

/// Prefixes and addresses of acknowledged scanning projects, one per line.
#[derive(Debug, Clone, Default)]
pub struct ScannerList {
    map: PrefixMap<()>,
}

impl ScannerList {
    pub fn parse(text: &str) -> Result<Self, Error> {
        let mut list = ScannerList::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let net = parse_net(line).ok_or_else(|| Error::parse("scanner list", n + 1, format!("bad prefix {line:?}")))?;
            list.map.insert(net, ());
        }
        Ok(list)
    }

    pub fn load(path: &Path) -> Result<Self, Error> {
        Self::parse(&crate::read_text(path)?)
    }

    pub fn insert(&mut self, net: IpNet) {
        self.map.insert(net, ());
    }

    pub fn contains(&self, ip: IpAddr) -> bool {
        self.map.lookup(ip).is_some()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SanitizeCounters {
    pub input: u64,
    pub dropped_requests: u64,
}

impl SanitizeCounters {
    /// Share of input records removed; 0 for empty input.
    pub fn removed_fraction(&self) -> f64 {
        if self.input == 0 {
            0.0
        } else {
            self.dropped_requests as f64 / self.input as f64
        }
    }
}

/// Drops requests sent by listed scanners. Responses are always kept: a
/// scanner's address showing up as a response source is a reflecting server.
pub fn sanitize(records: Vec<CaptureRecord>, scanners: &ScannerList) -> (Vec<CaptureRecord>, SanitizeCounters) {
    let mut counters = SanitizeCounters {
        input: records.len() as u64,
        ..Default::default()
    };
    let kept: Vec<_> = records
        .into_iter()
        .filter(|r| {
            let drop = r.direction == Direction::Request && scanners.contains(r.datagram.src_ip);
            if drop {
                counters.dropped_requests += 1;
            }
            !drop
        })
        .collect();
    (kept, counters)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SessionKey {
    pub src_ip: IpAddr,
    pub dst_ip: IpAddr,
    pub scid: ConnectionId,
    pub dcid: ConnectionId,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimelineEntry {
    /// Seconds since the session's first packet.
    pub offset: f64,
    pub packet_type: PacketType,
    pub datagram_len: usize,
    pub coalesced: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Session {
    pub key: SessionKey,
    pub direction: Direction,
    /// Version of the session's first packet.
    pub version: u32,
    /// Absolute timestamp of the first packet.
    pub start: f64,
    pub timeline: Vec<TimelineEntry>,
}

impl Session {
    pub fn last_offset(&self) -> f64 {
        self.timeline.last().map_or(0.0, |e| e.offset)
    }
}

/// Groups packets into sessions keyed by (src, dst, SCID, DCID).
///
/// `records` must be timestamp-ordered. A gap of `idle_gap` seconds or more
/// between consecutive packets of one key starts a new session. Sessions are
/// returned in order of their first packet.
pub fn sessionize(records: &[CaptureRecord], idle_gap: f64) -> Vec<Session> {
    let mut sessions: Vec<Session> = Vec::new();
    let mut open: HashMap<SessionKey, usize> = HashMap::new();
    for rec in records {
        let ts = rec.datagram.timestamp;
        let coalesced = rec.is_coalesced();
        for pkt in &rec.packets {
            let key = SessionKey {
                src_ip: rec.datagram.src_ip,
                dst_ip: rec.datagram.dst_ip,
                scid: pkt.scid,
                dcid: pkt.dcid,
            };
            let idx = match open.get(&key) {
                Some(&i) if ts - (sessions[i].start + sessions[i].last_offset()) < idle_gap => i,
                _ => {
                    sessions.push(Session {
                        key,
                        direction: rec.direction,
                        version: pkt.version,
                        start: ts,
                        timeline: Vec::new(),
                    });
                    open.insert(key, sessions.len() - 1);
                    sessions.len() - 1
                }
            };
            let s = &mut sessions[idx];
            s.timeline.push(TimelineEntry {
                offset: ts - s.start,
                packet_type: pkt.packet_type,
                datagram_len: rec.datagram.payload.len(),
                coalesced,
            });
        }
    }
    sessions
}
