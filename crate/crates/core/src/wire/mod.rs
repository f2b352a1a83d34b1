//! QUIC long-header wire format.
//!
//! Only the unprotected parts of the packet are decoded: header form, type,
//! version, the two connection IDs, the Initial token and the length field.
//! Payloads stay opaque. Short-header packets are recognised by the form bit
//! and otherwise left alone.

mod registry;
pub mod varint;

use std::fmt;
use std::net::IpAddr;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

pub use registry::{VersionRegistry, OTHERS_LABEL};

/// Maximum connection ID length in QUIC version 1.
pub const MAX_CID_LEN: usize = 20;

/// Minimum size of a UDP datagram carrying a client Initial.
pub const MIN_INITIAL_DATAGRAM: usize = 1200;

/// The well-known QUIC server port.
pub const QUIC_PORT: u16 = 443;

const FORM_BIT: u8 = 0x80;
const FIXED_BIT: u8 = 0x40;
const RETRY_INTEGRITY_TAG_LEN: usize = 16;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum WireError {
    #[error("packet truncated")]
    TruncatedPacket,
    #[error("connection ID length {0} exceeds {MAX_CID_LEN}")]
    InvalidCidLength(usize),
    #[error("header form bit is clear")]
    NotLongHeader,
    #[error("payload length {0} does not fit a variable-length integer")]
    PayloadTooLarge(usize),
    #[error("invalid hex connection ID: {0}")]
    BadHex(String),
}

/// A QUIC connection ID of 0 to 20 octets.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct ConnectionId {
    len: u8,
    bytes: [u8; MAX_CID_LEN],
}

impl ConnectionId {
    pub fn new(bytes: &[u8]) -> Result<Self, WireError> {
        if bytes.len() > MAX_CID_LEN {
            return Err(WireError::InvalidCidLength(bytes.len()));
        }
        let mut cid = ConnectionId {
            len: bytes.len() as u8,
            bytes: [0; MAX_CID_LEN],
        };
        cid.bytes[..bytes.len()].copy_from_slice(bytes);
        Ok(cid)
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.bytes[..self.len as usize]
    }

    pub fn len(&self) -> usize {
        self.len as usize
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.as_bytes())
    }

    pub fn from_hex(s: &str) -> Result<Self, WireError> {
        let bytes = hex::decode(s.trim()).map_err(|_| WireError::BadHex(s.to_string()))?;
        Self::new(&bytes)
    }
}

impl fmt::Debug for ConnectionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ConnectionId({})", self.to_hex())
    }
}

impl fmt::Display for ConnectionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl FromStr for ConnectionId {
    type Err = WireError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::from_hex(s)
    }
}

impl Serialize for ConnectionId {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.to_hex())
    }
}

impl<'de> Deserialize<'de> for ConnectionId {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        ConnectionId::from_hex(&s).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum PacketType {
    Initial,
    ZeroRtt,
    Handshake,
    Retry,
    VersionNegotiation,
}

impl PacketType {
    fn type_bits(self) -> u8 {
        match self {
            PacketType::Initial => 0b00,
            PacketType::ZeroRtt => 0b01,
            PacketType::Handshake => 0b10,
            PacketType::Retry => 0b11,
            PacketType::VersionNegotiation => 0b00,
        }
    }

    fn from_type_bits(bits: u8) -> Self {
        match bits & 0b11 {
            0b00 => PacketType::Initial,
            0b01 => PacketType::ZeroRtt,
            0b10 => PacketType::Handshake,
            _ => PacketType::Retry,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            PacketType::Initial => "Initial",
            PacketType::ZeroRtt => "0-RTT",
            PacketType::Handshake => "Handshake",
            PacketType::Retry => "Retry",
            PacketType::VersionNegotiation => "VersionNegotiation",
        }
    }

    /// Packets a server retransmits while waiting for the client to acknowledge.
    pub fn is_handshake_flight(self) -> bool {
        matches!(self, PacketType::Initial | PacketType::Handshake)
    }
}

impl fmt::Display for PacketType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Decoded QUIC long header.
///
/// `first_byte` keeps the raw first octet (header-protected bits included) so
/// encoding a parsed header reproduces the original bytes.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LongHeader {
    pub packet_type: PacketType,
    pub first_byte: u8,
    pub version: u32,
    pub dcid: ConnectionId,
    pub scid: ConnectionId,
    /// Initial packets only; empty otherwise.
    #[serde(with = "hex_bytes")]
    pub token: Vec<u8>,
    /// Value of the Length field; `None` for Retry and Version Negotiation.
    pub payload_length: Option<u64>,
    /// Octets consumed from the datagram, header and payload.
    pub wire_length: usize,
}

impl LongHeader {
    /// Header with a canonical first octet and no token. `payload_length` and
    /// `wire_length` are filled in by [`encode_long_header`].
    pub fn new(packet_type: PacketType, version: u32, dcid: ConnectionId, scid: ConnectionId) -> Self {
        let packet_type = if version == 0 {
            PacketType::VersionNegotiation
        } else if packet_type == PacketType::VersionNegotiation {
            // A non-zero version can never be a negotiation packet.
            PacketType::Initial
        } else {
            packet_type
        };
        let first_byte = match packet_type {
            PacketType::VersionNegotiation => FORM_BIT,
            t => FORM_BIT | FIXED_BIT | (t.type_bits() << 4),
        };
        LongHeader {
            packet_type,
            first_byte,
            version,
            dcid,
            scid,
            token: Vec::new(),
            payload_length: None,
            wire_length: 0,
        }
    }

    pub fn token_length(&self) -> usize {
        self.token.len()
    }

    pub fn fixed_bit(&self) -> bool {
        self.first_byte & FIXED_BIT != 0
    }
}

/// A long-header packet and the slice of the datagram holding its payload.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedPacket<'a> {
    pub header: LongHeader,
    pub payload: &'a [u8],
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], WireError> {
        let end = self.pos.checked_add(n).ok_or(WireError::TruncatedPacket)?;
        let out = self.buf.get(self.pos..end).ok_or(WireError::TruncatedPacket)?;
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8, WireError> {
        Ok(self.take(1)?[0])
    }

    fn varint(&mut self) -> Result<u64, WireError> {
        let (v, n) = varint::decode(&self.buf[self.pos..]).ok_or(WireError::TruncatedPacket)?;
        self.pos += n;
        Ok(v)
    }

    fn cid(&mut self) -> Result<ConnectionId, WireError> {
        let len = self.u8()? as usize;
        if len > MAX_CID_LEN {
            return Err(WireError::InvalidCidLength(len));
        }
        ConnectionId::new(self.take(len)?)
    }

    fn rest(&mut self) -> &'a [u8] {
        let out = &self.buf[self.pos..];
        self.pos = self.buf.len();
        out
    }
}

/// Parses one long-header packet starting at `offset`.
pub fn parse_long_header(buf: &[u8], offset: usize) -> Result<ParsedPacket<'_>, WireError> {
    if offset >= buf.len() {
        return Err(WireError::TruncatedPacket);
    }
    let mut cur = Cursor { buf, pos: offset };
    let first_byte = cur.u8()?;
    if first_byte & FORM_BIT == 0 {
        return Err(WireError::NotLongHeader);
    }
    let version = u32::from_be_bytes(cur.take(4)?.try_into().expect("4 octets"));
    let dcid = cur.cid()?;
    let scid = cur.cid()?;

    let mut token = Vec::new();
    let (packet_type, payload_length, payload) = if version == 0 {
        (PacketType::VersionNegotiation, None, cur.rest())
    } else {
        match PacketType::from_type_bits(first_byte >> 4) {
            PacketType::Retry => {
                let rest = cur.rest();
                if rest.len() < RETRY_INTEGRITY_TAG_LEN {
                    return Err(WireError::TruncatedPacket);
                }
                (PacketType::Retry, None, rest)
            }
            t => {
                if t == PacketType::Initial {
                    let token_len = cur.varint()?;
                    let token_len = usize::try_from(token_len).map_err(|_| WireError::TruncatedPacket)?;
                    token = cur.take(token_len)?.to_vec();
                }
                let len = cur.varint()?;
                let n = usize::try_from(len).map_err(|_| WireError::TruncatedPacket)?;
                (t, Some(len), cur.take(n)?)
            }
        }
    };

    Ok(ParsedPacket {
        header: LongHeader {
            packet_type,
            first_byte,
            version,
            dcid,
            scid,
            token,
            payload_length,
            wire_length: cur.pos - offset,
        },
        payload,
    })
}

/// Serializes `h` followed by `payload`. The Length field is derived from
/// `payload`; `h.payload_length` and `h.wire_length` are ignored. For Retry
/// and Version Negotiation `payload` is everything after the SCID.
pub fn encode_long_header(h: &LongHeader, payload: &[u8]) -> Result<Vec<u8>, WireError> {
    for cid in [&h.dcid, &h.scid] {
        if cid.len() > MAX_CID_LEN {
            return Err(WireError::InvalidCidLength(cid.len()));
        }
    }
    let mut out = Vec::with_capacity(32 + h.token.len() + payload.len());
    let first = match h.packet_type {
        PacketType::VersionNegotiation => h.first_byte | FORM_BIT,
        t => (h.first_byte & !0x30) | FORM_BIT | (t.type_bits() << 4),
    };
    out.push(first);
    let version = if h.packet_type == PacketType::VersionNegotiation { 0 } else { h.version };
    out.extend_from_slice(&version.to_be_bytes());
    out.push(h.dcid.len() as u8);
    out.extend_from_slice(h.dcid.as_bytes());
    out.push(h.scid.len() as u8);
    out.extend_from_slice(h.scid.as_bytes());
    match h.packet_type {
        PacketType::VersionNegotiation | PacketType::Retry => {}
        t => {
            if t == PacketType::Initial {
                varint::encode(h.token.len() as u64, &mut out);
                out.extend_from_slice(&h.token);
            }
            if payload.len() as u64 > varint::MAX_VARINT {
                return Err(WireError::PayloadTooLarge(payload.len()));
            }
            varint::encode(payload.len() as u64, &mut out);
        }
    }
    out.extend_from_slice(payload);
    Ok(out)
}

/// Builds a Version Negotiation packet advertising `supported`.
pub fn encode_version_negotiation(
    dcid: ConnectionId,
    scid: ConnectionId,
    supported: &[u32],
) -> Result<Vec<u8>, WireError> {
    let h = LongHeader::new(PacketType::VersionNegotiation, 0, dcid, scid);
    let list: Vec<u8> = supported.iter().flat_map(|v| v.to_be_bytes()).collect();
    encode_long_header(&h, &list)
}

/// Supported-version list carried in a Version Negotiation payload.
pub fn supported_versions(payload: &[u8]) -> Vec<u32> {
    payload
        .chunks_exact(4)
        .map(|c| u32::from_be_bytes(c.try_into().expect("4 octets")))
        .collect()
}

/// What followed the last long-header packet of a datagram.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Trailer {
    None,
    /// Zero octets to the end of the datagram.
    Padding(usize),
    /// A short-header packet of the given length; counted, not parsed.
    ShortHeader(usize),
    /// Octets that failed to parse.
    Unparsed(usize),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatagramSplit {
    pub packets: Vec<LongHeader>,
    pub trailer: Trailer,
}

impl DatagramSplit {
    pub fn is_coalesced(&self) -> bool {
        self.packets.len() > 1
    }

    /// True when every octet was attributed to a packet or to padding.
    pub fn fully_consumed(&self) -> bool {
        matches!(self.trailer, Trailer::None | Trailer::Padding(_))
    }
}

/// Walks a UDP payload packet by packet using each packet's Length field.
pub fn split_datagram(payload: &[u8]) -> DatagramSplit {
    let mut packets = Vec::new();
    let mut pos = 0;
    let trailer = loop {
        let Some(&b) = payload.get(pos) else {
            break Trailer::None;
        };
        let rest = payload.len() - pos;
        if b == 0 {
            if payload[pos..].iter().all(|&x| x == 0) {
                break Trailer::Padding(rest);
            }
            break Trailer::Unparsed(rest);
        }
        if b & FORM_BIT == 0 {
            break Trailer::ShortHeader(rest);
        }
        match parse_long_header(payload, pos) {
            Ok(p) => {
                pos += p.header.wire_length;
                packets.push(p.header);
            }
            Err(_) => break Trailer::Unparsed(rest),
        }
    };
    DatagramSplit { packets, trailer }
}

/// Long-header packets coalesced in one datagram; an empty result means the
/// payload does not start with a parseable QUIC long header.
pub fn split_coalesced(payload: &[u8]) -> Vec<LongHeader> {
    split_datagram(payload).packets
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Direction {
    Request,
    Response,
    NonQuic,
}

/// A captured UDP datagram.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Datagram {
    /// Seconds since the Unix epoch.
    pub timestamp: f64,
    pub src_ip: IpAddr,
    pub dst_ip: IpAddr,
    pub src_port: u16,
    pub dst_port: u16,
    #[serde(with = "hex_bytes")]
    pub payload: Vec<u8>,
}

/// Source port 443 marks a server response (backscatter), destination port
/// 443 a client request. A datagram with both ports at 443 is a response.
pub fn classify_direction(d: &Datagram) -> Direction {
    if d.src_port == QUIC_PORT {
        Direction::Response
    } else if d.dst_port == QUIC_PORT {
        Direction::Request
    } else {
        Direction::NonQuic
    }
}

/// Which versions count as plausible QUIC besides the registry's entries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlausibilityPolicy {
    /// Accept reserved versions of the form 0x?a?a?a?a.
    pub allow_greased: bool,
    /// Accept any version missing from the registry.
    pub allow_unknown: bool,
}

impl Default for PlausibilityPolicy {
    fn default() -> Self {
        PlausibilityPolicy {
            allow_greased: true,
            allow_unknown: true,
        }
    }
}

impl PlausibilityPolicy {
    pub fn strict() -> Self {
        PlausibilityPolicy {
            allow_greased: false,
            allow_unknown: false,
        }
    }
}

/// Reserved versions used to exercise version negotiation.
pub fn is_greased_version(v: u32) -> bool {
    v & 0x0f0f_0f0f == 0x0a0a_0a0a
}

/// Native payload validator: at least one long-header packet with a
/// version the policy accepts (and, outside version negotiation, the
/// fixed bit set).
pub fn is_plausible_quic(payload: &[u8], registry: &VersionRegistry, policy: PlausibilityPolicy) -> bool {
    split_coalesced(payload).iter().any(|h| {
        if h.version == 0 {
            return true;
        }
        if !h.fixed_bit() {
            return false;
        }
        registry.contains(h.version)
            || (policy.allow_greased && is_greased_version(h.version))
            || policy.allow_unknown
    })
}

pub(crate) mod hex_bytes {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(bytes: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(bytes))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        let s = String::deserialize(d)?;
        hex::decode(s).map_err(serde::de::Error::custom)
    }
}
