//! Classic pcap input and output for UDP-over-IPv4 datagrams.
//!
//! Reading accepts Ethernet and raw-IP link types; frames that are not
//! IPv4/UDP are reported rather than dropped silently so ingest can count
//! them. Writing produces byte-identical files for identical input.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::net::{IpAddr, Ipv4Addr};
use std::path::Path;
use std::time::Duration;

use etherparse::{NetSlice, PacketBuilder, SlicedPacket, TransportSlice};
use pcap_file::pcap::{PcapHeader, PcapPacket, PcapReader, PcapWriter};
use pcap_file::{DataLink, Endianness, TsResolution};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::wire::Datagram;

#[derive(Debug, Error)]
pub enum CaptureError {
    #[error("unreadable capture: {0}")]
    UnreadableCapture(String),
    #[error("unsupported link type {0:?}")]
    UnsupportedLinkType(DataLink),
    #[error("cannot write capture: {0}")]
    Write(String),
    #[error("only IPv4 datagrams can be written, got {0}")]
    NotIpv4(IpAddr),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LinkType {
    Ethernet,
    #[default]
    RawIp,
}

/// One capture record after link/network/transport decoding.
#[derive(Debug, Clone, PartialEq)]
pub enum Frame {
    Udp(Datagram),
    /// Decoded fine but is not IPv4/UDP (TCP, ICMP, IPv6, ARP, ...).
    NotUdp,
    /// Could not be decoded at the link or network layer.
    Malformed,
}

pub struct CaptureReader<R: Read> {
    inner: PcapReader<R>,
    link: DataLink,
    failed: bool,
}

impl CaptureReader<BufReader<File>> {
    pub fn open(path: &Path) -> Result<Self, CaptureError> {
        let file = File::open(path).map_err(|e| CaptureError::UnreadableCapture(format!("{}: {e}", path.display())))?;
        Self::new(BufReader::new(file))
    }
}

impl<R: Read> CaptureReader<R> {
    pub fn new(reader: R) -> Result<Self, CaptureError> {
        let inner = PcapReader::new(reader).map_err(|e| CaptureError::UnreadableCapture(e.to_string()))?;
        let link = inner.header().datalink;
        match link {
            DataLink::ETHERNET | DataLink::RAW | DataLink::IPV4 => {}
            other => return Err(CaptureError::UnsupportedLinkType(other)),
        }
        Ok(CaptureReader {
            inner,
            link,
            failed: false,
        })
    }
}

impl<R: Read> Iterator for CaptureReader<R> {
    type Item = Result<Frame, CaptureError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.failed {
            return None;
        }
        match self.inner.next_packet()? {
            Ok(pkt) => Some(Ok(decode_frame(self.link, pkt.timestamp, &pkt.data))),
            Err(e) => {
                self.failed = true;
                Some(Err(CaptureError::UnreadableCapture(e.to_string())))
            }
        }
    }
}

fn decode_frame(link: DataLink, ts: Duration, data: &[u8]) -> Frame {
    let sliced = match link {
        DataLink::ETHERNET => SlicedPacket::from_ethernet(data),
        _ => SlicedPacket::from_ip(data),
    };
    let Ok(sliced) = sliced else {
        return Frame::Malformed;
    };
    let (src, dst) = match &sliced.net {
        Some(NetSlice::Ipv4(v4)) => (v4.header().source_addr(), v4.header().destination_addr()),
        Some(_) => return Frame::NotUdp,
        None => return Frame::Malformed,
    };
    match &sliced.transport {
        Some(TransportSlice::Udp(udp)) => Frame::Udp(Datagram {
            timestamp: ts.as_secs_f64(),
            src_ip: IpAddr::V4(src),
            dst_ip: IpAddr::V4(dst),
            src_port: udp.source_port(),
            dst_port: udp.destination_port(),
            payload: udp.payload().to_vec(),
        }),
        _ => Frame::NotUdp,
    }
}

/// Microsecond-resolution timestamp, rounded so writes are reproducible.
fn to_duration(ts: f64) -> Duration {
    Duration::from_micros((ts.max(0.0) * 1e6).round() as u64)
}

pub struct CaptureWriter<W: Write> {
    inner: PcapWriter<W>,
    link: LinkType,
}

impl CaptureWriter<BufWriter<File>> {
    pub fn create(path: &Path, link: LinkType) -> Result<Self, CaptureError> {
        let file = File::create(path).map_err(|e| CaptureError::Write(format!("{}: {e}", path.display())))?;
        Self::new(BufWriter::new(file), link)
    }
}

impl<W: Write> CaptureWriter<W> {
    pub fn new(writer: W, link: LinkType) -> Result<Self, CaptureError> {
        let header = PcapHeader {
            datalink: match link {
                LinkType::Ethernet => DataLink::ETHERNET,
                LinkType::RawIp => DataLink::RAW,
            },
            ts_resolution: TsResolution::MicroSecond,
            endianness: Endianness::Little,
            ..PcapHeader::default()
        };
        let inner = PcapWriter::with_header(writer, header).map_err(|e| CaptureError::Write(e.to_string()))?;
        Ok(CaptureWriter { inner, link })
    }

    pub fn write_datagram(&mut self, d: &Datagram) -> Result<(), CaptureError> {
        let frame = encode_frame(self.link, d)?;
        let pkt = PcapPacket::new(to_duration(d.timestamp), frame.len() as u32, &frame);
        self.inner.write_packet(&pkt).map_err(|e| CaptureError::Write(e.to_string()))?;
        Ok(())
    }

    /// Writes a raw frame (already link-encoded), e.g. to inject non-UDP traffic.
    pub fn write_frame(&mut self, timestamp: f64, frame: &[u8]) -> Result<(), CaptureError> {
        let pkt = PcapPacket::new(to_duration(timestamp), frame.len() as u32, frame);
        self.inner.write_packet(&pkt).map_err(|e| CaptureError::Write(e.to_string()))?;
        Ok(())
    }

    pub fn finish(self) -> Result<W, CaptureError> {
        let mut w = self.inner.into_writer();
        w.flush().map_err(|e| CaptureError::Write(e.to_string()))?;
        Ok(w)
    }
}

fn ipv4(ip: IpAddr) -> Result<Ipv4Addr, CaptureError> {
    match ip {
        IpAddr::V4(v4) => Ok(v4),
        other => Err(CaptureError::NotIpv4(other)),
    }
}

const SRC_MAC: [u8; 6] = [0x02, 0, 0, 0, 0, 0x01];
const DST_MAC: [u8; 6] = [0x02, 0, 0, 0, 0, 0x02];

fn encode_frame(link: LinkType, d: &Datagram) -> Result<Vec<u8>, CaptureError> {
    let src = ipv4(d.src_ip)?.octets();
    let dst = ipv4(d.dst_ip)?.octets();
    let mut out = Vec::with_capacity(d.payload.len() + 42);
    let res = match link {
        LinkType::Ethernet => PacketBuilder::ethernet2(SRC_MAC, DST_MAC)
            .ipv4(src, dst, 64)
            .udp(d.src_port, d.dst_port)
            .write(&mut out, &d.payload),
        LinkType::RawIp => PacketBuilder::ipv4(src, dst, 64)
            .udp(d.src_port, d.dst_port)
            .write(&mut out, &d.payload),
    };
    res.map_err(|e| CaptureError::Write(e.to_string()))?;
    Ok(out)
}

/// Writes all datagrams to `path` in order.
pub fn write_capture<'a>(
    path: &Path,
    link: LinkType,
    datagrams: impl IntoIterator<Item = &'a Datagram>,
) -> Result<(), CaptureError> {
    let mut w = CaptureWriter::create(path, link)?;
    for d in datagrams {
        w.write_datagram(d)?;
    }
    w.finish()?;
    Ok(())
}

/// Encodes datagrams into an in-memory pcap image.
pub fn capture_bytes<'a>(link: LinkType, datagrams: impl IntoIterator<Item = &'a Datagram>) -> Result<Vec<u8>, CaptureError> {
    let mut w = CaptureWriter::new(Vec::new(), link)?;
    for d in datagrams {
        w.write_datagram(d)?;
    }
    w.finish()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(ts: f64, payload: Vec<u8>) -> Datagram {
        Datagram {
            timestamp: ts,
            src_ip: "157.240.1.35".parse().unwrap(),
            dst_ip: "44.1.2.3".parse().unwrap(),
            src_port: 443,
            dst_port: 51234,
            payload,
        }
    }

    #[test]
    fn round_trip_both_link_types() {
        for link in [LinkType::Ethernet, LinkType::RawIp] {
            let ds = vec![sample(1_640_995_200.25, vec![1, 2, 3]), sample(1_640_995_201.5, vec![0xc0; 1200])];
            let bytes = capture_bytes(link, &ds).unwrap();
            let frames: Vec<_> = CaptureReader::new(&bytes[..]).unwrap().map(Result::unwrap).collect();
            assert_eq!(frames.len(), 2);
            for (f, d) in frames.iter().zip(&ds) {
                let Frame::Udp(got) = f else { panic!("{f:?}") };
                assert_eq!(got.payload, d.payload);
                assert_eq!((got.src_ip, got.dst_ip, got.src_port, got.dst_port), (d.src_ip, d.dst_ip, 443, 51234));
                assert!((got.timestamp - d.timestamp).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn non_udp_and_garbage() {
        let mut w = CaptureWriter::new(Vec::new(), LinkType::RawIp).unwrap();
        let mut tcp = Vec::new();
        PacketBuilder::ipv4([1, 1, 1, 1], [2, 2, 2, 2], 64)
            .tcp(443, 1000, 1, 1024)
            .write(&mut tcp, &[])
            .unwrap();
        w.write_frame(1.0, &tcp).unwrap();
        w.write_frame(2.0, &[0x45, 0x00]).unwrap();
        let bytes = w.finish().unwrap();
        let frames: Vec<_> = CaptureReader::new(&bytes[..]).unwrap().map(Result::unwrap).collect();
        assert_eq!(frames, vec![Frame::NotUdp, Frame::Malformed]);
    }

    #[test]
    fn deterministic_bytes() {
        let ds = vec![sample(10.0, vec![7; 40])];
        assert_eq!(capture_bytes(LinkType::RawIp, &ds).unwrap(), capture_bytes(LinkType::RawIp, &ds).unwrap());
    }

    #[test]
    fn rejects_non_pcap() {
        assert!(matches!(CaptureReader::new(&b"not a pcap file at all"[..]), Err(CaptureError::UnreadableCapture(_))));
    }
}
