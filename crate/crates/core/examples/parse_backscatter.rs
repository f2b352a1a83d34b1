//! Parses a hand-built coalesced server datagram and a version negotiation
//! packet, the way backscatter arrives at a telescope.

use quicscope::wire::{
    classify_direction, encode_long_header, encode_version_negotiation, is_plausible_quic, split_datagram, ConnectionId, Datagram,
    LongHeader, PacketType, PlausibilityPolicy, VersionRegistry,
};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let client = ConnectionId::from_hex("0102030405060708")?;
    let server = ConnectionId::from_hex("40014000e0aabbcc")?;

    let mut payload = encode_long_header(&LongHeader::new(PacketType::Initial, 1, client, server), &[0xaa; 180])?;
    payload.extend(encode_long_header(&LongHeader::new(PacketType::Handshake, 1, client, server), &[0xbb; 900])?);
    payload.resize(1200, 0);

    let split = split_datagram(&payload);
    println!("{} packets, fully consumed: {}", split.packets.len(), split.fully_consumed());
    for p in &split.packets {
        println!("  {:<10} version {:#010x} dcid {} scid {}", p.packet_type.as_str(), p.version, p.dcid, p.scid);
    }

    let d = Datagram {
        timestamp: 0.0,
        src_ip: "157.240.0.1".parse()?,
        dst_ip: "44.1.2.3".parse()?,
        src_port: 443,
        dst_port: 50_000,
        payload,
    };
    println!("direction: {:?}", classify_direction(&d));

    let registry = VersionRegistry::default();
    println!("plausible (lenient): {}", is_plausible_quic(&d.payload, &registry, PlausibilityPolicy::default()));

    let vn = encode_version_negotiation(server, client, &[1, 0xff00_001d])?;
    let vn = &split_datagram(&vn).packets[0];
    println!("version negotiation parsed as {:?}", vn.packet_type);
    println!("all-zero payload plausible: {}", is_plausible_quic(&[0; 1200], &registry, PlausibilityPolicy::strict()));
    Ok(())
}
