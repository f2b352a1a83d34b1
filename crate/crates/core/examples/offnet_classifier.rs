//! Off-net detection on a synthetic population: off-net servers with low
//! host IDs among background sources with random CIDs.

use std::net::IpAddr;

use quicscope::ingest::CaptureRecord;
use quicscope::offnet::{classify, evaluate, extract_features, metrics_table, FeatureConfig, GroundTruth, RuleSet, NOT_OPERATOR};
use quicscope::scid::{encode_facebook_scid, FacebookScidFields};
use quicscope::wire::{ConnectionId, Datagram, Direction, LongHeader, PacketType};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn record(src: IpAddr, scid: ConnectionId) -> CaptureRecord {
    let dcid = ConnectionId::new(&[9; 8]).unwrap();
    CaptureRecord {
        datagram: Datagram {
            timestamp: 0.0,
            src_ip: src,
            dst_ip: "44.0.0.1".parse().unwrap(),
            src_port: 443,
            dst_port: 40_000,
            payload: vec![0; 1232],
        },
        direction: Direction::Response,
        packets: vec![LongHeader::new(PacketType::Initial, 1, dcid, scid)],
    }
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut truth = GroundTruth::default();
    let mut population = Vec::new();
    for i in 0..200u32 {
        let ip = IpAddr::from((0xcb00_7100u32 + i).to_be_bytes());
        let f = FacebookScidFields {
            scid_version: 1,
            host_id: rng.gen_range(1..128),
            worker_id: rng.gen(),
            process_id: 0,
        };
        population.push(record(ip, encode_facebook_scid(&f, rng.gen())?));
        truth.labels.insert(ip, "Facebook".into());
    }
    for i in 0..20_000u32 {
        let ip = IpAddr::from((0x0a00_0000u32 + i).to_be_bytes());
        let mut b = [0u8; 8];
        rng.fill_bytes(&mut b);
        population.push(record(ip, ConnectionId::new(&b)?));
        truth.labels.insert(ip, NOT_OPERATOR.into());
    }

    let rules = RuleSet::shipped();
    let cfg = FeatureConfig::default();
    let rule = "SCID off-net (low host ID)";
    let mut predictions = Vec::new();
    for r in &population {
        let f = extract_features(r.datagram.src_ip, [r], [], &cfg);
        predictions.push((r.datagram.src_ip, classify(&f, &rules, rule)?));
    }
    let m = evaluate(predictions.iter().map(|(i, l)| (i, l.as_str())), &truth, "Facebook")?;
    print!("{}", metrics_table([(rule, &m)]).to_tsv());
    println!("expected false-positive rate for random CIDs: {:.6}", 2f64.powi(-11));
    Ok(())
}
