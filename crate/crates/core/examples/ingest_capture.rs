//! Writes simulated backscatter to a pcap, then ingests it: direction and
//! plausibility filtering, scanner sanitization, operator mapping and
//! sessionization.

use quicscope::capture::{write_capture, LinkType};
use quicscope::ingest::{ingest_file, sanitize, sessionize, FilterConfig, PrefixTable, ScannerList, DEFAULT_IDLE_GAP};
use quicscope::sim::{simulate_flood, Deployment, DeploymentConfig, DEFAULT_DEPLOYMENT};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut cfg = DeploymentConfig::parse(DEFAULT_DEPLOYMENT)?;
    cfg.flood.sources = 300;
    let mut deployment = Deployment::build(&cfg)?;
    let flood = simulate_flood(&mut deployment, &cfg.flood, cfg.seed)?;

    let dir = std::env::temp_dir().join("quicscope-ingest-example");
    std::fs::create_dir_all(&dir)?;
    let pcap = dir.join("backscatter.pcap");
    write_capture(&pcap, LinkType::Ethernet, &flood.datagrams)?;

    let (records, counters) = ingest_file(&pcap, &FilterConfig::default())?;
    println!("frames {} -> records {} (skipped {})", counters.frames, counters.records, counters.skipped());

    let (records, sc) = sanitize(records, &ScannerList::default());
    println!("sanitization removed {:.1}%", 100.0 * sc.removed_fraction());

    let prefixes = PrefixTable::parse(include_str!("../config/prefixes.tsv"))?;
    let sessions = sessionize(&records, DEFAULT_IDLE_GAP);
    println!("{} sessions", sessions.len());
    for s in sessions.iter().take(3) {
        let offsets: Vec<String> = s.timeline.iter().map(|e| format!("{:.2}", e.offset)).collect();
        println!(
            "  {} ({}) scid {} offsets [{}]",
            s.key.src_ip,
            prefixes.operator_of(s.key.src_ip),
            s.key.scid,
            offsets.join(", ")
        );
    }
    Ok(())
}
