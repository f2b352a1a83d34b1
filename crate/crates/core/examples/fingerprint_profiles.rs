//! Recovers the stack profile of each simulated operator from its
//! backscatter and matches it against the known profile table.

use std::collections::BTreeMap;

use quicscope::fingerprint::{default_profiles, FingerprintConfig};
use quicscope::ingest::{sanitize, sessionize, CaptureRecord, PrefixTable, ScannerList, DEFAULT_IDLE_GAP};
use quicscope::ingest::{classify_datagram, FilterConfig};
use quicscope::probe::{probe_echo, SimTransport};
use quicscope::report::fingerprint_store;
use quicscope::scid::UniformityConfig;
use quicscope::sim::{simulate_flood, Deployment, DeploymentConfig, DEFAULT_DEPLOYMENT};
use quicscope::store::{SessionStore, StoreCounters};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let cfg = DeploymentConfig::parse(DEFAULT_DEPLOYMENT)?;
    let mut deployment = Deployment::build(&cfg)?;
    let flood = simulate_flood(&mut deployment, &cfg.flood, cfg.seed)?;

    let filter = FilterConfig::default();
    let records: Vec<CaptureRecord> = flood.datagrams.into_iter().filter_map(|d| classify_datagram(d, &filter).ok()).collect();
    let (records, _) = sanitize(records, &ScannerList::default());
    let sessions = sessionize(&records, DEFAULT_IDLE_GAP);
    let prefixes = PrefixTable::parse(include_str!("../config/prefixes.tsv"))?;
    let store = SessionStore::build(records, &prefixes, sessions, StoreCounters::default());

    // Echoing is invisible in backscatter; a few handshakes of our own reveal it.
    let mut transport = SimTransport::new(Deployment::build(&cfg)?, 1);
    let mut pairs = BTreeMap::new();
    for c in &cfg.cluster {
        let vip = Deployment::build(&cfg)?.clusters.iter().find(|k| k.name == c.name).map(|k| k.vips[0]).unwrap();
        let p = probe_echo(vip, 32, &mut transport, "198.51.100.1".parse()?, 0.0, 1)?;
        pairs.entry(c.profile.clone()).or_insert(p);
    }

    let run = fingerprint_store(&store, &default_profiles(), &pairs, &FingerprintConfig::default(), &UniformityConfig::default());
    print!("{}", run.profile_table().to_tsv());
    for (op, why) in &run.skipped {
        println!("skipped {op}: {why}");
    }
    Ok(())
}
