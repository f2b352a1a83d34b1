//! Floods the bundled deployment with spoofed Initials and summarises the
//! backscatter that reaches the telescope.

use std::collections::BTreeMap;

use quicscope::sim::{simulate_flood, Deployment, DeploymentConfig, DEFAULT_DEPLOYMENT};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let cfg = DeploymentConfig::parse(DEFAULT_DEPLOYMENT)?;
    let mut deployment = Deployment::build(&cfg)?;
    let out = simulate_flood(&mut deployment, &cfg.flood, cfg.seed)?;
    println!("{} served sessions, {} backscatter datagrams", out.sessions.len(), out.datagrams.len());

    let mut per_cluster: BTreeMap<&str, (usize, u32)> = BTreeMap::new();
    for s in &out.sessions {
        let ci = deployment.cluster_of(s.vip)?;
        let e = per_cluster.entry(deployment.clusters[ci].name.as_str()).or_default();
        e.0 += 1;
        e.1 += s.planned_resends;
    }
    for (name, (n, resends)) in per_cluster {
        println!("{name:<16} {n:>5} sessions, {:.2} resends per session", resends as f64 / n as f64);
    }
    if let Some(s) = out.sessions.first() {
        println!("first session: {s:?}");
    }
    Ok(())
}
