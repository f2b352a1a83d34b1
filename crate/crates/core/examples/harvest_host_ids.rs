//! Harvests host IDs from the VIPs of several simulated clusters, prints the
//! discovery curve and groups VIPs that share L7 load balancers.

use quicscope::probe::{cluster_vips, discovery_curve, fraction_at, harvest_host_ids, ProbeCampaign, SimTransport};
use quicscope::sim::{build_cluster, ClusterConfig, Deployment, RoutingMode, StackProfile};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut clusters = Vec::new();
    let mut next = 1;
    for (i, instances) in [453u32, 120, 64].into_iter().enumerate() {
        let mut c = ClusterConfig::new(format!("pop{i}"), "Facebook");
        c.vip_base = Some(format!("157.240.{i}.1").parse()?);
        c.vip_count = 3;
        c.l7lbs = instances;
        c.routing = RoutingMode::FiveTuple;
        let built = build_cluster(&c, StackProfile::facebook(), 5, next)?;
        next += instances;
        clusters.push(built);
    }
    let deployment = Deployment::from_clusters(5, clusters)?;
    let vips: Vec<_> = deployment.vips().collect();
    let mut transport = SimTransport::new(deployment, 5);

    let campaign = ProbeCampaign {
        handshakes_per_vip: 4000,
        seed: 5,
        ..ProbeCampaign::default()
    };
    let mut harvests = Vec::new();
    for vip in &vips {
        harvests.push(harvest_host_ids(*vip, &campaign, &mut transport, 0.0)?);
    }
    let first = &harvests[0];
    let curve = discovery_curve(first)?;
    println!(
        "{}: {} host IDs; {:.3} of them after 1000 handshakes (balls-into-bins expectation {:.3})",
        first.vip,
        first.unique_ids.len(),
        fraction_at(&curve, 1000),
        1.0 - (1.0 - 1.0 / 453.0f64).powi(1000)
    );

    let report = cluster_vips(&harvests, campaign.jaccard_threshold);
    for (i, c) in report.clusters.iter().enumerate() {
        let names: Vec<String> = c.iter().map(|v| v.to_string()).collect();
        println!("cluster {i}: {}", names.join(" "));
    }
    println!("J(vip0, vip1) = {:.2}, J(vip0, vip3) = {:.2}", report.j(0, 1), report.j(0, 3));
    Ok(())
}
