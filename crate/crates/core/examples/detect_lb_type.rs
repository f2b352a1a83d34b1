//! Distinguishes CID-aware from 5-tuple load balancing by holding one
//! connection open and retrying its server CID from new ports.

use quicscope::probe::{detect_lb_type, HostIdCodec, LbProbeConfig, SimTransport};
use quicscope::sim::{Deployment, DeploymentConfig, DEFAULT_DEPLOYMENT};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let cfg = DeploymentConfig::parse(DEFAULT_DEPLOYMENT)?;
    let mut transport = SimTransport::new(Deployment::build(&cfg)?, 9);
    let client = "198.51.100.7".parse()?;
    for vip in ["142.250.0.1", "157.240.0.1"] {
        let r = detect_lb_type(vip.parse()?, &mut transport, &LbProbeConfig::default(), HostIdCodec::Facebook, client, 0.0, 9)?;
        println!("{vip}: {:?} after {} follow-ups (held host {:?}, follow-up host {:?})", r.verdict, r.follow_ups, r.held_host_id, r.follow_up_host_id);
    }
    Ok(())
}
