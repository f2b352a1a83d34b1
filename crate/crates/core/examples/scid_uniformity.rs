//! Nybble frequency statistics: random CIDs pass the uniformity test, while
//! structured CIDs are flagged at their fixed positions.

use quicscope::report::nybble_table;
use quicscope::scid::{classify_scheme, encode_facebook_scid, nybble_frequencies, FacebookScidFields, UniformityConfig};
use quicscope::wire::ConnectionId;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let cfg = UniformityConfig::default();

    let random: Vec<ConnectionId> = (0..20_000)
        .map(|_| {
            let mut b = [0u8; 8];
            rng.fill_bytes(&mut b);
            ConnectionId::new(&b).unwrap()
        })
        .collect();
    println!("random population: {:?}", classify_scheme(&random, None, &cfg)?);

    let structured: Vec<ConnectionId> = (0..20_000)
        .map(|_| {
            let f = FacebookScidFields {
                scid_version: 1,
                host_id: rng.gen_range(1000..1064),
                worker_id: rng.gen_range(0..16),
                process_id: 0,
            };
            encode_facebook_scid(&f, rng.gen()).unwrap()
        })
        .collect();
    println!("structured population: {:?}", classify_scheme(&structured, None, &cfg)?);

    let m = nybble_frequencies(&structured)?;
    let t = nybble_table(&m);
    println!("first rows of the nybble table:");
    print!("{}", t.to_tsv().lines().take(6).collect::<Vec<_>>().join("\n"));
    println!();
    Ok(())
}
