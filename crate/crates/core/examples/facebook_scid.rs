//! Encodes and decodes structured 8-octet server CIDs.

use quicscope::scid::{decode_facebook_scid, encode_facebook_scid, FacebookScidFields};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let fields = FacebookScidFields {
        scid_version: 1,
        host_id: 5,
        worker_id: 3,
        process_id: 1,
    };
    let cid = encode_facebook_scid(&fields, 0)?;
    println!("v1 host 5 worker 3 process 1 -> {cid}");

    let noisy = encode_facebook_scid(&fields, 0x1234_5678_9abc)?;
    println!("same fields, random bits set -> {noisy} -> {:?}", decode_facebook_scid(&noisy)?);

    let v2 = FacebookScidFields {
        scid_version: 2,
        host_id: 0x00ab_cdef,
        worker_id: 200,
        process_id: 0,
    };
    let cid = encode_facebook_scid(&v2, 42)?;
    println!("v2 {cid} -> {:?}", decode_facebook_scid(&cid)?);

    let too_big = FacebookScidFields { host_id: 70_000, ..fields };
    println!("host 70000 in v1: {}", encode_facebook_scid(&too_big, 0).unwrap_err());
    Ok(())
}
