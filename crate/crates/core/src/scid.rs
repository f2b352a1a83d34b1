//! Server connection ID analysis.
//!
//! Random SCIDs spread every nybble value evenly over every position; an
//! operator that encodes routing information (host, worker, process IDs) in
//! its SCIDs skews the positions holding those fields. This module counts
//! positional nybble frequencies, tests them for uniformity, classifies the
//! ID scheme of a population and implements the structured layouts that
//! have been observed in the wild.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};
use thiserror::Error;

use crate::wire::ConnectionId;
use crate::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ScidError {
    #[error("connection IDs of different lengths ({0} and {1}) in one population")]
    MixedLengths(usize, usize),
    #[error("{have} samples, at least {need} required")]
    InsufficientSamples { have: u64, need: u64 },
    #[error("{field} value {value} does not fit {width} bits")]
    FieldOverflow { field: &'static str, value: u64, width: u32 },
    #[error("structured SCID must be {expected} octets, got {got}")]
    BadLength { expected: usize, got: usize },
    #[error("unknown SCID version {0}")]
    UnknownScidVersion(u8),
    #[error("{scids} SCIDs but {dcids} client DCIDs")]
    PairMismatch { scids: usize, dcids: usize },
}

/// Counts of each nybble value (0..16) at each nybble position of a
/// population of equal-length connection IDs. Position 0 is the high nybble
/// of octet 0.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NybbleFrequencyMatrix {
    pub counts: Vec<[u64; 16]>,
    pub total: u64,
}

impl NybbleFrequencyMatrix {
    pub fn new(positions: usize) -> Self {
        NybbleFrequencyMatrix {
            counts: vec![[0; 16]; positions],
            total: 0,
        }
    }

    pub fn positions(&self) -> usize {
        self.counts.len()
    }

    pub fn add(&mut self, cid: &ConnectionId) -> Result<(), ScidError> {
        if cid.len() * 2 != self.positions() {
            return Err(ScidError::MixedLengths(self.positions() / 2, cid.len()));
        }
        for (i, b) in cid.as_bytes().iter().enumerate() {
            self.counts[2 * i][usize::from(b >> 4)] += 1;
            self.counts[2 * i + 1][usize::from(b & 0x0f)] += 1;
        }
        self.total += 1;
        Ok(())
    }

    /// Merges a matrix computed on another shard of the same population.
    pub fn merge(&mut self, other: &NybbleFrequencyMatrix) -> Result<(), ScidError> {
        if other.positions() != self.positions() {
            return Err(ScidError::MixedLengths(self.positions() / 2, other.positions() / 2));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
        self.total += other.total;
        Ok(())
    }

    pub fn relative(&self, position: usize, value: usize) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.counts[position][value] as f64 / self.total as f64
        }
    }
}

/// Positional nybble counts. An empty input yields an empty matrix.
pub fn nybble_frequencies(scids: &[ConnectionId]) -> Result<NybbleFrequencyMatrix, ScidError> {
    let Some(first) = scids.first() else {
        return Ok(NybbleFrequencyMatrix::new(0));
    };
    let mut m = NybbleFrequencyMatrix::new(first.len() * 2);
    for cid in scids {
        m.add(cid)?;
    }
    Ok(m)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UniformityConfig {
    /// Family-wise significance level, split evenly over positions.
    pub alpha: f64,
    pub min_samples: u64,
}

impl Default for UniformityConfig {
    fn default() -> Self {
        UniformityConfig {
            alpha: 0.001,
            min_samples: 500,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Verdict {
    Uniform,
    Skewed,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PositionTest {
    pub position: usize,
    pub chi_square: f64,
    pub p_value: f64,
    pub verdict: Verdict,
}

/// Pearson chi-square test of every position against the uniform
/// distribution over 16 values, Bonferroni-corrected across positions.
pub fn uniformity_test(m: &NybbleFrequencyMatrix, cfg: &UniformityConfig) -> Result<Vec<PositionTest>, ScidError> {
    if m.total < cfg.min_samples || m.total == 0 {
        return Err(ScidError::InsufficientSamples {
            have: m.total,
            need: cfg.min_samples.max(1),
        });
    }
    let dist = ChiSquared::new(15.0).expect("15 degrees of freedom");
    let expected = m.total as f64 / 16.0;
    let threshold = cfg.alpha / m.positions().max(1) as f64;
    Ok(m.counts
        .iter()
        .enumerate()
        .map(|(position, row)| {
            let chi_square: f64 = row
                .iter()
                .map(|&o| {
                    let d = o as f64 - expected;
                    d * d / expected
                })
                .sum();
            let p_value = dist.sf(chi_square);
            PositionTest {
                position,
                chi_square,
                p_value,
                verdict: if p_value < threshold { Verdict::Skewed } else { Verdict::Uniform },
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum ScidScheme {
    Random,
    /// Flagged (non-uniform) nybble positions, never empty.
    Structured(Vec<usize>),
    EchoOfClientDcid,
}

impl ScidScheme {
    pub fn is_structured(&self) -> bool {
        matches!(self, ScidScheme::Structured(_))
    }

    pub fn name(&self) -> &'static str {
        match self {
            ScidScheme::Random => "Random",
            ScidScheme::Structured(_) => "Structured",
            ScidScheme::EchoOfClientDcid => "EchoOfClientDcid",
        }
    }
}

/// Octets of the client DCID that an echoing server copies into its SCID.
pub const ECHO_PREFIX_LEN: usize = 8;

/// Share of (client DCID, SCID) pairs that must agree on the echo prefix.
pub const ECHO_MIN_SHARE: f64 = 0.99;

fn echoes(dcid: &ConnectionId, scid: &ConnectionId) -> bool {
    dcid.len() >= ECHO_PREFIX_LEN
        && scid.len() >= ECHO_PREFIX_LEN
        && dcid.as_bytes()[..ECHO_PREFIX_LEN] == scid.as_bytes()[..ECHO_PREFIX_LEN]
}

/// Share of pairs where the SCID repeats the first octets of the client DCID.
pub fn echo_share(scids: &[ConnectionId], client_dcids: &[ConnectionId]) -> f64 {
    if scids.is_empty() {
        return 0.0;
    }
    let hits = scids.iter().zip(client_dcids).filter(|(s, d)| echoes(d, s)).count();
    hits as f64 / scids.len() as f64
}

/// Classifies a SCID population. With paired client DCIDs (same order as
/// `scids`), an echo of the DCID prefix takes precedence over the
/// statistical test.
pub fn classify_scheme(
    scids: &[ConnectionId],
    client_dcids: Option<&[ConnectionId]>,
    cfg: &UniformityConfig,
) -> Result<ScidScheme, ScidError> {
    if let Some(dcids) = client_dcids {
        if dcids.len() != scids.len() {
            return Err(ScidError::PairMismatch {
                scids: scids.len(),
                dcids: dcids.len(),
            });
        }
        if !scids.is_empty() && echo_share(scids, dcids) >= ECHO_MIN_SHARE {
            return Ok(ScidScheme::EchoOfClientDcid);
        }
    }
    let m = nybble_frequencies(scids)?;
    let flagged: Vec<usize> = uniformity_test(&m, cfg)?
        .iter()
        .filter(|t| t.verdict == Verdict::Skewed)
        .map(|t| t.position)
        .collect();
    Ok(if flagged.is_empty() {
        ScidScheme::Random
    } else {
        ScidScheme::Structured(flagged)
    })
}

/// Fields of the 8-octet structured SCID used by Facebook's QUIC stack.
///
/// Bit indices count from the most significant bit of octet 0:
///
/// | version | host ID | worker ID | process ID | random       |
/// |---------|---------|-----------|------------|--------------|
/// | v1: 0-1 | 2-17    | 18-25     | 26         | 27-63        |
/// | v2: 0-1 | 8-31    | 32-39     | 40         | 2-7, 41-63   |
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FacebookScidFields {
    pub scid_version: u8,
    pub host_id: u32,
    pub worker_id: u8,
    pub process_id: u8,
}

pub const FACEBOOK_SCID_LEN: usize = 8;

#[derive(Debug, Clone, Copy)]
struct Layout {
    host: (u32, u32),
    worker: (u32, u32),
    process: (u32, u32),
    /// Random runs as (first bit, width), in bit order.
    random: &'static [(u32, u32)],
}

const V1: Layout = Layout {
    host: (2, 16),
    worker: (18, 8),
    process: (26, 1),
    random: &[(27, 37)],
};

const V2: Layout = Layout {
    host: (8, 24),
    worker: (32, 8),
    process: (40, 1),
    random: &[(2, 6), (41, 23)],
};

fn layout(version: u8) -> Result<Layout, ScidError> {
    match version {
        1 => Ok(V1),
        2 => Ok(V2),
        v => Err(ScidError::UnknownScidVersion(v)),
    }
}

impl Layout {
    fn random_width(&self) -> u32 {
        self.random.iter().map(|r| r.1).sum()
    }
}

fn put(word: &mut u64, (start, width): (u32, u32), value: u64) {
    *word |= value << (64 - start - width);
}

fn get(word: u64, (start, width): (u32, u32)) -> u64 {
    (word >> (64 - start - width)) & ((1u64 << width) - 1)
}

fn check(field: &'static str, value: u64, width: u32) -> Result<u64, ScidError> {
    if value >> width != 0 {
        Err(ScidError::FieldOverflow { field, value, width })
    } else {
        Ok(value)
    }
}

impl FacebookScidFields {
    pub fn host_id_width(&self) -> Option<u32> {
        layout(self.scid_version).ok().map(|l| l.host.1)
    }
}

/// Packs `fields` into an 8-octet SCID. The layout's random bits take the
/// low-order bits of `random_bits`, most significant first.
pub fn encode_facebook_scid(fields: &FacebookScidFields, random_bits: u64) -> Result<ConnectionId, ScidError> {
    let l = layout(fields.scid_version)?;
    let mut word = 0u64;
    put(&mut word, (0, 2), u64::from(fields.scid_version));
    put(&mut word, l.host, check("host_id", u64::from(fields.host_id), l.host.1)?);
    put(&mut word, l.worker, check("worker_id", u64::from(fields.worker_id), l.worker.1)?);
    put(&mut word, l.process, check("process_id", u64::from(fields.process_id), l.process.1)?);
    let mut remaining = l.random_width();
    for &run in l.random {
        remaining -= run.1;
        put(&mut word, run, (random_bits >> remaining) & ((1u64 << run.1) - 1));
    }
    Ok(ConnectionId::new(&word.to_be_bytes()).expect("8 octets"))
}

pub fn decode_facebook_scid(scid: &ConnectionId) -> Result<FacebookScidFields, ScidError> {
    let bytes: [u8; FACEBOOK_SCID_LEN] = scid.as_bytes().try_into().map_err(|_| ScidError::BadLength {
        expected: FACEBOOK_SCID_LEN,
        got: scid.len(),
    })?;
    let word = u64::from_be_bytes(bytes);
    let version = get(word, (0, 2)) as u8;
    let l = layout(version)?;
    Ok(FacebookScidFields {
        scid_version: version,
        host_id: get(word, l.host) as u32,
        worker_id: get(word, l.worker) as u8,
        process_id: get(word, l.process) as u8,
    })
}

/// Length and first octet of Cloudflare's SCIDs.
pub const CLOUDFLARE_SCID_LEN: usize = 20;
pub const CLOUDFLARE_FIRST_OCTET: u8 = 0x01;

/// True iff the population is non-empty and every SCID is 20 octets long
/// starting with 0x01.
pub fn detect_cloudflare_signature(scids: &[ConnectionId]) -> bool {
    !scids.is_empty()
        && scids
            .iter()
            .all(|c| c.len() == CLOUDFLARE_SCID_LEN && c.as_bytes()[0] == CLOUDFLARE_FIRST_OCTET)
}

/// Unique SCIDs per (operator, SCID length).
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScidLengthStats {
    pub by_operator: BTreeMap<String, BTreeMap<usize, u64>>,
}

pub fn scid_length_stats<'a>(scids: impl IntoIterator<Item = (&'a str, &'a ConnectionId)>) -> ScidLengthStats {
    let mut unique: BTreeMap<&str, BTreeSet<ConnectionId>> = BTreeMap::new();
    for (op, cid) in scids {
        unique.entry(op).or_default().insert(*cid);
    }
    let mut stats = ScidLengthStats::default();
    for (op, set) in unique {
        let row = stats.by_operator.entry(op.to_string()).or_default();
        for cid in set {
            *row.entry(cid.len()).or_default() += 1;
        }
    }
    stats
}

/// Parses hex-encoded connection IDs, one per line. Blank lines and `#`
/// comments are skipped.
pub fn parse_scid_list(text: &str) -> Result<Vec<ConnectionId>, Error> {
    text.lines()
        .enumerate()
        .map(|(n, l)| (n, l.split('#').next().unwrap_or("").trim()))
        .filter(|(_, l)| !l.is_empty())
        .map(|(n, l)| ConnectionId::from_hex(l).map_err(|e| Error::parse("SCID list", n + 1, e.to_string())))
        .collect()
}

/// Parses `client_dcid<TAB>server_scid` pairs, both hex.
pub fn parse_pair_list(text: &str) -> Result<Vec<(ConnectionId, ConnectionId)>, Error> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (d, s) = line
            .split_once(char::is_whitespace)
            .ok_or_else(|| Error::parse("pair list", n + 1, "expected client_dcid<TAB>server_scid"))?;
        let d = ConnectionId::from_hex(d).map_err(|e| Error::parse("pair list", n + 1, e.to_string()))?;
        let s = ConnectionId::from_hex(s.trim()).map_err(|e| Error::parse("pair list", n + 1, e.to_string()))?;
        out.push((d, s));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, RngCore, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    // Bit-by-bit packer over the layout index table; shares nothing with the
    // word-shifting encoder above.
    fn oracle_pack(version: u8, host: u32, worker: u8, process: u8) -> [u8; 8] {
        let mut out = [0u8; 8];
        let mut set = |bit: usize, on: bool| {
            if on {
                out[bit / 8] |= 1 << (7 - bit % 8);
            }
        };
        let (host_bits, worker_bits, process_bit): (Vec<usize>, Vec<usize>, usize) = match version {
            1 => ((2..=17).collect(), (18..=25).collect(), 26),
            _ => ((8..=31).collect(), (32..=39).collect(), 40),
        };
        set(0, version & 0b10 != 0);
        set(1, version & 0b01 != 0);
        let hw = host_bits.len();
        for (i, &b) in host_bits.iter().enumerate() {
            set(b, (host >> (hw - 1 - i)) & 1 == 1);
        }
        for (i, &b) in worker_bits.iter().enumerate() {
            set(b, (worker >> (7 - i)) & 1 == 1);
        }
        set(process_bit, process == 1);
        out
    }

    fn fields(v: u8, host: u32, worker: u8, process: u8) -> FacebookScidFields {
        FacebookScidFields {
            scid_version: v,
            host_id: host,
            worker_id: worker,
            process_id: process,
        }
    }

    #[test]
    fn worked_vector() {
        let expected = [0x40, 0x01, 0x40, 0xE0, 0, 0, 0, 0];
        assert_eq!(oracle_pack(1, 5, 3, 1), expected);
        let cid = encode_facebook_scid(&fields(1, 5, 3, 1), 0).unwrap();
        assert_eq!(cid.as_bytes(), &expected);
        assert_eq!(decode_facebook_scid(&cid).unwrap(), fields(1, 5, 3, 1));
    }

    #[test]
    fn zero_scid_is_unknown_version() {
        let zero = ConnectionId::new(&[0; 8]).unwrap();
        assert_eq!(decode_facebook_scid(&zero), Err(ScidError::UnknownScidVersion(0)));
        assert_eq!(encode_facebook_scid(&fields(0, 0, 0, 0), 0), Err(ScidError::UnknownScidVersion(0)));
        let v3 = ConnectionId::new(&[0xc0, 0, 0, 0, 0, 0, 0, 0]).unwrap();
        assert_eq!(decode_facebook_scid(&v3), Err(ScidError::UnknownScidVersion(3)));
    }

    #[test]
    fn overflow_and_length() {
        assert!(matches!(
            encode_facebook_scid(&fields(1, 70_000, 0, 0), 0),
            Err(ScidError::FieldOverflow { field: "host_id", .. })
        ));
        assert!(matches!(
            encode_facebook_scid(&fields(1, 1, 0, 2), 0),
            Err(ScidError::FieldOverflow { field: "process_id", .. })
        ));
        assert!(encode_facebook_scid(&fields(2, 70_000, 0, 0), 0).is_ok());
        assert!(matches!(
            encode_facebook_scid(&fields(2, 1 << 24, 0, 0), 0),
            Err(ScidError::FieldOverflow { .. })
        ));
        let long = ConnectionId::new(&[0x40; 20]).unwrap();
        assert_eq!(decode_facebook_scid(&long), Err(ScidError::BadLength { expected: 8, got: 20 }));
    }

    #[test]
    fn random_bits_land_outside_fields() {
        let f = fields(2, 0xabcdef, 0x12, 1);
        let all_ones = encode_facebook_scid(&f, u64::MAX).unwrap();
        assert_eq!(decode_facebook_scid(&all_ones).unwrap(), f);
        let zero = encode_facebook_scid(&f, 0).unwrap();
        assert_eq!(zero.as_bytes(), &oracle_pack(2, 0xabcdef, 0x12, 1));
        // v2 random bits are 2-7 and 41-63: 6 + 23 = 29 ones.
        let diff: u32 = all_ones.as_bytes().iter().zip(zero.as_bytes()).map(|(a, b)| (a ^ b).count_ones()).sum();
        assert_eq!(diff, 29);
        let v1 = fields(1, 0xffff, 0xff, 1);
        let diff: u32 = encode_facebook_scid(&v1, u64::MAX)
            .unwrap()
            .as_bytes()
            .iter()
            .zip(encode_facebook_scid(&v1, 0).unwrap().as_bytes())
            .map(|(a, b)| (a ^ b).count_ones())
            .sum();
        assert_eq!(diff, 37);
    }

    proptest! {
        #[test]
        fn codec_inverse(v in 1u8..=2, host in any::<u32>(), worker in any::<u8>(), process in 0u8..2, r in any::<u64>()) {
            let host = if v == 1 { host & 0xffff } else { host & 0xff_ffff };
            let f = fields(v, host, worker, process);
            let cid = encode_facebook_scid(&f, r).unwrap();
            prop_assert_eq!(decode_facebook_scid(&cid).unwrap(), f);
            let masked = encode_facebook_scid(&f, 0).unwrap();
            prop_assert_eq!(masked.as_bytes(), &oracle_pack(v, host, worker, process)[..]);
        }

        #[test]
        fn row_sums_equal_total(ids in proptest::collection::vec(any::<[u8; 8]>(), 0..50)) {
            let cids: Vec<_> = ids.iter().map(|b| ConnectionId::new(b).unwrap()).collect();
            let m = nybble_frequencies(&cids).unwrap();
            prop_assert_eq!(m.total as usize, cids.len());
            for row in &m.counts {
                prop_assert_eq!(row.iter().sum::<u64>(), m.total);
            }
        }

        #[test]
        fn cloudflare_signature_monotone(n in 1usize..20, bad_len in 1usize..20) {
            let good: Vec<_> = (0..n).map(|i| {
                let mut b = [i as u8; 20];
                b[0] = 0x01;
                ConnectionId::new(&b).unwrap()
            }).collect();
            prop_assert!(detect_cloudflare_signature(&good));
            let mut with_bad = good.clone();
            with_bad.push(ConnectionId::new(&vec![1u8; bad_len]).unwrap());
            prop_assert!(!detect_cloudflare_signature(&with_bad));
        }
    }

    #[test]
    fn exhaustive_position_zero() {
        let cids: Vec<_> = (0u8..16).map(|v| ConnectionId::new(&[v << 4 | v, 0x5a]).unwrap()).collect();
        let m = nybble_frequencies(&cids).unwrap();
        assert_eq!(m.counts[0], [1; 16]);
        assert_eq!(m.counts[1], [1; 16]);
        assert_eq!(m.counts[2][5], 16);
        assert_eq!(m.total, 16);
    }

    #[test]
    fn empty_and_mixed() {
        let m = nybble_frequencies(&[]).unwrap();
        assert_eq!((m.positions(), m.total), (0, 0));
        let mixed = [ConnectionId::new(&[1; 8]).unwrap(), ConnectionId::new(&[1; 20]).unwrap()];
        assert_eq!(nybble_frequencies(&mixed), Err(ScidError::MixedLengths(8, 20)));
    }

    #[test]
    fn merge_matches_single_pass() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cids: Vec<_> = (0..300).map(|_| ConnectionId::new(&rng.gen::<[u8; 8]>()).unwrap()).collect();
        let whole = nybble_frequencies(&cids).unwrap();
        let mut a = nybble_frequencies(&cids[..120]).unwrap();
        a.merge(&nybble_frequencies(&cids[120..]).unwrap()).unwrap();
        assert_eq!(a, whole);
    }

    fn uniform_population(rng: &mut ChaCha8Rng, n: usize) -> Vec<ConnectionId> {
        (0..n)
            .map(|_| {
                let mut b = [0u8; 8];
                rng.fill_bytes(&mut b);
                ConnectionId::new(&b).unwrap()
            })
            .collect()
    }

    fn facebook_population(rng: &mut ChaCha8Rng, n: usize) -> Vec<ConnectionId> {
        (0..n)
            .map(|_| encode_facebook_scid(&fields(1, rng.gen_range(0..2000), rng.gen_range(0..32), 0), rng.gen()).unwrap())
            .collect()
    }

    #[test]
    fn uniform_population_passes() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let m = nybble_frequencies(&uniform_population(&mut rng, 100_000)).unwrap();
        let tests = uniformity_test(&m, &UniformityConfig::default()).unwrap();
        assert_eq!(tests.len(), 16);
        assert!(tests.iter().all(|t| t.verdict == Verdict::Uniform), "{tests:?}");
    }

    #[test]
    fn facebook_population_skewed_at_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let cids = facebook_population(&mut rng, 10_000);
        let m = nybble_frequencies(&cids).unwrap();
        // Version bits "01" confine the first nybble to 0x4..=0x7.
        assert_eq!(m.counts[0][4..8].iter().sum::<u64>(), m.total);
        let tests = uniformity_test(&m, &UniformityConfig::default()).unwrap();
        assert_eq!(tests[0].verdict, Verdict::Skewed);
        match classify_scheme(&cids, None, &UniformityConfig::default()).unwrap() {
            ScidScheme::Structured(pos) => assert!(pos.contains(&0)),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn insufficient_samples() {
        let mut rng = ChaCha8Rng::seed_from_u64(44);
        let m = nybble_frequencies(&uniform_population(&mut rng, 100)).unwrap();
        assert_eq!(
            uniformity_test(&m, &UniformityConfig::default()),
            Err(ScidError::InsufficientSamples { have: 100, need: 500 })
        );
    }

    #[test]
    fn echo_and_random_schemes() {
        let mut rng = ChaCha8Rng::seed_from_u64(45);
        let dcids: Vec<_> = (0..600)
            .map(|_| {
                let mut b = vec![0u8; rng.gen_range(8..=20)];
                rng.fill_bytes(&mut b);
                ConnectionId::new(&b).unwrap()
            })
            .collect();
        let echoed: Vec<_> = dcids.iter().map(|d| ConnectionId::new(&d.as_bytes()[..8]).unwrap()).collect();
        let cfg = UniformityConfig::default();
        assert_eq!(classify_scheme(&echoed, Some(&dcids), &cfg).unwrap(), ScidScheme::EchoOfClientDcid);
        assert_eq!(classify_scheme(&echoed, None, &cfg).unwrap(), ScidScheme::Random);
        let random = uniform_population(&mut rng, 600);
        assert_eq!(classify_scheme(&random, Some(&dcids), &cfg).unwrap(), ScidScheme::Random);
        assert!(matches!(
            classify_scheme(&random, Some(&dcids[..5]), &cfg),
            Err(ScidError::PairMismatch { .. })
        ));
    }

    #[test]
    fn cloudflare_signature() {
        let mut good: Vec<_> = (0..170)
            .map(|i| {
                let mut b = [i as u8; 20];
                b[0] = 1;
                ConnectionId::new(&b).unwrap()
            })
            .collect();
        assert!(detect_cloudflare_signature(&good));
        assert!(!detect_cloudflare_signature(&[]));
        let mut two = [9u8; 20];
        two[0] = 2;
        assert!(!detect_cloudflare_signature(&[ConnectionId::new(&two).unwrap()]));
        good.push(ConnectionId::new(&[1; 8]).unwrap());
        assert!(!detect_cloudflare_signature(&good));
    }

    #[test]
    fn length_stats_unique() {
        let mut rng = ChaCha8Rng::seed_from_u64(46);
        let fb = facebook_population(&mut rng, 63_615);
        let unique: BTreeSet<_> = fb.iter().collect();
        let stats = scid_length_stats(fb.iter().map(|c| ("Facebook", c)));
        assert_eq!(stats.by_operator["Facebook"][&8], unique.len() as u64);

        let a = ConnectionId::new(&[1; 8]).unwrap();
        let b = ConnectionId::new(&[1; 20]).unwrap();
        let stats = scid_length_stats([("X", &a), ("X", &a), ("X", &b)]);
        assert_eq!(stats.by_operator["X"], BTreeMap::from([(8, 1), (20, 1)]));
    }

    #[test]
    fn list_parsing() {
        let l = parse_scid_list("# header\n0102\n\n  aabbccdd  \n").unwrap();
        assert_eq!(l.len(), 2);
        assert!(parse_scid_list("xyz").is_err());
        let p = parse_pair_list("0102030405060708\t0102030405060708\n").unwrap();
        assert_eq!(p.len(), 1);
        assert!(parse_pair_list("0102").is_err());
    }
}
