//! Joins analysis outputs into summary tables.
//!
//! The summaries follow the shape of the usual deployment overview: one
//! profile row per operator (RTO, backoff, resends, coalescence, CID
//! scheme), version usage per role, and datagram composition per operator.

use std::collections::BTreeMap;
use std::net::IpAddr;
use std::path::Path;

use ipnet::IpNet;
use serde_json::json;

use crate::fingerprint::{
    length_histogram, match_profile, observe_profile, packet_type_stats, version_tally, FingerprintConfig, FingerprintProfile,
};
use crate::ingest::{PrefixMap, UNKNOWN_OPERATOR};
use crate::scid::{
    classify_scheme, scid_length_stats, NybbleFrequencyMatrix, PositionTest, ScidError, ScidLengthStats, ScidScheme,
    UniformityConfig,
};
use crate::store::SessionStore;
use crate::table::{fixed, Table};
use crate::wire::{ConnectionId, VersionRegistry};
use crate::Error;

/// Datagram lengths kept per operator in the length table.
pub const TOP_LENGTHS: usize = 10;

pub fn nybble_table(m: &NybbleFrequencyMatrix) -> Table {
    let mut t = Table::new(["position", "value", "count", "rel_freq"]);
    for (pos, row) in m.counts.iter().enumerate() {
        for (v, n) in row.iter().enumerate() {
            t.push(vec![json!(pos), json!(format!("{v:x}")), json!(n), fixed(m.relative(pos, v), 6)]);
        }
    }
    t
}

pub fn uniformity_table(tests: &[PositionTest]) -> Table {
    let mut t = Table::new(["position", "chi_square", "p_value", "verdict"]);
    for r in tests {
        t.push(vec![
            json!(r.position),
            fixed(r.chi_square, 4),
            json!(format!("{:.6e}", r.p_value)),
            json!(format!("{:?}", r.verdict)),
        ]);
    }
    t
}

pub fn scid_length_table(stats: &ScidLengthStats) -> Table {
    let mut t = Table::new(["operator", "scid_length", "unique_scids", "share"]);
    for (op, m) in &stats.by_operator {
        let total: u64 = m.values().sum();
        for (len, n) in m {
            t.push(vec![json!(op), json!(len), json!(n), fixed(*n as f64 / total as f64, 6)]);
        }
    }
    t
}

/// Scheme of an operator's SCIDs. Actively collected (client DCID, SCID)
/// pairs, when present, decide echoing; otherwise the passive SCIDs go
/// through the uniformity test.
pub fn operator_scheme(
    scids: &[ConnectionId],
    pairs: Option<&[(ConnectionId, ConnectionId)]>,
    cfg: &UniformityConfig,
) -> Result<ScidScheme, ScidError> {
    if let Some(pairs) = pairs.filter(|p| !p.is_empty()) {
        let (dcids, echoed): (Vec<_>, Vec<_>) = pairs.iter().copied().unzip();
        if crate::scid::echo_share(&echoed, &dcids) >= crate::scid::ECHO_MIN_SHARE {
            return Ok(ScidScheme::EchoOfClientDcid);
        }
    }
    classify_scheme(scids, None, cfg)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObservedProfile {
    pub profile: FingerprintProfile,
    pub scheme: ScidScheme,
    pub matched: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct FingerprintRun {
    pub profiles: Vec<ObservedProfile>,
    /// Operators without a profile, with the reason.
    pub skipped: Vec<(String, String)>,
}

impl FingerprintRun {
    pub fn profile_table(&self) -> Table {
        let mut t = FingerprintProfile::table_header();
        t.columns.push("scid_scheme".into());
        t.columns.push("matched_profile".into());
        for p in &self.profiles {
            let mut row = p.profile.table_row();
            row.push(json!(p.scheme.name()));
            row.push(json!(p.matched));
            t.push(row);
        }
        t
    }

    pub fn skipped_table(&self) -> Table {
        let mut t = Table::new(["operator", "reason"]);
        for (op, why) in &self.skipped {
            t.push(vec![json!(op), json!(why)]);
        }
        t
    }
}

/// Observes and matches a profile for every known operator in the store.
/// Sources outside the prefix table are not fingerprinted.
pub fn fingerprint_store(
    store: &SessionStore,
    known: &[FingerprintProfile],
    pairs: &BTreeMap<String, Vec<(ConnectionId, ConnectionId)>>,
    cfg: &FingerprintConfig,
    uniformity: &UniformityConfig,
) -> FingerprintRun {
    let stats = packet_type_stats(store.responses());
    let scids = store.scids_by_operator();
    let mut run = FingerprintRun::default();
    for (op, ids) in &scids {
        if *op == UNKNOWN_OPERATOR {
            continue;
        }
        let scheme = match operator_scheme(ids, pairs.get(*op).map(Vec::as_slice), uniformity) {
            Ok(s) => s,
            Err(e) => {
                run.skipped.push((op.to_string(), e.to_string()));
                continue;
            }
        };
        match observe_profile(op, store.sessions_of(op), &stats, &scheme, cfg) {
            Ok(profile) => {
                let matched = match_profile(&profile, known, cfg.rto_tolerance);
                run.profiles.push(ObservedProfile { profile, scheme, matched });
            }
            Err(e) => run.skipped.push((op.to_string(), e.to_string())),
        }
    }
    run
}

/// IP prefix → country code, supplied externally.
#[derive(Debug, Clone, Default)]
pub struct CountryMap {
    map: PrefixMap<String>,
}

impl CountryMap {
    /// Parses `prefix<TAB>country` lines; a bare address counts as a host
    /// prefix.
    pub fn parse(text: &str) -> Result<Self, Error> {
        let mut map = PrefixMap::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (net, cc) = line
                .split_once('\t')
                .ok_or_else(|| Error::parse("country map", n + 1, "expected prefix<TAB>country"))?;
            let net: IpNet = match net.trim().parse::<IpNet>() {
                Ok(net) => net,
                Err(_) => net
                    .trim()
                    .parse::<IpAddr>()
                    .map(IpNet::from)
                    .map_err(|e| Error::parse("country map", n + 1, e.to_string()))?,
            };
            map.insert(net, cc.trim().to_string());
        }
        Ok(CountryMap { map })
    }

    pub fn load(path: &Path) -> Result<Self, Error> {
        Self::parse(&crate::read_text(path)?)
    }

    pub fn country(&self, ip: IpAddr) -> Option<&str> {
        self.map.lookup(ip).map(String::as_str)
    }
}

/// Responding source addresses per operator and country.
pub fn sources_by_country(store: &SessionStore, countries: &CountryMap) -> Table {
    let mut counts: BTreeMap<(&str, &str), u64> = BTreeMap::new();
    for (ip, op) in store.source_operators() {
        let cc = countries.country(ip).unwrap_or("unknown");
        *counts.entry((op, cc)).or_default() += 1;
    }
    let mut t = Table::new(["operator", "country", "sources"]);
    for ((op, cc), n) in counts {
        t.push(vec![json!(op), json!(cc), json!(n)]);
    }
    t
}

/// All summary tables, keyed by output file stem.
pub fn build_report(
    store: &SessionStore,
    known: &[FingerprintProfile],
    pairs: &BTreeMap<String, Vec<(ConnectionId, ConnectionId)>>,
    registry: &VersionRegistry,
    cfg: &FingerprintConfig,
    uniformity: &UniformityConfig,
) -> BTreeMap<&'static str, Table> {
    let run = fingerprint_store(store, known, pairs, cfg, uniformity);
    let scids: Vec<(&str, &ConnectionId)> = store
        .responses()
        .flat_map(|(op, r)| r.packets.iter().map(move |p| (op, &p.scid)))
        .collect();
    let mut out = BTreeMap::new();
    out.insert("profiles", run.profile_table());
    out.insert("profiles_skipped", run.skipped_table());
    out.insert("versions", version_tally(&store.sessions, registry).to_table());
    out.insert("packet_types", packet_type_stats(store.responses()).to_table());
    out.insert("packet_lengths", length_histogram(store.responses()).to_table(TOP_LENGTHS));
    out.insert("scid_lengths", scid_length_table(&scid_length_stats(scids)));
    out
}
