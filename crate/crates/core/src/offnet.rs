//! Off-net server detection.
//!
//! Hypergiants host servers inside other networks. Those servers keep their
//! operator's stack behaviour, so per-source features of the backscatter
//! (SCID layout, coalescence, retransmission timing, datagram lengths) can
//! attribute an address outside the operator's AS to the operator. Rules are
//! explicit predicates over those features and are scored against labelled
//! addresses.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::net::IpAddr;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::fingerprint::{estimate_rto, FingerprintConfig, LengthKey, RtoEstimate};
use crate::ingest::{CaptureRecord, Session};
use crate::scid::{classify_scheme, decode_facebook_scid, detect_cloudflare_signature, FacebookScidFields, UniformityConfig};
use crate::table::{fixed, Table};
use crate::wire::{ConnectionId, Direction, PacketType};
use crate::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ClassifyError {
    #[error("unknown rule {0:?}")]
    UnknownRule(String),
    #[error("no ground-truth label for {0}")]
    MissingLabel(IpAddr),
}

pub const NOT_OPERATOR: &str = "NotOperator";

/// Width of the high-order host-ID prefix that must be zero for an off-net.
pub const LOW_HOST_ID_BITS: u32 = 9;

/// True iff the 9 most significant bits of the 16-bit v1 host ID are zero,
/// i.e. `host_id < 128`.
pub fn low_host_id_predicate(fields: &FacebookScidFields) -> bool {
    fields.host_id >> (16 - LOW_HOST_ID_BITS) == 0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceFeatures {
    pub source: IpAddr,
    pub scid_count: usize,
    pub scid_structured: bool,
    /// Operator whose SCID layout every SCID of the source follows.
    pub scid_scheme_match: Option<String>,
    pub coalescence: bool,
    pub rto_signature: Option<RtoEstimate>,
    pub length_signature: BTreeSet<LengthKey>,
    /// Present when at least one SCID decodes as a version-1 Facebook SCID;
    /// true when every SCID does and carries a low host ID.
    pub low_host_id: Option<bool>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeatureConfig {
    /// Sessions with two or more resends needed for an RTO signature.
    pub min_rto_sessions: usize,
    pub fingerprint: FingerprintConfig,
    pub uniformity: UniformityConfig,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig {
            min_rto_sessions: 1,
            fingerprint: FingerprintConfig::default(),
            uniformity: UniformityConfig::default(),
        }
    }
}

fn facebook_v1(scid: &ConnectionId) -> Option<FacebookScidFields> {
    decode_facebook_scid(scid).ok().filter(|f| f.scid_version == 1)
}

/// Assembles the features of one source from its response records and
/// sessions. Features without enough data are left absent.
pub fn extract_features<'a>(
    source: IpAddr,
    records: impl IntoIterator<Item = &'a CaptureRecord>,
    sessions: impl IntoIterator<Item = &'a Session>,
    cfg: &FeatureConfig,
) -> SourceFeatures {
    let mut scids = BTreeSet::new();
    let mut datagrams = 0usize;
    let mut coalesced = 0usize;
    let mut length_signature = BTreeSet::new();
    for r in records {
        if r.packets.is_empty() {
            continue;
        }
        datagrams += 1;
        if r.is_coalesced() {
            coalesced += 1;
        }
        length_signature.insert((r.type_tuple(), r.datagram.payload.len()));
        for p in &r.packets {
            scids.insert(p.scid);
        }
    }
    let scids: Vec<ConnectionId> = scids.into_iter().collect();

    let decoded: Vec<Option<FacebookScidFields>> = scids.iter().map(facebook_v1).collect();
    let all_facebook = !scids.is_empty() && decoded.iter().all(Option::is_some);
    let scid_scheme_match = if detect_cloudflare_signature(&scids) {
        Some("Cloudflare".to_string())
    } else if all_facebook {
        Some("Facebook".to_string())
    } else {
        None
    };
    let low_host_id = decoded
        .iter()
        .any(Option::is_some)
        .then(|| decoded.iter().all(|f| f.as_ref().is_some_and(low_host_id_predicate)));
    let statistically_structured = scids.len() as u64 >= cfg.uniformity.min_samples
        && classify_scheme(&scids, None, &cfg.uniformity).is_ok_and(|s| s.is_structured());

    let rto_cfg = FingerprintConfig {
        min_sessions: cfg.min_rto_sessions,
        ..cfg.fingerprint
    };
    SourceFeatures {
        source,
        scid_count: scids.len(),
        scid_structured: scid_scheme_match.is_some() || statistically_structured,
        scid_scheme_match,
        coalescence: datagrams > 0 && coalesced as f64 / datagrams as f64 >= cfg.fingerprint.coalescence_min_share,
        rto_signature: estimate_rto(sessions, &rto_cfg).ok(),
        length_signature,
        low_host_id,
    }
}

/// Features of every responding source, keyed by address.
pub fn features_by_source<'a>(
    records: impl IntoIterator<Item = &'a CaptureRecord>,
    sessions: &[Session],
    cfg: &FeatureConfig,
) -> BTreeMap<IpAddr, SourceFeatures> {
    let mut recs: HashMap<IpAddr, Vec<&CaptureRecord>> = HashMap::new();
    for r in records.into_iter().filter(|r| r.direction == Direction::Response) {
        recs.entry(r.datagram.src_ip).or_default().push(r);
    }
    let mut sess: HashMap<IpAddr, Vec<&Session>> = HashMap::new();
    for s in sessions.iter().filter(|s| s.direction == Direction::Response) {
        sess.entry(s.key.src_ip).or_default().push(s);
    }
    recs.into_iter()
        .map(|(ip, rs)| {
            let ss = sess.remove(&ip).unwrap_or_default();
            (ip, extract_features(ip, rs, ss, cfg))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InterArrival {
    pub initial_rto: f64,
    /// Relative tolerance on the initial RTO.
    #[serde(default = "quarter")]
    pub tolerance: f64,
    #[serde(default = "two")]
    pub backoff_base: f64,
    /// Relative tolerance on the backoff base.
    #[serde(default = "quarter")]
    pub backoff_tolerance: f64,
    /// Expected (min, max) resends; must overlap the observed range.
    pub retransmissions: (u32, u32),
}

fn quarter() -> f64 {
    0.25
}

fn two() -> f64 {
    2.0
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LengthSpec {
    pub types: Vec<PacketType>,
    pub length: usize,
}

/// A named conjunction of predicates; a source matching all of them is
/// attributed to `operator`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Rule {
    pub name: String,
    pub operator: String,
    /// Every SCID follows the operator's layout.
    #[serde(default)]
    pub scid: bool,
    /// Required coalescence flag.
    #[serde(default)]
    pub coalescence: Option<bool>,
    #[serde(default)]
    pub inter_arrival: Option<InterArrival>,
    /// At least one datagram matches one of these (types, length) pairs.
    #[serde(default)]
    pub packet_length: Option<Vec<LengthSpec>>,
    /// Every SCID is a version-1 Facebook SCID with a low host ID.
    #[serde(default)]
    pub low_host_id: bool,
}

impl Rule {
    pub fn matches(&self, f: &SourceFeatures) -> bool {
        if self.scid && f.scid_scheme_match.as_deref() != Some(self.operator.as_str()) {
            return false;
        }
        if self.coalescence.is_some_and(|c| c != f.coalescence) {
            return false;
        }
        if let Some(ia) = &self.inter_arrival {
            let Some(rto) = &f.rto_signature else {
                return false;
            };
            let close = (rto.initial_rto - ia.initial_rto).abs() / ia.initial_rto <= ia.tolerance
                && (rto.backoff_base - ia.backoff_base).abs() / ia.backoff_base <= ia.backoff_tolerance;
            let (lo, hi) = rto.max_retransmissions;
            if !close || hi < ia.retransmissions.0 || lo > ia.retransmissions.1 {
                return false;
            }
        }
        if let Some(lengths) = &self.packet_length {
            let hit = lengths.iter().any(|l| f.length_signature.contains(&(l.types.clone(), l.length)));
            if !hit {
                return false;
            }
        }
        if self.low_host_id && f.low_host_id != Some(true) {
            return false;
        }
        true
    }

    fn has_predicate(&self) -> bool {
        self.scid || self.coalescence.is_some() || self.inter_arrival.is_some() || self.packet_length.is_some() || self.low_host_id
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RuleSet {
    pub rule: Vec<Rule>,
}

pub const DEFAULT_RULES: &str = include_str!("../config/rules.toml");

impl RuleSet {
    pub fn parse(text: &str) -> Result<Self, Error> {
        let set: RuleSet = toml::from_str(text).map_err(|e| Error::Config(format!("rules: {e}")))?;
        let mut names = BTreeSet::new();
        for r in &set.rule {
            if !r.has_predicate() {
                return Err(Error::Config(format!("rule {:?} has no predicate", r.name)));
            }
            if !names.insert(r.name.as_str()) {
                return Err(Error::Config(format!("duplicate rule {:?}", r.name)));
            }
        }
        Ok(set)
    }

    pub fn load(path: &Path) -> Result<Self, Error> {
        Self::parse(&crate::read_text(path)?)
    }

    pub fn get(&self, name: &str) -> Result<&Rule, ClassifyError> {
        self.rule
            .iter()
            .find(|r| r.name == name)
            .ok_or_else(|| ClassifyError::UnknownRule(name.to_string()))
    }
}

impl RuleSet {
    /// The shipped rules, one per feature combination of the off-net study.
    pub fn shipped() -> Self {
        Self::parse(DEFAULT_RULES).expect("shipped rules parse")
    }
}

/// Label predicted by rule `name`: its operator, or [`NOT_OPERATOR`].
pub fn classify(features: &SourceFeatures, rules: &RuleSet, name: &str) -> Result<String, ClassifyError> {
    let rule = rules.get(name)?;
    Ok(if rule.matches(features) {
        rule.operator.clone()
    } else {
        NOT_OPERATOR.to_string()
    })
}

/// Source address → label (an operator name or [`NOT_OPERATOR`]).
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub labels: BTreeMap<IpAddr, String>,
}

impl GroundTruth {
    /// Parses `ip<TAB>label` lines; blank lines and `#` comments are skipped.
    pub fn parse(text: &str) -> Result<Self, Error> {
        let mut labels = BTreeMap::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (ip, label) = line
                .split_once('\t')
                .ok_or_else(|| Error::parse("truth labels", n + 1, "expected ip<TAB>label"))?;
            let ip: IpAddr = ip.trim().parse().map_err(|e| Error::parse("truth labels", n + 1, format!("{e}")))?;
            labels.insert(ip, label.trim().to_string());
        }
        Ok(GroundTruth { labels })
    }

    pub fn load(path: &Path) -> Result<Self, Error> {
        Self::parse(&crate::read_text(path)?)
    }

    pub fn to_text(&self) -> String {
        self.labels.iter().map(|(ip, l)| format!("{ip}\t{l}\n")).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

/// Confusion-matrix rates. `None` marks a rate whose denominator is zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub confusion: Confusion,
    pub tpr: Option<f64>,
    pub fpr: Option<f64>,
    pub tnr: Option<f64>,
    pub fnr: Option<f64>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

impl EvalMetrics {
    pub fn from_confusion(c: Confusion) -> Self {
        EvalMetrics {
            confusion: c,
            tpr: ratio(c.tp, c.tp + c.fn_),
            fpr: ratio(c.fp, c.fp + c.tn),
            tnr: ratio(c.tn, c.fp + c.tn),
            fnr: ratio(c.fn_, c.tp + c.fn_),
            precision: ratio(c.tp, c.tp + c.fp),
            recall: ratio(c.tp, c.tp + c.fn_),
        }
    }
}

/// Scores predictions for `operator` against the truth labels.
pub fn evaluate<'a>(
    predictions: impl IntoIterator<Item = (&'a IpAddr, &'a str)>,
    truth: &GroundTruth,
    operator: &str,
) -> Result<EvalMetrics, ClassifyError> {
    let mut c = Confusion::default();
    for (ip, predicted) in predictions {
        let actual = truth.labels.get(ip).ok_or(ClassifyError::MissingLabel(*ip))?;
        match (predicted == operator, actual == operator) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    Ok(EvalMetrics::from_confusion(c))
}

pub fn metrics_table<'a>(rows: impl IntoIterator<Item = (&'a str, &'a EvalMetrics)>) -> Table {
    let mut t = Table::new(["rule", "tpr", "fpr", "tnr", "fnr", "precision", "recall", "tp", "fp", "tn", "fn"]);
    let cell = |x: Option<f64>| x.map_or(json!("undefined"), |v| fixed(v, 6));
    for (name, m) in rows {
        let c = m.confusion;
        t.push(vec![
            json!(name),
            cell(m.tpr),
            cell(m.fpr),
            cell(m.tnr),
            cell(m.fnr),
            cell(m.precision),
            cell(m.recall),
            json!(c.tp),
            json!(c.fp),
            json!(c.tn),
            json!(c.fn_),
        ]);
    }
    t
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::{SessionKey, TimelineEntry};
    use crate::scid::encode_facebook_scid;
    use crate::wire::{Datagram, LongHeader};
    use proptest::prelude::*;

    fn fb(host: u32) -> FacebookScidFields {
        FacebookScidFields {
            scid_version: 1,
            host_id: host,
            worker_id: 2,
            process_id: 0,
        }
    }

    #[test]
    fn predicate_boundary() {
        assert!(low_host_id_predicate(&fb(5)));
        assert!(low_host_id_predicate(&fb(127)));
        assert!(!low_host_id_predicate(&fb(128)));
        assert!(!low_host_id_predicate(&fb(9000)));
    }

    fn record(src: &str, scid: ConnectionId, types: &[PacketType], len: usize, ts: f64) -> CaptureRecord {
        let dcid = ConnectionId::new(&[9; 8]).unwrap();
        CaptureRecord {
            datagram: Datagram {
                timestamp: ts,
                src_ip: src.parse().unwrap(),
                dst_ip: "44.0.0.1".parse().unwrap(),
                src_port: 443,
                dst_port: 5000,
                payload: vec![0; len],
            },
            direction: Direction::Response,
            packets: types.iter().map(|t| LongHeader::new(*t, 1, dcid, scid)).collect(),
        }
    }

    fn session_with(src: &str, offsets: &[f64]) -> Session {
        Session {
            key: SessionKey {
                src_ip: src.parse().unwrap(),
                dst_ip: "44.0.0.1".parse().unwrap(),
                scid: ConnectionId::new(&[1; 8]).unwrap(),
                dcid: ConnectionId::new(&[9; 8]).unwrap(),
            },
            direction: Direction::Response,
            version: 1,
            start: 0.0,
            timeline: offsets
                .iter()
                .map(|o| TimelineEntry {
                    offset: *o,
                    packet_type: PacketType::Initial,
                    datagram_len: 1232,
                    coalesced: false,
                })
                .collect(),
        }
    }

    #[test]
    fn facebook_offnet_features_and_rules() {
        let scid = encode_facebook_scid(&fb(5), 77).unwrap();
        let recs = [
            record("203.0.113.5", scid, &[PacketType::Initial], 1232, 0.0),
            record("203.0.113.5", scid, &[PacketType::Handshake], 1232, 0.0),
        ];
        let offsets: Vec<f64> = std::iter::once(0.0).chain((0..8).map(|k| 0.4 * 2f64.powi(k))).collect();
        let sess = [session_with("203.0.113.5", &offsets)];
        let f = extract_features("203.0.113.5".parse().unwrap(), &recs, &sess, &FeatureConfig::default());
        assert_eq!(f.scid_scheme_match.as_deref(), Some("Facebook"));
        assert!(f.scid_structured && !f.coalescence);
        assert_eq!(f.low_host_id, Some(true));
        assert!((f.rto_signature.unwrap().initial_rto - 0.4).abs() < 1e-9);

        let rules = RuleSet::shipped();
        assert_eq!(classify(&f, &rules, "SCID off-net (low host ID)").unwrap(), "Facebook");
        assert_eq!(classify(&f, &rules, "SCID & Inter arrival time").unwrap(), "Facebook");
        assert_eq!(classify(&f, &rules, "Inter arrival time").unwrap(), "Facebook");
        assert_eq!(classify(&f, &rules, "nonexistent"), Err(ClassifyError::UnknownRule("nonexistent".into())));

        let high = encode_facebook_scid(&fb(9000), 77).unwrap();
        let recs = [record("203.0.113.6", high, &[PacketType::Initial], 1232, 0.0)];
        let f = extract_features("203.0.113.6".parse().unwrap(), &recs, &[], &FeatureConfig::default());
        assert_eq!(f.low_host_id, Some(false));
        assert!(f.rto_signature.is_none());
        assert_eq!(classify(&f, &rules, "SCID off-net (low host ID)").unwrap(), NOT_OPERATOR);
        assert_eq!(classify(&f, &rules, "SCID").unwrap(), "Facebook");
    }

    #[test]
    fn cloudflare_features() {
        let mut b = [7u8; 20];
        b[0] = 1;
        let scid = ConnectionId::new(&b).unwrap();
        let recs = [record("104.16.0.9", scid, &[PacketType::Initial, PacketType::Handshake], 1200, 0.0)];
        let f = extract_features("104.16.0.9".parse().unwrap(), &recs, &[], &FeatureConfig::default());
        assert_eq!(f.scid_scheme_match.as_deref(), Some("Cloudflare"));
        assert!(f.coalescence);
        assert_eq!(f.low_host_id, None);
    }

    #[test]
    fn arithmetic_oracle() {
        let m = EvalMetrics::from_confusion(Confusion { tp: 3, fp: 1, tn: 5, fn_: 1 });
        assert_eq!(m.tpr, Some(0.75));
        assert_eq!(m.fpr, Some(1.0 / 6.0));
        assert_eq!(m.tnr, Some(5.0 / 6.0));
        assert_eq!(m.fnr, Some(0.25));
        assert_eq!(m.precision, Some(0.75));
        let none = EvalMetrics::from_confusion(Confusion { tp: 0, fp: 0, tn: 4, fn_: 0 });
        assert_eq!((none.tpr, none.precision, none.fpr), (None, None, Some(0.0)));
    }

    #[test]
    fn evaluate_perfect_and_missing() {
        let mut truth = GroundTruth::default();
        let mut preds = Vec::new();
        for i in 0..10u8 {
            let ip = IpAddr::from([10, 0, 0, i]);
            let label = if i < 4 { "Facebook" } else { NOT_OPERATOR };
            truth.labels.insert(ip, label.into());
            preds.push((ip, label.to_string()));
        }
        let m = evaluate(preds.iter().map(|(i, l)| (i, l.as_str())), &truth, "Facebook").unwrap();
        assert_eq!((m.tpr, m.fpr), (Some(1.0), Some(0.0)));
        let stray = IpAddr::from([10, 0, 1, 1]);
        assert_eq!(
            evaluate([(&stray, "Facebook")], &truth, "Facebook"),
            Err(ClassifyError::MissingLabel(stray))
        );
        let parsed = GroundTruth::parse(&truth.to_text()).unwrap();
        assert_eq!(parsed, truth);
        assert!(GroundTruth::parse("10.0.0.1 Facebook").is_err());
    }

    proptest! {
        #[test]
        fn complementary_rates(tp in 0u64..50, fp in 0u64..50, tn in 0u64..50, fn_ in 0u64..50) {
            let m = EvalMetrics::from_confusion(Confusion { tp, fp, tn, fn_ });
            if let (Some(a), Some(b)) = (m.tpr, m.fnr) {
                prop_assert!((a + b - 1.0).abs() < 1e-12);
            }
            if let (Some(a), Some(b)) = (m.tnr, m.fpr) {
                prop_assert!((a + b - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rule_file_validation() {
        assert!(RuleSet::parse("[[rule]]\nname='empty'\noperator='X'").is_err());
        assert!(RuleSet::parse("[[rule]]\nname='a'\noperator='X'\nscid=true\n[[rule]]\nname='a'\noperator='X'\nscid=true").is_err());
        assert_eq!(RuleSet::shipped().rule.len(), 9);
    }
}
