//! On-disk session store written by `ingest` and read by the analyses.
//!
//! A store is a directory holding `records.jsonl` (one operator-tagged
//! capture record per line), `sessions.jsonl` and `counters.json`.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::net::IpAddr;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::ingest::{CaptureRecord, IngestCounters, PrefixTable, SanitizeCounters, Session};
use crate::wire::{ConnectionId, Direction};
use crate::Error;

pub const RECORDS_FILE: &str = "records.jsonl";
pub const SESSIONS_FILE: &str = "sessions.jsonl";
pub const COUNTERS_FILE: &str = "counters.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredRecord {
    pub operator: String,
    pub asn: Option<u32>,
    #[serde(flatten)]
    pub record: CaptureRecord,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StoreCounters {
    pub ingest: IngestCounters,
    pub sanitize: SanitizeCounters,
    pub removed_fraction: f64,
    pub sessions: u64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SessionStore {
    pub records: Vec<StoredRecord>,
    pub sessions: Vec<Session>,
    pub counters: StoreCounters,
}

impl SessionStore {
    /// Tags sanitized records with their operator and attaches sessions.
    pub fn build(records: Vec<CaptureRecord>, prefixes: &PrefixTable, sessions: Vec<Session>, counters: StoreCounters) -> Self {
        let records = records
            .into_iter()
            .map(|record| {
                let info = prefixes.map_to_as(record.datagram.src_ip);
                StoredRecord {
                    operator: prefixes.operator_of(record.datagram.src_ip).to_string(),
                    asn: info.map(|i| i.asn),
                    record,
                }
            })
            .collect();
        SessionStore { records, sessions, counters }
    }

    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>, Error> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let records = dir.join(RECORDS_FILE);
        write_jsonl(&records, &self.records)?;
        let sessions = dir.join(SESSIONS_FILE);
        write_jsonl(&sessions, &self.sessions)?;
        let counters = dir.join(COUNTERS_FILE);
        let text = serde_json::to_string_pretty(&self.counters).expect("counters serialize");
        std::fs::write(&counters, text + "\n").map_err(|e| Error::io(&counters, e))?;
        Ok(vec![records, sessions, counters])
    }

    pub fn read(dir: &Path) -> Result<Self, Error> {
        let counters_path = dir.join(COUNTERS_FILE);
        let counters = serde_json::from_str(&crate::read_text(&counters_path)?)
            .map_err(|e| Error::parse("store counters", e.line(), e.to_string()))?;
        Ok(SessionStore {
            records: read_jsonl(&dir.join(RECORDS_FILE), "store records")?,
            sessions: read_jsonl(&dir.join(SESSIONS_FILE), "store sessions")?,
            counters,
        })
    }

    pub fn merge(&mut self, other: SessionStore) {
        self.records.extend(other.records);
        self.sessions.extend(other.sessions);
        self.counters.sessions += other.counters.sessions;
    }

    /// Operator of every responding source address.
    pub fn source_operators(&self) -> BTreeMap<IpAddr, &str> {
        self.records
            .iter()
            .map(|r| (r.record.datagram.src_ip, r.operator.as_str()))
            .collect()
    }

    pub fn operators(&self) -> BTreeSet<&str> {
        self.records.iter().map(|r| r.operator.as_str()).collect()
    }

    /// Response records paired with their operator.
    pub fn responses(&self) -> impl Iterator<Item = (&str, &CaptureRecord)> {
        self.records
            .iter()
            .filter(|r| r.record.direction == Direction::Response)
            .map(|r| (r.operator.as_str(), &r.record))
    }

    /// Response sessions of one operator.
    pub fn sessions_of<'a>(&'a self, operator: &'a str) -> impl Iterator<Item = &'a Session> + 'a {
        let ops = self.source_operators();
        self.sessions
            .iter()
            .filter(move |s| s.direction == Direction::Response && ops.get(&s.key.src_ip).copied() == Some(operator))
    }

    /// Unique server SCIDs per operator, sorted.
    pub fn scids_by_operator(&self) -> BTreeMap<&str, Vec<ConnectionId>> {
        let mut m: BTreeMap<&str, BTreeSet<ConnectionId>> = BTreeMap::new();
        for (op, r) in self.responses() {
            for p in &r.packets {
                m.entry(op).or_default().insert(p.scid);
            }
        }
        m.into_iter().map(|(k, v)| (k, v.into_iter().collect())).collect()
    }
}

fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<(), Error> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for item in items {
        serde_json::to_writer(&mut w, item).expect("store item serializes");
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn read_jsonl<T: DeserializeOwned>(path: &Path, what: &'static str) -> Result<Vec<T>, Error> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::parse(what, n + 1, e.to_string()))?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::wire::{Datagram, LongHeader, PacketType};

    #[test]
    fn round_trip() {
        let cid = ConnectionId::new(&[1, 2, 3, 4, 5, 6, 7, 8]).unwrap();
        let h = LongHeader::new(PacketType::Initial, 1, cid, cid);
        let payload = crate::wire::encode_long_header(&h, &[0; 20]).unwrap();
        let rec = CaptureRecord {
            datagram: Datagram {
                timestamp: 1.5,
                src_ip: "157.240.0.1".parse().unwrap(),
                dst_ip: "44.0.0.1".parse().unwrap(),
                src_port: 443,
                dst_port: 4000,
                payload,
            },
            direction: Direction::Response,
            packets: vec![h],
        };
        let prefixes = PrefixTable::parse("157.240.0.0/16\t32934\tFacebook\n").unwrap();
        let sessions = crate::ingest::sessionize(std::slice::from_ref(&rec), 60.0);
        let store = SessionStore::build(vec![rec], &prefixes, sessions, StoreCounters::default());
        let dir = tempfile::tempdir().unwrap();
        store.write(dir.path()).unwrap();
        let back = SessionStore::read(dir.path()).unwrap();
        assert_eq!(back, store);
        assert_eq!(back.records[0].operator, "Facebook");
        assert_eq!(back.sessions_of("Facebook").count(), 1);
        assert_eq!(back.scids_by_operator()["Facebook"], vec![cid]);
    }
}
