//! Passive and active measurement of QUIC deployments.
//!
//! The crate turns QUIC backscatter (server replies to spoofed Initials that
//! land in a network telescope) into statements about the responding stacks
//! and their load-balancer infrastructure:
//!
//! * [`wire`] parses long-header packets, coalesced datagrams and padding.
//! * [`capture`] and [`ingest`] read pcap files, classify and sanitize
//!   traffic, map sources to operators and group packets into sessions.
//! * [`fingerprint`] derives version usage, coalescence, packet lengths and
//!   retransmission timing, and matches them against known stack profiles.
//! * [`scid`] analyses server connection IDs: nybble statistics, scheme
//!   classification and the structured layouts used by large operators.
//! * [`offnet`] detects off-net servers from those features and scores the
//!   detection against labelled data.
//! * [`sim`] is a deterministic model of frontend clusters (VIPs, L4 and L7
//!   load balancers, QUIC server retransmission) used as ground truth.
//! * [`probe`] runs active campaigns (host-ID harvesting, VIP clustering,
//!   load-balancer type detection) over a pluggable transport.
//! * [`store`] persists ingested records and sessions between runs.
//! * [`report`] and [`cli`] wire everything into reproducible pipelines.

pub mod capture;
pub mod cli;
mod error;
pub mod fingerprint;
pub mod ingest;
pub mod offnet;
pub mod probe;
pub mod report;
pub mod scid;
pub mod sim;
pub mod store;
pub mod table;
pub mod wire;

use std::path::Path;

pub use error::Error;

pub(crate) fn read_text(path: &Path) -> Result<String, Error> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}
