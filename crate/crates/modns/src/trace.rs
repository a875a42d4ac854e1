//! Trace and observation events shared by the daemons, the in-process
//! harness, and the collusion analyzer.
//!
//! Every forwarded query is logged with a digest of its sealed payload.
//! Relays never modify the payload, so the digest is stable across hops
//! and is exactly the linkage a set of colluding observers could compute
//! from their own logs. Traces serialize as JSON lines, one event per
//! line, with the topology summary as the first line.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::anonet::topo::TopoSummary;

/// Hex SHA-256 digest truncated to 128 bits; used to link one query's
/// bytes across observation points.
pub fn payload_digest(bytes: &[u8]) -> String {
    let hash = Sha256::digest(bytes);
    hex::encode(&hash[..16])
}

/// One line of a trace file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum TraceEvent {
    /// First line of every trace: what the analyzer needs to know about
    /// the network.
    Topology { summary: TopoSummary },
    /// Maps a dynamically allocated endpoint to the node that owns it.
    AddrBook { addr: String, node: String },
    ClientSend {
        t_us: u64,
        client: String,
        digest: String,
        nexthop: String,
        /// Header hop list: subsequent relays then the target.
        hops: Vec<String>,
        qname: String,
        attempt: u32,
    },
    RelayForward {
        t_us: u64,
        relay: String,
        prev_hop: String,
        next_hop: String,
        digest: String,
        remaining_hops_digest: String,
    },
    RelayDrop { t_us: u64, relay: String, reason: String },
    ResolverRecv {
        t_us: u64,
        sender: String,
        digest: String,
        sealed_hex: String,
    },
    ClientRecv {
        t_us: u64,
        client: String,
        qname: String,
        rtt_us: u64,
        ok: bool,
    },
}

pub fn to_jsonl(events: &[TraceEvent]) -> String {
    let mut out = String::new();
    for ev in events {
        out.push_str(&serde_json::to_string(ev).expect("trace events serialize"));
        out.push('\n');
    }
    out
}

pub fn from_jsonl(text: &str) -> Result<Vec<TraceEvent>, serde_json::Error> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(serde_json::from_str)
        .collect()
}

/// Where daemons report their observation events.
#[derive(Clone)]
pub enum ObsSink {
    Null,
    /// Collected in memory; used by the loopback harness.
    Memory(std::sync::Arc<parking_lot::Mutex<Vec<TraceEvent>>>),
    /// Appended as JSON lines; used by `--log-observations`.
    File(std::sync::Arc<parking_lot::Mutex<std::fs::File>>),
}

impl ObsSink {
    pub fn memory() -> (Self, std::sync::Arc<parking_lot::Mutex<Vec<TraceEvent>>>) {
        let buf = std::sync::Arc::new(parking_lot::Mutex::new(Vec::new()));
        (ObsSink::Memory(buf.clone()), buf)
    }

    pub fn file(path: &std::path::Path) -> std::io::Result<Self> {
        let file = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
        Ok(ObsSink::File(std::sync::Arc::new(parking_lot::Mutex::new(file))))
    }

    pub fn record(&self, event: TraceEvent) {
        match self {
            ObsSink::Null => {}
            ObsSink::Memory(buf) => buf.lock().push(event),
            ObsSink::File(file) => {
                use std::io::Write;
                let line = serde_json::to_string(&event).expect("trace events serialize");
                let mut file = file.lock();
                let _ = writeln!(file, "{line}");
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn digest_is_stable_and_sensitive() {
        let a = payload_digest(b"payload");
        assert_eq!(a, payload_digest(b"payload"));
        assert_ne!(a, payload_digest(b"payloae"));
        assert_eq!(a.len(), 32);
    }

    #[test]
    fn jsonl_round_trips() {
        let events = vec![
            TraceEvent::RelayDrop { t_us: 5, relay: "R1".into(), reason: "loop_detected".into() },
            TraceEvent::ClientRecv {
                t_us: 9,
                client: "A".into(),
                qname: "x.example.com".into(),
                rtt_us: 1200,
                ok: true,
            },
        ];
        let text = to_jsonl(&events);
        assert_eq!(from_jsonl(&text).unwrap(), events);
    }
}
