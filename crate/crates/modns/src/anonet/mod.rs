//! In-process multi-node harness, RTT measurement, and the collusion
//! analyzer.
//!
//! Two transports run the same protocol stack: a deterministic in-memory
//! event queue with configurable per-link latency (for exact formulas and
//! reproducible traces) and real UDP daemons over loopback (for
//! exercising the actual sockets). Traces feed the attribution analyzer,
//! which is cross-checked by an exact enumeration oracle over the path
//! selection distribution.

pub mod collusion;
pub mod loopback;
pub mod report;
mod sim;
pub mod topo;

use std::collections::BTreeMap;
use std::time::Duration;

use thiserror::Error;

use crate::endpoints::{ClientCounters, TargetCounters};
use crate::trace::TraceEvent;
use topo::TopologySpec;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("harness timeout: {detail}")]
    Timeout { detail: String },
    #[error("topology does not fit this transport")]
    WrongTransport,
    #[error("bad topology: {0}")]
    BadTopology(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// How many relays each query should traverse after the next-hop.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RelaySetting {
    /// Use each client's configured `[min, max]` range.
    Policy,
    /// Pin every client to exactly `k` subsequent relays.
    Fixed(usize),
}

impl RelaySetting {
    /// Table label for this setting, `Direct (0 relays)` style.
    pub fn label(&self) -> String {
        match self {
            RelaySetting::Policy => "Policy range".to_string(),
            RelaySetting::Fixed(0) => "Direct (0 relays)".to_string(),
            RelaySetting::Fixed(1) => "1 relay".to_string(),
            RelaySetting::Fixed(k) => format!("{k} relays"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct QueryOutcome {
    pub client: String,
    pub qname: String,
    pub rtt: Duration,
    /// Answered with the right id, rcode and records.
    pub ok: bool,
}

#[derive(Debug)]
pub struct WorkloadResult {
    pub trace: Vec<TraceEvent>,
    pub queries: Vec<QueryOutcome>,
    pub client_counters: BTreeMap<String, ClientCounters>,
    pub target_counters: TargetCounters,
}

impl WorkloadResult {
    pub fn mean_rtt(&self) -> Duration {
        if self.queries.is_empty() {
            return Duration::ZERO;
        }
        let total: Duration = self.queries.iter().map(|q| q.rtt).sum();
        total / self.queries.len() as u32
    }

    pub fn all_ok(&self) -> bool {
        !self.queries.is_empty() && self.queries.iter().all(|q| q.ok)
    }
}

/// Runs `n_queries` cache-busting queries per client over the in-memory
/// transport, recording per-query RTT and every node's forwarding events.
/// Deterministic for a fixed seed.
pub fn run_workload(
    topo: &TopologySpec,
    n_queries: usize,
    setting: RelaySetting,
    seed: u64,
) -> Result<WorkloadResult, HarnessError> {
    sim::SimNet::new(topo, setting, n_queries, seed)?.run()
}

#[cfg(test)]
mod tests {
    use super::collusion::CollusionScenario;
    use super::*;
    use crate::trace::{to_jsonl, TraceEvent};
    use std::collections::BTreeMap;

    const LADDER: &str = "\
transport inmem latency_ms=5
target X 10.9.0.1:5353
zone *.example.com A 10.53.0.99
relay R1 10.0.1.1:8443
relay R2 10.0.2.1:8443
relay R3 10.0.3.1:8443
relay R4 10.0.4.1:8443
client A 10.100.1.1:53 nexthops=R1 min=0 max=3 timeout_ms=2000
";

    #[test]
    fn rtt_matches_the_closed_form_per_hop_count() {
        let topo = topo::TopologySpec::parse(LADDER).unwrap();
        for k in 0..=3usize {
            let result = run_workload(&topo, 40, RelaySetting::Fixed(k), 7).unwrap();
            assert!(result.all_ok(), "k={k}: some queries failed");
            let expected = Duration::from_millis(10 * (k as u64 + 2));
            for q in &result.queries {
                assert_eq!(q.rtt, expected, "k={k}: query {} off the formula", q.qname);
            }
            assert_eq!(result.mean_rtt(), expected);
        }
    }

    #[test]
    fn fixed_seeds_give_identical_traces() {
        let topo = topo::TopologySpec::parse(LADDER).unwrap();
        let a = run_workload(&topo, 25, RelaySetting::Policy, 1234).unwrap();
        let b = run_workload(&topo, 25, RelaySetting::Policy, 1234).unwrap();
        assert_eq!(to_jsonl(&a.trace), to_jsonl(&b.trace));
        let c = run_workload(&topo, 25, RelaySetting::Policy, 1235).unwrap();
        assert_ne!(to_jsonl(&a.trace), to_jsonl(&c.trace));
    }

    const TWO_CLIENT: &str = "\
transport inmem latency_ms=5
target X 10.9.0.1:5353
zone *.example.com A 10.53.0.99
relay RA 10.0.1.1:8443
relay RB 10.0.2.1:8443
relay RC 10.0.3.1:8443
client A 10.100.1.1:53 nexthops=RA min=0 max=2 timeout_ms=2000
client B 10.100.2.1:53 nexthops=RB min=0 max=2 timeout_ms=2000
";

    /// The true origin of every query is inside the attributed candidate
    /// set, for every colluded subset of relays.
    #[test]
    fn attribution_is_sound_on_harness_traces() {
        let topo = topo::TopologySpec::parse(TWO_CLIENT).unwrap();
        let result = run_workload(&topo, 30, RelaySetting::Policy, 99).unwrap();
        assert!(result.all_ok());
        let summary = topo.summary();

        let mut truth: BTreeMap<String, String> = BTreeMap::new();
        for event in &result.trace {
            if let TraceEvent::ClientSend { client, digest, .. } = event {
                truth.insert(digest.clone(), client.clone());
            }
        }
        for colluded in [vec![], vec!["RC"], vec!["RA", "RC"], vec!["RA", "RB", "RC"]] {
            let scenario = CollusionScenario::from_trace(
                &result.trace,
                colluded.iter().map(|s| s.to_string()),
            );
            assert!(!scenario.resolver_log.is_empty());
            for obs in &scenario.resolver_log {
                let entry = super::collusion::attribute_query(&scenario, &obs.digest, &summary)
                    .unwrap_or_else(|e| panic!("attribution failed for {colluded:?}: {e}"));
                let origin = &truth[&obs.digest];
                assert!(
                    entry.candidates.contains(origin),
                    "true origin {origin} outside candidates {:?} under {colluded:?}",
                    entry.candidates
                );
            }
        }
    }

    /// The resolver only ever hears from relays, never from a client.
    #[test]
    fn resolver_blindness_holds_for_every_query() {
        let topo = topo::TopologySpec::parse(TWO_CLIENT).unwrap();
        let result = run_workload(&topo, 30, RelaySetting::Policy, 5).unwrap();
        let relay_ips: Vec<std::net::IpAddr> =
            topo.relays.iter().map(|r| r.addr.ip()).collect();
        let mut resolver_events = 0;
        for event in &result.trace {
            if let TraceEvent::ResolverRecv { sender, .. } = event {
                resolver_events += 1;
                let sender: crate::wire::NodeAddr = sender.parse().unwrap();
                assert!(
                    relay_ips.contains(&sender.ip()),
                    "resolver heard from non-relay {sender}"
                );
            }
        }
        assert!(resolver_events >= 60);
    }

    /// Relays cannot open the payloads they forward.
    #[test]
    fn relays_cannot_open_observed_payloads() {
        use crate::seal::{self, KeyPair, SealedMessage};
        let topo = topo::TopologySpec::parse(TWO_CLIENT).unwrap();
        let result = run_workload(&topo, 5, RelaySetting::Fixed(1), 3).unwrap();
        let mut rng = rand::rngs::OsRng;
        let relay_keys = KeyPair::generate(&mut rng);
        let mut tried = 0;
        for event in &result.trace {
            if let TraceEvent::ResolverRecv { sealed_hex, .. } = event {
                let bytes = hex::decode(sealed_hex).unwrap();
                let msg = SealedMessage::from_bytes(&bytes).unwrap();
                for dir in [seal::Direction::Query, seal::Direction::Response] {
                    assert!(seal::open(&relay_keys, &msg, dir).is_err());
                    tried += 1;
                }
            }
        }
        assert!(tried >= 10);
    }

    #[test]
    fn relay_setting_labels_match_the_ladder() {
        assert_eq!(RelaySetting::Fixed(0).label(), "Direct (0 relays)");
        assert_eq!(RelaySetting::Fixed(1).label(), "1 relay");
        assert_eq!(RelaySetting::Fixed(3).label(), "3 relays");
    }
}
