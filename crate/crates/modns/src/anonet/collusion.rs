//! Attribution analysis under colluding relays.
//!
//! A scenario names the relays that share their observation logs with the
//! target resolver. Colluders link one query's appearances across hops by
//! its payload digest (relays never modify the sealed payload, so the
//! digest is the strongest passive linkage available) and walk the chain
//! backwards from the resolver. The walk stops at the first honest node
//! `F`; the candidate origin set is then every client that could have put
//! `F` at that position: `F`'s owners plus everyone who may use `F` as a
//! subsequent relay. A query is identified when that set is a singleton.
//!
//! [`identification_probability_exact`] enumerates the whole path
//! selection space with its exact probabilities; the Monte-Carlo variant
//! draws from the same distribution via [`pathsel::select_path`].

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use thiserror::Error;

use crate::pathsel;
use crate::trace::TraceEvent;
use crate::wire::NodeAddr;

use super::topo::{NodeRef, TopoSummary};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum AnalyzeError {
    #[error("digest {0} not in the resolver log")]
    UnknownDigest(String),
    #[error("inconsistent logs: {0}")]
    InconsistentLogs(String),
    #[error("enumeration space {size} exceeds the {limit} limit")]
    SpaceTooLarge { size: usize, limit: usize },
    #[error("unknown client {0}")]
    UnknownClient(String),
}

/// One forwarding observation at a colluded relay.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RelayObs {
    pub prev_hop: String,
    pub next_hop: String,
    pub digest: String,
}

/// One arrival observation at the resolver.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ResolverObs {
    pub sender: String,
    pub digest: String,
    pub sealed_hex: String,
}

/// The adversary's combined view: logs from the colluded relays plus the
/// resolver's own log, and the endpoint ownership the colluders know.
#[derive(Debug, Clone, Default)]
pub struct CollusionScenario {
    pub colluded: BTreeSet<String>,
    pub relay_logs: BTreeMap<String, Vec<RelayObs>>,
    pub resolver_log: Vec<ResolverObs>,
    /// Endpoint -> node id, from the trace's address book.
    pub addr_book: BTreeMap<String, String>,
}

impl CollusionScenario {
    /// Filters a trace down to what `colluded` relays plus the resolver
    /// actually observed.
    pub fn from_trace(events: &[TraceEvent], colluded: impl IntoIterator<Item = String>) -> Self {
        let mut scenario = CollusionScenario {
            colluded: colluded.into_iter().collect(),
            ..Default::default()
        };
        for event in events {
            match event {
                TraceEvent::RelayForward { relay, prev_hop, next_hop, digest, .. } => {
                    if scenario.colluded.contains(relay) {
                        scenario.relay_logs.entry(relay.clone()).or_default().push(RelayObs {
                            prev_hop: prev_hop.clone(),
                            next_hop: next_hop.clone(),
                            digest: digest.clone(),
                        });
                    }
                }
                TraceEvent::ResolverRecv { sender, digest, sealed_hex, .. } => {
                    scenario.resolver_log.push(ResolverObs {
                        sender: sender.clone(),
                        digest: digest.clone(),
                        sealed_hex: sealed_hex.clone(),
                    });
                }
                TraceEvent::AddrBook { addr, node } => {
                    scenario.addr_book.insert(addr.clone(), node.clone());
                }
                _ => {}
            }
        }
        scenario
    }

    /// Resolves an observed address to a node: the address book first
    /// (dynamic endpoints), then by IP against the published topology.
    fn resolve_addr(&self, topo: &TopoSummary, addr: &str) -> Option<NodeRef> {
        if let Some(node) = self.addr_book.get(addr) {
            if topo.clients.iter().any(|c| &c.id == node) {
                return Some(NodeRef::Client(node.clone()));
            }
            if topo.relays.iter().any(|r| &r.id == node) {
                return Some(NodeRef::Relay(node.clone()));
            }
        }
        let parsed: NodeAddr = addr.parse().ok()?;
        topo.node_by_ip(parsed.ip())
    }
}

/// Attribution verdict for one query.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttributionEntry {
    pub digest: String,
    pub candidates: BTreeSet<String>,
    pub identified: bool,
}

fn entry(digest: String, candidates: BTreeSet<String>) -> AttributionEntry {
    let identified = candidates.len() == 1;
    AttributionEntry { digest, candidates, identified }
}

/// Chain-walks one query backwards from the resolver through the colluded
/// relays' logs until an honest node is reached, then computes the
/// consistent-origin set.
pub fn attribute_query(
    scenario: &CollusionScenario,
    digest: &str,
    topo: &TopoSummary,
) -> Result<AttributionEntry, AnalyzeError> {
    let obs = scenario
        .resolver_log
        .iter()
        .find(|o| o.digest == digest)
        .ok_or_else(|| AnalyzeError::UnknownDigest(digest.to_string()))?;

    let mut current = obs.sender.clone();
    // The chain is at most one observation per relay.
    for _ in 0..=topo.relays.len() {
        let node = scenario.resolve_addr(topo, &current).ok_or_else(|| {
            AnalyzeError::InconsistentLogs(format!("cannot resolve observed address {current}"))
        })?;
        match node {
            NodeRef::Client(id) => {
                // Walked all the way back to the sender itself.
                return Ok(entry(digest.to_string(), BTreeSet::from([id])));
            }
            NodeRef::Relay(id) if scenario.colluded.contains(&id) => {
                let log = scenario.relay_logs.get(&id).ok_or_else(|| {
                    AnalyzeError::InconsistentLogs(format!("no log from colluded relay {id}"))
                })?;
                let hop = log.iter().find(|o| o.digest == digest).ok_or_else(|| {
                    AnalyzeError::InconsistentLogs(format!(
                        "colluded relay {id} never saw digest {digest}"
                    ))
                })?;
                current = hop.prev_hop.clone();
            }
            NodeRef::Relay(id) => {
                // First honest hop: the anonymity set behind it.
                return Ok(entry(digest.to_string(), topo.candidates_behind(&id)));
            }
            NodeRef::Target => {
                return Err(AnalyzeError::InconsistentLogs(
                    "walk reached the resolver itself".to_string(),
                ))
            }
        }
    }
    Err(AnalyzeError::InconsistentLogs("chain walk did not terminate".to_string()))
}

/// Attributes every query in the resolver log.
pub fn attribute_all(
    scenario: &CollusionScenario,
    topo: &TopoSummary,
) -> Result<Vec<AttributionEntry>, AnalyzeError> {
    scenario
        .resolver_log
        .iter()
        .map(|o| attribute_query(scenario, &o.digest, topo))
        .collect()
}

/// Analytic attribution of one concrete path (relay ids, next-hop
/// first). Equivalent to the trace walk when the logs contain this path.
fn attribute_path(
    topo: &TopoSummary,
    client_id: &str,
    chain: &[String],
    colluded: &BTreeSet<String>,
) -> AttributionEntry {
    for relay_id in chain.iter().rev() {
        if !colluded.contains(relay_id) {
            return entry(String::new(), topo.candidates_behind(relay_id));
        }
    }
    entry(String::new(), BTreeSet::from([client_id.to_string()]))
}

/// Monte-Carlo estimate with its 95% Wilson score interval.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McEstimate {
    pub p: f64,
    pub lo: f64,
    pub hi: f64,
    pub trials: usize,
}

impl McEstimate {
    pub fn contains(&self, value: f64) -> bool {
        self.lo <= value && value <= self.hi
    }
}

fn wilson_interval(hits: usize, trials: usize) -> (f64, f64) {
    let z = 1.959964f64;
    let n = trials as f64;
    let p = hits as f64 / n;
    let denom = 1.0 + z * z / n;
    let center = (p + z * z / (2.0 * n)) / denom;
    let half = z * ((p * (1.0 - p) / n + z * z / (4.0 * n * n)).sqrt()) / denom;
    // The interval always contains the point estimate, rounding aside.
    let lo = if hits == 0 { 0.0 } else { (center - half).max(0.0).min(p) };
    let hi = if hits == trials { 1.0 } else { (center + half).min(1.0).max(p) };
    (lo, hi)
}

/// Fraction of sampled paths for `client_id` whose origin the colluders
/// would identify.
pub fn identification_probability_mc(
    topo: &TopoSummary,
    client_id: &str,
    colluded: &BTreeSet<String>,
    trials: usize,
    rng: &mut impl Rng,
) -> Result<McEstimate, AnalyzeError> {
    let policy = topo
        .reconstruct_policy(client_id)
        .ok_or_else(|| AnalyzeError::UnknownClient(client_id.to_string()))?;
    let by_addr = topo.relay_addr_index();
    let mut hits = 0usize;
    for _ in 0..trials {
        let path = pathsel::select_path(&policy, rng).map_err(|e| {
            AnalyzeError::InconsistentLogs(format!("path selection failed: {e}"))
        })?;
        let chain: Vec<String> = std::iter::once(path.nexthop)
            .chain(path.subsequent.iter().copied())
            .map(|a| by_addr[&a].clone())
            .collect();
        if attribute_path(topo, client_id, &chain, colluded).identified {
            hits += 1;
        }
    }
    let (lo, hi) = wilson_interval(hits, trials);
    Ok(McEstimate { p: hits as f64 / trials as f64, lo, hi, trials })
}

/// One enumerated path-selection outcome with its exact probability.
#[derive(Debug, Clone)]
pub struct Outcome {
    pub probability: f64,
    pub nexthop: String,
    pub subsequent: Vec<String>,
    pub attribution: AttributionEntry,
}

pub const DEFAULT_ENUMERATION_LIMIT: usize = 1_000_000;

/// Enumerates every (next-hop, k, ordered subsequent selection) outcome
/// for one client with its exact probability under the selection
/// distribution, and attributes each analytically.
pub fn enumerate_outcomes(
    topo: &TopoSummary,
    client_id: &str,
    colluded: &BTreeSet<String>,
    limit: usize,
) -> Result<Vec<Outcome>, AnalyzeError> {
    let client = topo
        .client(client_id)
        .ok_or_else(|| AnalyzeError::UnknownClient(client_id.to_string()))?;
    let flagged = &client.flagged;
    let mut outcomes = Vec::new();
    let target_addrs: BTreeSet<String> = client.targets.iter().cloned().collect();
    let target_relay_ids: BTreeSet<&str> = topo
        .relays
        .iter()
        .filter(|r| target_addrs.contains(&r.addr))
        .map(|r| r.id.as_str())
        .collect();

    for nexthop in flagged {
        // Mirrors select_path: pool is the list minus the chosen next-hop
        // and any relay sharing the target's address.
        let pool: Vec<&String> = client
            .pool
            .iter()
            .filter(|id| *id != nexthop && !target_relay_ids.contains(id.as_str()))
            .collect();
        if pool.len() < client.min_relays {
            return Err(AnalyzeError::InconsistentLogs(format!(
                "pool for {client_id} via {nexthop} smaller than min_relays"
            )));
        }
        let max = client.max_relays.min(pool.len());
        let k_choices = (max - client.min_relays + 1) as f64;
        for k in client.min_relays..=max {
            let base = 1.0 / flagged.len() as f64 / k_choices;
            let mut selection: Vec<&String> = Vec::with_capacity(k);
            enumerate_permutations(
                &pool,
                k,
                base,
                &mut selection,
                &mut |selection: &[&String], probability: f64| {
                    let mut chain = Vec::with_capacity(selection.len() + 1);
                    chain.push(nexthop.clone());
                    chain.extend(selection.iter().map(|s| (*s).clone()));
                    let attribution = attribute_path(topo, client_id, &chain, colluded);
                    outcomes.push(Outcome {
                        probability,
                        nexthop: nexthop.clone(),
                        subsequent: selection.iter().map(|s| (*s).clone()).collect(),
                        attribution,
                    });
                },
            );
            if outcomes.len() > limit {
                return Err(AnalyzeError::SpaceTooLarge { size: outcomes.len(), limit });
            }
        }
    }
    Ok(outcomes)
}

fn enumerate_permutations<'a>(
    pool: &[&'a String],
    k: usize,
    probability: f64,
    selection: &mut Vec<&'a String>,
    visit: &mut impl FnMut(&[&'a String], f64),
) {
    if selection.len() == k {
        visit(selection, probability);
        return;
    }
    let remaining = pool.iter().filter(|id| !selection.contains(id)).count();
    for id in pool {
        if selection.contains(id) {
            continue;
        }
        selection.push(id);
        enumerate_permutations(pool, k, probability / remaining as f64, selection, visit);
        selection.pop();
    }
}

/// Exact identification probability by full enumeration.
pub fn identification_probability_exact(
    topo: &TopoSummary,
    client_id: &str,
    colluded: &BTreeSet<String>,
) -> Result<f64, AnalyzeError> {
    let outcomes = enumerate_outcomes(topo, client_id, colluded, DEFAULT_ENUMERATION_LIMIT)?;
    let total: f64 = outcomes.iter().map(|o| o.probability).sum();
    debug_assert!((total - 1.0).abs() < 1e-9, "probabilities sum to {total}");
    let p: f64 = outcomes.iter().filter(|o| o.attribution.identified).map(|o| o.probability).sum();
    // Keep within [0, 1] despite summation rounding; adding 0.0 also
    // normalizes the empty sum, which is IEEE -0.0.
    Ok((p + 0.0).clamp(0.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::anonet::topo::{ClientSummary, RelaySummary};
    use rand::rngs::StdRng;
    use rand::SeedableRng;

    /// (id, flagged relay ids, pool relay ids, min_relays, max_relays).
    type ClientFixture<'a> = (&'a str, &'a [&'a str], &'a [&'a str], usize, usize);

    /// Builds a summary directly from client fixtures.
    pub(crate) fn summary(clients: &[ClientFixture]) -> TopoSummary {
        let mut relay_ids: Vec<&str> = Vec::new();
        for (_, flagged, pool, _, _) in clients {
            for id in flagged.iter().chain(pool.iter()) {
                if !relay_ids.contains(id) {
                    relay_ids.push(id);
                }
            }
        }
        TopoSummary {
            clients: clients
                .iter()
                .enumerate()
                .map(|(i, (id, flagged, pool, min, max))| ClientSummary {
                    id: id.to_string(),
                    addr: format!("10.100.{}.1:53", i + 1),
                    flagged: flagged.iter().map(|s| s.to_string()).collect(),
                    pool: pool.iter().map(|s| s.to_string()).collect(),
                    min_relays: *min,
                    max_relays: *max,
                    targets: vec!["10.9.0.1:5353".to_string()],
                })
                .collect(),
            relays: relay_ids
                .iter()
                .enumerate()
                .map(|(i, id)| RelaySummary {
                    id: id.to_string(),
                    addr: format!("10.0.{}.1:8443", i + 1),
                })
                .collect(),
            target: "10.9.0.1:5353".to_string(),
        }
    }

    fn colluded(ids: &[&str]) -> BTreeSet<String> {
        ids.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn no_collusion_leaves_the_shared_pool_ambiguous() {
        // Two clients share the pool; with nothing colluded the resolver
        // sees only the last relay.
        let topo = summary(&[
            ("A", &["R1"], &["R1", "R2", "R3"], 1, 2),
            ("B", &["R2"], &["R1", "R2", "R3"], 1, 2),
        ]);
        let p = identification_probability_exact(&topo, "A", &colluded(&[])).unwrap();
        assert_eq!(p, 0.0);
        let outcomes = enumerate_outcomes(&topo, "A", &colluded(&[]), 10_000).unwrap();
        assert!(outcomes.iter().all(|o| o.attribution.candidates.len() >= 2));
    }

    #[test]
    fn fully_colluded_pool_behind_an_unshared_nexthop_identifies() {
        // R1 is A's dedicated next-hop, listed by nobody else; every
        // relay it can choose afterwards is colluded.
        let topo = summary(&[
            ("A", &["R1"], &["R1", "R2", "R3", "R4"], 1, 2),
            ("B", &["R5"], &["R5", "R2", "R3", "R4"], 1, 2),
        ]);
        let p =
            identification_probability_exact(&topo, "A", &colluded(&["R2", "R3", "R4"])).unwrap();
        assert!((p - 1.0).abs() < 1e-12, "expected 1.0, got {p}");
    }

    #[test]
    fn one_colluded_relay_of_three_identifies_a_third_of_queries() {
        // B's list excludes R1, so R1's owner set is {A} alone; walking
        // through the colluded R2 reaches R1 and identifies A. Paths via
        // honest R3/R4 stop there with {A, B} candidates.
        let topo = summary(&[
            ("A", &["R1"], &["R1", "R2", "R3", "R4"], 1, 1),
            ("B", &["R5"], &["R5", "R2", "R3", "R4"], 1, 1),
        ]);
        let p = identification_probability_exact(&topo, "A", &colluded(&["R2"])).unwrap();
        assert!((p - 1.0 / 3.0).abs() < 1e-12, "expected 1/3, got {p}");
    }

    #[test]
    fn mc_agrees_with_exact_on_the_one_third_case() {
        let topo = summary(&[
            ("A", &["R1"], &["R1", "R2", "R3", "R4"], 1, 1),
            ("B", &["R5"], &["R5", "R2", "R3", "R4"], 1, 1),
        ]);
        let mut rng = StdRng::seed_from_u64(17);
        let mc = identification_probability_mc(&topo, "A", &colluded(&["R2"]), 100_000, &mut rng)
            .unwrap();
        assert!(mc.contains(1.0 / 3.0), "interval [{}, {}] misses 1/3", mc.lo, mc.hi);
        assert!((mc.p - 1.0 / 3.0).abs() < 0.01);
    }

    #[test]
    fn transit_traffic_through_a_shared_nexthop_blocks_identification() {
        // B lists A's next-hop R1 as an eligible subsequent relay, so even
        // a fully colluded pool leaves {A, B} behind R1. This is the
        // mutual-sharing configuration.
        let topo = summary(&[
            ("A", &["R1"], &["R1", "R2", "R3"], 0, 2),
            ("B", &["R2"], &["R1", "R2", "R3"], 0, 2),
        ]);
        let p = identification_probability_exact(&topo, "A", &colluded(&["R3"])).unwrap();
        assert_eq!(p, 0.0);
        // Even with everything after the next-hop colluded:
        let p = identification_probability_exact(&topo, "A", &colluded(&["R2", "R3"])).unwrap();
        assert_eq!(p, 0.0);
    }

    #[test]
    fn enlarging_the_colluded_set_never_shrinks_identification() {
        // A's next-hop R1 is unshared; queries are identified exactly when
        // every relay between R1 and the resolver colluded. With k uniform
        // over {1, 2}: one colluded relay catches only its own k=1 path
        // (1/6), two catch their singles plus both orderings (1/2), all
        // three catch everything.
        let topo = summary(&[
            ("A", &["R1"], &["R1", "R2", "R3", "R4"], 1, 2),
            ("B", &["R5"], &["R5", "R2", "R3", "R4"], 1, 2),
        ]);
        let nested: [(&[&str], f64); 4] = [
            (&[], 0.0),
            (&["R3"], 1.0 / 6.0),
            (&["R3", "R4"], 0.5),
            (&["R3", "R4", "R2"], 1.0),
        ];
        let mut last = -1.0f64;
        for (set, expected) in nested {
            let p = identification_probability_exact(&topo, "A", &colluded(set)).unwrap();
            assert!((p - expected).abs() < 1e-12, "{set:?}: expected {expected}, got {p}");
            assert!(p >= last);
            last = p;
        }
    }

    #[test]
    fn outcome_probabilities_match_the_selection_model() {
        let topo = summary(&[("A", &["R1"], &["R1", "R2", "R3", "R4"], 1, 2)]);
        let outcomes = enumerate_outcomes(&topo, "A", &colluded(&[]), 10_000).unwrap();
        // 3 singles at 1/2·1/3 plus 6 ordered pairs at 1/2·1/6.
        assert_eq!(outcomes.len(), 9);
        let total: f64 = outcomes.iter().map(|o| o.probability).sum();
        assert!((total - 1.0).abs() < 1e-12);
        for o in &outcomes {
            let expected = if o.subsequent.len() == 1 { 0.5 / 3.0 } else { 0.5 / 6.0 };
            assert!((o.probability - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn space_limit_is_enforced() {
        let pool: Vec<String> = (1..=11).map(|i| format!("R{i}")).collect();
        let pool_refs: Vec<&str> = pool.iter().map(|s| s.as_str()).collect();
        let topo = summary(&[("A", &["R1"], &pool_refs, 0, 10)]);
        assert!(matches!(
            enumerate_outcomes(&topo, "A", &colluded(&[]), 10_000),
            Err(AnalyzeError::SpaceTooLarge { .. })
        ));
    }

    #[test]
    fn trace_walk_matches_the_analytic_formula() {
        // Hand-built logs for one query A -> R1 -> R2 -> X with R2
        // colluded: the walk ends at R1 with candidates {A, B}.
        let topo = summary(&[
            ("A", &["R1"], &["R1", "R2", "R3"], 0, 2),
            ("B", &["R2"], &["R1", "R2", "R3"], 0, 2),
        ]);
        let events = vec![
            TraceEvent::AddrBook { addr: "10.0.1.1:32001".into(), node: "R1".into() },
            TraceEvent::AddrBook { addr: "10.0.2.1:32001".into(), node: "R2".into() },
            TraceEvent::RelayForward {
                t_us: 1,
                relay: "R1".into(),
                prev_hop: "10.100.1.1:53".into(),
                next_hop: "10.0.2.1:8443".into(),
                digest: "d1".into(),
                remaining_hops_digest: "-".into(),
            },
            TraceEvent::RelayForward {
                t_us: 2,
                relay: "R2".into(),
                prev_hop: "10.0.1.1:32001".into(),
                next_hop: "10.9.0.1:5353".into(),
                digest: "d1".into(),
                remaining_hops_digest: "-".into(),
            },
            TraceEvent::ResolverRecv {
                t_us: 3,
                sender: "10.0.2.1:32001".into(),
                digest: "d1".into(),
                sealed_hex: "00".into(),
            },
        ];
        let scenario = CollusionScenario::from_trace(&events, ["R2".to_string()]);
        let entry = attribute_query(&scenario, "d1", &topo).unwrap();
        assert_eq!(
            entry.candidates,
            BTreeSet::from(["A".to_string(), "B".to_string()])
        );
        assert!(!entry.identified);

        // With R1 also colluded the walk reaches the client itself.
        let scenario =
            CollusionScenario::from_trace(&events, ["R1".to_string(), "R2".to_string()]);
        let entry = attribute_query(&scenario, "d1", &topo).unwrap();
        assert_eq!(entry.candidates, BTreeSet::from(["A".to_string()]));
        assert!(entry.identified);

        assert!(matches!(
            attribute_query(&scenario, "missing", &topo),
            Err(AnalyzeError::UnknownDigest(_))
        ));

        // A colluded relay with no matching entry is inconsistent.
        let mut broken = events.clone();
        broken.retain(|e| !matches!(e, TraceEvent::RelayForward { relay, .. } if relay == "R2"));
        let scenario = CollusionScenario::from_trace(&broken, ["R2".to_string()]);
        assert!(matches!(
            attribute_query(&scenario, "d1", &topo),
            Err(AnalyzeError::InconsistentLogs(_))
        ));
    }

    #[test]
    fn wilson_interval_behaves() {
        let (lo, hi) = wilson_interval(0, 1000);
        assert!(lo < 1e-9);
        assert!(hi < 0.01);
        let (lo, hi) = wilson_interval(1000, 1000);
        assert!(lo > 0.99);
        assert!(hi > 1.0 - 1e-9);
        let (lo, hi) = wilson_interval(500, 1000);
        assert!(lo < 0.5 && 0.5 < hi);
    }
}
