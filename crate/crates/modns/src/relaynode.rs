//! The relay's decision core: classify an inbound datagram, enforce the
//! hop-limit and loop rules, strip the first hop, and route responses back
//! downstream through a session table.
//!
//! Everything here is transport-free. The daemon and the simulator feed
//! datagrams in and execute the returned [`RelayAction`]; side effects are
//! confined to the session table.

use std::collections::{BTreeMap, HashMap};
use std::time::Duration;

use thiserror::Error;

use crate::wire::{self, Envelope, NodeAddr};

/// Operating limits for one relay.
#[derive(Debug, Clone)]
pub struct RelayLimits {
    /// Threshold `T`: a query still listing more than `T` relays after
    /// this one is dropped as overload protection.
    pub max_subsequent_hops: usize,
    pub session_ttl: Duration,
    pub session_capacity: usize,
    pub max_datagram: usize,
}

impl Default for RelayLimits {
    fn default() -> Self {
        RelayLimits {
            max_subsequent_hops: 8,
            session_ttl: Duration::from_secs(10),
            session_capacity: 65_536,
            max_datagram: 65_507,
        }
    }
}

/// Why a datagram was dropped instead of forwarded.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DropReason {
    HopLimitExceeded,
    LoopDetected,
    Truncated,
    ZeroHops,
    Oversize,
    /// A bare payload arrived on the public port; relays never terminate
    /// queries themselves.
    NotRelayable,
    /// A response arrived on an endpoint with no live session.
    UnknownSession,
}

impl DropReason {
    pub fn as_str(&self) -> &'static str {
        match self {
            DropReason::HopLimitExceeded => "hop_limit_exceeded",
            DropReason::LoopDetected => "loop_detected",
            DropReason::Truncated => "truncated",
            DropReason::ZeroHops => "zero_hops",
            DropReason::Oversize => "oversize",
            DropReason::NotRelayable => "not_relayable",
            DropReason::UnknownSession => "unknown_session",
        }
    }
}

/// What to do with one inbound datagram.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RelayAction {
    ForwardUpstream { dest: NodeAddr, bytes: Vec<u8> },
    ForwardDownstream { dest: NodeAddr, bytes: Vec<u8> },
    Drop { reason: DropReason },
}

/// The stateless part of the relay: its own public address and limits.
#[derive(Debug, Clone)]
pub struct RelayCore {
    pub public_addr: NodeAddr,
    pub limits: RelayLimits,
}

impl RelayCore {
    pub fn new(public_addr: NodeAddr, limits: RelayLimits) -> Self {
        RelayCore { public_addr, limits }
    }

    /// Decides the fate of a datagram that arrived on the public port.
    ///
    /// Multi-relay queries are checked against the hop threshold, then for
    /// loops (any duplicate in the remaining hop list, or this relay's own
    /// address anywhere in it), then stripped and forwarded. Single-relay
    /// queries forward their bare payload to the header target. Bare
    /// payloads are dropped. Datagram protocols cannot signal the sender,
    /// so every failure surfaces as a [`RelayAction::Drop`].
    pub fn handle_upstream(&self, raw: &[u8], from: NodeAddr) -> RelayAction {
        if raw.len() > self.limits.max_datagram {
            return RelayAction::Drop { reason: DropReason::Oversize };
        }
        let envelope = match wire::decode_envelope(raw) {
            Ok(env) => env,
            Err(wire::WireError::ZeroHops) => {
                return RelayAction::Drop { reason: DropReason::ZeroHops }
            }
            Err(_) => return RelayAction::Drop { reason: DropReason::Truncated },
        };
        match envelope {
            Envelope::Modns { ref hops, .. } => {
                // n hops listed means n - 1 relays follow this one.
                if hops.len() - 1 > self.limits.max_subsequent_hops {
                    return RelayAction::Drop { reason: DropReason::HopLimitExceeded };
                }
                let mut seen = std::collections::HashSet::with_capacity(hops.len());
                for hop in hops {
                    if !seen.insert(hop) || *hop == self.public_addr {
                        log::debug!("loop in hop list from {from}");
                        return RelayAction::Drop { reason: DropReason::LoopDetected };
                    }
                }
                let (next, forwarded) =
                    wire::strip_first_hop(&envelope).expect("envelope is multi-relay");
                let bytes = wire::encode_envelope(&forwarded)
                    .expect("stripping a valid envelope yields a valid envelope");
                RelayAction::ForwardUpstream { dest: next, bytes }
            }
            Envelope::Adns { target, payload } => {
                RelayAction::ForwardUpstream { dest: target, bytes: payload }
            }
            Envelope::Bare { .. } => RelayAction::Drop { reason: DropReason::NotRelayable },
        }
    }
}

/// Routes a response that arrived on an upstream endpoint back to the
/// downstream peer recorded for that endpoint. Responses are never parsed
/// or modified.
pub fn handle_downstream(
    raw: &[u8],
    arrived_on: NodeAddr,
    table: &mut SessionTable,
    now: Duration,
) -> RelayAction {
    if raw.is_empty() {
        return RelayAction::Drop { reason: DropReason::Truncated };
    }
    match table.route_downstream(arrived_on, now) {
        Some(peer) => RelayAction::ForwardDownstream { dest: peer, bytes: raw.to_vec() },
        None => RelayAction::Drop { reason: DropReason::UnknownSession },
    }
}

/// Back-path state for one downstream peer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SessionEntry {
    pub upstream_local_endpoint: NodeAddr,
    pub downstream_peer: NodeAddr,
    pub created_at: Duration,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SessionError {
    #[error("session table full and nothing evictable")]
    TableFull,
}

/// Result of [`SessionTable::open_session`].
#[derive(Debug)]
pub struct OpenOutcome {
    pub endpoint: NodeAddr,
    /// Whether an existing live session was reused.
    pub reused: bool,
    /// An entry displaced by LRU eviction; the caller owns closing its
    /// socket.
    pub evicted: Option<SessionEntry>,
}

struct Slot {
    entry: SessionEntry,
    last_used: u64,
}

/// Maps upstream endpoints back to downstream peers.
///
/// One live entry per endpoint and per peer (the mapping is a bijection
/// among unexpired entries). Peers reuse their endpoint for the lifetime
/// of the session; expiry is strict (`now - created_at > ttl`), and a
/// full table evicts the least recently used entry.
pub struct SessionTable {
    capacity: usize,
    ttl: Duration,
    by_endpoint: HashMap<NodeAddr, Slot>,
    by_peer: HashMap<NodeAddr, NodeAddr>,
    /// last_used sequence -> endpoint, for deterministic LRU eviction.
    order: BTreeMap<u64, NodeAddr>,
    clock: u64,
}

impl SessionTable {
    pub fn new(capacity: usize, ttl: Duration) -> Self {
        SessionTable {
            capacity,
            ttl,
            by_endpoint: HashMap::new(),
            by_peer: HashMap::new(),
            order: BTreeMap::new(),
            clock: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.by_endpoint.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_endpoint.is_empty()
    }

    fn is_live(&self, entry: &SessionEntry, now: Duration) -> bool {
        now.saturating_sub(entry.created_at) <= self.ttl
    }

    fn touch(&mut self, endpoint: NodeAddr) {
        self.clock += 1;
        if let Some(slot) = self.by_endpoint.get_mut(&endpoint) {
            self.order.remove(&slot.last_used);
            slot.last_used = self.clock;
            self.order.insert(self.clock, endpoint);
        }
    }

    fn remove_endpoint(&mut self, endpoint: NodeAddr) -> Option<SessionEntry> {
        let slot = self.by_endpoint.remove(&endpoint)?;
        self.order.remove(&slot.last_used);
        self.by_peer.remove(&slot.entry.downstream_peer);
        Some(slot.entry)
    }

    /// Returns the endpoint bound to `peer`, reusing a live session or
    /// allocating a fresh endpoint via `alloc`. A full table evicts its
    /// least recently used entry first.
    ///
    /// Reuse refreshes `created_at`: the TTL measures idle time, so an
    /// active flow keeps its back-path for as long as it keeps querying.
    pub fn open_session(
        &mut self,
        peer: NodeAddr,
        now: Duration,
        alloc: impl FnOnce() -> NodeAddr,
    ) -> Result<OpenOutcome, SessionError> {
        if let Some(&endpoint) = self.by_peer.get(&peer) {
            let live = self.is_live(&self.by_endpoint[&endpoint].entry, now);
            if live {
                self.touch(endpoint);
                let slot = self.by_endpoint.get_mut(&endpoint).expect("present above");
                slot.entry.created_at = now;
                return Ok(OpenOutcome { endpoint, reused: true, evicted: None });
            }
            self.remove_endpoint(endpoint);
        }
        let mut evicted = None;
        if self.by_endpoint.len() >= self.capacity {
            let lru = self.order.values().next().copied();
            match lru {
                Some(endpoint) => evicted = self.remove_endpoint(endpoint),
                None => return Err(SessionError::TableFull),
            }
        }
        let endpoint = alloc();
        self.clock += 1;
        self.by_endpoint.insert(
            endpoint,
            Slot {
                entry: SessionEntry {
                    upstream_local_endpoint: endpoint,
                    downstream_peer: peer,
                    created_at: now,
                },
                last_used: self.clock,
            },
        );
        self.by_peer.insert(peer, endpoint);
        self.order.insert(self.clock, endpoint);
        Ok(OpenOutcome { endpoint, reused: false, evicted })
    }

    /// Live-session lookup for a response arriving on `endpoint`.
    /// Expired entries are never used for routing.
    pub fn route_downstream(&mut self, endpoint: NodeAddr, now: Duration) -> Option<NodeAddr> {
        let slot = self.by_endpoint.get(&endpoint)?;
        if !self.is_live(&slot.entry, now) {
            return None;
        }
        let peer = slot.entry.downstream_peer;
        self.touch(endpoint);
        Some(peer)
    }

    /// Removes every entry older than the TTL (strictly), returning them
    /// so the caller can close their sockets. Idempotent.
    pub fn purge_expired(&mut self, now: Duration) -> Vec<SessionEntry> {
        let expired: Vec<NodeAddr> = self
            .by_endpoint
            .iter()
            .filter(|(_, slot)| !self.is_live(&slot.entry, now))
            .map(|(endpoint, _)| *endpoint)
            .collect();
        let mut removed: Vec<SessionEntry> =
            expired.into_iter().filter_map(|e| self.remove_endpoint(e)).collect();
        removed.sort_by_key(|e| e.upstream_local_endpoint);
        removed
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::wire::{encode_envelope, Envelope, MODNS_MAGIC};

    fn addr(s: &str) -> NodeAddr {
        s.parse().unwrap()
    }

    fn core() -> RelayCore {
        RelayCore::new(addr("10.0.0.9:8443"), RelayLimits::default())
    }

    fn secs(s: u64) -> Duration {
        Duration::from_secs(s)
    }

    #[test]
    fn strips_and_forwards_multi_relay_queries() {
        let core = core();
        let r2 = addr("10.0.0.2:8443");
        let t = addr("10.0.1.1:5353");
        let raw = encode_envelope(&Envelope::Modns {
            hops: vec![r2, t],
            payload: b"sealed".to_vec(),
        })
        .unwrap();
        let action = core.handle_upstream(&raw, addr("10.0.0.1:999"));
        let expected = encode_envelope(&Envelope::Modns {
            hops: vec![t],
            payload: b"sealed".to_vec(),
        })
        .unwrap();
        assert_eq!(action, RelayAction::ForwardUpstream { dest: r2, bytes: expected });
    }

    #[test]
    fn last_relay_forwards_the_bare_payload() {
        let core = core();
        let t = addr("10.0.1.1:5353");
        let raw = encode_envelope(&Envelope::Modns {
            hops: vec![t],
            payload: b"sealed".to_vec(),
        })
        .unwrap();
        assert_eq!(
            core.handle_upstream(&raw, addr("10.0.0.1:999")),
            RelayAction::ForwardUpstream { dest: t, bytes: b"sealed".to_vec() }
        );
    }

    #[test]
    fn duplicate_hops_are_a_loop() {
        let core = core();
        let r2 = addr("10.0.0.2:8443");
        let t = addr("10.0.1.1:5353");
        let raw = encode_envelope(&Envelope::Modns {
            hops: vec![r2, r2, t],
            payload: b"p".to_vec(),
        })
        .unwrap();
        assert_eq!(
            core.handle_upstream(&raw, addr("10.0.0.1:999")),
            RelayAction::Drop { reason: DropReason::LoopDetected }
        );
    }

    #[test]
    fn own_address_in_hops_is_a_loop() {
        let core = core();
        let raw = encode_envelope(&Envelope::Modns {
            hops: vec![addr("10.0.0.2:8443"), core.public_addr, addr("10.0.1.1:5353")],
            payload: b"p".to_vec(),
        })
        .unwrap();
        assert_eq!(
            core.handle_upstream(&raw, addr("10.0.0.1:999")),
            RelayAction::Drop { reason: DropReason::LoopDetected }
        );
    }

    #[test]
    fn hop_limit_applies_to_remaining_relays() {
        let mut core = core();
        core.limits.max_subsequent_hops = 2;
        // n = 4 hops listed -> 3 relays after this one -> over T = 2.
        let hops: Vec<NodeAddr> =
            (1..=4).map(|i| addr(&format!("10.0.2.{i}:8443"))).collect();
        let raw =
            encode_envelope(&Envelope::Modns { hops, payload: b"p".to_vec() }).unwrap();
        assert_eq!(
            core.handle_upstream(&raw, addr("10.0.0.1:999")),
            RelayAction::Drop { reason: DropReason::HopLimitExceeded }
        );
        // n = 3 -> exactly T remaining -> forwarded.
        let hops: Vec<NodeAddr> =
            (1..=3).map(|i| addr(&format!("10.0.2.{i}:8443"))).collect();
        let raw =
            encode_envelope(&Envelope::Modns { hops, payload: b"p".to_vec() }).unwrap();
        assert!(matches!(
            core.handle_upstream(&raw, addr("10.0.0.1:999")),
            RelayAction::ForwardUpstream { .. }
        ));
    }

    #[test]
    fn single_relay_queries_forward_to_the_header_target() {
        let core = core();
        let t = addr("203.0.113.7:8443");
        let raw = encode_envelope(&Envelope::Adns { target: t, payload: b"q".to_vec() }).unwrap();
        assert_eq!(
            core.handle_upstream(&raw, addr("10.0.0.1:999")),
            RelayAction::ForwardUpstream { dest: t, bytes: b"q".to_vec() }
        );
    }

    #[test]
    fn malformed_classes_always_drop() {
        let core = core();
        let from = addr("10.0.0.1:999");

        let mut zero_hops = MODNS_MAGIC.to_vec();
        zero_hops.push(0);
        zero_hops.extend_from_slice(&[7; 30]);
        assert_eq!(
            core.handle_upstream(&zero_hops, from),
            RelayAction::Drop { reason: DropReason::ZeroHops }
        );

        let mut truncated = MODNS_MAGIC.to_vec();
        truncated.push(3);
        truncated.extend_from_slice(&[7; 20]);
        assert_eq!(
            core.handle_upstream(&truncated, from),
            RelayAction::Drop { reason: DropReason::Truncated }
        );

        assert_eq!(
            core.handle_upstream(&[], from),
            RelayAction::Drop { reason: DropReason::Truncated }
        );

        let oversize = vec![0u8; core.limits.max_datagram + 1];
        assert_eq!(
            core.handle_upstream(&oversize, from),
            RelayAction::Drop { reason: DropReason::Oversize }
        );

        assert_eq!(
            core.handle_upstream(b"\x01just a payload", from),
            RelayAction::Drop { reason: DropReason::NotRelayable }
        );
    }

    /// Forwarded bytes never contain the previous hop's address.
    #[test]
    fn forwarded_bytes_carry_no_prior_hop_information()  {
        let core = core();
        let from = addr("172.16.3.3:5555");
        let from_enc = from.encode();
        let hops: Vec<NodeAddr> =
            (1..=5).map(|i| addr(&format!("10.0.2.{i}:8443"))).collect();
        let mut raw = encode_envelope(&Envelope::Modns {
            hops: hops.clone(),
            payload: b"payload-without-addresses".to_vec(),
        })
        .unwrap();
        let mut prev = from;
        for expected_next in hops {
            let action = core.handle_upstream(&raw, prev);
            let RelayAction::ForwardUpstream { dest, bytes } = action else {
                panic!("expected forward, got {action:?}");
            };
            assert_eq!(dest, expected_next);
            assert!(
                !bytes.windows(from_enc.len()).any(|w| w == from_enc),
                "origin address leaked upstream"
            );
            let prev_enc = prev.encode();
            assert!(!bytes.windows(prev_enc.len()).any(|w| w == prev_enc));
            prev = dest;
            raw = bytes;
        }
        assert_eq!(raw, b"payload-without-addresses");
    }

    #[test]
    fn distinct_peers_get_distinct_endpoints_and_reuse_their_own() {
        let mut table = SessionTable::new(16, secs(10));
        let mut next_port = 40_000u16;
        let mut alloc = || {
            next_port += 1;
            addr(&format!("10.0.0.9:{next_port}"))
        };

        let a = table.open_session(addr("10.1.0.1:1111"), secs(0), &mut alloc).unwrap();
        let b = table.open_session(addr("10.1.0.2:2222"), secs(1), &mut alloc).unwrap();
        assert_ne!(a.endpoint, b.endpoint);
        assert!(!a.reused && !b.reused);

        let again = table.open_session(addr("10.1.0.1:1111"), secs(5), &mut alloc).unwrap();
        assert_eq!(again.endpoint, a.endpoint);
        assert!(again.reused);
        assert_eq!(table.len(), 2);
    }

    #[test]
    fn capacity_one_evicts_the_least_recently_used() {
        let mut table = SessionTable::new(1, secs(10));
        let mut next_port = 50_000u16;
        let mut alloc = || {
            next_port += 1;
            addr(&format!("10.0.0.9:{next_port}"))
        };
        let first = table.open_session(addr("10.1.0.1:1111"), secs(0), &mut alloc).unwrap();
        let second = table.open_session(addr("10.1.0.2:2222"), secs(1), &mut alloc).unwrap();
        assert_eq!(second.evicted.unwrap().downstream_peer, addr("10.1.0.1:1111"));
        assert_eq!(table.len(), 1);
        assert_eq!(table.route_downstream(first.endpoint, secs(1)), None);
    }

    #[test]
    fn responses_route_by_arrival_endpoint_only() {
        let mut table = SessionTable::new(16, secs(10));
        let peer = addr("10.1.0.1:1111");
        let out = table.open_session(peer, secs(0), || addr("10.0.0.9:40001")).unwrap();

        let action = handle_downstream(b"resp-bytes", out.endpoint, &mut table, secs(2));
        assert_eq!(
            action,
            RelayAction::ForwardDownstream { dest: peer, bytes: b"resp-bytes".to_vec() }
        );

        // TTL expiry: strict, so exactly at the boundary still routes.
        let action = handle_downstream(b"r", out.endpoint, &mut table, secs(10));
        assert!(matches!(action, RelayAction::ForwardDownstream { .. }));
        let action = handle_downstream(b"r", out.endpoint, &mut table, secs(11));
        assert_eq!(action, RelayAction::Drop { reason: DropReason::UnknownSession });

        let action = handle_downstream(b"r", addr("10.0.0.9:49999"), &mut table, secs(2));
        assert_eq!(action, RelayAction::Drop { reason: DropReason::UnknownSession });

        let action = handle_downstream(b"", out.endpoint, &mut table, secs(2));
        assert_eq!(action, RelayAction::Drop { reason: DropReason::Truncated });
    }

    #[test]
    fn purge_removes_exactly_the_expired_half() {
        let mut table = SessionTable::new(256, secs(10));
        for i in 0..100u16 {
            let created = if i < 50 { secs(0) } else { secs(30) };
            let port = 41_001 + i;
            table
                .open_session(addr(&format!("10.1.0.{}:{}", i % 250, 1000 + i)), created, || {
                    addr(&format!("10.0.0.9:{port}"))
                })
                .unwrap();
        }
        assert_eq!(table.purge_expired(secs(0)).len(), 0);
        assert_eq!(table.purge_expired(secs(31)).len(), 50);
        assert_eq!(table.len(), 50);
        // Idempotent.
        assert_eq!(table.purge_expired(secs(31)).len(), 0);
        // Boundary is strict: entries created at 30 expire only after 40.
        assert_eq!(table.purge_expired(secs(40)).len(), 0);
        assert_eq!(table.purge_expired(secs(41)).len(), 50);
        assert!(table.is_empty());
    }

    #[test]
    fn zero_capacity_table_is_full() {
        let mut table = SessionTable::new(0, secs(10));
        assert_eq!(
            table
                .open_session(addr("10.1.0.1:1111"), secs(0), || addr("10.0.0.9:40001"))
                .err(),
            Some(SessionError::TableFull)
        );
    }

    #[test]
    fn live_sessions_stay_bijective() {
        let mut table = SessionTable::new(64, secs(10));
        let mut next_port = 42_000u16;
        let mut alloc = || {
            next_port += 1;
            addr(&format!("10.0.0.9:{next_port}"))
        };
        let mut endpoints = std::collections::HashSet::new();
        for i in 0..40u16 {
            let out =
                table.open_session(addr(&format!("10.1.1.1:{}", 2000 + i)), secs(1), &mut alloc)
                    .unwrap();
            assert!(endpoints.insert(out.endpoint), "endpoint reused across peers");
        }
        // Re-opening every peer keeps the same endpoints.
        for i in 0..40u16 {
            let out =
                table.open_session(addr(&format!("10.1.1.1:{}", 2000 + i)), secs(2), &mut alloc)
                    .unwrap();
            assert!(out.reused);
        }
        assert_eq!(table.len(), 40);
    }
}
