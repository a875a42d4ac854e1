//! Client proxy and target resolver state machines.
//!
//! The client turns each Do53 query into a sealed payload wrapped in a
//! multi-relay envelope: pick a fresh path, seal toward the path's target,
//! send to the dedicated next-hop, and remember the pending query under
//! the nonce the response will carry. Timeouts retry over a freshly
//! randomized path before giving up with SERVFAIL.
//!
//! The target resolver opens sealed queries, answers them from its static
//! zone, and seals the response back toward the sender's public key. It
//! only ever sees the last relay's address.

use std::collections::BTreeMap;
use std::time::Duration;

use rand::{CryptoRng, Rng, RngCore};

use crate::dnscore::{self, Question, StaticZone};
use crate::pathsel::{self, PathPolicy, RelayPath};
use crate::seal::{self, Direction, KeyPair, Nonce, PublicKey, SealedMessage};
use crate::wire::{self, Envelope, NodeAddr};

/// Whether the client throws away its key pair after every query.
///
/// Per-query keys prevent the resolver from linking a client's queries to
/// each other by the sender public key, at the cost of one extra key
/// generation per query.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum KeyMode {
    #[default]
    EphemeralPerQuery,
    PerProcess,
}

/// Route selection cadence. Fresh per-query paths maximize mixing; a
/// sticky path trades that away for route stability. Retries re-randomize
/// in either mode, turning relay failure into route diversity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PathMode {
    #[default]
    FreshPerQuery,
    Sticky,
}

#[derive(Debug, Clone)]
pub struct ClientConfig {
    pub listen: NodeAddr,
    pub policy: PathPolicy,
    pub query_timeout: Duration,
    pub max_retries: u32,
    pub resolver_public_keys: BTreeMap<NodeAddr, PublicKey>,
    pub key_mode: KeyMode,
    pub path_mode: PathMode,
    pub stats_file: Option<std::path::PathBuf>,
}

impl ClientConfig {
    /// Every target must come with its resolver key.
    pub fn validate(&self) -> Result<(), crate::conf::ConfError> {
        self.policy.validate().map_err(crate::conf::ConfError::Path)?;
        for target in &self.policy.targets {
            if !self.resolver_public_keys.contains_key(target) {
                return Err(crate::conf::ConfError::MissingResolverKey(*target));
            }
        }
        Ok(())
    }
}

/// A query in flight, keyed by the nonce its response will carry.
pub struct PendingQuery {
    pub expected_response_nonce: Nonce,
    pub do53_requester: NodeAddr,
    pub original_dns_id: u16,
    pub path: RelayPath,
    pub sent_at: Duration,
    pub attempts: u32,
    /// Inner query bytes (inner id already applied), resealed on retry.
    inner_query: Vec<u8>,
    /// Original question, echoed into local SERVFAIL responses.
    question: Question,
    /// Keys the response must open under.
    reply_keys: KeyPair,
    /// The resolver key this query was sealed toward; responses must come
    /// from it.
    resolver_public: PublicKey,
}

#[derive(Debug, Default, Clone)]
pub struct ClientCounters {
    pub queries: u64,
    pub answered: u64,
    pub retransmits: u64,
    pub servfail: u64,
    pub formerr: u64,
    pub path_failures: u64,
    pub ignored_unknown_nonce: u64,
    pub ignored_bad_seal: u64,
    pub ignored_wrong_sender: u64,
}

impl ClientCounters {
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "queries": self.queries,
            "answered": self.answered,
            "retransmits": self.retransmits,
            "servfail": self.servfail,
            "formerr": self.formerr,
            "path_failures": self.path_failures,
            "ignored_unknown_nonce": self.ignored_unknown_nonce,
            "ignored_bad_seal": self.ignored_bad_seal,
            "ignored_wrong_sender": self.ignored_wrong_sender,
        })
    }
}

/// Mutable client-side state shared by the receive paths and the timer.
pub struct ClientState {
    pending: BTreeMap<Nonce, PendingQuery>,
    process_keys: Option<KeyPair>,
    sticky_path: Option<RelayPath>,
    pub counters: ClientCounters,
}

impl ClientState {
    pub fn new() -> Self {
        ClientState {
            pending: BTreeMap::new(),
            process_keys: None,
            sticky_path: None,
            counters: ClientCounters::default(),
        }
    }

    pub fn pending_len(&self) -> usize {
        self.pending.len()
    }

    fn reply_keys(&mut self, mode: KeyMode, rng: &mut (impl RngCore + CryptoRng)) -> KeyPair {
        match mode {
            KeyMode::EphemeralPerQuery => KeyPair::generate(rng),
            KeyMode::PerProcess => {
                self.process_keys.get_or_insert_with(|| KeyPair::generate(rng)).clone()
            }
        }
    }

    fn fresh_nonce(&self, rng: &mut (impl RngCore + CryptoRng)) -> Nonce {
        loop {
            let mut nonce = [0u8; seal::NONCE_LEN];
            rng.fill_bytes(&mut nonce);
            if !self.pending.contains_key(&seal::response_nonce(&nonce)) {
                return nonce;
            }
        }
    }
}

impl Default for ClientState {
    fn default() -> Self {
        Self::new()
    }
}

/// A datagram to put on the wire.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Outbound {
    pub dest: NodeAddr,
    pub bytes: Vec<u8>,
}

/// Outcome of handling one Do53 datagram from a stub resolver.
#[derive(Debug)]
pub enum Do53Outcome {
    /// Envelope to send to the path's next-hop; a pending entry was
    /// registered.
    Upstream(Outbound),
    /// Local error response for the requester (FORMERR or SERVFAIL).
    Reject(Outbound),
    /// Nothing can be done (not even an id to echo).
    Ignore,
}

fn seal_and_wrap(
    cfg: &ClientConfig,
    state: &mut ClientState,
    rng: &mut (impl RngCore + CryptoRng),
    inner_query: &[u8],
    path: &RelayPath,
) -> Result<(Outbound, Nonce, KeyPair, PublicKey), seal::SealError> {
    let resolver_public = *cfg
        .resolver_public_keys
        .get(&path.target)
        .expect("config validation guarantees a key per target");
    let reply_keys = state.reply_keys(cfg.key_mode, rng);
    let nonce = state.fresh_nonce(rng);
    let sealed = seal::seal(&reply_keys, &resolver_public, Direction::Query, inner_query, nonce)?;
    let envelope =
        Envelope::Modns { hops: pathsel::to_hop_list(path), payload: sealed.to_bytes() };
    let bytes = wire::encode_envelope(&envelope).expect("constructed envelope is valid");
    Ok((Outbound { dest: path.nexthop, bytes }, nonce, reply_keys, resolver_public))
}

/// Converts one Do53 query into an outbound envelope and registers the
/// pending entry. The inner DNS id is randomized independently of the
/// Do53 id so the two layers cannot be correlated.
pub fn client_handle_do53(
    raw: &[u8],
    from: NodeAddr,
    cfg: &ClientConfig,
    state: &mut ClientState,
    rng: &mut (impl RngCore + CryptoRng),
    now: Duration,
) -> Do53Outcome {
    let question = match dnscore::parse_query(raw) {
        Ok(q) => q,
        Err(_) => {
            state.counters.formerr += 1;
            if raw.len() >= 2 {
                let id = u16::from_be_bytes([raw[0], raw[1]]);
                let bytes = dnscore::build_error_response(id, dnscore::RCODE_FORMERR, None);
                return Do53Outcome::Reject(Outbound { dest: from, bytes });
            }
            return Do53Outcome::Ignore;
        }
    };
    state.counters.queries += 1;

    let cached = match cfg.path_mode {
        PathMode::Sticky => state.sticky_path.clone(),
        PathMode::FreshPerQuery => None,
    };
    let path = match cached {
        Some(path) => path,
        None => match pathsel::select_path(&cfg.policy, rng) {
            Ok(path) => {
                if cfg.path_mode == PathMode::Sticky {
                    state.sticky_path = Some(path.clone());
                }
                path
            }
            Err(_) => {
                state.counters.path_failures += 1;
                let bytes = dnscore::build_error_response(
                    question.id,
                    dnscore::RCODE_SERVFAIL,
                    Some(&question),
                );
                return Do53Outcome::Reject(Outbound { dest: from, bytes });
            }
        },
    };

    let mut inner_query = raw.to_vec();
    let inner_id: u16 = rng.gen();
    inner_query[..2].copy_from_slice(&inner_id.to_be_bytes());

    match seal_and_wrap(cfg, state, rng, &inner_query, &path) {
        Ok((outbound, nonce, reply_keys, resolver_public)) => {
            let expected = seal::response_nonce(&nonce);
            state.pending.insert(
                expected,
                PendingQuery {
                    expected_response_nonce: expected,
                    do53_requester: from,
                    original_dns_id: question.id,
                    path,
                    sent_at: now,
                    attempts: 0,
                    inner_query,
                    question,
                    reply_keys,
                    resolver_public,
                },
            );
            Do53Outcome::Upstream(outbound)
        }
        Err(_) => {
            let bytes = dnscore::build_error_response(
                question.id,
                dnscore::RCODE_SERVFAIL,
                Some(&question),
            );
            Do53Outcome::Reject(Outbound { dest: from, bytes })
        }
    }
}

/// Outcome of handling a datagram on the client's upstream socket.
#[derive(Debug, PartialEq, Eq)]
pub enum ResponseOutcome {
    /// Do53 answer for the original requester, id already rewritten.
    Deliver(Outbound),
    /// Unknown nonce, failed authentication, or mismatched sender;
    /// counted and dropped.
    Ignored,
}

pub fn client_handle_response(
    raw: &[u8],
    state: &mut ClientState,
    _now: Duration,
) -> ResponseOutcome {
    let msg = match SealedMessage::from_bytes(raw) {
        Ok(msg) => msg,
        Err(_) => {
            state.counters.ignored_bad_seal += 1;
            return ResponseOutcome::Ignored;
        }
    };
    let Some(pending) = state.pending.get(&msg.nonce) else {
        state.counters.ignored_unknown_nonce += 1;
        return ResponseOutcome::Ignored;
    };
    // Only the resolver this query was sealed toward may answer it.
    if msg.sender_public != pending.resolver_public {
        state.counters.ignored_wrong_sender += 1;
        return ResponseOutcome::Ignored;
    }
    let mut plain = match seal::open(&pending.reply_keys, &msg, Direction::Response) {
        Ok(plain) => plain,
        Err(_) => {
            state.counters.ignored_bad_seal += 1;
            return ResponseOutcome::Ignored;
        }
    };
    let pending = state.pending.remove(&msg.nonce).expect("looked up above");
    state.counters.answered += 1;
    if plain.len() >= 2 {
        plain[..2].copy_from_slice(&pending.original_dns_id.to_be_bytes());
    }
    ResponseOutcome::Deliver(Outbound { dest: pending.do53_requester, bytes: plain })
}

/// Actions produced by the retry timer.
#[derive(Debug, PartialEq, Eq)]
pub enum TickAction {
    /// Retransmission over a fresh path.
    Retransmit(Outbound),
    /// Local SERVFAIL after the retry budget ran out.
    ServFail(Outbound),
}

/// Retries pending queries older than the timeout over freshly selected
/// paths, then answers SERVFAIL once `max_retries` retransmissions have
/// been spent.
pub fn client_tick(
    cfg: &ClientConfig,
    state: &mut ClientState,
    rng: &mut (impl RngCore + CryptoRng),
    now: Duration,
) -> Vec<TickAction> {
    let due: Vec<Nonce> = state
        .pending
        .iter()
        .filter(|(_, p)| now.saturating_sub(p.sent_at) > cfg.query_timeout)
        .map(|(nonce, _)| *nonce)
        .collect();
    let mut actions = Vec::new();
    for nonce in due {
        let pending = state.pending.remove(&nonce).expect("collected above");
        let servfail = |state: &mut ClientState, pending: &PendingQuery| {
            state.counters.servfail += 1;
            let bytes = dnscore::build_error_response(
                pending.original_dns_id,
                dnscore::RCODE_SERVFAIL,
                Some(&pending.question),
            );
            TickAction::ServFail(Outbound { dest: pending.do53_requester, bytes })
        };
        if pending.attempts >= cfg.max_retries {
            actions.push(servfail(state, &pending));
            continue;
        }
        let Ok(path) = pathsel::select_path(&cfg.policy, rng) else {
            actions.push(servfail(state, &pending));
            continue;
        };
        if cfg.path_mode == PathMode::Sticky {
            state.sticky_path = Some(path.clone());
        }
        match seal_and_wrap(cfg, state, rng, &pending.inner_query, &path) {
            Ok((outbound, fresh_nonce, reply_keys, resolver_public)) => {
                state.counters.retransmits += 1;
                let expected = seal::response_nonce(&fresh_nonce);
                state.pending.insert(
                    expected,
                    PendingQuery {
                        expected_response_nonce: expected,
                        sent_at: now,
                        attempts: pending.attempts + 1,
                        path,
                        reply_keys,
                        resolver_public,
                        ..pending
                    },
                );
                actions.push(TickAction::Retransmit(outbound));
            }
            Err(_) => actions.push(servfail(state, &pending)),
        }
    }
    actions
}

#[derive(Debug, Default, Clone)]
pub struct TargetCounters {
    pub served: u64,
    pub nxdomain: u64,
    pub bad_seal: u64,
    pub malformed_query: u64,
    pub oversize_response: u64,
}

impl TargetCounters {
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "served": self.served,
            "nxdomain": self.nxdomain,
            "bad_seal": self.bad_seal,
            "malformed_query": self.malformed_query,
            "oversize_response": self.oversize_response,
        })
    }
}

/// Opens a sealed query, resolves it against the zone, and seals the
/// response back toward the sender. Undecryptable or unparseable input is
/// silently dropped (and counted); a datagram endpoint has no one to
/// answer.
pub fn target_handle_query(
    raw: &[u8],
    from: NodeAddr,
    keys: &KeyPair,
    zone: &StaticZone,
    counters: &mut TargetCounters,
) -> Option<Outbound> {
    let (question, ctx) = target_open_query(raw, keys, counters)?;
    let (answers, rcode) = zone.resolve(&question);
    if rcode == dnscore::RCODE_NXDOMAIN {
        counters.nxdomain += 1;
    }
    let response = dnscore::build_response(&question, &answers, rcode, zone.default_ttl);
    target_seal_reply(&ctx, keys, &response, from, counters)
}

/// Decryption context carried between opening a query and sealing its
/// reply, so daemons can interpose (e.g. upstream passthrough) between
/// the two steps.
pub struct TargetReplyCtx {
    pub client_public: PublicKey,
    pub response_nonce: Nonce,
}

pub fn target_open_query(
    raw: &[u8],
    keys: &KeyPair,
    counters: &mut TargetCounters,
) -> Option<(Question, TargetReplyCtx)> {
    let msg = match SealedMessage::from_bytes(raw) {
        Ok(msg) => msg,
        Err(_) => {
            counters.bad_seal += 1;
            return None;
        }
    };
    let plain = match seal::open(keys, &msg, Direction::Query) {
        Ok(plain) => plain,
        Err(_) => {
            counters.bad_seal += 1;
            return None;
        }
    };
    let question = match dnscore::parse_query(&plain) {
        Ok(q) => q,
        Err(_) => {
            counters.malformed_query += 1;
            return None;
        }
    };
    Some((
        question,
        TargetReplyCtx {
            client_public: msg.sender_public,
            response_nonce: seal::response_nonce(&msg.nonce),
        },
    ))
}

/// Returns `None` (counted) when the response pads past the datagram
/// budget, e.g. a zone name with an absurd number of records.
pub fn target_seal_reply(
    ctx: &TargetReplyCtx,
    keys: &KeyPair,
    response: &[u8],
    reply_to: NodeAddr,
    counters: &mut TargetCounters,
) -> Option<Outbound> {
    match seal::seal(keys, &ctx.client_public, Direction::Response, response, ctx.response_nonce)
    {
        Ok(sealed) => {
            counters.served += 1;
            Some(Outbound { dest: reply_to, bytes: sealed.to_bytes() })
        }
        Err(_) => {
            counters.oversize_response += 1;
            None
        }
    }
}
