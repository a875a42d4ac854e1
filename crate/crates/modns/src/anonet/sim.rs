//! Deterministic in-memory transport.
//!
//! Nodes run their real decision cores; only the sockets are replaced by
//! a discrete-event queue over a virtual clock. Each link delays a
//! datagram by its configured latency and node processing takes zero
//! virtual time, so round-trip formulas are exactly checkable: a query
//! over `k` subsequent relays crosses `k + 2` links each way.
//!
//! Everything is driven from seeded RNG streams, so a fixed seed yields a
//! bit-identical trace.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap};
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dnscore::{self, QTYPE_A};
use crate::endpoints::{
    self, ClientConfig, ClientState, Do53Outcome, ResponseOutcome, TargetCounters, TickAction,
};
use crate::relaynode::{handle_downstream, RelayAction, RelayCore, SessionTable};
use crate::seal::KeyPair;
use crate::trace::{payload_digest, TraceEvent};
use crate::wire::{self, Envelope, NodeAddr};

use super::topo::{TopologySpec, TransportKind};
use super::{HarnessError, QueryOutcome, RelaySetting, WorkloadResult};

const TICK_INTERVAL: Duration = Duration::from_millis(100);
/// Hard ceiling on processed events, against misconfigured topologies.
const EVENT_BUDGET: u64 = 50_000_000;

#[derive(Debug)]
enum SimEvent {
    Deliver { to: NodeAddr, from: NodeAddr, bytes: Vec<u8> },
    ClientTick { client: usize },
}

struct Scheduled {
    at: Duration,
    seq: u64,
    event: SimEvent,
}

impl PartialEq for Scheduled {
    fn eq(&self, other: &Self) -> bool {
        self.at == other.at && self.seq == other.seq
    }
}
impl Eq for Scheduled {}
impl PartialOrd for Scheduled {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Scheduled {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        (self.at, self.seq).cmp(&(other.at, other.seq))
    }
}

struct SimClient {
    id: String,
    addr: NodeAddr,
    cfg: ClientConfig,
    state: ClientState,
    rng: ChaCha8Rng,
    /// Synthetic address of this client's local stub resolver.
    stub_addr: NodeAddr,
    /// Cache-busting names still to issue.
    remaining: Vec<String>,
    issued_at: BTreeMap<String, Duration>,
    next_dns_id: u16,
    in_flight: Option<InFlight>,
}

struct InFlight {
    qname: String,
    dns_id: u16,
    issued: Duration,
}

struct SimRelay {
    id: String,
    core: RelayCore,
    table: SessionTable,
    next_port: u16,
}

/// What a destination address resolves to inside the simulator.
#[derive(Debug, Clone, Copy)]
enum Route {
    RelayListen(usize),
    RelayEndpoint(usize),
    Target,
    Client(usize),
    Stub(usize),
}

pub(super) struct SimNet<'a> {
    topo: &'a TopologySpec,
    clients: Vec<SimClient>,
    relays: Vec<SimRelay>,
    target_keys: KeyPair,
    target_counters: TargetCounters,
    routes: BTreeMap<NodeAddr, Route>,
    queue: BinaryHeap<Reverse<Scheduled>>,
    now: Duration,
    seq: u64,
    trace: Vec<TraceEvent>,
    outcomes: Vec<QueryOutcome>,
}

fn stub_addr_for(idx: usize) -> NodeAddr {
    format!("127.77.0.{}:1", idx + 1).parse().expect("valid synthetic address")
}

impl<'a> SimNet<'a> {
    pub(super) fn new(
        topo: &'a TopologySpec,
        setting: RelaySetting,
        n_queries: usize,
        seed: u64,
    ) -> Result<Self, HarnessError> {
        let TransportKind::InMemory { .. } = topo.transport else {
            return Err(HarnessError::WrongTransport);
        };
        let mut master = ChaCha8Rng::seed_from_u64(seed);
        let target_keys = KeyPair::generate(&mut master);

        let mut routes = BTreeMap::new();
        let mut clients = Vec::new();
        for (idx, spec) in topo.clients.iter().enumerate() {
            let mut cfg = topo.client_config(spec, target_keys.public());
            if let RelaySetting::Fixed(k) = setting {
                cfg.policy.min_relays = k;
                cfg.policy.max_relays = k;
            }
            cfg.validate().map_err(|e| HarnessError::BadTopology(e.to_string()))?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (0x9e3779b9 + idx as u64));
            let mut remaining: Vec<String> = (0..n_queries)
                .map(|_| workload_qname(topo, &mut rng))
                .collect();
            remaining.reverse();
            let stub_addr = stub_addr_for(idx);
            routes.insert(spec.addr, Route::Client(idx));
            routes.insert(stub_addr, Route::Stub(idx));
            clients.push(SimClient {
                id: spec.id.clone(),
                addr: spec.addr,
                cfg,
                state: ClientState::new(),
                rng,
                stub_addr,
                remaining,
                issued_at: BTreeMap::new(),
                next_dns_id: 1,
                in_flight: None,
            });
        }
        let mut relays = Vec::new();
        for (idx, spec) in topo.relays.iter().enumerate() {
            routes.insert(spec.addr, Route::RelayListen(idx));
            relays.push(SimRelay {
                id: spec.id.clone(),
                core: RelayCore::new(spec.addr, spec.limits.clone()),
                table: SessionTable::new(spec.limits.session_capacity, spec.limits.session_ttl),
                next_port: 32_000,
            });
        }
        routes.insert(topo.target.addr, Route::Target);

        let mut sim = SimNet {
            topo,
            clients,
            relays,
            target_keys,
            target_counters: TargetCounters::default(),
            routes,
            queue: BinaryHeap::new(),
            now: Duration::ZERO,
            seq: 0,
            trace: vec![TraceEvent::Topology { summary: topo.summary() }],
            outcomes: Vec::new(),
        };
        for idx in 0..sim.clients.len() {
            sim.issue_next(idx);
            sim.schedule(TICK_INTERVAL, SimEvent::ClientTick { client: idx });
        }
        Ok(sim)
    }

    fn t_us(&self) -> u64 {
        self.now.as_micros() as u64
    }

    fn schedule(&mut self, delay: Duration, event: SimEvent) {
        self.seq += 1;
        self.queue.push(Reverse(Scheduled { at: self.now + delay, seq: self.seq, event }));
    }

    /// Node id owning an address, for latency lookup.
    fn node_id_of(&self, addr: NodeAddr) -> String {
        match self.routes.get(&addr) {
            Some(Route::Client(i)) | Some(Route::Stub(i)) => self.clients[*i].id.clone(),
            Some(Route::RelayListen(i)) | Some(Route::RelayEndpoint(i)) => {
                self.relays[*i].id.clone()
            }
            Some(Route::Target) => self.topo.target.id.clone(),
            None => String::new(),
        }
    }

    fn send(&mut self, from: NodeAddr, to: NodeAddr, bytes: Vec<u8>) {
        let (a, b) = (self.node_id_of(from), self.node_id_of(to));
        // A client's local stub shares its host: zero latency.
        let latency = if a == b { Duration::ZERO } else { self.topo.link_latency(&a, &b) };
        self.schedule(latency, SimEvent::Deliver { to, from, bytes });
    }

    fn issue_next(&mut self, idx: usize) {
        let Some(qname) = self.clients[idx].remaining.pop() else { return };
        let client = &mut self.clients[idx];
        client.next_dns_id = client.next_dns_id.wrapping_add(1).max(1);
        let dns_id = client.next_dns_id;
        let query = dnscore::build_query(dns_id, &qname, QTYPE_A);
        client.in_flight = Some(InFlight { qname: qname.clone(), dns_id, issued: self.now });
        client.issued_at.insert(qname, self.now);
        let stub = client.stub_addr;
        let now = self.now;
        let outcome =
            endpoints::client_handle_do53(&query, stub, &client.cfg, &mut client.state, &mut client.rng, now);
        self.after_client_send(idx, outcome, 0);
    }

    fn after_client_send(&mut self, idx: usize, outcome: Do53Outcome, attempt: u32) {
        match outcome {
            Do53Outcome::Upstream(out) => {
                let client_addr = self.clients[idx].addr;
                if let Ok(env) = wire::decode_envelope(&out.bytes) {
                    let hops = match &env {
                        Envelope::Modns { hops, .. } => {
                            hops.iter().map(|h| h.to_string()).collect()
                        }
                        _ => Vec::new(),
                    };
                    let qname = self.clients[idx]
                        .in_flight
                        .as_ref()
                        .map(|f| f.qname.clone())
                        .unwrap_or_default();
                    self.trace.push(TraceEvent::ClientSend {
                        t_us: self.t_us(),
                        client: self.clients[idx].id.clone(),
                        digest: payload_digest(env.payload()),
                        nexthop: out.dest.to_string(),
                        hops,
                        qname,
                        attempt,
                    });
                }
                self.send(client_addr, out.dest, out.bytes);
            }
            Do53Outcome::Reject(out) => {
                // Delivered straight back to the stub.
                let client_addr = self.clients[idx].addr;
                self.send(client_addr, out.dest, out.bytes);
            }
            Do53Outcome::Ignore => {}
        }
    }

    fn deliver(&mut self, to: NodeAddr, from: NodeAddr, bytes: Vec<u8>) {
        let Some(route) = self.routes.get(&to).copied() else { return };
        match route {
            Route::RelayListen(idx) => self.relay_upstream(idx, from, bytes),
            Route::RelayEndpoint(idx) => self.relay_downstream(idx, to, bytes),
            Route::Target => self.target_recv(from, bytes),
            Route::Client(idx) => self.client_recv(idx, bytes),
            Route::Stub(idx) => self.stub_recv(idx, bytes),
        }
    }

    fn relay_upstream(&mut self, idx: usize, from: NodeAddr, bytes: Vec<u8>) {
        let action = self.relays[idx].core.handle_upstream(&bytes, from);
        match action {
            RelayAction::ForwardUpstream { dest, bytes: fwd } => {
                let (digest, remaining) = match wire::decode_envelope(&fwd) {
                    Ok(env) => {
                        let remaining = match &env {
                            Envelope::Modns { hops, .. } => {
                                let concat: Vec<u8> =
                                    hops.iter().flat_map(|h| h.encode()).collect();
                                payload_digest(&concat)
                            }
                            _ => "-".to_string(),
                        };
                        (payload_digest(env.payload()), remaining)
                    }
                    Err(_) => (payload_digest(&fwd), "-".to_string()),
                };
                let now = self.now;
                let relay = &mut self.relays[idx];
                let relay_ip = relay.core.public_addr.ip();
                let (endpoint, is_new) = {
                    let next_port = &mut relay.next_port;
                    let out = relay
                        .table
                        .open_session(from, now, || {
                            *next_port += 1;
                            NodeAddr::new(relay_ip, *next_port)
                        })
                        .expect("session capacity not exhausted in simulation");
                    (out.endpoint, !out.reused)
                };
                let relay_id = self.relays[idx].id.clone();
                if is_new {
                    self.routes.insert(endpoint, Route::RelayEndpoint(idx));
                    self.trace.push(TraceEvent::AddrBook {
                        addr: endpoint.to_string(),
                        node: relay_id.clone(),
                    });
                }
                self.trace.push(TraceEvent::RelayForward {
                    t_us: self.t_us(),
                    relay: relay_id,
                    prev_hop: from.to_string(),
                    next_hop: dest.to_string(),
                    digest,
                    remaining_hops_digest: remaining,
                });
                self.send(endpoint, dest, fwd);
            }
            RelayAction::Drop { reason } => {
                self.trace.push(TraceEvent::RelayDrop {
                    t_us: self.t_us(),
                    relay: self.relays[idx].id.clone(),
                    reason: reason.as_str().to_string(),
                });
            }
            RelayAction::ForwardDownstream { .. } => unreachable!("upstream handler"),
        }
    }

    fn relay_downstream(&mut self, idx: usize, endpoint: NodeAddr, bytes: Vec<u8>) {
        let now = self.now;
        let action = handle_downstream(&bytes, endpoint, &mut self.relays[idx].table, now);
        match action {
            RelayAction::ForwardDownstream { dest, bytes } => {
                // Responses leave from the public listen address.
                let listen = self.relays[idx].core.public_addr;
                self.send(listen, dest, bytes);
            }
            RelayAction::Drop { reason } => {
                self.trace.push(TraceEvent::RelayDrop {
                    t_us: self.t_us(),
                    relay: self.relays[idx].id.clone(),
                    reason: reason.as_str().to_string(),
                });
            }
            RelayAction::ForwardUpstream { .. } => unreachable!("downstream handler"),
        }
    }

    fn target_recv(&mut self, from: NodeAddr, bytes: Vec<u8>) {
        self.trace.push(TraceEvent::ResolverRecv {
            t_us: self.t_us(),
            sender: from.to_string(),
            digest: payload_digest(&bytes),
            sealed_hex: hex::encode(&bytes),
        });
        let reply = endpoints::target_handle_query(
            &bytes,
            from,
            &self.target_keys,
            &self.topo.target.zone,
            &mut self.target_counters,
        );
        if let Some(out) = reply {
            self.send(self.topo.target.addr, out.dest, out.bytes);
        }
    }

    fn client_recv(&mut self, idx: usize, bytes: Vec<u8>) {
        let now = self.now;
        let outcome = endpoints::client_handle_response(&bytes, &mut self.clients[idx].state, now);
        if let ResponseOutcome::Deliver(out) = outcome {
            let client_addr = self.clients[idx].addr;
            self.send(client_addr, out.dest, out.bytes);
        }
    }

    /// The stub resolver got its Do53 answer: record the outcome and
    /// issue the client's next query.
    fn stub_recv(&mut self, idx: usize, bytes: Vec<u8>) {
        let Some(flight) = self.clients[idx].in_flight.take() else { return };
        let rtt = self.now - flight.issued;
        let parsed = dnscore::parse_response(&bytes);
        let ok = match parsed {
            Ok(resp) => {
                resp.id == flight.dns_id
                    && resp.rcode == dnscore::RCODE_NOERROR
                    && answers_match_zone(self.topo, &flight.qname, &resp.answers)
            }
            Err(_) => false,
        };
        self.trace.push(TraceEvent::ClientRecv {
            t_us: self.t_us(),
            client: self.clients[idx].id.clone(),
            qname: flight.qname.clone(),
            rtt_us: rtt.as_micros() as u64,
            ok,
        });
        self.outcomes.push(QueryOutcome {
            client: self.clients[idx].id.clone(),
            qname: flight.qname,
            rtt,
            ok,
        });
        self.issue_next(idx);
    }

    fn client_tick(&mut self, idx: usize) {
        let now = self.now;
        let actions = {
            let client = &mut self.clients[idx];
            endpoints::client_tick(&client.cfg, &mut client.state, &mut client.rng, now)
        };
        for action in actions {
            match action {
                TickAction::Retransmit(out) => {
                    let attempt = 1; // informational; exact count lives in state
                    self.after_client_send(idx, Do53Outcome::Upstream(out), attempt);
                }
                TickAction::ServFail(out) => {
                    let client_addr = self.clients[idx].addr;
                    self.send(client_addr, out.dest, out.bytes);
                }
            }
        }
        let outstanding = self.clients[idx].in_flight.is_some()
            || !self.clients[idx].remaining.is_empty();
        if outstanding {
            self.schedule(TICK_INTERVAL, SimEvent::ClientTick { client: idx });
        }
    }

    pub(super) fn run(mut self) -> Result<WorkloadResult, HarnessError> {
        let mut events = 0u64;
        while let Some(Reverse(next)) = self.queue.pop() {
            events += 1;
            if events > EVENT_BUDGET {
                return Err(HarnessError::Timeout {
                    detail: "event budget exhausted".to_string(),
                });
            }
            self.now = next.at;
            match next.event {
                SimEvent::Deliver { to, from, bytes } => self.deliver(to, from, bytes),
                SimEvent::ClientTick { client } => self.client_tick(client),
            }
        }
        for (idx, client) in self.clients.iter().enumerate() {
            if client.in_flight.is_some() || !client.remaining.is_empty() {
                return Err(HarnessError::Timeout {
                    detail: format!("client {} finished with queries outstanding", idx),
                });
            }
        }
        let limit = self
            .clients
            .iter()
            .map(|c| c.cfg.query_timeout)
            .max()
            .unwrap_or(Duration::from_secs(5))
            * 10;
        if let Some(slow) = self.outcomes.iter().find(|o| o.rtt > limit) {
            return Err(HarnessError::Timeout {
                detail: format!("query {} took {:?}", slow.qname, slow.rtt),
            });
        }
        Ok(WorkloadResult {
            trace: self.trace,
            queries: self.outcomes,
            client_counters: self
                .clients
                .iter()
                .map(|c| (c.id.clone(), c.state.counters.clone()))
                .collect(),
            target_counters: self.target_counters,
        })
    }
}

/// Every workload query targets a wildcard suffix so the resolver can
/// always answer while never hitting a cache.
fn workload_qname(topo: &TopologySpec, rng: &mut impl Rng) -> String {
    let suffix = topo
        .target
        .zone
        .wildcard_suffixes()
        .first()
        .cloned()
        .unwrap_or_else(|| "example.com".to_string());
    dnscore::gen_cachebust_name(&suffix, rng)
}

fn answers_match_zone(
    topo: &TopologySpec,
    qname: &str,
    answers: &[(String, u16, Vec<u8>)],
) -> bool {
    let question =
        dnscore::Question { id: 0, qname: qname.to_string(), qtype: QTYPE_A, qclass: 1 };
    let (expected, rcode) = topo.target.zone.resolve(&question);
    if rcode != dnscore::RCODE_NOERROR || expected.len() != answers.len() {
        return false;
    }
    expected.iter().zip(answers).all(|(rec, (name, qtype, rdata))| {
        name == qname && *qtype == rec.qtype() && *rdata == rec.rdata()
    })
}
