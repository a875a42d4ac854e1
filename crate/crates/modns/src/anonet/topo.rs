//! Topology descriptions for the in-process harness.
//!
//! A topology file is line-oriented, `#` comments:
//!
//! ```text
//! transport inmem latency_ms=5      # or: transport loopback
//! target X 10.9.0.1:5353
//! zone ttl 60
//! zone *.example.com A 10.53.0.99
//! relay R1 10.0.1.1:8443 max_hops=8
//! relay R2 10.0.2.1:8443
//! client A 10.100.1.1:53 nexthops=R1 min=0 max=2 timeout_ms=2000 retries=2
//! client B 10.100.2.1:53 nexthops=R2 min=0 max=2 relays=R1,R2
//! link A R1 7                       # per-link latency override in ms
//! ```
//!
//! Every relay is listed in every client's pool unless the client line
//! restricts it with `relays=`. A client's `nexthops=` relays are its
//! flagged (dedicated) entries. In-memory topologies must give every node
//! a distinct IP so that log analysis can map observed endpoints back to
//! nodes, exactly as public IPs would in a deployment.

use std::collections::{BTreeMap, BTreeSet};
use std::net::IpAddr;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dnscore::StaticZone;
use crate::endpoints::{ClientConfig, KeyMode};
use crate::pathsel::{PathPolicy, RelayEntry};
use crate::relaynode::RelayLimits;
use crate::seal::PublicKey;
use crate::wire::NodeAddr;

#[derive(Debug, Error)]
pub enum TopoError {
    #[error("line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("duplicate id {0}")]
    DuplicateId(String),
    #[error("client {client} references unknown relay {relay}")]
    UnknownRelay { client: String, relay: String },
    #[error("in-memory topologies need distinct IPs, {0} is reused")]
    DuplicateIp(IpAddr),
    #[error("topology has no {0}")]
    Missing(&'static str),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TransportKind {
    InMemory { link_latency: Duration },
    Loopback,
}

#[derive(Debug, Clone)]
pub struct ClientSpec {
    pub id: String,
    pub addr: NodeAddr,
    /// Relay ids flagged as this client's dedicated next-hop candidates.
    pub nexthops: Vec<String>,
    /// Relay ids in this client's list; `None` means every relay.
    pub pool: Option<Vec<String>>,
    pub min_relays: usize,
    pub max_relays: usize,
    pub query_timeout: Duration,
    pub max_retries: u32,
}

#[derive(Debug, Clone)]
pub struct RelaySpec {
    pub id: String,
    pub addr: NodeAddr,
    pub limits: RelayLimits,
}

#[derive(Debug, Clone)]
pub struct TargetSpec {
    pub id: String,
    pub addr: NodeAddr,
    pub zone: StaticZone,
}

#[derive(Debug, Clone)]
pub struct TopologySpec {
    pub transport: TransportKind,
    pub clients: Vec<ClientSpec>,
    pub relays: Vec<RelaySpec>,
    pub target: TargetSpec,
    /// Per-link latency overrides by node id pair, symmetric.
    pub link_overrides: Vec<(String, String, Duration)>,
}

impl TopologySpec {
    pub fn parse(text: &str) -> Result<Self, TopoError> {
        let mut transport = None;
        let mut clients: Vec<ClientSpec> = Vec::new();
        let mut relays: Vec<RelaySpec> = Vec::new();
        let mut target: Option<(String, NodeAddr)> = None;
        let mut zone_text = String::new();
        let mut link_overrides = Vec::new();

        for (idx, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: String| TopoError::Syntax { line: idx + 1, msg };
            let mut tokens = line.split_whitespace();
            match tokens.next().unwrap_or_default() {
                "transport" => {
                    transport = Some(match tokens.next() {
                        Some("loopback") => TransportKind::Loopback,
                        Some("inmem") => {
                            let mut latency = Duration::from_millis(5);
                            for token in tokens.by_ref() {
                                if let Some(ms) = token.strip_prefix("latency_ms=") {
                                    let ms: u64 = ms
                                        .parse()
                                        .map_err(|_| err(format!("bad latency {ms:?}")))?;
                                    latency = Duration::from_millis(ms);
                                } else {
                                    return Err(err(format!("unknown attribute {token:?}")));
                                }
                            }
                            TransportKind::InMemory { link_latency: latency }
                        }
                        other => return Err(err(format!("unknown transport {other:?}"))),
                    });
                }
                "target" => {
                    let id = tokens.next().ok_or_else(|| err("missing target id".into()))?;
                    let addr = tokens
                        .next()
                        .ok_or_else(|| err("missing target address".into()))?
                        .parse()
                        .map_err(|e| err(format!("bad address: {e}")))?;
                    target = Some((id.to_string(), addr));
                }
                "zone" => {
                    let rest = line.strip_prefix("zone").unwrap_or("").trim();
                    zone_text.push_str(rest);
                    zone_text.push('\n');
                }
                "relay" => {
                    let id = tokens.next().ok_or_else(|| err("missing relay id".into()))?;
                    let addr = tokens
                        .next()
                        .ok_or_else(|| err("missing relay address".into()))?
                        .parse()
                        .map_err(|e| err(format!("bad address: {e}")))?;
                    let mut limits = RelayLimits::default();
                    for token in tokens {
                        if let Some(t) = token.strip_prefix("max_hops=") {
                            limits.max_subsequent_hops =
                                t.parse().map_err(|_| err(format!("bad max_hops {t:?}")))?;
                        } else if let Some(t) = token.strip_prefix("session_ttl_ms=") {
                            let ms: u64 =
                                t.parse().map_err(|_| err(format!("bad session_ttl {t:?}")))?;
                            limits.session_ttl = Duration::from_millis(ms);
                        } else {
                            return Err(err(format!("unknown relay attribute {token:?}")));
                        }
                    }
                    relays.push(RelaySpec { id: id.to_string(), addr, limits });
                }
                "client" => {
                    let id = tokens.next().ok_or_else(|| err("missing client id".into()))?;
                    let addr = tokens
                        .next()
                        .ok_or_else(|| err("missing client address".into()))?
                        .parse()
                        .map_err(|e| err(format!("bad address: {e}")))?;
                    let mut spec = ClientSpec {
                        id: id.to_string(),
                        addr,
                        nexthops: Vec::new(),
                        pool: None,
                        min_relays: 0,
                        max_relays: 2,
                        query_timeout: Duration::from_secs(5),
                        max_retries: 2,
                    };
                    for token in tokens {
                        let (key, value) = token
                            .split_once('=')
                            .ok_or_else(|| err(format!("expected key=value, got {token:?}")))?;
                        match key {
                            "nexthops" => {
                                spec.nexthops = value.split(',').map(str::to_string).collect()
                            }
                            "relays" => {
                                spec.pool = Some(value.split(',').map(str::to_string).collect())
                            }
                            "min" => {
                                spec.min_relays = value
                                    .parse()
                                    .map_err(|_| err(format!("bad min {value:?}")))?
                            }
                            "max" => {
                                spec.max_relays = value
                                    .parse()
                                    .map_err(|_| err(format!("bad max {value:?}")))?
                            }
                            "timeout_ms" => {
                                let ms: u64 = value
                                    .parse()
                                    .map_err(|_| err(format!("bad timeout {value:?}")))?;
                                spec.query_timeout = Duration::from_millis(ms);
                            }
                            "retries" => {
                                spec.max_retries = value
                                    .parse()
                                    .map_err(|_| err(format!("bad retries {value:?}")))?
                            }
                            other => return Err(err(format!("unknown attribute {other:?}"))),
                        }
                    }
                    if spec.nexthops.is_empty() {
                        return Err(err(format!("client {id} lists no nexthops")));
                    }
                    clients.push(spec);
                }
                "link" => {
                    let a = tokens.next().ok_or_else(|| err("missing node id".into()))?;
                    let b = tokens.next().ok_or_else(|| err("missing node id".into()))?;
                    let ms: u64 = tokens
                        .next()
                        .ok_or_else(|| err("missing latency".into()))?
                        .parse()
                        .map_err(|_| err("bad latency".into()))?;
                    link_overrides.push((
                        a.to_string(),
                        b.to_string(),
                        Duration::from_millis(ms),
                    ));
                }
                other => return Err(err(format!("unknown line kind {other:?}"))),
            }
        }

        let (target_id, target_addr) = target.ok_or(TopoError::Missing("target"))?;
        let zone = StaticZone::parse(&zone_text)
            .map_err(|e| TopoError::Syntax { line: 0, msg: format!("zone: {e}") })?;
        let spec = TopologySpec {
            transport: transport.ok_or(TopoError::Missing("transport line"))?,
            clients,
            relays,
            target: TargetSpec { id: target_id, addr: target_addr, zone },
            link_overrides,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), TopoError> {
        if self.clients.is_empty() {
            return Err(TopoError::Missing("clients"));
        }
        if self.relays.is_empty() {
            return Err(TopoError::Missing("relays"));
        }
        let mut ids = BTreeSet::new();
        for id in self
            .clients
            .iter()
            .map(|c| &c.id)
            .chain(self.relays.iter().map(|r| &r.id))
            .chain(std::iter::once(&self.target.id))
        {
            if !ids.insert(id.clone()) {
                return Err(TopoError::DuplicateId(id.clone()));
            }
        }
        let relay_ids: BTreeSet<&String> = self.relays.iter().map(|r| &r.id).collect();
        for client in &self.clients {
            for id in client.nexthops.iter().chain(client.pool.iter().flatten()) {
                if !relay_ids.contains(id) {
                    return Err(TopoError::UnknownRelay {
                        client: client.id.clone(),
                        relay: id.clone(),
                    });
                }
            }
            if let Some(pool) = &client.pool {
                for nh in &client.nexthops {
                    if !pool.contains(nh) {
                        return Err(TopoError::UnknownRelay {
                            client: client.id.clone(),
                            relay: nh.clone(),
                        });
                    }
                }
            }
        }
        if matches!(self.transport, TransportKind::InMemory { .. }) {
            let mut ips = BTreeSet::new();
            for ip in self
                .clients
                .iter()
                .map(|c| c.addr.ip())
                .chain(self.relays.iter().map(|r| r.addr.ip()))
                .chain(std::iter::once(self.target.addr.ip()))
            {
                if !ips.insert(ip) {
                    return Err(TopoError::DuplicateIp(ip));
                }
            }
        }
        Ok(())
    }

    /// Relay ids in a client's pool, in relay-list order.
    pub fn client_pool(&self, client: &ClientSpec) -> Vec<String> {
        match &client.pool {
            Some(pool) => {
                self.relays.iter().filter(|r| pool.contains(&r.id)).map(|r| r.id.clone()).collect()
            }
            None => self.relays.iter().map(|r| r.id.clone()).collect(),
        }
    }

    /// Assembles the runtime config for one client against this topology.
    pub fn client_config(&self, client: &ClientSpec, resolver_key: PublicKey) -> ClientConfig {
        let pool = self.client_pool(client);
        let relays = self
            .relays
            .iter()
            .filter(|r| pool.contains(&r.id))
            .map(|r| RelayEntry {
                addr: r.addr,
                is_nexthop_candidate: client.nexthops.contains(&r.id),
                operator_tag: Some(r.id.clone()),
            })
            .collect();
        ClientConfig {
            listen: client.addr,
            policy: PathPolicy {
                relays,
                targets: vec![self.target.addr],
                min_relays: client.min_relays,
                max_relays: client.max_relays,
                rng_seed: None,
            },
            query_timeout: client.query_timeout,
            max_retries: client.max_retries,
            resolver_public_keys: [(self.target.addr, resolver_key)].into(),
            key_mode: KeyMode::EphemeralPerQuery,
            path_mode: Default::default(),
            stats_file: None,
        }
    }

    pub fn summary(&self) -> TopoSummary {
        TopoSummary {
            clients: self
                .clients
                .iter()
                .map(|c| ClientSummary {
                    id: c.id.clone(),
                    addr: c.addr.to_string(),
                    flagged: c.nexthops.clone(),
                    pool: self.client_pool(c),
                    min_relays: c.min_relays,
                    max_relays: c.max_relays,
                    targets: vec![self.target.addr.to_string()],
                })
                .collect(),
            relays: self
                .relays
                .iter()
                .map(|r| RelaySummary { id: r.id.clone(), addr: r.addr.to_string() })
                .collect(),
            target: self.target.addr.to_string(),
        }
    }

    /// Latency of the link between two nodes (symmetric lookup).
    pub fn link_latency(&self, a: &str, b: &str) -> Duration {
        let default = match self.transport {
            TransportKind::InMemory { link_latency } => link_latency,
            TransportKind::Loopback => Duration::ZERO,
        };
        self.link_overrides
            .iter()
            .find(|(x, y, _)| (x == a && y == b) || (x == b && y == a))
            .map(|(_, _, d)| *d)
            .unwrap_or(default)
    }
}

/// Everything the analyzer needs to know about a network; the first line
/// of every trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopoSummary {
    pub clients: Vec<ClientSummary>,
    pub relays: Vec<RelaySummary>,
    /// Target resolver address.
    pub target: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientSummary {
    pub id: String,
    pub addr: String,
    /// Relay ids this client may use as its next-hop.
    pub flagged: Vec<String>,
    /// Relay ids in this client's list.
    pub pool: Vec<String>,
    pub min_relays: usize,
    pub max_relays: usize,
    pub targets: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelaySummary {
    pub id: String,
    pub addr: String,
}

/// What an observed address resolves to.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum NodeRef {
    Client(String),
    Relay(String),
    Target,
}

impl TopoSummary {
    pub fn client(&self, id: &str) -> Option<&ClientSummary> {
        self.clients.iter().find(|c| c.id == id)
    }

    pub fn relay_addr(&self, id: &str) -> Option<NodeAddr> {
        self.relays.iter().find(|r| r.id == id).and_then(|r| r.addr.parse().ok())
    }

    pub fn relay_id_by_addr(&self, addr: NodeAddr) -> Option<&str> {
        self.relays
            .iter()
            .find(|r| r.addr.parse::<NodeAddr>().ok() == Some(addr))
            .map(|r| r.id.as_str())
    }

    /// Maps an observed endpoint to a node by IP, the way an observer who
    /// knows the published relay list would.
    pub fn node_by_ip(&self, ip: IpAddr) -> Option<NodeRef> {
        for c in &self.clients {
            if c.addr.parse::<NodeAddr>().ok().map(|a| a.ip()) == Some(ip) {
                return Some(NodeRef::Client(c.id.clone()));
            }
        }
        for r in &self.relays {
            if r.addr.parse::<NodeAddr>().ok().map(|a| a.ip()) == Some(ip) {
                return Some(NodeRef::Relay(r.id.clone()));
            }
        }
        if self.target.parse::<NodeAddr>().ok().map(|a| a.ip()) == Some(ip) {
            return Some(NodeRef::Target);
        }
        None
    }

    /// Clients that flag `relay_id` as a next-hop candidate.
    pub fn owners(&self, relay_id: &str) -> BTreeSet<String> {
        self.clients
            .iter()
            .filter(|c| c.flagged.iter().any(|f| f == relay_id))
            .map(|c| c.id.clone())
            .collect()
    }

    /// Clients that could have routed through `relay_id` as a subsequent
    /// hop: it is in their list, they can pick a different next-hop, and
    /// they allow at least one subsequent relay.
    pub fn eligible_subsequent(&self, relay_id: &str) -> BTreeSet<String> {
        self.clients
            .iter()
            .filter(|c| {
                c.max_relays >= 1
                    && c.pool.iter().any(|p| p == relay_id)
                    && c.flagged.iter().any(|f| f != relay_id)
            })
            .map(|c| c.id.clone())
            .collect()
    }

    /// The anonymity set behind an observed non-colluded node `F`: its
    /// owners (it may have been a dedicated next-hop) plus every client
    /// that could have used it as a subsequent relay.
    pub fn candidates_behind(&self, relay_id: &str) -> BTreeSet<String> {
        let mut set = self.owners(relay_id);
        set.extend(self.eligible_subsequent(relay_id));
        set
    }

    /// Rebuilds the path-selection policy a client runs with, so the
    /// Monte-Carlo analyzer draws from the same distribution.
    pub fn reconstruct_policy(&self, client_id: &str) -> Option<PathPolicy> {
        let client = self.client(client_id)?;
        let relays = self
            .relays
            .iter()
            .filter(|r| client.pool.contains(&r.id))
            .map(|r| {
                Some(RelayEntry {
                    addr: r.addr.parse().ok()?,
                    is_nexthop_candidate: client.flagged.contains(&r.id),
                    operator_tag: Some(r.id.clone()),
                })
            })
            .collect::<Option<Vec<_>>>()?;
        Some(PathPolicy {
            relays,
            targets: client.targets.iter().map(|t| t.parse().ok()).collect::<Option<_>>()?,
            min_relays: client.min_relays,
            max_relays: client.max_relays,
            rng_seed: None,
        })
    }

    /// relay addr -> relay id, for mapping drawn paths into id space.
    pub fn relay_addr_index(&self) -> BTreeMap<NodeAddr, String> {
        self.relays
            .iter()
            .filter_map(|r| Some((r.addr.parse().ok()?, r.id.clone())))
            .collect()
    }
}
