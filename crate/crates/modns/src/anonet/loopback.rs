//! Loopback transport: the same topologies, but running the real UDP
//! daemons on 127.0.0.1 with kernel sockets in the path.
//!
//! Listen addresses from the topology are treated as placeholders; every
//! node binds an ephemeral port and the relay lists are rewritten to the
//! bound addresses. Observation events flow through an in-memory sink and
//! come out as the same trace format the in-memory transport produces.

use std::collections::BTreeMap;
use std::net::{SocketAddr, UdpSocket};
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::daemon::{self, ClientHandle, DaemonHandle, RelayDaemonConfig};
use crate::dnscore::{self, QTYPE_A};
use crate::endpoints::KeyMode;
use crate::pathsel::{PathPolicy, RelayEntry};
use crate::seal::KeyPair;
use crate::trace::{ObsSink, TraceEvent};
use crate::wire::NodeAddr;

use super::topo::{ClientSummary, RelaySummary, TopoSummary, TopologySpec, TransportKind};
use super::{HarnessError, QueryOutcome, RelaySetting, WorkloadResult};

/// A running loopback network.
pub struct LoopbackNet {
    pub summary: TopoSummary,
    clients: Vec<(String, SocketAddr, Duration, u32)>,
    relays: Vec<DaemonHandle>,
    client_handles: Vec<ClientHandle>,
    target: DaemonHandle,
    sink_buffer: std::sync::Arc<parking_lot::Mutex<Vec<TraceEvent>>>,
    topo: TopologySpec,
}

impl LoopbackNet {
    /// Binds and spawns the whole topology on loopback.
    pub fn spawn(
        topo: &TopologySpec,
        setting: RelaySetting,
        seed: u64,
    ) -> Result<LoopbackNet, HarnessError> {
        let TransportKind::Loopback = topo.transport else {
            return Err(HarnessError::WrongTransport);
        };
        let (sink, sink_buffer) = ObsSink::memory();
        let mut master = ChaCha8Rng::seed_from_u64(seed);
        let target_keys = KeyPair::generate(&mut master);

        let target = daemon::spawn_target(
            "127.0.0.1:0".parse().expect("valid"),
            target_keys.clone(),
            topo.target.zone.clone(),
            sink.clone(),
            None,
            None,
        )?;
        let target_addr = NodeAddr::from(target.local_addr);

        let mut relay_addrs: BTreeMap<String, NodeAddr> = BTreeMap::new();
        let mut relays = Vec::new();
        for spec in &topo.relays {
            let handle = daemon::spawn_relay(RelayDaemonConfig {
                id: spec.id.clone(),
                listen: "127.0.0.1:0".parse().expect("valid"),
                public_addr: None,
                limits: spec.limits.clone(),
                sink: sink.clone(),
            })?;
            relay_addrs.insert(spec.id.clone(), NodeAddr::from(handle.local_addr));
            relays.push(handle);
        }

        let mut clients = Vec::new();
        let mut client_handles = Vec::new();
        let mut client_summaries = Vec::new();
        for (idx, spec) in topo.clients.iter().enumerate() {
            let pool = topo.client_pool(spec);
            let (min_relays, max_relays) = match setting {
                RelaySetting::Policy => (spec.min_relays, spec.max_relays),
                RelaySetting::Fixed(k) => (k, k),
            };
            let cfg = crate::endpoints::ClientConfig {
                listen: "127.0.0.1:0".parse().expect("valid"),
                policy: PathPolicy {
                    relays: pool
                        .iter()
                        .map(|id| RelayEntry {
                            addr: relay_addrs[id],
                            is_nexthop_candidate: spec.nexthops.contains(id),
                            operator_tag: Some(id.clone()),
                        })
                        .collect(),
                    targets: vec![target_addr],
                    min_relays,
                    max_relays,
                    rng_seed: None,
                },
                query_timeout: spec.query_timeout,
                max_retries: spec.max_retries,
                resolver_public_keys: [(target_addr, target_keys.public())].into(),
                key_mode: KeyMode::EphemeralPerQuery,
                path_mode: Default::default(),
                stats_file: None,
            };
            cfg.validate().map_err(|e| HarnessError::BadTopology(e.to_string()))?;
            let handle =
                daemon::spawn_client(cfg, spec.id.clone(), sink.clone(), Some(seed ^ idx as u64))?;
            clients.push((
                spec.id.clone(),
                handle.do53_addr,
                spec.query_timeout,
                spec.max_retries,
            ));
            client_summaries.push(ClientSummary {
                id: spec.id.clone(),
                addr: handle.upstream_addr.to_string(),
                flagged: spec.nexthops.clone(),
                pool,
                min_relays,
                max_relays,
                targets: vec![target_addr.to_string()],
            });
            client_handles.push(handle);
        }

        let summary = TopoSummary {
            clients: client_summaries,
            relays: relay_addrs
                .iter()
                .map(|(id, addr)| RelaySummary { id: id.clone(), addr: addr.to_string() })
                .collect(),
            target: target_addr.to_string(),
        };
        Ok(LoopbackNet {
            summary,
            clients,
            relays,
            client_handles,
            target,
            sink_buffer,
            topo: topo.clone(),
        })
    }

    pub fn client_do53_addr(&self, id: &str) -> Option<SocketAddr> {
        self.clients.iter().find(|(cid, ..)| cid == id).map(|(_, addr, ..)| *addr)
    }

    /// Issues `n_queries` cache-busting queries per client, sequentially
    /// per client, measuring wall-clock RTT from each stub's perspective.
    pub fn run_workload(&self, n_queries: usize, seed: u64) -> Result<WorkloadResult, HarnessError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x5851_f42d));
        let suffix = self
            .topo
            .target
            .zone
            .wildcard_suffixes()
            .first()
            .cloned()
            .unwrap_or_else(|| "example.com".to_string());
        let mut queries = Vec::new();
        for (client_id, do53_addr, timeout, retries) in &self.clients {
            let stub = UdpSocket::bind("127.0.0.1:0")?;
            let deadline = *timeout * (*retries + 2);
            stub.set_read_timeout(Some(deadline))?;
            let mut buf = vec![0u8; 65_535];
            for i in 0..n_queries {
                let qname = dnscore::gen_cachebust_name(&suffix, &mut rng);
                let dns_id = (i % 0xffff) as u16 ^ 0x1d0d;
                let query = dnscore::build_query(dns_id, &qname, QTYPE_A);
                let sent = Instant::now();
                stub.send_to(&query, do53_addr)?;
                let outcome = loop {
                    match stub.recv_from(&mut buf) {
                        Ok((len, from)) if from == *do53_addr => break Some(len),
                        Ok(_) => continue,
                        Err(_) => break None,
                    }
                };
                let rtt = sent.elapsed();
                let ok = outcome.is_some_and(|len| {
                    dnscore::parse_response(&buf[..len]).is_ok_and(|resp| {
                        resp.id == dns_id
                            && resp.rcode == dnscore::RCODE_NOERROR
                            && resp
                                .question
                                .as_ref()
                                .is_some_and(|q| q.qname == qname)
                            && !resp.answers.is_empty()
                    })
                });
                if outcome.is_none() {
                    return Err(HarnessError::Timeout {
                        detail: format!("stub for {client_id} got no answer to {qname}"),
                    });
                }
                queries.push(QueryOutcome {
                    client: client_id.clone(),
                    qname,
                    rtt,
                    ok,
                });
            }
        }
        let mut trace = vec![TraceEvent::Topology { summary: self.summary.clone() }];
        trace.extend(self.sink_buffer.lock().iter().cloned());
        Ok(WorkloadResult {
            trace,
            queries,
            client_counters: BTreeMap::new(),
            target_counters: Default::default(),
        })
    }

    pub fn shutdown(self) {
        for handle in self.client_handles {
            handle.daemon.stop();
        }
        for handle in self.relays {
            handle.stop();
        }
        self.target.stop();
    }
}
