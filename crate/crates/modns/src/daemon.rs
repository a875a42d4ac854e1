//! Thread-based UDP daemons wrapping the pure cores.
//!
//! Each daemon owns blocking sockets with short read timeouts and a stop
//! flag, so handles shut down cleanly. The relay allocates one ephemeral
//! upstream socket per downstream peer (the session table maps it back)
//! and answers downstream from its public listen socket, so every node on
//! the back-path sees responses arrive on exactly the socket it sent
//! from.

use std::io;
use std::net::{SocketAddr, UdpSocket};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use parking_lot::Mutex;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::dnscore::StaticZone;
use crate::endpoints::{
    self, ClientConfig, ClientState, Do53Outcome, ResponseOutcome, TargetCounters, TickAction,
};
use crate::relaynode::{self, RelayAction, RelayCore, RelayLimits, SessionTable};
use crate::seal::KeyPair;
use crate::trace::{payload_digest, ObsSink, TraceEvent};
use crate::wire::{self, Envelope, NodeAddr};

const READ_TIMEOUT: Duration = Duration::from_millis(50);
const TICK_INTERVAL: Duration = Duration::from_millis(100);
const REAP_INTERVAL: Duration = Duration::from_millis(500);
const STATS_INTERVAL: Duration = Duration::from_secs(5);
const MAX_DATAGRAM: usize = 65_535;

/// A running daemon; `stop()` joins every thread.
pub struct DaemonHandle {
    pub local_addr: SocketAddr,
    stop: Arc<AtomicBool>,
    threads: Vec<JoinHandle<()>>,
}

impl DaemonHandle {
    pub fn stop(mut self) {
        self.stop.store(true, Ordering::SeqCst);
        for thread in self.threads.drain(..) {
            let _ = thread.join();
        }
    }
}

fn bind(addr: SocketAddr) -> io::Result<UdpSocket> {
    let socket = UdpSocket::bind(addr)?;
    socket.set_read_timeout(Some(READ_TIMEOUT))?;
    Ok(socket)
}

/// recv_from that reports timeouts as `None` so loops can poll the stop
/// flag.
fn recv(socket: &UdpSocket, buf: &mut [u8]) -> io::Result<Option<(usize, SocketAddr)>> {
    match socket.recv_from(buf) {
        Ok(pair) => Ok(Some(pair)),
        Err(e) if matches!(e.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut) => {
            Ok(None)
        }
        Err(e) => Err(e),
    }
}

pub struct RelayDaemonConfig {
    pub id: String,
    pub listen: SocketAddr,
    /// Address advertised in relay lists; self-loop checks use it.
    /// Defaults to the bound listen address.
    pub public_addr: Option<NodeAddr>,
    pub limits: RelayLimits,
    pub sink: ObsSink,
}

struct RelayShared {
    table: SessionTable,
    sockets: std::collections::HashMap<NodeAddr, Arc<UdpSocket>>,
}

pub fn spawn_relay(cfg: RelayDaemonConfig) -> io::Result<DaemonHandle> {
    let listen = Arc::new(bind(cfg.listen)?);
    let local_addr = listen.local_addr()?;
    let public_addr = cfg.public_addr.unwrap_or_else(|| NodeAddr::from(local_addr));
    let core = RelayCore::new(public_addr, cfg.limits.clone());
    let shared = Arc::new(Mutex::new(RelayShared {
        table: SessionTable::new(cfg.limits.session_capacity, cfg.limits.session_ttl),
        sockets: std::collections::HashMap::new(),
    }));
    let stop = Arc::new(AtomicBool::new(false));
    let start = Instant::now();
    let mut threads = Vec::new();

    {
        let (listen, shared, stop, sink, id) =
            (listen.clone(), shared.clone(), stop.clone(), cfg.sink.clone(), cfg.id.clone());
        threads.push(std::thread::spawn(move || {
            relay_listen_loop(&core, &listen, &shared, &stop, &sink, &id, start);
        }));
    }
    {
        let (shared, stop) = (shared.clone(), stop.clone());
        threads.push(std::thread::spawn(move || {
            while !stop.load(Ordering::SeqCst) {
                std::thread::sleep(REAP_INTERVAL);
                let now = start.elapsed();
                let mut guard = shared.lock();
                for entry in guard.table.purge_expired(now) {
                    guard.sockets.remove(&entry.upstream_local_endpoint);
                }
            }
        }));
    }
    Ok(DaemonHandle { local_addr, stop, threads })
}

fn relay_listen_loop(
    core: &RelayCore,
    listen: &Arc<UdpSocket>,
    shared: &Arc<Mutex<RelayShared>>,
    stop: &Arc<AtomicBool>,
    sink: &ObsSink,
    id: &str,
    start: Instant,
) {
    let mut buf = vec![0u8; MAX_DATAGRAM];
    while !stop.load(Ordering::SeqCst) {
        let Ok(Some((len, from))) = recv(listen, &mut buf) else { continue };
        let raw = &buf[..len];
        let t_us = start.elapsed().as_micros() as u64;
        match core.handle_upstream(raw, NodeAddr::from(from)) {
            RelayAction::ForwardUpstream { dest, bytes } => {
                let session = {
                    let mut guard = shared.lock();
                    open_session_socket(&mut guard, NodeAddr::from(from), start, listen)
                };
                let Some((socket, endpoint, is_new)) = session else {
                    log::warn!("relay {id}: no session socket for {from}");
                    continue;
                };
                if is_new {
                    sink.record(TraceEvent::AddrBook {
                        addr: endpoint.to_string(),
                        node: id.to_string(),
                    });
                    let reader_shared = shared.clone();
                    let reader_stop = stop.clone();
                    let reader_listen = listen.clone();
                    let reader_socket = socket.clone();
                    std::thread::spawn(move || {
                        relay_session_loop(
                            &reader_socket,
                            endpoint,
                            &reader_shared,
                            &reader_stop,
                            &reader_listen,
                            start,
                        );
                    });
                }
                let (digest, remaining) = forward_digests(&bytes);
                sink.record(TraceEvent::RelayForward {
                    t_us,
                    relay: id.to_string(),
                    prev_hop: from.to_string(),
                    next_hop: dest.to_string(),
                    digest,
                    remaining_hops_digest: remaining,
                });
                if let Err(e) = socket.send_to(&bytes, SocketAddr::from(dest)) {
                    log::debug!("relay {id}: send to {dest} failed: {e}");
                }
            }
            RelayAction::Drop { reason } => {
                sink.record(TraceEvent::RelayDrop {
                    t_us,
                    relay: id.to_string(),
                    reason: reason.as_str().to_string(),
                });
            }
            RelayAction::ForwardDownstream { .. } => unreachable!("listen socket is upstream"),
        }
    }
}

/// Digest of the payload and of the remaining hop array of an outbound
/// upstream datagram.
fn forward_digests(bytes: &[u8]) -> (String, String) {
    match wire::decode_envelope(bytes) {
        Ok(env) => {
            let remaining = match &env {
                Envelope::Modns { hops, .. } => {
                    let concat: Vec<u8> = hops.iter().flat_map(|h| h.encode()).collect();
                    payload_digest(&concat)
                }
                _ => "-".to_string(),
            };
            (payload_digest(env.payload()), remaining)
        }
        Err(_) => (payload_digest(bytes), "-".to_string()),
    }
}

fn open_session_socket(
    shared: &mut RelayShared,
    peer: NodeAddr,
    start: Instant,
    listen: &Arc<UdpSocket>,
) -> Option<(Arc<UdpSocket>, NodeAddr, bool)> {
    let now = start.elapsed();
    // Bind on the same interface as the public socket.
    let bind_ip = listen.local_addr().ok()?.ip();
    let mut bound: Option<(Arc<UdpSocket>, NodeAddr)> = None;
    let outcome = shared
        .table
        .open_session(peer, now, || match bind(SocketAddr::new(bind_ip, 0)) {
            Ok(socket) => {
                let endpoint = NodeAddr::from(socket.local_addr().expect("bound socket"));
                bound = Some((Arc::new(socket), endpoint));
                endpoint
            }
            Err(_) => NodeAddr::from(SocketAddr::from(([0, 0, 0, 0], 0))),
        })
        .ok()?;
    if let Some(evicted) = outcome.evicted {
        shared.sockets.remove(&evicted.upstream_local_endpoint);
    }
    if outcome.reused {
        let socket = shared.sockets.get(&outcome.endpoint)?.clone();
        return Some((socket, outcome.endpoint, false));
    }
    let (socket, endpoint) = bound?;
    shared.sockets.insert(endpoint, socket.clone());
    Some((socket, endpoint, true))
}

fn relay_session_loop(
    socket: &Arc<UdpSocket>,
    endpoint: NodeAddr,
    shared: &Arc<Mutex<RelayShared>>,
    stop: &Arc<AtomicBool>,
    listen: &Arc<UdpSocket>,
    start: Instant,
) {
    let mut buf = vec![0u8; MAX_DATAGRAM];
    while !stop.load(Ordering::SeqCst) {
        let Ok(packet) = recv(socket, &mut buf) else { return };
        let mut guard = shared.lock();
        if !guard.sockets.contains_key(&endpoint) {
            return; // session expired or evicted
        }
        let Some((len, _src)) = packet else { continue };
        let now = start.elapsed();
        // Responses are routed purely by arrival endpoint, bytes untouched.
        if let RelayAction::ForwardDownstream { dest, bytes } =
            relaynode::handle_downstream(&buf[..len], endpoint, &mut guard.table, now)
        {
            drop(guard);
            let _ = listen.send_to(&bytes, SocketAddr::from(dest));
        }
    }
}

pub fn spawn_target(
    listen: SocketAddr,
    keys: KeyPair,
    zone: StaticZone,
    sink: ObsSink,
    upstream: Option<SocketAddr>,
    stats_file: Option<std::path::PathBuf>,
) -> io::Result<DaemonHandle> {
    let socket = bind(listen)?;
    let local_addr = socket.local_addr()?;
    let stop = Arc::new(AtomicBool::new(false));
    let start = Instant::now();
    let thread_stop = stop.clone();
    let thread = std::thread::spawn(move || {
        let mut counters = TargetCounters::default();
        let mut buf = vec![0u8; MAX_DATAGRAM];
        let mut last_stats = Instant::now();
        while !thread_stop.load(Ordering::SeqCst) {
            if let Some(path) = &stats_file {
                if last_stats.elapsed() >= STATS_INTERVAL {
                    last_stats = Instant::now();
                    write_stats(path, "target", &counters.to_json());
                }
            }
            let Ok(Some((len, from))) = recv(&socket, &mut buf) else { continue };
            let raw = &buf[..len];
            sink.record(TraceEvent::ResolverRecv {
                t_us: start.elapsed().as_micros() as u64,
                sender: from.to_string(),
                digest: payload_digest(raw),
                sealed_hex: hex::encode(raw),
            });
            let reply = handle_target_query(raw, from, &keys, &zone, upstream, &mut counters);
            if let Some(out) = reply {
                let _ = socket.send_to(&out.bytes, SocketAddr::from(out.dest));
            }
        }
        if let Some(path) = &stats_file {
            write_stats(path, "target", &counters.to_json());
        }
    });
    Ok(DaemonHandle { local_addr, stop, threads: vec![thread] })
}

/// Zone-first resolution; unmatched names optionally forwarded to a plain
/// Do53 upstream. Passthrough is synchronous, which is fine at the scale
/// this daemon is meant for.
fn handle_target_query(
    raw: &[u8],
    from: SocketAddr,
    keys: &KeyPair,
    zone: &StaticZone,
    upstream: Option<SocketAddr>,
    counters: &mut TargetCounters,
) -> Option<endpoints::Outbound> {
    let (question, ctx) = endpoints::target_open_query(raw, keys, counters)?;
    let (answers, rcode) = zone.resolve(&question);
    if rcode == crate::dnscore::RCODE_NXDOMAIN {
        if let Some(upstream) = upstream {
            if let Some(response) = forward_do53(&question, upstream) {
                return endpoints::target_seal_reply(
                    &ctx,
                    keys,
                    &response,
                    NodeAddr::from(from),
                    counters,
                );
            }
        }
        counters.nxdomain += 1;
    }
    let response = crate::dnscore::build_response(&question, &answers, rcode, zone.default_ttl);
    endpoints::target_seal_reply(&ctx, keys, &response, NodeAddr::from(from), counters)
}

fn forward_do53(question: &crate::dnscore::Question, upstream: SocketAddr) -> Option<Vec<u8>> {
    let socket = UdpSocket::bind(("0.0.0.0", 0)).ok()?;
    socket.set_read_timeout(Some(Duration::from_millis(1500))).ok()?;
    let query = crate::dnscore::build_query(question.id, &question.qname, question.qtype);
    socket.send_to(&query, upstream).ok()?;
    let mut buf = vec![0u8; MAX_DATAGRAM];
    let (len, _) = socket.recv_from(&mut buf).ok()?;
    Some(buf[..len].to_vec())
}

pub struct ClientHandle {
    pub daemon: DaemonHandle,
    /// Where stub resolvers send Do53 queries.
    pub do53_addr: SocketAddr,
    /// Source address of this client's envelopes.
    pub upstream_addr: SocketAddr,
}

pub fn spawn_client(
    cfg: ClientConfig,
    id: String,
    sink: ObsSink,
    rng_seed: Option<u64>,
) -> io::Result<ClientHandle> {
    let listen = Arc::new(bind(SocketAddr::from(cfg.listen))?);
    let do53_addr = listen.local_addr()?;
    let upstream = Arc::new(bind(SocketAddr::new(do53_addr.ip(), 0))?);
    let upstream_addr = upstream.local_addr()?;
    sink.record(TraceEvent::AddrBook { addr: upstream_addr.to_string(), node: id.clone() });

    let state = Arc::new(Mutex::new(ClientState::new()));
    let rng = Arc::new(Mutex::new(match rng_seed.or(cfg.policy.rng_seed) {
        Some(seed) => ChaCha20Rng::seed_from_u64(seed),
        None => ChaCha20Rng::from_entropy(),
    }));
    let stop = Arc::new(AtomicBool::new(false));
    let start = Instant::now();
    let cfg = Arc::new(cfg);
    let mut threads = Vec::new();

    {
        let (listen, upstream, state, rng, stop, cfg, sink, id) = (
            listen.clone(),
            upstream.clone(),
            state.clone(),
            rng.clone(),
            stop.clone(),
            cfg.clone(),
            sink.clone(),
            id.clone(),
        );
        threads.push(std::thread::spawn(move || {
            let mut buf = vec![0u8; MAX_DATAGRAM];
            while !stop.load(Ordering::SeqCst) {
                let Ok(Some((len, from))) = recv(&listen, &mut buf) else { continue };
                let now = start.elapsed();
                let outcome = {
                    let mut state = state.lock();
                    let mut rng = rng.lock();
                    endpoints::client_handle_do53(
                        &buf[..len],
                        NodeAddr::from(from),
                        &cfg,
                        &mut state,
                        &mut *rng,
                        now,
                    )
                };
                match outcome {
                    Do53Outcome::Upstream(out) => {
                        record_client_send(&sink, &id, &out, 0, start);
                        let _ = upstream.send_to(&out.bytes, SocketAddr::from(out.dest));
                    }
                    Do53Outcome::Reject(out) => {
                        let _ = listen.send_to(&out.bytes, SocketAddr::from(out.dest));
                    }
                    Do53Outcome::Ignore => {}
                }
            }
        }));
    }
    {
        let (listen, upstream, state, stop) =
            (listen.clone(), upstream.clone(), state.clone(), stop.clone());
        threads.push(std::thread::spawn(move || {
            let mut buf = vec![0u8; MAX_DATAGRAM];
            while !stop.load(Ordering::SeqCst) {
                let Ok(Some((len, _from))) = recv(&upstream, &mut buf) else { continue };
                let now = start.elapsed();
                let outcome =
                    endpoints::client_handle_response(&buf[..len], &mut state.lock(), now);
                if let ResponseOutcome::Deliver(out) = outcome {
                    let _ = listen.send_to(&out.bytes, SocketAddr::from(out.dest));
                }
            }
        }));
    }
    {
        let (listen, upstream, state, rng, stop, cfg, sink) = (
            listen,
            upstream,
            state,
            rng,
            stop.clone(),
            cfg,
            sink,
        );
        threads.push(std::thread::spawn(move || {
            let mut last_stats = Instant::now();
            while !stop.load(Ordering::SeqCst) {
                std::thread::sleep(TICK_INTERVAL);
                let now = start.elapsed();
                let actions = {
                    let mut state = state.lock();
                    let mut rng = rng.lock();
                    endpoints::client_tick(&cfg, &mut state, &mut *rng, now)
                };
                for action in actions {
                    match action {
                        TickAction::Retransmit(out) => {
                            record_client_send(&sink, &id, &out, 1, start);
                            let _ = upstream.send_to(&out.bytes, SocketAddr::from(out.dest));
                        }
                        TickAction::ServFail(out) => {
                            let _ = listen.send_to(&out.bytes, SocketAddr::from(out.dest));
                        }
                    }
                }
                if let Some(path) = &cfg.stats_file {
                    if last_stats.elapsed() >= STATS_INTERVAL {
                        last_stats = Instant::now();
                        write_stats(path, "client", &state.lock().counters.to_json());
                    }
                }
            }
            if let Some(path) = &cfg.stats_file {
                write_stats(path, "client", &state.lock().counters.to_json());
            }
        }));
    }

    Ok(ClientHandle {
        daemon: DaemonHandle { local_addr: do53_addr, stop, threads },
        do53_addr,
        upstream_addr,
    })
}

fn record_client_send(
    sink: &ObsSink,
    id: &str,
    out: &endpoints::Outbound,
    attempt: u32,
    start: Instant,
) {
    if let Ok(env) = wire::decode_envelope(&out.bytes) {
        let hops = match &env {
            Envelope::Modns { hops, .. } => hops.iter().map(|h| h.to_string()).collect(),
            _ => Vec::new(),
        };
        sink.record(TraceEvent::ClientSend {
            t_us: start.elapsed().as_micros() as u64,
            client: id.to_string(),
            digest: payload_digest(env.payload()),
            nexthop: out.dest.to_string(),
            hops,
            qname: String::new(),
            attempt,
        });
    }
}

/// Appends one JSON line of counters.
fn write_stats(path: &std::path::Path, role: &str, counters: &serde_json::Value) {
    use std::io::Write;
    let line = serde_json::json!({
        "role": role,
        "unix_ms": std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_millis() as u64)
            .unwrap_or(0),
        "counters": counters,
    });
    if let Ok(mut file) = std::fs::OpenOptions::new().create(true).append(true).open(path) {
        let _ = writeln!(file, "{line}");
    }
}
