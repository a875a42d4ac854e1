//! Single binary wiring the whole stack: daemons, simulation, analysis,
//! and envelope debug tools.
//!
//! Exit codes: 0 success, 1 usage error, 2 configuration error, 3 runtime
//! failure.

use std::collections::BTreeSet;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::time::Duration;

use anyhow::{anyhow, bail, Context};
use clap::error::ErrorKind as ClapErrorKind;
use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;

use modns::anonet::collusion::{
    attribute_all, identification_probability_exact, identification_probability_mc,
    CollusionScenario,
};
use modns::anonet::loopback::LoopbackNet;
use modns::anonet::report::{AnonRow, Report};
use modns::anonet::topo::{TopologySpec, TransportKind};
use modns::anonet::{run_workload, RelaySetting, WorkloadResult};
use modns::daemon;
use modns::relaynode::RelayLimits;
use modns::seal::KeyPair;
use modns::trace::{from_jsonl, to_jsonl, ObsSink, TraceEvent};
use modns::wire::{decode_envelope, encode_envelope, Envelope, NodeAddr};

const EXIT_OK: i32 = 0;
const EXIT_USAGE: i32 = 1;
const EXIT_CONFIG: i32 = 2;
const EXIT_RUNTIME: i32 = 3;

#[derive(Parser)]
#[command(name = "modns", version, about = "Mutualized oblivious DNS toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the client proxy: Do53 in, multi-relay sealed queries out.
    RunClient(RunClient),
    /// Run a relay: strip headers, forward upstream, route responses back.
    RunRelay(RunRelay),
    /// Run the target resolver over a static zone.
    RunTarget(RunTarget),
    /// Drive a topology with a cache-busting workload and write a trace.
    Simulate(Simulate),
    /// Attribute trace queries under a collusion scenario.
    Analyze(Analyze),
    /// Encode an envelope from flags to hex.
    Encode(Encode),
    /// Decode a hex envelope and pretty-print it.
    Decode(Decode),
    /// Generate an X25519 key pair.
    Keygen(Keygen),
}

#[derive(Args)]
struct RunClient {
    /// Override the config file's listen address.
    #[arg(long)]
    listen: Option<SocketAddr>,
    #[arg(long)]
    config: PathBuf,
    /// Seed the path/nonce RNG (testing only).
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct RunRelay {
    #[arg(long)]
    listen: SocketAddr,
    /// Externally visible address, if it differs from the bound one.
    #[arg(long)]
    public_addr: Option<NodeAddr>,
    /// Drop queries still listing more than this many relays.
    #[arg(long, default_value_t = 8)]
    max_hops: usize,
    /// Back-path session lifetime in seconds.
    #[arg(long, default_value_t = 10)]
    session_ttl: u64,
    #[arg(long, default_value_t = 65536)]
    session_capacity: usize,
    #[arg(long, default_value_t = 65507)]
    max_datagram: usize,
    /// Append forwarding observations as JSON lines (the collusion feed).
    #[arg(long)]
    log_observations: Option<PathBuf>,
    #[arg(long, default_value = "relay")]
    id: String,
}

#[derive(Args)]
struct RunTarget {
    #[arg(long)]
    listen: SocketAddr,
    #[arg(long)]
    zone: PathBuf,
    /// Secret key file (32 raw bytes or hex).
    #[arg(long)]
    keys: PathBuf,
    /// Forward zone misses to this plain Do53 upstream.
    #[arg(long)]
    upstream: Option<SocketAddr>,
    #[arg(long)]
    stats_file: Option<PathBuf>,
    #[arg(long)]
    log_observations: Option<PathBuf>,
}

#[derive(Args)]
struct Simulate {
    #[arg(long)]
    topo: PathBuf,
    /// Queries per client.
    #[arg(long, default_value_t = 100)]
    queries: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Trace output path (JSON lines).
    #[arg(long)]
    out: PathBuf,
    /// Subsequent-relay count: "policy" or a fixed number.
    #[arg(long, default_value = "policy")]
    relays: String,
    /// Also write the RTT table as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct Analyze {
    #[arg(long)]
    trace: PathBuf,
    /// Comma-separated colluded relay ids.
    #[arg(long, value_delimiter = ',')]
    colluded: Vec<String>,
    /// Also compute the exact identification probability per client.
    #[arg(long)]
    exact: bool,
    /// Monte-Carlo trials per client (0 = skip).
    #[arg(long, default_value_t = 0)]
    mc_trials: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct Encode {
    /// Hop list entry (repeat; last one is the target resolver).
    #[arg(long = "hop")]
    hops: Vec<NodeAddr>,
    /// Single-relay form with this target instead of a hop list.
    #[arg(long)]
    adns_target: Option<NodeAddr>,
    #[arg(long)]
    payload_hex: String,
}

#[derive(Args)]
struct Decode {
    /// Hex-encoded datagram.
    hex: String,
}

#[derive(Args)]
struct Keygen {
    /// Where to write the secret key (hex). The public key prints to
    /// standard output.
    #[arg(long)]
    out: PathBuf,
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp_millis()
        .init();
    std::process::exit(dispatch(std::env::args().collect()));
}

fn dispatch(argv: Vec<String>) -> i32 {
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ClapErrorKind::DisplayHelp | ClapErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_USAGE,
            };
            let _ = e.print();
            return code;
        }
    };
    let result = match cli.command {
        Command::RunClient(args) => run_client(args),
        Command::RunRelay(args) => run_relay(args),
        Command::RunTarget(args) => run_target(args),
        Command::Simulate(args) => simulate(args),
        Command::Analyze(args) => analyze(args),
        Command::Encode(args) => encode(args),
        Command::Decode(args) => decode(args),
        Command::Keygen(args) => keygen(args),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            // Errors flagged as configuration problems exit 2.
            if e.downcast_ref::<ConfigStage>().is_some() {
                EXIT_CONFIG
            } else {
                EXIT_RUNTIME
            }
        }
    }
}

/// Marker wrapped around errors that happen while loading configuration.
#[derive(Debug)]
struct ConfigStage;

impl std::fmt::Display for ConfigStage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("configuration")
    }
}

impl std::error::Error for ConfigStage {}

fn config_err(e: impl std::fmt::Display) -> anyhow::Error {
    anyhow!(ConfigStage).context(e.to_string())
}

fn wait_forever() -> i32 {
    loop {
        std::thread::park();
    }
}

fn run_client(args: RunClient) -> anyhow::Result<i32> {
    let mut cfg = modns::conf::load_client_config(&args.config).map_err(config_err)?;
    if let Some(listen) = args.listen {
        cfg.listen = NodeAddr::from(listen);
    }
    let sink = ObsSink::Null;
    let handle = daemon::spawn_client(cfg, "client".to_string(), sink, args.seed)
        .context("binding client sockets")?;
    eprintln!("client proxy listening on {}", handle.do53_addr);
    Ok(wait_forever())
}

fn run_relay(args: RunRelay) -> anyhow::Result<i32> {
    let sink = match &args.log_observations {
        Some(path) => ObsSink::file(path).map_err(config_err)?,
        None => ObsSink::Null,
    };
    let limits = RelayLimits {
        max_subsequent_hops: args.max_hops,
        session_ttl: Duration::from_secs(args.session_ttl),
        session_capacity: args.session_capacity,
        max_datagram: args.max_datagram,
    };
    let handle = daemon::spawn_relay(daemon::RelayDaemonConfig {
        id: args.id,
        listen: args.listen,
        public_addr: args.public_addr,
        limits,
        sink,
    })
    .context("binding relay socket")?;
    eprintln!("relay listening on {}", handle.local_addr);
    Ok(wait_forever())
}

fn run_target(args: RunTarget) -> anyhow::Result<i32> {
    let zone_text = std::fs::read_to_string(&args.zone)
        .with_context(|| format!("reading {}", args.zone.display()))
        .map_err(config_err)?;
    let zone = modns::dnscore::StaticZone::parse(&zone_text).map_err(config_err)?;
    let secret = modns::seal::load_key_bytes(&args.keys).map_err(config_err)?;
    let keys = KeyPair::from_secret_bytes(secret);
    let sink = match &args.log_observations {
        Some(path) => ObsSink::file(path).map_err(config_err)?,
        None => ObsSink::Null,
    };
    println!("{}", keys.public());
    let handle =
        daemon::spawn_target(args.listen, keys, zone, sink, args.upstream, args.stats_file)
            .context("binding target socket")?;
    eprintln!("target resolver listening on {}", handle.local_addr);
    Ok(wait_forever())
}

fn parse_setting(text: &str) -> anyhow::Result<RelaySetting> {
    if text == "policy" {
        return Ok(RelaySetting::Policy);
    }
    let k: usize = text.parse().map_err(|_| anyhow!("--relays takes `policy` or a number"))?;
    Ok(RelaySetting::Fixed(k))
}

fn simulate(args: Simulate) -> anyhow::Result<i32> {
    let topo_text = std::fs::read_to_string(&args.topo)
        .with_context(|| format!("reading {}", args.topo.display()))
        .map_err(config_err)?;
    let topo = TopologySpec::parse(&topo_text).map_err(config_err)?;
    let setting = parse_setting(&args.relays)?;
    let result: WorkloadResult = match topo.transport {
        TransportKind::InMemory { .. } => run_workload(&topo, args.queries, setting, args.seed)?,
        TransportKind::Loopback => {
            let net = LoopbackNet::spawn(&topo, setting, args.seed)?;
            let result = net.run_workload(args.queries, args.seed)?;
            net.shutdown();
            result
        }
    };
    std::fs::write(&args.out, to_jsonl(&result.trace))
        .with_context(|| format!("writing {}", args.out.display()))?;

    let mut report = Report::default();
    report.push_rtt(setting.label(), result.queries.len(), result.mean_rtt());
    print!("{}", report.to_text());
    println!(
        "answered OK: {}/{} | trace: {}",
        result.queries.iter().filter(|q| q.ok).count(),
        result.queries.len(),
        args.out.display()
    );
    if let Some(csv) = args.csv {
        std::fs::write(&csv, report.to_csv())?;
    }
    Ok(EXIT_OK)
}

fn analyze(args: Analyze) -> anyhow::Result<i32> {
    let text = std::fs::read_to_string(&args.trace)
        .with_context(|| format!("reading {}", args.trace.display()))
        .map_err(config_err)?;
    let events = from_jsonl(&text).map_err(config_err)?;
    let Some(TraceEvent::Topology { summary }) = events.first() else {
        return Err(config_err("trace does not start with a topology line"));
    };
    let colluded: BTreeSet<String> = args.colluded.iter().cloned().collect();
    let scenario = CollusionScenario::from_trace(&events, colluded.iter().cloned());

    let entries = attribute_all(&scenario, summary)?;
    let identified = entries.iter().filter(|e| e.identified).count();
    let mean_set: f64 = if entries.is_empty() {
        0.0
    } else {
        entries.iter().map(|e| e.candidates.len()).sum::<usize>() as f64 / entries.len() as f64
    };
    println!(
        "colluded: {:?}\nqueries observed at resolver: {}\nidentified: {} ({:.2}%)\nmean candidate-set size: {:.2}",
        colluded,
        entries.len(),
        identified,
        if entries.is_empty() { 0.0 } else { 100.0 * identified as f64 / entries.len() as f64 },
        mean_set
    );

    let mut report = Report::default();
    let scenario_label = if colluded.is_empty() {
        "none".to_string()
    } else {
        colluded.iter().cloned().collect::<Vec<_>>().join("+")
    };
    for client in &summary.clients {
        let exact = if args.exact {
            Some(identification_probability_exact(summary, &client.id, &colluded)?)
        } else {
            None
        };
        let mc = if args.mc_trials > 0 {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(args.seed);
            Some(identification_probability_mc(
                summary,
                &client.id,
                &colluded,
                args.mc_trials,
                &mut rng,
            )?)
        } else {
            None
        };
        report.anon.push(AnonRow {
            scenario: scenario_label.clone(),
            client: client.id.clone(),
            exact,
            mc,
        });
    }
    if args.exact || args.mc_trials > 0 {
        print!("{}", report.to_text());
    }
    if let Some(csv) = args.csv {
        std::fs::write(&csv, report.to_csv())?;
    }
    Ok(EXIT_OK)
}

fn encode(args: Encode) -> anyhow::Result<i32> {
    let payload = hex::decode(args.payload_hex.trim()).context("bad payload hex")?;
    let envelope = match (args.adns_target, args.hops.is_empty()) {
        (Some(target), true) => Envelope::Adns { target, payload },
        (Some(_), false) => bail!("--adns-target conflicts with --hop"),
        (None, false) => Envelope::Modns { hops: args.hops, payload },
        (None, true) => Envelope::Bare { payload },
    };
    let bytes = encode_envelope(&envelope)?;
    println!("{}", hex::encode(bytes));
    Ok(EXIT_OK)
}

fn decode(args: Decode) -> anyhow::Result<i32> {
    let raw = hex::decode(args.hex.trim()).context("bad hex")?;
    let envelope = decode_envelope(&raw)?;
    match &envelope {
        Envelope::Modns { hops, payload } => {
            println!("kind: modns");
            println!("subsequent nodes: n={}", hops.len());
            for (i, hop) in hops.iter().enumerate() {
                let role = if i + 1 == hops.len() { " (target resolver)" } else { "" };
                println!("  hop {}: {}{}", i + 1, hop, role);
            }
            println!("payload: {} bytes", payload.len());
        }
        Envelope::Adns { target, payload } => {
            println!("kind: adns");
            println!("target: {target}");
            println!("payload: {} bytes", payload.len());
        }
        Envelope::Bare { payload } => {
            println!("kind: bare");
            println!("payload: {} bytes", payload.len());
        }
    }
    Ok(EXIT_OK)
}

fn keygen(args: Keygen) -> anyhow::Result<i32> {
    let keys = KeyPair::generate(&mut rand::rngs::OsRng);
    std::fs::write(&args.out, format!("{}\n", hex::encode(keys.secret_bytes())))
        .with_context(|| format!("writing {}", args.out.display()))?;
    println!("{}", keys.public());
    Ok(EXIT_OK)
}
