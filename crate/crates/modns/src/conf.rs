//! Relay list and configuration file parsing.
//!
//! Relay list, one entry per line, `#` comments:
//!
//! ```text
//! relay 10.0.0.1:8443 nexthop tag=myorg
//! relay 203.0.113.5:8443
//! target 198.51.100.2:5353 <64 hex chars of resolver public key>
//! ```
//!
//! Client config, `key = value` lines:
//!
//! ```text
//! listen = 127.0.0.1:5300
//! relay_list = relays.txt      # relative to the config file
//! min_relays = 1
//! max_relays = 3
//! query_timeout_ms = 5000
//! max_retries = 2
//! key_mode = per-query         # or: per-process
//! path_mode = per-query        # or: sticky
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Duration;

use thiserror::Error;

use crate::endpoints::{ClientConfig, KeyMode, PathMode};
use crate::pathsel::{PathError, PathPolicy, RelayEntry};
use crate::seal::{PublicKey, KEY_LEN};
use crate::wire::NodeAddr;

#[derive(Debug, Error)]
pub enum ConfError {
    #[error("duplicate address {0}")]
    DuplicateAddress(NodeAddr),
    #[error("no relay carries the nexthop flag")]
    NoFlaggedRelay,
    #[error("bad key length: {got} hex chars, expected {}", KEY_LEN * 2)]
    BadKeyLength { got: usize },
    #[error("min_relays {min} exceeds max_relays {max}")]
    RangeInvalid { min: usize, max: usize },
    #[error("need {needed} subsequent relays but only {available} listed")]
    InsufficientRelays { needed: usize, available: usize },
    #[error("target {0} has no resolver public key")]
    MissingResolverKey(NodeAddr),
    #[error("line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error(transparent)]
    Path(#[from] PathError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Parsed relay list: relays with their flags plus targets with their
/// resolver keys.
#[derive(Debug, Clone, PartialEq)]
pub struct RelayList {
    pub entries: Vec<RelayEntry>,
    pub targets: Vec<(NodeAddr, PublicKey)>,
}

impl RelayList {
    /// Client configs need at least one flagged entry to use as the
    /// dedicated next-hop.
    pub fn require_nexthop(&self) -> Result<(), ConfError> {
        if self.entries.iter().any(|e| e.is_nexthop_candidate) {
            Ok(())
        } else {
            Err(ConfError::NoFlaggedRelay)
        }
    }
}

pub fn parse_relay_list(text: &str) -> Result<RelayList, ConfError> {
    let mut list = RelayList { entries: Vec::new(), targets: Vec::new() };
    let mut seen = std::collections::HashSet::new();
    for (idx, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let err = |msg: String| ConfError::Syntax { line: idx + 1, msg };
        let mut tokens = line.split_whitespace();
        let kind = tokens.next().unwrap_or_default();
        let addr: NodeAddr = tokens
            .next()
            .ok_or_else(|| err("missing address".into()))?
            .parse()
            .map_err(|e| err(format!("bad address: {e}")))?;
        if addr.port() == 0 {
            return Err(err("port 0 is not routable".into()));
        }
        if !seen.insert(addr) {
            return Err(ConfError::DuplicateAddress(addr));
        }
        match kind {
            "relay" => {
                let mut entry = RelayEntry::new(addr, false);
                for token in tokens {
                    if token == "nexthop" {
                        entry.is_nexthop_candidate = true;
                    } else if let Some(tag) = token.strip_prefix("tag=") {
                        entry.operator_tag = Some(tag.to_string());
                    } else {
                        return Err(err(format!("unknown relay attribute {token:?}")));
                    }
                }
                list.entries.push(entry);
            }
            "target" => {
                let key_hex = tokens.next().ok_or_else(|| err("missing public key".into()))?;
                if key_hex.len() != KEY_LEN * 2 {
                    return Err(ConfError::BadKeyLength { got: key_hex.len() });
                }
                let key = PublicKey::from_hex(key_hex)
                    .map_err(|e| err(format!("bad public key: {e}")))?;
                list.targets.push((addr, key));
            }
            other => return Err(err(format!("unknown entry kind {other:?}"))),
        }
    }
    Ok(list)
}

pub fn serialize_relay_list(list: &RelayList) -> String {
    let mut out = String::new();
    for entry in &list.entries {
        out.push_str(&format!("relay {}", entry.addr));
        if entry.is_nexthop_candidate {
            out.push_str(" nexthop");
        }
        if let Some(tag) = &entry.operator_tag {
            out.push_str(&format!(" tag={tag}"));
        }
        out.push('\n');
    }
    for (addr, key) in &list.targets {
        out.push_str(&format!("target {addr} {key}\n"));
    }
    out
}

fn read(path: &Path) -> Result<String, ConfError> {
    std::fs::read_to_string(path)
        .map_err(|source| ConfError::Io { path: path.to_path_buf(), source })
}

/// Parses a client config from text; `base_dir` anchors the relay list
/// path.
pub fn parse_client_config(text: &str, base_dir: &Path) -> Result<ClientConfig, ConfError> {
    let mut listen: Option<NodeAddr> = None;
    let mut relay_list_path: Option<PathBuf> = None;
    let mut min_relays = 0usize;
    let mut max_relays = 2usize;
    let mut query_timeout = Duration::from_secs(5);
    let mut max_retries = 2u32;
    let mut key_mode = KeyMode::EphemeralPerQuery;
    let mut path_mode = PathMode::FreshPerQuery;
    let mut stats_file = None;
    let mut rng_seed = None;

    for (idx, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let err = |msg: String| ConfError::Syntax { line: idx + 1, msg };
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| err("expected key = value".into()))?;
        let (key, value) = (key.trim(), value.trim());
        match key {
            "listen" => {
                listen = Some(value.parse().map_err(|e| err(format!("bad address: {e}")))?)
            }
            "relay_list" => relay_list_path = Some(base_dir.join(value)),
            "min_relays" => {
                min_relays = value.parse().map_err(|_| err(format!("bad integer {value:?}")))?
            }
            "max_relays" => {
                max_relays = value.parse().map_err(|_| err(format!("bad integer {value:?}")))?
            }
            "query_timeout_ms" => {
                let ms: u64 = value.parse().map_err(|_| err(format!("bad integer {value:?}")))?;
                query_timeout = Duration::from_millis(ms);
            }
            "max_retries" => {
                max_retries = value.parse().map_err(|_| err(format!("bad integer {value:?}")))?
            }
            "key_mode" => {
                key_mode = match value {
                    "per-query" => KeyMode::EphemeralPerQuery,
                    "per-process" => KeyMode::PerProcess,
                    other => return Err(err(format!("unknown key_mode {other:?}"))),
                }
            }
            "path_mode" => {
                path_mode = match value {
                    "per-query" => PathMode::FreshPerQuery,
                    "sticky" => PathMode::Sticky,
                    other => return Err(err(format!("unknown path_mode {other:?}"))),
                }
            }
            "stats_file" => stats_file = Some(base_dir.join(value)),
            "rng_seed" => {
                rng_seed =
                    Some(value.parse().map_err(|_| err(format!("bad integer {value:?}")))?)
            }
            other => return Err(err(format!("unknown key {other:?}"))),
        }
    }

    if min_relays > max_relays {
        return Err(ConfError::RangeInvalid { min: min_relays, max: max_relays });
    }
    let listen = listen.ok_or(ConfError::Syntax {
        line: 0,
        msg: "missing required key `listen`".into(),
    })?;
    let list_path = relay_list_path.ok_or(ConfError::Syntax {
        line: 0,
        msg: "missing required key `relay_list`".into(),
    })?;
    let list = parse_relay_list(&read(&list_path)?)?;
    list.require_nexthop()?;
    let available = list.entries.len().saturating_sub(1);
    if available < min_relays {
        return Err(ConfError::InsufficientRelays { needed: min_relays, available });
    }
    if list.targets.is_empty() {
        return Err(ConfError::Syntax { line: 0, msg: "relay list names no target".into() });
    }

    let resolver_public_keys: BTreeMap<NodeAddr, PublicKey> =
        list.targets.iter().copied().collect();
    let cfg = ClientConfig {
        listen,
        policy: PathPolicy {
            relays: list.entries,
            targets: list.targets.iter().map(|(a, _)| *a).collect(),
            min_relays,
            max_relays,
            rng_seed,
        },
        query_timeout,
        max_retries,
        resolver_public_keys,
        key_mode,
        path_mode,
        stats_file,
    };
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_client_config(path: &Path) -> Result<ClientConfig, ConfError> {
    let base = path.parent().unwrap_or(Path::new("."));
    parse_client_config(&read(path)?, base)
}
