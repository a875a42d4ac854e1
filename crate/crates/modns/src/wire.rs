//! Byte-exact codec for relayed query envelopes.
//!
//! Two envelope flavors share one decode path, distinguished by a 10-byte
//! magic prefix:
//!
//! ```text
//! multi-relay query := magic(10) | n(1) | [addr(16) port(2)] * n | payload
//! single-relay query := magic(10) | addr(16) port(2) | payload
//! bare query        := payload
//! ```
//!
//! The hop array lists the nodes the message still has to visit, in order,
//! with the last entry being the target resolver. Each relay peels off the
//! first entry and forwards the rest, so bytes on the wire never carry any
//! information about hops already traversed. Addresses are encoded as
//! 16 bytes (IPv4 rendered as a v4-mapped IPv6 address) followed by a
//! 2-byte big-endian port.

use std::fmt;
use std::net::{IpAddr, Ipv6Addr, SocketAddr};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Magic prefix of a multi-relay (μODNS) query.
pub const MODNS_MAGIC: [u8; 10] = [0xff, 0xff, 0xff, 0xff, 0xff, 0xff, 0xff, 0xee, 0x00, 0x00];
/// Magic prefix of a single-relay (anonymized DNSCrypt) query.
pub const ADNS_MAGIC: [u8; 10] = [0xff, 0xff, 0xff, 0xff, 0xff, 0xff, 0xff, 0xff, 0x00, 0x00];
/// Encoded size of one hop entry: 16-byte address + 2-byte port.
pub const ADDR_LEN: usize = 18;
/// Magic length shared by both headers.
pub const MAGIC_LEN: usize = 10;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum WireError {
    #[error("invalid envelope: {0}")]
    InvalidEnvelope(&'static str),
    #[error("truncated header: need {needed} more bytes after the fixed prefix, got {got}")]
    TruncatedHeader { needed: usize, got: usize },
    #[error("zero hop count")]
    ZeroHops,
    #[error("operation requires a multi-relay envelope")]
    NotModns,
}

/// An IP endpoint as carried in envelope headers.
///
/// Stored in canonical form: a v4-mapped IPv6 address collapses to its
/// IPv4 form on construction, so wire round-trips are exact.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub struct NodeAddr {
    ip: IpAddr,
    port: u16,
}

impl NodeAddr {
    pub fn new(ip: IpAddr, port: u16) -> Self {
        let ip = match ip {
            IpAddr::V6(v6) => match v6.to_ipv4_mapped() {
                Some(v4) => IpAddr::V4(v4),
                None => IpAddr::V6(v6),
            },
            v4 => v4,
        };
        NodeAddr { ip, port }
    }

    pub fn ip(&self) -> IpAddr {
        self.ip
    }

    pub fn port(&self) -> u16 {
        self.port
    }

    /// 16-byte address (v4-mapped for IPv4) followed by big-endian port.
    pub fn encode(&self) -> [u8; ADDR_LEN] {
        let v6 = match self.ip {
            IpAddr::V4(v4) => v4.to_ipv6_mapped(),
            IpAddr::V6(v6) => v6,
        };
        let mut out = [0u8; ADDR_LEN];
        out[..16].copy_from_slice(&v6.octets());
        out[16..].copy_from_slice(&self.port.to_be_bytes());
        out
    }

    pub fn decode(bytes: &[u8; ADDR_LEN]) -> Self {
        let mut octets = [0u8; 16];
        octets.copy_from_slice(&bytes[..16]);
        let port = u16::from_be_bytes([bytes[16], bytes[17]]);
        NodeAddr::new(IpAddr::V6(Ipv6Addr::from(octets)), port)
    }
}

impl fmt::Display for NodeAddr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.ip {
            IpAddr::V4(v4) => write!(f, "{}:{}", v4, self.port),
            IpAddr::V6(v6) => write!(f, "[{}]:{}", v6, self.port),
        }
    }
}

impl fmt::Debug for NodeAddr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self}")
    }
}

impl FromStr for NodeAddr {
    type Err = std::net::AddrParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let sock: SocketAddr = s.parse()?;
        Ok(NodeAddr::new(sock.ip(), sock.port()))
    }
}

impl From<SocketAddr> for NodeAddr {
    fn from(sock: SocketAddr) -> Self {
        NodeAddr::new(sock.ip(), sock.port())
    }
}

impl From<NodeAddr> for SocketAddr {
    fn from(addr: NodeAddr) -> Self {
        SocketAddr::new(addr.ip, addr.port)
    }
}

impl From<NodeAddr> for String {
    fn from(addr: NodeAddr) -> Self {
        addr.to_string()
    }
}

impl TryFrom<String> for NodeAddr {
    type Error = std::net::AddrParseError;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

/// A decoded query envelope: remaining hop list plus the opaque sealed
/// payload. `Bare` is the form the target resolver receives once every
/// relay has stripped its hop entry.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Envelope {
    /// Multi-relay query. `hops` are the nodes still to visit; the last
    /// entry is the target resolver. Length must be in `[1, 255]`.
    Modns { hops: Vec<NodeAddr>, payload: Vec<u8> },
    /// Single-relay query naming only the target resolver.
    Adns { target: NodeAddr, payload: Vec<u8> },
    /// The sealed payload alone.
    Bare { payload: Vec<u8> },
}

impl Envelope {
    pub fn payload(&self) -> &[u8] {
        match self {
            Envelope::Modns { payload, .. }
            | Envelope::Adns { payload, .. }
            | Envelope::Bare { payload } => payload,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Envelope::Modns { .. } => "modns",
            Envelope::Adns { .. } => "adns",
            Envelope::Bare { .. } => "bare",
        }
    }
}

/// Serializes an envelope. For the multi-relay form the output is
/// `magic ‖ count ‖ hop array ‖ payload`, `10 + 1 + 18n + |payload|`
/// bytes long.
pub fn encode_envelope(env: &Envelope) -> Result<Vec<u8>, WireError> {
    if env.payload().is_empty() {
        return Err(WireError::InvalidEnvelope("empty payload"));
    }
    match env {
        Envelope::Modns { hops, payload } => {
            if hops.is_empty() {
                return Err(WireError::InvalidEnvelope("empty hop list"));
            }
            if hops.len() > 255 {
                return Err(WireError::InvalidEnvelope("more than 255 hops"));
            }
            let mut out = Vec::with_capacity(MAGIC_LEN + 1 + ADDR_LEN * hops.len() + payload.len());
            out.extend_from_slice(&MODNS_MAGIC);
            out.push(hops.len() as u8);
            for hop in hops {
                out.extend_from_slice(&hop.encode());
            }
            out.extend_from_slice(payload);
            Ok(out)
        }
        Envelope::Adns { target, payload } => {
            let mut out = Vec::with_capacity(MAGIC_LEN + ADDR_LEN + payload.len());
            out.extend_from_slice(&ADNS_MAGIC);
            out.extend_from_slice(&target.encode());
            out.extend_from_slice(payload);
            Ok(out)
        }
        Envelope::Bare { payload } => Ok(payload.clone()),
    }
}

/// Classifies a datagram by its 10-byte prefix and decodes the header.
/// Anything that starts with neither magic is a bare payload, so relays
/// and the target resolver can share this decode path.
pub fn decode_envelope(raw: &[u8]) -> Result<Envelope, WireError> {
    if raw.is_empty() {
        return Err(WireError::TruncatedHeader { needed: 1, got: 0 });
    }
    if raw.len() >= MAGIC_LEN && raw[..MAGIC_LEN] == MODNS_MAGIC {
        let rest = &raw[MAGIC_LEN..];
        if rest.is_empty() {
            return Err(WireError::TruncatedHeader { needed: 1, got: 0 });
        }
        let count = rest[0] as usize;
        if count == 0 {
            return Err(WireError::ZeroHops);
        }
        let array = &rest[1..];
        let needed = count * ADDR_LEN;
        if array.len() < needed {
            return Err(WireError::TruncatedHeader { needed, got: array.len() });
        }
        let payload = &array[needed..];
        if payload.is_empty() {
            return Err(WireError::TruncatedHeader { needed: needed + 1, got: array.len() });
        }
        let hops = array[..needed]
            .chunks_exact(ADDR_LEN)
            .map(|c| NodeAddr::decode(c.try_into().expect("chunk is 18 bytes")))
            .collect();
        Ok(Envelope::Modns { hops, payload: payload.to_vec() })
    } else if raw.len() >= MAGIC_LEN && raw[..MAGIC_LEN] == ADNS_MAGIC {
        let rest = &raw[MAGIC_LEN..];
        if rest.len() < ADDR_LEN {
            return Err(WireError::TruncatedHeader { needed: ADDR_LEN, got: rest.len() });
        }
        let payload = &rest[ADDR_LEN..];
        if payload.is_empty() {
            return Err(WireError::TruncatedHeader { needed: ADDR_LEN + 1, got: rest.len() });
        }
        let target = NodeAddr::decode(rest[..ADDR_LEN].try_into().expect("18 bytes"));
        Ok(Envelope::Adns { target, payload: payload.to_vec() })
    } else {
        Ok(Envelope::Bare { payload: raw.to_vec() })
    }
}

/// Removes the first hop from a multi-relay envelope.
///
/// Returns the node the datagram must be forwarded to next, together
/// with the envelope to put on the wire: the same header with the count
/// decremented and the first array entry gone, or the bare payload once
/// only the target remained.
pub fn strip_first_hop(env: &Envelope) -> Result<(NodeAddr, Envelope), WireError> {
    match env {
        Envelope::Modns { hops, payload } => {
            let next = *hops.first().ok_or(WireError::InvalidEnvelope("empty hop list"))?;
            let forwarded = if hops.len() > 1 {
                Envelope::Modns { hops: hops[1..].to_vec(), payload: payload.clone() }
            } else {
                Envelope::Bare { payload: payload.clone() }
            };
            Ok((next, forwarded))
        }
        _ => Err(WireError::NotModns),
    }
}
