//! Minimal DNS message handling: enough to proxy Do53 queries and answer
//! them from a static zone. No EDNS, no compression in answers, no TCP.
//!
//! The static zone supports wildcard suffixes so that cache-busting names
//! (a fresh UUIDv4 label per query) always resolve, which is how the
//! measurement workload forces a cache miss on every query.

use std::collections::HashMap;
use std::net::{Ipv4Addr, Ipv6Addr};

use rand::Rng;
use thiserror::Error;

pub const QTYPE_A: u16 = 1;
pub const QTYPE_TXT: u16 = 16;
pub const QTYPE_AAAA: u16 = 28;
pub const QCLASS_IN: u16 = 1;

pub const RCODE_NOERROR: u8 = 0;
pub const RCODE_FORMERR: u8 = 1;
pub const RCODE_SERVFAIL: u8 = 2;
pub const RCODE_NXDOMAIN: u8 = 3;

const HEADER_LEN: usize = 12;
const MAX_NAME_WIRE: usize = 255;
const MAX_LABEL: usize = 63;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum DnsError {
    #[error("malformed message: {0}")]
    MalformedMessage(&'static str),
    #[error("multi-question queries are not supported")]
    UnsupportedMultiQuestion,
}

/// The single question of a Do53 query, with the message id carried along.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Question {
    pub id: u16,
    /// Lowercase dot-form name without the trailing dot.
    pub qname: String,
    pub qtype: u16,
    pub qclass: u16,
}

/// Record data for the supported zone types.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RecordData {
    A(Ipv4Addr),
    Aaaa(Ipv6Addr),
    Txt(Vec<u8>),
}

impl RecordData {
    pub fn qtype(&self) -> u16 {
        match self {
            RecordData::A(_) => QTYPE_A,
            RecordData::Aaaa(_) => QTYPE_AAAA,
            RecordData::Txt(_) => QTYPE_TXT,
        }
    }

    pub fn rdata(&self) -> Vec<u8> {
        match self {
            RecordData::A(ip) => ip.octets().to_vec(),
            RecordData::Aaaa(ip) => ip.octets().to_vec(),
            RecordData::Txt(text) => {
                // TXT rdata is a sequence of length-prefixed strings; we
                // emit a single string of up to 255 bytes.
                let mut out = Vec::with_capacity(text.len() + 1);
                out.push(text.len().min(255) as u8);
                out.extend_from_slice(&text[..text.len().min(255)]);
                out
            }
        }
    }
}

fn encode_name(name: &str, out: &mut Vec<u8>) {
    if !name.is_empty() {
        for label in name.split('.') {
            out.push(label.len() as u8);
            out.extend_from_slice(label.as_bytes());
        }
    }
    out.push(0);
}

/// Reads an uncompressed name starting at `pos`, returning the lowercase
/// dot-form name and the offset just past the terminating zero label.
fn decode_name(raw: &[u8], mut pos: usize) -> Result<(String, usize), DnsError> {
    let mut name = String::new();
    let mut wire_len = 0usize;
    loop {
        let len = *raw.get(pos).ok_or(DnsError::MalformedMessage("name runs past message"))?
            as usize;
        pos += 1;
        if len == 0 {
            break;
        }
        if len & 0xc0 == 0xc0 {
            return Err(DnsError::MalformedMessage("compression pointer in question name"));
        }
        if len > MAX_LABEL {
            return Err(DnsError::MalformedMessage("label over 63 octets"));
        }
        wire_len += 1 + len;
        if wire_len + 1 > MAX_NAME_WIRE {
            return Err(DnsError::MalformedMessage("name over 255 octets"));
        }
        let label =
            raw.get(pos..pos + len).ok_or(DnsError::MalformedMessage("label runs past message"))?;
        if !name.is_empty() {
            name.push('.');
        }
        for &b in label {
            // Names are modeled as strings; restrict labels to printable
            // ASCII so the dot form re-encodes to the same wire bytes.
            if !(0x21..=0x7e).contains(&b) || b == b'.' {
                return Err(DnsError::MalformedMessage("unsupported byte in label"));
            }
            name.push(b.to_ascii_lowercase() as char);
        }
        pos += len;
    }
    Ok((name, pos))
}

/// Parses a Do53 query: fixed header, QR=0, exactly one question.
pub fn parse_query(raw: &[u8]) -> Result<Question, DnsError> {
    if raw.len() < HEADER_LEN {
        return Err(DnsError::MalformedMessage("shorter than the 12-byte header"));
    }
    let id = u16::from_be_bytes([raw[0], raw[1]]);
    let flags = u16::from_be_bytes([raw[2], raw[3]]);
    if flags & 0x8000 != 0 {
        return Err(DnsError::MalformedMessage("QR flag set on a query"));
    }
    let qdcount = u16::from_be_bytes([raw[4], raw[5]]);
    match qdcount {
        0 => return Err(DnsError::MalformedMessage("zero questions")),
        1 => {}
        _ => return Err(DnsError::UnsupportedMultiQuestion),
    }
    let (qname, pos) = decode_name(raw, HEADER_LEN)?;
    let tail = raw.get(pos..pos + 4).ok_or(DnsError::MalformedMessage("question truncated"))?;
    let qtype = u16::from_be_bytes([tail[0], tail[1]]);
    let qclass = u16::from_be_bytes([tail[2], tail[3]]);
    Ok(Question { id, qname, qtype, qclass })
}

/// Builds a recursion-desired Do53 query with a single question.
pub fn build_query(id: u16, name: &str, qtype: u16) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + name.len() + 6);
    out.extend_from_slice(&id.to_be_bytes());
    out.extend_from_slice(&0x0100u16.to_be_bytes()); // RD
    out.extend_from_slice(&1u16.to_be_bytes()); // QDCOUNT
    out.extend_from_slice(&[0; 6]); // AN/NS/AR
    encode_name(name, &mut out);
    out.extend_from_slice(&qtype.to_be_bytes());
    out.extend_from_slice(&QCLASS_IN.to_be_bytes());
    out
}

/// Builds a response echoing the question, with ANCOUNT = `answers.len()`.
/// `rcode` is NoError or NXDomain; other outcomes use
/// [`build_error_response`].
pub fn build_response(q: &Question, answers: &[RecordData], rcode: u8, ttl: u32) -> Vec<u8> {
    debug_assert!(rcode == RCODE_NOERROR || rcode == RCODE_NXDOMAIN);
    let mut out = Vec::with_capacity(64 + 32 * answers.len());
    out.extend_from_slice(&q.id.to_be_bytes());
    // QR + AA + RD + RA, rcode in the low nibble.
    out.extend_from_slice(&(0x8580u16 | rcode as u16).to_be_bytes());
    out.extend_from_slice(&1u16.to_be_bytes());
    out.extend_from_slice(&(answers.len() as u16).to_be_bytes());
    out.extend_from_slice(&[0; 4]);
    encode_name(&q.qname, &mut out);
    out.extend_from_slice(&q.qtype.to_be_bytes());
    out.extend_from_slice(&q.qclass.to_be_bytes());
    for rec in answers {
        encode_name(&q.qname, &mut out);
        out.extend_from_slice(&rec.qtype().to_be_bytes());
        out.extend_from_slice(&QCLASS_IN.to_be_bytes());
        out.extend_from_slice(&ttl.to_be_bytes());
        let rdata = rec.rdata();
        out.extend_from_slice(&(rdata.len() as u16).to_be_bytes());
        out.extend_from_slice(&rdata);
    }
    out
}

/// Bare error response (FORMERR, SERVFAIL): echoes the id and, when one is
/// known, the question.
pub fn build_error_response(id: u16, rcode: u8, question: Option<&Question>) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + 32);
    out.extend_from_slice(&id.to_be_bytes());
    out.extend_from_slice(&(0x8180u16 | rcode as u16).to_be_bytes());
    out.extend_from_slice(&(question.is_some() as u16).to_be_bytes());
    out.extend_from_slice(&[0; 6]);
    if let Some(q) = question {
        encode_name(&q.qname, &mut out);
        out.extend_from_slice(&q.qtype.to_be_bytes());
        out.extend_from_slice(&q.qclass.to_be_bytes());
    }
    out
}

/// A parsed response, used by the harness to verify delivered answers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Response {
    pub id: u16,
    pub rcode: u8,
    pub question: Option<Question>,
    /// (name, qtype, rdata) per answer record.
    pub answers: Vec<(String, u16, Vec<u8>)>,
}

/// Parses a response in this crate's own uncompressed output format.
pub fn parse_response(raw: &[u8]) -> Result<Response, DnsError> {
    if raw.len() < HEADER_LEN {
        return Err(DnsError::MalformedMessage("shorter than the 12-byte header"));
    }
    let id = u16::from_be_bytes([raw[0], raw[1]]);
    let flags = u16::from_be_bytes([raw[2], raw[3]]);
    if flags & 0x8000 == 0 {
        return Err(DnsError::MalformedMessage("QR flag clear on a response"));
    }
    let rcode = (flags & 0x000f) as u8;
    let qdcount = u16::from_be_bytes([raw[4], raw[5]]);
    let ancount = u16::from_be_bytes([raw[6], raw[7]]);
    if qdcount > 1 {
        return Err(DnsError::UnsupportedMultiQuestion);
    }
    let mut pos = HEADER_LEN;
    let mut question = None;
    if qdcount == 1 {
        let (qname, after) = decode_name(raw, pos)?;
        let tail =
            raw.get(after..after + 4).ok_or(DnsError::MalformedMessage("question truncated"))?;
        question = Some(Question {
            id,
            qname,
            qtype: u16::from_be_bytes([tail[0], tail[1]]),
            qclass: u16::from_be_bytes([tail[2], tail[3]]),
        });
        pos = after + 4;
    }
    let mut answers = Vec::with_capacity(ancount as usize);
    for _ in 0..ancount {
        let (name, after) = decode_name(raw, pos)?;
        let fixed =
            raw.get(after..after + 10).ok_or(DnsError::MalformedMessage("record truncated"))?;
        let qtype = u16::from_be_bytes([fixed[0], fixed[1]]);
        let rdlen = u16::from_be_bytes([fixed[8], fixed[9]]) as usize;
        let rdata = raw
            .get(after + 10..after + 10 + rdlen)
            .ok_or(DnsError::MalformedMessage("rdata truncated"))?;
        answers.push((name, qtype, rdata.to_vec()));
        pos = after + 10 + rdlen;
    }
    Ok(Response { id, rcode, question, answers })
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ZoneError {
    #[error("line {line}: {msg}")]
    Syntax { line: usize, msg: String },
}

/// Read-only record store answering exact names plus wildcard suffixes.
///
/// Zone file format, one record per line, `#` comments:
///
/// ```text
/// ttl 300
/// example.com A 93.184.216.34
/// *.example.com A 10.9.9.9
/// example.com TXT "some text"
/// ```
#[derive(Debug, Clone, Default)]
pub struct StaticZone {
    records: HashMap<(String, u16), Vec<RecordData>>,
    /// Suffixes (without the `*.`) that answer for any proper subdomain.
    wildcard_suffixes: Vec<String>,
    pub default_ttl: u32,
}

impl StaticZone {
    pub fn parse(text: &str) -> Result<Self, ZoneError> {
        let mut zone = StaticZone { default_ttl: 300, ..Default::default() };
        for (idx, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |msg: String| ZoneError::Syntax { line: idx + 1, msg };
            let mut parts = line.splitn(3, char::is_whitespace);
            let name = parts.next().unwrap().to_ascii_lowercase();
            if name == "ttl" {
                let val = parts.next().ok_or_else(|| err("ttl needs a value".into()))?;
                zone.default_ttl =
                    val.trim().parse().map_err(|_| err(format!("bad ttl {val:?}")))?;
                continue;
            }
            let qtype = parts.next().ok_or_else(|| err("missing record type".into()))?;
            let rdata = parts.next().ok_or_else(|| err("missing record data".into()))?.trim();
            let data = match qtype.to_ascii_uppercase().as_str() {
                "A" => RecordData::A(
                    rdata.parse().map_err(|_| err(format!("bad IPv4 address {rdata:?}")))?,
                ),
                "AAAA" => RecordData::Aaaa(
                    rdata.parse().map_err(|_| err(format!("bad IPv6 address {rdata:?}")))?,
                ),
                "TXT" => RecordData::Txt(rdata.trim_matches('"').as_bytes().to_vec()),
                other => return Err(err(format!("unsupported record type {other:?}"))),
            };
            zone.insert(&name, data);
        }
        Ok(zone)
    }

    pub fn insert(&mut self, name: &str, data: RecordData) {
        let name = name.to_ascii_lowercase();
        if let Some(suffix) = name.strip_prefix("*.") {
            if !self.wildcard_suffixes.iter().any(|s| s == suffix) {
                self.wildcard_suffixes.push(suffix.to_string());
            }
        }
        self.records.entry((name, data.qtype())).or_default().push(data);
    }

    pub fn wildcard_suffixes(&self) -> &[String] {
        &self.wildcard_suffixes
    }

    /// Exact `(name, qtype)` match, else wildcard-suffix match, else
    /// NXDomain. Deterministic and total.
    pub fn resolve(&self, q: &Question) -> (Vec<RecordData>, u8) {
        let name = q.qname.to_ascii_lowercase();
        if let Some(records) = self.records.get(&(name.clone(), q.qtype)) {
            return (records.clone(), RCODE_NOERROR);
        }
        // Longest wildcard suffix wins; only proper subdomains match.
        let mut best: Option<&str> = None;
        for suffix in &self.wildcard_suffixes {
            if name.len() > suffix.len() + 1
                && name.ends_with(suffix.as_str())
                && name.as_bytes()[name.len() - suffix.len() - 1] == b'.'
                && best.is_none_or(|b| suffix.len() > b.len())
            {
                best = Some(suffix);
            }
        }
        if let Some(suffix) = best {
            if let Some(records) = self.records.get(&(format!("*.{suffix}"), q.qtype)) {
                return (records.clone(), RCODE_NOERROR);
            }
        }
        (Vec::new(), RCODE_NXDOMAIN)
    }
}

/// Builds `"<uuid-v4>.<suffix>"` from the caller's RNG, so two seeded
/// generators produce identical name sequences.
pub fn gen_cachebust_name(suffix: &str, rng: &mut impl Rng) -> String {
    let mut bytes = [0u8; 16];
    rng.fill(&mut bytes);
    let uuid = uuid::Builder::from_random_bytes(bytes).into_uuid();
    format!("{uuid}.{suffix}")
}
