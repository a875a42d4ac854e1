//! Mutualized oblivious DNS (μODNS): multi-relay anonymization of DNS
//! queries with a dedicated trusted next-hop.
//!
//! A client converts plaintext Do53 queries into end-to-end sealed payloads
//! and routes them through its own dedicated relay followed by a randomized
//! chain of shared relays. Each relay strips the previous hop's information
//! before forwarding, so the target resolver (and any relays colluding with
//! it) cannot tie a query back to the client's address as long as at least
//! one relay on the path is honest.
//!
//! The crate is organized around pure decision cores with the I/O kept at
//! the edges:
//!
//! - [`wire`]: byte-exact envelope codec and per-hop header stripping
//! - [`seal`]: end-to-end authenticated encryption of DNS payloads
//! - [`dnscore`]: minimal DNS message parsing/building and the static zone
//! - [`pathsel`]: randomized, loop-free relay path construction
//! - [`relaynode`]: relay decision core and the UDP back-path session table
//! - [`endpoints`]: client proxy and target resolver state machines
//! - [`conf`]: relay list and configuration file parsing
//! - [`daemon`]: thread-based UDP daemons wrapping the cores
//! - [`anonet`]: in-process simulation harness, RTT measurement, and the
//!   collusion/attribution analyzer with its exact enumeration oracle

pub mod anonet;
pub mod conf;
pub mod daemon;
pub mod dnscore;
pub mod endpoints;
pub mod pathsel;
pub mod relaynode;
pub mod seal;
pub mod trace;
pub mod wire;

pub use wire::{Envelope, NodeAddr};
