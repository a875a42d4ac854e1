//! Runs every fuzz target's check over its checked-in corpus seeds, so
//! plain `cargo test` keeps the seeds and target bodies honest without a
//! fuzzing toolchain.

use std::path::PathBuf;

use modns::anonet::topo::TopologySpec;
use modns::conf::{parse_relay_list, serialize_relay_list};
use modns::dnscore::{build_response, parse_query, parse_response, Question, StaticZone};
use modns::relaynode::{RelayAction, RelayCore, RelayLimits};
use modns::seal::SealedMessage;
use modns::wire::{decode_envelope, encode_envelope};

fn corpus(target: &str) -> Vec<(String, Vec<u8>)> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fuzz/corpus").join(target);
    let mut seeds = Vec::new();
    for entry in std::fs::read_dir(&dir).unwrap_or_else(|e| panic!("{}: {e}", dir.display())) {
        let path = entry.unwrap().path();
        seeds.push((path.display().to_string(), std::fs::read(&path).unwrap()));
    }
    assert!(!seeds.is_empty(), "no seeds under {}", dir.display());
    seeds.sort();
    seeds
}

#[test]
fn decode_envelope_seeds() {
    for (name, data) in corpus("decode_envelope") {
        if let Ok(envelope) = decode_envelope(&data) {
            let encoded = encode_envelope(&envelope).expect("decoded envelopes are encodable");
            assert_eq!(encoded, data, "{name}");
        }
    }
}

#[test]
fn parse_dns_query_seeds() {
    for (name, data) in corpus("parse_dns_query") {
        if let Ok(q) = parse_query(&data) {
            let response = build_response(&q, &[], 0, 60);
            let parsed = parse_response(&response).expect("own responses parse");
            assert_eq!(parsed.question.as_ref(), Some(&q), "{name}");
        }
    }
}

#[test]
fn parse_dns_response_seeds() {
    for (_, data) in corpus("parse_dns_response") {
        let _ = parse_response(&data);
    }
}

#[test]
fn sealed_message_seeds() {
    for (name, data) in corpus("sealed_message") {
        if let Ok(msg) = SealedMessage::from_bytes(&data) {
            assert_eq!(msg.to_bytes(), data, "{name}");
        }
    }
}

#[test]
fn relay_upstream_seeds() {
    let relay = RelayCore::new("192.0.2.1:8443".parse().unwrap(), RelayLimits::default());
    for (name, data) in corpus("relay_upstream") {
        match relay.handle_upstream(&data, "192.0.2.99:5555".parse().unwrap()) {
            RelayAction::ForwardUpstream { bytes, .. } => {
                decode_envelope(&bytes).unwrap_or_else(|e| panic!("{name}: {e}"));
            }
            RelayAction::ForwardDownstream { .. } => unreachable!(),
            RelayAction::Drop { .. } => {}
        }
    }
}

#[test]
fn parse_relay_list_seeds() {
    for (name, data) in corpus("parse_relay_list") {
        let Ok(text) = std::str::from_utf8(&data) else { continue };
        if let Ok(list) = parse_relay_list(text) {
            let reparsed =
                parse_relay_list(&serialize_relay_list(&list)).expect("serialized lists parse");
            assert_eq!(reparsed, list, "{name}");
        }
    }
}

#[test]
fn parse_topology_seeds() {
    for (_, data) in corpus("parse_topology") {
        let Ok(text) = std::str::from_utf8(&data) else { continue };
        if let Ok(topo) = TopologySpec::parse(text) {
            let _ = topo.summary();
        }
    }
}

#[test]
fn parse_zone_seeds() {
    for (_, data) in corpus("parse_zone") {
        let Ok(text) = std::str::from_utf8(&data) else { continue };
        if let Ok(zone) = StaticZone::parse(text) {
            let q = Question { id: 1, qname: "probe.example.com".into(), qtype: 1, qclass: 1 };
            let (_, rcode) = zone.resolve(&q);
            assert!(rcode == 0 || rcode == 3);
        }
    }
}
