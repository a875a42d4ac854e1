#![no_main]

use libfuzzer_sys::fuzz_target;
use modns::dnscore::{Question, StaticZone};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(zone) = StaticZone::parse(text) {
        let q = Question { id: 1, qname: "probe.example.com".into(), qtype: 1, qclass: 1 };
        let (_, rcode) = zone.resolve(&q);
        assert!(rcode == 0 || rcode == 3);
    }
});
