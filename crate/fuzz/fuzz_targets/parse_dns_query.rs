#![no_main]

use libfuzzer_sys::fuzz_target;
use modns::dnscore::{build_response, parse_query, parse_response};

fuzz_target!(|data: &[u8]| {
    if let Ok(q) = parse_query(data) {
        // An accepted question survives a build/parse cycle.
        let response = build_response(&q, &[], 0, 60);
        let parsed = parse_response(&response).expect("own responses parse");
        assert_eq!(parsed.question.as_ref(), Some(&q));
    }
});
