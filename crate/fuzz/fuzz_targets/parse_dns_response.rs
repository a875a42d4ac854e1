#![no_main]

use libfuzzer_sys::fuzz_target;
use modns::dnscore::parse_response;

fuzz_target!(|data: &[u8]| {
    let _ = parse_response(data);
});
