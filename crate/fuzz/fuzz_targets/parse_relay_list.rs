#![no_main]

use libfuzzer_sys::fuzz_target;
use modns::conf::{parse_relay_list, serialize_relay_list};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(list) = parse_relay_list(text) {
        // Accepted lists round-trip through the serializer.
        let reparsed = parse_relay_list(&serialize_relay_list(&list)).expect("serialized lists parse");
        assert_eq!(reparsed, list);
    }
});
