#![no_main]

use libfuzzer_sys::fuzz_target;
use modns::wire::{decode_envelope, encode_envelope};

fuzz_target!(|data: &[u8]| {
    // The decoder must never panic, and everything it accepts must
    // re-encode to the exact input bytes.
    if let Ok(envelope) = decode_envelope(data) {
        let encoded = encode_envelope(&envelope).expect("decoded envelopes are encodable");
        assert_eq!(encoded, data);
    }
});
