#![no_main]

use libfuzzer_sys::fuzz_target;
use modns::seal::SealedMessage;

fuzz_target!(|data: &[u8]| {
    if let Ok(msg) = SealedMessage::from_bytes(data) {
        assert_eq!(msg.to_bytes(), data);
    }
});
