#![no_main]

use libfuzzer_sys::fuzz_target;
use modns::relaynode::{RelayAction, RelayCore, RelayLimits};
use modns::wire::decode_envelope;

fuzz_target!(|data: &[u8]| {
    let relay = RelayCore::new("192.0.2.1:8443".parse().unwrap(), RelayLimits::default());
    match relay.handle_upstream(data, "192.0.2.99:5555".parse().unwrap()) {
        RelayAction::ForwardUpstream { bytes, .. } => {
            // Whatever a relay forwards, the next relay can decode.
            decode_envelope(&bytes).expect("forwarded bytes decode");
        }
        RelayAction::ForwardDownstream { .. } => unreachable!(),
        RelayAction::Drop { .. } => {}
    }
});
