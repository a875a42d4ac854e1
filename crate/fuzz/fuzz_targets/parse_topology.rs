#![no_main]

use libfuzzer_sys::fuzz_target;
use modns::anonet::topo::TopologySpec;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(topo) = TopologySpec::parse(text) {
        let _ = topo.summary();
    }
});
