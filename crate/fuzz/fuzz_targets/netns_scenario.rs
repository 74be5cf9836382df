#![no_main]
use libfuzzer_sys::fuzz_target;

use elastisock::netns::scenario;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(parsed) = scenario::parse(text) {
        // keep the simulation grid bounded; verify must never panic on any
        // parseable scenario (unsupported rule kinds are errors, not panics)
        if parsed.rules.len() <= 4 && parsed.packets.len() <= 32 && parsed.pus <= 4 {
            let _ = scenario::verify(&parsed);
        }
    }
});
