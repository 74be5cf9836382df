#![no_main]
use libfuzzer_sys::fuzz_target;

use elastisock::channel::allowlist::Allowlist;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(list) = Allowlist::parse(text) {
        // matching is total over arbitrary parsed rules
        let _ = list.permits("127.0.0.1", 7000);
        let _ = list.permits("pu1.internal", 80);
        let _ = list.permits("", 0);
    }
});
