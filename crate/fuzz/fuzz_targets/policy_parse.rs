#![no_main]
use libfuzzer_sys::fuzz_target;

use elastisock::config::parse_policy;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(policy) = parse_policy(text) {
        // anything accepted must satisfy its own validator
        assert!(policy.validate().is_ok());
    }
});
