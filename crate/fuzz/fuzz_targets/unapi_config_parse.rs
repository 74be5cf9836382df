#![no_main]
use libfuzzer_sys::fuzz_target;

use elastisock::config::{parse_size, parse_unapi_config};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    let _ = parse_unapi_config(text);
    let _ = parse_size(text);
});
