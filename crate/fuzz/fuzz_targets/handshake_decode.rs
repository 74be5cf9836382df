#![no_main]
use libfuzzer_sys::fuzz_target;

use elastisock::channel::handshake::{decode, encode};

fuzz_target!(|data: &[u8]| {
    match decode(data) {
        Ok(Some((frame, consumed))) => {
            assert!(consumed <= data.len());
            // a decoded frame re-encodes to something that decodes equal
            let bytes = encode(&frame);
            let (again, n) = decode(&bytes).expect("re-decode").expect("complete");
            assert_eq!(n, bytes.len());
            assert_eq!(again, frame);
        }
        Ok(None) => {}
        Err(_) => {}
    }
});
