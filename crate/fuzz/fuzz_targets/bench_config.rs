#![no_main]
use libfuzzer_sys::fuzz_target;

use elastisock::bench::parse_suite;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(suite) = parse_suite(text) {
        for scenario in &suite.scenarios {
            // every accepted scenario round-trips through its echo form
            let echoed = format!("{}\n", scenario.echo());
            let again = parse_suite(&echoed).expect("echo must reparse");
            assert_eq!(&again.scenarios[0], scenario);
        }
    }
});
