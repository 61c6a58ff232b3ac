#![no_main]

use libfuzzer_sys::fuzz_target;
use sprout_core::train::parse_config;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(cfg) = parse_config(text) {
        // the writer output must parse back to the same configuration
        let round = parse_config(&cfg.to_text()).expect("writer output parses");
        assert_eq!(round, cfg);
    }
});
