#![no_main]

use libfuzzer_sys::fuzz_target;
use sprout_core::erank::{parse_report, write_report};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(report) = parse_report(text) {
        let round = parse_report(&write_report(&report)).expect("writer output parses");
        assert_eq!(round.t_star, report.t_star);
        assert_eq!(round.entries.len(), report.entries.len());
    }
});
