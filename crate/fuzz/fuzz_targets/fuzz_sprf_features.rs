#![no_main]

use libfuzzer_sys::fuzz_target;
use sprout_core::formats::{parse_sprf, write_sprf};

fuzz_target!(|data: &[u8]| {
    if let Ok(matrix) = parse_sprf(data) {
        let bytes = write_sprf(&matrix);
        assert_eq!(bytes, data);
    }
});
