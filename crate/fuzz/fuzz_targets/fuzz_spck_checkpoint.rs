#![no_main]

use libfuzzer_sys::fuzz_target;
use sprout_core::train::Checkpoint;

fuzz_target!(|data: &[u8]| {
    if let Ok(ck) = Checkpoint::from_bytes(data) {
        // anything that parses must re-serialize to a byte-identical file
        let bytes = ck.to_bytes();
        assert_eq!(bytes, data);
        let again = Checkpoint::from_bytes(&bytes).expect("round trip");
        assert_eq!(again, ck);
    }
});
