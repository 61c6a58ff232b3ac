#![no_main]

use libfuzzer_sys::fuzz_target;
use sprout_core::curation::CurationManifest;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(manifest) = CurationManifest::parse(text) {
        let round = CurationManifest::parse(&manifest.to_text()).expect("writer output parses");
        assert_eq!(round, manifest);
    }
});
