#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(ds) = nda::data::parse_features(text, "fuzz") {
            // whatever parses must survive a render/parse round trip
            let again =
                nda::data::parse_features(&nda::data::render_features(&ds), "fuzz").unwrap();
            assert_eq!(again.labels, ds.labels);
        }
    }
});
