#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(scores) = nda::ood::parse_scores(text) {
            let _ = scores.to_predictions();
        }
    }
});
