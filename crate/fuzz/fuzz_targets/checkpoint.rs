#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(model) = nda::model::Model::from_checkpoint(text) {
            let _ = model.to_checkpoint();
        }
    }
});
