#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        let _ = nda::data::config::parse_kv(text);
        if let Ok(s) = nda::settings::Settings::parse(text) {
            let rendered = s.render();
            assert_eq!(
                nda::settings::Settings::parse(&rendered).unwrap().render(),
                rendered
            );
        }
    }
});
