#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(doc) = serde_json::from_slice::<pathguide::cli::RunDoc>(data) {
        let _ = doc.render.validate();
    }
});
