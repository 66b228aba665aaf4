#![no_main]
use libfuzzer_sys::fuzz_target;
use tcd_core::trace::TraceManifest;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(manifest) = TraceManifest::from_json(text) {
        let json = serde_json::to_string(&manifest).unwrap();
        assert_eq!(TraceManifest::from_json(&json).unwrap(), manifest);
    }
});
