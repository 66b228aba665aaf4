#![no_main]
use libfuzzer_sys::fuzz_target;
use tcd_core::config::{EngineConfig, RawConfig};

fuzz_target!(|data: &[u8]| {
    let text = String::from_utf8_lossy(data);
    if let Ok(raw) = RawConfig::from_json(&text) {
        // keep the fuzzer off the filesystem
        let raw = RawConfig { watermark_image: None, ..raw };
        let _ = EngineConfig::resolve(raw, None);
    }
});
