#![no_main]
use libfuzzer_sys::fuzz_target;
use tcd_core::eval::Dataset;

fuzz_target!(|data: &[u8]| {
    let text = String::from_utf8_lossy(data);
    if let Ok(ds) = Dataset::from_json(&text) {
        let json = ds.to_json().unwrap();
        assert_eq!(Dataset::from_json(&json).unwrap(), ds);
    }
});
