#![no_main]
use libfuzzer_sys::fuzz_target;
use tcd_core::image::{decode_png, encode_png};

fuzz_target!(|data: &[u8]| {
    if let Ok(img) = decode_png(data) {
        let bytes = encode_png(&img).unwrap();
        assert_eq!(decode_png(&bytes).unwrap(), img);
    }
});
