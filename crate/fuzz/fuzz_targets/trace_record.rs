#![no_main]
use libfuzzer_sys::fuzz_target;
use tcd_core::trace::{decode_records, encode_record};

// Accepted input must re-encode to the same bytes.
fuzz_target!(|data: &[u8]| {
    let Ok(records) = decode_records(data) else {
        return;
    };
    let mut again = Vec::with_capacity(data.len());
    for (header, stack) in &records {
        again.extend(encode_record(stack, header.step).expect("decoded stacks re-encode"));
    }
    assert_eq!(again, data);
});
