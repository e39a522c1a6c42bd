#![no_main]

use libfuzzer_sys::fuzz_target;
use nlhom_core::cell::io::{decode, encode};

fuzz_target!(|data: &[u8]| {
    if let Ok(field) = decode(data) {
        assert_eq!(encode(&field), data);
    }
});
