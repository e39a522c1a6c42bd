#![no_main]

use libfuzzer_sys::fuzz_target;
use nlhom_core::config::Config;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    // Parsing validates kernels and coefficients but builds no lattice.
    let _ = Config::parse(text);
});
