#![no_main]

use libfuzzer_sys::fuzz_target;
use nlhom_core::expr::{Env, Expression};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(e) = Expression::parse(text) {
        // Evaluation may fail on domain errors but must not panic.
        let env = Env::new().with_x([0.25, -0.5, 1.5]).with_z([0.1, 0.2, 0.3], [0.4, 0.5, 0.6]);
        let _ = e.eval(&env.with_xi([0.1, -0.2, 0.05]).with_r(0.3));
    }
});
