#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        assert!(tdp::preanalysis::parse_qp_log(text).iter().all(|q| q.is_finite()));
    }
});
