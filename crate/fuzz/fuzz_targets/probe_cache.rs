#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(entry) = tdp::preanalysis::parse_probe_cache(data) {
        assert!(entry.result.clip_qp.is_finite());
    }
});
