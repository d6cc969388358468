#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    for key in ["vmaf", "vmaf_neg"] {
        if let Ok(v) = tdp::evaluation::metrics::parse_vmaf_json(data, key) {
            assert!(v.is_finite());
        }
    }
});
