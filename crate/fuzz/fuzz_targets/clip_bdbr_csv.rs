#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let _ = tdp::evaluation::ladder::parse_clip_bdbr(data);
});
