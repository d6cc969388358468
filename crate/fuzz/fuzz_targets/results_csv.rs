#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(rows) = tdp::evaluation::ladder::parse_results(data) {
        for metric in ["ms_ssim", "psnr", "vmaf"] {
            let _ = tdp::evaluation::curves_from_rows(&rows, metric);
        }
    }
});
