#![no_main]

use libfuzzer_sys::fuzz_target;

// First line is the geometry string, the rest is the sample payload.
fuzz_target!(|data: &[u8]| {
    let split = data.iter().position(|&b| b == b'\n').unwrap_or(data.len());
    let Ok(text) = std::str::from_utf8(&data[..split]) else { return };
    let Ok(geom) = tdp::video_io::RawGeometry::parse(text) else { return };
    let payload = data.get(split + 1..).unwrap_or(&[]);
    if let Ok(clip) = tdp::video_io::parse_raw_yuv(payload, geom) {
        assert_eq!(clip.frames().len() * geom.frame_bytes(), payload.len());
    }
});
