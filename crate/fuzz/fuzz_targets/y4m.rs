#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(clip) = tdp::video_io::parse_y4m(data) {
        let mut out = Vec::new();
        tdp::video_io::encode_y4m(&clip, &mut out).unwrap();
        let again = tdp::video_io::parse_y4m(out.as_slice()).unwrap();
        assert_eq!(again.content_hash(), clip.content_hash());
    }
});
