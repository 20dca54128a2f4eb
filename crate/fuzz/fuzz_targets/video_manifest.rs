#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(m) = framers::clipio::parse_video_manifest(data) {
        assert!(m.blob_len().is_ok());
    }
});
