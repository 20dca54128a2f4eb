#![no_main]

use framers::clipio::{decode_raw_frames, VideoManifest, RAW_FORMAT};
use libfuzzer_sys::fuzz_target;

// The first four bytes pick a small geometry; the rest is the blob.
fuzz_target!(|data: &[u8]| {
    let Some((dims, blob)) = data.split_first_chunk::<4>() else {
        return;
    };
    let manifest = VideoManifest {
        format: RAW_FORMAT.to_string(),
        fps: 30.0,
        frames: dims[0] as usize % 8,
        height: dims[1] as usize % 16,
        width: dims[2] as usize % 16,
        channels: dims[3] as usize % 5,
    };
    if let Ok(video) = decode_raw_frames("fuzz", &manifest, blob) {
        assert_eq!(video.frames.len(), blob.len());
    }
});
