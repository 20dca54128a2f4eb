#![no_main]

use framers::codec::CompressedClip;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(cc) = CompressedClip::from_bytes(data) {
        // anything that decodes must survive a re-encode unchanged
        let bytes = cc.to_bytes().expect("decoded container re-encodes");
        assert_eq!(CompressedClip::from_bytes(&bytes).expect("re-encoded container decodes"), cc);
    }
});
