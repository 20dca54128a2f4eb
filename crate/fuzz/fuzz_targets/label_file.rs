#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(records) = framers::labelgen::parse_label_file(data) {
        for r in &records {
            assert!(r.validate().is_ok());
        }
    }
});
