#![no_main]

use libfuzzer_sys::fuzz_target;
use splatseg::scene::{cameras_to_json, parse_cameras};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(cameras) = parse_cameras(text) {
        let again = parse_cameras(&cameras_to_json(&cameras)).expect("written cameras parse");
        assert_eq!(again.len(), cameras.len());
    }
});
