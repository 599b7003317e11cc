#![no_main]

use libfuzzer_sys::fuzz_target;
use splatseg::distill::adapter::decode_png_base64;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let _ = decode_png_base64(text);
});
