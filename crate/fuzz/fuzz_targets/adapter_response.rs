#![no_main]

use libfuzzer_sys::fuzz_target;
use splatseg::distill::adapter::parse_response;

fuzz_target!(|data: &[u8]| {
    let Ok(line) = std::str::from_utf8(data) else { return };
    let _ = parse_response(line);
});
