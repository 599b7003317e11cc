#![no_main]

use libfuzzer_sys::fuzz_target;
use splatseg::masks::BinaryMask;

fuzz_target!(|data: &[u8]| {
    if let Ok(mask) = BinaryMask::decode(data) {
        assert!(mask.count() <= mask.len() as u64);
    }
});
