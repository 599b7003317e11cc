#![no_main]

use libfuzzer_sys::fuzz_target;
use splatseg::scene::ply::{parse_header, read_table};

fuzz_target!(|data: &[u8]| {
    if let Ok((header, offset)) = parse_header(data) {
        assert!(offset <= data.len());
        for element in &header.elements {
            let _ = read_table(data, &element.name);
        }
    }
});
