#![no_main]

use libfuzzer_sys::fuzz_target;
use splatseg::distill::clean_names;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let raw: Vec<String> = text.split('\0').map(String::from).collect();
    let names = clean_names(&raw, 16);
    assert!(names.len() <= 16);
    assert!(names.iter().all(|n| !n.is_empty() && !n.contains('\n')));
});
