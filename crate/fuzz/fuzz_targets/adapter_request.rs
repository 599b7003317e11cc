#![no_main]

use libfuzzer_sys::fuzz_target;
use splatseg::distill::adapter::handle_line;
use splatseg::distill::{MockEmbedder, MockVlm};

fuzz_target!(|data: &[u8]| {
    let Ok(line) = std::str::from_utf8(data) else { return };
    let response = handle_line(line, &MockVlm::new(), &MockEmbedder::new(8));
    let text = serde_json::to_string(&response).expect("responses serialize");
    assert!(!text.contains('\n'));
});
