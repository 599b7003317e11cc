#![no_main]

use libfuzzer_sys::fuzz_target;
use splatseg::config::PipelineConfig;

// First line is a `key=value` override, the rest is the config document.
fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let (first, rest) = text.split_once('\n').unwrap_or((text, ""));
    let overrides: Vec<String> = if first.contains('=') { vec![first.to_string()] } else { Vec::new() };
    let _ = PipelineConfig::from_toml_str(rest, &overrides);
});
