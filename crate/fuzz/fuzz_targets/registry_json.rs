#![no_main]

use libfuzzer_sys::fuzz_target;
use splatseg::distill::InstanceRegistry;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(registry) = InstanceRegistry::from_json_str(text) {
        let again = InstanceRegistry::from_json_str(&registry.to_json_string()).expect("written registry parses");
        assert_eq!(again, registry);
    }
});
