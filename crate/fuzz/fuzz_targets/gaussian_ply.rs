#![no_main]

use libfuzzer_sys::fuzz_target;
use splatseg::scene::parse_gaussian_ply;

fuzz_target!(|data: &[u8]| {
    if let Ok(gaussians) = parse_gaussian_ply(data) {
        for g in gaussians.iter() {
            let values = g.position.iter().chain(&g.color).chain(&g.scale).chain(&g.rotation).chain([&g.opacity]);
            assert!(values.into_iter().all(|v| v.is_finite()));
            assert!((0.0..=1.0).contains(&g.opacity));
        }
    }
});
