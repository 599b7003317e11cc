#![no_main]

use libfuzzer_sys::fuzz_target;
use splatseg::eval::{encode_labeled_cloud, parse_labeled_cloud};

fuzz_target!(|data: &[u8]| {
    if let Ok(cloud) = parse_labeled_cloud(data) {
        assert_eq!(cloud.points.len(), cloud.labels.len());
        let _ = parse_labeled_cloud(&encode_labeled_cloud(&cloud));
    }
});
