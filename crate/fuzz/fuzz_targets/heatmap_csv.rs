#![no_main]

use fluency::eval::{heatmap_csv, parse_heatmap_csv};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &str| {
    if let Ok(m) = parse_heatmap_csv(data) {
        let _ = heatmap_csv(&m);
    }
});
