#![no_main]

use fluency::pipeline::{parse_predictions, predictions_text};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &str| {
    if let Ok(preds) = parse_predictions(data) {
        let _ = parse_predictions(&predictions_text(&preds));
    }
});
