#![no_main]

use fluency::corpus::{manifest_line, parse_manifest};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &str| {
    if let Ok(records) = parse_manifest(data) {
        let text: String = records.iter().map(|r| manifest_line(r) + "\n").collect();
        assert_eq!(parse_manifest(&text).unwrap(), records);
    }
});
