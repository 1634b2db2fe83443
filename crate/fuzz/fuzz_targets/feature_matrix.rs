#![no_main]

use fluency::corpus::FeatureMatrix;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    // Anything that decodes must survive a re-encode byte for byte
    // (compared as bytes so NaN payloads don't trip PartialEq).
    if let Ok(m) = FeatureMatrix::decode(data) {
        let bytes = m.encode();
        assert_eq!(FeatureMatrix::decode(&bytes).unwrap().encode(), bytes);
    }
});
