#![no_main]

use fluency::codebook::Codebook;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(cb) = Codebook::decode(data) {
        let again = Codebook::decode(&cb.encode()).unwrap();
        assert_eq!(again.encode(), cb.encode());
    }
});
