#![no_main]

use fluency::nnet::checkpoint;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok((header, params)) = checkpoint::decode(data) {
        let bytes = checkpoint::encode(&header, &params);
        let (h2, p2) = checkpoint::decode(&bytes).unwrap();
        assert_eq!(h2, header);
        assert!(p2.same_layout(&params));
    }
});
