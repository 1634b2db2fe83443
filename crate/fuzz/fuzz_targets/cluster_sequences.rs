#![no_main]

use fluency::codebook::{cluster_line, parse_cluster_sequences};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    // First byte picks the bound on cluster indexes (0 = unbounded).
    let Some((&k, rest)) = data.split_first() else { return };
    let Ok(text) = std::str::from_utf8(rest) else { return };
    let k = (k != 0).then_some(usize::from(k));
    if let Ok(seqs) = parse_cluster_sequences(text, k) {
        let out: String = seqs.iter().map(|(id, s)| cluster_line(id, s) + "\n").collect();
        assert_eq!(parse_cluster_sequences(&out, k).unwrap(), seqs);
    }
});
