#![no_main]

use fluency::corpus::{alignment_line, parse_alignments};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &str| {
    if let Ok(items) = parse_alignments(data) {
        let text: String = items.iter().map(|(id, a)| alignment_line(id, a) + "\n").collect();
        assert_eq!(parse_alignments(&text).unwrap(), items);
        for (_, a) in &items {
            let _ = a.validate(a.span(), None);
        }
    }
});
