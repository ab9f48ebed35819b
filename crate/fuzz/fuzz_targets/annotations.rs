#![no_main]

use libfuzzer_sys::fuzz_target;
use ststnet::dataio::{parse_annotations, write_annotations};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(rows) = parse_annotations(text) {
        // Anything accepted must survive a write/parse cycle unchanged.
        let again = parse_annotations(&write_annotations(&rows)).expect("reparse");
        assert_eq!(rows, again);
    }
});
