#![no_main]

use alure::event_model::parse_history_line;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(line) = std::str::from_utf8(data) {
        if let Ok((h, _)) = parse_history_line(line, 1, 2) {
            assert_eq!(h.sequences.len(), 2);
            assert!(h.sequences.iter().all(|s| s.is_sorted()));
        }
    }
});
