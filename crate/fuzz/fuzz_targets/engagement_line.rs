#![no_main]

use alure::event_model::parse_engagement_line;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(line) = std::str::from_utf8(data) {
        let _ = parse_engagement_line(line, 1);
    }
});
