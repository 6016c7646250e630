#![no_main]

use alure::event_model::read_catalog;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let _ = read_catalog(data);
});
