#![no_main]

use alure::pipeline::EmbeddingSnapshot;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(snap) = EmbeddingSnapshot::decode(data) {
        assert_eq!(EmbeddingSnapshot::decode(&snap.encode()).unwrap(), snap);
    }
});
