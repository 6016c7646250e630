#![no_main]

use alure::encoder::{decode_checkpoint, encode_checkpoint};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok((params, cfg)) = decode_checkpoint(data) {
        let again = encode_checkpoint(&params, &cfg).expect("decoded checkpoint re-encodes");
        let (p2, c2) = decode_checkpoint(&again).expect("re-encoded checkpoint decodes");
        assert_eq!(c2, cfg);
        assert_eq!(p2.tensors().len(), params.tensors().len());
    }
});
