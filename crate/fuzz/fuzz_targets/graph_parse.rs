#![no_main]

use alure::graph::{parse_graph, write_graph};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(graph) = parse_graph(text) {
        let mut out = Vec::new();
        write_graph(&graph, &mut out).unwrap();
        assert_eq!(parse_graph(std::str::from_utf8(&out).unwrap()).unwrap(), graph);
    }
});
