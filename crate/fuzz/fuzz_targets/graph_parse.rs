#![no_main]

use libfuzzer_sys::fuzz_target;
use potgames::fileio;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(spec) = fileio::parse_graph(text) {
            let rewritten = fileio::write_graph(&spec);
            let reparsed = fileio::parse_graph(&rewritten).expect("rewrite must parse");
            assert_eq!(spec, reparsed);
        }
    }
});
