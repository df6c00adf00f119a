#![no_main]

use libfuzzer_sys::fuzz_target;
use potgames::fileio;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(ds) = fileio::parse_dataset(text) {
            let rewritten = fileio::write_dataset(&ds);
            let reparsed = fileio::parse_dataset(&rewritten).expect("rewrite must parse");
            assert_eq!(ds, reparsed);
        }
    }
});
