#![no_main]

use libfuzzer_sys::fuzz_target;
use potgames::fileio;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(form) = fileio::parse_form(text) {
            // Anything the parser accepts must round-trip bit-exactly.
            let rewritten = fileio::write_form(&form);
            let reparsed = fileio::parse_form(&rewritten).expect("rewrite must parse");
            assert_eq!(form, reparsed);
        }
    }
});
