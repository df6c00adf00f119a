#![no_main]

use libfuzzer_sys::fuzz_target;
use potgames::fileio;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        // Summaries are consumed by `eval`; parsing must never panic.
        let _ = fileio::parse_summary(text);
    }
});
