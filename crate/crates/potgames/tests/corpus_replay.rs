//! Replays the checked-in fuzz corpus through the parsers: every seed must
//! parse and round-trip, and simple mutations (truncations, bit flips) must
//! never panic. This keeps the fuzz-target properties exercised in CI even
//! without a fuzzing toolchain.

use std::fs;
use std::path::PathBuf;

use potgames::fileio;

fn corpus_dir(target: &str) -> Option<PathBuf> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../fuzz/corpus")
        .join(target);
    dir.is_dir().then_some(dir)
}

fn seeds(target: &str) -> Vec<(PathBuf, String)> {
    let Some(dir) = corpus_dir(target) else {
        return Vec::new();
    };
    let mut out: Vec<(PathBuf, String)> = fs::read_dir(dir)
        .unwrap()
        .filter_map(|e| {
            let path = e.ok()?.path();
            let text = fs::read_to_string(&path).ok()?;
            Some((path, text))
        })
        .collect();
    out.sort_by(|a, b| a.0.cmp(&b.0));
    out
}

fn mutations(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for frac in [0.25, 0.5, 0.9] {
        let cut = (text.len() as f64 * frac) as usize;
        out.push(text[..cut].to_string());
    }
    out.push(text.replace('1', "9999999999999999999"));
    out.push(text.replace('.', ","));
    out.push(text.replace("matrix", "matrox"));
    out.push(format!("{text}\ntrailing junk"));
    out.push(text.to_uppercase());
    out
}

#[test]
fn form_corpus_round_trips_and_mutations_do_not_panic() {
    let seeds = seeds("form_parse");
    assert!(!seeds.is_empty(), "corpus seeds missing");
    for (path, text) in seeds {
        let form = fileio::parse_form(&text)
            .unwrap_or_else(|e| panic!("{} must parse: {e}", path.display()));
        let rewritten = fileio::write_form(&form);
        assert_eq!(form, fileio::parse_form(&rewritten).unwrap());
        for m in mutations(&text) {
            let _ = fileio::parse_form(&m);
        }
    }
}

#[test]
fn dataset_corpus_round_trips_and_mutations_do_not_panic() {
    let seeds = seeds("dataset_parse");
    assert!(!seeds.is_empty(), "corpus seeds missing");
    for (path, text) in seeds {
        let ds = fileio::parse_dataset(&text)
            .unwrap_or_else(|e| panic!("{} must parse: {e}", path.display()));
        let rewritten = fileio::write_dataset(&ds);
        assert_eq!(ds, fileio::parse_dataset(&rewritten).unwrap());
        for m in mutations(&text) {
            let _ = fileio::parse_dataset(&m);
        }
    }
}

#[test]
fn graph_corpus_round_trips_and_mutations_do_not_panic() {
    let seeds = seeds("graph_parse");
    assert!(!seeds.is_empty(), "corpus seeds missing");
    for (path, text) in seeds {
        let spec = fileio::parse_graph(&text)
            .unwrap_or_else(|e| panic!("{} must parse: {e}", path.display()));
        let rewritten = fileio::write_graph(&spec);
        assert_eq!(spec, fileio::parse_graph(&rewritten).unwrap());
        for m in mutations(&text) {
            let _ = fileio::parse_graph(&m);
        }
    }
}

#[test]
fn summary_corpus_parses_and_mutations_do_not_panic() {
    let seeds = seeds("summary_parse");
    assert!(!seeds.is_empty(), "corpus seeds missing");
    for (path, text) in seeds {
        fileio::parse_summary(&text)
            .unwrap_or_else(|e| panic!("{} must parse: {e}", path.display()));
        for m in mutations(&text) {
            let _ = fileio::parse_summary(&m);
        }
    }
}
