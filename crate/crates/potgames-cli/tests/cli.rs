//! End-to-end tests of the `potgames` binary: exit codes, file artifacts,
//! and byte-level reproducibility.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_potgames"))
}

fn run_in(dir: &Path, args: &[&str]) -> Output {
    bin()
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn assert_code(out: &Output, code: i32) {
    assert_eq!(
        out.status.code(),
        Some(code),
        "stdout:\n{}\nstderr:\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn generate_train_eval_gradcheck_cournot() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_in(
        dir.path(),
        &[
            "generate", "--game", "cournot", "--n", "5", "--K", "40", "--sigma", "0.1", "--seed",
            "7", "--out", "c",
        ],
    );
    assert_code(&out, 0);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("seed 7"));
    assert!(dir.path().join("c.form").exists());
    assert!(dir.path().join("c.ds").exists());

    // The written files parse back through the library.
    let form =
        potgames::fileio::parse_form(&fs::read_to_string(dir.path().join("c.form")).unwrap())
            .unwrap();
    assert_eq!(form.agents, 5);
    let ds = potgames::fileio::parse_dataset(&fs::read_to_string(dir.path().join("c.ds")).unwrap())
        .unwrap();
    assert_eq!(ds.len(), 40);
    assert_eq!(ds.test_idx.len(), 4);

    let out = run_in(
        dir.path(),
        &[
            "train",
            "--data",
            "c.ds",
            "--T",
            "400",
            "--eta0",
            "0.1",
            "--schedule",
            "constant",
            "--seed",
            "1",
            "--out",
            "run",
        ],
    );
    assert_code(&out, 0);
    assert!(dir.path().join("run.csv").exists());
    assert!(dir.path().join("run.summary").exists());
    let csv = fs::read_to_string(dir.path().join("run.csv")).unwrap();
    assert!(
        csv.starts_with("iter,train_loss,test_error,step_size,grad_norm,degenerate,clip,wall_ms")
    );

    let out = run_in(
        dir.path(),
        &["eval", "--data", "c.ds", "--summary", "run.summary"],
    );
    assert_code(&out, 0);
    let learned: f64 = String::from_utf8_lossy(&out.stdout)
        .lines()
        .find_map(|l| l.strip_prefix("test_error ").map(|v| v.parse().unwrap()))
        .unwrap();
    let out = run_in(dir.path(), &["eval", "--data", "c.ds", "--true-theta"]);
    assert_code(&out, 0);
    let floor: f64 = String::from_utf8_lossy(&out.stdout)
        .lines()
        .find_map(|l| l.strip_prefix("test_error ").map(|v| v.parse().unwrap()))
        .unwrap();
    assert!(learned <= 2.0 * floor, "learned {learned} vs floor {floor}");

    let out = run_in(
        dir.path(),
        &[
            "gradcheck",
            "--data",
            "c.ds",
            "--samples",
            "10",
            "--seed",
            "3",
        ],
    );
    assert_code(&out, 0);
    assert!(String::from_utf8_lossy(&out.stdout).contains("verdict pass"));

    // Explicit θ evaluation and θ-list flags parse comma-separated values.
    let out = run_in(
        dir.path(),
        &["eval", "--data", "c.ds", "--theta", "1.0,0.8"],
    );
    assert_code(&out, 0);
    assert!(String::from_utf8_lossy(&out.stdout).contains("test_error "));
    assert_code(
        &run_in(dir.path(), &["eval", "--data", "c.ds", "--theta", "1.0"]),
        1,
    );
    assert_code(
        &run_in(
            dir.path(),
            &[
                "train",
                "--data",
                "c.ds",
                "--T",
                "5",
                "--seed",
                "1",
                "--theta-init",
                "0.9,0.7",
                "--out",
                "ti",
            ],
        ),
        0,
    );
    assert_code(
        &run_in(
            dir.path(),
            &[
                "generate",
                "--game",
                "cournot",
                "--n",
                "3",
                "--K",
                "10",
                "--sigma",
                "0",
                "--seed",
                "4",
                "--theta-true",
                "1.5,0.6",
                "--out",
                "tt",
            ],
        ),
        0,
    );
    let ds =
        potgames::fileio::parse_dataset(&fs::read_to_string(dir.path().join("tt.ds")).unwrap())
            .unwrap();
    assert_eq!(
        ds.theta_true.unwrap().as_slice(),
        &[1.5, 0.6],
        "theta-true override not honored"
    );
}

#[test]
fn reruns_with_identical_seeds_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    assert_code(
        &run_in(
            dir.path(),
            &[
                "generate", "--game", "cournot", "--n", "4", "--K", "30", "--sigma", "0.1",
                "--seed", "5", "--out", "c",
            ],
        ),
        0,
    );
    for (out_a, out_b) in [("a", "b")] {
        for stem in [out_a, out_b] {
            assert_code(
                &run_in(
                    dir.path(),
                    &[
                        "train", "--data", "c.ds", "--T", "200", "--seed", "12", "--out", stem,
                    ],
                ),
                0,
            );
        }
        let a = fs::read(dir.path().join(format!("{out_a}.csv"))).unwrap();
        let b = fs::read(dir.path().join(format!("{out_b}.csv"))).unwrap();
        assert_eq!(a, b, "metrics CSVs differ between identical-seed reruns");
        let sa = fs::read(dir.path().join(format!("{out_a}.summary"))).unwrap();
        let sb = fs::read(dir.path().join(format!("{out_b}.summary"))).unwrap();
        // Summaries agree except for the measured wall-clock line.
        let strip = |bytes: &[u8]| {
            String::from_utf8_lossy(bytes)
                .lines()
                .filter(|l| !l.starts_with("total_wall_ms"))
                .collect::<Vec<_>>()
                .join("\n")
        };
        assert_eq!(strip(&sa), strip(&sb));
    }
    // Regenerating the dataset with the same seed is also byte-identical.
    assert_code(
        &run_in(
            dir.path(),
            &[
                "generate", "--game", "cournot", "--n", "4", "--K", "30", "--sigma", "0.1",
                "--seed", "5", "--out", "c2",
            ],
        ),
        0,
    );
    assert_eq!(
        fs::read(dir.path().join("c.ds")).unwrap(),
        fs::read(dir.path().join("c2.ds")).unwrap()
    );
}

#[test]
fn congestion_pipeline_with_graph_file() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_in(
        dir.path(),
        &[
            "generate",
            "--game",
            "congestion",
            "--nodes",
            "8",
            "--p-edge",
            "0.3",
            "--agents",
            "3",
            "--K",
            "30",
            "--sigma",
            "0.1",
            "--seed",
            "3",
            "--out",
            "g",
        ],
    );
    assert_code(&out, 0);
    assert!(dir.path().join("g.graph").exists());
    let spec =
        potgames::fileio::parse_graph(&fs::read_to_string(dir.path().join("g.graph")).unwrap())
            .unwrap();
    assert_eq!(spec.nodes, 8);
    assert_eq!(spec.commodities.len(), 3);

    let out = run_in(
        dir.path(),
        &[
            "train", "--data", "g.ds", "--T", "150", "--eta0", "0.5", "--seed", "2", "--out",
            "grun",
        ],
    );
    assert_code(&out, 0);
    let out = run_in(
        dir.path(),
        &["eval", "--data", "g.ds", "--summary", "grun.summary"],
    );
    assert_code(&out, 0);
    // Rule 2 also completes on a degenerate-heavy instance.
    let out = run_in(
        dir.path(),
        &[
            "train",
            "--data",
            "g.ds",
            "--T",
            "30",
            "--seed",
            "2",
            "--rule",
            "rule2",
            "--epsilon",
            "1e-3",
            "--out",
            "grun2",
        ],
    );
    assert_code(&out, 0);
}

#[test]
fn exit_codes_for_usage_and_verification_failures() {
    let dir = tempfile::tempdir().unwrap();
    // Missing file: usage error.
    assert_code(&run_in(dir.path(), &["eval", "--data", "nope.ds"]), 1);
    // Unknown flag: usage error.
    assert_code(&run_in(dir.path(), &["train", "--bogus"]), 1);
    // Bad flag value: usage error.
    assert_code(
        &run_in(dir.path(), &["generate", "--game", "cournot", "--n", "1"]),
        1,
    );
    // Help succeeds.
    for cmd in ["generate", "train", "eval", "gradcheck"] {
        let out = run_in(dir.path(), &[cmd, "--help"]);
        assert_code(&out, 0);
        assert!(String::from_utf8_lossy(&out.stdout).contains("--"));
    }

    // The negative control decouples the implicit gradient from the loaded
    // form and must fail with the verification exit code.
    assert_code(
        &run_in(
            dir.path(),
            &[
                "generate", "--game", "cournot", "--n", "3", "--K", "20", "--sigma", "0", "--seed",
                "2", "--out", "c",
            ],
        ),
        0,
    );
    assert_code(
        &run_in(
            dir.path(),
            &["gradcheck", "--data", "c.ds", "--samples", "5"],
        ),
        0,
    );
    // Noiseless data evaluated at the generating parameters sits at solver
    // tolerance.
    let out = run_in(dir.path(), &["eval", "--data", "c.ds", "--true-theta"]);
    assert_code(&out, 0);
    let err: f64 = String::from_utf8_lossy(&out.stdout)
        .lines()
        .find_map(|l| l.strip_prefix("test_error ").map(|v| v.parse().unwrap()))
        .unwrap();
    assert!(err < 1e-8, "noiseless eval at true theta: {err}");
    let out = run_in(
        dir.path(),
        &[
            "gradcheck",
            "--data",
            "c.ds",
            "--samples",
            "5",
            "--corrupt-partials",
        ],
    );
    assert_code(&out, 3);
    assert!(String::from_utf8_lossy(&out.stdout).contains("verdict fail"));
}

#[test]
fn gradcheck_works_on_degenerate_congestion_data() {
    let dir = tempfile::tempdir().unwrap();
    assert_code(
        &run_in(
            dir.path(),
            &[
                "generate",
                "--game",
                "congestion",
                "--nodes",
                "6",
                "--p-edge",
                "0.4",
                "--agents",
                "2",
                "--theta-dim",
                "2",
                "--K",
                "20",
                "--sigma",
                "0.1",
                "--seed",
                "4",
                "--out",
                "g",
            ],
        ),
        0,
    );
    let out = run_in(
        dir.path(),
        &[
            "gradcheck",
            "--data",
            "g.ds",
            "--samples",
            "8",
            "--seed",
            "1",
        ],
    );
    assert_code(&out, 0);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("verdict pass"), "{stdout}");
    assert!(stdout.contains("degenerate_faces"), "{stdout}");
}

#[test]
fn eval_reports_error_on_empty_test_split() {
    let dir = tempfile::tempdir().unwrap();
    // K = 4 gives round(0.4) = 0 test points.
    assert_code(
        &run_in(
            dir.path(),
            &[
                "generate", "--game", "cournot", "--n", "2", "--K", "4", "--sigma", "0", "--seed",
                "1", "--out", "tiny",
            ],
        ),
        0,
    );
    let out = run_in(dir.path(), &["eval", "--data", "tiny.ds", "--true-theta"]);
    assert_code(&out, 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("empty test split"));
}
