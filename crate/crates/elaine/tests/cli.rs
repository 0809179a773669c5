//! End-to-end checks of the command-line binary: determinism of produced
//! files, config-file handling, and exit codes.

use std::path::Path;
use std::process::{Command, Output};

fn elaine(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_elaine"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary should spawn")
}

fn assert_success(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn gen_data(dir: &Path, seed: &str) {
    let out = elaine(
        &[
            "gen-synthetic",
            "--blocks",
            "2",
            "--nodes-per-block",
            "8",
            "--p-in",
            "0.5",
            "--p-out",
            "0.1",
            "--edge-topics",
            "3",
            "--attr-noise",
            "0.1",
            "--out-dir",
            "data",
            "--seed",
            seed,
        ],
        dir,
    );
    assert_success(&out);
}

const FAST_MODEL: &[&str] = &[
    "--dim",
    "3",
    "--encoder-hidden",
    "6",
    "--epochs",
    "2",
    "--walks-per-node",
    "2",
    "--walk-length",
    "2",
];

#[test]
fn synthetic_data_is_deterministic_per_seed() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    gen_data(a.path(), "7");
    gen_data(b.path(), "7");
    for f in ["graph.tsv", "edge_attrs.tsv", "labels.tsv"] {
        let x = std::fs::read(a.path().join("data").join(f)).unwrap();
        let y = std::fs::read(b.path().join("data").join(f)).unwrap();
        assert_eq!(x, y, "{f} differs between identical seeds");
    }
    let c = tempfile::tempdir().unwrap();
    gen_data(c.path(), "8");
    let x = std::fs::read(a.path().join("data/graph.tsv")).unwrap();
    let y = std::fs::read(c.path().join("data/graph.tsv")).unwrap();
    assert_ne!(x, y, "different seeds should draw different graphs");
}

#[test]
fn embed_output_is_bitwise_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    gen_data(dir.path(), "3");
    let mut args = vec![
        "embed",
        "data/graph.tsv",
        "--edge-attrs",
        "data/edge_attrs.tsv",
    ];
    args.extend_from_slice(FAST_MODEL);
    let run = |out_name: &str, seed: &str| {
        let mut a = args.clone();
        a.extend_from_slice(&["--out", out_name, "--seed", seed]);
        assert_success(&elaine(&a, dir.path()));
        std::fs::read(dir.path().join(out_name)).unwrap()
    };
    let first = run("e1.txt", "0");
    let second = run("e2.txt", "0");
    assert_eq!(first, second, "same seed must give identical embeddings");
    let third = run("e3.txt", "5");
    assert_ne!(first, third, "different seeds should differ");

    let header = String::from_utf8_lossy(&first);
    assert!(header.starts_with("16 3\n"));
    assert_eq!(header.lines().count(), 17);
}

#[test]
fn linkpred_writes_a_csv_report() {
    let dir = tempfile::tempdir().unwrap();
    gen_data(dir.path(), "4");
    let mut args = vec![
        "linkpred",
        "data/graph.tsv",
        "--edge-attrs",
        "data/edge_attrs.tsv",
        "--repeats",
        "2",
        "--holdout",
        "0.3",
        "--max-eval-nodes",
        "16",
        "--out",
        "report",
    ];
    args.extend_from_slice(FAST_MODEL);
    let out = elaine(&args, dir.path());
    assert_success(&out);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(
        stdout.contains("map"),
        "stdout table mentions map: {stdout}"
    );
    let csv = std::fs::read_to_string(dir.path().join("report/linkpred.csv")).unwrap();
    assert!(csv.starts_with("label,metric,mean,std,repeats\n"));
    assert!(csv.contains("model,map,"));
}

#[test]
fn config_file_is_honored_and_validated() {
    let dir = tempfile::tempdir().unwrap();
    gen_data(dir.path(), "5");
    std::fs::write(
        dir.path().join("run.toml"),
        "[model]\ndim = 3\nencoder_hidden = [6]\nepochs = 2\nwalks_per_node = 2\nwalk_length = 2\n\n[eval]\nrepeats = 2\nholdout_fraction = 0.3\n",
    )
    .unwrap();
    let out = elaine(
        &[
            "linkpred",
            "data/graph.tsv",
            "--edge-attrs",
            "data/edge_attrs.tsv",
            "--config",
            "run.toml",
        ],
        dir.path(),
    );
    assert_success(&out);

    std::fs::write(dir.path().join("bad.toml"), "[model]\nnot_a_knob = 1\n").unwrap();
    let out = elaine(
        &[
            "linkpred",
            "data/graph.tsv",
            "--edge-attrs",
            "data/edge_attrs.tsv",
            "--config",
            "bad.toml",
        ],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(
        stderr.contains("not_a_knob") || stderr.contains("unknown field"),
        "stderr should name the bad key: {stderr}"
    );
}

#[test]
fn nodeclass_reports_f1_rows() {
    let dir = tempfile::tempdir().unwrap();
    gen_data(dir.path(), "6");
    let mut args = vec![
        "nodeclass",
        "data/graph.tsv",
        "--edge-attrs",
        "data/edge_attrs.tsv",
        "--labels",
        "data/labels.tsv",
        "--train-ratios",
        "0.5",
        "--repeats",
        "2",
        "--out",
        "report",
    ];
    args.extend_from_slice(FAST_MODEL);
    let out = elaine(&args, dir.path());
    assert_success(&out);
    let csv = std::fs::read_to_string(dir.path().join("report/nodeclass.csv")).unwrap();
    assert!(csv.contains("ratio=0.5,micro_f1,"));
    assert!(csv.contains("ratio=0.5,macro_f1,"));
}

#[test]
fn ablate_reports_every_ladder_rung() {
    let dir = tempfile::tempdir().unwrap();
    gen_data(dir.path(), "9");
    let mut args = vec![
        "ablate",
        "data/graph.tsv",
        "--edge-attrs",
        "data/edge_attrs.tsv",
        "--repeats",
        "2",
        "--holdout",
        "0.3",
        "--out",
        "report",
    ];
    args.extend_from_slice(FAST_MODEL);
    let out = elaine(&args, dir.path());
    assert_success(&out);
    let csv = std::fs::read_to_string(dir.path().join("report/ablation.csv")).unwrap();
    for name in ["AE", "VAE", "VAE+HO", "VAE+HO-R", "NA-ELAINE", "ELAINE"] {
        assert!(
            csv.contains(&format!("{name},map,")),
            "missing {name}: {csv}"
        );
    }
}

#[test]
fn sweep_reports_each_value() {
    let dir = tempfile::tempdir().unwrap();
    gen_data(dir.path(), "10");
    let mut args = vec![
        "sweep",
        "data/graph.tsv",
        "--edge-attrs",
        "data/edge_attrs.tsv",
        "--axis",
        "dim",
        "--values",
        "2,3",
        "--repeats",
        "2",
        "--holdout",
        "0.3",
        "--out",
        "report",
    ];
    args.extend_from_slice(FAST_MODEL);
    let out = elaine(&args, dir.path());
    assert_success(&out);
    let csv = std::fs::read_to_string(dir.path().join("report/sweep.csv")).unwrap();
    assert!(csv.contains("dim=2,map,"));
    assert!(csv.contains("dim=3,map,"));
}

#[test]
fn exit_codes_distinguish_usage_from_runtime_failures() {
    let dir = tempfile::tempdir().unwrap();
    // Unknown flag: usage error, code 2.
    let out = elaine(&["embed", "g.tsv", "--out", "e.txt", "--bogus"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    // Missing required argument: code 2.
    let out = elaine(&["embed", "g.tsv"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    // Nonexistent input file: runtime error, code 1.
    let out = elaine(&["embed", "missing.tsv", "--out", "e.txt"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("error:"));
    // Help exits cleanly.
    let out = elaine(&["--help"], dir.path());
    assert_eq!(out.status.code(), Some(0));
}
