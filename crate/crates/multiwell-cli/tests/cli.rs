//! Binary-level checks: artifact layout, exit codes, flag validation, and
//! seed handling.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_multiwell"))
}

fn fixture(name: &str) -> String {
    format!("{}/fixtures/{name}", env!("CARGO_MANIFEST_DIR"))
}

fn run_in(dir: &Path, args: &[&str]) -> Output {
    bin().args(args).arg("--out").arg(dir).output().unwrap()
}

fn assert_code(out: &Output, code: i32) {
    assert_eq!(
        out.status.code(),
        Some(code),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn metastable_v_table_matches_hand_cascade() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_in(
        dir.path(),
        &[
            "metastable",
            "--config",
            &fixture("fourwell.cfg"),
            "--v-table",
            &fixture("fourwell.vt"),
            "--branch",
            "0.3,0.6,0.7",
        ],
    );
    assert_code(&out, 0);
    let csv = fs::read_to_string(dir.path().join("timeline.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("threshold,changed,V1,V2,V3,V4"));
    let rows: Vec<(f64, bool, Vec<f64>)> = lines
        .map(|l| {
            let cells: Vec<&str> = l.split(',').collect();
            (
                cells[0].parse().unwrap(),
                cells[1].parse().unwrap(),
                cells[2..].iter().map(|c| c.parse().unwrap()).collect(),
            )
        })
        .collect();
    let (po5, po6, po7) = (0.3f64, 0.6f64, 0.7f64);
    let u0 = [
        po7 * po6 * po5,
        po7 * po6 * (1.0 - po5),
        po7 * (1.0 - po6),
        1.0 - po7,
    ];
    let u1 = [po6 * po7, 0.0, (1.0 - po6) * po7, 1.0 - po7];
    let u2 = [0.0, 0.0, po7, 1.0 - po7];
    let u3 = [0.0, 0.0, 1.0, 0.0];
    let expected: [(f64, bool, &[f64; 4]); 7] = [
        (0.0, true, &u0),
        (1.0, true, &u1),
        (2.0, false, &u1),
        (3.0, true, &u2),
        (5.0, true, &u3),
        (6.0, false, &u3),
        (7.0, false, &u3),
    ];
    assert_eq!(rows.len(), expected.len());
    for ((t, changed, dist), (et, ech, want)) in rows.iter().zip(expected) {
        assert_eq!(*t, et);
        assert_eq!(*changed, ech);
        for (&got, &want_k) in dist.iter().zip(want.iter()) {
            if want_k == 0.0 {
                assert_eq!(got, 0.0);
            } else {
                assert!((got - want_k).abs() <= 1e-12, "{got} vs {want_k}");
            }
        }
    }
    // The report carries the cycle structure alongside the timeline.
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("report.json")).unwrap())
            .unwrap();
    assert!(report["cycles"].is_array());
}

#[test]
fn validate_passes_on_both_fixtures() {
    for cfg in ["fourwell.cfg", "twowell.cfg"] {
        let dir = tempfile::tempdir().unwrap();
        let out = run_in(dir.path(), &["validate", "--config", &fixture(cfg)]);
        assert_code(&out, 0);
        let text = fs::read_to_string(dir.path().join("validate.txt")).unwrap();
        assert!(text.contains(", 0 failed"), "{cfg}: {text}");
        let report: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(dir.path().join("validate.json")).unwrap())
                .unwrap();
        assert_eq!(report["failed"], 0, "{cfg}");
        for check in report["checks"].as_array().unwrap() {
            assert_eq!(check["passed"], true, "{cfg}: {}", check["name"]);
        }
    }
}

#[test]
fn malformed_config_exits_with_config_code() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    fs::write(&cfg, "[wells]\nwalls nope\n").unwrap();
    let out = run_in(dir.path(), &["validate", "--config", cfg.to_str().unwrap()]);
    assert_code(&out, 2);
}

#[test]
fn missing_config_file_exits_with_config_code() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_in(dir.path(), &["rate", "--config", "/no/such/file.cfg"]);
    assert_code(&out, 2);
}

#[test]
fn v_table_missing_climb_exits_with_config_code() {
    let dir = tempfile::tempdir().unwrap();
    let vt = dir.path().join("partial.vt");
    // Drop the V4 -> O7 climb.
    fs::write(&vt, "V1 O5 2.0\nV2 O5 1.0\nV3 O6 6.0\nO5 O6 1.0\nO6 O7 1.0\n").unwrap();
    let out = run_in(
        dir.path(),
        &[
            "metastable",
            "--config",
            &fixture("fourwell.cfg"),
            "--v-table",
            vt.to_str().unwrap(),
        ],
    );
    assert_code(&out, 2);
    assert!(
        String::from_utf8_lossy(&out.stderr).contains("missing the climb"),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn tied_v_table_exits_with_invariant_code() {
    let dir = tempfile::tempdir().unwrap();
    let vt = dir.path().join("tied.vt");
    // V1 and V2 exit their singleton cycles at the same exponent.
    fs::write(
        &vt,
        "V1 O5 1.0\nV2 O5 1.0\nV3 O6 6.0\nV4 O7 5.0\nO5 O6 1.0\nO6 O7 1.0\n",
    )
    .unwrap();
    let out = run_in(
        dir.path(),
        &[
            "metastable",
            "--config",
            &fixture("fourwell.cfg"),
            "--v-table",
            vt.to_str().unwrap(),
        ],
    );
    assert_code(&out, 5);
}

#[test]
fn branch_flag_count_mismatch_exits_with_config_code() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_in(
        dir.path(),
        &[
            "metastable",
            "--config",
            &fixture("fourwell.cfg"),
            "--branch",
            "0.3,0.6",
        ],
    );
    assert_code(&out, 2);
}

#[test]
fn unknown_branching_method_exits_with_config_code() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_in(
        dir.path(),
        &[
            "branching",
            "--config",
            &fixture("fourwell.cfg"),
            "--method",
            "bogus",
        ],
    );
    assert_code(&out, 2);
}

#[test]
fn different_seed_changes_the_trajectory() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let args = ["simulate", "--config", &fixture("fourwell.cfg")];
    let out_a = bin()
        .args(args)
        .args(["--seed", "7", "--out"])
        .arg(a.path())
        .output()
        .unwrap();
    let out_b = bin()
        .args(args)
        .args(["--seed", "8", "--out"])
        .arg(b.path())
        .output()
        .unwrap();
    assert_code(&out_a, 0);
    assert_code(&out_b, 0);
    let ta = fs::read(a.path().join("trajectory.csv")).unwrap();
    let tb = fs::read(b.path().join("trajectory.csv")).unwrap();
    assert_ne!(ta, tb, "seeds 7 and 8 produced identical trajectories");
}

#[test]
fn env_var_sets_the_output_directory() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin()
        .args(["rate", "--config", &fixture("fourwell.cfg")])
        .env("MULTIWELL_OUT", dir.path())
        .output()
        .unwrap();
    assert_code(&out, 0);
    assert!(dir.path().join("manifest.json").exists());
    assert!(dir.path().join("rate_table.json").exists());
}

#[test]
fn json_flag_echoes_the_report() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_in(
        dir.path(),
        &[
            "metastable",
            "--config",
            &fixture("fourwell.cfg"),
            "--v-table",
            &fixture("fourwell.vt"),
            "--json",
        ],
    );
    assert_code(&out, 0);
    let echoed: serde_json::Value =
        serde_json::from_slice(&out.stdout).expect("stdout is a JSON document");
    assert!(echoed["timeline"].is_array());
}

#[test]
fn manifest_lists_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_in(
        dir.path(),
        &["simulate", "--config", &fixture("fourwell.cfg"), "--replicas", "2"],
    );
    assert_code(&out, 0);
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("manifest.json")).unwrap())
            .unwrap();
    assert_eq!(manifest["tool"], "multiwell");
    assert_eq!(manifest["subcommand"], "simulate");
    let sha = manifest["config_sha256"].as_str().unwrap();
    assert_eq!(sha.len(), 64);
    assert!(sha.chars().all(|c| c.is_ascii_hexdigit()));
    let mut listed: Vec<String> = manifest["outputs"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_str().unwrap().to_string())
        .collect();
    listed.sort();
    let mut on_disk: Vec<String> = fs::read_dir(dir.path())
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .filter(|n| n != "manifest.json")
        .collect();
    on_disk.sort();
    assert_eq!(listed, on_disk);
}
