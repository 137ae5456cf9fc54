use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

const SMALL: &str = r#"
num_clients = 8
num_participating = 5
dirichlet_alpha = 0.5
num_classes = 3
dim = 2
samples_per_class = 30
spread = 0.5
model = "logistic"
rounds = 1
cohort_size = 2
batch_size = 16
lr = 0.1
weighting = "entropy-softmax"
strategy = "random"
seed_data = 1
seed_init = 2
seed_selection = 3
"#;

fn fedgen(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fedgen")).args(args).output().expect("binary runs")
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p.to_string_lossy().into_owned()
}

fn manifest_hash(out: &Path) -> String {
    let m: Value = serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    m["config_hash"].as_str().unwrap().to_string()
}

#[test]
fn missing_config_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = fedgen(&["run", "--config", "/no/such/config.toml", "--out", tmp.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("/no/such/config.toml"));
}

#[test]
fn bad_configs_are_usage_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let out_dir = tmp.path().join("o");
    for (name, text) in [
        ("unknown.toml", format!("{SMALL}\nmystery = 1\n")),
        ("syntax.toml", "num_clients = = 3".to_string()),
        ("invalid.toml", SMALL.replace("cohort_size = 2", "cohort_size = 9")),
    ] {
        let cfg = write(tmp.path(), name, &text);
        let out = fedgen(&["run", "--config", &cfg, "--out", out_dir.to_str().unwrap()]);
        assert_eq!(out.status.code(), Some(2), "{name}");
    }
    assert_eq!(fedgen(&["run"]).status.code(), Some(2));
    assert_eq!(fedgen(&["frobnicate"]).status.code(), Some(2));
}

#[test]
fn unwritable_output_is_a_runtime_failure() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "c.toml", SMALL);
    let blocker = write(tmp.path(), "file", "x");
    let out = fedgen(&["run", "--config", &cfg, "--out", &format!("{blocker}/sub")]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn run_writes_artifacts_deterministically() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "c.toml", SMALL);
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    for dir in [&a, &b] {
        let out = fedgen(&["run", "--config", &cfg, "--out", dir.to_str().unwrap()]);
        assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    }
    for f in ["metrics.csv", "metrics.jsonl", "manifest.json", "checkpoint.bin", "table.json"] {
        assert!(a.join(f).is_file(), "{f}");
    }
    assert_eq!(fs::read(a.join("metrics.csv")).unwrap(), fs::read(b.join("metrics.csv")).unwrap());
    assert_eq!(fs::read(a.join("checkpoint.bin")).unwrap(), fs::read(b.join("checkpoint.bin")).unwrap());

    let csv = fs::read_to_string(a.join("metrics.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "round,strategy,weighting,cohort,id_acc,ood_acc,mean_loss,wall_ms");
    assert_eq!(lines.len(), 2);
    assert!(lines[1].starts_with("1,random,entropy-softmax,"));

    let params = fedgen::models::read_checkpoint(fs::File::open(a.join("checkpoint.bin")).unwrap()).unwrap();
    assert_eq!(params.len(), 3 * 2 + 3);
}

#[test]
fn config_hash_tracks_content_not_layout() {
    let tmp = tempfile::tempdir().unwrap();
    let mut reordered: Vec<&str> = SMALL.lines().filter(|l| !l.trim().is_empty()).collect();
    reordered.reverse();
    let variants = [
        ("base.toml", SMALL.to_string()),
        ("reordered.toml", format!("# same settings\n{}\n", reordered.join("\n"))),
        ("changed.toml", SMALL.replace("seed_selection = 3", "seed_selection = 4")),
    ];
    let mut hashes = Vec::new();
    for (name, text) in variants {
        let cfg = write(tmp.path(), name, &text);
        let out_dir = tmp.path().join(format!("{name}.out"));
        let out = fedgen(&["run", "--config", &cfg, "--out", out_dir.to_str().unwrap()]);
        assert_eq!(out.status.code(), Some(0));
        hashes.push(manifest_hash(&out_dir));
    }
    assert_eq!(hashes[0], hashes[1]);
    assert_ne!(hashes[0], hashes[2]);
    assert_eq!(hashes[0].len(), 64);
}

#[test]
fn verify_bounds_on_a_constant_loss_world() {
    let tmp = tempfile::tempdir().unwrap();
    let world = write(
        tmp.path(),
        "w.json",
        r#"{"distributions": [[0.2, 0.3, 0.5], [0.6, 0.3, 0.1]], "losses": [[1.5, 1.5, 1.5]], "loss_bound": 1.5}"#,
    );
    let out = fedgen(&["verify-bounds", "--world", &world]);
    assert_eq!(out.status.code(), Some(0));
    let reports: Vec<Value> = String::from_utf8(out.stdout)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(reports.len(), 4);
    let indist = reports.iter().find(|r| r["check"] == "indist_theorem").unwrap();
    assert!(indist["slack"].as_f64().unwrap().abs() <= 1e-9);
}

#[test]
fn verify_bounds_rejects_malformed_worlds() {
    let tmp = tempfile::tempdir().unwrap();
    for text in ["{not json", r#"{"distributions": [[0.5, 0.6]], "losses": [[1, 1]], "loss_bound": 1}"#] {
        let world = write(tmp.path(), "bad.json", text);
        assert_eq!(fedgen(&["verify-bounds", "--world", &world]).status.code(), Some(2));
    }
    assert_eq!(fedgen(&["verify-bounds"]).status.code(), Some(2));
    assert_eq!(fedgen(&["verify-bounds", "--world", "x", "--random", "3"]).status.code(), Some(2));
}

#[test]
fn verify_bounds_reports_enumeration_overflow_as_runtime_failure() {
    let tmp = tempfile::tempdir().unwrap();
    let dists = vec!["[0.5, 0.5]"; 24].join(", ");
    let world = write(
        tmp.path(),
        "big.json",
        &format!(r#"{{"distributions": [{dists}], "losses": [[0.0, 1.0]], "loss_bound": 1.0}}"#),
    );
    assert_eq!(fedgen(&["verify-bounds", "--world", &world]).status.code(), Some(1));
}

#[test]
fn inspect_partition_examples() {
    let tmp = tempfile::tempdir().unwrap();
    let iid = write(tmp.path(), "iid.toml", &SMALL.replace("dirichlet_alpha = 0.5", "dirichlet_alpha = 1e6").replace("samples_per_class = 30", "samples_per_class = 400"));
    let out = fedgen(&["inspect-partition", "--config", &iid]);
    assert_eq!(out.status.code(), Some(0));
    let again = fedgen(&["inspect-partition", "--config", &iid]);
    assert_eq!(out.stdout, again.stdout);
    let m: Value = serde_json::from_slice(&out.stdout).unwrap();
    let global = m["global_entropy"].as_f64().unwrap();
    for c in m["clients"].as_array().unwrap() {
        assert!((c["empirical_entropy"].as_f64().unwrap() - global).abs() <= 0.05);
    }

    let single = write(
        tmp.path(),
        "one.toml",
        &SMALL
            .replace("num_clients = 8", "num_clients = 1")
            .replace("num_participating = 5", "num_participating = 1")
            .replace("cohort_size = 2", "cohort_size = 1"),
    );
    let out = fedgen(&["inspect-partition", "--config", &single]);
    let m: Value = serde_json::from_slice(&out.stdout).unwrap();
    let clients = m["clients"].as_array().unwrap();
    assert_eq!(clients.len(), 1);
    assert!((clients[0]["empirical_entropy"].as_f64().unwrap() - m["global_entropy"].as_f64().unwrap()).abs() < 1e-12);
}
