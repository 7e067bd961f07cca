use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use netfx::evalkit::EffectReport;
use netfx::synthgen::bundle_hash;
use netfx::trainer::EpochRecord;

const TOY: &str = r#"
seed = 5

[generator]
dim = 3

[generator.graph]
kind = "erdos_renyi"
n = 40
p = 0.12

[train]
outer_epochs = 4
pi_epochs_per_outer = 2

[train.model]
encoder_widths = [8, 8]
head_widths = [8, 8]

[train.pi]
hidden_widths = [8]

[eval]
repetitions = 3

[sweep]
scales = [0.0, 1.0]
"#;

fn netfx(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_netfx"))
        .current_dir(dir)
        .env_remove("NETFX_SEED")
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = netfx(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn setup(config: &str) -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.toml");
    std::fs::write(&path, config).unwrap();
    (dir, path)
}

fn read(path: impl AsRef<Path>) -> Vec<u8> {
    std::fs::read(path.as_ref()).unwrap_or_else(|e| panic!("{}: {e}", path.as_ref().display()))
}

#[test]
fn four_cycle_bundle_has_four_rows_and_a_stable_hash() {
    let (dir, _) = setup("[generator]\ndim = 2\n");
    let d = dir.path();
    let stdout = ok(d, &["generate", "-c", "run.toml", "-o", "a"]);
    assert!(stdout.contains("n=4"), "{stdout}");
    let data = String::from_utf8(read(d.join("a/data.tsv"))).unwrap();
    assert_eq!(data.lines().filter(|l| !l.starts_with('#')).count(), 4);
    ok(d, &["generate", "-c", "run.toml", "-o", "b"]);
    assert_eq!(bundle_hash(&d.join("a")).unwrap(), bundle_hash(&d.join("b")).unwrap());
    assert_eq!(read(d.join("a/config.toml")), read(d.join("run.toml")));
}

#[test]
fn isolated_node_is_rejected_by_id() {
    let (dir, _) = setup("[generator.graph]\nkind = \"edge_list\"\npath = \"g.tsv\"\n");
    std::fs::write(dir.path().join("g.tsv"), "0\t1\n3\t4\n").unwrap();
    let out = netfx(dir.path(), &["generate", "-c", "run.toml", "-o", "b"]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("node 2"), "{err}");
}

#[test]
fn bad_configs_exit_with_validation_code() {
    for text in ["epochs = 3", "[train]\nlr_outcome = -1.0", "[train]\nseed = 1"] {
        let (dir, _) = setup(text);
        let out = netfx(dir.path(), &["generate", "-c", "run.toml", "-o", "b"]);
        assert_eq!(out.status.code(), Some(1), "{text}");
    }
}

#[test]
fn seed_env_var_overrides_config() {
    let (dir, _) = setup(TOY);
    let d = dir.path();
    ok(d, &["generate", "-c", "run.toml", "-o", "a"]);
    let out = Command::new(env!("CARGO_BIN_EXE_netfx"))
        .current_dir(d)
        .env("NETFX_SEED", "6")
        .args(["generate", "-c", "run.toml", "-o", "b"])
        .output()
        .unwrap();
    assert!(out.status.success());
    assert_ne!(bundle_hash(&d.join("a")).unwrap(), bundle_hash(&d.join("b")).unwrap());
    let oracle = String::from_utf8(read(d.join("b/oracle.json"))).unwrap();
    assert!(oracle.contains("\"seed\": 6"), "{oracle}");
}

#[test]
fn train_is_reproducible_and_records_mode() {
    let (dir, _) = setup(TOY);
    let d = dir.path();
    ok(d, &["generate", "-c", "run.toml", "-o", "b"]);
    ok(d, &["train", "-c", "run.toml", "--bundle", "b", "-o", "t1"]);
    ok(d, &["train", "-c", "run.toml", "--bundle", "b", "-o", "t2"]);
    for f in ["checkpoint.bin", "history.jsonl", "weights.tsv"] {
        assert_eq!(read(d.join("t1").join(f)), read(d.join("t2").join(f)), "{f}");
    }

    let ablated = TOY.replace(
        "head_widths = [8, 8]\n",
        "head_widths = [8, 8]\nuse_attention = false\nuse_weights = false\n",
    );
    std::fs::write(d.join("ablated.toml"), ablated).unwrap();
    ok(d, &["train", "-c", "ablated.toml", "--bundle", "b", "-o", "t3"]);
    let history = String::from_utf8(read(d.join("t3/history.jsonl"))).unwrap();
    let records: Vec<EpochRecord> = history.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(records.len(), 4);
    assert!(records.iter().all(|r| r.mode == "w/o att & w" && r.pi_loss.is_none()));
}

#[test]
fn missing_bundle_file_is_named() {
    let (dir, _) = setup(TOY);
    let d = dir.path();
    ok(d, &["generate", "-c", "run.toml", "-o", "b"]);
    std::fs::remove_file(d.join("b/attention.tsv")).unwrap();
    let out = netfx(d, &["train", "-c", "run.toml", "--bundle", "b", "-o", "t"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("attention.tsv"));
}

#[test]
fn evaluate_checkpoint_oracle_and_protocol() {
    let (dir, _) = setup(TOY);
    let d = dir.path();
    ok(d, &["generate", "-c", "run.toml", "-o", "b"]);
    ok(d, &["train", "-c", "run.toml", "--bundle", "b", "-o", "t"]);

    ok(d, &["evaluate", "-c", "run.toml", "--bundle", "b", "--checkpoint", "t/checkpoint.bin", "-o", "e1"]);
    ok(d, &["evaluate", "-c", "run.toml", "--bundle", "b", "--checkpoint", "t/checkpoint.bin", "-o", "e2"]);
    for f in ["report.json", "effects.tsv", "exposure_scatter.csv"] {
        assert_eq!(read(d.join("e1").join(f)), read(d.join("e2").join(f)), "{f}");
    }
    let value: serde_json::Value = serde_json::from_slice(&read(d.join("e1/report.json"))).unwrap();
    for key in ["repetitions", "seeds", "runs", "within", "out_of_sample"] {
        assert!(value.get(key).is_some(), "{key}");
    }
    let names: Vec<&str> = value["within"]
        .as_array()
        .unwrap()
        .iter()
        .map(|m| m["name"].as_str().unwrap())
        .collect();
    assert_eq!(names, netfx::evalkit::METRIC_NAMES);

    ok(d, &["evaluate", "-c", "run.toml", "--bundle", "b", "--oracle", "-o", "o"]);
    let report: EffectReport = serde_json::from_slice(&read(d.join("o/report.json"))).unwrap();
    for m in [report.runs[0].within, report.runs[0].out_of_sample] {
        assert_eq!((m.sqrt_pehe_de, m.sqrt_pehe_se, m.sqrt_pehe_te), (0.0, 0.0, 0.0));
    }

    ok(d, &["evaluate", "-c", "run.toml", "--bundle", "b", "-o", "p1", "--jobs", "2"]);
    ok(d, &["evaluate", "-c", "run.toml", "--bundle", "b", "-o", "p2"]);
    assert_eq!(read(d.join("p1/report.json")), read(d.join("p2/report.json")));
    let report: EffectReport = serde_json::from_slice(&read(d.join("p1/report.json"))).unwrap();
    assert_eq!(report.repetitions, 3);

    std::fs::write(d.join("other.toml"), TOY.replace("outer_epochs = 4", "outer_epochs = 5")).unwrap();
    let out = netfx(d, &["evaluate", "-c", "other.toml", "--bundle", "b", "--checkpoint", "t/checkpoint.bin", "-o", "x"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("config hash"));
}

#[test]
fn gradcheck_passes_is_stable_and_reports_corruption() {
    let (dir, _) = setup(TOY);
    let d = dir.path();
    let stdout = ok(d, &["gradcheck", "-c", "run.toml", "-o", "g1"]);
    assert_eq!(stdout.matches("PASS").count(), 2, "{stdout}");
    ok(d, &["gradcheck", "-c", "run.toml", "-o", "g2"]);
    assert_eq!(read(d.join("g1/gradcheck.json")), read(d.join("g2/gradcheck.json")));

    let out = netfx(d, &["gradcheck", "-c", "run.toml", "-o", "g3", "--corrupt"]);
    assert_eq!(out.status.code(), Some(2));
    let report: serde_json::Value = serde_json::from_slice(&read(d.join("g3/gradcheck.json"))).unwrap();
    let block = report["dwr"]["block"].as_str().unwrap();
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains(block), "{err}");
    assert!((report["dwr"]["max_rel_err"].as_f64().unwrap() - 0.5).abs() < 1e-3);
}

#[test]
fn sweep_has_one_row_group_per_scale_and_is_deterministic() {
    let (dir, _) = setup(&TOY.replace("repetitions = 3", "repetitions = 1"));
    let d = dir.path();
    ok(d, &["sweep", "-c", "run.toml", "-o", "s1"]);
    ok(d, &["sweep", "-c", "run.toml", "-o", "s2", "--jobs", "2"]);
    let csv = String::from_utf8(read(d.join("s1/sweep.csv"))).unwrap();
    assert_eq!(read(d.join("s1/sweep.csv")), read(d.join("s2/sweep.csv")));
    let scales: std::collections::BTreeSet<&str> =
        csv.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(scales.len(), 2);
    assert_eq!(csv.lines().next(), Some("scale,split,metric,mean,std"));
}

#[test]
fn divergence_exits_with_numerical_code() {
    let (dir, _) = setup(&TOY.replace("outer_epochs = 4", "outer_epochs = 20\nlr_outcome = 1e150"));
    let d = dir.path();
    ok(d, &["generate", "-c", "run.toml", "-o", "b"]);
    let out = netfx(d, &["train", "-c", "run.toml", "--bundle", "b", "-o", "t"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("diverged at epoch"));
}

#[test]
fn shipped_configs_load() {
    let configs = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let dir = tempfile::tempdir().unwrap();
    for name in ["toy.toml", "benchmark.toml"] {
        let path = configs.join(name);
        let out = ok(dir.path(), &["generate", "-c", path.to_str().unwrap(), "-o", name]);
        assert!(out.starts_with("bundle"), "{out}");
    }
}
