use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn ckg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ckg"))
        .args(args)
        .env_remove("CKG_LLM_URL")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = ckg(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Toy dataset plus a short-training config; returns (dir, config path).
fn toy(extra: &str) -> (TempDir, PathBuf) {
    let dir = TempDir::new().unwrap();
    let cfg = PathBuf::from(
        ok(&[
            "synth",
            "--out",
            s(dir.path()),
            "--kind",
            "toy",
            "--seed",
            "3",
        ])
        .trim(),
    );
    let mut text = fs::read_to_string(&cfg).unwrap();
    text = text.replace("epochs = 5", "epochs = 2");
    text.push_str(extra);
    fs::write(&cfg, text).unwrap();
    (dir, cfg)
}

#[test]
fn ingest_reports_fixture_counts() {
    let (dir, cfg) = toy("");
    let out = dir.path().join("out");
    let table = ok(&["ingest", "-c", s(&cfg), "-o", s(&out)]);
    assert!(table.contains("users         20"));
    assert!(table.contains("items         30"));
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["ia_triplets"], 66);
    assert_eq!(summary["config_hash"].as_str().unwrap().len(), 16);
}

#[test]
fn missing_file_is_a_data_error_naming_the_path() {
    let (dir, cfg) = toy("");
    fs::remove_file(dir.path().join("ia.tsv")).unwrap();
    let out = ckg(&["ingest", "-c", s(&cfg), "-o", s(&dir.path().join("o"))]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("ia.tsv"));
}

#[test]
fn config_errors_exit_with_two() {
    let (dir, cfg) = toy("bogus_key = 1\n");
    let out = ckg(&["ingest", "-c", s(&cfg), "-o", s(&dir.path().join("o"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("bogus_key"));

    let (dir, cfg) = toy("");
    let text = fs::read_to_string(&cfg)
        .unwrap()
        .replace("tau = 0.2", "tau = -1.0");
    fs::write(&cfg, text).unwrap();
    let out = ckg(&[
        "train",
        "--no-llm",
        "-c",
        s(&cfg),
        "-o",
        s(&dir.path().join("o")),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn http_backend_without_endpoint_exits_with_four() {
    let (dir, cfg) = toy("");
    let out = ckg(&[
        "augment",
        "--backend",
        "http",
        "-c",
        s(&cfg),
        "-o",
        s(&dir.path().join("o")),
    ]);
    assert_eq!(out.status.code(), Some(4));
}

#[test]
fn train_without_pools_requires_no_llm() {
    let (dir, cfg) = toy("");
    let out = ckg(&["train", "-c", s(&cfg), "-o", s(&dir.path().join("o"))]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn no_llm_training_then_eval() {
    let (dir, cfg) = toy("");
    let out = dir.path().join("run");
    let report: serde_json::Value =
        serde_json::from_str(&ok(&["train", "--no-llm", "-c", s(&cfg), "-o", s(&out)])).unwrap();
    assert_eq!(report["epochs_run"], 2);
    assert!(out.join("checkpoint.json").exists());
    let metrics = fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert!(metrics.starts_with("epoch,bpr,con,joint,val_recall@10,val_ndcg@10,config_hash\n"));
    assert_eq!(metrics.lines().count(), 3);

    let eval: serde_json::Value =
        serde_json::from_str(&ok(&["eval", "-c", s(&cfg), "-o", s(&out)])).unwrap();
    let recall = eval["recall@10"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&recall));
    assert_eq!(eval["config_hash"], report["config_hash"]);
    assert!(out.join("eval_test.json").exists());
}

#[test]
fn training_is_idempotent() {
    let (dir, cfg) = toy("");
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&["train", "--no-llm", "-c", s(&cfg), "-o", s(&a)]);
    ok(&["train", "--no-llm", "-c", s(&cfg), "-o", s(&b)]);
    for f in ["checkpoint.json", "metrics.csv", "train_report.json"] {
        assert_eq!(
            fs::read(a.join(f)).unwrap(),
            fs::read(b.join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn stub_augmentation_is_deterministic_and_replayable() {
    let (dir, cfg) = toy("record_transcript = \"transcript.jsonl\"\n");
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let report: serde_json::Value =
        serde_json::from_str(&ok(&["augment", "-c", s(&cfg), "-o", s(&a)])).unwrap();
    assert!(report["pool_sizes"]["add_user"].as_u64().unwrap() > 0);
    ok(&["augment", "-c", s(&cfg), "-o", s(&b)]);
    let pools = fs::read(a.join("pools.jsonl")).unwrap();
    assert_eq!(pools, fs::read(b.join("pools.jsonl")).unwrap());

    let transcript = dir.path().join("transcript.jsonl");
    let text = fs::read_to_string(&cfg)
        .unwrap()
        .replace("record_transcript = \"transcript.jsonl\"\n", "")
        .replace(
            "backend = \"stub\"",
            &format!("backend = \"replay\"\ntranscript = \"{}\"", s(&transcript)),
        );
    let replay_cfg = dir.path().join("replay.toml");
    fs::write(&replay_cfg, text).unwrap();
    let c = dir.path().join("c");
    ok(&["augment", "-c", s(&replay_cfg), "-o", s(&c)]);
    assert_eq!(pools, fs::read(c.join("pools.jsonl")).unwrap());

    ok(&["train", "-c", s(&cfg), "-o", s(&a), "--dump-views"]);
    assert!(a.join("views/epoch_000/view_user.tsv").exists());
}

#[test]
fn explain_emits_paths_and_selection() {
    let (dir, cfg) = toy("");
    let out = dir.path().join("run");
    ok(&["augment", "-c", s(&cfg), "-o", s(&out)]);
    ok(&["train", "-c", s(&cfg), "-o", s(&out)]);
    let pairs = fs::read_to_string(dir.path().join("interactions.tsv")).unwrap();
    let mut explained = 0;
    for line in pairs.lines().take(12) {
        let (u, i) = line.split_once('\t').unwrap();
        let v: serde_json::Value = serde_json::from_str(&ok(&[
            "explain",
            "-c",
            s(&cfg),
            "-o",
            s(&out),
            "--user",
            u,
            "--item",
            i,
            "--mu",
            "-1e9",
            "--backend",
            "stub",
        ]))
        .unwrap();
        if v["explainable"] == true {
            explained += 1;
            let n = v["paths"].as_array().unwrap().len();
            assert!(v["selected"].as_u64().unwrap() < n as u64);
            assert_eq!(v["confidences"].as_array().unwrap().len(), n);
            assert!(!v["explanation"].as_str().unwrap().is_empty());
            assert!(out.join(format!("explanation_{u}_{i}.json")).exists());
        }
    }
    assert!(explained > 0);

    let bad = ckg(&[
        "explain",
        "-c",
        s(&cfg),
        "-o",
        s(&out),
        "--user",
        "nobody",
        "--item",
        "i0",
    ]);
    assert_eq!(bad.status.code(), Some(3));
}

#[test]
fn sweep_writes_one_row_per_grid_value() {
    let (dir, cfg) = toy("");
    let out = dir.path().join("run");
    let csv = ok(&[
        "sweep",
        "--no-llm",
        "-c",
        s(&cfg),
        "-o",
        s(&out),
        "--param",
        "mu-add",
        "--grid",
        "0,0.5,1.0",
    ]);
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "param,value,recall@10,ndcg@10,seed,config_hash");
    assert_eq!(lines.len(), 4);
    assert!(lines[2].starts_with("mu_add,0.5,"));
    assert_eq!(
        csv,
        fs::read_to_string(out.join("sweep_mu_add.csv")).unwrap()
    );
}
