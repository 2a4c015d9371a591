use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const QUICK: &str = r#"
[model]
n_layers = 1
d_model = 16
n_heads = 2
d_ff = 32

[pretrain]
max_steps = 20
gate_interval = 10
f1_gate = 0.0
control_gate = 0.0

[edit]
steps = 3
"#;

fn factlab(root: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_factlab"))
        .args(args)
        .env("FACTLAB_RUN_ROOT", root)
        .output()
        .expect("binary runs")
}

fn ok(root: &Path, args: &[&str]) -> String {
    let out = factlab(root, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn quick_root(tmp: &Path) -> std::path::PathBuf {
    let cfg = tmp.join("quick.toml");
    fs::write(&cfg, QUICK).unwrap();
    let root = tmp.join("run");
    ok(&root, &["genworld", "--config", cfg.to_str().unwrap()]);
    root
}

#[test]
fn genworld_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let out_a = ok(&a, &["genworld", "--seed", "7"]);
    let out_b = ok(&b, &["genworld", "--seed", "7"]);
    assert_eq!(out_a, out_b);
    for file in ["world.json", "facts.jsonl", "dataset.jsonl", "heldout.jsonl"] {
        assert_eq!(
            fs::read(a.join("world").join(file)).unwrap(),
            fs::read(b.join("world").join(file)).unwrap(),
            "{file}"
        );
    }
    let c = tmp.path().join("c");
    ok(&c, &["genworld", "--seed", "8"]);
    assert_ne!(
        fs::read(a.join("world/world.json")).unwrap(),
        fs::read(c.join("world/world.json")).unwrap()
    );
}

#[test]
fn edit_then_eval_writes_the_six_metric_keys() {
    let tmp = tempfile::tempdir().unwrap();
    let root = quick_root(tmp.path());
    ok(&root, &["pretrain"]);
    ok(&root, &["localize"]);
    ok(&root, &["edit", "--strategy", "unlearn-then-learn"]);
    ok(&root, &["eval", "--strategy", "unlearn-then-learn"]);
    let text = fs::read_to_string(root.join("eval/unlearn-then-learn/metrics.json")).unwrap();
    let metrics: serde_json::Map<String, serde_json::Value> = serde_json::from_str(&text).unwrap();
    let mut keys: Vec<&str> = metrics.keys().map(String::as_str).collect();
    keys.sort();
    assert_eq!(
        keys,
        [
            "f1_forget_rate",
            "f2_accuracy",
            "fcontrol_accuracy",
            "heldout_perplexity",
            "latent_f1_prob_mean",
            "latent_f1_rank_mean"
        ]
    );
    assert!(root.join("eval/unlearn-then-learn/records.csv").exists());
}

#[test]
fn report_lists_strategies_in_table_order() {
    let tmp = tempfile::tempdir().unwrap();
    let root = quick_root(tmp.path());
    ok(&root, &["pretrain"]);
    ok(&root, &["localize"]);
    for s in ["unlearn-then-learn", "direct-ia3", "direct-lora"] {
        ok(&root, &["edit", "--strategy", s]);
        ok(&root, &["eval", "--strategy", s]);
    }
    let table = ok(&root, &["report"]);
    let names: Vec<&str> = table.lines().skip(1).map(|l| l.split_whitespace().next().unwrap()).collect();
    assert_eq!(names, ["direct-lora", "direct-ia3", "unlearn-then-learn"]);
    let header = table.lines().next().unwrap();
    for col in ["f2_accuracy", "f1_forget_rate", "fcontrol_accuracy"] {
        assert!(header.contains(col));
    }
    let csv = fs::read_to_string(root.join("report/comparison.csv")).unwrap();
    let first: Vec<&str> = csv.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(first, names);
}

#[test]
fn missing_prerequisite_fails_with_the_command_to_run() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path().join("empty");
    let out = factlab(&root, &["pretrain"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("factlab genworld"));
    let out = factlab(&root, &["edit", "--strategy", "direct-lora"]);
    assert!(!out.status.success());
    let out = factlab(&root, &["edit", "--strategy", "bogus"]);
    assert!(!out.status.success());
}

#[test]
fn flags_override_the_config_file_and_are_saved() {
    let tmp = tempfile::tempdir().unwrap();
    let root = quick_root(tmp.path());
    ok(&root, &["genworld", "--edit-lr", "0.01", "--precision", "f64"]);
    let saved: toml::Value = toml::from_str(&fs::read_to_string(root.join("config.toml")).unwrap()).unwrap();
    assert_eq!(saved["edit"]["lr"].as_float(), Some(0.01));
    assert_eq!(saved["edit"]["steps"].as_integer(), Some(3));
    assert_eq!(saved["precision"].as_str(), Some("f64"));
    assert_eq!(saved["model"]["d_model"].as_integer(), Some(16));
}
