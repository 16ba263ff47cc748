use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

const TINY: &str = r#"
[encoder]
layers = 2
heads = 2
model_dim = 8
mlp_dim = 16
prompt_len_text = 2
prompt_len_vision = 2
prompt_depth = 2
dropout_layers = 1
shared_dim = 4
bridge_count = 3
embed_dim = 4
temperature = 0.5
vocab_size = 8
max_text_len = 8
grid = 2
patch_dim = 4

[data]
num_classes = 4
base_classes = 2
attributes = 4
attrs_per_class = 3
shots = 8
test_per_class = 4
noise_std = 0.3
distractor_fraction = 0.5
grid = 2
patch_dim = 4

[train]
steps = 4
batch_size = 4

[ablation]
seeds = [0, 1, 2]

[analysis]
retention_plans = 50
"#;

fn promptdrop(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_promptdrop"))
        .args(args)
        .arg("--out")
        .arg(out)
        .env_remove("PROMPTDROP_SEED")
        .env_remove("PROMPTDROP_OUT")
        .output()
        .unwrap()
}

fn write_config(dir: &Path, body: &str) -> PathBuf {
    let path = dir.join("config.toml");
    std::fs::write(&path, body).unwrap();
    path
}

fn stdout_path(o: &Output) -> PathBuf {
    assert!(o.status.success(), "stderr: {}", String::from_utf8_lossy(&o.stderr));
    PathBuf::from(String::from_utf8(o.stdout.clone()).unwrap().lines().last().unwrap())
}

fn error_of(o: &Output) -> Value {
    assert!(!o.status.success());
    let stderr = String::from_utf8_lossy(&o.stderr);
    serde_json::from_str(stderr.lines().last().unwrap()).unwrap_or_else(|e| panic!("{e}: {stderr}"))
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn missing_seed_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let err = error_of(&promptdrop(&["train", "--config", cfg.to_str().unwrap()], dir.path()));
    assert_eq!(err["error"]["kind"], "config");
    assert_eq!(err["error"]["key"], "seed");
}

#[test]
fn bad_values_name_key_and_line() {
    let dir = tempfile::tempdir().unwrap();
    let body = format!("seed = 1\n{TINY}\n[dropout]\np_min = 0.6\np_max = 0.2\n");
    let cfg = write_config(dir.path(), &body);
    let err = error_of(&promptdrop(&["train", "--config", cfg.to_str().unwrap()], dir.path()));
    assert_eq!(err["error"]["kind"], "config");
    assert_eq!(err["error"]["key"], "dropout.p_min");
    let line = body.lines().position(|l| l.starts_with("p_min")).unwrap() + 1;
    assert_eq!(err["error"]["line"], line);

    let cfg = write_config(dir.path(), &format!("seed = 1\n{TINY}\n[dropout]\nsparkle = 3\n"));
    let err = error_of(&promptdrop(&["train", "--config", cfg.to_str().unwrap()], dir.path()));
    assert_eq!(err["error"]["kind"], "config");
    assert!(err["error"]["message"].as_str().unwrap().contains("sparkle"), "{err}");
}

#[test]
fn train_then_eval_reports_identical_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let cfg = cfg.to_str().unwrap();
    let metrics = stdout_path(&promptdrop(&["train", "--config", cfg, "--seed", "3"], dir.path()));
    let trained = read_json(&metrics);
    assert_eq!(trained["meta"]["seed"], 3);
    let ckpt = std::fs::read_dir(dir.path())
        .unwrap()
        .map(|e| e.unwrap().path())
        .find(|p| p.extension().is_some_and(|x| x == "pdck"))
        .unwrap();
    let eval = stdout_path(&promptdrop(&["eval", "--config", cfg, "--seed", "3", "--checkpoint", ckpt.to_str().unwrap()], dir.path()));
    assert_eq!(read_json(&eval)["metrics"], trained["metrics"]);

    let log = std::fs::read_dir(dir.path())
        .unwrap()
        .map(|e| e.unwrap().path())
        .find(|p| p.file_name().unwrap().to_string_lossy().starts_with("train-log-"))
        .unwrap();
    let log = std::fs::read_to_string(log).unwrap();
    assert!(log.starts_with("# command=train config_hash="));
    assert_eq!(log.lines().count(), 2 + 4);
}

#[test]
fn runs_are_reproducible() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let cfg = write_config(a.path(), &format!("seed = 5\n{TINY}"));
    let cfg = cfg.to_str().unwrap();
    let ma = stdout_path(&promptdrop(&["train", "--config", cfg], a.path()));
    let mb = stdout_path(&promptdrop(&["train", "--config", cfg], b.path()));
    assert_eq!(std::fs::read(&ma).unwrap(), std::fs::read(&mb).unwrap());
}

#[test]
fn gen_data_writes_a_loadable_snapshot() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &format!("seed = 2\n{TINY}"));
    let snap = stdout_path(&promptdrop(&["gen-data", "--config", cfg.to_str().unwrap()], dir.path()));
    let manifest = read_json(&snap.join("manifest.json"));
    assert_eq!(manifest["meta"]["seed"], 2);
    let data = promptdrop_core::data::SyntheticDataset::load(&snap).unwrap();
    assert_eq!(data.seed, 2);
    assert_eq!(data.train.len(), 2 * 8);
}

#[test]
fn analyze_writes_heatmap_and_summary() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &format!("seed = 4\n{TINY}"));
    let out = stdout_path(&promptdrop(&["analyze", "--config", cfg.to_str().unwrap()], dir.path()));
    let doc = read_json(&out);
    let survey = &doc["retention_survey"];
    assert_eq!(survey["plans"], 50);
    assert_eq!(survey["holding"], 50);
    let heatmap = dir.path().join(doc["heatmap"].as_str().unwrap());
    let csv = std::fs::read_to_string(heatmap).unwrap();
    assert!(csv.lines().nth(1).unwrap().starts_with("layer,token_index,role"));
    assert!(doc["residual_uniformity"]["k"] == 2);
}

#[test]
fn ablate_writes_every_arm() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &format!("seed = 0\n{TINY}"));
    let o = promptdrop(&["ablate", "--config", cfg.to_str().unwrap()], dir.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let summary = String::from_utf8(o.stdout).unwrap();
    for arm in ["baseline", "vanilla", "iwtd", "iwtd_re"] {
        assert!(summary.lines().any(|l| l.starts_with(arm)), "{summary}");
    }
    let sub = std::fs::read_dir(dir.path())
        .unwrap()
        .map(|e| e.unwrap().path())
        .find(|p| p.file_name().unwrap().to_string_lossy().starts_with("ablation-"))
        .unwrap();
    assert_eq!(std::fs::read_dir(&sub).unwrap().count(), 12 + 2);
}

#[test]
fn selftest_passes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &format!("seed = 0\n{TINY}"));
    let o = promptdrop(&["selftest", "--config", cfg.to_str().unwrap()], dir.path());
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(o.status.success(), "{stdout}");
    assert!(stdout.lines().all(|l| l.starts_with("PASS")), "{stdout}");
    assert!(dir.path().join("selftest.json").exists());
}
