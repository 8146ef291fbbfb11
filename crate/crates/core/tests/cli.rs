use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
grid = [8, 8]
t_len = 14
tau = 2
beta1 = [1.0]
seeds = [3]
n_test = 3
history_len = 5
n_rollouts = 0
n_boot = 5
timing = false

[net]
hidden_convlstm = 2
channel_ladder = [2, 3]
d_h = 2
ghead_hidden = 2
context_len = 3

[train]
max_epochs = 2

[curriculum]
e_c = 1
"#;

fn stgcomp(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_stgcomp")).args(args).current_dir(cwd).output().unwrap()
}

fn ok(out: Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn error_kind(out: &Output) -> String {
    assert!(!out.status.success());
    let line = String::from_utf8_lossy(&out.stderr);
    let v: serde_json::Value = serde_json::from_str(line.lines().last().unwrap()).unwrap();
    v["error"]["kind"].as_str().unwrap().to_string()
}

#[test]
fn pipeline_from_simulation_to_report() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("tiny.toml"), TINY).unwrap();
    let cfg = ["--config", "tiny.toml"];

    ok(stgcomp(&[&["simulate", "--out", "data"], &cfg[..]].concat(), d));
    ok(stgcomp(&[&["oracle", "--out", "tests"], &cfg[..]].concat(), d));
    for model in ["gst_unet", "unet_plus", "ipw"] {
        let ckpt = format!("ckpt_{model}");
        ok(stgcomp(&[&["train", "--data", "data", "--test-set", "tests", "--model", model, "--out", &ckpt], &cfg[..]].concat(), d));
        let pred = format!("pred_{model}");
        let text = ok(stgcomp(
            &[&["predict", "--checkpoint", &ckpt, "--test-set", "tests", "--data", "data", "--out", &pred], &cfg[..]].concat(),
            d,
        ));
        let v: serde_json::Value = serde_json::from_str(text.trim()).unwrap();
        assert!(v["rmse"].as_f64().unwrap() >= 0.0);
    }

    ok(stgcomp(&[&["bench", "--out", "b1", "--no-timing"], &cfg[..]].concat(), d));
    ok(stgcomp(&[&["bench", "--out", "b2", "--no-timing"], &cfg[..]].concat(), d));
    let csv1 = std::fs::read(d.join("b1/report.csv")).unwrap();
    assert_eq!(csv1, std::fs::read(d.join("b2/report.csv")).unwrap());
    let text = String::from_utf8(csv1.clone()).unwrap();
    assert_eq!(text.lines().next().unwrap(), "model,beta1,tau,seed,rmse,sd,ci_lo,ci_hi,runtime_s");
    assert_eq!(text.lines().count(), 3);
    assert!(text.lines().skip(1).all(|l| l.ends_with(",0")));

    let json = ok(stgcomp(&["report", "--input", "b1/results.json", "--format", "json"], d));
    assert!(json.contains("\"unet_plus\""));
    ok(stgcomp(&["report", "--input", "b1/results.json", "--format", "csv", "--out", "again.csv"], d));
    assert_eq!(std::fs::read(d.join("again.csv")).unwrap(), csv1);
}

#[test]
fn failures_exit_nonzero_with_an_error_line() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("tiny.toml"), TINY).unwrap();
    ok(stgcomp(&["simulate", "--config", "tiny.toml", "--out", "data"], d));
    let manifest = d.join("data/manifest.json");
    let text = std::fs::read_to_string(&manifest).unwrap();
    let bin = d.join("data/0002.bin");
    let bytes = std::fs::read(&bin).unwrap();
    std::fs::write(&bin, &bytes[..bytes.len() / 2]).unwrap();
    let out = stgcomp(&["train", "--config", "tiny.toml", "--data", "data", "--out", "ck"], d);
    assert_eq!(error_kind(&out), "corrupt-dataset");

    std::fs::write(&bin, &bytes).unwrap();
    std::fs::write(&manifest, text.replace("\"schema_version\": 1", "\"schema_version\": 9")).unwrap();
    let out = stgcomp(&["train", "--config", "tiny.toml", "--data", "data", "--out", "ck"], d);
    assert_eq!(error_kind(&out), "unsupported-version");

    assert_eq!(error_kind(&stgcomp(&["simulate", "--beta1", "0,1", "--out", "x"], d)), "invalid-argument");
    assert_eq!(error_kind(&stgcomp(&["bench", "--config", "missing.toml"], d)), "io");
    std::fs::write(d.join("bad.toml"), "bogus = 1").unwrap();
    assert_eq!(error_kind(&stgcomp(&["bench", "--config", "bad.toml"], d)), "config");
    assert_eq!(error_kind(&stgcomp(&["frobnicate"], d)), "usage");
    std::fs::write(d.join("empty.json"), "{\"rows\": []}").unwrap();
    assert!(!stgcomp(&["report", "--input", "empty.json"], d).status.success());
}
