use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
seed = 2
log_interval = 5

[dataset.env]
name = "linear_reversible"
behavior = "scripted-suboptimal"
transitions = 200
seed = 1

[eval]
episodes = 1
seeds = [0]
interval = 10

[tdm]
encoder_hidden = [8]
dynamics_hidden_width = 8
dynamics_layers = 2
training_epochs = 2
pretrain_epochs = 1
batch_size = 64

[tsrl]
hidden_width = 8
iterations = 10
batch_size = 32
"#;

fn tsrl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tsrl"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn full_workflow_through_the_binary() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let config = d.join("run.toml");
    std::fs::write(&config, TINY).unwrap();
    let tdm_out = d.join("tdm");
    let tdm_set = format!("output_dir=\"{}\"", s(&tdm_out));
    let out = tsrl(&["train-tdm", "--config", s(&config), "--set", &tdm_set]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let tdm = tdm_out.join("tdm.json");
    assert!(tdm.exists());

    // A second run into the same directory needs --overwrite.
    assert_eq!(code(&tsrl(&["train-tdm", "--config", s(&config), "--set", &tdm_set])), 1);
    assert_eq!(code(&tsrl(&["train-tdm", "--config", s(&config), "--set", &tdm_set, "--overwrite"])), 0);

    let agent_out = d.join("agent");
    let agent_set = format!("output_dir=\"{}\"", s(&agent_out));
    let out = tsrl(&["train-tsrl", "--config", s(&config), "--tdm", s(&tdm), "--set", &agent_set]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("normalized score"));

    let bad_latent = tsrl(&[
        "train-tsrl", "--config", s(&config), "--tdm", s(&tdm), "--set", "tdm.latent_action_dim=5",
        "--set", &format!("output_dir=\"{}\"", s(&d.join("x"))),
    ]);
    assert_eq!(code(&bad_latent), 1);

    let scores = d.join("scores");
    let out = tsrl(&["score", "--tdm", s(&tdm), "--config", s(&config), "--out", s(&scores)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(scores.join("scores.csv")).unwrap();
    assert_eq!(csv.lines().count(), 201);
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(scores.join("summary.json")).unwrap()).unwrap();
    assert!(summary["quantiles"]["0.5"].is_number() && summary["quantiles"]["0.7"].is_number());

    let preview = tsrl(&["augment-preview", "--tdm", s(&tdm), "--config", s(&config), "--limit", "20"]);
    assert_eq!(code(&preview), 0);
    let p: serde_json::Value = serde_json::from_slice(&preview.stdout).unwrap();
    assert_eq!(p["violations"], 0);

    let eval = tsrl(&["evaluate", "--checkpoint", s(&agent_out.join("tsrl.json")), "--episodes", "2", "--seeds", "3"]);
    assert_eq!(code(&eval), 0, "{}", String::from_utf8_lossy(&eval.stderr));
    let r: serde_json::Value = serde_json::from_slice(&eval.stdout).unwrap();
    assert_eq!(r["episodes"], 2);

    let svg = d.join("curve.svg");
    let metrics = agent_out.join("metrics.jsonl");
    let plot = tsrl(&["plot", s(&metrics), s(&metrics), "--out", s(&svg)]);
    assert_eq!(code(&plot), 0, "{}", String::from_utf8_lossy(&plot.stderr));
    assert!(svg.exists());
}

#[test]
fn dataset_tools_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let data = d.join("data");
    let out = tsrl(&["collect", "--env", "pointmass_friction", "--friction", "0.1", "--transitions", "450", "--out", s(&data)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let sub = d.join("sub");
    let out = tsrl(&["subsample", "--dataset", s(&data), "--transitions", "150", "--seed", "3", "--out", s(&sub)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let kept: usize = String::from_utf8_lossy(&out.stdout).split_whitespace().next().unwrap().parse().unwrap();
    assert!((150..450).contains(&kept));
    let filtered = d.join("filtered");
    let out = tsrl(&["filter", "--dataset", s(&data), "--feature", "1", "--fraction", "0.5", "--out", s(&filtered)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    // Existing outputs are not clobbered.
    assert_eq!(code(&tsrl(&["filter", "--dataset", s(&data), "--feature", "1", "--fraction", "0.5", "--out", s(&filtered)])), 1);
    assert_eq!(code(&tsrl(&["subsample", "--dataset", s(&data), "--transitions", "0", "--out", s(&d.join("z"))])), 1);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(code(&tsrl(&["train-tdm", "--config", s(&d.join("missing.toml"))])), 1);
    assert_eq!(code(&tsrl(&["no-such-command"])), 1);
    assert_eq!(code(&tsrl(&["--help"])), 0);
    let config = d.join("run.toml");
    std::fs::write(&config, TINY).unwrap();
    let out_dir = format!("output_dir=\"{}\"", s(&d.join("f32")));
    assert_eq!(code(&tsrl(&["train-tdm", "--config", s(&config), "--set", "precision=\"f32\"", "--set", &out_dir])), 1);
    let nan_dir = format!("output_dir=\"{}\"", s(&d.join("nan")));
    let nan = tsrl(&[
        "train-tdm", "--config", s(&config), "--set", &nan_dir, "--set", "tdm.learning_rate=1e200",
        "--set", "tdm.training_epochs=20",
    ]);
    assert_eq!(code(&nan), 2, "{}", String::from_utf8_lossy(&nan.stderr));
    assert_eq!(code(&tsrl(&["plot", "--out", s(&d.join("p.svg"))])), 1);
    let broken = d.join("broken.jsonl");
    std::fs::write(&broken, "{\"step\": 1}\nnot json\n").unwrap();
    let out = tsrl(&["plot", s(&broken), "--out", s(&d.join("q.svg"))]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains(":1:") || String::from_utf8_lossy(&out.stderr).contains(":2:"));
}
