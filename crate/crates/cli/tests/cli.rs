use std::path::Path;
use std::process::{Command, Output};

fn offsim(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_offsim"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = offsim(args);
    assert!(
        out.status.success(),
        "{args:?} failed:\n{}\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const MINI: &str = r#"
env = "pointmass"
seeds = [0]
eval_episodes = 2
output_dir = "out"
bc_baseline = true

[data]
expert = "expert.txt"
diverse = "diverse.txt"

[sim]
iterations = 200
batch_size = 32

[sim.arch]
members = 2
transition_layers = 3
transition_hidden = 16
reward_layers = 3
reward_hidden = 16

[policy]
episodes = 50
batch_size = 32
eval_every = 25
eval_episodes = 2

[policy.arch]
hidden = 16
layers = 3

[bc]
epochs = 2
"#;

#[test]
fn gen_data_writes_requested_count() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("d.txt");
    ok(&[
        "gen-data",
        "--env",
        "pointmass",
        "--tier",
        "random",
        "--n",
        "1000",
        "--seed",
        "1",
        "--out",
        p(&out),
    ]);
    let text = std::fs::read_to_string(&out).unwrap();
    let header: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
    assert_eq!(header["count"], 1000);
    assert_eq!(text.lines().count(), 1001);
}

#[test]
fn unknown_subcommand_and_flag_fail_with_usage() {
    let out = offsim(&["frobnicate"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
    let out = offsim(&["gen-data", "--env", "pointmass", "--bogus"]);
    assert!(!out.status.success());
}

#[test]
fn invalid_config_reports_line() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(
        &cfg,
        "env = \"pointmass\"\nseeds = [0]\n[policy]\ngamma = 2.0\n",
    )
    .unwrap();
    let out = offsim(&["run", "--config", p(&cfg)]);
    assert!(!out.status.success());
    assert!(
        String::from_utf8_lossy(&out.stderr).contains("line 4"),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn miniature_run_and_stagewise_commands() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let expert = d.join("expert.txt");
    let diverse = d.join("diverse.txt");
    ok(&[
        "gen-data",
        "--env",
        "pointmass",
        "--tier",
        "random",
        "--n",
        "600",
        "--seed",
        "1",
        "--out",
        p(&expert),
    ]);
    ok(&[
        "gen-data",
        "--env",
        "pointmass",
        "--tier",
        "random",
        "--n",
        "400",
        "--seed",
        "2",
        "--out",
        p(&diverse),
    ]);
    let cfg = d.join("mini.toml");
    std::fs::write(&cfg, MINI).unwrap();

    ok(&["run", "--config", p(&cfg)]);
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("out/report.json")).unwrap()).unwrap();
    assert_eq!(report["format_version"], 1);
    assert_eq!(report["seeds"][0]["error"], serde_json::Value::Null);
    assert_eq!(report["seeds"][0]["penalty_invoked"], true);
    assert!(d.join("out/report.csv").exists());
    assert!(d.join("out/report.timing.json").exists());

    let sim = d.join("sim");
    ok(&[
        "train-sim",
        "--config",
        p(&cfg),
        "--expert",
        p(&expert),
        "--out",
        p(&sim),
    ]);
    let sel = ok(&[
        "select-margin",
        "--reward",
        p(&sim.join("reward.ckpt")),
        "--expert",
        p(&expert),
        "--diverse",
        p(&diverse),
    ]);
    let sel: serde_json::Value = serde_json::from_str(&sel).unwrap();
    assert_eq!(sel["coefficient"], 1.6);

    let pol = d.join("pol");
    ok(&[
        "train-policy",
        "--config",
        p(&cfg),
        "--transition",
        p(&sim.join("transition.ckpt")),
        "--reward",
        p(&sim.join("reward.ckpt")),
        "--expert",
        p(&expert),
        "--algo",
        "ddpg",
        "--out",
        p(&pol),
    ]);
    let ev = ok(&[
        "evaluate",
        "--policy",
        p(&pol.join("policy.ckpt")),
        "--env",
        "pointmass",
        "--episodes",
        "2",
        "--seeds",
        "0,1",
    ]);
    let ev: serde_json::Value = serde_json::from_str(&ev).unwrap();
    assert_eq!(ev["per_seed"].as_array().unwrap().len(), 2);

    let bc = d.join("bc.ckpt");
    ok(&[
        "train-bc",
        "--data",
        p(&expert),
        "--out",
        p(&bc),
        "--epochs",
        "1",
    ]);
    let out = offsim(&[
        "evaluate",
        "--policy",
        p(&bc),
        "--env",
        "pendulum",
        "--episodes",
        "1",
    ]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("dimension"));
}
