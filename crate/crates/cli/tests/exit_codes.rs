use std::path::Path;
use std::process::{Command, Output};

use stylealign::experiment::RunConfig;

fn tiny_toml(out: &Path, extra: impl FnOnce(&mut RunConfig)) -> String {
    let mut c = RunConfig {
        out_dir: out.to_path_buf(),
        ..Default::default()
    };
    c.model.d_model = 16;
    c.model.n_heads = 2;
    c.model.d_ff = 32;
    c.model.n_layers = 2;
    c.adapt.top_layers = 2;
    c.data.n_pretrain = 60;
    c.data.n_style = 40;
    c.data.n_preferences = 40;
    c.pretrain.epochs = 1;
    c.sft.epochs = 1;
    c.reward.epochs = 1;
    c.ppo.iterations = 1;
    c.ppo.rollout_prompts = 8;
    c.ppo.minibatch_size = 8;
    c.ppo.max_new_tokens = 12;
    c.eval.max_new_tokens = 12;
    extra(&mut c);
    c.to_toml()
}

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_stylealign")).args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

#[test]
fn synth_then_pipeline_succeeds() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("run.toml");
    std::fs::write(&cfg, tiny_toml(&tmp.path().join("run"), |_| {})).unwrap();
    let c = cfg.to_str().unwrap();
    let o = run(&["--config", c, "synth"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stdout).contains("vocab.json"));
    let o = run(&["--config", c, "pipeline"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stdout).contains("SAC"));
    let m = tmp.path().join("run/manifest.json");
    let again = tmp.path().join("again");
    let o = run(&["pipeline", "--manifest", m.to_str().unwrap(), "--out", again.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(
        std::fs::read(tmp.path().join("run/report.json")).unwrap(),
        std::fs::read(again.join("report.json")).unwrap()
    );
}

#[test]
fn config_errors_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.toml");
    std::fs::write(&bad, "seed = 1\nnot_a_key = true\n").unwrap();
    assert_eq!(code(&run(&["--config", bad.to_str().unwrap(), "synth"])), 2);
    let missing = tmp.path().join("nope.toml");
    assert_eq!(code(&run(&["--config", missing.to_str().unwrap(), "synth"])), 2);
    let out = tmp.path().join("x");
    assert_eq!(code(&run(&["--out", out.to_str().unwrap(), "ablate", "--condition", "middle-2"])), 2);
}

#[test]
fn missing_data_exits_3() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run(&["--out", tmp.path().to_str().unwrap(), "pipeline"]);
    assert_eq!(code(&o), 3);
    assert!(String::from_utf8_lossy(&o.stderr).contains("synth"));
}

#[test]
fn unmet_threshold_exits_4() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("run.toml");
    let out = tmp.path().join("run");
    std::fs::write(&cfg, tiny_toml(&out, |c| c.stages.ppo = false)).unwrap();
    let c = cfg.to_str().unwrap();
    assert_eq!(code(&run(&["--config", c, "synth"])), 0);
    assert_eq!(code(&run(&["--config", c, "pipeline"])), 0);
    let strict = tmp.path().join("strict.toml");
    std::fs::write(&strict, tiny_toml(&out, |c| c.thresholds.bleu4 = Some(1.5))).unwrap();
    let ckpt = out.join("checkpoints/policy.json");
    let o = run(&["--config", strict.to_str().unwrap(), "eval", "--checkpoint", ckpt.to_str().unwrap()]);
    assert_eq!(code(&o), 4, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(out.join("eval/report.md").exists());
}
