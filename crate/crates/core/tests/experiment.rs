use std::collections::BTreeMap;
use std::path::Path;

use stylealign::experiment::{
    cmd_audit, cmd_eval, cmd_pipeline, cmd_pipeline_from_manifest, cmd_synth, Dataset, EvalRequest,
    RunConfig, RunManifest, Thresholds, STAGE_ORDER,
};
use stylealign::policy::{save_checkpoint, ModelConfig, PolicyModel};

/// Small enough that the whole pipeline runs in a few seconds.
fn tiny(out: &Path) -> RunConfig {
    let mut c = RunConfig {
        out_dir: out.to_path_buf(),
        ..Default::default()
    };
    c.model = ModelConfig {
        d_model: 16,
        n_heads: 2,
        d_ff: 32,
        n_layers: 2,
        ..c.model
    };
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
    c
}

fn files_under(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                out.insert(rel, std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

#[test]
fn synth_is_deterministic_and_seed_sensitive() {
    let tmp = tempfile::tempdir().unwrap();
    let a = cmd_synth(&tiny(&tmp.path().join("a"))).unwrap();
    let b = cmd_synth(&tiny(&tmp.path().join("b"))).unwrap();
    assert_eq!(a.hashes, b.hashes);
    assert_eq!(files_under(&tmp.path().join("a")), files_under(&tmp.path().join("b")));
    let mut c = tiny(&tmp.path().join("c"));
    c.seed = 1;
    assert_ne!(cmd_synth(&c).unwrap().hashes, a.hashes);
}

#[test]
fn split_shapes_and_problem_disjointness() {
    let cfg = RunConfig::default().resolved();
    let d = Dataset::synthesize(&cfg).unwrap();
    let s = &d.standard;
    assert_eq!((s.train.len(), s.val.len(), s.test.len()), (140, 20, 40));
    let n = &d.new_problems;
    assert_eq!(n.train.len() + n.val.len() + n.test.len(), 200);
    let ids = |v: &[stylealign::task::LabeledExample]| {
        v.iter().map(|e| e.problem).collect::<std::collections::BTreeSet<_>>()
    };
    assert!(ids(&n.train).is_disjoint(&ids(&n.test)));
    assert!(ids(&n.train).is_disjoint(&ids(&n.val)));
    assert!(ids(&n.val).is_disjoint(&ids(&n.test)));
    assert_eq!(d.prefs_train.len(), 240);
    assert_eq!(d.prefs_val.len(), 60);
}

#[test]
fn pipeline_records_stages_in_order_and_stays_in_out_dir() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    let cfg = tiny(&out);
    cmd_synth(&cfg).unwrap();
    let (report, manifest) = cmd_pipeline(&cfg).unwrap();
    let names: Vec<&str> = manifest.stages.iter().map(|s| s.name.as_str()).collect();
    assert_eq!(names, STAGE_ORDER);
    assert!(report.pwr.is_some());
    assert!(report.audit.is_some());
    let top: Vec<_> = std::fs::read_dir(tmp.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
    assert_eq!(top, ["run"]);
    for f in [
        "manifest.json",
        "report.csv",
        "report.md",
        "report.json",
        "checkpoints/base.json",
        "checkpoints/sft.json",
        "checkpoints/rm.json",
        "checkpoints/policy.json",
        "diagnostics/pretrain_loss.csv",
        "diagnostics/sft_loss.csv",
        "diagnostics/rm_accuracy.csv",
        "diagnostics/ppo.csv",
    ] {
        assert!(out.join(f).exists(), "{f}");
    }
    let loaded = RunManifest::load(&out.join("manifest.json")).unwrap();
    assert_eq!(loaded, manifest);
}

#[test]
fn disabled_stages_are_skipped() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = tiny(tmp.path());
    cfg.stages.sft = false;
    cfg.stages.ppo = false;
    cmd_synth(&cfg).unwrap();
    let (report, manifest) = cmd_pipeline(&cfg).unwrap();
    let status: BTreeMap<&str, &str> =
        manifest.stages.iter().map(|s| (s.name.as_str(), s.status.as_str())).collect();
    for s in ["attach_lora", "sft", "set_reference", "ppo"] {
        assert_eq!(status[s], "skipped", "{s}");
    }
    assert_eq!(status["evaluate"], "done");
    assert!(report.pwr.is_none());
}

#[test]
fn manifest_rerun_rejects_tampered_data() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    let cfg = tiny(&a);
    cmd_synth(&cfg).unwrap();
    cmd_pipeline(&cfg).unwrap();
    let b = tmp.path().join("b");
    cmd_synth(&tiny(&b)).unwrap();
    let p = b.join("data/standard/test.jsonl");
    let mut text = std::fs::read_to_string(&p).unwrap();
    text.push('\n');
    std::fs::write(&p, text).unwrap();
    let e = cmd_pipeline_from_manifest(&a.join("manifest.json"), Some(b)).unwrap_err();
    assert_eq!(e.exit_code(), 3, "{e}");
}

#[test]
fn eval_against_itself_is_a_coin_flip() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny(tmp.path());
    cmd_synth(&cfg).unwrap();
    cmd_pipeline(&cfg).unwrap();
    let policy = tmp.path().join("checkpoints/policy.json");
    let r = cmd_eval(
        &cfg,
        &EvalRequest {
            checkpoint: policy.clone(),
            baseline: Some(policy.clone()),
            reward: None,
        },
    )
    .unwrap();
    assert_eq!(r.pwr, Some(0.5));
    assert!(tmp.path().join("eval/report.json").exists());

    let strict = RunConfig {
        thresholds: Thresholds {
            sac: Some(1.01),
            ..Default::default()
        },
        ..cfg.clone()
    };
    let e = cmd_eval(&strict, &EvalRequest { checkpoint: policy, ..Default::default() }).unwrap_err();
    assert_eq!(e.exit_code(), 4);
}

#[test]
fn eval_rejects_foreign_vocabulary() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny(tmp.path());
    cmd_synth(&cfg).unwrap();
    let foreign = PolicyModel::new(ModelConfig {
        vocab_size: 61,
        ..cfg.model.clone()
    })
    .unwrap();
    let path = tmp.path().join("foreign.json");
    save_checkpoint(&path, &foreign, &BTreeMap::new()).unwrap();
    let e = cmd_eval(&cfg, &EvalRequest { checkpoint: path, ..Default::default() }).unwrap_err();
    assert_eq!(e.exit_code(), 2, "{e}");
}

#[test]
fn missing_data_is_a_stage_failure() {
    let tmp = tempfile::tempdir().unwrap();
    let e = cmd_pipeline(&tiny(tmp.path())).unwrap_err();
    assert_eq!(e.exit_code(), 3);
    assert!(e.to_string().contains("synth"), "{e}");
}

#[test]
fn audit_emits_both_columns() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny(tmp.path());
    cmd_synth(&cfg).unwrap();
    let r = cmd_audit(&cfg).unwrap();
    assert_eq!(r.columns.len(), 2);
    assert!(tmp.path().join("audit/audit.json").exists());
}
