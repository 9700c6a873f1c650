use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::eval::check_thresholds;
use super::{git_hash, write_file, Dataset, ExperimentError, RunConfig, SeedContext, DATA_DIR};
use crate::metrics::{audit_corpus, AuditItem, MetricsReport};
use crate::policy::{save_checkpoint, PolicyModel};
use crate::ppo::PpoStatus;

/// Stage names in execution order.
pub const STAGE_ORDER: [&str; 7] = [
    "prepare_base",
    "attach_lora",
    "sft",
    "set_reference",
    "train_rm",
    "ppo",
    "evaluate",
];

pub const MANIFEST_FORMAT: &str = "stylealign-manifest/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub name: String,
    /// "done", "skipped", "failed", or a warning such as "kl_cap_exceeded".
    pub status: String,
    pub seconds: f64,
}

/// Everything needed to re-execute a pipeline run and check the result.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub format: String,
    pub config: RunConfig,
    pub seeds: BTreeMap<String, u64>,
    pub stages: Vec<StageRecord>,
    /// Content hashes, keyed by path relative to the run directory.
    pub datasets: BTreeMap<String, String>,
    pub checkpoints: BTreeMap<String, String>,
    pub reports: BTreeMap<String, String>,
}

impl RunManifest {
    pub fn load(path: &Path) -> Result<Self, ExperimentError> {
        let text = std::fs::read_to_string(path).map_err(ExperimentError::io(path))?;
        let m: Self = serde_json::from_str(&text)
            .map_err(|e| ExperimentError::Config(format!("{}: {e}", path.display())))?;
        if m.format != MANIFEST_FORMAT {
            return Err(ExperimentError::Config(format!("unsupported manifest format {:?}", m.format)));
        }
        m.config.validate()?;
        Ok(m)
    }

    fn write(&self, dir: &Path) -> Result<(), ExperimentError> {
        let json = serde_json::to_string_pretty(self).expect("manifest serializes");
        write_file(&dir.join("manifest.json"), json + "\n")
    }
}

struct Recorder<'a> {
    dir: &'a Path,
    manifest: RunManifest,
}

impl Recorder<'_> {
    fn run<T>(&mut self, name: &str, f: impl FnOnce() -> Result<T, ExperimentError>) -> Result<T, ExperimentError> {
        let t = Instant::now();
        let out = f();
        self.manifest.stages.push(StageRecord {
            name: name.into(),
            status: if out.is_ok() { "done" } else { "failed" }.into(),
            seconds: t.elapsed().as_secs_f64(),
        });
        if out.is_err() {
            // Keep what earlier stages produced and say where it stopped.
            self.manifest.write(self.dir)?;
        }
        out.map_err(|e| match e {
            ExperimentError::Stage { msg, .. } => ExperimentError::Stage {
                stage: name.into(),
                msg,
            },
            other => other,
        })
    }

    fn skip(&mut self, name: &str) {
        self.manifest.stages.push(StageRecord {
            name: name.into(),
            status: "skipped".into(),
            seconds: 0.0,
        });
    }

    fn save_checkpoint(
        &mut self,
        rel: &str,
        model: &PolicyModel,
        heads: &std::collections::BTreeMap<String, crate::autodiff::Tensor>,
    ) -> Result<(), ExperimentError> {
        let path = self.dir.join(rel);
        if let Some(p) = path.parent() {
            std::fs::create_dir_all(p).map_err(ExperimentError::io(p))?;
        }
        save_checkpoint(&path, model, heads)?;
        let bytes = std::fs::read(&path).map_err(ExperimentError::io(&path))?;
        self.manifest.checkpoints.insert(rel.into(), git_hash(&bytes));
        Ok(())
    }

    fn write(&mut self, rel: &str, contents: String) -> Result<(), ExperimentError> {
        self.manifest.reports.insert(rel.into(), git_hash(contents.as_bytes()));
        write_file(&self.dir.join(rel), contents)
    }
}

/// `pipeline`: prepare base → attach adapters → SFT → freeze reference →
/// reward model → PPO → evaluate, writing checkpoints, diagnostics, the
/// report and `manifest.json` under `out_dir`.
pub fn cmd_pipeline(cfg: &RunConfig) -> Result<(MetricsReport, RunManifest), ExperimentError> {
    cfg.validate()?;
    let cfg = cfg.resolved();
    let dir = cfg.out_dir.clone();
    let data = Dataset::load(&dir.join(DATA_DIR), &cfg)?;
    let mut rec = Recorder {
        dir: &dir,
        manifest: RunManifest {
            format: MANIFEST_FORMAT.into(),
            config: cfg.clone(),
            seeds: cfg.seeds(),
            stages: Vec::new(),
            datasets: data
                .hashes
                .iter()
                .map(|(k, v)| (format!("{DATA_DIR}/{k}"), v.clone()))
                .collect(),
            checkpoints: BTreeMap::new(),
            reports: BTreeMap::new(),
        },
    };
    let ctx = SeedContext::new(cfg.clone(), data);
    let no_heads = BTreeMap::new();

    let (base, pre) = rec.run("prepare_base", || ctx.pretrain())?;
    rec.save_checkpoint("checkpoints/base.json", &base, &no_heads)?;
    rec.write("diagnostics/pretrain_loss.csv", pre.to_csv())?;

    let adapting = cfg.stages.sft || cfg.stages.ppo;
    let mut policy = if adapting {
        rec.run("attach_lora", || ctx.adapt(&base, &cfg.adapt))?
    } else {
        rec.skip("attach_lora");
        base.clone()
    };

    if cfg.stages.sft {
        let r = rec.run("sft", || ctx.sft(&mut policy, &cfg.adapt))?;
        rec.save_checkpoint("checkpoints/sft.json", &policy, &no_heads)?;
        rec.write("diagnostics/sft_loss.csv", r.to_csv())?;
    } else {
        rec.skip("sft");
    }

    let reference = if cfg.stages.ppo {
        Some(rec.run("set_reference", || Ok(policy.clone_frozen()))?)
    } else {
        rec.skip("set_reference");
        None
    };

    let (rm, rm_report) = rec.run("train_rm", || ctx.train_rm(&base))?;
    rec.save_checkpoint("checkpoints/rm.json", &rm.backbone, &rm.heads())?;
    let mut csv = String::from("epoch,step,train_loss,val_accuracy\n");
    for e in &rm_report.curve {
        csv += &format!("{},{},{},{}\n", e.epoch, e.step, e.train_loss, e.val_accuracy);
    }
    rec.write("diagnostics/rm_accuracy.csv", csv)?;

    let mut heads = no_heads.clone();
    if let Some(reference) = &reference {
        let (ac, r) = rec.run("ppo", || ctx.ppo(policy.clone(), reference, &rm, &cfg.adapt))?;
        if let PpoStatus::KlCapExceeded { .. } = r.status {
            rec.manifest.stages.last_mut().expect("ppo recorded").status = "kl_cap_exceeded".into();
        }
        heads = ac.heads();
        policy = ac.policy;
        rec.write("diagnostics/ppo.csv", r.to_csv())?;
    } else {
        rec.skip("ppo");
    }
    rec.save_checkpoint("checkpoints/policy.json", &policy, &heads)?;

    let report = rec.run("evaluate", || {
        let ev = &ctx.evaluator;
        let test = &ctx.data.standard.test;
        let st = ExperimentError::stage("evaluate");
        let mut report = if adapting {
            let base_resp = ev.generate(&base, test).map_err(|e| st(&e))?;
            let base_rewards = super::Evaluator::rewards(&rm, test, &base_resp).map_err(|e| st(&e))?;
            ev.evaluate(&policy, test, Some((&rm, &base_rewards)))?.0
        } else {
            ev.evaluate(&base, test, None)?.0
        };
        let items = |v: &[crate::task::LabeledExample]| {
            v.iter().map(|e| AuditItem::from_example(&ctx.data.spec, e)).collect::<Vec<_>>()
        };
        let s = &ctx.data.standard;
        report.audit = Some(audit_corpus(&items(&s.train), &items(&s.test), &cfg.eval.audit));
        Ok(report)
    })?;
    rec.write("report.csv", report.to_csv())?;
    rec.write("report.md", report.to_markdown())?;
    rec.write("report.json", serde_json::to_string_pretty(&report).expect("report serializes") + "\n")?;
    rec.manifest.write(&dir)?;
    check_thresholds(&report, &cfg.thresholds)?;
    Ok((report, rec.manifest))
}

/// Re-executes the run a manifest describes, into `out` (defaults to the
/// manifest's own run directory). Missing datasets are regenerated and must
/// hash to the recorded values.
pub fn cmd_pipeline_from_manifest(
    manifest: &Path,
    out: Option<PathBuf>,
) -> Result<(MetricsReport, RunManifest), ExperimentError> {
    let m = RunManifest::load(manifest)?;
    let mut cfg = m.config.clone();
    if let Some(o) = out {
        cfg.out_dir = o;
    }
    let data_dir = cfg.out_dir.join(DATA_DIR);
    if !data_dir.join("vocab.json").exists() {
        let mut d = Dataset::synthesize(&cfg.resolved())?;
        d.write(&data_dir)?;
    }
    let data = Dataset::load(&data_dir, &cfg.resolved())?;
    for (rel, h) in &data.hashes {
        let key = format!("{DATA_DIR}/{rel}");
        if m.datasets.get(&key) != Some(h) {
            return Err(ExperimentError::Stage {
                stage: "load_data".into(),
                msg: format!("{key} does not match the manifest hash"),
            });
        }
    }
    cmd_pipeline(&cfg)
}
