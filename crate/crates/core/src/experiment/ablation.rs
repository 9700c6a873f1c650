use std::collections::BTreeMap;
use std::fmt::Write;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::{
    write_file, AdaptConfig, AdaptMode, Dataset, Evaluator, ExperimentError, RunConfig, SeedContext,
    StageSwitches, DATA_DIR,
};
use crate::metrics::{MetricsReport, CSV_HEADER};
use crate::policy::PolicyModel;

/// Rows of the ablation table, in display order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Condition {
    Base,
    SftOnly,
    PpoOnly,
    FullParam,
    AllLayer,
    Top2,
    Top4,
}

impl Condition {
    pub const ALL: [Condition; 7] = [
        Condition::Base,
        Condition::SftOnly,
        Condition::PpoOnly,
        Condition::FullParam,
        Condition::AllLayer,
        Condition::Top2,
        Condition::Top4,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Condition::Base => "Base (no adapt.)",
            Condition::SftOnly => "SFT only",
            Condition::PpoOnly => "PPO only (no SFT)",
            Condition::FullParam => "SFT+PPO (full-param)",
            Condition::AllLayer => "SFT+PPO (all-layer LoRA)",
            Condition::Top2 => "SFT+PPO (top-2 LoRA)",
            Condition::Top4 => "SFT+PPO (top-4 LoRA)",
        }
    }

    /// Short name accepted by `--condition`.
    pub fn slug(self) -> &'static str {
        match self {
            Condition::Base => "base",
            Condition::SftOnly => "sft-only",
            Condition::PpoOnly => "ppo-only",
            Condition::FullParam => "full-param",
            Condition::AllLayer => "all-layer",
            Condition::Top2 => "top-2",
            Condition::Top4 => "top-4",
        }
    }

    pub fn from_slug(s: &str) -> Result<Self, ExperimentError> {
        Self::ALL
            .into_iter()
            .find(|c| c.slug() == s || c.label() == s)
            .ok_or_else(|| {
                let names: Vec<&str> = Self::ALL.iter().map(|c| c.slug()).collect();
                ExperimentError::Config(format!("unknown condition {s:?}; expected one of {}", names.join(", ")))
            })
    }

    /// Adaptation and stage switches, derived from the run's LoRA settings.
    pub fn setup(self, cfg: &RunConfig) -> Result<(AdaptConfig, StageSwitches), ExperimentError> {
        let n = cfg.model.n_layers;
        let lora = |top: usize| -> Result<AdaptConfig, ExperimentError> {
            let a = AdaptConfig {
                mode: AdaptMode::Lora,
                top_layers: top,
                ..cfg.adapt.clone()
            };
            a.selection(n)?;
            Ok(a)
        };
        let both = StageSwitches { sft: true, ppo: true };
        Ok(match self {
            Condition::Base => (cfg.adapt.clone(), StageSwitches { sft: false, ppo: false }),
            Condition::SftOnly => (lora(4)?, StageSwitches { sft: true, ppo: false }),
            Condition::PpoOnly => (lora(4)?, StageSwitches { sft: false, ppo: true }),
            Condition::FullParam => (
                AdaptConfig {
                    mode: AdaptMode::FullParam,
                    ..cfg.adapt.clone()
                },
                both,
            ),
            Condition::AllLayer => (lora(n)?, both),
            Condition::Top2 => (lora(2)?, both),
            Condition::Top4 => (lora(4)?, both),
        })
    }
}

/// Identity of the trained weights a setup produces; equal keys are
/// computed once per seed (for example all-layer and top-4 on a 4-block
/// model).
fn setup_key(cfg: &RunConfig, adapt: &AdaptConfig, sft: bool) -> Result<String, ExperimentError> {
    let what = match adapt.mode {
        AdaptMode::FullParam => format!("full:{}", adapt.full_param_lr_scale),
        AdaptMode::Lora => {
            let sel = adapt.selection(cfg.model.n_layers)?;
            format!("lora:{:?}:{:?}:{}:{}", sel.block_indices, sel.target_kinds, adapt.rank, adapt.alpha)
        }
    };
    Ok(format!("{what}|sft={sft}"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub report: MetricsReport,
    pub seconds: f64,
    /// Set when the row reused an identical setup's result.
    pub reused_from: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub condition: Condition,
    pub label: String,
    pub seeds: Vec<SeedResult>,
    /// Per-metric median over seeds.
    pub median: MetricsReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

fn median_report(rs: &[&MetricsReport]) -> MetricsReport {
    let m = |f: &dyn Fn(&MetricsReport) -> f64| median(rs.iter().map(|r| f(r)).collect());
    let pwrs: Vec<f64> = rs.iter().filter_map(|r| r.pwr).collect();
    MetricsReport {
        sac: m(&|r| r.sac),
        apc: m(&|r| r.apc),
        bleu4: m(&|r| r.bleu4),
        ca: m(&|r| r.ca),
        pwr: (!pwrs.is_empty()).then(|| median(pwrs)),
        n: rs[0].n,
        extraction_failures: rs.iter().map(|r| r.extraction_failures).sum(),
        empty_responses: rs.iter().map(|r| r.empty_responses).sum(),
        oracle_style_rate: m(&|r| r.oracle_style_rate),
        oracle_correct_rate: m(&|r| r.oracle_correct_rate),
        classifier: None,
        audit: None,
    }
}

impl AblationTable {
    pub fn row(&self, c: Condition) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.condition == c)
    }

    /// Medians in percent, PWR as "--" where absent.
    pub fn to_markdown(&self) -> String {
        let mut s = String::from("| Ablation | SAC | APC | BLEU-4 | CA | PWR |\n|---|---|---|---|---|---|\n");
        for r in &self.rows {
            writeln!(s, "| {} | {} |", r.label, r.median.cells().join(" | ")).unwrap();
        }
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("condition,{CSV_HEADER}\n");
        for r in &self.rows {
            writeln!(s, "\"{}\",{}", r.label, r.median.csv_row()).unwrap();
        }
        s
    }

    /// Every (seed, condition) result including the oracle rates.
    pub fn seeds_csv(&self) -> String {
        let mut s = format!("seed,condition,{CSV_HEADER},oracle_style,oracle_correct,seconds\n");
        for r in &self.rows {
            for x in &r.seeds {
                writeln!(
                    s,
                    "{},\"{}\",{},{},{},{:.1}",
                    x.seed,
                    r.label,
                    x.report.csv_row(),
                    x.report.oracle_style_rate,
                    x.report.oracle_correct_rate,
                    x.seconds
                )
                .unwrap();
            }
        }
        s
    }
}

struct SeedRunner {
    ctx: SeedContext,
    base: PolicyModel,
    rm: crate::reward::RewardModel,
    base_rewards: Vec<f64>,
    base_report: MetricsReport,
    sft_cache: BTreeMap<String, PolicyModel>,
    done: BTreeMap<String, (Condition, MetricsReport)>,
}

impl SeedRunner {
    fn new(cfg: &RunConfig) -> Result<Self, ExperimentError> {
        let dir = cfg.out_dir.join(DATA_DIR);
        if !dir.join("vocab.json").exists() {
            Dataset::synthesize(cfg)?.write(&dir)?;
        }
        let ctx = SeedContext::new(cfg.clone(), Dataset::load(&dir, cfg)?);
        let (base, _) = ctx.pretrain()?;
        let (rm, _) = ctx.train_rm(&base)?;
        let test = &ctx.data.standard.test;
        let (base_report, base_resp) = ctx.evaluator.evaluate(&base, test, None)?;
        let base_rewards =
            Evaluator::rewards(&rm, test, &base_resp).map_err(|e| ExperimentError::stage("evaluate")(&e))?;
        Ok(Self {
            ctx,
            base,
            rm,
            base_rewards,
            base_report,
            sft_cache: BTreeMap::new(),
            done: BTreeMap::new(),
        })
    }

    fn run(&mut self, c: Condition) -> Result<(MetricsReport, Option<String>), ExperimentError> {
        if c == Condition::Base {
            return Ok((self.base_report.clone(), None));
        }
        let cfg = &self.ctx.cfg;
        let (adapt, stages) = c.setup(cfg)?;
        let sft_key = setup_key(cfg, &adapt, stages.sft)?;
        let key = format!("{sft_key}|ppo={}", stages.ppo);
        if let Some((prev, r)) = self.done.get(&key) {
            return Ok((r.clone(), Some(prev.label().to_string())));
        }
        let policy = match self.sft_cache.get(&sft_key) {
            Some(p) => p.clone(),
            None => {
                let mut p = self.ctx.adapt(&self.base, &adapt)?;
                if stages.sft {
                    self.ctx.sft(&mut p, &adapt)?;
                }
                self.sft_cache.insert(sft_key, p.clone());
                p
            }
        };
        let policy = if stages.ppo {
            let reference = policy.clone_frozen();
            self.ctx.ppo(policy, &reference, &self.rm, &adapt)?.0.policy
        } else {
            policy
        };
        let test = &self.ctx.data.standard.test;
        let (report, _) = self.ctx.evaluator.evaluate(&policy, test, Some((&self.rm, &self.base_rewards)))?;
        self.done.insert(key, (c, report.clone()));
        Ok((report, None))
    }
}

/// `ablate`: the given rows (all seven when empty) over `ablation.seeds`. Per-seed data lives in `<out_dir>/seed-<s>/data` and is
/// synthesized when absent. Writes `ablation.{md,csv,json}` and
/// `ablation_seeds.csv` under `out_dir`.
pub fn cmd_ablate(cfg: &RunConfig, only: &[Condition]) -> Result<AblationTable, ExperimentError> {
    cfg.validate()?;
    let conditions: Vec<Condition> = if only.is_empty() {
        Condition::ALL.to_vec()
    } else {
        Condition::ALL.into_iter().filter(|c| only.contains(c)).collect()
    };
    for c in &conditions {
        c.setup(cfg)?;
    }
    if cfg.ablation.seeds.is_empty() {
        return Err(ExperimentError::Config("ablation.seeds is empty".into()));
    }
    let mut results: BTreeMap<Condition, Vec<SeedResult>> = BTreeMap::new();
    for &seed in &cfg.ablation.seeds {
        let scfg = RunConfig {
            seed,
            out_dir: cfg.out_dir.join(format!("seed-{seed}")),
            ..cfg.clone()
        }
        .resolved();
        let mut runner = SeedRunner::new(&scfg)?;
        for &c in &conditions {
            let t = Instant::now();
            let (report, reused_from) = runner.run(c)?;
            results.entry(c).or_default().push(SeedResult {
                seed,
                report,
                seconds: t.elapsed().as_secs_f64(),
                reused_from,
            });
        }
    }
    let rows = conditions
        .iter()
        .map(|&c| {
            let seeds = results.remove(&c).unwrap_or_default();
            let median = median_report(&seeds.iter().map(|s| &s.report).collect::<Vec<_>>());
            AblationRow {
                condition: c,
                label: c.label().to_string(),
                seeds,
                median,
            }
        })
        .collect();
    let table = AblationTable { rows };
    let out = &cfg.out_dir;
    write_file(&out.join("ablation.md"), table.to_markdown())?;
    write_file(&out.join("ablation.csv"), table.to_csv())?;
    write_file(&out.join("ablation_seeds.csv"), table.seeds_csv())?;
    write_file(
        &out.join("ablation.json"),
        serde_json::to_string_pretty(&table).expect("table serializes") + "\n",
    )?;
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn labels_and_slugs_round_trip() {
        for c in Condition::ALL {
            assert_eq!(Condition::from_slug(c.slug()).unwrap(), c);
        }
        assert_eq!(Condition::from_slug("nope").unwrap_err().exit_code(), 2);
    }

    #[test]
    fn all_layer_equals_top4_on_four_blocks() {
        let cfg = RunConfig::default();
        let (a, s) = Condition::AllLayer.setup(&cfg).unwrap();
        let (b, t) = Condition::Top4.setup(&cfg).unwrap();
        assert_eq!(setup_key(&cfg, &a, s.sft).unwrap(), setup_key(&cfg, &b, t.sft).unwrap());
        let (c, u) = Condition::Top2.setup(&cfg).unwrap();
        assert_ne!(setup_key(&cfg, &a, s.sft).unwrap(), setup_key(&cfg, &c, u.sft).unwrap());
    }

    #[test]
    fn shallow_model_rejects_top4() {
        let mut cfg = RunConfig::default();
        cfg.model.n_layers = 2;
        let e = Condition::Top4.setup(&cfg).unwrap_err();
        assert_eq!(e.exit_code(), 2);
        assert!(e.to_string().contains("cap L at 2"));
        Condition::Top2.setup(&cfg).unwrap();
    }

    #[test]
    fn median_of_even_and_odd() {
        assert_eq!(median(vec![3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(vec![4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
