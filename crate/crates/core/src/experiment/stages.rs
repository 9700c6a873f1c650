use super::{AdaptConfig, AdaptMode, Dataset, Evaluator, ExperimentError, RunConfig};
use crate::policy::PolicyModel;
use crate::ppo::{ppo_update, ActorCritic, PpoConfig, PpoReport};
use crate::reward::{train_rm, RewardModel, RmReport};
use crate::sft::{train_sft, SftConfig, SftReport};
use crate::task::Demonstration;

/// One seed's data, evaluator and resolved config. Stage methods are pure
/// in their inputs, so callers may cache and reuse their outputs.
#[derive(Debug, Clone)]
pub struct SeedContext {
    pub cfg: RunConfig,
    pub data: Dataset,
    pub evaluator: Evaluator,
}

fn demos(ex: &[crate::task::LabeledExample]) -> Vec<Demonstration> {
    ex.iter().map(|e| e.demonstration()).collect()
}

impl SeedContext {
    /// `cfg` must already be resolved.
    pub fn new(cfg: RunConfig, data: Dataset) -> Self {
        let evaluator = Evaluator::new(&data, &cfg.eval);
        Self { cfg, data, evaluator }
    }

    /// Base policy: a fresh model fitted to the generic-style corpus.
    pub fn pretrain(&self) -> Result<(PolicyModel, SftReport), ExperimentError> {
        let st = ExperimentError::stage("prepare_base");
        let mut m = PolicyModel::new(self.cfg.model.clone())?;
        let r = train_sft(&mut m, &self.data.pretrain, &[], &self.cfg.pretrain).map_err(|e| st(&e))?;
        Ok((m, r))
    }

    pub fn adapt(&self, base: &PolicyModel, adapt: &AdaptConfig) -> Result<PolicyModel, ExperimentError> {
        let mut m = base.clone();
        match adapt.mode {
            AdaptMode::Lora => {
                let sel = adapt.selection(m.config.n_layers)?;
                m.attach_lora(&sel, adapt.rank, adapt.alpha)?;
            }
            AdaptMode::FullParam => m.unfreeze_all(),
        }
        Ok(m)
    }

    fn lr_scale(adapt: &AdaptConfig) -> f64 {
        match adapt.mode {
            AdaptMode::Lora => 1.0,
            AdaptMode::FullParam => adapt.full_param_lr_scale,
        }
    }

    pub fn sft(&self, policy: &mut PolicyModel, adapt: &AdaptConfig) -> Result<SftReport, ExperimentError> {
        let mut cfg: SftConfig = self.cfg.sft.clone();
        cfg.optimizer.lr *= Self::lr_scale(adapt);
        let s = &self.data.standard;
        train_sft(policy, &demos(&s.train), &demos(&s.val), &cfg).map_err(|e| ExperimentError::stage("sft")(&e))
    }

    /// Reward model on a copy of the base backbone.
    pub fn train_rm(&self, base: &PolicyModel) -> Result<(RewardModel, RmReport), ExperimentError> {
        let mut rm = RewardModel::from_backbone(base);
        let r = train_rm(&mut rm, &self.data.prefs_train, &self.data.prefs_val, &self.cfg.reward)
            .map_err(|e| ExperimentError::stage("train_rm")(&e))?;
        Ok((rm, r))
    }

    pub fn ppo(
        &self,
        policy: PolicyModel,
        reference: &PolicyModel,
        rm: &RewardModel,
        adapt: &AdaptConfig,
    ) -> Result<(ActorCritic, PpoReport), ExperimentError> {
        let mut cfg: PpoConfig = self.cfg.ppo.clone();
        cfg.optimizer.lr *= Self::lr_scale(adapt);
        let prompts: Vec<Vec<usize>> = self.data.standard.train.iter().map(|e| e.prompt.clone()).collect();
        let mut ac = ActorCritic::new(policy);
        let r = ppo_update(&mut ac, reference, rm, &prompts, &cfg).map_err(|e| ExperimentError::stage("ppo")(&e))?;
        Ok((ac, r))
    }
}
