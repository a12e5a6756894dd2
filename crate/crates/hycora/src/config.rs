//! Experiment configuration: one TOML file covering corpus, backbone,
//! hyper-network, adapter strategy, contrastive schedule, training and
//! evaluation. Unknown keys are rejected; every run writes the resolved
//! snapshot beside its outputs.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adapter::{AdapterConfig, AdapterStrategy};
use crate::backbone::{BackboneConfig, VOCAB_SIZE};
use crate::contrastive::ContrastiveConfig;
use crate::corpus::CorpusConfig;
use crate::error::{Error, Result};
use crate::hypernet::HyperNetConfig;
use crate::training::{LossReduction, TrainConfig};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusSection {
    /// JSONL file to ingest instead of generating synthetically.
    pub path: Option<String>,
    pub num_roles: usize,
    pub samples_per_role: usize,
    pub shared_fact_count: usize,
    pub test_ratio: f64,
}

impl Default for CorpusSection {
    fn default() -> Self {
        CorpusSection {
            path: None,
            num_roles: 4,
            samples_per_role: 400,
            shared_fact_count: 16,
            test_ratio: 0.1,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneSection {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub context_len: usize,
    pub qkv_fused: bool,
    /// Language-model fit of the raw backbone before freezing; 0 disables.
    pub prefit_epochs: usize,
}

impl Default for BackboneSection {
    fn default() -> Self {
        BackboneSection {
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            context_len: 256,
            qkv_fused: true,
            prefit_epochs: 2,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HypernetSection {
    pub d_c: usize,
    pub d_l: usize,
    pub d_h: usize,
    pub n_blocks: usize,
    pub k: usize,
    pub residual_skip: bool,
}

impl Default for HypernetSection {
    fn default() -> Self {
        HypernetSection {
            d_c: 16,
            d_l: 8,
            d_h: 64,
            n_blocks: 2,
            k: 8,
            residual_skip: true,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdapterSection {
    pub strategy: AdapterStrategy,
    pub rank: usize,
    pub alpha: f64,
}

impl Default for AdapterSection {
    fn default() -> Self {
        AdapterSection {
            strategy: AdapterStrategy::Hycora,
            rank: 8,
            alpha: 16.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ContrastiveSection {
    pub tau: f64,
    pub m_proj: usize,
    pub lambda_min: f64,
    pub lambda_max: f64,
    pub ep_start: f64,
    pub ep_end: f64,
}

impl Default for ContrastiveSection {
    fn default() -> Self {
        let c = ContrastiveConfig::default();
        ContrastiveSection {
            tau: c.tau,
            m_proj: c.m_proj,
            lambda_min: c.lambda_min,
            lambda_max: c.lambda_max,
            ep_start: c.ep_start,
            ep_end: c.ep_end,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub loss_reduction: LossReduction,
    pub answer_only_loss_mask: bool,
}

impl Default for TrainingSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainingSection {
            epochs: t.epochs,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            beta1: t.beta1,
            beta2: t.beta2,
            adam_eps: t.adam_eps,
            loss_reduction: t.loss_reduction,
            answer_only_loss_mask: t.answer_only_loss_mask,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub max_new_tokens: usize,
    pub max_n: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            max_new_tokens: 32,
            max_n: 4,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out_dir: Option<String>,
    pub corpus: CorpusSection,
    pub backbone: BackboneSection,
    pub hypernet: HypernetSection,
    pub adapter: AdapterSection,
    pub contrastive: ContrastiveSection,
    pub training: TrainingSection,
    pub eval: EvalSection,
}

impl ExperimentConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<ExperimentConfig> {
        let text = std::fs::read_to_string(path.as_ref())?;
        toml::from_str(&text).map_err(|e| Error::config(format!("config parse: {e}")))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn corpus_config(&self) -> CorpusConfig {
        CorpusConfig {
            num_roles: self.corpus.num_roles,
            samples_per_role: self.corpus.samples_per_role,
            shared_fact_count: self.corpus.shared_fact_count,
            seed: crate::rng::derive_seed(self.seed, "corpus"),
        }
    }

    pub fn backbone_config(&self) -> BackboneConfig {
        BackboneConfig {
            vocab_size: VOCAB_SIZE,
            d_model: self.backbone.d_model,
            n_layers: self.backbone.n_layers,
            n_heads: self.backbone.n_heads,
            context_len: self.backbone.context_len,
            qkv_fused: self.backbone.qkv_fused,
        }
    }

    /// r and d are resolved at attach time from the adapter rank and site
    /// shape; they are placeholders here.
    pub fn hyper_config(&self) -> HyperNetConfig {
        HyperNetConfig {
            d_c: self.hypernet.d_c,
            d_l: self.hypernet.d_l,
            d_h: self.hypernet.d_h,
            n_blocks: self.hypernet.n_blocks,
            k: self.hypernet.k,
            r: self.adapter.rank,
            d: self.backbone.d_model,
            residual_skip: self.hypernet.residual_skip,
        }
    }

    pub fn adapter_config(&self) -> AdapterConfig {
        AdapterConfig {
            rank: self.adapter.rank,
            alpha: self.adapter.alpha,
        }
    }

    pub fn contrastive_config(&self) -> ContrastiveConfig {
        ContrastiveConfig {
            tau: self.contrastive.tau,
            m_proj: self.contrastive.m_proj,
            lambda_min: self.contrastive.lambda_min,
            lambda_max: self.contrastive.lambda_max,
            ep_start: self.contrastive.ep_start,
            ep_end: self.contrastive.ep_end,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.training.epochs,
            batch_size: self.training.batch_size,
            learning_rate: self.training.learning_rate,
            beta1: self.training.beta1,
            beta2: self.training.beta2,
            adam_eps: self.training.adam_eps,
            seed: self.seed,
            loss_reduction: self.training.loss_reduction,
            answer_only_loss_mask: self.training.answer_only_loss_mask,
            contrastive: self.contrastive_config(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone_config().validate()?;
        self.train_config().validate()?;
        if !(0.0..1.0).contains(&self.corpus.test_ratio) {
            return Err(Error::config("corpus.test_ratio must be in [0, 1)"));
        }
        if self.eval.max_new_tokens == 0 {
            return Err(Error::config("eval.max_new_tokens must be >= 1"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = ExperimentConfig::default();
        let text = cfg.to_toml();
        let back: ExperimentConfig = toml::from_str(&text).unwrap();
        assert_eq!(back.to_toml(), text);
        cfg.validate().unwrap();
    }

    #[test]
    fn unknown_keys_rejected() {
        let text = "[backbone]\nd_model = 32\nnot_a_key = 5\n";
        let r: std::result::Result<ExperimentConfig, _> = toml::from_str(text);
        assert!(r.is_err());
    }

    #[test]
    fn partial_configs_fill_defaults() {
        let text = "seed = 9\n[training]\nepochs = 3\n";
        let cfg: ExperimentConfig = toml::from_str(text).unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.training.epochs, 3);
        assert_eq!(cfg.training.batch_size, 32);
        assert_eq!(cfg.corpus.num_roles, 4);
    }
}
