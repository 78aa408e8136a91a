use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::AdamConfig;
use crate::policy::{Architecture, DecodeMode, GenerationConfig};
use crate::reward::{EvalGranularity, ModelGranularity, NormalizeMode, RmDatasetConfig, RmGranularity, RmTrainConfig};
use crate::segmentation::AggKind;
use crate::synthworld::{SampleConfig, WorldConfig};
use crate::training::{PpoConfig, RewardSourceKind, SftConfig, UnlikelihoodConfig};

/// One of the nine rows of the experiment matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Technique {
    Sft,
    Unlikelihood,
    MleFilter,
    Rlhf(RmGranularity),
}

impl Technique {
    pub fn all() -> Vec<Technique> {
        let mut v = vec![Technique::Sft, Technique::Unlikelihood, Technique::MleFilter];
        v.extend(RmGranularity::all().into_iter().map(Technique::Rlhf));
        v
    }

    pub fn name(&self) -> String {
        match self {
            Technique::Sft => "sft".into(),
            Technique::Unlikelihood => "unlikelihood".into(),
            Technique::MleFilter => "mle-filter".into(),
            Technique::Rlhf(g) => format!("rlhf-{}", g.label().replace('/', "-")),
        }
    }

    pub fn parse(name: &str) -> Result<Technique> {
        Technique::all()
            .into_iter()
            .find(|t| t.name() == name)
            .ok_or_else(|| Error::Config(format!("unknown technique {name:?}")))
    }
}

fn all_technique_names() -> Vec<String> {
    Technique::all().iter().map(Technique::name).collect()
}

/// Every knob of a run. Serialized as a flat TOML table; missing keys take
/// their defaults and unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub run_dir: PathBuf,
    pub seeds: Vec<u64>,
    pub techniques: Vec<String>,

    pub world_entities: usize,
    pub world_attributes: usize,
    pub world_values: usize,
    pub world_seed: u64,
    pub aspects: usize,
    pub supported_fraction: f64,
    pub distractors: usize,
    pub corruption: f64,
    pub data_seed: u64,
    pub sft_demos: usize,
    pub rl_prompts: usize,
    pub eval_samples: usize,

    pub max_len: usize,
    pub max_outline_len: usize,
    pub beam_width: usize,
    pub length_penalty: f64,

    pub policy_embed: usize,
    pub policy_hidden: usize,
    pub policy_context_hidden: usize,
    pub window: usize,
    /// Deviation of the initial output layer; 0 starts from the uniform
    /// policy.
    pub init_head_std: f64,

    pub sft_steps: usize,
    pub sft_batch: usize,
    pub sft_lr: f64,

    pub rm_rollouts: usize,
    pub rm_temperature: f64,
    pub rm_steps: usize,
    pub rm_batch: usize,
    pub rm_lr: f64,
    pub rm_holdout: f64,
    pub rm_hidden: usize,
    pub rm_weight_decay: f64,
    pub eval_granularity: EvalGranularity,
    pub model_granularity: ModelGranularity,
    pub agg_token: AggKind,
    pub agg_subclaim: AggKind,

    pub reward_source: RewardSourceKind,
    pub iterations: usize,
    pub beta: f64,
    pub gamma: f64,
    pub clip: f64,
    pub lambda: f64,
    pub rollouts: usize,
    pub epochs: usize,
    pub minibatch: usize,
    pub entropy_coef: f64,
    pub value_coef: f64,
    pub rollout_temperature: f64,
    pub kl_ceiling: f64,
    pub policy_lr: f64,
    pub value_lr: f64,
    pub normalize: NormalizeMode,
    pub checkpoint_every: usize,
    pub probe_every: usize,
    pub probe_samples: usize,

    pub unlikelihood_steps: usize,
    pub unlikelihood_lr: f64,
    pub unlikelihood_alpha: f64,
    pub filter_steps: usize,
    pub filter_lr: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let world = WorldConfig::default();
        let sample = SampleConfig::default();
        let gen = GenerationConfig::default();
        let arch = Architecture::default();
        let ppo = PpoConfig::default();
        let rm = RmTrainConfig::default();
        Self {
            run_dir: PathBuf::from("runs/default"),
            seeds: vec![0, 1, 2],
            techniques: all_technique_names(),
            world_entities: world.entities,
            world_attributes: world.attributes,
            world_values: world.values,
            world_seed: 7,
            aspects: sample.aspects,
            supported_fraction: sample.supported_fraction,
            distractors: sample.distractors,
            corruption: sample.corruption,
            data_seed: 11,
            sft_demos: 2000,
            rl_prompts: 2000,
            eval_samples: 500,
            max_len: gen.max_len,
            max_outline_len: gen.max_outline_len,
            beam_width: gen.beam_width,
            length_penalty: gen.length_penalty,
            policy_embed: arch.embed,
            policy_hidden: arch.hidden,
            policy_context_hidden: arch.context_hidden,
            window: arch.window,
            init_head_std: 0.0,
            sft_steps: 150,
            sft_batch: 32,
            sft_lr: 3e-3,
            rm_rollouts: 5000,
            rm_temperature: 1.2,
            rm_steps: rm.steps,
            rm_batch: rm.batch_size,
            rm_lr: rm.adam.lr,
            rm_holdout: rm.holdout_fraction,
            rm_hidden: crate::reward::RewardModel::default_arch().hidden,
            rm_weight_decay: rm.adam.weight_decay,
            eval_granularity: EvalGranularity::Subclaim,
            model_granularity: ModelGranularity::Sequence,
            agg_token: AggKind::Avg,
            agg_subclaim: AggKind::Avg,
            reward_source: RewardSourceKind::RewardModel,
            iterations: 60,
            beta: ppo.beta,
            gamma: ppo.gamma,
            clip: ppo.clip,
            lambda: ppo.lambda,
            rollouts: ppo.rollouts,
            epochs: ppo.epochs,
            minibatch: ppo.minibatch,
            entropy_coef: ppo.entropy_coef,
            value_coef: ppo.value_coef,
            rollout_temperature: ppo.temperature,
            kl_ceiling: ppo.kl_ceiling,
            policy_lr: ppo.policy_adam.lr,
            value_lr: ppo.value_adam.lr,
            normalize: ppo.normalize,
            checkpoint_every: 10,
            probe_every: 0,
            probe_samples: 100,
            unlikelihood_steps: 300,
            unlikelihood_lr: 1e-3,
            unlikelihood_alpha: 1.0,
            filter_steps: 300,
            filter_lr: 1e-3,
        }
    }
}

fn clipped_adam(lr: f64) -> AdamConfig {
    AdamConfig {
        max_grad_norm: Some(1.0),
        ..AdamConfig::with_lr(lr)
    }
}

impl RunConfig {
    /// Parses a TOML document, then applies `key=value` overrides. Override
    /// values are read as TOML literals, falling back to plain strings.
    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = text.parse().map_err(|e| Error::Config(format!("{e}")))?;
        for o in overrides {
            let (key, value) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {o:?} is not key=value")))?;
            let key = key.trim();
            let value = value.trim();
            let parsed = format!("v = {value}")
                .parse::<toml::Table>()
                .ok()
                .and_then(|mut t| t.remove("v"))
                .unwrap_or_else(|| toml::Value::String(value.to_string()));
            table.insert(key.to_string(), parsed);
        }
        let cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.world().validate()?;
        self.sample().validate(&self.world())?;
        self.generation().validate()?;
        self.policy_arch().validate()?;
        self.ppo(0).validate()?;
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        for t in &self.techniques {
            Technique::parse(t)?;
        }
        if self.sft_demos == 0 || self.rl_prompts == 0 || self.eval_samples == 0 {
            return Err(Error::Config("dataset sizes must be positive".into()));
        }
        if self.sft_batch == 0 || self.rm_batch == 0 || self.rm_hidden == 0 {
            return Err(Error::Config("batch sizes and widths must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.rm_holdout) {
            return Err(Error::Config(format!(
                "rm_holdout must lie in [0, 1), got {}",
                self.rm_holdout
            )));
        }
        if !(self.init_head_std >= 0.0 && self.init_head_std.is_finite()) {
            return Err(Error::Config(format!(
                "init_head_std must be non-negative, got {}",
                self.init_head_std
            )));
        }
        if !(self.rm_weight_decay >= 0.0 && self.rm_weight_decay.is_finite()) {
            return Err(Error::Config(format!(
                "rm_weight_decay must be non-negative, got {}",
                self.rm_weight_decay
            )));
        }
        if !(self.rm_temperature > 0.0) {
            return Err(Error::Config("rm_temperature must be positive".into()));
        }
        Ok(())
    }

    pub fn techniques(&self) -> Vec<Technique> {
        self.techniques
            .iter()
            .filter_map(|t| Technique::parse(t).ok())
            .collect()
    }

    pub fn world(&self) -> WorldConfig {
        WorldConfig {
            entities: self.world_entities,
            attributes: self.world_attributes,
            values: self.world_values,
        }
    }

    pub fn sample(&self) -> SampleConfig {
        SampleConfig {
            aspects: self.aspects,
            supported_fraction: self.supported_fraction,
            distractors: self.distractors,
            corruption: self.corruption,
        }
    }

    pub fn generation(&self) -> GenerationConfig {
        GenerationConfig {
            max_len: self.max_len,
            max_outline_len: self.max_outline_len,
            temperature: 1.0,
            beam_width: self.beam_width,
            length_penalty: self.length_penalty,
            mode: DecodeMode::Beam,
        }
    }

    pub fn policy_arch(&self) -> Architecture {
        Architecture {
            embed: self.policy_embed,
            hidden: self.policy_hidden,
            context_hidden: self.policy_context_hidden,
            window: self.window,
            interactions: false,
        }
    }

    pub fn rm_arch(&self) -> Architecture {
        Architecture {
            hidden: self.rm_hidden,
            ..crate::reward::RewardModel::default_arch()
        }
    }

    /// The granularity selected for single-stage commands.
    pub fn granularity(&self) -> RmGranularity {
        RmGranularity {
            agg_t: self.agg_token,
            agg_j: self.agg_subclaim,
            ..RmGranularity::new(self.eval_granularity, self.model_granularity)
        }
    }

    pub fn sft(&self, seed: u64) -> SftConfig {
        SftConfig {
            steps: self.sft_steps,
            batch_size: self.sft_batch,
            adam: clipped_adam(self.sft_lr),
            seed,
        }
    }

    pub fn filter_sft(&self, seed: u64) -> SftConfig {
        SftConfig {
            steps: self.filter_steps,
            batch_size: self.sft_batch,
            adam: clipped_adam(self.filter_lr),
            seed,
        }
    }

    pub fn unlikelihood(&self, seed: u64) -> UnlikelihoodConfig {
        UnlikelihoodConfig {
            steps: self.unlikelihood_steps,
            batch_size: self.sft_batch,
            alpha: self.unlikelihood_alpha,
            adam: clipped_adam(self.unlikelihood_lr),
            seed,
        }
    }

    pub fn rm_dataset(&self, seed: u64) -> RmDatasetConfig {
        RmDatasetConfig {
            size: self.rm_rollouts,
            temperature: self.rm_temperature,
            seed,
        }
    }

    pub fn rm_train(&self, seed: u64) -> RmTrainConfig {
        RmTrainConfig {
            steps: self.rm_steps,
            batch_size: self.rm_batch,
            adam: AdamConfig {
                weight_decay: self.rm_weight_decay,
                ..clipped_adam(self.rm_lr)
            },
            holdout_fraction: self.rm_holdout,
            seed,
        }
    }

    pub fn ppo(&self, seed: u64) -> PpoConfig {
        PpoConfig {
            beta: self.beta,
            gamma: self.gamma,
            clip: self.clip,
            lambda: self.lambda,
            rollouts: self.rollouts,
            epochs: self.epochs,
            minibatch: self.minibatch,
            entropy_coef: self.entropy_coef,
            value_coef: self.value_coef,
            temperature: self.rollout_temperature,
            kl_ceiling: self.kl_ceiling,
            policy_adam: clipped_adam(self.policy_lr),
            value_adam: clipped_adam(self.value_lr),
            normalize: self.normalize,
            granularity: self.granularity(),
            source: self.reward_source,
            seed,
        }
    }
}
