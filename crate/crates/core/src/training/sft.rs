use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{adam_step, backward, AdamConfig, Tape};
use crate::policy::{EpisodeBatch, Policy};
use crate::synthworld::{Prompt, Token};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SftConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl Default for SftConfig {
    fn default() -> Self {
        Self {
            steps: 1500,
            batch_size: 32,
            adam: AdamConfig {
                max_grad_norm: Some(1.0),
                ..AdamConfig::with_lr(3e-3)
            },
            seed: 0,
        }
    }
}

/// A supervised target: the outline and answer to imitate for a prompt.
#[derive(Debug, Clone, Copy)]
pub struct Target<'a> {
    pub prompt: &'a Prompt,
    pub outline: &'a [Token],
    pub answer: &'a [Token],
}

/// Mean token negative log-likelihood of the batch; leaves gradients in
/// the policy store.
pub fn nll_gradient(policy: &mut Policy, targets: &[Target<'_>]) -> Result<f64> {
    let mut batch = EpisodeBatch::new(policy.arch.window);
    for t in targets {
        batch.push(&policy.vocab, t.prompt, t.outline, t.answer);
    }
    if batch.is_empty() {
        return Ok(0.0);
    }
    let grads = {
        let mut tape = Tape::new(&policy.store);
        let (picked, _) = policy.target_log_probs_on(&mut tape, &batch)?;
        let mean = tape.mean(picked);
        let loss = tape.neg(mean);
        let value = tape.value(loss).item()?;
        if !value.is_finite() {
            return Err(Error::Diverged(format!("non-finite NLL {value}")));
        }
        (backward(&tape, loss)?, value)
    };
    policy.store.accumulate(&grads.0);
    Ok(grads.1)
}

/// Minibatch Adam on the token NLL of `targets`, cycling through shuffled
/// epochs. Returns the per-step loss curve.
pub fn fit_targets(policy: &mut Policy, targets: &[Target<'_>], cfg: &SftConfig) -> Result<Vec<f64>> {
    if targets.is_empty() {
        return Err(Error::Contract("supervised training needs a non-empty dataset".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = Vec::new();
    let mut curve = Vec::with_capacity(cfg.steps);
    for _ in 0..cfg.steps {
        if order.len() < cfg.batch_size {
            let mut epoch: Vec<usize> = (0..targets.len()).collect();
            epoch.shuffle(&mut rng);
            order.extend(epoch);
        }
        let take = cfg.batch_size.min(order.len());
        let batch: Vec<Target<'_>> = order.drain(..take).map(|i| targets[i]).collect();
        policy.store.zero_grads();
        let loss = nll_gradient(policy, &batch)?;
        adam_step(&mut policy.store, &cfg.adam);
        if !policy.store.all_finite() {
            return Err(Error::Diverged("non-finite parameters after update".into()));
        }
        curve.push(loss);
    }
    Ok(curve)
}

/// Imitates the demonstrations: both stages, each with its own
/// conditioning.
pub fn sft_train(policy: &mut Policy, samples: &[crate::synthworld::EnvSample], cfg: &SftConfig) -> Result<Vec<f64>> {
    let prompts: Vec<Prompt> = samples.iter().map(|s| s.prompt()).collect();
    let targets: Vec<Target<'_>> = samples
        .iter()
        .zip(&prompts)
        .map(|(s, p)| Target {
            prompt: p,
            outline: &s.demo_outline,
            answer: &s.demo_answer,
        })
        .collect();
    fit_targets(policy, &targets, cfg)
}
