use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{adam_step, backward, AdamConfig, Array, Tape, Var};
use crate::policy::{EpisodeBatch, Policy};
use crate::reward::LabeledAnswer;

use super::sft::{fit_targets, SftConfig, Target};

/// Keeps the answers whose holistic label is factual.
pub fn filter_dataset(data: &[LabeledAnswer]) -> Vec<LabeledAnswer> {
    let kept: Vec<LabeledAnswer> = data.iter().filter(|d| d.labels.holistic).cloned().collect();
    if kept.is_empty() {
        log::warn!("factuality filter kept none of {} answers", data.len());
    }
    kept
}

/// Supervised fine-tuning on the filtered answers.
pub fn mle_filter_train(policy: &mut Policy, data: &[LabeledAnswer], cfg: &SftConfig) -> Result<Vec<f64>> {
    let kept = filter_dataset(data);
    if kept.is_empty() {
        return Err(Error::Contract("no factual answers survived the filter".into()));
    }
    let targets: Vec<Target<'_>> = kept
        .iter()
        .map(|d| Target {
            prompt: &d.prompt,
            outline: &d.outline,
            answer: &d.answer,
        })
        .collect();
    fit_targets(policy, &targets, cfg)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UnlikelihoodConfig {
    pub steps: usize,
    pub batch_size: usize,
    /// Weight of the push-down term.
    pub alpha: f64,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl Default for UnlikelihoodConfig {
    fn default() -> Self {
        Self {
            steps: 300,
            batch_size: 32,
            alpha: 1.0,
            adam: AdamConfig {
                max_grad_norm: Some(1.0),
                ..AdamConfig::with_lr(1e-3)
            },
            seed: 0,
        }
    }
}

/// Probabilities above this are clamped before `log(1 - p)`.
pub const UNLIKELY_CLAMP: f64 = 1.0 - 1e-9;

/// Row indices into the episode batch of the tokens in factual and in
/// non-factual sentences.
pub fn sentence_token_rows(batch: &EpisodeBatch, data: &[&LabeledAnswer]) -> (Vec<usize>, Vec<usize>) {
    let (mut good, mut bad) = (Vec::new(), Vec::new());
    for (k, d) in data.iter().enumerate() {
        let offset = batch.spans[k].start + d.outline.len();
        for (span, &ok) in d.segmap.spans.iter().zip(&d.labels.per_sentence) {
            let rows = span.iter().map(|&t| offset + t);
            if ok {
                good.extend(rows);
            } else {
                bad.extend(rows);
            }
        }
    }
    (good, bad)
}

pub struct UnlikelihoodLoss {
    pub loss: Var,
    /// Tokens whose probability hit the clamp.
    pub clamped: usize,
}

/// Mean over sentence tokens of `-log p` for factual sentences and
/// `-alpha log(1 - p)` for non-factual ones.
pub fn unlikelihood_loss_on(
    tape: &mut Tape<'_>,
    policy: &Policy,
    batch: &EpisodeBatch,
    data: &[&LabeledAnswer],
    alpha: f64,
) -> Result<UnlikelihoodLoss> {
    let (good, bad) = sentence_token_rows(batch, data);
    let total = good.len() + bad.len();
    if total == 0 {
        let zero = tape.constant(Array::scalar(0.0));
        return Ok(UnlikelihoodLoss { loss: zero, clamped: 0 });
    }
    let (logp, _) = policy.target_log_probs_on(tape, batch)?;
    let mut parts = Vec::new();
    let mut clamped = 0;
    if !good.is_empty() {
        let lp = tape.select_rows(logp, good)?;
        let s = tape.sum(lp);
        parts.push(tape.neg(s));
    }
    if !bad.is_empty() {
        let lp = tape.select_rows(logp, bad)?;
        let p = tape.exp(lp);
        clamped = tape.value(p).data().iter().filter(|&&x| x > UNLIKELY_CLAMP).count();
        let p = tape.clamp(p, 0.0, UNLIKELY_CLAMP);
        let q = tape.affine(p, -1.0, 1.0);
        let lq = tape.log(q);
        let s = tape.sum(lq);
        parts.push(tape.scale(s, -alpha));
    }
    let mut loss = parts[0];
    for &p in &parts[1..] {
        loss = tape.add(loss, p)?;
    }
    Ok(UnlikelihoodLoss {
        loss: tape.scale(loss, 1.0 / total as f64),
        clamped,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnlikelihoodReport {
    pub curve: Vec<f64>,
    pub clamped: usize,
}

/// Minibatch Adam on the unlikelihood objective over labeled answers.
pub fn unlikelihood_train(
    policy: &mut Policy,
    data: &[LabeledAnswer],
    cfg: &UnlikelihoodConfig,
) -> Result<UnlikelihoodReport> {
    if data.is_empty() {
        return Err(Error::Contract("unlikelihood training needs labeled answers".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = Vec::new();
    let mut report = UnlikelihoodReport {
        curve: Vec::with_capacity(cfg.steps),
        clamped: 0,
    };
    for _ in 0..cfg.steps {
        if order.len() < cfg.batch_size {
            let mut epoch: Vec<usize> = (0..data.len()).collect();
            epoch.shuffle(&mut rng);
            order.extend(epoch);
        }
        let take = cfg.batch_size.min(order.len());
        let items: Vec<&LabeledAnswer> = order.drain(..take).map(|i| &data[i]).collect();
        let mut batch = EpisodeBatch::new(policy.arch.window);
        for d in &items {
            batch.push(&policy.vocab, &d.prompt, &d.outline, &d.answer);
        }
        let (grads, value, clamped) = {
            let mut tape = Tape::new(&policy.store);
            let out = unlikelihood_loss_on(&mut tape, policy, &batch, &items, cfg.alpha)?;
            let value = tape.value(out.loss).item()?;
            (backward(&tape, out.loss)?, value, out.clamped)
        };
        if !value.is_finite() {
            return Err(Error::Diverged(format!("non-finite unlikelihood loss {value}")));
        }
        policy.store.zero_grads();
        policy.store.accumulate(&grads);
        adam_step(&mut policy.store, &cfg.adam);
        report.curve.push(value);
        report.clamped += clamped;
    }
    if report.clamped > 0 {
        log::info!("unlikelihood clamp engaged on {} tokens", report.clamped);
    }
    Ok(report)
}

/// Mean log-likelihood of the claim tokens that are not supported.
pub fn nonfactual_claim_loglik(policy: &Policy, data: &[LabeledAnswer]) -> Result<f64> {
    let episodes: Vec<_> = data
        .iter()
        .map(|d| (&d.prompt, d.outline.as_slice(), d.answer.as_slice()))
        .collect();
    let (mut total, mut n) = (0.0, 0usize);
    for (chunk_data, chunk) in data.chunks(256).zip(episodes.chunks(256)) {
        let lps = policy.logprob_batch(chunk)?;
        for (d, lp) in chunk_data.iter().zip(&lps) {
            let off = d.outline.len();
            for (positions, scores) in d.segmap.subclaim_positions.iter().zip(&d.labels.per_subclaim) {
                for (&t, &ok) in positions.iter().zip(scores) {
                    if !ok {
                        total += lp[off + t];
                        n += 1;
                    }
                }
            }
        }
    }
    Ok(if n == 0 { 0.0 } else { total / n as f64 })
}
