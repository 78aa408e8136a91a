//! Reward models at sequence and token granularity, their training losses
//! for every (evaluation, model) granularity pair, and reward normalization.

mod dataset;

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::checkpoint::{self, Header};
use crate::numeric::{adam_step, backward, AdamConfig, Array, ParamStore, Tape, Var};
use crate::policy::conditioner::{self, Architecture, Rows, Stage};
use crate::policy::{check_layout, expect_kind, vocab_from_header, vocab_header};
use crate::segmentation::{aggregate, AggKind, SegmentMap};
use crate::synthworld::{FactualityLabels, Prompt, Token, Vocab};

pub use dataset::{generate_rm_dataset, read_labeled, write_labeled, LabeledAnswer, RmDatasetConfig};

/// What the labels describe.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalGranularity {
    Holistic,
    Sentence,
    Subclaim,
}

/// Where the model emits scores.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelGranularity {
    Sequence,
    Token,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RmGranularity {
    pub eval: EvalGranularity,
    pub model: ModelGranularity,
    /// Aggregates token scores within a segment (token models only).
    pub agg_t: AggKind,
    /// Aggregates subclaim labels into a sentence target (subclaim only).
    pub agg_j: AggKind,
}

impl RmGranularity {
    pub fn new(eval: EvalGranularity, model: ModelGranularity) -> Self {
        Self {
            eval,
            model,
            agg_t: AggKind::Avg,
            agg_j: AggKind::Avg,
        }
    }

    /// The six pairs, evaluation-major.
    pub fn all() -> [RmGranularity; 6] {
        use EvalGranularity::*;
        use ModelGranularity::*;
        [
            Self::new(Holistic, Sequence),
            Self::new(Holistic, Token),
            Self::new(Sentence, Sequence),
            Self::new(Sentence, Token),
            Self::new(Subclaim, Sequence),
            Self::new(Subclaim, Token),
        ]
    }

    pub fn label(&self) -> String {
        let e = match self.eval {
            EvalGranularity::Holistic => "holistic",
            EvalGranularity::Sentence => "sentence",
            EvalGranularity::Subclaim => "subclaim",
        };
        let m = match self.model {
            ModelGranularity::Sequence => "seq",
            ModelGranularity::Token => "tok",
        };
        format!("{e}/{m}")
    }

    /// The segmentation rewards are aligned to.
    pub fn segments(&self, segmap: &SegmentMap) -> SegmentMap {
        match self.eval {
            EvalGranularity::Holistic => segmap.holistic(),
            _ => segmap.clone(),
        }
    }

    /// Per-segment training targets.
    pub fn targets(&self, labels: &FactualityLabels) -> Vec<f64> {
        match self.eval {
            EvalGranularity::Holistic => vec![labels.holistic as u8 as f64],
            EvalGranularity::Sentence => labels.sentence_scores(),
            EvalGranularity::Subclaim => labels.subclaim_scores(self.agg_j),
        }
    }
}

/// Per-segment scores `R̂[1..L]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardVector {
    pub scores: Vec<f64>,
}

impl RewardVector {
    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }
}

/// What gets subtracted from a multi-segment reward.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum NormalizeMode {
    #[default]
    Mean,
    FinalSegment,
    Zero,
}

/// Shifts every segment score by one baseline scalar taken from the SFT
/// answer's reward vector.
pub fn normalize_reward(raw: &RewardVector, baseline: &RewardVector, mode: NormalizeMode) -> RewardVector {
    let b = match mode {
        NormalizeMode::Mean if !baseline.is_empty() => baseline.scores.iter().sum::<f64>() / baseline.len() as f64,
        NormalizeMode::FinalSegment => baseline.scores.last().copied().unwrap_or(0.0),
        _ => 0.0,
    };
    RewardVector {
        scores: raw.scores.iter().map(|s| s - b).collect(),
    }
}

const PROB_FLOOR: f64 = 1e-15;

fn check_targets(gran: &RmGranularity, pred_len: usize, targets: &[f64]) -> Result<()> {
    if pred_len != targets.len() {
        return Err(Error::Structural(format!(
            "{} predictions for {} targets",
            pred_len,
            targets.len()
        )));
    }
    if gran.eval != EvalGranularity::Subclaim {
        if let Some(t) = targets.iter().find(|&&t| t != 0.0 && t != 1.0) {
            return Err(Error::Contract(format!("log-loss target {t} is not binary")));
        }
    }
    Ok(())
}

/// Summed per-segment loss: log-loss for holistic and sentence labels,
/// squared error against the aggregated subclaim target otherwise.
pub fn rm_training_loss(gran: &RmGranularity, pred: &RewardVector, targets: &[f64]) -> Result<f64> {
    check_targets(gran, pred.len(), targets)?;
    Ok(pred
        .scores
        .iter()
        .zip(targets)
        .map(|(&p, &y)| match gran.eval {
            EvalGranularity::Subclaim => (p - y) * (p - y),
            _ if y == 1.0 => -p.clamp(PROB_FLOOR, 1.0).ln(),
            _ => -(1.0 - p).clamp(PROB_FLOOR, 1.0).ln(),
        })
        .sum())
}

/// Tape version of [`rm_training_loss`] over a `[L, 1]` prediction column.
pub fn rm_training_loss_on(tape: &mut Tape<'_>, gran: &RmGranularity, pred: Var, targets: &[f64]) -> Result<Var> {
    check_targets(gran, tape.value(pred).len(), targets)?;
    if gran.eval == EvalGranularity::Subclaim {
        let y = tape.constant(Array::column(targets.to_vec()));
        let d = tape.sub(pred, y)?;
        let sq = tape.mul(d, d)?;
        return Ok(tape.sum(sq));
    }
    let pos: Vec<usize> = (0..targets.len()).filter(|&i| targets[i] == 1.0).collect();
    let neg: Vec<usize> = (0..targets.len()).filter(|&i| targets[i] == 0.0).collect();
    let mut total = tape.scalar(0.0);
    if !pos.is_empty() {
        let p = tape.select_rows(pred, pos)?;
        let p = tape.clamp(p, PROB_FLOOR, 1.0);
        let lp = tape.log(p);
        let s = tape.sum(lp);
        total = tape.sub(total, s)?;
    }
    if !neg.is_empty() {
        let p = tape.select_rows(pred, neg)?;
        let q = tape.affine(p, -1.0, 1.0);
        let q = tape.clamp(q, PROB_FLOOR, 1.0);
        let lq = tape.log(q);
        let s = tape.sum(lq);
        total = tape.sub(total, s)?;
    }
    Ok(total)
}

/// One answer to score.
#[derive(Debug, Clone, Copy)]
pub struct ScoreItem<'a> {
    pub prompt: &'a Prompt,
    pub answer: &'a [Token],
    pub segmap: &'a SegmentMap,
}

/// `R̂_φ`: a conditioner trunk with interaction features, a sequence head
/// and a token head, both squashed by a sigmoid.
#[derive(Debug, Clone, PartialEq)]
pub struct RewardModel {
    pub vocab: Vocab,
    pub arch: Architecture,
    pub store: ParamStore,
}

/// Per-item outputs of a batched forward pass.
pub struct ScoredBatch {
    /// Segment scores of every item stacked, `[sum L, 1]`.
    pub segment_scores: Var,
    /// Row range of each item's segments inside `segment_scores`.
    pub segment_spans: Vec<std::ops::Range<usize>>,
    /// Token scores of every item stacked, `[sum T, 1]` (token models).
    pub token_scores: Option<Var>,
    pub token_spans: Vec<std::ops::Range<usize>>,
}

impl RewardModel {
    pub fn default_arch() -> Architecture {
        Architecture {
            interactions: true,
            hidden: 128,
            ..Architecture::default()
        }
    }

    /// Random trunk, zero heads (every score 1/2).
    pub fn new(vocab: Vocab, arch: Architecture, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        conditioner::init(&mut store, &arch, vocab.size(), &mut rng)?;
        for head in ["seq", "tok"] {
            store.insert(&format!("{head}.w"), Array::zeros(&[arch.hidden, 1]))?;
            store.insert(&format!("{head}.b"), Array::zeros(&[1, 1]))?;
        }
        Ok(Self { vocab, arch, store })
    }

    /// Rows for every answer position; row `t` has consumed tokens `..=t`.
    fn rows(&self, items: &[ScoreItem<'_>]) -> Result<(Rows, Vec<usize>)> {
        let mut rows = Rows::new(self.arch.window);
        let mut offsets = Vec::with_capacity(items.len());
        for it in items {
            it.segmap.check_len(it.answer.len())?;
            if let Some(t) = it.answer.iter().find(|t| !self.vocab.contains(**t)) {
                return Err(Error::Structural(format!("token id {} outside vocabulary", t.0)));
            }
            offsets.push(rows.len());
            for t in 0..it.answer.len() {
                rows.push(&self.vocab, it.prompt, Stage::Answer, &[], &it.answer[..=t]);
            }
        }
        Ok((rows, offsets))
    }

    /// Segment scores for every item under `gran`, on `tape`.
    pub fn score_on(&self, tape: &mut Tape<'_>, items: &[ScoreItem<'_>], gran: &RmGranularity) -> Result<ScoredBatch> {
        let (rows, offsets) = self.rows(items)?;
        let h = conditioner::forward(tape, &self.arch, &rows)?;
        let mut segment_spans = Vec::with_capacity(items.len());
        let mut token_spans = Vec::with_capacity(items.len());
        match gran.model {
            ModelGranularity::Sequence => {
                let mut picks = Vec::new();
                for (it, &off) in items.iter().zip(&offsets) {
                    let seg = gran.segments(it.segmap);
                    let start = picks.len();
                    picks.extend(seg.sentence_ends.iter().map(|&t| off + t));
                    segment_spans.push(start..picks.len());
                    token_spans.push(off..off + it.answer.len());
                }
                let at_ends = tape.select_rows(h, picks)?;
                let z = conditioner::linear(tape, at_ends, "seq")?;
                Ok(ScoredBatch {
                    segment_scores: tape.sigmoid(z),
                    segment_spans,
                    token_scores: None,
                    token_spans,
                })
            }
            ModelGranularity::Token => {
                let z = conditioner::linear(tape, h, "tok")?;
                let tok = tape.sigmoid(z);
                let mut groups = Vec::new();
                for (it, &off) in items.iter().zip(&offsets) {
                    let seg = gran.segments(it.segmap);
                    let start = groups.len();
                    groups.extend(
                        seg.spans
                            .iter()
                            .map(|span| span.iter().map(|&t| off + t).collect::<Vec<_>>()),
                    );
                    segment_spans.push(start..groups.len());
                    token_spans.push(off..off + it.answer.len());
                }
                Ok(ScoredBatch {
                    segment_scores: tape.segment_reduce(tok, groups, gran.agg_t.into())?,
                    segment_spans,
                    token_scores: Some(tok),
                    token_spans,
                })
            }
        }
    }

    /// Reward vectors for a batch of answers.
    pub fn score_batch(&self, items: &[ScoreItem<'_>], gran: &RmGranularity) -> Result<Vec<RewardVector>> {
        if items.is_empty() {
            return Ok(Vec::new());
        }
        let mut tape = Tape::new(&self.store);
        let out = self.score_on(&mut tape, items, gran)?;
        let s = tape.value(out.segment_scores).data();
        Ok(out
            .segment_spans
            .iter()
            .map(|r| RewardVector {
                scores: s[r.clone()].to_vec(),
            })
            .collect())
    }

    /// Sequence-head scores read at each segment end of `gran`.
    pub fn rm_seq_scores(
        &self,
        prompt: &Prompt,
        answer: &[Token],
        segmap: &SegmentMap,
        eval: EvalGranularity,
    ) -> Result<RewardVector> {
        let gran = RmGranularity::new(eval, ModelGranularity::Sequence);
        Ok(self
            .score_batch(&[ScoreItem { prompt, answer, segmap }], &gran)?
            .remove(0))
    }

    /// Token-head scores at every position plus their per-segment
    /// aggregates.
    pub fn rm_token_scores(
        &self,
        prompt: &Prompt,
        answer: &[Token],
        segmap: &SegmentMap,
        eval: EvalGranularity,
        agg_t: AggKind,
    ) -> Result<(Vec<f64>, RewardVector)> {
        let gran = RmGranularity {
            agg_t,
            ..RmGranularity::new(eval, ModelGranularity::Token)
        };
        let mut tape = Tape::new(&self.store);
        let out = self.score_on(&mut tape, &[ScoreItem { prompt, answer, segmap }], &gran)?;
        let tokens = tape.value(out.token_scores.expect("token model")).data().to_vec();
        let scores = tape.value(out.segment_scores).data().to_vec();
        Ok((tokens, RewardVector { scores }))
    }

    pub fn header(&self, gran: &RmGranularity) -> Header {
        let mut h = Header::new();
        h.insert("kind".into(), "reward".into());
        vocab_header(&self.vocab, &mut h);
        self.arch.to_header(&mut h);
        h.insert(
            "granularity".into(),
            serde_json::to_string(gran).expect("plain enum fields"),
        );
        h
    }

    pub fn to_bytes(&self, gran: &RmGranularity) -> Vec<u8> {
        checkpoint::to_bytes(&self.store, &self.header(gran))
    }

    pub fn from_bytes(buf: &[u8]) -> Result<(Self, RmGranularity)> {
        let (store, header) = checkpoint::from_bytes(buf)?;
        expect_kind(&header, "reward")?;
        let vocab = vocab_from_header(&header)?;
        let arch = Architecture::from_header(&header)?;
        let gran: RmGranularity = serde_json::from_str(
            header
                .get("granularity")
                .ok_or_else(|| Error::Manifest("reward checkpoint lacks its granularity".into()))?,
        )?;
        check_layout(&RewardModel::new(vocab, arch, 0)?.store, &store)?;
        Ok((Self { vocab, arch, store }, gran))
    }

    pub fn save(&self, gran: &RmGranularity, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes(gran))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<(Self, RmGranularity)> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RmTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub holdout_fraction: f64,
    pub seed: u64,
}

impl Default for RmTrainConfig {
    fn default() -> Self {
        Self {
            steps: 1500,
            batch_size: 64,
            adam: AdamConfig {
                max_grad_norm: Some(1.0),
                ..AdamConfig::with_lr(2e-3)
            },
            holdout_fraction: 0.1,
            seed: 0,
        }
    }
}

/// Held-out quality: accuracy at 1/2 for binary targets, mean absolute
/// error for continuous ones.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum HeldOut {
    Accuracy(f64),
    MeanAbsError(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RmReport {
    pub curve: Vec<f64>,
    pub held_out: HeldOut,
    pub train_size: usize,
    pub held_out_size: usize,
}

fn items_of<'a>(data: &'a [&'a LabeledAnswer]) -> Vec<ScoreItem<'a>> {
    data.iter()
        .map(|d| ScoreItem {
            prompt: &d.prompt,
            answer: &d.answer,
            segmap: &d.segmap,
        })
        .collect()
}

/// Mean per-answer loss over `batch`; leaves gradients in the store.
pub fn rm_loss_gradient(rm: &mut RewardModel, batch: &[&LabeledAnswer], gran: &RmGranularity) -> Result<f64> {
    let items = items_of(batch);
    let targets: Vec<f64> = batch.iter().flat_map(|d| gran.targets(&d.labels)).collect();
    let (grads, value) = {
        let mut tape = Tape::new(&rm.store);
        let out = rm.score_on(&mut tape, &items, gran)?;
        let total = rm_training_loss_on(&mut tape, gran, out.segment_scores, &targets)?;
        let loss = tape.scale(total, 1.0 / batch.len() as f64);
        let value = tape.value(loss).item()?;
        if !value.is_finite() {
            return Err(Error::Diverged(format!("non-finite reward-model loss {value}")));
        }
        (backward(&tape, loss)?, value)
    };
    rm.store.accumulate(&grads);
    Ok(value)
}

pub fn evaluate_rm(rm: &RewardModel, data: &[&LabeledAnswer], gran: &RmGranularity) -> Result<HeldOut> {
    let mut hits = 0usize;
    let mut abs = 0.0;
    let mut n = 0usize;
    for chunk in data.chunks(256) {
        let preds = rm.score_batch(&items_of(chunk), gran)?;
        for (p, d) in preds.iter().zip(chunk) {
            for (&s, y) in p.scores.iter().zip(gran.targets(&d.labels)) {
                hits += ((s >= 0.5) == (y >= 0.5)) as usize;
                abs += (s - y).abs();
                n += 1;
            }
        }
    }
    let n = n.max(1) as f64;
    Ok(match gran.eval {
        EvalGranularity::Subclaim => HeldOut::MeanAbsError(abs / n),
        _ => HeldOut::Accuracy(hits as f64 / n),
    })
}

/// Minibatch Adam on the granularity's loss, holding out the last
/// `holdout_fraction` of a seeded shuffle for evaluation.
pub fn train_reward_model(
    rm: &mut RewardModel,
    dataset: &[LabeledAnswer],
    gran: &RmGranularity,
    cfg: &RmTrainConfig,
) -> Result<RmReport> {
    if dataset.is_empty() {
        return Err(Error::Contract(
            "reward-model training needs a non-empty dataset".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut idx: Vec<usize> = (0..dataset.len()).collect();
    idx.shuffle(&mut rng);
    let held = ((dataset.len() as f64 * cfg.holdout_fraction).round() as usize).min(dataset.len() - 1);
    let (train_idx, held_idx) = idx.split_at(dataset.len() - held);
    let train: Vec<&LabeledAnswer> = train_idx.iter().map(|&i| &dataset[i]).collect();
    let held_out: Vec<&LabeledAnswer> = held_idx.iter().map(|&i| &dataset[i]).collect();

    let mut order: Vec<usize> = Vec::new();
    let mut curve = Vec::with_capacity(cfg.steps);
    for _ in 0..cfg.steps {
        if order.len() < cfg.batch_size {
            let mut epoch: Vec<usize> = (0..train.len()).collect();
            epoch.shuffle(&mut rng);
            order.extend(epoch);
        }
        let take = cfg.batch_size.min(order.len());
        let batch: Vec<&LabeledAnswer> = order.drain(..take).map(|i| train[i]).collect();
        rm.store.zero_grads();
        curve.push(rm_loss_gradient(rm, &batch, gran)?);
        adam_step(&mut rm.store, &cfg.adam);
    }
    let eval_set = if held_out.is_empty() { &train } else { &held_out };
    Ok(RmReport {
        curve,
        held_out: evaluate_rm(rm, eval_set, gran)?,
        train_size: train.len(),
        held_out_size: held_out.len(),
    })
}

/// Oracle segment scores at a granularity: the exact analog of a reward
/// model's output.
pub fn oracle_reward(gran: &RmGranularity, labels: &FactualityLabels) -> RewardVector {
    RewardVector {
        scores: gran.targets(labels),
    }
}

/// Aggregates per-token scores into segments, outside any tape.
pub fn aggregate_segments(token_scores: &[f64], segmap: &SegmentMap, agg_t: AggKind) -> RewardVector {
    RewardVector {
        scores: segmap
            .spans
            .iter()
            .map(|span| {
                let xs: Vec<f64> = span.iter().map(|&t| token_scores[t]).collect();
                aggregate(&xs, agg_t)
            })
            .collect(),
    }
}

#[cfg(test)]
mod tests;
