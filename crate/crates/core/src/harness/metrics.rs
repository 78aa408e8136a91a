use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::{GenerationConfig, Policy};
use crate::segmentation::{segment_answer, AggKind, SegmentMap};
use crate::synthworld::{
    oracle_labels, EnvSample, FactualityLabels, Prompt, Token, TokenKind, Vocab, EOS, OUTLINE_END, SENT_END,
};

/// Scores an answer at all three granularities.
pub trait Judge {
    fn judge(&self, prompt: &Prompt, answer: &[Token], segmap: &SegmentMap) -> Result<FactualityLabels>;
}

/// Exact membership judge.
#[derive(Debug, Clone, Copy)]
pub struct OracleJudge {
    pub vocab: Vocab,
}

impl Judge for OracleJudge {
    fn judge(&self, prompt: &Prompt, answer: &[Token], segmap: &SegmentMap) -> Result<FactualityLabels> {
        oracle_labels(&self.vocab, &prompt.context, answer, segmap, AggKind::Min)
    }
}

/// Placeholder for an external judging service; always refuses.
#[derive(Debug, Clone, Default)]
pub struct RemoteJudge {
    pub endpoint: Option<String>,
}

impl Judge for RemoteJudge {
    fn judge(&self, _: &Prompt, _: &[Token], _: &SegmentMap) -> Result<FactualityLabels> {
        Err(Error::NotConfigured(match &self.endpoint {
            Some(e) => format!("remote judge at {e} is not implemented"),
            None => "remote judge endpoint".into(),
        }))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub fact_q: f64,
    pub fact_s: f64,
    pub coverage: f64,
    pub structure_valid: f64,
    pub avg_len: f64,
}

/// Per-sample evaluation outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub index: usize,
    pub outline: Vec<Token>,
    pub answer: Vec<Token>,
    pub labels: FactualityLabels,
    pub supported: usize,
    pub covered: usize,
    pub structure_ok: bool,
}

/// `[pattern, topic*, OUTLINE_END]`.
pub fn outline_well_formed(vocab: &Vocab, outline: &[Token]) -> bool {
    let n = outline.len();
    n >= 2
        && vocab.is_pattern(outline[0])
        && outline[n - 1] == OUTLINE_END
        && outline[1..n - 1]
            .iter()
            .all(|&t| matches!(vocab.kind(t), Some(TokenKind::Topic(_))))
}

/// `([claim+, SENT_END])* EOS` with no claim repeated.
pub fn answer_well_formed(vocab: &Vocab, answer: &[Token]) -> bool {
    let Some((&last, body)) = answer.split_last() else {
        return false;
    };
    if last != EOS {
        return false;
    }
    let mut seen = std::collections::HashSet::new();
    let mut open = 0usize;
    for &t in body {
        if t == SENT_END {
            if open == 0 {
                return false;
            }
            open = 0;
        } else if vocab.claim_of(t).is_some() {
            if !seen.insert(t) {
                return false;
            }
            open += 1;
        } else {
            return false;
        }
    }
    open == 0
}

/// Supported aspects whose context value the answer asserts.
pub fn covered_aspects(vocab: &Vocab, prompt: &Prompt, answer: &[Token]) -> usize {
    prompt
        .context
        .supported_aspects
        .iter()
        .filter(|&&a| {
            prompt
                .context
                .supporting_triple(prompt.query.entity, a)
                .is_some_and(|t| answer.contains(&vocab.claim(t)))
        })
        .count()
}

pub fn record_for(
    judge: &dyn Judge,
    vocab: &Vocab,
    index: usize,
    prompt: &Prompt,
    outline: &[Token],
    answer: &[Token],
    outline_truncated: bool,
) -> Result<SampleRecord> {
    let segmap = segment_answer(vocab, answer)?;
    let labels = judge.judge(prompt, answer, &segmap)?;
    Ok(SampleRecord {
        index,
        outline: outline.to_vec(),
        answer: answer.to_vec(),
        labels,
        supported: prompt.context.supported_aspects.len(),
        covered: covered_aspects(vocab, prompt, answer),
        structure_ok: !outline_truncated && outline_well_formed(vocab, outline) && answer_well_formed(vocab, answer),
    })
}

/// Micro-averaged metrics; an empty denominator counts as fully satisfied.
pub fn aggregate_records(records: &[SampleRecord]) -> MetricsRow {
    let n = records.len().max(1) as f64;
    let ratio = |num: usize, den: usize| if den == 0 { 1.0 } else { num as f64 / den as f64 };
    let sentences: usize = records.iter().map(|r| r.labels.num_sentences()).sum();
    let factual: usize = records.iter().map(|r| r.labels.factual_sentences()).sum();
    MetricsRow {
        fact_q: records.iter().filter(|r| r.labels.holistic).count() as f64 / n,
        fact_s: ratio(factual, sentences),
        coverage: ratio(
            records.iter().map(|r| r.covered).sum(),
            records.iter().map(|r| r.supported).sum(),
        ),
        structure_valid: records.iter().filter(|r| r.structure_ok).count() as f64 / n,
        avg_len: records.iter().map(|r| r.answer.len()).sum::<usize>() as f64 / n,
    }
}

/// Two-stage beam generation on every sample, judged and aggregated.
pub fn eval_policy(
    policy: &Policy,
    samples: &[EnvSample],
    judge: &dyn Judge,
    cfg: &GenerationConfig,
) -> Result<(MetricsRow, Vec<SampleRecord>)> {
    if samples.is_empty() {
        return Err(Error::Contract("evaluation needs at least one sample".into()));
    }
    let prompts: Vec<Prompt> = samples.iter().map(|s| s.prompt()).collect();
    let mut records = Vec::with_capacity(samples.len());
    for (c, chunk) in prompts.chunks(64).enumerate() {
        let refs: Vec<&Prompt> = chunk.iter().collect();
        let gens = policy.two_stage_batch(&refs, cfg)?;
        for (i, (p, g)) in chunk.iter().zip(gens).enumerate() {
            records.push(record_for(
                judge,
                &policy.vocab,
                c * 64 + i,
                p,
                &g.outline,
                &g.answer,
                g.outline_truncated,
            )?);
        }
    }
    Ok((aggregate_records(&records), records))
}
