use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::{GenerationConfig, Policy};
use crate::segmentation::{segment_answer, AggKind, SegmentMap};
use crate::synthworld::{oracle_labels, FactualityLabels, Prompt, Token, VOCAB_VERSION};

/// An answer with its oracle labels at every granularity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledAnswer {
    pub prompt: Prompt,
    pub outline: Vec<Token>,
    pub answer: Vec<Token>,
    pub segmap: SegmentMap,
    pub labels: FactualityLabels,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RmDatasetConfig {
    pub size: usize,
    pub temperature: f64,
    pub seed: u64,
}

impl Default for RmDatasetConfig {
    fn default() -> Self {
        Self {
            size: 5000,
            temperature: 1.2,
            seed: 0,
        }
    }
}

/// Samples `cfg.size` episodes from `policy` over `prompts` (cycled) and
/// labels each answer with the oracle.
pub fn generate_rm_dataset(policy: &Policy, prompts: &[Prompt], cfg: &RmDatasetConfig) -> Result<Vec<LabeledAnswer>> {
    if prompts.is_empty() {
        return Err(Error::Contract("no prompts to sample answers for".into()));
    }
    let gen = GenerationConfig::sampling(cfg.temperature);
    let mut out = Vec::with_capacity(cfg.size);
    let mut next = 0usize;
    while out.len() < cfg.size {
        let n = (cfg.size - out.len()).min(256);
        let batch: Vec<&Prompt> = (next..next + n).map(|i| &prompts[i % prompts.len()]).collect();
        let seeds: Vec<u64> = (next..next + n)
            .map(|i| cfg.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(i as u64))
            .collect();
        for r in policy.sample_episodes(&batch, &gen, &seeds)? {
            let segmap = segment_answer(&policy.vocab, &r.answer)?;
            let labels = oracle_labels(&policy.vocab, &r.prompt.context, &r.answer, &segmap, AggKind::Min)?;
            out.push(LabeledAnswer {
                prompt: r.prompt,
                outline: r.outline,
                answer: r.answer,
                segmap,
                labels,
            });
        }
        next += n;
    }
    Ok(out)
}

#[derive(Debug, Serialize, Deserialize)]
struct LabeledHeader {
    vocab_version: u32,
    count: usize,
}

pub fn write_labeled<W: Write>(mut out: W, data: &[LabeledAnswer]) -> Result<()> {
    serde_json::to_writer(
        &mut out,
        &LabeledHeader {
            vocab_version: VOCAB_VERSION,
            count: data.len(),
        },
    )?;
    out.write_all(b"\n")?;
    for d in data {
        serde_json::to_writer(&mut out, d)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_labeled<R: BufRead>(input: R) -> Result<Vec<LabeledAnswer>> {
    let mut lines = input.lines();
    let first = lines
        .next()
        .ok_or_else(|| Error::Structural("empty labeled dataset".into()))??;
    let header: LabeledHeader = serde_json::from_str(&first)?;
    if header.vocab_version != VOCAB_VERSION {
        return Err(Error::Manifest(format!(
            "labeled dataset vocabulary version {} differs from {VOCAB_VERSION}",
            header.vocab_version
        )));
    }
    let mut data = Vec::with_capacity(header.count);
    for line in lines {
        let line = line?;
        if !line.is_empty() {
            data.push(serde_json::from_str(&line)?);
        }
    }
    if data.len() != header.count {
        return Err(Error::Structural(format!(
            "header announces {} records, file holds {}",
            header.count,
            data.len()
        )));
    }
    Ok(data)
}
