//! Model-agnostic decoding: ancestral sampling and length-normalized beam
//! search over anything that maps prefixes to next-token logits.

use std::cmp::Ordering;

use rand::Rng;

use crate::error::{Error, Result};
use crate::numeric::log_sum_exp;
use crate::synthworld::Token;

/// A next-token model over independent lanes (one lane per prompt).
pub trait StepModel {
    fn vocab_size(&self) -> usize;

    /// Logits for the token following each `(lane, prefix)`.
    fn logits(&self, queries: &[(usize, &[Token])]) -> Result<Vec<Vec<f64>>>;
}

/// `log_softmax(logits / temperature)`.
pub fn tempered_log_probs(logits: &[f64], temperature: f64) -> Vec<f64> {
    let z: Vec<f64> = logits.iter().map(|&x| x / temperature).collect();
    let lse = log_sum_exp(&z);
    z.into_iter().map(|x| x - lse).collect()
}

/// Draws an index from `exp(log_probs)` by inverse CDF.
pub fn sample_index<R: Rng + ?Sized>(log_probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &lp) in log_probs.iter().enumerate() {
        let p = lp.exp();
        if p > 0.0 {
            last = i;
        }
        acc += p;
        if u < acc {
            return i;
        }
    }
    last
}

/// One decoded continuation.
#[derive(Debug, Clone, PartialEq)]
pub struct Decoded {
    pub tokens: Vec<Token>,
    pub log_probs: Vec<f64>,
    /// `true` when decoding ended on the stop token rather than the cap.
    pub stopped: bool,
}

/// Samples every lane step-synchronously; lane `i` draws from `rngs[i]`
/// only, so its output does not depend on the other lanes.
pub fn sample<M: StepModel, R: Rng>(
    model: &M,
    rngs: &mut [R],
    stop: Token,
    max_len: usize,
    temperature: f64,
) -> Result<Vec<Decoded>> {
    let mut out: Vec<Decoded> = (0..rngs.len())
        .map(|_| Decoded {
            tokens: Vec::new(),
            log_probs: Vec::new(),
            stopped: false,
        })
        .collect();
    for _ in 0..max_len {
        let active: Vec<usize> = (0..out.len()).filter(|&i| !out[i].stopped).collect();
        if active.is_empty() {
            break;
        }
        let queries: Vec<(usize, &[Token])> = active.iter().map(|&i| (i, out[i].tokens.as_slice())).collect();
        let logits = model.logits(&queries)?;
        for (&lane, row) in active.iter().zip(logits) {
            let lp = tempered_log_probs(&row, temperature);
            let next = sample_index(&lp, &mut rngs[lane]);
            let d = &mut out[lane];
            d.tokens.push(Token(next as u32));
            d.log_probs.push(lp[next]);
            d.stopped = next == stop.index();
        }
    }
    Ok(out)
}

/// Greedy argmax decoding; ties go to the lower token id.
pub fn greedy<M: StepModel>(model: &M, lanes: usize, stop: Token, max_len: usize) -> Result<Vec<Decoded>> {
    let mut out: Vec<Decoded> = (0..lanes)
        .map(|_| Decoded {
            tokens: Vec::new(),
            log_probs: Vec::new(),
            stopped: false,
        })
        .collect();
    for _ in 0..max_len {
        let active: Vec<usize> = (0..lanes).filter(|&i| !out[i].stopped).collect();
        if active.is_empty() {
            break;
        }
        let queries: Vec<(usize, &[Token])> = active.iter().map(|&i| (i, out[i].tokens.as_slice())).collect();
        let logits = model.logits(&queries)?;
        for (&lane, row) in active.iter().zip(logits) {
            let lp = tempered_log_probs(&row, 1.0);
            let mut best = 0;
            for (i, &x) in lp.iter().enumerate() {
                if x > lp[best] {
                    best = i;
                }
            }
            let d = &mut out[lane];
            d.tokens.push(Token(best as u32));
            d.log_probs.push(lp[best]);
            d.stopped = best == stop.index();
        }
    }
    Ok(out)
}

#[derive(Debug, Clone)]
struct Hypothesis {
    tokens: Vec<Token>,
    log_probs: Vec<f64>,
    total: f64,
    finished: bool,
}

impl Hypothesis {
    fn score(&self, length_penalty: f64) -> f64 {
        self.total / (self.tokens.len().max(1) as f64).powf(length_penalty)
    }
}

/// Higher score first, then lexicographically lower ids, then shorter.
fn rank(a: &Hypothesis, b: &Hypothesis, length_penalty: f64) -> Ordering {
    b.score(length_penalty)
        .partial_cmp(&a.score(length_penalty))
        .unwrap_or(Ordering::Equal)
        .then_with(|| a.tokens.cmp(&b.tokens))
}

/// Beam search per lane with score `sum log p / len^length_penalty`.
/// Finished hypotheses compete with expansions until every kept beam has
/// stopped or reached `max_len`.
pub fn beam_search<M: StepModel>(
    model: &M,
    lanes: usize,
    width: usize,
    stop: Token,
    max_len: usize,
    length_penalty: f64,
) -> Result<Vec<Decoded>> {
    if width == 0 {
        return Err(Error::Config("beam width must be at least 1".into()));
    }
    let mut beams: Vec<Vec<Hypothesis>> = (0..lanes)
        .map(|_| {
            vec![Hypothesis {
                tokens: Vec::new(),
                log_probs: Vec::new(),
                total: 0.0,
                finished: max_len == 0,
            }]
        })
        .collect();
    loop {
        let mut queries: Vec<(usize, &[Token])> = Vec::new();
        let mut owners: Vec<(usize, usize)> = Vec::new();
        for (lane, hyps) in beams.iter().enumerate() {
            for (h, hyp) in hyps.iter().enumerate() {
                if !hyp.finished {
                    queries.push((lane, hyp.tokens.as_slice()));
                    owners.push((lane, h));
                }
            }
        }
        if queries.is_empty() {
            break;
        }
        let logits = model.logits(&queries)?;
        let mut candidates: Vec<Vec<Hypothesis>> = beams
            .iter()
            .map(|hyps| hyps.iter().filter(|h| h.finished).cloned().collect())
            .collect();
        for (&(lane, h), row) in owners.iter().zip(logits) {
            let parent = &beams[lane][h];
            let lp = tempered_log_probs(&row, 1.0);
            for (v, &x) in lp.iter().enumerate() {
                if x == f64::NEG_INFINITY {
                    continue;
                }
                let mut tokens = parent.tokens.clone();
                tokens.push(Token(v as u32));
                let mut log_probs = parent.log_probs.clone();
                log_probs.push(x);
                let finished = v == stop.index() || tokens.len() >= max_len;
                candidates[lane].push(Hypothesis {
                    tokens,
                    log_probs,
                    total: parent.total + x,
                    finished,
                });
            }
        }
        for (lane, mut cands) in candidates.into_iter().enumerate() {
            cands.sort_by(|a, b| rank(a, b, length_penalty));
            cands.truncate(width);
            beams[lane] = cands;
        }
    }
    Ok(beams
        .into_iter()
        .map(|mut hyps| {
            hyps.sort_by(|a, b| rank(a, b, length_penalty));
            let best = hyps.swap_remove(0);
            let stopped = best.tokens.last() == Some(&stop);
            Decoded {
                tokens: best.tokens,
                log_probs: best.log_probs,
                stopped,
            }
        })
        .collect())
}
