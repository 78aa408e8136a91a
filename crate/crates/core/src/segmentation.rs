//! Sentence segmentation of answer token sequences, structural subclaim
//! decomposition, and the average/minimum/maximum aggregation functions.
//!
//! Boundaries come from structural tokens only:
//!
//! * a `SENT_END` closes the current sentence at its own position;
//! * tokens after the last `SENT_END` form a final sentence;
//! * the terminating `EOS`, or the last token of a trailing unterminated
//!   outline fragment, belongs to the final sentence, so the last segment
//!   always ends on the answer's final token;
//! * tokens from a pattern token through the next `OUTLINE_END` are outline
//!   and belong to no sentence.
//!
//! Every claim token is a subclaim.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::Reduce;
use crate::synthworld::{FactTriple, Token, TokenKind, Vocab};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum AggKind {
    #[default]
    #[serde(alias = "average", alias = "mean")]
    Avg,
    #[serde(alias = "minimum")]
    Min,
    #[serde(alias = "maximum")]
    Max,
}

impl From<AggKind> for Reduce {
    fn from(a: AggKind) -> Self {
        match a {
            AggKind::Avg => Reduce::Mean,
            AggKind::Min => Reduce::Min,
            AggKind::Max => Reduce::Max,
        }
    }
}

impl std::fmt::Display for AggKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            AggKind::Avg => "avg",
            AggKind::Min => "min",
            AggKind::Max => "max",
        })
    }
}

/// Mean, minimum or maximum; the empty sequence aggregates to the vacuous 1.0.
pub fn aggregate(values: &[f64], agg: AggKind) -> f64 {
    if values.is_empty() {
        return 1.0;
    }
    match agg {
        AggKind::Avg => values.iter().sum::<f64>() / values.len() as f64,
        AggKind::Min => values.iter().copied().fold(f64::INFINITY, f64::min),
        AggKind::Max => values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
    }
}

/// Sentence layout of an answer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentMap {
    /// Answer length the map was built for.
    pub len: usize,
    /// `T_1 < ... < T_L`: position of each segment's final token.
    pub sentence_ends: Vec<usize>,
    /// All positions of each segment, ascending.
    pub spans: Vec<Vec<usize>>,
    /// Positions of claim tokens in each segment, ascending.
    pub subclaim_positions: Vec<Vec<usize>>,
}

impl SegmentMap {
    pub fn num_segments(&self) -> usize {
        self.sentence_ends.len()
    }

    /// One segment covering every position of `answer` that some sentence
    /// covers, ending at the final token: the holistic view.
    pub fn holistic(&self) -> SegmentMap {
        let span: Vec<usize> = self.spans.iter().flatten().copied().collect();
        let claims: Vec<usize> = self.subclaim_positions.iter().flatten().copied().collect();
        SegmentMap {
            len: self.len,
            sentence_ends: vec![*self.sentence_ends.last().expect("L >= 1")],
            spans: vec![span],
            subclaim_positions: vec![claims],
        }
    }

    /// The same layout with every position moved right by `by`.
    pub fn shifted(&self, by: usize) -> SegmentMap {
        let shift = |v: &Vec<usize>| v.iter().map(|p| p + by).collect::<Vec<_>>();
        SegmentMap {
            len: self.len + by,
            sentence_ends: shift(&self.sentence_ends),
            spans: self.spans.iter().map(shift).collect(),
            subclaim_positions: self.subclaim_positions.iter().map(shift).collect(),
        }
    }

    /// Checks that the map fits an answer of length `len`.
    pub fn check_len(&self, len: usize) -> Result<()> {
        if self.len != len || self.sentence_ends.iter().any(|&t| t >= len) {
            return Err(Error::Structural(format!(
                "segment map built for length {} does not fit answer of length {len}",
                self.len
            )));
        }
        Ok(())
    }
}

pub fn segment_answer(vocab: &Vocab, answer: &[Token]) -> Result<SegmentMap> {
    if answer.is_empty() {
        return Err(Error::Structural("cannot segment an empty answer".into()));
    }
    let mut ends = Vec::new();
    let mut spans: Vec<Vec<usize>> = Vec::new();
    let mut claims: Vec<Vec<usize>> = Vec::new();
    let mut cur_span = Vec::new();
    let mut cur_claims = Vec::new();
    let mut in_outline = false;
    let mut eos_at = None;

    for (pos, &tok) in answer.iter().enumerate() {
        let kind = vocab
            .kind(tok)
            .ok_or_else(|| Error::Structural(format!("token id {} outside vocabulary", tok.0)))?;
        if kind == TokenKind::Eos {
            if pos + 1 != answer.len() {
                return Err(Error::Structural(format!(
                    "EOS at position {pos} is followed by {} tokens",
                    answer.len() - pos - 1
                )));
            }
            eos_at = Some(pos);
            continue;
        }
        if in_outline {
            if kind == TokenKind::OutlineEnd {
                in_outline = false;
            }
            continue;
        }
        match kind {
            TokenKind::Pattern(_) => in_outline = true,
            TokenKind::SentEnd => {
                cur_span.push(pos);
                ends.push(pos);
                spans.push(std::mem::take(&mut cur_span));
                claims.push(std::mem::take(&mut cur_claims));
            }
            TokenKind::Claim(_) => {
                cur_span.push(pos);
                cur_claims.push(pos);
            }
            _ => cur_span.push(pos),
        }
    }

    let last = answer.len() - 1;
    if !cur_span.is_empty() {
        if let Some(e) = eos_at {
            cur_span.push(e);
        }
        ends.push(last);
        spans.push(cur_span);
        claims.push(cur_claims);
    } else if let Some(end) = ends.last_mut().filter(|e| **e != last) {
        // EOS, or the last token of an unterminated outline fragment,
        // joins the final sentence so that it always ends on the last token
        *end = last;
        spans.last_mut().expect("parallel to ends").push(last);
    } else if ends.is_empty() {
        // nothing but outline and/or EOS: one empty sentence on the final token
        ends.push(last);
        spans.push(eos_at.into_iter().collect());
        claims.push(Vec::new());
    }

    Ok(SegmentMap {
        len: answer.len(),
        sentence_ends: ends,
        spans,
        subclaim_positions: claims,
    })
}

/// The fact triples asserted by sentence `index`, in order.
pub fn decompose_sentence(
    vocab: &Vocab,
    answer: &[Token],
    segmap: &SegmentMap,
    index: usize,
) -> Result<Vec<FactTriple>> {
    segmap.check_len(answer.len())?;
    let positions = segmap.subclaim_positions.get(index).ok_or_else(|| {
        Error::Structural(format!(
            "sentence index {index} out of range (L = {})",
            segmap.num_segments()
        ))
    })?;
    positions
        .iter()
        .map(|&p| {
            vocab
                .claim_of(answer[p])
                .ok_or_else(|| Error::Structural(format!("position {p} holds no claim token")))
        })
        .collect()
}
