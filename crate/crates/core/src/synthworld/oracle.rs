use serde::{Deserialize, Serialize};

use super::{Context, FactTriple, Token, Vocab};
use crate::error::Result;
use crate::segmentation::{aggregate, AggKind, SegmentMap};

/// Exact factuality of one claim: present in the context verbatim.
/// Contradicted and unsupported claims are both nonfactual.
pub fn oracle_subclaim(context: &Context, claim: FactTriple) -> bool {
    context.triples.contains(&claim)
}

/// Labels at the three evaluation granularities.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FactualityLabels {
    pub holistic: bool,
    pub per_sentence: Vec<bool>,
    pub per_subclaim: Vec<Vec<bool>>,
}

impl FactualityLabels {
    pub fn num_sentences(&self) -> usize {
        self.per_sentence.len()
    }

    /// Continuous sentence scores `Agg_j(R_ij)`; a sentence without
    /// subclaims scores 1.0.
    pub fn subclaim_scores(&self, agg: AggKind) -> Vec<f64> {
        self.per_subclaim
            .iter()
            .map(|row| {
                let xs: Vec<f64> = row.iter().map(|&b| b as u8 as f64).collect();
                aggregate(&xs, agg)
            })
            .collect()
    }

    pub fn sentence_scores(&self) -> Vec<f64> {
        self.per_sentence.iter().map(|&b| b as u8 as f64).collect()
    }

    pub fn factual_sentences(&self) -> usize {
        self.per_sentence.iter().filter(|&&b| b).count()
    }
}

/// Labels every subclaim against the context, aggregates each sentence row
/// with `agg` and binarizes at 1/2, and marks the whole answer factual iff
/// every sentence is. Ground-truth labels use `AggKind::Min`, for which the
/// binarization is exact.
pub fn oracle_labels(
    vocab: &Vocab,
    context: &Context,
    answer: &[Token],
    segmap: &SegmentMap,
    agg: AggKind,
) -> Result<FactualityLabels> {
    segmap.check_len(answer.len())?;
    let mut per_subclaim = Vec::with_capacity(segmap.num_segments());
    for i in 0..segmap.num_segments() {
        let triples = crate::segmentation::decompose_sentence(vocab, answer, segmap, i)?;
        per_subclaim.push(
            triples
                .into_iter()
                .map(|t| oracle_subclaim(context, t))
                .collect::<Vec<_>>(),
        );
    }
    let per_sentence: Vec<bool> = per_subclaim
        .iter()
        .map(|row| {
            let xs: Vec<f64> = row.iter().map(|&b| b as u8 as f64).collect();
            aggregate(&xs, agg) >= 0.5
        })
        .collect();
    Ok(FactualityLabels {
        holistic: per_sentence.iter().all(|&b| b),
        per_sentence,
        per_subclaim,
    })
}
