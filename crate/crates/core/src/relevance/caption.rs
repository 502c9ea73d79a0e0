// SPDX-License-Identifier: MIT OR Apache-2.0

//! Sentence-level explanation of a generated caption.
//!
//! Each decoding step is explained on its own (the last row of the step's
//! relevance map, image patches only). The caption-level score is the
//! weighted mean of those rows, where a word's weight is how much a caption
//! metric drops when that word is deleted.

use super::{propagate, split_row, RelevanceError, WeightingMode};
use crate::trace::CaptionTrace;

/// Word weighting for [`caption_aggregate`].
pub enum CaptionWeighting<'a> {
    /// Every step weighs 1.
    Average,
    /// Weight of word `i` is `eval(T) − eval(T without word i)`, clamped at 0.
    Metric(&'a dyn Fn(&[usize]) -> f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct CaptionExplanation {
    /// Patch scores of each step (last relevance row, `[CLS]` excluded).
    pub per_step_scores: Vec<Vec<f64>>,
    pub weights: Vec<f64>,
    pub aggregate: Vec<f64>,
}

/// Deletion weights of each caption word under `eval`.
pub fn caption_word_weights(ct: &CaptionTrace, eval: &dyn Fn(&[usize]) -> f64) -> Vec<f64> {
    let full = eval(&ct.caption);
    (0..ct.caption.len())
        .map(|i| {
            let mut reduced = ct.caption.clone();
            reduced.remove(i);
            (full - eval(&reduced)).max(0.0)
        })
        .collect()
}

pub fn caption_aggregate(
    ct: &CaptionTrace,
    mode: WeightingMode,
    weighting: &CaptionWeighting<'_>,
) -> Result<CaptionExplanation, RelevanceError> {
    if ct.steps.is_empty() {
        return Err(RelevanceError::EmptyCaption);
    }
    let per_step_scores = ct
        .steps
        .iter()
        .map(|step| {
            let r = propagate(&step.trace, mode)?;
            let last = r.values.nrows() - 1;
            Ok(split_row(&r.values, last, r.layout).image)
        })
        .collect::<Result<Vec<_>, RelevanceError>>()?;

    let weights = match weighting {
        CaptionWeighting::Average => vec![1.0; ct.steps.len()],
        CaptionWeighting::Metric(eval) => caption_word_weights(ct, *eval),
    };
    let total: f64 = weights.iter().sum();
    let effective: Vec<f64> = if total > 0.0 {
        weights.clone()
    } else {
        vec![1.0; weights.len()]
    };
    let norm: f64 = effective.iter().sum();

    let width = per_step_scores[0].len();
    let mut aggregate = vec![0.0; width];
    for (scores, w) in per_step_scores.iter().zip(&effective) {
        for (acc, v) in aggregate.iter_mut().zip(scores) {
            *acc += w * v;
        }
    }
    for v in &mut aggregate {
        *v /= norm;
    }
    Ok(CaptionExplanation {
        per_step_scores,
        weights,
        aggregate,
    })
}
