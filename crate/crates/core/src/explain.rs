// SPDX-License-Identifier: MIT OR Apache-2.0

//! Named explanation methods over a trace.

use std::fmt;
use std::str::FromStr;

use crate::baselines::{explain, BaselineMethod};
use crate::relevance::{cls_explanation, propagate, RelevanceError, TokenScores, WeightingMode};
use crate::trace::Trace;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Method {
    /// Relevance propagation with the given residual weighting.
    Ours(WeightingMode),
    Baseline(BaselineMethod),
}

impl Method {
    /// `[CLS]` token scores for a trace.
    pub fn scores(&self, trace: &Trace) -> Result<TokenScores, RelevanceError> {
        match *self {
            Self::Ours(mode) => Ok(cls_explanation(&propagate(trace, mode)?)),
            Self::Baseline(b) => Ok(explain(trace, b).cls_explanation()),
        }
    }

    /// The methods accepted by the command line, in display order.
    pub fn all() -> Vec<Method> {
        vec![
            Self::Ours(WeightingMode::Adaptive),
            Self::Ours(WeightingMode::Fixed(0.5)),
            Self::Baseline(BaselineMethod::GenAtt),
            Self::Baseline(BaselineMethod::Rollout),
            Self::Baseline(BaselineMethod::RawAtt),
        ]
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Ours(WeightingMode::Adaptive) => f.write_str("ours"),
            Self::Ours(WeightingMode::AdaptiveUnclamped) => f.write_str("ours-unclamped"),
            Self::Ours(WeightingMode::Fixed(a)) => write!(f, "ours-fixed:{a}"),
            Self::Baseline(b) => b.fmt(f),
        }
    }
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "ours" => Ok(Self::Ours(WeightingMode::Adaptive)),
            "ours-unclamped" => Ok(Self::Ours(WeightingMode::AdaptiveUnclamped)),
            "rawatt" => Ok(Self::Baseline(BaselineMethod::RawAtt)),
            "rollout" => Ok(Self::Baseline(BaselineMethod::Rollout)),
            "genatt" => Ok(Self::Baseline(BaselineMethod::GenAtt)),
            other => {
                let alpha = other
                    .strip_prefix("ours-fixed:")
                    .ok_or_else(|| {
                        format!("unknown method `{other}` (expected ours, ours-fixed:<alpha>, ours-unclamped, rawatt, rollout, genatt)")
                    })?
                    .parse::<f64>()
                    .map_err(|e| format!("bad alpha in `{other}`: {e}"))?;
                WeightingMode::fixed(alpha).map(Self::Ours).map_err(|e| e.to_string())
            }
        }
    }
}
