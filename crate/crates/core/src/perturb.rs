// SPDX-License-Identifier: MIT OR Apache-2.0

//! Positive/negative perturbation tests.
//!
//! An explainer's scores rank the tokens of one side (image patches or text
//! tokens; `[CLS]` is never ranked). A growing fraction of the ranking is
//! masked by zeroing those tokens' input embeddings, and the accuracy of the
//! masked model over a dataset traces out a curve. Positive perturbation
//! masks the highest scores first, negative the lowest.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use thiserror::Error;

use crate::explain::Method;
use crate::relevance::{RelevanceError, TokenScores};
use crate::toymodel::{emit_trace, predict, ModelError, ModelInput, SyntheticExample, ToyModelParams};
use crate::trace::Trace;

/// Removal fractions used unless configured otherwise.
pub const DEFAULT_FRACTIONS: [f64; 9] = [0.0, 0.05, 0.10, 0.15, 0.20, 0.25, 0.50, 0.75, 1.0];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PerturbError {
    #[error("invalid perturbation config: {0}")]
    Config(String),
    #[error("AUC needs at least 2 points, got {0}")]
    TooFewPoints(usize),
    #[error("example {example}: {source}")]
    Model {
        example: usize,
        #[source]
        source: ModelError,
    },
    #[error("example {example}, method {method}: {source}")]
    Explainer {
        example: usize,
        method: String,
        #[source]
        source: RelevanceError,
    },
    #[error("method {method} returned {got} scores for a side of {want} tokens")]
    ScoreCount { method: String, got: usize, want: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PerturbDirection {
    /// Highest scores masked first.
    Positive,
    /// Lowest scores masked first.
    Negative,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Side {
    Image,
    Text,
}

impl fmt::Display for PerturbDirection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Positive => "positive",
            Self::Negative => "negative",
        })
    }
}

impl FromStr for PerturbDirection {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "positive" => Ok(Self::Positive),
            "negative" => Ok(Self::Negative),
            other => Err(format!("unknown direction `{other}`")),
        }
    }
}

impl fmt::Display for Side {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Image => "image",
            Self::Text => "text",
        })
    }
}

impl FromStr for Side {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "image" => Ok(Self::Image),
            "text" => Ok(Self::Text),
            other => Err(format!("unknown side `{other}`")),
        }
    }
}

impl Side {
    /// Joint index of the side-local token `i`.
    pub fn joint_index(self, s: usize, i: usize) -> usize {
        match self {
            Self::Image => 1 + i,
            Self::Text => s + i,
        }
    }

    pub fn scores(self, t: &TokenScores) -> &[f64] {
        match self {
            Self::Image => &t.image,
            Self::Text => &t.text,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PerturbConfig {
    pub fractions: Vec<f64>,
    pub directions: Vec<PerturbDirection>,
    pub sides: Vec<Side>,
}

impl Default for PerturbConfig {
    fn default() -> Self {
        Self {
            fractions: DEFAULT_FRACTIONS.to_vec(),
            directions: vec![PerturbDirection::Positive, PerturbDirection::Negative],
            sides: vec![Side::Image, Side::Text],
        }
    }
}

impl PerturbConfig {
    pub fn validate(&self) -> Result<(), PerturbError> {
        let f = &self.fractions;
        if f.first() != Some(&0.0) {
            return Err(PerturbError::Config("fractions must start at 0".into()));
        }
        if f.iter().any(|x| !(0.0..=1.0).contains(x)) {
            return Err(PerturbError::Config("fractions must lie in [0, 1]".into()));
        }
        if f.windows(2).any(|w| w[1] <= w[0]) {
            return Err(PerturbError::Config("fractions must be strictly increasing".into()));
        }
        Ok(())
    }
}

/// Token order for masking. Ties keep ascending token index.
pub fn rank_tokens(scores: &[f64], direction: PerturbDirection) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| {
        let ord = scores[a].total_cmp(&scores[b]);
        match direction {
            PerturbDirection::Positive => ord.reverse(),
            PerturbDirection::Negative => ord,
        }
        .then(a.cmp(&b))
    });
    idx
}

/// `floor(fraction · n)`, robust to the representation error of decimal
/// fractions (`0.15 · 20` is 3, not 2).
pub fn mask_count(fraction: f64, n: usize) -> usize {
    ((fraction * n as f64) + 1e-9).floor().min(n as f64) as usize
}

/// Mask the first `mask_count(fraction, ·)` tokens of `ranked` (side-local
/// indices) and report whether the model still predicts the label.
pub fn mask_and_score(
    params: &ToyModelParams,
    example: &SyntheticExample,
    ranked: &[usize],
    fraction: f64,
    side: Side,
) -> Result<bool, ModelError> {
    let k = mask_count(fraction, ranked.len());
    let masked: Vec<usize> = ranked[..k]
        .iter()
        .map(|&i| side.joint_index(params.config.s, i))
        .collect();
    let input = ModelInput::new(&example.image, &example.text).with_mask(&masked);
    Ok(predict(params, input)? == example.label)
}

/// Trapezoidal area under `(fraction, accuracy)` points divided by the
/// fraction span.
pub fn auc(points: &[(f64, f64)]) -> Result<f64, PerturbError> {
    if points.len() < 2 {
        return Err(PerturbError::TooFewPoints(points.len()));
    }
    let span = points[points.len() - 1].0 - points[0].0;
    #[allow(clippy::neg_cmp_op_on_partial_ord)] // NaN spans are rejected too
    if !(span > 0.0) {
        return Err(PerturbError::Config("fractions must span a positive interval".into()));
    }
    let area: f64 = points
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[0].1 + w[1].1) / 2.0)
        .sum();
    Ok(area / span)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PerturbationCurve {
    pub points: Vec<(f64, f64)>,
    pub auc: f64,
}

/// Something that scores the tokens of a traced example.
pub trait Explainer: Sync {
    fn name(&self) -> String;

    /// Scores for `example` (the `index`-th of the dataset) given its trace.
    fn explain(&self, index: usize, example: &SyntheticExample, trace: &Trace) -> Result<TokenScores, RelevanceError>;
}

impl Explainer for Method {
    fn name(&self) -> String {
        self.to_string()
    }

    fn explain(&self, _: usize, _: &SyntheticExample, trace: &Trace) -> Result<TokenScores, RelevanceError> {
        self.scores(trace)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub method: String,
    pub direction: PerturbDirection,
    pub side: Side,
    pub curve: PerturbationCurve,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MethodReport {
    pub fractions: Vec<f64>,
    /// Method-major, then direction, then side, in configured order.
    pub rows: Vec<ReportRow>,
}

fn percent(f: f64) -> String {
    format!("{}", (f * 100.0 * 1e6).round() / 1e6)
}

impl MethodReport {
    pub fn row(&self, method: &str, direction: PerturbDirection, side: Side) -> Option<&ReportRow> {
        self.rows
            .iter()
            .find(|r| r.method == method && r.direction == direction && r.side == side)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("method,direction,side");
        for &f in &self.fractions {
            out.push(',');
            out.push_str(&percent(f));
        }
        out.push_str(",auc\n");
        for r in &self.rows {
            out.push_str(&format!("{},{},{}", r.method, r.direction, r.side));
            for &(_, acc) in &r.curve.points {
                out.push_str(&format!(",{acc:?}"));
            }
            out.push_str(&format!(",{:?}\n", r.curve.auc));
        }
        out
    }

    pub fn to_table(&self) -> String {
        let width = self.rows.iter().map(|r| r.method.len()).max().unwrap_or(0).max(6);
        let mut out = format!("{:<width$}  {:<9} {:<6}", "method", "direction", "side");
        for &f in &self.fractions {
            out.push_str(&format!(" {:>6}", format!("{}%", percent(f))));
        }
        out.push_str("      AUC\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{:<width$}  {:<9} {:<6}",
                r.method,
                r.direction.to_string(),
                r.side.to_string()
            ));
            for &(_, acc) in &r.curve.points {
                out.push_str(&format!(" {acc:>6.3}"));
            }
            out.push_str(&format!(" {:>8.4}\n", r.curve.auc));
        }
        out
    }
}

/// Correct-prediction flags of one example, indexed
/// `[method][direction][side][fraction]`.
type Hits = Vec<Vec<Vec<Vec<bool>>>>;

fn example_hits(
    index: usize,
    ex: &SyntheticExample,
    params: &ToyModelParams,
    methods: &[&dyn Explainer],
    config: &PerturbConfig,
) -> Result<Hits, PerturbError> {
    let model_err = |source| PerturbError::Model { example: index, source };
    let predicted = predict(params, ex.input()).map_err(model_err)?;
    let trace = emit_trace(params, ex.input(), predicted).map_err(model_err)?;
    let s = params.config.s;
    methods
        .iter()
        .map(|m| {
            let scores = m.explain(index, ex, &trace).map_err(|source| PerturbError::Explainer {
                example: index,
                method: m.name(),
                source,
            })?;
            config
                .directions
                .iter()
                .map(|&dir| {
                    config
                        .sides
                        .iter()
                        .map(|&side| {
                            let sc = side.scores(&scores);
                            let want = match side {
                                Side::Image => s - 1,
                                Side::Text => ex.text.len(),
                            };
                            if sc.len() != want {
                                return Err(PerturbError::ScoreCount {
                                    method: m.name(),
                                    got: sc.len(),
                                    want,
                                });
                            }
                            let ranked = rank_tokens(sc, dir);
                            let mut last: Option<(usize, bool)> = None;
                            config
                                .fractions
                                .iter()
                                .map(|&f| {
                                    let k = mask_count(f, ranked.len());
                                    if let Some((lk, hit)) = last {
                                        if lk == k {
                                            return Ok(hit);
                                        }
                                    }
                                    let hit = mask_and_score(params, ex, &ranked, f, side).map_err(model_err)?;
                                    last = Some((k, hit));
                                    Ok(hit)
                                })
                                .collect()
                        })
                        .collect()
                })
                .collect()
        })
        .collect()
}

/// Perturbation curves of every method over `dataset`. Each example is
/// traced at the model's own prediction; accuracy is measured against the
/// label. Examples are evaluated in parallel and reduced in dataset order.
pub fn compare_methods(
    dataset: &[SyntheticExample],
    params: &ToyModelParams,
    methods: &[&dyn Explainer],
    config: &PerturbConfig,
) -> Result<MethodReport, PerturbError> {
    config.validate()?;
    let per_example: Vec<Hits> = dataset
        .par_iter()
        .enumerate()
        .map(|(i, ex)| example_hits(i, ex, params, methods, config))
        .collect::<Result<_, _>>()?;
    let n = dataset.len().max(1) as f64;
    let mut rows = Vec::new();
    for (mi, m) in methods.iter().enumerate() {
        for (di, &direction) in config.directions.iter().enumerate() {
            for (si, &side) in config.sides.iter().enumerate() {
                let points: Vec<(f64, f64)> = config
                    .fractions
                    .iter()
                    .enumerate()
                    .map(|(fi, &f)| {
                        let hits = per_example.iter().filter(|h| h[mi][di][si][fi]).count();
                        (f, hits as f64 / n)
                    })
                    .collect();
                let auc = if points.len() >= 2 { auc(&points)? } else { points[0].1 };
                rows.push(ReportRow {
                    method: m.name(),
                    direction,
                    side,
                    curve: PerturbationCurve { points, auc },
                });
            }
        }
    }
    Ok(MethodReport {
        fractions: config.fractions.clone(),
        rows,
    })
}
