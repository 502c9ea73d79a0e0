// SPDX-License-Identifier: MIT OR Apache-2.0

//! Gradient-weighted relevance accumulation.
//!
//! A [`RelevanceMap`] is a row-stochastic `(s+q) × (s+q)` matrix whose row
//! `i` says how the current token `i` is composed of the original input
//! tokens. It starts as the identity and is folded through every attention
//! site of a [`Trace`] in forward order:
//!
//! ```text
//! R ← α·R + β·T·R
//! ```
//!
//! where `T` transports relevance through the attention block (the
//! row-normalized, positive part of the head-averaged `∇A ⊙ A`, embedded in
//! the joint index space according to the site kind) and `α`/`β` weigh the
//! residual path against the attention path using the positive
//! gradient-times-activation mass of the tokens entering and leaving the
//! block.

mod caption;
mod interaction;
mod ngram;

pub use caption::{caption_aggregate, caption_word_weights, CaptionExplanation, CaptionWeighting};
pub use interaction::{
    interaction_map, interaction_update, mutual_interaction, Direction, InteractionMap, RelevanceBlocks,
};
pub use ngram::ngram_eval;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::trace::{AttentionSite, ModalityLayout, SiteKind, Trace};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RelevanceError {
    #[error("site {site}: dimension mismatch: {detail}")]
    Dimension { site: usize, detail: String },
    #[error("site {site}: expected a {expected} site, found {found}")]
    WrongKind {
        site: usize,
        expected: &'static str,
        found: SiteKind,
    },
    #[error("fixed alpha {0} is outside [0, 1]")]
    AlphaRange(f64),
    #[error("caption trace has no steps")]
    EmptyCaption,
}

/// How the residual/attention weights `(α, β)` are chosen.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum WeightingMode {
    /// α from the positive gradient-times-activation ratio of the block's
    /// input and output tokens.
    Adaptive,
    /// Same ratio without the positive-part clamp. α may leave `[0, 1]`,
    /// so the row-stochastic guarantee does not hold in this mode.
    AdaptiveUnclamped,
    /// Constant α (β = 1 − α); `Fixed(0.5)` is the plain averaging rule.
    Fixed(f64),
}

impl WeightingMode {
    pub fn fixed(alpha: f64) -> Result<Self, RelevanceError> {
        if (0.0..=1.0).contains(&alpha) {
            Ok(Self::Fixed(alpha))
        } else {
            Err(RelevanceError::AlphaRange(alpha))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RelevanceMap {
    pub values: DMatrix<f64>,
    pub layout: ModalityLayout,
}

impl RelevanceMap {
    /// Largest absolute deviation of a row sum from 1.
    pub fn max_row_sum_error(&self) -> f64 {
        (0..self.values.nrows())
            .map(|r| (self.values.row(r).sum() - 1.0).abs())
            .fold(0.0, f64::max)
    }

    pub fn min_entry(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// Relevance of current S tokens to original S tokens.
    pub fn s_block(&self) -> DMatrix<f64> {
        let s = self.layout.s;
        self.values.view((0, 0), (s, s)).into_owned()
    }

    /// Relevance of current Q tokens to original Q tokens.
    pub fn q_block(&self) -> DMatrix<f64> {
        let (s, q) = (self.layout.s, self.layout.q);
        self.values.view((s, s), (q, q)).into_owned()
    }
}

/// Per-token explanation scores, `[CLS]` excluded.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenScores {
    /// Image patches, joint indices `1..s`.
    pub image: Vec<f64>,
    /// Text tokens, joint indices `s..s+q`.
    pub text: Vec<f64>,
}

/// Head-averaged, positive part of `∇A ⊙ A`.
fn positive_grad_attention(site: &AttentionSite) -> DMatrix<f64> {
    let (nq, nk) = (site.n_query(), site.n_key());
    let mut acc = DMatrix::zeros(nq, nk);
    for (a, g) in site.attention.iter().zip(&site.attention_grad) {
        acc.zip_zip_apply(a, g, |acc, a, g| *acc += (a * g).max(0.0));
    }
    let heads = site.heads().max(1) as f64;
    acc / heads
}

/// Row-normalize `m` in place; returns which rows had zero mass (left zero).
fn normalize_rows(m: &mut DMatrix<f64>) -> Vec<bool> {
    let mut empty = vec![false; m.nrows()];
    for (r, flag) in empty.iter_mut().enumerate() {
        let sum: f64 = m.row(r).sum();
        if sum > 0.0 {
            m.row_mut(r).unscale_mut(sum);
        } else {
            m.row_mut(r).fill(0.0);
            *flag = true;
        }
    }
    empty
}

/// Equivalent attention of a site: head mean of `(∇A ⊙ A)^+`, optionally
/// row-normalized.
///
/// With `normalize`, a row without positive mass falls back to the identity
/// row for self-attention sites. For cross sites the key axis is a different
/// modality, so such rows are returned as zeros and the cross update treats
/// them as the token keeping its own relevance.
pub fn equivalent_attention(site: &AttentionSite, normalize: bool) -> DMatrix<f64> {
    let mut m = positive_grad_attention(site);
    if normalize {
        let empty = normalize_rows(&mut m);
        if site.kind != SiteKind::Cross && m.nrows() == m.ncols() {
            for (r, _) in empty.iter().enumerate().filter(|(_, e)| **e) {
                m[(r, r)] = 1.0;
            }
        }
    }
    m
}

/// Residual weights `(α, β)` of a site.
///
/// α is the mean over token entries of
/// `(∇Y ⊙ Y)^+ / ((∇Y ⊙ Y)^+ + (∇Y′ ⊙ Y′)^+)`; entries where both terms
/// vanish are skipped, and α = 0.5 when every entry is skipped.
pub fn residual_alpha(site: &AttentionSite, mode: WeightingMode) -> (f64, f64) {
    let clamp = match mode {
        WeightingMode::Fixed(a) => return (a, 1.0 - a),
        WeightingMode::Adaptive => true,
        WeightingMode::AdaptiveUnclamped => false,
    };
    let mut sum = 0.0;
    let mut count = 0usize;
    let entries = site
        .tokens_in
        .iter()
        .zip(site.tokens_in_grad.iter())
        .zip(site.tokens_out.iter().zip(site.tokens_out_grad.iter()));
    for ((y, gy), (yo, gyo)) in entries {
        let (mut a, mut b) = (y * gy, yo * gyo);
        if clamp {
            a = a.max(0.0);
            b = b.max(0.0);
        }
        let denom = a + b;
        if denom == 0.0 {
            continue;
        }
        sum += a / denom;
        count += 1;
    }
    let alpha = if count == 0 { 0.5 } else { sum / count as f64 };
    (alpha, 1.0 - alpha)
}

/// `R = I` over the joint token space.
pub fn init_relevance(layout: ModalityLayout) -> RelevanceMap {
    RelevanceMap {
        values: DMatrix::identity(layout.joint(), layout.joint()),
        layout,
    }
}

fn check_kind(index: usize, site: &AttentionSite, kind: SiteKind) -> Result<(), RelevanceError> {
    if site.kind == kind {
        Ok(())
    } else {
        Err(RelevanceError::WrongKind {
            site: index,
            expected: kind.as_str(),
            found: site.kind,
        })
    }
}

fn check_shape(index: usize, site: &AttentionSite, layout: ModalityLayout) -> Result<(), RelevanceError> {
    let want = (layout.len_of(site.query_modality), layout.len_of(site.key_modality));
    let got = (site.n_query(), site.n_key());
    if got != want || site.heads() == 0 || site.attention_grad.len() != site.heads() {
        return Err(RelevanceError::Dimension {
            site: index,
            detail: format!(
                "attention {}x{} ({} heads), layout requires {}x{}",
                got.0,
                got.1,
                site.heads(),
                want.0,
                want.1
            ),
        });
    }
    if site.attention_grad.iter().any(|g| g.shape() != got) {
        return Err(RelevanceError::Dimension {
            site: index,
            detail: "attention_grad shape differs from attention".into(),
        });
    }
    Ok(())
}

/// Rows `[offset, offset+len)` of `R` become `α·R_rows + β·transported`.
fn mix_rows(r: &RelevanceMap, offset: usize, transported: &DMatrix<f64>, alpha: f64, beta: f64) -> RelevanceMap {
    let mut values = r.values.clone();
    let len = transported.nrows();
    let mut rows = values.rows_mut(offset, len);
    rows.zip_apply(transported, |x, t| *x = alpha * *x + beta * t);
    RelevanceMap {
        values,
        layout: r.layout,
    }
}

fn update_joint_at(
    index: usize,
    r: &RelevanceMap,
    site: &AttentionSite,
    mode: WeightingMode,
) -> Result<RelevanceMap, RelevanceError> {
    check_kind(index, site, SiteKind::SelfJoint)?;
    check_shape(index, site, r.layout)?;
    let a = equivalent_attention(site, true);
    let (alpha, beta) = residual_alpha(site, mode);
    Ok(mix_rows(r, 0, &(a * &r.values), alpha, beta))
}

fn update_unimodal_at(
    index: usize,
    r: &RelevanceMap,
    site: &AttentionSite,
    mode: WeightingMode,
) -> Result<RelevanceMap, RelevanceError> {
    check_kind(index, site, SiteKind::SelfUnimodal)?;
    check_shape(index, site, r.layout)?;
    let m = site.query_modality;
    let (off, len) = (r.layout.offset_of(m), r.layout.len_of(m));
    let a = equivalent_attention(site, true);
    let (alpha, beta) = residual_alpha(site, mode);
    let transported = a * r.values.rows(off, len);
    Ok(mix_rows(r, off, &transported, alpha, beta))
}

fn update_cross_at(
    index: usize,
    r: &RelevanceMap,
    site: &AttentionSite,
    mode: WeightingMode,
) -> Result<RelevanceMap, RelevanceError> {
    check_kind(index, site, SiteKind::Cross)?;
    check_shape(index, site, r.layout)?;
    let (qm, km) = (site.query_modality, site.key_modality);
    let (q_off, q_len) = (r.layout.offset_of(qm), r.layout.len_of(qm));
    let (k_off, k_len) = (r.layout.offset_of(km), r.layout.len_of(km));
    let mut a = positive_grad_attention(site);
    let empty = normalize_rows(&mut a);
    let mut transported = a * r.values.rows(k_off, k_len);
    for (i, _) in empty.iter().enumerate().filter(|(_, e)| **e) {
        transported.set_row(i, &r.values.row(q_off + i));
    }
    debug_assert_eq!(transported.nrows(), q_len);
    let (alpha, beta) = residual_alpha(site, mode);
    Ok(mix_rows(r, q_off, &transported, alpha, beta))
}

/// Joint self-attention update: `R = α·R + β·Ā·R`.
pub fn update_joint_self(
    r: &RelevanceMap,
    site: &AttentionSite,
    mode: WeightingMode,
) -> Result<RelevanceMap, RelevanceError> {
    update_joint_at(0, r, site, mode)
}

/// Unimodal self-attention update. Ā acts on the rows of the site's
/// modality; the absent modality attends only to itself.
pub fn update_unimodal_self(
    r: &RelevanceMap,
    site: &AttentionSite,
    mode: WeightingMode,
) -> Result<RelevanceMap, RelevanceError> {
    update_unimodal_at(0, r, site, mode)
}

/// Cross-attention update. Query-modality rows mix in the key-modality
/// relevance through Ā; key-modality rows are copied unchanged.
pub fn update_cross(
    r: &RelevanceMap,
    site: &AttentionSite,
    mode: WeightingMode,
) -> Result<RelevanceMap, RelevanceError> {
    update_cross_at(0, r, site, mode)
}

/// Apply the update matching `site.kind`.
pub fn update_site(
    index: usize,
    r: &RelevanceMap,
    site: &AttentionSite,
    mode: WeightingMode,
) -> Result<RelevanceMap, RelevanceError> {
    match site.kind {
        SiteKind::SelfJoint => update_joint_at(index, r, site, mode),
        SiteKind::SelfUnimodal => update_unimodal_at(index, r, site, mode),
        SiteKind::Cross => update_cross_at(index, r, site, mode),
    }
}

/// Fold every site of `trace` into the identity relevance map.
pub fn propagate(trace: &Trace, mode: WeightingMode) -> Result<RelevanceMap, RelevanceError> {
    if let WeightingMode::Fixed(a) = mode {
        if !(0.0..=1.0).contains(&a) {
            return Err(RelevanceError::AlphaRange(a));
        }
    }
    trace
        .sites
        .iter()
        .enumerate()
        .try_fold(init_relevance(trace.layout), |r, (i, site)| {
            update_site(i, &r, site, mode)
        })
}

/// Split row `row` of a joint matrix into patch scores (`1..s`) and text
/// scores (`s..s+q`).
pub(crate) fn split_row(values: &DMatrix<f64>, row: usize, layout: ModalityLayout) -> TokenScores {
    let s = layout.s;
    let r: DVector<f64> = values.row(row).transpose();
    TokenScores {
        image: r.iter().skip(1).take(s - 1).copied().collect(),
        text: r.iter().skip(s).take(layout.q).copied().collect(),
    }
}

/// The `[CLS]` row of `R` (joint index 0) split into patch and text scores.
pub fn cls_explanation(r: &RelevanceMap) -> TokenScores {
    split_row(&r.values, 0, r.layout)
}
