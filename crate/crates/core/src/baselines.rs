// SPDX-License-Identifier: MIT OR Apache-2.0

//! Comparison explainers over the same traces: raw last-layer attention,
//! attention rollout, and additive gradient-weighted attention (GenAtt).
//!
//! All three keep four score matrices: `r_ii` (image × image), `r_tt`
//! (text × text), `r_it` (image × text) and `r_ti` (text × image). A joint
//! self-attention site is treated as self-attention over the concatenated
//! modality and updates all four blocks at once.

use std::fmt;

use nalgebra::DMatrix;

use crate::relevance::TokenScores;
use crate::trace::{AttentionSite, Modality, ModalityLayout, SiteKind, Trace};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BaselineMethod {
    RawAtt,
    Rollout,
    GenAtt,
}

impl fmt::Display for BaselineMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::RawAtt => "rawatt",
            Self::Rollout => "rollout",
            Self::GenAtt => "genatt",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BaselineScores {
    pub r_ii: DMatrix<f64>,
    pub r_tt: DMatrix<f64>,
    pub r_it: DMatrix<f64>,
    pub r_ti: DMatrix<f64>,
    pub method: BaselineMethod,
}

impl BaselineScores {
    /// Identity self-scores and zero cross-scores.
    pub fn init(layout: ModalityLayout, method: BaselineMethod) -> Self {
        let (s, q) = (layout.s, layout.q);
        Self {
            r_ii: DMatrix::identity(s, s),
            r_tt: DMatrix::identity(q, q),
            r_it: DMatrix::zeros(s, q),
            r_ti: DMatrix::zeros(q, s),
            method,
        }
    }

    fn layout(&self) -> ModalityLayout {
        ModalityLayout::new(self.r_ii.nrows(), self.r_tt.nrows())
    }

    /// The four blocks assembled into one joint matrix.
    pub fn joint(&self) -> DMatrix<f64> {
        let l = self.layout();
        let n = l.joint();
        let mut j = DMatrix::zeros(n, n);
        j.view_mut((0, 0), (l.s, l.s)).copy_from(&self.r_ii);
        j.view_mut((0, l.s), (l.s, l.q)).copy_from(&self.r_it);
        j.view_mut((l.s, 0), (l.q, l.s)).copy_from(&self.r_ti);
        j.view_mut((l.s, l.s), (l.q, l.q)).copy_from(&self.r_tt);
        j
    }

    fn set_joint(&mut self, j: &DMatrix<f64>) {
        let l = self.layout();
        self.r_ii = j.view((0, 0), (l.s, l.s)).into_owned();
        self.r_it = j.view((0, l.s), (l.s, l.q)).into_owned();
        self.r_ti = j.view((l.s, 0), (l.q, l.s)).into_owned();
        self.r_tt = j.view((l.s, l.s), (l.q, l.q)).into_owned();
    }

    /// `[CLS]` row: patches from `r_ii`, text from `r_it`.
    pub fn cls_explanation(&self) -> TokenScores {
        TokenScores {
            image: self.r_ii.row(0).iter().skip(1).copied().collect(),
            text: self.r_it.row(0).iter().copied().collect(),
        }
    }
}

/// Head mean of the attention probabilities.
pub fn mean_attention(site: &AttentionSite) -> DMatrix<f64> {
    let mut acc = DMatrix::zeros(site.n_query(), site.n_key());
    for a in &site.attention {
        acc += a;
    }
    acc / site.heads().max(1) as f64
}

/// Head mean of `(∇A ⊙ A)^+`.
fn grad_attention(site: &AttentionSite) -> DMatrix<f64> {
    crate::relevance::equivalent_attention(site, false)
}

fn row_normalize(mut m: DMatrix<f64>) -> DMatrix<f64> {
    for r in 0..m.nrows() {
        let sum: f64 = m.row(r).sum();
        if sum != 0.0 {
            m.row_mut(r).unscale_mut(sum);
        }
    }
    m
}

/// `norm_row(R − I) + I`; all-zero rows stay zero before the identity is
/// added back.
pub fn normalized_self_scores(r: &DMatrix<f64>) -> DMatrix<f64> {
    let n = r.nrows();
    let eye = DMatrix::identity(n, n);
    row_normalize(r - &eye) + eye
}

fn is_s_to_q(site: &AttentionSite) -> bool {
    site.query_modality == Modality::S && site.key_modality == Modality::Q
}

/// Only the last attention site writing each score matrix is used, once.
pub fn rawatt_explain(trace: &Trace) -> BaselineScores {
    let mut out = BaselineScores::init(trace.layout, BaselineMethod::RawAtt);
    for site in &trace.sites {
        let a = mean_attention(site);
        match (site.kind, site.query_modality) {
            (SiteKind::SelfJoint, _) => out.set_joint(&a),
            (SiteKind::SelfUnimodal, Modality::S) => out.r_ii = a,
            (SiteKind::SelfUnimodal, _) => out.r_tt = a,
            (SiteKind::Cross, _) if is_s_to_q(site) => out.r_it = a,
            (SiteKind::Cross, _) => out.r_ti = a,
        }
    }
    out
}

/// Attention rollout. Self-scores are multiplied through every
/// self-attention site by the row-normalized `Ā + I`; cross-scores come from
/// the last cross-modal attention, transported by the final self-scores.
pub fn rollout_propagate(trace: &Trace) -> BaselineScores {
    let l = trace.layout;
    let mut out = BaselineScores::init(l, BaselineMethod::Rollout);
    let mut last_it: Option<DMatrix<f64>> = None;
    let mut last_ti: Option<DMatrix<f64>> = None;
    for site in &trace.sites {
        let a = mean_attention(site);
        match site.kind {
            SiteKind::SelfJoint => {
                let n = a.nrows();
                let step = row_normalize(&a + DMatrix::identity(n, n));
                let j = step * out.joint();
                out.set_joint(&j);
                last_it = Some(a.view((0, l.s), (l.s, l.q)).into_owned());
                last_ti = Some(a.view((l.s, 0), (l.q, l.s)).into_owned());
            }
            SiteKind::SelfUnimodal => {
                let n = a.nrows();
                let step = row_normalize(&a + DMatrix::identity(n, n));
                if site.query_modality == Modality::S {
                    out.r_ii = step * &out.r_ii;
                } else {
                    out.r_tt = step * &out.r_tt;
                }
            }
            SiteKind::Cross if is_s_to_q(site) => last_it = Some(a),
            SiteKind::Cross => last_ti = Some(a),
        }
    }
    if let Some(a) = last_it {
        out.r_it = out.r_ii.transpose() * a * &out.r_tt;
    }
    if let Some(a) = last_ti {
        out.r_ti = out.r_tt.transpose() * a * &out.r_ii;
    }
    out
}

/// GenAtt: additive accumulation of gradient-weighted attention.
pub fn genatt_propagate(trace: &Trace) -> BaselineScores {
    let mut out = BaselineScores::init(trace.layout, BaselineMethod::GenAtt);
    for site in &trace.sites {
        let a = grad_attention(site);
        match site.kind {
            SiteKind::SelfJoint => {
                let j = out.joint();
                let j = &j + &a * &j;
                out.set_joint(&j);
            }
            SiteKind::SelfUnimodal if site.query_modality == Modality::S => {
                out.r_ii = &out.r_ii + &a * &out.r_ii;
                out.r_it = &out.r_it + &a * &out.r_it;
            }
            SiteKind::SelfUnimodal => {
                out.r_tt = &out.r_tt + &a * &out.r_tt;
                out.r_ti = &out.r_ti + &a * &out.r_ti;
            }
            SiteKind::Cross if is_s_to_q(site) => {
                let bar_ii = normalized_self_scores(&out.r_ii);
                let bar_tt = normalized_self_scores(&out.r_tt);
                out.r_it = &out.r_it + bar_ii.transpose() * &a * bar_tt;
                out.r_ii = &out.r_ii + &a * &out.r_ti;
            }
            SiteKind::Cross => {
                let bar_tt = normalized_self_scores(&out.r_tt);
                let bar_ii = normalized_self_scores(&out.r_ii);
                out.r_ti = &out.r_ti + bar_tt.transpose() * &a * bar_ii;
                out.r_tt = &out.r_tt + &a * &out.r_it;
            }
        }
    }
    out
}

pub fn explain(trace: &Trace, method: BaselineMethod) -> BaselineScores {
    match method {
        BaselineMethod::RawAtt => rawatt_explain(trace),
        BaselineMethod::Rollout => rollout_propagate(trace),
        BaselineMethod::GenAtt => genatt_propagate(trace),
    }
}
