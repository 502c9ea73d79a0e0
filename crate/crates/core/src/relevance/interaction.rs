// SPDX-License-Identifier: MIT OR Apache-2.0

//! Modified interaction maps: cross-modal attention restored to the original
//! input tokens.
//!
//! Each site that lets one modality attend to the other contributes
//! `M += R_SS^T · Ã · R_QQ`, where `Ã` is the unnormalized equivalent
//! attention block and `R_SS`, `R_QQ` are the diagonal blocks of the running
//! relevance map captured before the site's own update.

use nalgebra::DMatrix;

use super::{equivalent_attention, update_site, RelevanceError, RelevanceMap, WeightingMode};
use crate::relevance::init_relevance;
use crate::trace::{AttentionSite, Modality, ModalityLayout, SiteKind, Trace};

/// Which one-way interaction a map accumulates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    /// Image tokens attending to text tokens; map shape `s × q`.
    ImageToText,
    /// Text tokens attending to image tokens; map shape `q × s`.
    TextToImage,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InteractionMap {
    pub values: DMatrix<f64>,
    /// Set for the elementwise product of both directions.
    pub mutual: bool,
}

impl InteractionMap {
    pub fn zeros(layout: ModalityLayout, direction: Direction) -> Self {
        let (r, c) = match direction {
            Direction::ImageToText => (layout.s, layout.q),
            Direction::TextToImage => (layout.q, layout.s),
        };
        Self {
            values: DMatrix::zeros(r, c),
            mutual: false,
        }
    }
}

/// Diagonal blocks of a relevance map, taken before a site is applied.
#[derive(Debug, Clone, PartialEq)]
pub struct RelevanceBlocks {
    pub s: DMatrix<f64>,
    pub q: DMatrix<f64>,
}

impl From<&RelevanceMap> for RelevanceBlocks {
    fn from(r: &RelevanceMap) -> Self {
        Self {
            s: r.s_block(),
            q: r.q_block(),
        }
    }
}

/// The block of `Ã` in which `direction`'s query modality attends to the
/// other one, if the site has such a block.
fn cross_block(site: &AttentionSite, s: usize, direction: Direction) -> Option<DMatrix<f64>> {
    let (from, to) = match direction {
        Direction::ImageToText => (Modality::S, Modality::Q),
        Direction::TextToImage => (Modality::Q, Modality::S),
    };
    match site.kind {
        SiteKind::SelfUnimodal => None,
        SiteKind::Cross => {
            (site.query_modality == from && site.key_modality == to).then(|| equivalent_attention(site, false))
        }
        SiteKind::SelfJoint => {
            let a = equivalent_attention(site, false);
            let n = a.nrows();
            let q = n.saturating_sub(s);
            Some(match direction {
                Direction::ImageToText => a.view((0, s), (s, q)).into_owned(),
                Direction::TextToImage => a.view((s, 0), (q, s)).into_owned(),
            })
        }
    }
}

/// Add one site's restored interaction to `m`.
pub fn interaction_update(
    m: &InteractionMap,
    blocks: &RelevanceBlocks,
    site: &AttentionSite,
    direction: Direction,
) -> Result<InteractionMap, RelevanceError> {
    let s = blocks.s.nrows();
    let Some(a) = cross_block(site, s, direction) else {
        return Ok(m.clone());
    };
    let (left, right) = match direction {
        Direction::ImageToText => (&blocks.s, &blocks.q),
        Direction::TextToImage => (&blocks.q, &blocks.s),
    };
    if left.nrows() != a.nrows() || a.ncols() != right.nrows() || m.values.shape() != (left.ncols(), right.ncols()) {
        return Err(RelevanceError::Dimension {
            site: 0,
            detail: format!(
                "interaction {:?} with blocks {:?}, {:?} and attention {:?}",
                m.values.shape(),
                left.shape(),
                right.shape(),
                a.shape()
            ),
        });
    }
    Ok(InteractionMap {
        values: &m.values + left.transpose() * a * right,
        mutual: m.mutual,
    })
}

/// Accumulate the one-way interaction map of a whole trace, folding the
/// relevance map alongside.
pub fn interaction_map(
    trace: &Trace,
    mode: WeightingMode,
    direction: Direction,
) -> Result<InteractionMap, RelevanceError> {
    let mut r = init_relevance(trace.layout);
    let mut m = InteractionMap::zeros(trace.layout, direction);
    for (i, site) in trace.sites.iter().enumerate() {
        let blocks = RelevanceBlocks::from(&r);
        m = interaction_update(&m, &blocks, site, direction).map_err(|e| match e {
            RelevanceError::Dimension { detail, .. } => RelevanceError::Dimension { site: i, detail },
            other => other,
        })?;
        r = update_site(i, &r, site, mode)?;
    }
    Ok(m)
}

/// Mutual interaction: `M_sq ⊙ M_qsᵀ`.
pub fn mutual_interaction(m_sq: &InteractionMap, m_qs: &InteractionMap) -> Result<InteractionMap, RelevanceError> {
    let t = m_qs.values.transpose();
    if t.shape() != m_sq.values.shape() {
        return Err(RelevanceError::Dimension {
            site: 0,
            detail: format!(
                "mutual interaction of {:?} and {:?}",
                m_sq.values.shape(),
                m_qs.values.shape()
            ),
        });
    }
    Ok(InteractionMap {
        values: m_sq.values.component_mul(&t),
        mutual: true,
    })
}
