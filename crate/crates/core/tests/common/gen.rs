// SPDX-License-Identifier: MIT OR Apache-2.0

use attrel::trace::{AttentionSite, Modality, ModalityLayout, SiteKind, Target, Trace};
use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

/// Every site shape a layout admits: (kind, query, key).
pub const SITE_SHAPES: [(SiteKind, Modality, Modality); 5] = [
    (SiteKind::SelfJoint, Modality::Joint, Modality::Joint),
    (SiteKind::SelfUnimodal, Modality::S, Modality::S),
    (SiteKind::SelfUnimodal, Modality::Q, Modality::Q),
    (SiteKind::Cross, Modality::S, Modality::Q),
    (SiteKind::Cross, Modality::Q, Modality::S),
];

fn stochastic(rng: &mut impl Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    let mut m = DMatrix::from_fn(rows, cols, |_, _| {
        // occasional exact zeros exercise the sparse paths
        if rng.random_bool(0.1) {
            0.0
        } else {
            rng.random_range(0.01..1.0)
        }
    });
    for r in 0..rows {
        let sum: f64 = m.row(r).sum();
        if sum == 0.0 {
            m[(r, rng.random_range(0..cols))] = 1.0;
        } else {
            m.row_mut(r).unscale_mut(sum);
        }
    }
    m
}

fn gaussian(rng: &mut impl Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.sample::<f64, _>(StandardNormal))
}

/// A site with random row-stochastic attention and mixed-sign gradients.
/// Some gradient rows are negated wholesale so that the equivalent
/// attention has empty rows.
pub fn random_site(
    rng: &mut impl Rng,
    layout: ModalityLayout,
    (kind, qm, km): (SiteKind, Modality, Modality),
    layer: usize,
    heads: usize,
    width: usize,
) -> AttentionSite {
    let (nq, nk) = (layout.len_of(qm), layout.len_of(km));
    let attention: Vec<DMatrix<f64>> = (0..heads).map(|_| stochastic(rng, nq, nk)).collect();
    let mut attention_grad: Vec<DMatrix<f64>> = (0..heads).map(|_| gaussian(rng, nq, nk)).collect();
    for r in 0..nq {
        if rng.random_bool(0.15) {
            for g in &mut attention_grad {
                g.row_mut(r).apply(|x| *x = -x.abs());
            }
        }
    }
    let n = Normal::new(0.0, 1.0).unwrap();
    let mut tok = || DMatrix::from_fn(nq, width, |_, _| n.sample(rng));
    AttentionSite {
        kind,
        query_modality: qm,
        key_modality: km,
        layer,
        attention,
        attention_grad,
        tokens_in: tok(),
        tokens_in_grad: tok(),
        tokens_out: tok(),
        tokens_out_grad: tok(),
    }
}

pub fn trace_of(layout: ModalityLayout, sites: Vec<AttentionSite>) -> Trace {
    Trace {
        layout,
        target: Target { class: 0, logit: 1.0 },
        sites,
        model_tag: "random".into(),
    }
}

/// Random trace over the given site shapes, one layer per site.
pub fn random_trace_with(
    rng: &mut impl Rng,
    layout: ModalityLayout,
    shapes: &[(SiteKind, Modality, Modality)],
) -> Trace {
    let heads = rng.random_range(1..=3);
    let width = rng.random_range(1..=4);
    let sites = shapes
        .iter()
        .enumerate()
        .map(|(layer, &shape)| random_site(rng, layout, shape, layer, heads, width))
        .collect();
    trace_of(layout, sites)
}

/// Random trace with `s + q ≤ max_tokens` and `1..=max_sites` sites of mixed kinds.
pub fn random_trace(rng: &mut impl Rng, max_tokens: usize, max_sites: usize) -> Trace {
    let s = rng.random_range(1..max_tokens);
    let q = rng.random_range(1..=max_tokens - s);
    let n = rng.random_range(1..=max_sites);
    let shapes: Vec<_> = (0..n)
        .map(|_| SITE_SHAPES[rng.random_range(0..SITE_SHAPES.len())])
        .collect();
    random_trace_with(rng, ModalityLayout::new(s, q), &shapes)
}
