// SPDX-License-Identifier: MIT OR Apache-2.0

mod common;

use attrel::relevance::{
    cls_explanation, interaction_map, mutual_interaction, propagate, residual_alpha, Direction, WeightingMode,
};
use attrel::trace::{ModalityLayout, SiteKind};
use common::gen::{random_trace, random_trace_with, SITE_SHAPES};
use common::oracles::{self, max_abs_diff, Alpha};
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn rows_stay_stochastic_and_nonnegative(seed in any::<u64>()) {
        let t = random_trace(&mut rng(seed), 12, 6);
        for mode in [WeightingMode::Adaptive, WeightingMode::Fixed(0.3)] {
            let r = propagate(&t, mode).unwrap();
            prop_assert!(r.max_row_sum_error() < 1e-9);
            prop_assert!(r.min_entry() >= 0.0);
        }
    }

    #[test]
    fn alpha_and_beta_are_complementary(seed in any::<u64>()) {
        let t = random_trace(&mut rng(seed), 8, 4);
        for site in &t.sites {
            let (a, b) = residual_alpha(site, WeightingMode::Adaptive);
            prop_assert!((0.0..=1.0).contains(&a));
            prop_assert_eq!(a + b, 1.0);
        }
    }

    #[test]
    fn propagate_matches_loop_oracle(seed in any::<u64>()) {
        let t = random_trace(&mut rng(seed), 6, 4);
        let got = propagate(&t, WeightingMode::Adaptive).unwrap();
        prop_assert!(max_abs_diff(&oracles::propagate(&t, &Alpha::Adaptive), &got.values) < 1e-12);
        let got = propagate(&t, WeightingMode::Fixed(0.5)).unwrap();
        prop_assert!(max_abs_diff(&oracles::propagate(&t, &Alpha::Fixed(0.5)), &got.values) < 1e-12);
    }

    #[test]
    fn interaction_matches_oracle_and_only_grows(seed in any::<u64>()) {
        let t = random_trace(&mut rng(seed), 6, 4);
        let full = interaction_map(&t, WeightingMode::Adaptive, Direction::ImageToText).unwrap();
        prop_assert!(max_abs_diff(&oracles::interaction_s_to_q(&t, &Alpha::Adaptive), &full.values) < 1e-12);
        let mut prev = DMatrix::zeros(t.layout.s, t.layout.q);
        for k in 1..=t.sites.len() {
            let prefix = attrel::trace::Trace { sites: t.sites[..k].to_vec(), ..t.clone() };
            let m = interaction_map(&prefix, WeightingMode::Adaptive, Direction::ImageToText).unwrap();
            prop_assert!(m.values.iter().zip(prev.iter()).all(|(a, b)| a >= b));
            prev = m.values;
        }
    }
}

#[test]
fn identity_attention_is_a_fixpoint() {
    let mut r = rng(5);
    for (s, q) in [(1, 1), (3, 2), (4, 4)] {
        let layout = ModalityLayout::new(s, q);
        let shapes: Vec<_> = SITE_SHAPES
            .iter()
            .copied()
            .filter(|(k, _, _)| *k != SiteKind::Cross)
            .collect();
        let mut t = random_trace_with(&mut r, layout, &shapes);
        for site in &mut t.sites {
            let n = site.n_query();
            for (a, g) in site.attention.iter_mut().zip(&mut site.attention_grad) {
                *a = DMatrix::identity(n, n);
                *g = DMatrix::from_element(n, n, 1.0);
            }
        }
        let out = propagate(&t, WeightingMode::Adaptive).unwrap();
        assert_eq!(out.values, DMatrix::identity(s + q, s + q));
        let scores = cls_explanation(&out);
        assert!(scores.image.iter().chain(&scores.text).all(|&v| v == 0.0));
    }
}

#[test]
fn mutual_map_is_zero_when_one_direction_is() {
    let mut r = rng(9);
    let layout = ModalityLayout::new(3, 2);
    // only image→text cross attention: the text→image map stays zero
    let t = random_trace_with(&mut r, layout, &[SITE_SHAPES[1], SITE_SHAPES[3]]);
    let sq = interaction_map(&t, WeightingMode::Adaptive, Direction::ImageToText).unwrap();
    let qs = interaction_map(&t, WeightingMode::Adaptive, Direction::TextToImage).unwrap();
    assert_eq!(qs.values, DMatrix::zeros(2, 3));
    let mutual = mutual_interaction(&sq, &qs).unwrap();
    assert!(mutual.mutual);
    assert_eq!(mutual.values, DMatrix::zeros(3, 2));
}

#[test]
fn fixed_half_differs_from_adaptive_on_generic_traces() {
    let mut r = rng(13);
    let t = random_trace(&mut r, 8, 4);
    let a = propagate(&t, WeightingMode::Adaptive).unwrap();
    let b = propagate(&t, WeightingMode::Fixed(0.5)).unwrap();
    assert_ne!(a.values, b.values);
}
