// SPDX-License-Identifier: MIT OR Apache-2.0

//! The planted-signal task.
//!
//! Every image is a grid of `s − 1` patches (plus the empty `[CLS]` slot at
//! index 0). Each patch carries a color and a shape one-hot; exactly one
//! patch also carries a flag feature. The question names the property to
//! read off the flagged patch, and the answer is that property's value. The
//! caption of an image is `<color> <shape> object`.

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::ModelConfig;

/// Extra Gaussian feature columns carried by every patch.
pub const NOISE_DIMS: usize = 3;
/// Number of distinct filler words.
pub const FILLER_WORDS: usize = 4;
/// Standard deviation of the noise columns.
const NOISE_STD: f64 = 0.5;
/// Scale of the property one-hots of patches without the flag.
const DISTRACTOR_SCALE: f64 = 1.0;

/// Token ids for `values` property values per property.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Vocab {
    pub values: usize,
}

impl Vocab {
    pub const BOS: usize = 0;
    pub const EOS: usize = 1;
    pub const OBJECT: usize = 2;
    pub const ASK_COLOR: usize = 3;
    pub const ASK_SHAPE: usize = 4;

    pub const fn new(values: usize) -> Self {
        Self { values }
    }

    pub const fn color_word(&self, c: usize) -> usize {
        5 + c
    }

    pub const fn shape_word(&self, h: usize) -> usize {
        5 + self.values + h
    }

    pub const fn filler(&self, f: usize) -> usize {
        5 + 2 * self.values + f
    }

    pub const fn size(&self) -> usize {
        5 + 2 * self.values + FILLER_WORDS
    }

    pub fn is_filler(&self, t: usize) -> bool {
        t >= self.filler(0) && t < self.size()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Property {
    Color,
    Shape,
}

/// Feature width of one patch for `values` values per property.
pub const fn raw_dim(values: usize) -> usize {
    1 + 2 * values + NOISE_DIMS
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticExample {
    /// `s × raw_dim` patch features; row 0 is the empty `[CLS]` slot.
    pub image: DMatrix<f64>,
    /// Question tokens, length `q`.
    pub text: Vec<usize>,
    pub label: usize,
    /// Joint indices of the tokens that determine the label, ascending.
    pub relevant: Vec<usize>,
    pub planted: usize,
    pub color: usize,
    pub shape: usize,
    pub query: Property,
}

impl SyntheticExample {
    /// Reference caption (no BOS/EOS).
    pub fn caption(&self, vocab: Vocab) -> Vec<usize> {
        vec![
            vocab.color_word(self.color),
            vocab.shape_word(self.shape),
            Vocab::OBJECT,
        ]
    }

    /// Relevant image patches only (joint indices).
    pub fn relevant_patches(&self) -> Vec<usize> {
        vec![self.planted]
    }
}

/// Recompute the answer from the raw content: the flagged patch's queried
/// property. `None` when there is no flagged patch or no question token.
pub fn derive_label(image: &DMatrix<f64>, text: &[usize], values: usize) -> Option<usize> {
    let flagged = (1..image.nrows()).find(|&r| image[(r, 0)] > 0.5)?;
    let query = text.iter().find_map(|&t| match t {
        Vocab::ASK_COLOR => Some(Property::Color),
        Vocab::ASK_SHAPE => Some(Property::Shape),
        _ => None,
    })?;
    let base = match query {
        Property::Color => 1,
        Property::Shape => 1 + values,
    };
    (0..values).max_by(|&a, &b| {
        image[(flagged, base + a)]
            .partial_cmp(&image[(flagged, base + b)])
            .unwrap_or(std::cmp::Ordering::Equal)
    })
}

/// Draw one example.
pub fn sample(config: &ModelConfig, rng: &mut impl Rng) -> SyntheticExample {
    let values = config.classes;
    let vocab = Vocab::new(values);
    let (s, q) = (config.s, config.q);
    let noise = Normal::new(0.0, NOISE_STD).expect("valid std");
    let width = raw_dim(values);

    let planted = rng.random_range(1..s);
    let color = rng.random_range(0..values);
    let shape = rng.random_range(0..values);
    let query = if rng.random_bool(0.5) {
        Property::Color
    } else {
        Property::Shape
    };

    let mut image = DMatrix::zeros(s, width);
    for r in 1..s {
        let (c, h, scale) = if r == planted {
            (color, shape, 1.0)
        } else {
            (
                rng.random_range(0..values),
                rng.random_range(0..values),
                DISTRACTOR_SCALE,
            )
        };
        if r == planted {
            image[(r, 0)] = 1.0;
        }
        image[(r, 1 + c)] = scale;
        image[(r, 1 + values + h)] = scale;
        for k in 0..NOISE_DIMS {
            image[(r, 1 + 2 * values + k)] = noise.sample(rng);
        }
    }

    let query_pos = rng.random_range(0..q);
    let text = (0..q)
        .map(|j| {
            if j == query_pos {
                match query {
                    Property::Color => Vocab::ASK_COLOR,
                    Property::Shape => Vocab::ASK_SHAPE,
                }
            } else {
                vocab.filler(rng.random_range(0..FILLER_WORDS))
            }
        })
        .collect();

    let label = match query {
        Property::Color => color,
        Property::Shape => shape,
    };
    SyntheticExample {
        image,
        text,
        label,
        relevant: vec![planted, s + query_pos],
        planted,
        color,
        shape,
        query,
    }
}

/// `n` examples drawn from a ChaCha stream seeded with `seed`.
pub fn generate_dataset(config: &ModelConfig, n: usize, seed: u64) -> Vec<SyntheticExample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| sample(config, &mut rng)).collect()
}

/// Seed of the held-out split belonging to a training seed.
pub const fn held_out_seed(seed: u64) -> u64 {
    seed ^ 0x005e_ed0f_7e57
}

/// Shuffle the patches and filler positions that do not carry the answer.
pub fn permute_irrelevant(ex: &SyntheticExample, rng: &mut impl Rng) -> SyntheticExample {
    let mut out = ex.clone();
    let s = ex.image.nrows();
    let mut patches: Vec<usize> = (1..s).filter(|&r| r != ex.planted).collect();
    let order = {
        let mut o = patches.clone();
        o.shuffle(rng);
        o
    };
    for (&dst, &src) in patches.iter().zip(&order) {
        out.image.set_row(dst, &ex.image.row(src));
    }
    let query_pos = ex.relevant[1] - s;
    patches = (0..ex.text.len()).filter(|&j| j != query_pos).collect();
    let mut order = patches.clone();
    order.shuffle(rng);
    for (&dst, &src) in patches.iter().zip(&order) {
        out.text[dst] = ex.text[src];
    }
    out
}
