// SPDX-License-Identifier: MIT OR Apache-2.0

use attrel::perturb::Explainer;
use attrel::relevance::{RelevanceError, TokenScores};
use attrel::toymodel::SyntheticExample;
use attrel::trace::Trace;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Uniform random scores, seeded per example.
pub struct RandomExplainer {
    pub seed: u64,
}

impl Explainer for RandomExplainer {
    fn name(&self) -> String {
        "random".into()
    }

    fn explain(&self, index: usize, _: &SyntheticExample, trace: &Trace) -> Result<TokenScores, RelevanceError> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed.wrapping_mul(0x9e37_79b9).wrapping_add(index as u64));
        Ok(TokenScores {
            image: (1..trace.layout.s).map(|_| rng.random()).collect(),
            text: (0..trace.layout.q).map(|_| rng.random()).collect(),
        })
    }
}

/// Score 1 on the tokens that determine the label, 0 elsewhere.
pub struct GroundTruthExplainer;

impl Explainer for GroundTruthExplainer {
    fn name(&self) -> String {
        "ground-truth".into()
    }

    fn explain(&self, _: usize, ex: &SyntheticExample, trace: &Trace) -> Result<TokenScores, RelevanceError> {
        let s = trace.layout.s;
        let mut scores = TokenScores {
            image: vec![0.0; s - 1],
            text: vec![0.0; trace.layout.q],
        };
        for &j in &ex.relevant {
            if j < s {
                scores.image[j - 1] = 1.0;
            } else {
                scores.text[j - s] = 1.0;
            }
        }
        Ok(scores)
    }
}
