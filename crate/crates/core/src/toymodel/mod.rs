// SPDX-License-Identifier: MIT OR Apache-2.0

//! A desk-scale multi-modal transformer with exact reverse-mode gradients.
//!
//! Two topologies are supported:
//!
//! - **A** (single stream): image and text tokens are concatenated and pass
//!   through joint self-attention + feed-forward blocks.
//! - **B** (dual stream): each modality has its own branch. Per layer both
//!   branches run self-attention, then the image branch cross-attends to the
//!   text branch and the text branch cross-attends to the updated image
//!   branch, then each branch runs its feed-forward block.
//!
//! Image patches go through a fixed random projection and text tokens
//! through a fixed random embedding table; only the positional embeddings,
//! the transformer layers and the output head are trained.
//!
//! In caption mode the output head reads text positions and predicts the
//! next token. Text attends causally, the image cannot attend to text, and
//! topology B drops the image branch's cross-attention.

mod model;
mod params;
mod task;
mod train;

pub use model::{
    backward, emit_trace, forward, forward_probed, generate_caption, predict, target_logit, ForwardPass, Gradients,
    ModelError, ModelInput, Probe, Readout, SiteGradients,
};
pub use params::{
    load_params, params_from_str, params_to_string, save_params, AttnWeights, FfnWeights, LayerWeights, ToyModelParams,
};
pub use task::{
    derive_label, generate_dataset, held_out_seed, permute_irrelevant, raw_dim, sample, Property, SyntheticExample,
    Vocab, FILLER_WORDS, NOISE_DIMS,
};
pub use train::{evaluate, train, TrainConfig, TrainError, TrainReport};

use std::fmt;
use std::str::FromStr;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Topology {
    /// Single stream, joint self-attention.
    A,
    /// Dual stream with cross-attention.
    B,
}

impl fmt::Display for Topology {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::A => "A",
            Self::B => "B",
        })
    }
}

impl FromStr for Topology {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "A" | "a" => Ok(Self::A),
            "B" | "b" => Ok(Self::B),
            other => Err(format!("unknown topology `{other}` (expected A or B)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    pub topology: Topology,
    pub layers: usize,
    pub heads: usize,
    pub d: usize,
    /// Image-side tokens including `[CLS]`.
    pub s: usize,
    /// Text-side tokens (maximum prefix length in caption mode).
    pub q: usize,
    /// Values per property; also the answer-class count.
    pub classes: usize,
    pub seed: u64,
    pub caption: bool,
    /// Hidden width of the feed-forward blocks.
    pub ffn: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            topology: Topology::A,
            layers: 2,
            heads: 4,
            d: 32,
            s: 16,
            q: 8,
            classes: 4,
            seed: 7,
            caption: false,
            ffn: 64,
        }
    }
}

impl ModelConfig {
    pub fn vocab(&self) -> Vocab {
        Vocab::new(self.classes)
    }

    /// Width of the output head.
    pub fn outputs(&self) -> usize {
        if self.caption {
            self.vocab().size()
        } else {
            self.classes
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d / self.heads
    }

    pub fn validate(&self) -> Result<(), String> {
        let mut errs = Vec::new();
        if self.layers < 1 {
            errs.push("layers must be >= 1".to_string());
        }
        if self.heads < 1 || !self.d.is_multiple_of(self.heads) {
            errs.push(format!(
                "d={} must be a positive multiple of heads={}",
                self.d, self.heads
            ));
        }
        if self.d < 1 {
            errs.push("d must be >= 1".into());
        }
        if self.classes < 2 {
            errs.push("classes must be >= 2".into());
        }
        if self.s < 2 {
            errs.push("s must be >= 2 ([CLS] plus at least one patch)".into());
        }
        if self.q < 1 {
            errs.push("q must be >= 1".into());
        }
        if self.ffn < 1 {
            errs.push("ffn must be >= 1".into());
        }
        if self.caption && self.q < 4 {
            errs.push("caption mode needs q >= 4".into());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(errs.join("; "))
        }
    }
}
