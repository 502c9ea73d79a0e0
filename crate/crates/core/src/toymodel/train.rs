// SPDX-License-Identifier: MIT OR Apache-2.0

//! Minibatch SGD on softmax cross-entropy.

use nalgebra::DVector;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use super::model::{backward, forward, generate_caption, predict, ModelError, ModelInput, Readout};
use super::params::ToyModelParams;
use super::{ModelConfig, SyntheticExample, Vocab};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Stop after this many parameter updates, if set.
    pub max_steps: Option<usize>,
    /// Seed of the minibatch shuffle.
    pub shuffle_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 3,
            batch_size: 32,
            learning_rate: 0.1,
            max_steps: None,
            shuffle_seed: 7,
        }
    }
}

impl TrainConfig {
    /// Defaults for a model: the summed next-token loss of caption mode
    /// needs a smaller step.
    pub fn for_model(config: &ModelConfig) -> Self {
        if config.caption {
            Self {
                epochs: 2,
                learning_rate: 0.02,
                shuffle_seed: config.seed,
                ..Self::default()
            }
        } else {
            Self {
                shuffle_seed: config.seed,
                ..Self::default()
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub steps: usize,
    /// Mean training loss per epoch.
    pub epoch_loss: Vec<f64>,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrainError {
    #[error("training diverged at step {step} (non-finite loss or parameters)")]
    Diverged { step: usize },
    #[error("invalid training setup: {0}")]
    Invalid(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|x| (x - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|x| x / z).collect()
}

/// Cross-entropy terms of one example: `(readout, target)` pairs and the text fed in.
fn supervision(config: &ModelConfig, ex: &SyntheticExample) -> (Vec<usize>, Vec<(Readout, usize)>) {
    if config.caption {
        let vocab = config.vocab();
        let mut input = vec![Vocab::BOS];
        input.extend(ex.caption(vocab));
        let mut targets = ex.caption(vocab);
        targets.push(Vocab::EOS);
        let pairs = targets
            .into_iter()
            .enumerate()
            .map(|(pos, t)| (Readout::text(config, pos), t))
            .collect();
        (input, pairs)
    } else {
        (ex.text.clone(), vec![(Readout::CLS, ex.label)])
    }
}

/// Loss and gradients of one example.
fn example_grad(params: &ToyModelParams, ex: &SyntheticExample) -> Result<(f64, ToyModelParams), ModelError> {
    let (text, pairs) = supervision(&params.config, ex);
    let pass = forward(params, ModelInput::new(&ex.image, &text))?;
    let mut loss = 0.0;
    let mut seeds = Vec::with_capacity(pairs.len());
    for (ro, target) in pairs {
        let mut p = softmax(&pass.logits(params, ro));
        loss -= p[target].ln();
        p[target] -= 1.0;
        seeds.push((ro, DVector::from_vec(p)));
    }
    Ok((loss, backward(params, &pass, &seeds)?.params))
}

/// Train from the config's seeded initialization.
pub fn train(
    config: &ModelConfig,
    dataset: &[SyntheticExample],
    tc: &TrainConfig,
) -> Result<(ToyModelParams, TrainReport), TrainError> {
    config.validate().map_err(TrainError::Invalid)?;
    if tc.batch_size == 0 {
        return Err(TrainError::Invalid("batch size must be >= 1".into()));
    }
    if !(tc.learning_rate.is_finite() && tc.learning_rate > 0.0) {
        return Err(TrainError::Invalid("learning rate must be positive".into()));
    }
    let mut params = ToyModelParams::init(config);
    let mut rng = ChaCha8Rng::seed_from_u64(tc.shuffle_seed);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut report = TrainReport {
        steps: 0,
        epoch_loss: Vec::new(),
    };
    let budget = tc.max_steps.unwrap_or(usize::MAX);
    'epochs: for _ in 0..tc.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut seen = 0;
        for batch in order.chunks(tc.batch_size) {
            if report.steps >= budget {
                break 'epochs;
            }
            let mut acc = ToyModelParams::zeros(config);
            let mut batch_loss = 0.0;
            for &i in batch {
                let (loss, g) = example_grad(&params, &dataset[i])?;
                batch_loss += loss;
                for ((_, a), (_, b)) in acc.tensors_mut().into_iter().zip(g.tensors()) {
                    *a += b;
                }
            }
            report.steps += 1;
            if !batch_loss.is_finite() {
                return Err(TrainError::Diverged { step: report.steps });
            }
            let scale = tc.learning_rate / batch.len() as f64;
            for ((name, p), (_, g)) in params.tensors_mut().into_iter().zip(acc.tensors()) {
                if !ToyModelParams::is_frozen(&name) {
                    *p -= g * scale;
                }
            }
            if !params.is_finite() {
                return Err(TrainError::Diverged { step: report.steps });
            }
            total += batch_loss;
            seen += batch.len();
        }
        report.epoch_loss.push(if seen > 0 { total / seen as f64 } else { 0.0 });
    }
    Ok((params, report))
}

/// Exact-match accuracy: the predicted class for question answering, the
/// full greedy caption in caption mode.
pub fn evaluate(params: &ToyModelParams, dataset: &[SyntheticExample]) -> Result<f64, ModelError> {
    if dataset.is_empty() {
        return Ok(0.0);
    }
    let vocab = params.config.vocab();
    let hits = dataset
        .par_iter()
        .map(|ex| {
            if params.config.caption {
                Ok(match generate_caption(params, ex) {
                    Ok(ct) => usize::from(ct.caption == ex.caption(vocab)),
                    Err(ModelError::EmptyCaption) => 0,
                    Err(e) => return Err(e),
                })
            } else {
                Ok(usize::from(predict(params, ex.input())? == ex.label))
            }
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(hits.iter().sum::<usize>() as f64 / dataset.len() as f64)
}
