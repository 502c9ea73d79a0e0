// SPDX-License-Identifier: MIT OR Apache-2.0

//! Explaining attention models by gradient-weighted relevance accumulation.
//!
//! - [`trace`]: attention traces and their text file format.
//! - [`relevance`]: relevance-map propagation, `[CLS]` explanations,
//!   interaction maps and caption-level aggregation.
//! - [`baselines`]: raw attention, rollout and GenAtt over the same traces.
//! - [`toymodel`]: a small single-/dual-stream multi-modal transformer with
//!   exact gradients, a planted-signal task and trace emission.
//! - [`explain`]: the named explanation methods.
//! - [`perturb`]: positive/negative perturbation curves and their AUC.
//! - [`heatmap`]: patch-score graymaps.
//! - [`cli`]: the `attrel` command line.

pub mod baselines;
pub mod cli;
pub mod explain;
pub mod heatmap;
pub mod perturb;
pub mod relevance;
pub mod textfmt;
pub mod toymodel;
pub mod trace;
