// SPDX-License-Identifier: MIT OR Apache-2.0

use std::sync::OnceLock;

use attrel::toymodel::{
    generate_dataset, held_out_seed, train, ModelConfig, SyntheticExample, Topology, ToyModelParams, TrainConfig,
};

pub const TRAIN_EXAMPLES: usize = 5000;
pub const HELD_OUT: usize = 500;

pub fn default_config(topology: Topology, caption: bool) -> ModelConfig {
    ModelConfig {
        topology,
        caption,
        ..ModelConfig::default()
    }
}

pub fn train_default(topology: Topology, caption: bool) -> ToyModelParams {
    let cfg = default_config(topology, caption);
    let data = generate_dataset(&cfg, TRAIN_EXAMPLES, cfg.seed);
    train(&cfg, &data, &TrainConfig::for_model(&cfg))
        .expect("training converges")
        .0
}

/// Default-config question-answering model for topology A, trained once per test binary.
pub fn trained_a() -> &'static ToyModelParams {
    static P: OnceLock<ToyModelParams> = OnceLock::new();
    P.get_or_init(|| train_default(Topology::A, false))
}

pub fn held_out(config: &ModelConfig) -> Vec<SyntheticExample> {
    generate_dataset(config, HELD_OUT, held_out_seed(config.seed))
}
