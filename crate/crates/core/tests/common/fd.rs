// SPDX-License-Identifier: MIT OR Apache-2.0

use attrel::toymodel::{
    backward, forward, forward_probed, raw_dim, ModelConfig, ModelInput, Probe, Readout, Topology, ToyModelParams,
    Vocab,
};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub const STEP: f64 = 1e-4;
/// Fourth-order central difference of `f` at 0. Randomized parameters
/// give sharp softmaxes, where the plain two-point stencil is off by more
/// than the tolerance.
pub fn derivative(f: impl Fn(f64) -> f64) -> f64 {
    (8.0 * (f(STEP) - f(-STEP)) - (f(2.0 * STEP) - f(-2.0 * STEP))) / (12.0 * STEP)
}

/// Denominator floor of the relative error, so that vanishing gradients
/// are compared absolutely.
pub const REL_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone)]
pub struct FdReport {
    pub max_rel_error: f64,
    pub coordinates: usize,
    pub worst: String,
}

impl FdReport {
    fn record(&mut self, what: impl FnOnce() -> String, analytic: f64, numeric: f64) {
        let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR);
        self.coordinates += 1;
        if err > self.max_rel_error || !err.is_finite() {
            self.max_rel_error = if err.is_finite() { err } else { f64::INFINITY };
            self.worst = format!("{} analytic={analytic} numeric={numeric}", what());
        }
    }
}

/// Small config: at most 4 tokens in the traced input, `d ≤ 8`.
pub fn random_small_config(rng: &mut impl Rng) -> ModelConfig {
    let topology = if rng.random_bool(0.5) { Topology::A } else { Topology::B };
    let caption = rng.random_bool(0.3);
    let heads = rng.random_range(1..=2);
    let d = heads * rng.random_range(1..=4);
    let s = rng.random_range(1..=3);
    let q = if caption {
        4
    } else {
        rng.random_range(1..=(4 - s).max(1))
    };
    ModelConfig {
        topology,
        layers: rng.random_range(1..=2),
        heads,
        d,
        s,
        q,
        classes: rng.random_range(2..=3),
        seed: rng.random(),
        caption,
        ffn: rng.random_range(2..=4),
    }
}

/// Seeded parameters with every tensor (biases included) randomized, so no
/// gradient is structurally zero.
pub fn random_params(config: &ModelConfig, seed: u64) -> ToyModelParams {
    let mut p = ToyModelParams::init(config);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xfd);
    let n = Normal::new(0.0, 0.7).unwrap();
    for (_, t) in p.tensors_mut() {
        t.iter_mut().for_each(|x| *x += n.sample(&mut rng));
    }
    p
}

/// Random image features, text, readout and target class for a config.
pub fn traced_input(config: &ModelConfig, seed: u64) -> (DMatrix<f64>, Vec<usize>, Readout, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = Normal::new(0.0, 1.0).unwrap();
    let image = DMatrix::from_fn(config.s, raw_dim(config.classes), |_, _| n.sample(&mut rng));
    let vocab = config.vocab().size();
    let (text, readout) = if config.caption {
        let len = (4usize.saturating_sub(config.s)).clamp(1, 3);
        let mut t = vec![Vocab::BOS];
        t.extend((1..len).map(|_| rng.random_range(0..vocab)));
        let ro = Readout::text(config, len - 1);
        (t, ro)
    } else {
        (
            (0..config.q).map(|_| rng.random_range(0..vocab)).collect(),
            Readout::CLS,
        )
    };
    let class = (seed as usize) % config.outputs();
    (image, text, readout, class)
}

/// Compare every analytic gradient of the target logit (all parameters,
/// all attention matrices, all tokens in/out) with central differences.
pub fn check_all_gradients(config: &ModelConfig, seed: u64) -> FdReport {
    let params = random_params(config, seed);
    let (image, text, readout, class) = traced_input(config, seed);
    let input = ModelInput::new(&image, &text);
    let pass = forward(&params, input).unwrap();
    let mut e = DVector::zeros(config.outputs());
    e[class] = 1.0;
    let grads = backward(&params, &pass, &[(readout, e)]).unwrap();
    let mut report = FdReport {
        max_rel_error: 0.0,
        coordinates: 0,
        worst: String::new(),
    };

    let logit = |p: &ToyModelParams, probe: Option<(Probe, f64)>| {
        forward_probed(p, input, probe).unwrap().logits(p, readout)[class]
    };

    let analytic: Vec<(String, DMatrix<f64>)> = grads
        .params
        .tensors()
        .into_iter()
        .map(|(n, t)| (n, t.clone()))
        .collect();
    for (ti, (name, g)) in analytic.iter().enumerate() {
        for idx in 0..g.len() {
            let numeric = derivative(|h| {
                let mut p = params.clone();
                p.tensors_mut()[ti].1[idx] += h;
                logit(&p, None)
            });
            report.record(|| format!("param {name}[{idx}]"), g[idx], numeric);
        }
    }

    let central = |probe: &dyn Fn(f64) -> Probe| derivative(|h| logit(&params, Some((probe(h), h))));
    for (site, sg) in grads.sites.iter().enumerate() {
        for (head, ga) in sg.attention.iter().enumerate() {
            for row in 0..ga.nrows() {
                for col in 0..ga.ncols() {
                    let n = central(&|_| Probe::Attention { site, head, row, col });
                    report.record(
                        || format!("site {site} attention[{head}][{row},{col}]"),
                        ga[(row, col)],
                        n,
                    );
                }
            }
        }
        for row in 0..sg.tokens_in.nrows() {
            for col in 0..sg.tokens_in.ncols() {
                let n = central(&|_| Probe::TokensIn { site, row, col });
                report.record(
                    || format!("site {site} tokens_in[{row},{col}]"),
                    sg.tokens_in[(row, col)],
                    n,
                );
                let n = central(&|_| Probe::TokensOut { site, row, col });
                report.record(
                    || format!("site {site} tokens_out[{row},{col}]"),
                    sg.tokens_out[(row, col)],
                    n,
                );
            }
        }
    }
    report
}
