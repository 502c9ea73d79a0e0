// SPDX-License-Identifier: MIT OR Apache-2.0

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{raw_dim, ModelConfig, Topology};
use crate::textfmt::{self, LineCursor, ParseError};
use crate::trace::{read_file, row_major, write_file, TraceError};

const PARAMS_HEADER: &str = "ATTPARAMS v1";

#[derive(Debug, Clone, PartialEq)]
pub struct AttnWeights {
    pub wq: DMatrix<f64>,
    pub wk: DMatrix<f64>,
    pub wv: DMatrix<f64>,
    pub wo: DMatrix<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FfnWeights {
    pub w1: DMatrix<f64>,
    /// `1 × ffn`
    pub b1: DMatrix<f64>,
    pub w2: DMatrix<f64>,
    /// `1 × d`
    pub b2: DMatrix<f64>,
}

/// One layer. Topology A has one attention block and one feed-forward block;
/// topology B has `[self_s, self_q, cross_s, cross_q]` (no `cross_s` in
/// caption mode) and `[ffn_s, ffn_q]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub attn: Vec<AttnWeights>,
    pub ffn: Vec<FfnWeights>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyModelParams {
    pub config: ModelConfig,
    /// Frozen `raw_dim × d` patch projection.
    pub image_embed: DMatrix<f64>,
    /// Frozen `vocab × d` token table.
    pub token_embed: DMatrix<f64>,
    pub image_pos: DMatrix<f64>,
    pub text_pos: DMatrix<f64>,
    pub layers: Vec<LayerWeights>,
    pub head_w: DMatrix<f64>,
    /// `1 × outputs`
    pub head_b: DMatrix<f64>,
}

pub(crate) fn attn_slot_names(config: &ModelConfig) -> Vec<&'static str> {
    match (config.topology, config.caption) {
        (Topology::A, _) => vec!["attn"],
        (Topology::B, false) => vec!["self_s", "self_q", "cross_s", "cross_q"],
        (Topology::B, true) => vec!["self_s", "self_q", "cross_q"],
    }
}

pub(crate) fn ffn_slot_names(config: &ModelConfig) -> Vec<&'static str> {
    match config.topology {
        Topology::A => vec!["ffn"],
        Topology::B => vec!["ffn_s", "ffn_q"],
    }
}

impl ToyModelParams {
    /// All-zero parameters with the shapes implied by `config`.
    pub fn zeros(config: &ModelConfig) -> Self {
        let d = config.d;
        let z = DMatrix::zeros;
        let layers = (0..config.layers)
            .map(|_| LayerWeights {
                attn: attn_slot_names(config)
                    .iter()
                    .map(|_| AttnWeights {
                        wq: z(d, d),
                        wk: z(d, d),
                        wv: z(d, d),
                        wo: z(d, d),
                    })
                    .collect(),
                ffn: ffn_slot_names(config)
                    .iter()
                    .map(|_| FfnWeights {
                        w1: z(d, config.ffn),
                        b1: z(1, config.ffn),
                        w2: z(config.ffn, d),
                        b2: z(1, d),
                    })
                    .collect(),
            })
            .collect();
        Self {
            config: config.clone(),
            image_embed: z(raw_dim(config.classes), d),
            token_embed: z(config.vocab().size(), d),
            image_pos: z(config.s, d),
            text_pos: z(config.q, d),
            layers,
            head_w: z(d, config.outputs()),
            head_b: z(1, config.outputs()),
        }
    }

    /// Random initialization seeded by `config.seed`.
    pub fn init(config: &ModelConfig) -> Self {
        let mut p = Self::zeros(config);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let d = config.d as f64;
        let ffn = config.ffn as f64;
        let mut fill = |m: &mut DMatrix<f64>, std: f64| {
            let dist = Normal::new(0.0, std).expect("positive std");
            for v in m.iter_mut() {
                *v = dist.sample(&mut rng);
            }
        };
        fill(&mut p.image_embed, 1.0);
        fill(&mut p.token_embed, 1.0);
        fill(&mut p.image_pos, 0.1);
        fill(&mut p.text_pos, 0.1);
        for layer in &mut p.layers {
            for a in &mut layer.attn {
                fill(&mut a.wq, 1.0 / d.sqrt());
                fill(&mut a.wk, 1.0 / d.sqrt());
                fill(&mut a.wv, 1.0 / d.sqrt());
                fill(&mut a.wo, 0.5 / d.sqrt());
            }
            for f in &mut layer.ffn {
                fill(&mut f.w1, 1.0 / d.sqrt());
                fill(&mut f.w2, 0.5 / ffn.sqrt());
            }
        }
        fill(&mut p.head_w, 1.0 / d.sqrt());
        p
    }

    /// Every tensor with its checkpoint name, in a fixed order.
    pub fn tensors(&self) -> Vec<(String, &DMatrix<f64>)> {
        let mut out: Vec<(String, &DMatrix<f64>)> = vec![
            ("image_embed".into(), &self.image_embed),
            ("token_embed".into(), &self.token_embed),
            ("image_pos".into(), &self.image_pos),
            ("text_pos".into(), &self.text_pos),
        ];
        let attn_names = attn_slot_names(&self.config);
        let ffn_names = ffn_slot_names(&self.config);
        for (l, layer) in self.layers.iter().enumerate() {
            for (a, name) in layer.attn.iter().zip(&attn_names) {
                out.push((format!("layer{l}.{name}.wq"), &a.wq));
                out.push((format!("layer{l}.{name}.wk"), &a.wk));
                out.push((format!("layer{l}.{name}.wv"), &a.wv));
                out.push((format!("layer{l}.{name}.wo"), &a.wo));
            }
            for (f, name) in layer.ffn.iter().zip(&ffn_names) {
                out.push((format!("layer{l}.{name}.w1"), &f.w1));
                out.push((format!("layer{l}.{name}.b1"), &f.b1));
                out.push((format!("layer{l}.{name}.w2"), &f.w2));
                out.push((format!("layer{l}.{name}.b2"), &f.b2));
            }
        }
        out.push(("head.w".into(), &self.head_w));
        out.push(("head.b".into(), &self.head_b));
        out
    }

    /// Mutable counterpart of [`Self::tensors`], same order.
    pub fn tensors_mut(&mut self) -> Vec<(String, &mut DMatrix<f64>)> {
        let attn_names = attn_slot_names(&self.config);
        let ffn_names = ffn_slot_names(&self.config);
        let mut out: Vec<(String, &mut DMatrix<f64>)> = vec![
            ("image_embed".into(), &mut self.image_embed),
            ("token_embed".into(), &mut self.token_embed),
            ("image_pos".into(), &mut self.image_pos),
            ("text_pos".into(), &mut self.text_pos),
        ];
        for (l, layer) in self.layers.iter_mut().enumerate() {
            for (a, name) in layer.attn.iter_mut().zip(&attn_names) {
                out.push((format!("layer{l}.{name}.wq"), &mut a.wq));
                out.push((format!("layer{l}.{name}.wk"), &mut a.wk));
                out.push((format!("layer{l}.{name}.wv"), &mut a.wv));
                out.push((format!("layer{l}.{name}.wo"), &mut a.wo));
            }
            for (f, name) in layer.ffn.iter_mut().zip(&ffn_names) {
                out.push((format!("layer{l}.{name}.w1"), &mut f.w1));
                out.push((format!("layer{l}.{name}.b1"), &mut f.b1));
                out.push((format!("layer{l}.{name}.w2"), &mut f.w2));
                out.push((format!("layer{l}.{name}.b2"), &mut f.b2));
            }
        }
        out.push(("head.w".into(), &mut self.head_w));
        out.push(("head.b".into(), &mut self.head_b));
        out
    }

    /// The fixed encoder-side tensors that training leaves untouched.
    pub fn is_frozen(name: &str) -> bool {
        matches!(name, "image_embed" | "token_embed")
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|(_, m)| m.iter().all(|v| v.is_finite()))
    }
}

fn config_line(c: &ModelConfig) -> String {
    format!(
        "config topology={} layers={} heads={} d={} s={} q={} classes={} seed={} caption={} ffn={}",
        c.topology,
        c.layers,
        c.heads,
        c.d,
        c.s,
        c.q,
        c.classes,
        c.seed,
        u8::from(c.caption),
        c.ffn
    )
}

pub fn params_to_string(p: &ToyModelParams) -> String {
    let mut out = String::new();
    out.push_str(PARAMS_HEADER);
    out.push('\n');
    out.push_str(&config_line(&p.config));
    out.push('\n');
    for (name, m) in p.tensors() {
        let _ = writeln!(out, "tensor name={name} rows={} cols={}", m.nrows(), m.ncols());
        out.push_str("values:\n");
        textfmt::write_values(&mut out, &row_major(m), m.ncols());
    }
    out
}

pub fn params_from_str(text: &str) -> Result<ToyModelParams, TraceError> {
    let mut cur = LineCursor::new(text);
    match cur.next_line() {
        Some((_, PARAMS_HEADER)) => {}
        Some((n, l)) => {
            return Err(ParseError::new(n, format!("expected `{PARAMS_HEADER}` header, found `{l}`")).into())
        }
        None => return Err(ParseError::new(1, "empty checkpoint").into()),
    }
    let rec = cur.expect_record("config")?;
    let topology = rec
        .raw("topology")?
        .parse()
        .map_err(|e: String| ParseError::new(rec.line, e))?;
    let config = ModelConfig {
        topology,
        layers: rec.count("layers")?,
        heads: rec.count("heads")?,
        d: rec.count("d")?,
        s: rec.count("s")?,
        q: rec.count("q")?,
        classes: rec.count("classes")?,
        seed: rec.count("seed")? as u64,
        caption: rec.count("caption")? != 0,
        ffn: rec.count("ffn")?,
    };
    config
        .validate()
        .map_err(|e| ParseError::new(rec.line, format!("invalid config: {e}")))?;
    let mut params = ToyModelParams::zeros(&config);
    for (name, m) in params.tensors_mut() {
        let rec = cur.expect_record("tensor")?;
        let found = rec.raw("name")?;
        if found != name {
            return Err(ParseError::new(rec.line, format!("expected tensor `{name}`, found `{found}`")).into());
        }
        let (rows, cols) = (rec.count("rows")?, rec.count("cols")?);
        if (rows, cols) != m.shape() {
            return Err(ParseError::new(
                rec.line,
                format!(
                    "tensor `{name}` is {rows}x{cols}, config requires {}x{}",
                    m.nrows(),
                    m.ncols()
                ),
            )
            .into());
        }
        let flat = cur.expect_tensor("values", rows * cols)?;
        *m = DMatrix::from_row_slice(rows, cols, &flat);
    }
    if let Some((n, l)) = cur.peek() {
        return Err(ParseError::new(n, format!("unexpected trailing content `{l}`")).into());
    }
    Ok(params)
}

pub fn save_params(p: &ToyModelParams, path: impl AsRef<Path>) -> Result<(), TraceError> {
    write_file(path.as_ref(), &params_to_string(p))
}

pub fn load_params(path: impl AsRef<Path>) -> Result<ToyModelParams, TraceError> {
    params_from_str(&read_file(path.as_ref())?)
}
