// SPDX-License-Identifier: MIT OR Apache-2.0

//! Forward pass, exact reverse-mode backward pass and trace emission.
//!
//! The model is compiled from its config into a flat program of attention
//! and feed-forward ops acting on one (topology A) or two (topology B) token
//! streams. Every op adds its output back onto the stream it reads its
//! queries from. The backward pass walks the same program in reverse.

use nalgebra::{DMatrix, DVector, RowDVector};
use thiserror::Error;

use super::params::{AttnWeights, FfnWeights, ToyModelParams};
use super::{raw_dim, ModelConfig, SyntheticExample, Topology, Vocab};
use crate::trace::{AttentionSite, CaptionStep, CaptionTrace, Modality, ModalityLayout, SiteKind, Target, Trace};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("target class {class} out of range (model has {outputs} outputs)")]
    InvalidTarget { class: usize, outputs: usize },
    #[error("caption generation requires a caption-mode model")]
    NotCaptionModel,
    #[error("the model generated an empty caption")]
    EmptyCaption,
}

/// One model input. `masked` lists joint token indices whose input
/// embeddings are replaced by zeros.
#[derive(Debug, Clone, Copy)]
pub struct ModelInput<'a> {
    pub image: &'a DMatrix<f64>,
    pub text: &'a [usize],
    pub masked: &'a [usize],
}

impl<'a> ModelInput<'a> {
    pub fn new(image: &'a DMatrix<f64>, text: &'a [usize]) -> Self {
        Self {
            image,
            text,
            masked: &[],
        }
    }

    pub fn with_mask(self, masked: &'a [usize]) -> Self {
        Self { masked, ..self }
    }
}

impl SyntheticExample {
    pub fn input(&self) -> ModelInput<'_> {
        ModelInput::new(&self.image, &self.text)
    }
}

/// Where the output head reads: a row of one stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Readout {
    pub stream: usize,
    pub row: usize,
}

impl Readout {
    /// The `[CLS]` token (image side, index 0) in either topology.
    pub const CLS: Self = Self { stream: 0, row: 0 };

    /// Text position `pos`.
    pub fn text(config: &ModelConfig, pos: usize) -> Self {
        match config.topology {
            Topology::A => Self {
                stream: 0,
                row: config.s + pos,
            },
            Topology::B => Self { stream: 1, row: pos },
        }
    }
}

/// Perturbation point for finite-difference checks. Indices refer to the
/// attention sites in forward order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Probe {
    /// Added to the post-softmax attention of `head` before it weights the values.
    Attention {
        site: usize,
        head: usize,
        row: usize,
        col: usize,
    },
    /// Added to the query-side tokens at the block's entry; affects that
    /// block only (its attention input and its residual path).
    TokensIn { site: usize, row: usize, col: usize },
    /// Added to the attention output before the residual add.
    TokensOut { site: usize, row: usize, col: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Mask {
    None,
    /// Key `j` visible to query `i` iff `j <= i`.
    Causal,
    /// Joint caption mask: image rows see only image keys; text rows see the
    /// image and text keys up to their own position.
    JointCaption {
        s: usize,
    },
}

impl Mask {
    fn allows(self, i: usize, j: usize) -> bool {
        match self {
            Self::None => true,
            Self::Causal => j <= i,
            Self::JointCaption { s } => {
                if i < s {
                    j < s
                } else {
                    j < s || j <= i
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct AttnOp {
    layer: usize,
    slot: usize,
    q_stream: usize,
    kv_stream: usize,
    kind: SiteKind,
    q_mod: Modality,
    k_mod: Modality,
    mask: Mask,
}

#[derive(Debug, Clone, Copy)]
enum Op {
    Attn(AttnOp),
    Ffn { layer: usize, slot: usize, stream: usize },
}

fn program(config: &ModelConfig) -> Vec<Op> {
    let mut ops = Vec::new();
    for layer in 0..config.layers {
        match config.topology {
            Topology::A => {
                ops.push(Op::Attn(AttnOp {
                    layer,
                    slot: 0,
                    q_stream: 0,
                    kv_stream: 0,
                    kind: SiteKind::SelfJoint,
                    q_mod: Modality::Joint,
                    k_mod: Modality::Joint,
                    mask: if config.caption {
                        Mask::JointCaption { s: config.s }
                    } else {
                        Mask::None
                    },
                }));
                ops.push(Op::Ffn {
                    layer,
                    slot: 0,
                    stream: 0,
                });
            }
            Topology::B => {
                let unimodal = |slot, stream, m, mask| {
                    Op::Attn(AttnOp {
                        layer,
                        slot,
                        q_stream: stream,
                        kv_stream: stream,
                        kind: SiteKind::SelfUnimodal,
                        q_mod: m,
                        k_mod: m,
                        mask,
                    })
                };
                let cross = |slot, q_stream, q_mod, k_mod| {
                    Op::Attn(AttnOp {
                        layer,
                        slot,
                        q_stream,
                        kv_stream: 1 - q_stream,
                        kind: SiteKind::Cross,
                        q_mod,
                        k_mod,
                        mask: Mask::None,
                    })
                };
                ops.push(unimodal(0, 0, Modality::S, Mask::None));
                ops.push(unimodal(
                    1,
                    1,
                    Modality::Q,
                    if config.caption { Mask::Causal } else { Mask::None },
                ));
                if config.caption {
                    ops.push(cross(2, 1, Modality::Q, Modality::S));
                } else {
                    ops.push(cross(2, 0, Modality::S, Modality::Q));
                    ops.push(cross(3, 1, Modality::Q, Modality::S));
                }
                ops.push(Op::Ffn {
                    layer,
                    slot: 0,
                    stream: 0,
                });
                ops.push(Op::Ffn {
                    layer,
                    slot: 1,
                    stream: 1,
                });
            }
        }
    }
    ops
}

#[derive(Debug, Clone)]
struct AttnCache {
    xq: DMatrix<f64>,
    xkv: DMatrix<f64>,
    q: DMatrix<f64>,
    k: DMatrix<f64>,
    v: DMatrix<f64>,
    probs: Vec<DMatrix<f64>>,
    concat: DMatrix<f64>,
    out: DMatrix<f64>,
}

#[derive(Debug, Clone)]
struct FfnCache {
    x: DMatrix<f64>,
    pre: DMatrix<f64>,
    act: DMatrix<f64>,
}

#[derive(Debug, Clone)]
enum OpCache {
    Attn(AttnCache),
    Ffn(FfnCache),
}

/// Activations of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    ops: Vec<OpCache>,
    streams: Vec<DMatrix<f64>>,
    text_ids: Vec<usize>,
    image: DMatrix<f64>,
    masked: Vec<usize>,
    layout: ModalityLayout,
}

impl ForwardPass {
    /// Layout of this pass (`q` is the actual text length).
    pub fn layout(&self) -> ModalityLayout {
        self.layout
    }

    /// Output-head logits at `readout`.
    pub fn logits(&self, params: &ToyModelParams, readout: Readout) -> Vec<f64> {
        let x = self.streams[readout.stream].row(readout.row);
        let out = x * &params.head_w + &params.head_b;
        out.iter().copied().collect()
    }

    /// Number of attention sites.
    pub fn sites(&self) -> usize {
        self.ops.iter().filter(|c| matches!(c, OpCache::Attn(_))).count()
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

fn add_row_bias(m: &mut DMatrix<f64>, b: &DMatrix<f64>) {
    for mut row in m.row_iter_mut() {
        row += b;
    }
}

fn column_sums(m: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(1, m.ncols());
    for row in m.row_iter() {
        out += row;
    }
    out
}

fn softmax_rows(scores: &DMatrix<f64>, mask: Mask) -> DMatrix<f64> {
    let mut p = DMatrix::zeros(scores.nrows(), scores.ncols());
    for i in 0..scores.nrows() {
        let max = (0..scores.ncols())
            .filter(|&j| mask.allows(i, j))
            .map(|j| scores[(i, j)])
            .fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for j in 0..scores.ncols() {
            if mask.allows(i, j) {
                let e = (scores[(i, j)] - max).exp();
                p[(i, j)] = e;
                sum += e;
            }
        }
        for j in 0..scores.ncols() {
            p[(i, j)] /= sum;
        }
    }
    p
}

fn attn_forward(
    w: &AttnWeights,
    xq: DMatrix<f64>,
    xkv: DMatrix<f64>,
    heads: usize,
    mask: Mask,
    nudge: Option<(usize, usize, usize, f64)>,
) -> AttnCache {
    let d = xq.ncols();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let q = &xq * &w.wq;
    let k = &xkv * &w.wk;
    let v = &xkv * &w.wv;
    let mut concat = DMatrix::zeros(xq.nrows(), d);
    let mut probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = q.columns(h * dh, dh);
        let kh = k.columns(h * dh, dh);
        let vh = v.columns(h * dh, dh);
        let scores = (qh * kh.transpose()) * scale;
        let mut p = softmax_rows(&scores, mask);
        if let Some((nh, r, c, delta)) = nudge {
            if nh == h {
                p[(r, c)] += delta;
            }
        }
        concat.columns_mut(h * dh, dh).copy_from(&(&p * vh));
        probs.push(p);
    }
    let out = &concat * &w.wo;
    AttnCache {
        xq,
        xkv,
        q,
        k,
        v,
        probs,
        concat,
        out,
    }
}

/// Returns `(d_xq, d_xkv, dA per head)` and accumulates weight gradients.
fn attn_backward(
    w: &AttnWeights,
    c: &AttnCache,
    d_out: &DMatrix<f64>,
    heads: usize,
    g: &mut AttnWeights,
) -> (DMatrix<f64>, DMatrix<f64>, Vec<DMatrix<f64>>) {
    let d = c.xq.ncols();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    g.wo += c.concat.transpose() * d_out;
    let d_concat = d_out * w.wo.transpose();
    let mut dq = DMatrix::zeros(c.q.nrows(), d);
    let mut dk = DMatrix::zeros(c.k.nrows(), d);
    let mut dv = DMatrix::zeros(c.v.nrows(), d);
    let mut attn_grads = Vec::with_capacity(heads);
    for h in 0..heads {
        let p = &c.probs[h];
        let d_ctx = d_concat.columns(h * dh, dh);
        let vh = c.v.columns(h * dh, dh);
        let d_p = d_ctx * vh.transpose();
        dv.columns_mut(h * dh, dh).copy_from(&(p.transpose() * d_ctx));
        let mut d_s = DMatrix::zeros(p.nrows(), p.ncols());
        for i in 0..p.nrows() {
            let dot: f64 = p.row(i).dot(&d_p.row(i));
            for j in 0..p.ncols() {
                d_s[(i, j)] = p[(i, j)] * (d_p[(i, j)] - dot) * scale;
            }
        }
        let qh = c.q.columns(h * dh, dh);
        let kh = c.k.columns(h * dh, dh);
        dq.columns_mut(h * dh, dh).copy_from(&(&d_s * kh));
        dk.columns_mut(h * dh, dh).copy_from(&(d_s.transpose() * qh));
        attn_grads.push(d_p);
    }
    g.wq += c.xq.transpose() * &dq;
    g.wk += c.xkv.transpose() * &dk;
    g.wv += c.xkv.transpose() * &dv;
    let d_xq = dq * w.wq.transpose();
    let d_xkv = dk * w.wk.transpose() + dv * w.wv.transpose();
    (d_xq, d_xkv, attn_grads)
}

fn ffn_forward(w: &FfnWeights, x: DMatrix<f64>) -> (FfnCache, DMatrix<f64>) {
    let mut pre = &x * &w.w1;
    add_row_bias(&mut pre, &w.b1);
    let act = pre.map(gelu);
    let mut out = &act * &w.w2;
    add_row_bias(&mut out, &w.b2);
    (FfnCache { x, pre, act }, out)
}

/// Returns the gradient w.r.t. the block input (excluding the residual).
fn ffn_backward(w: &FfnWeights, c: &FfnCache, d_out: &DMatrix<f64>, g: &mut FfnWeights) -> DMatrix<f64> {
    g.w2 += c.act.transpose() * d_out;
    g.b2 += column_sums(d_out);
    let d_act = d_out * w.w2.transpose();
    let d_pre = d_act.zip_map(&c.pre, |da, p| da * gelu_grad(p));
    g.w1 += c.x.transpose() * &d_pre;
    g.b1 += column_sums(&d_pre);
    d_pre * w.w1.transpose()
}

fn check_input(config: &ModelConfig, input: &ModelInput<'_>) -> Result<(), ModelError> {
    let want = (config.s, raw_dim(config.classes));
    if input.image.shape() != want {
        return Err(ModelError::Shape(format!(
            "image is {:?}, config requires {want:?}",
            input.image.shape()
        )));
    }
    if input.text.is_empty() || input.text.len() > config.q {
        return Err(ModelError::Shape(format!(
            "text has {} tokens, config allows 1..={}",
            input.text.len(),
            config.q
        )));
    }
    let vocab = config.vocab().size();
    if let Some(t) = input.text.iter().find(|&&t| t >= vocab) {
        return Err(ModelError::Shape(format!("token id {t} outside vocabulary of {vocab}")));
    }
    let n = config.s + input.text.len();
    if let Some(m) = input.masked.iter().find(|&&m| m >= n) {
        return Err(ModelError::Shape(format!("masked index {m} outside {n} tokens")));
    }
    Ok(())
}

/// Run the model.
pub fn forward(params: &ToyModelParams, input: ModelInput<'_>) -> Result<ForwardPass, ModelError> {
    forward_probed(params, input, None)
}

/// Run the model with one scalar added at a probe point.
pub fn forward_probed(
    params: &ToyModelParams,
    input: ModelInput<'_>,
    probe: Option<(Probe, f64)>,
) -> Result<ForwardPass, ModelError> {
    let config = &params.config;
    check_input(config, &input)?;
    let (s, t) = (config.s, input.text.len());

    let mut x_img = input.image * &params.image_embed + &params.image_pos;
    let mut x_txt = DMatrix::zeros(t, config.d);
    for (j, &id) in input.text.iter().enumerate() {
        x_txt.set_row(j, &(params.token_embed.row(id) + params.text_pos.row(j)));
    }
    for &m in input.masked {
        if m < s {
            x_img.row_mut(m).fill(0.0);
        } else {
            x_txt.row_mut(m - s).fill(0.0);
        }
    }
    let mut streams = match config.topology {
        Topology::A => {
            let mut joint = DMatrix::zeros(s + t, config.d);
            joint.rows_mut(0, s).copy_from(&x_img);
            joint.rows_mut(s, t).copy_from(&x_txt);
            vec![joint]
        }
        Topology::B => vec![x_img, x_txt],
    };

    let mut caches = Vec::new();
    let mut site = 0;
    for op in program(config) {
        match op {
            Op::Attn(a) => {
                let w = &params.layers[a.layer].attn[a.slot];
                let mut xq = streams[a.q_stream].clone();
                let mut attn_nudge = None;
                let mut out_nudge = None;
                match probe {
                    Some((Probe::TokensIn { site: p, row, col }, delta)) if p == site => xq[(row, col)] += delta,
                    Some((
                        Probe::Attention {
                            site: p,
                            head,
                            row,
                            col,
                        },
                        delta,
                    )) if p == site => {
                        attn_nudge = Some((head, row, col, delta));
                    }
                    Some((Probe::TokensOut { site: p, row, col }, delta)) if p == site => {
                        out_nudge = Some((row, col, delta));
                    }
                    _ => {}
                }
                let xkv = if a.kv_stream == a.q_stream {
                    xq.clone()
                } else {
                    streams[a.kv_stream].clone()
                };
                let mut cache = attn_forward(w, xq, xkv, config.heads, a.mask, attn_nudge);
                if let Some((r, c, delta)) = out_nudge {
                    cache.out[(r, c)] += delta;
                }
                streams[a.q_stream] = &cache.xq + &cache.out;
                caches.push(OpCache::Attn(cache));
                site += 1;
            }
            Op::Ffn { layer, slot, stream } => {
                let w = &params.layers[layer].ffn[slot];
                let (cache, out) = ffn_forward(w, streams[stream].clone());
                streams[stream] = &cache.x + out;
                caches.push(OpCache::Ffn(cache));
            }
        }
    }
    Ok(ForwardPass {
        ops: caches,
        streams,
        text_ids: input.text.to_vec(),
        image: input.image.clone(),
        masked: input.masked.to_vec(),
        layout: ModalityLayout::new(s, t),
    })
}

/// Gradients of one attention site.
#[derive(Debug, Clone, PartialEq)]
pub struct SiteGradients {
    pub attention: Vec<DMatrix<f64>>,
    pub tokens_in: DMatrix<f64>,
    pub tokens_out: DMatrix<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub params: ToyModelParams,
    /// One entry per attention site, forward order.
    pub sites: Vec<SiteGradients>,
    /// Gradient w.r.t. the embedded input tokens (joint order).
    pub input: DMatrix<f64>,
}

/// Backpropagate `seeds` (upstream gradients on the logits at each readout)
/// through a forward pass.
pub fn backward(
    params: &ToyModelParams,
    pass: &ForwardPass,
    seeds: &[(Readout, DVector<f64>)],
) -> Result<Gradients, ModelError> {
    let config = &params.config;
    let outputs = config.outputs();
    let mut g = ToyModelParams::zeros(config);
    let mut d_streams: Vec<DMatrix<f64>> = pass
        .streams
        .iter()
        .map(|m| DMatrix::zeros(m.nrows(), m.ncols()))
        .collect();
    for (ro, dl) in seeds {
        if dl.len() != outputs {
            return Err(ModelError::Shape(format!(
                "logit seed has {} entries, model has {outputs}",
                dl.len()
            )));
        }
        if ro.stream >= pass.streams.len() || ro.row >= pass.streams[ro.stream].nrows() {
            return Err(ModelError::Shape(format!("readout {ro:?} outside the model streams")));
        }
        let x = pass.streams[ro.stream].row(ro.row);
        g.head_w += x.transpose() * dl.transpose();
        g.head_b += dl.transpose();
        let dx: RowDVector<f64> = (&params.head_w * dl).transpose();
        let mut row = d_streams[ro.stream].row_mut(ro.row);
        row += dx;
    }

    let ops = program(config);
    let mut sites = Vec::new();
    for (op, cache) in ops.iter().zip(&pass.ops).rev() {
        match (op, cache) {
            (Op::Ffn { layer, slot, stream }, OpCache::Ffn(c)) => {
                let w = &params.layers[*layer].ffn[*slot];
                let gw = &mut g.layers[*layer].ffn[*slot];
                let dx = ffn_backward(w, c, &d_streams[*stream], gw);
                d_streams[*stream] += dx;
            }
            (Op::Attn(a), OpCache::Attn(c)) => {
                let w = &params.layers[a.layer].attn[a.slot];
                let gw = &mut g.layers[a.layer].attn[a.slot];
                let d_out = d_streams[a.q_stream].clone();
                let (d_xq, d_xkv, attn_grads) = attn_backward(w, c, &d_out, config.heads, gw);
                let d_in = if a.q_stream == a.kv_stream {
                    &d_out + d_xq + d_xkv
                } else {
                    d_streams[a.kv_stream] += d_xkv;
                    &d_out + d_xq
                };
                d_streams[a.q_stream] = d_in.clone();
                sites.push(SiteGradients {
                    attention: attn_grads,
                    tokens_in: d_in,
                    tokens_out: d_out,
                });
            }
            _ => unreachable!("program and cache are built from the same config"),
        }
    }
    sites.reverse();

    let (s, t) = (pass.layout.s, pass.layout.q);
    let mut d_img;
    let mut d_txt;
    match config.topology {
        Topology::A => {
            d_img = d_streams[0].rows(0, s).into_owned();
            d_txt = d_streams[0].rows(s, t).into_owned();
        }
        Topology::B => {
            d_img = d_streams[0].clone();
            d_txt = d_streams[1].clone();
        }
    }
    for &m in &pass.masked {
        if m < s {
            d_img.row_mut(m).fill(0.0);
        } else {
            d_txt.row_mut(m - s).fill(0.0);
        }
    }
    g.image_embed += pass.image.transpose() * &d_img;
    g.image_pos += &d_img;
    for (j, &id) in pass.text_ids.iter().enumerate() {
        let r = d_txt.row(j).into_owned();
        let mut te = g.token_embed.row_mut(id);
        te += &r;
        let mut tp = g.text_pos.row_mut(j);
        tp += &r;
    }
    let mut input = DMatrix::zeros(s + t, config.d);
    input.rows_mut(0, s).copy_from(&d_img);
    input.rows_mut(s, t).copy_from(&d_txt);
    Ok(Gradients {
        params: g,
        sites,
        input,
    })
}

/// The pre-softmax logit of `class` at `readout`.
pub fn target_logit(
    params: &ToyModelParams,
    input: ModelInput<'_>,
    readout: Readout,
    class: usize,
) -> Result<f64, ModelError> {
    let outputs = params.config.outputs();
    if class >= outputs {
        return Err(ModelError::InvalidTarget { class, outputs });
    }
    Ok(forward(params, input)?.logits(params, readout)[class])
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Predicted class at the `[CLS]` readout.
pub fn predict(params: &ToyModelParams, input: ModelInput<'_>) -> Result<usize, ModelError> {
    Ok(argmax(&forward(params, input)?.logits(params, Readout::CLS)))
}

fn model_tag(config: &ModelConfig) -> String {
    format!(
        "toy topology={} layers={} heads={} d={} seed={}{}",
        config.topology,
        config.layers,
        config.heads,
        config.d,
        config.seed,
        if config.caption { " caption" } else { "" }
    )
}

fn emit_at(
    params: &ToyModelParams,
    input: ModelInput<'_>,
    readout: Readout,
    class: usize,
) -> Result<Trace, ModelError> {
    let config = &params.config;
    let outputs = config.outputs();
    if class >= outputs {
        return Err(ModelError::InvalidTarget { class, outputs });
    }
    let pass = forward(params, input)?;
    let logit = pass.logits(params, readout)[class];
    let mut seed = DVector::zeros(outputs);
    seed[class] = 1.0;
    let grads = backward(params, &pass, &[(readout, seed)])?;
    let ops = program(config);
    let attn_ops = ops.iter().filter_map(|o| match o {
        Op::Attn(a) => Some(a),
        Op::Ffn { .. } => None,
    });
    let caches = pass.ops.iter().filter_map(|c| match c {
        OpCache::Attn(a) => Some(a),
        OpCache::Ffn(_) => None,
    });
    let sites = attn_ops
        .zip(caches)
        .zip(grads.sites)
        .map(|((op, cache), sg)| AttentionSite {
            kind: op.kind,
            query_modality: op.q_mod,
            key_modality: op.k_mod,
            layer: op.layer,
            attention: cache.probs.clone(),
            attention_grad: sg.attention,
            tokens_in: cache.xq.clone(),
            tokens_in_grad: sg.tokens_in,
            tokens_out: cache.out.clone(),
            tokens_out_grad: sg.tokens_out,
        })
        .collect();
    Ok(Trace {
        layout: pass.layout,
        target: Target { class, logit },
        sites,
        model_tag: model_tag(config),
    })
}

/// Trace of the `[CLS]` logit of `target_class`.
pub fn emit_trace(params: &ToyModelParams, input: ModelInput<'_>, target_class: usize) -> Result<Trace, ModelError> {
    emit_at(params, input, Readout::CLS, target_class)
}

/// Greedy decoding with one trace per generated token. Decoding stops at
/// EOS (not part of the caption) or when the prefix fills all `q` text
/// positions.
pub fn generate_caption(params: &ToyModelParams, example: &SyntheticExample) -> Result<CaptionTrace, ModelError> {
    let config = &params.config;
    if !config.caption {
        return Err(ModelError::NotCaptionModel);
    }
    let vocab = config.vocab();
    let mut prefix = vec![Vocab::BOS];
    let mut steps = Vec::new();
    while prefix.len() <= config.q {
        let pos = prefix.len() - 1;
        let readout = Readout::text(config, pos);
        let input = ModelInput::new(&example.image, &prefix);
        let token = argmax(&forward(params, input)?.logits(params, readout));
        if token == Vocab::EOS {
            break;
        }
        let trace = emit_at(params, input, readout, token)?;
        steps.push(CaptionStep {
            trace,
            token,
            position: steps.len(),
        });
        prefix.push(token);
    }
    if steps.is_empty() {
        return Err(ModelError::EmptyCaption);
    }
    Ok(CaptionTrace {
        caption: prefix[1..].to_vec(),
        steps,
        references: vec![example.caption(vocab)],
    })
}
