// SPDX-License-Identifier: MIT OR Apache-2.0

//! Model-agnostic attention traces.
//!
//! A [`Trace`] records, for one scalar target output, every attention site of
//! a forward pass in execution order: the per-head attention probabilities,
//! the gradient of the target with respect to them, and the token matrices
//! entering and leaving the attention block (before the residual add)
//! together with their gradients.
//!
//! Joint token indices place the image-side modality `S` first
//! (`0..s`, with the `[CLS]` readout at index 0) and the text-side modality
//! `Q` after it (`s..s+q`).

use std::fmt;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use thiserror::Error;

use crate::textfmt::{self, LineCursor, ParseError};

/// Tolerance on attention row sums accepted by [`validate_trace`].
pub const ROW_SUM_TOLERANCE: f64 = 1e-6;

const TRACE_HEADER: &str = "ATTRACE v1";
const CAPTION_HEADER: &str = "ATCAPTION v1";

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("parse error: {0}")]
    Parse(#[from] ParseError),
    #[error("invalid trace: {}", .0.iter().map(ToString::to_string).collect::<Vec<_>>().join("; "))]
    Invalid(Vec<Violation>),
}

/// Token counts of the two modalities.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ModalityLayout {
    pub s: usize,
    pub q: usize,
}

impl ModalityLayout {
    pub const fn new(s: usize, q: usize) -> Self {
        Self { s, q }
    }

    pub const fn joint(&self) -> usize {
        self.s + self.q
    }

    /// Token count of one modality (`Joint` is `s + q`).
    pub const fn len_of(&self, m: Modality) -> usize {
        match m {
            Modality::S => self.s,
            Modality::Q => self.q,
            Modality::Joint => self.s + self.q,
        }
    }

    /// First joint index of a modality.
    pub const fn offset_of(&self, m: Modality) -> usize {
        match m {
            Modality::S | Modality::Joint => 0,
            Modality::Q => self.s,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SiteKind {
    SelfJoint,
    SelfUnimodal,
    Cross,
}

impl SiteKind {
    pub const fn as_str(self) -> &'static str {
        match self {
            Self::SelfJoint => "self_joint",
            Self::SelfUnimodal => "self_unimodal",
            Self::Cross => "cross",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "self_joint" => Some(Self::SelfJoint),
            "self_unimodal" => Some(Self::SelfUnimodal),
            "cross" => Some(Self::Cross),
            _ => None,
        }
    }
}

impl fmt::Display for SiteKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Modality {
    S,
    Q,
    Joint,
}

impl Modality {
    pub const fn as_str(self) -> &'static str {
        match self {
            Self::S => "S",
            Self::Q => "Q",
            Self::Joint => "joint",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "S" => Some(Self::S),
            "Q" => Some(Self::Q),
            "joint" => Some(Self::Joint),
            _ => None,
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One attention block of the forward pass.
///
/// `tokens_in` is the query-side token matrix entering the block and
/// `tokens_out` the attention output before it is added back on the residual
/// path. The gradients are those of the trace target.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionSite {
    pub kind: SiteKind,
    pub query_modality: Modality,
    pub key_modality: Modality,
    pub layer: usize,
    /// `[heads]` matrices of shape `n_q × n_k`.
    pub attention: Vec<DMatrix<f64>>,
    pub attention_grad: Vec<DMatrix<f64>>,
    pub tokens_in: DMatrix<f64>,
    pub tokens_in_grad: DMatrix<f64>,
    pub tokens_out: DMatrix<f64>,
    pub tokens_out_grad: DMatrix<f64>,
}

impl AttentionSite {
    pub fn heads(&self) -> usize {
        self.attention.len()
    }

    pub fn n_query(&self) -> usize {
        self.attention.first().map_or(0, DMatrix::nrows)
    }

    pub fn n_key(&self) -> usize {
        self.attention.first().map_or(0, DMatrix::ncols)
    }

    pub fn width(&self) -> usize {
        self.tokens_in.ncols()
    }
}

/// The scalar the trace explains: the pre-softmax logit of `class`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Target {
    pub class: usize,
    pub logit: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    pub layout: ModalityLayout,
    pub target: Target,
    pub sites: Vec<AttentionSite>,
    pub model_tag: String,
}

/// One invariant failure found by [`validate_trace`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    /// `None` for trace-level rules.
    pub site: Option<usize>,
    pub rule: &'static str,
    pub detail: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.site {
            Some(i) => write!(f, "site {i}: {}: {}", self.rule, self.detail),
            None => write!(f, "trace: {}: {}", self.rule, self.detail),
        }
    }
}

pub const RULE_ROW_STOCHASTIC: &str = "row-stochasticity";
pub const RULE_CROSS_MODALITIES: &str = "cross requires distinct modalities";
pub const RULE_SELF_MODALITIES: &str = "self attention requires matching modalities";
pub const RULE_SHAPE: &str = "shape";
pub const RULE_LAYOUT: &str = "layout";
pub const RULE_LAYER_ORDER: &str = "layer order";
pub const RULE_EMPTY: &str = "nonempty sites";
pub const RULE_FINITE: &str = "finite values";

/// Check every invariant of `trace`. Returns an empty list iff it is valid.
pub fn validate_trace(trace: &Trace) -> Vec<Violation> {
    let mut out = Vec::new();
    let layout = trace.layout;
    if layout.s < 1 || layout.q < 1 {
        out.push(Violation {
            site: None,
            rule: RULE_LAYOUT,
            detail: format!("need s >= 1 and q >= 1, got s={} q={}", layout.s, layout.q),
        });
    }
    if trace.sites.is_empty() {
        out.push(Violation {
            site: None,
            rule: RULE_EMPTY,
            detail: "trace has no attention sites".into(),
        });
    }
    if !trace.target.logit.is_finite() {
        out.push(Violation {
            site: None,
            rule: RULE_FINITE,
            detail: "target logit is not finite".into(),
        });
    }
    let mut prev_layer = 0;
    for (i, site) in trace.sites.iter().enumerate() {
        if i > 0 && site.layer < prev_layer {
            out.push(Violation {
                site: Some(i),
                rule: RULE_LAYER_ORDER,
                detail: format!("layer {} follows layer {prev_layer}", site.layer),
            });
        }
        prev_layer = site.layer;
        validate_site(i, site, layout, &mut out);
    }
    out
}

fn validate_site(i: usize, site: &AttentionSite, layout: ModalityLayout, out: &mut Vec<Violation>) {
    let mut push = |rule: &'static str, detail: String| {
        out.push(Violation {
            site: Some(i),
            rule,
            detail,
        });
    };

    let (qm, km) = (site.query_modality, site.key_modality);
    match site.kind {
        SiteKind::Cross => {
            if qm == km || qm == Modality::Joint || km == Modality::Joint {
                push(RULE_CROSS_MODALITIES, format!("query modality {qm}, key modality {km}"));
            }
        }
        SiteKind::SelfJoint => {
            if qm != Modality::Joint || km != Modality::Joint {
                push(
                    RULE_SELF_MODALITIES,
                    format!("self_joint needs joint/joint, got {qm}/{km}"),
                );
            }
        }
        SiteKind::SelfUnimodal => {
            if qm != km || qm == Modality::Joint {
                push(
                    RULE_SELF_MODALITIES,
                    format!("self_unimodal needs S/S or Q/Q, got {qm}/{km}"),
                );
            }
        }
    }

    if site.attention.is_empty() {
        push(RULE_SHAPE, "no attention heads".into());
        return;
    }
    if site.attention.len() != site.attention_grad.len() {
        push(
            RULE_SHAPE,
            format!(
                "attention has {} heads, attention_grad has {}",
                site.attention.len(),
                site.attention_grad.len()
            ),
        );
    }
    let (nq, nk) = site.attention[0].shape();
    let want_q = layout.len_of(qm);
    let want_k = layout.len_of(km);
    if (nq, nk) != (want_q, want_k) {
        push(
            RULE_SHAPE,
            format!("attention is {nq}x{nk}, layout requires {want_q}x{want_k}"),
        );
    }
    for (h, (a, g)) in site.attention.iter().zip(&site.attention_grad).enumerate() {
        if a.shape() != (nq, nk) {
            push(RULE_SHAPE, format!("head {h} attention is {:?}", a.shape()));
            continue;
        }
        if g.shape() != a.shape() {
            push(
                RULE_SHAPE,
                format!("head {h} attention_grad {:?} != attention {:?}", g.shape(), a.shape()),
            );
        }
        if a.iter().chain(g.iter()).any(|v| !v.is_finite()) {
            push(RULE_FINITE, format!("head {h} has non-finite attention values"));
        }
        for r in 0..a.nrows() {
            let sum: f64 = a.row(r).iter().sum();
            if (sum - 1.0).abs() > ROW_SUM_TOLERANCE || a.row(r).iter().any(|&v| v < 0.0) {
                push(RULE_ROW_STOCHASTIC, format!("head {h} row {r} sums to {sum}"));
            }
        }
    }

    let tok = [
        ("tokens_in", &site.tokens_in),
        ("tokens_in_grad", &site.tokens_in_grad),
        ("tokens_out", &site.tokens_out),
        ("tokens_out_grad", &site.tokens_out_grad),
    ];
    let shape0 = site.tokens_in.shape();
    for (name, m) in tok {
        if m.shape() != shape0 {
            push(
                RULE_SHAPE,
                format!("{name} is {:?}, tokens_in is {shape0:?}", m.shape()),
            );
        }
        if m.iter().any(|v| !v.is_finite()) {
            push(RULE_FINITE, format!("{name} has non-finite values"));
        }
    }
    if shape0.0 != want_q {
        push(
            RULE_SHAPE,
            format!("tokens_in has {} rows, layout requires {want_q}", shape0.0),
        );
    }
}

/// Serialize a trace in the `ATTRACE v1` text format.
pub fn trace_to_string(t: &Trace) -> String {
    let mut out = String::new();
    out.push_str(TRACE_HEADER);
    out.push('\n');
    if !t.model_tag.is_empty() {
        let _ = writeln!(out, "# tag: {}", t.model_tag.replace('\n', " "));
    }
    let _ = writeln!(out, "layout s={} q={}", t.layout.s, t.layout.q);
    let _ = writeln!(out, "target class={} logit={:?}", t.target.class, t.target.logit);
    for site in &t.sites {
        let _ = writeln!(
            out,
            "site kind={} qmod={} kmod={} layer={} heads={} nq={} nk={} d={}",
            site.kind,
            site.query_modality,
            site.key_modality,
            site.layer,
            site.heads(),
            site.n_query(),
            site.n_key(),
            site.width()
        );
        for (label, heads) in [("attention", &site.attention), ("attention_grad", &site.attention_grad)] {
            out.push_str(label);
            out.push_str(":\n");
            for m in heads {
                textfmt::write_values(&mut out, &row_major(m), m.ncols());
            }
        }
        for (label, m) in [
            ("tokens_in", &site.tokens_in),
            ("tokens_in_grad", &site.tokens_in_grad),
            ("tokens_out", &site.tokens_out),
            ("tokens_out_grad", &site.tokens_out_grad),
        ] {
            out.push_str(label);
            out.push_str(":\n");
            textfmt::write_values(&mut out, &row_major(m), m.ncols());
        }
    }
    out
}

/// Parse and validate an `ATTRACE v1` document.
pub fn trace_from_str(text: &str) -> Result<Trace, TraceError> {
    let mut cur = LineCursor::new(text);
    match cur.next_line() {
        Some((_, TRACE_HEADER)) => {}
        Some((n, l)) => {
            return Err(ParseError::new(n, format!("expected `{TRACE_HEADER}` header, found `{l}`")).into())
        }
        None => return Err(ParseError::new(1, "empty file, missing `ATTRACE v1` header").into()),
    }
    let layout_rec = cur.expect_record("layout")?;
    let s = layout_rec.int("s")?;
    let q = layout_rec.int("q")?;
    if s < 1 || q < 1 {
        return Err(TraceError::Invalid(vec![Violation {
            site: None,
            rule: RULE_LAYOUT,
            detail: format!("need s >= 1 and q >= 1, got s={s} q={q}"),
        }]));
    }
    let layout = ModalityLayout::new(s as usize, q as usize);
    let target_rec = cur.expect_record("target")?;
    let target = Target {
        class: target_rec.count("class")?,
        logit: target_rec.float("logit")?,
    };

    let mut sites = Vec::new();
    while cur.peek().is_some() {
        let rec = cur.expect_record("site")?;
        let kind_raw = rec.raw("kind")?;
        let kind = SiteKind::parse(kind_raw)
            .ok_or_else(|| ParseError::new(rec.line, format!("unknown site kind `{kind_raw}`")))?;
        let modality = |key: &str| -> Result<Modality, ParseError> {
            let raw = rec.raw(key)?;
            Modality::parse(raw)
                .ok_or_else(|| ParseError::new(rec.line, format!("field `{key}`: unknown modality `{raw}`")))
        };
        let query_modality = modality("qmod")?;
        let key_modality = modality("kmod")?;
        let layer = rec.count("layer")?;
        let heads = rec.count("heads")?;
        let nq = rec.count("nq")?;
        let nk = rec.count("nk")?;
        let d = rec.count("d")?;

        let mut read_heads = |label: &str| -> Result<Vec<DMatrix<f64>>, ParseError> {
            let flat = cur.expect_tensor(label, heads * nq * nk)?;
            Ok(flat
                .chunks(nq * nk)
                .map(|c| DMatrix::from_row_slice(nq, nk, c))
                .collect())
        };
        let attention = read_heads("attention")?;
        let attention_grad = read_heads("attention_grad")?;
        let mut read_tokens = |label: &str| -> Result<DMatrix<f64>, ParseError> {
            let flat = cur.expect_tensor(label, nq * d)?;
            Ok(DMatrix::from_row_slice(nq, d, &flat))
        };
        let tokens_in = read_tokens("tokens_in")?;
        let tokens_in_grad = read_tokens("tokens_in_grad")?;
        let tokens_out = read_tokens("tokens_out")?;
        let tokens_out_grad = read_tokens("tokens_out_grad")?;
        sites.push(AttentionSite {
            kind,
            query_modality,
            key_modality,
            layer,
            attention,
            attention_grad,
            tokens_in,
            tokens_in_grad,
            tokens_out,
            tokens_out_grad,
        });
    }

    let model_tag = cur
        .comments
        .iter()
        .find_map(|(_, c)| c.strip_prefix("tag:"))
        .map(|s| s.trim().to_string())
        .unwrap_or_default();

    let trace = Trace {
        layout,
        target,
        sites,
        model_tag,
    };
    let violations = validate_trace(&trace);
    if violations.is_empty() {
        Ok(trace)
    } else {
        Err(TraceError::Invalid(violations))
    }
}

pub fn save_trace(t: &Trace, path: impl AsRef<Path>) -> Result<(), TraceError> {
    let violations = validate_trace(t);
    if !violations.is_empty() {
        return Err(TraceError::Invalid(violations));
    }
    write_file(path.as_ref(), &trace_to_string(t))
}

pub fn load_trace(path: impl AsRef<Path>) -> Result<Trace, TraceError> {
    trace_from_str(&read_file(path.as_ref())?)
}

pub(crate) fn write_file(path: &Path, text: &str) -> Result<(), TraceError> {
    fs::write(path, text).map_err(|source| TraceError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub(crate) fn read_file(path: &Path) -> Result<String, TraceError> {
    fs::read_to_string(path).map_err(|source| TraceError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub(crate) fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    m.transpose().as_slice().to_vec()
}

/// One greedy decoding step of a caption: the trace explains the logit of
/// `token`, generated at caption position `position`.
#[derive(Debug, Clone, PartialEq)]
pub struct CaptionStep {
    pub trace: Trace,
    pub token: usize,
    pub position: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CaptionTrace {
    pub steps: Vec<CaptionStep>,
    pub caption: Vec<usize>,
    pub references: Vec<Vec<usize>>,
}

impl CaptionTrace {
    pub fn validate(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.steps.len() != self.caption.len() {
            out.push(format!(
                "{} steps for a caption of {} tokens",
                self.steps.len(),
                self.caption.len()
            ));
        }
        for (i, step) in self.steps.iter().enumerate() {
            if self.caption.get(i) != Some(&step.token) {
                out.push(format!("step {i} token {} does not match caption", step.token));
            }
            if step.trace.target.class != step.token {
                out.push(format!(
                    "step {i} targets class {} instead of token {}",
                    step.trace.target.class, step.token
                ));
            }
            if step.position != i {
                out.push(format!("step {i} has position {}", step.position));
            }
            for v in validate_trace(&step.trace) {
                out.push(format!("step {i}: {v}"));
            }
        }
        out
    }
}

fn join_ids(ids: &[usize]) -> String {
    ids.iter().map(ToString::to_string).collect::<Vec<_>>().join(" ")
}

/// Write a caption manifest at `path` and one trace file per step beside it
/// (`<stem>.step<i>.trace`).
pub fn save_caption_trace(ct: &CaptionTrace, path: impl AsRef<Path>) -> Result<(), TraceError> {
    let path = path.as_ref();
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    let stem = path
        .file_stem()
        .map_or_else(|| "caption".to_string(), |s| s.to_string_lossy().into_owned());
    let mut out = String::new();
    out.push_str(CAPTION_HEADER);
    out.push('\n');
    let _ = writeln!(out, "caption {}", join_ids(&ct.caption));
    for r in &ct.references {
        let _ = writeln!(out, "reference {}", join_ids(r));
    }
    for (i, step) in ct.steps.iter().enumerate() {
        let file = format!("{stem}.step{i}.trace");
        save_trace(&step.trace, dir.join(&file))?;
        let _ = writeln!(out, "step token={} position={} file={file}", step.token, step.position);
    }
    write_file(path, &out)
}

pub fn load_caption_trace(path: impl AsRef<Path>) -> Result<CaptionTrace, TraceError> {
    let path = path.as_ref();
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    let text = read_file(path)?;
    let mut cur = LineCursor::new(&text);
    match cur.next_line() {
        Some((_, CAPTION_HEADER)) => {}
        Some((n, l)) => {
            return Err(ParseError::new(n, format!("expected `{CAPTION_HEADER}` header, found `{l}`")).into())
        }
        None => return Err(ParseError::new(1, "empty caption manifest").into()),
    }
    let parse_ids = |n: usize, rest: &str| -> Result<Vec<usize>, ParseError> {
        rest.split_whitespace()
            .map(|t| {
                t.parse()
                    .map_err(|_| ParseError::new(n, format!("invalid token id `{t}`")))
            })
            .collect()
    };
    let (n, line) = cur
        .next_line()
        .ok_or_else(|| ParseError::new(cur.eof_line(), "missing `caption` line"))?;
    let rest = line
        .strip_prefix("caption")
        .ok_or_else(|| ParseError::new(n, "expected `caption` line"))?;
    let caption = parse_ids(n, rest)?;
    let mut references = Vec::new();
    while let Some((n, line)) = cur.peek() {
        let Some(rest) = line.strip_prefix("reference") else {
            break;
        };
        cur.next_line();
        references.push(parse_ids(n, rest)?);
    }
    let mut steps = Vec::new();
    while cur.peek().is_some() {
        let rec = cur.expect_record("step")?;
        let token = rec.count("token")?;
        let position = rec.count("position")?;
        let file = rec.raw("file")?;
        let trace = load_trace(dir.join(file))?;
        steps.push(CaptionStep { trace, token, position });
    }
    Ok(CaptionTrace {
        steps,
        caption,
        references,
    })
}
