// SPDX-License-Identifier: MIT OR Apache-2.0

//! The `attrel` command line.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime error.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::explain::Method;
use crate::heatmap::to_pgm;
use crate::perturb::{compare_methods, Explainer, PerturbConfig, PerturbDirection, Side};
use crate::relevance::{
    caption_aggregate, interaction_map, mutual_interaction, ngram_eval, CaptionWeighting, Direction, TokenScores,
    WeightingMode,
};
use crate::toymodel::{
    emit_trace, evaluate, generate_caption, generate_dataset, held_out_seed, load_params, predict, save_params, train,
    ModelConfig, SyntheticExample, Topology, ToyModelParams, TrainConfig,
};
use crate::trace::{load_caption_trace, load_trace, save_caption_trace, save_trace, CaptionTrace, Trace};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

/// Held-out examples used to report accuracy after training.
const HELD_OUT: usize = 500;

#[derive(Debug, Parser)]
#[command(name = "attrel", version, about = "Relevance explanations for attention models")]
pub struct Cli {
    /// Seed for model initialization and example generation.
    #[arg(long, global = true, default_value_t = 7)]
    pub seed: u64,
    /// Output directory.
    #[arg(long, global = true, default_value = ".")]
    pub out: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the toy model and write a checkpoint.
    Train(TrainArgs),
    /// Write the attention trace of one example.
    Trace(TraceArgs),
    /// Per-token scores and a patch heatmap for one example.
    Explain(ExplainArgs),
    /// Image-to-text interaction map for one example.
    Interact(InteractArgs),
    /// Perturbation curves and AUC for several methods.
    Perturb(PerturbArgs),
    /// Explain a generated caption step by step and as a whole.
    CaptionExplain(CaptionExplainArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, default_value = "A", value_parser = parse_topology)]
    pub topology: Topology,
    #[arg(long, default_value_t = 2)]
    pub layers: usize,
    #[arg(long, default_value_t = 4)]
    pub heads: usize,
    #[arg(long, default_value_t = 32)]
    pub d: usize,
    /// Image-side tokens including [CLS].
    #[arg(long, default_value_t = 16)]
    pub s: usize,
    #[arg(long, default_value_t = 8)]
    pub q: usize,
    #[arg(long, default_value_t = 4)]
    pub classes: usize,
    #[arg(long, default_value_t = 64)]
    pub ffn: usize,
    /// Train a next-token caption model instead of a question answerer.
    #[arg(long)]
    pub caption: bool,
    /// Training examples.
    #[arg(long, default_value_t = 5000)]
    pub examples: usize,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Checkpoint path (default: <out>/model.params).
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct Source {
    /// Model checkpoint; the example is drawn from the held-out split of `--seed`.
    #[arg(long, conflicts_with = "trace")]
    pub checkpoint: Option<PathBuf>,
    /// Read a trace file instead of running a model.
    #[arg(long)]
    pub trace: Option<PathBuf>,
    /// Held-out example index.
    #[arg(long, default_value_t = 0)]
    pub example: usize,
}

#[derive(Debug, Args)]
pub struct TraceArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub example: usize,
    /// Class whose logit is traced (default: the predicted class).
    #[arg(long)]
    pub target: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ExplainArgs {
    #[command(flatten)]
    pub source: Source,
    #[arg(long, default_value = "ours", value_parser = parse_method)]
    pub method: Method,
    /// Shorthand for `--method ours-fixed:<alpha>`.
    #[arg(long)]
    pub fixed_alpha: Option<f64>,
}

#[derive(Debug, Args)]
pub struct InteractArgs {
    #[command(flatten)]
    pub source: Source,
    /// Elementwise product of both one-way maps.
    #[arg(long)]
    pub mutual: bool,
    #[arg(long)]
    pub fixed_alpha: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SideArg {
    Image,
    Text,
    Both,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DirectionArg {
    Positive,
    Negative,
    Both,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum WeightingArg {
    Average,
    Ngram,
}

#[derive(Debug, Args)]
pub struct PerturbArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Held-out examples to evaluate.
    #[arg(long, default_value_t = 500)]
    pub examples: usize,
    #[arg(long, value_delimiter = ',', value_parser = parse_method,
          default_value = "ours,ours-fixed:0.5,genatt,rollout,rawatt")]
    pub methods: Vec<Method>,
    #[arg(long, value_enum, default_value_t = SideArg::Both)]
    pub side: SideArg,
    #[arg(long, value_enum, default_value_t = DirectionArg::Both)]
    pub direction: DirectionArg,
    /// Removal percentages.
    #[arg(long, value_delimiter = ',', default_value = "0,5,10,15,20,25,50,75,100")]
    pub fractions: Vec<f64>,
}

#[derive(Debug, Args)]
pub struct CaptionExplainArgs {
    /// Caption-mode checkpoint.
    #[arg(long, conflicts_with = "trace")]
    pub checkpoint: Option<PathBuf>,
    /// Caption manifest written by `trace` instead of a checkpoint.
    #[arg(long)]
    pub trace: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub example: usize,
    #[arg(long, value_enum, default_value_t = WeightingArg::Average)]
    pub weighting: WeightingArg,
    #[arg(long)]
    pub fixed_alpha: Option<f64>,
}

fn parse_topology(s: &str) -> Result<Topology, String> {
    s.parse()
}

fn parse_method(s: &str) -> Result<Method, String> {
    s.parse()
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(String),
}

impl CliError {
    fn code(&self) -> i32 {
        match self {
            Self::Usage(_) => EXIT_USAGE,
            Self::Runtime(_) => EXIT_RUNTIME,
        }
    }
}

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

/// Parse `args` (program name first) and run; returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_USAGE,
            };
        }
    };
    match execute(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let (CliError::Usage(m) | CliError::Runtime(m)) = &e;
            eprintln!("error: {m}");
            e.code()
        }
    }
}

pub fn execute(cli: &Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::Train(a) => cmd_train(cli, a),
        Command::Trace(a) => cmd_trace(cli, a),
        Command::Explain(a) => cmd_explain(cli, a),
        Command::Interact(a) => cmd_interact(cli, a),
        Command::Perturb(a) => cmd_perturb(cli, a),
        Command::CaptionExplain(a) => cmd_caption_explain(cli, a),
    }
}

fn write_output(dir: &Path, name: &str, contents: &str) -> Result<PathBuf, CliError> {
    fs::create_dir_all(dir).map_err(|e| runtime(format!("cannot create {}: {e}", dir.display())))?;
    let path = dir.join(name);
    fs::write(&path, contents).map_err(|e| runtime(format!("cannot write {}: {e}", path.display())))?;
    Ok(path)
}

fn load_checkpoint(path: &Path) -> Result<ToyModelParams, CliError> {
    load_params(path).map_err(|e| runtime(format!("checkpoint {}: {e}", path.display())))
}

/// The `index`-th held-out example for `config` under `seed`.
fn held_out_example(config: &ModelConfig, seed: u64, index: usize) -> SyntheticExample {
    generate_dataset(config, index + 1, held_out_seed(seed))
        .pop()
        .expect("dataset of index + 1 examples")
}

fn require_qa(params: &ToyModelParams) -> Result<(), CliError> {
    if params.config.caption {
        Err(CliError::Usage(
            "this checkpoint is a caption model; use `caption-explain`".into(),
        ))
    } else {
        Ok(())
    }
}

fn fixed_mode(alpha: Option<f64>) -> Result<WeightingMode, CliError> {
    match alpha {
        None => Ok(WeightingMode::Adaptive),
        Some(a) => WeightingMode::fixed(a).map_err(|e| CliError::Usage(e.to_string())),
    }
}

fn cmd_train(cli: &Cli, a: &TrainArgs) -> Result<(), CliError> {
    let config = ModelConfig {
        topology: a.topology,
        layers: a.layers,
        heads: a.heads,
        d: a.d,
        s: a.s,
        q: a.q,
        classes: a.classes,
        seed: cli.seed,
        caption: a.caption,
        ffn: a.ffn,
    };
    config.validate().map_err(CliError::Usage)?;
    let mut tc = TrainConfig::for_model(&config);
    if let Some(e) = a.epochs {
        tc.epochs = e;
    }
    if let Some(lr) = a.lr {
        tc.learning_rate = lr;
    }
    if let Some(b) = a.batch_size {
        tc.batch_size = b;
    }
    if tc.batch_size == 0 || !(tc.learning_rate > 0.0 && tc.learning_rate.is_finite()) {
        return Err(CliError::Usage("batch size and learning rate must be positive".into()));
    }
    let data = generate_dataset(&config, a.examples, config.seed);
    let (params, report) = train(&config, &data, &tc).map_err(runtime)?;
    let held = generate_dataset(&config, HELD_OUT, held_out_seed(config.seed));
    let acc = evaluate(&params, &held).map_err(runtime)?;
    let path = match &a.checkpoint {
        Some(p) => p.clone(),
        None => cli.out.join("model.params"),
    };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| runtime(format!("cannot create {}: {e}", dir.display())))?;
    }
    save_params(&params, &path).map_err(runtime)?;
    println!("steps: {}", report.steps);
    if let Some(loss) = report.epoch_loss.last() {
        println!("final epoch loss: {loss:.6}");
    }
    println!("held-out accuracy: {acc:.4}");
    println!("checkpoint: {}", path.display());
    Ok(())
}

fn cmd_trace(cli: &Cli, a: &TraceArgs) -> Result<(), CliError> {
    let params = load_checkpoint(&a.checkpoint)?;
    let ex = held_out_example(&params.config, cli.seed, a.example);
    if params.config.caption {
        if a.target.is_some() {
            return Err(CliError::Usage("--target does not apply to caption models".into()));
        }
        let ct = generate_caption(&params, &ex).map_err(runtime)?;
        let name = format!("example{}.caption", a.example);
        fs::create_dir_all(&cli.out).map_err(runtime)?;
        let path = cli.out.join(&name);
        save_caption_trace(&ct, &path).map_err(runtime)?;
        println!("caption: {:?}", ct.caption);
        println!("manifest: {}", path.display());
        return Ok(());
    }
    let target = match a.target {
        Some(t) => t,
        None => predict(&params, ex.input()).map_err(runtime)?,
    };
    let trace = emit_trace(&params, ex.input(), target).map_err(|e| match e {
        crate::toymodel::ModelError::InvalidTarget { .. } => CliError::Usage(e.to_string()),
        other => runtime(other),
    })?;
    fs::create_dir_all(&cli.out).map_err(runtime)?;
    let path = cli.out.join(format!("example{}.trace", a.example));
    save_trace(&trace, &path).map_err(runtime)?;
    println!("label: {} target: {target} logit: {:.6}", ex.label, trace.target.logit);
    println!("trace: {}", path.display());
    Ok(())
}

/// The trace named by a source: a file, or a model run on a held-out example
/// traced at its prediction.
fn source_trace(cli: &Cli, src: &Source) -> Result<Trace, CliError> {
    match (&src.trace, &src.checkpoint) {
        (Some(path), _) => load_trace(path).map_err(|e| runtime(format!("trace {}: {e}", path.display()))),
        (None, Some(ckpt)) => {
            let params = load_checkpoint(ckpt)?;
            require_qa(&params)?;
            let ex = held_out_example(&params.config, cli.seed, src.example);
            let target = predict(&params, ex.input()).map_err(runtime)?;
            emit_trace(&params, ex.input(), target).map_err(runtime)
        }
        (None, None) => Err(CliError::Usage("one of --checkpoint or --trace is required".into())),
    }
}

fn scores_csv(first_index: usize, scores: &[f64]) -> String {
    let mut out = String::new();
    for (i, v) in scores.iter().enumerate() {
        let _ = writeln!(out, "{},{v:?}", first_index + i);
    }
    out
}

fn matrix_csv(m: &nalgebra::DMatrix<f64>) -> String {
    let mut out = String::new();
    for row in m.row_iter() {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

fn cmd_explain(cli: &Cli, a: &ExplainArgs) -> Result<(), CliError> {
    let method = match a.fixed_alpha {
        None => a.method,
        Some(alpha) => match a.method {
            Method::Ours(_) => Method::Ours(fixed_mode(Some(alpha))?),
            other => {
                return Err(CliError::Usage(format!(
                    "--fixed-alpha does not apply to method {other}"
                )));
            }
        },
    };
    let trace = source_trace(cli, &a.source)?;
    let scores: TokenScores = method.scores(&trace).map_err(runtime)?;
    let s = trace.layout.s;
    let p1 = write_output(&cli.out, "scores_image.csv", &scores_csv(1, &scores.image))?;
    let p2 = write_output(&cli.out, "scores_text.csv", &scores_csv(s, &scores.text))?;
    let p3 = write_output(&cli.out, "heatmap.pgm", &to_pgm(&scores.image))?;
    println!("method: {method}");
    for p in [p1, p2, p3] {
        println!("wrote {}", p.display());
    }
    Ok(())
}

fn cmd_interact(cli: &Cli, a: &InteractArgs) -> Result<(), CliError> {
    let mode = fixed_mode(a.fixed_alpha)?;
    let trace = source_trace(cli, &a.source)?;
    let m_sq = interaction_map(&trace, mode, Direction::ImageToText).map_err(runtime)?;
    let map = if a.mutual {
        let m_qs = interaction_map(&trace, mode, Direction::TextToImage).map_err(runtime)?;
        mutual_interaction(&m_sq, &m_qs).map_err(runtime)?
    } else {
        m_sq
    };
    let p = write_output(&cli.out, "interaction.csv", &matrix_csv(&map.values))?;
    println!("wrote {}", p.display());
    Ok(())
}

fn cmd_perturb(cli: &Cli, a: &PerturbArgs) -> Result<(), CliError> {
    let config = PerturbConfig {
        fractions: a.fractions.iter().map(|p| p / 100.0).collect(),
        directions: match a.direction {
            DirectionArg::Positive => vec![PerturbDirection::Positive],
            DirectionArg::Negative => vec![PerturbDirection::Negative],
            DirectionArg::Both => vec![PerturbDirection::Positive, PerturbDirection::Negative],
        },
        sides: match a.side {
            SideArg::Image => vec![Side::Image],
            SideArg::Text => vec![Side::Text],
            SideArg::Both => vec![Side::Image, Side::Text],
        },
    };
    config.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let params = load_checkpoint(&a.checkpoint)?;
    require_qa(&params)?;
    let data = generate_dataset(&params.config, a.examples, held_out_seed(cli.seed));
    let methods: Vec<&dyn Explainer> = a.methods.iter().map(|m| m as &dyn Explainer).collect();
    let report = compare_methods(&data, &params, &methods, &config).map_err(runtime)?;
    let table = report.to_table();
    write_output(&cli.out, "perturb_report.txt", &table)?;
    write_output(&cli.out, "perturb_report.csv", &report.to_csv())?;
    print!("{table}");
    Ok(())
}

fn cmd_caption_explain(cli: &Cli, a: &CaptionExplainArgs) -> Result<(), CliError> {
    let mode = fixed_mode(a.fixed_alpha)?;
    let ct: CaptionTrace = match (&a.trace, &a.checkpoint) {
        (Some(path), _) => load_caption_trace(path).map_err(|e| runtime(format!("caption {}: {e}", path.display())))?,
        (None, Some(ckpt)) => {
            let params = load_checkpoint(ckpt)?;
            if !params.config.caption {
                return Err(CliError::Usage(
                    "caption-explain needs a caption-mode checkpoint".into(),
                ));
            }
            let ex = held_out_example(&params.config, cli.seed, a.example);
            generate_caption(&params, &ex).map_err(runtime)?
        }
        (None, None) => return Err(CliError::Usage("one of --checkpoint or --trace is required".into())),
    };
    let refs = ct.references.clone();
    let metric = move |cand: &[usize]| ngram_eval(cand, &refs);
    let weighting = match a.weighting {
        WeightingArg::Average => CaptionWeighting::Average,
        WeightingArg::Ngram => CaptionWeighting::Metric(&metric),
    };
    let exp = caption_aggregate(&ct, mode, &weighting).map_err(runtime)?;

    let mut steps = String::new();
    for (token, scores) in ct.caption.iter().zip(&exp.per_step_scores) {
        let cells: Vec<String> = scores.iter().map(|v| format!("{v:?}")).collect();
        let _ = writeln!(steps, "{token},{}", cells.join(","));
    }
    let mut weights = String::new();
    for (token, w) in ct.caption.iter().zip(&exp.weights) {
        let _ = writeln!(weights, "{token},{w:?}");
    }
    let outputs = [
        write_output(&cli.out, "caption_steps.csv", &steps)?,
        write_output(&cli.out, "caption_weights.csv", &weights)?,
        write_output(&cli.out, "caption_aggregate.csv", &scores_csv(1, &exp.aggregate))?,
        write_output(&cli.out, "heatmap.pgm", &to_pgm(&exp.aggregate))?,
    ];
    println!("caption: {:?}", ct.caption);
    for p in outputs {
        println!("wrote {}", p.display());
    }
    Ok(())
}
