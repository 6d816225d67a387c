//! The `csdmt` command line: dataset generation, training, inference,
//! makeup control, evaluation and the HTTP service.

pub mod server;

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{info, warn};

use csdmt_core::control::{self, ControlOp, Model, Region};
use csdmt_core::evalsuite::{evaluate, EvalConfig};
use csdmt_core::facedata::{parse_sample_id, synth_sample, write_synthetic_dataset};
use csdmt_core::trainer::{train, TrainConfig};
use csdmt_core::{Image, ParsingMap};

/// Environment variable naming the checkpoint `serve` loads by default.
pub const CHECKPOINT_ENV: &str = "CSDMT_CHECKPOINT";

#[derive(Debug, Parser)]
#[command(name = "csdmt", version, about = "Makeup transfer with content-style decoupling")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic paired face dataset.
    SynthData(SynthArgs),
    /// Train a model from a TOML or JSON config.
    Train(TrainArgs),
    /// Transfer the reference's makeup onto the source.
    Infer(InferArgs),
    /// Run one makeup control operation.
    Control(ControlArgs),
    /// Run the self-augmented evaluation protocol.
    Eval(EvalArgs),
    /// Start the HTTP inference service.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// Samples per domain.
    #[arg(long, default_value_t = 200)]
    pub n: usize,
    #[arg(long)]
    pub n_makeup: Option<usize>,
    #[arg(long)]
    pub n_non_makeup: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 64)]
    pub size: usize,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Continue from this checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    #[arg(long)]
    pub max_iterations: Option<u64>,
}

/// A source face and where to write results.
#[derive(Debug, Args)]
pub struct IoArgs {
    #[arg(long)]
    pub source: PathBuf,
    /// Parsing map of the source; found automatically for dataset files and
    /// synthetic sample ids.
    #[arg(long)]
    pub source_parsing: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write the deformed-LF conditioning as a small image.
    #[arg(long)]
    pub preview: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[command(flatten)]
    pub io: IoArgs,
    #[arg(long)]
    pub reference: PathBuf,
    #[arg(long)]
    pub reference_parsing: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum OpName {
    Removal,
    InterpGlobal,
    InterpLocal,
    Skin,
    Partial,
    Edit,
}

#[derive(Debug, Args)]
pub struct ControlArgs {
    #[command(flatten)]
    pub io: IoArgs,
    #[arg(long, value_enum)]
    pub op: OpName,
    /// References in operation order: two for interpolation, lip/eye/face
    /// for partial, the original reference for edit.
    #[arg(long = "reference", required = true)]
    pub references: Vec<PathBuf>,
    /// Parsing maps matching `--reference`, in the same order.
    #[arg(long = "reference-parsing")]
    pub reference_parsings: Vec<PathBuf>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub region: Option<Region>,
    /// Painted copy of the reference for `--op edit`.
    #[arg(long)]
    pub edited: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value_t = 50)]
    pub samples: usize,
    /// First held-out synthetic index.
    #[arg(long, default_value_t = 200)]
    pub first_index: u64,
    #[arg(long, default_value_t = 0)]
    pub dataset_seed: u64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    /// JSON report path.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Markdown report path.
    #[arg(long)]
    pub markdown: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    /// Checkpoints to serve; the first is the default model.
    #[arg(long = "checkpoint", env = CHECKPOINT_ENV, required = true, value_delimiter = ',')]
    pub checkpoints: Vec<PathBuf>,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    /// Side length every request image must have.
    #[arg(long, default_value_t = 64)]
    pub size: usize,
}

/// Parses `args` and runs the command; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}

pub fn execute(cmd: Command) -> Result<()> {
    match cmd {
        Command::SynthData(a) => synth_data(&a),
        Command::Train(a) => train_cmd(&a),
        Command::Infer(a) => infer(&a),
        Command::Control(a) => control_cmd(&a),
        Command::Eval(a) => eval_cmd(&a),
        Command::Serve(a) => server::serve(&a),
    }
}

fn synth_data(a: &SynthArgs) -> Result<()> {
    let m = write_synthetic_dataset(&a.out, a.seed, a.n_makeup.unwrap_or(a.n), a.n_non_makeup.unwrap_or(a.n), a.size)?;
    println!("wrote {} makeup and {} non-makeup faces to {}", m.makeup, m.non_makeup, a.out.display());
    Ok(())
}

fn train_cmd(a: &TrainArgs) -> Result<()> {
    let mut cfg = TrainConfig::from_file(&a.config)?;
    if let Some(d) = &a.out_dir {
        cfg.out_dir = d.clone();
    }
    if let Some(n) = a.max_iterations {
        cfg.max_iterations = n;
    }
    let out = train(&cfg, a.resume.as_deref())?;
    if let Some(m) = out.metrics.last() {
        println!("iteration {} total loss {:.4}", m.iteration, m.total);
    }
    println!("checkpoint {}", out.final_checkpoint.display());
    println!("metrics {}", out.metrics_path.display());
    Ok(())
}

/// Stored parsing next to a dataset image: `<root>/images/<domain>/<f>`
/// maps to `<root>/parsing/<domain>/<f>`.
fn dataset_parsing_path(image: &Path) -> Option<PathBuf> {
    let domain_dir = image.parent()?;
    let images_dir = domain_dir.parent()?;
    if images_dir.file_name()? != "images" {
        return None;
    }
    let p = images_dir.parent()?.join("parsing").join(domain_dir.file_name()?).join(image.file_name()?);
    p.is_file().then_some(p)
}

/// Loads an image and finds its parsing map: an explicit path, the dataset
/// layout, or a synthetic sample id in the file stem.
pub fn load_face(image: &Path, parsing: Option<&Path>) -> Result<(Image, ParsingMap)> {
    let bytes = fs::read(image).with_context(|| format!("reading {}", image.display()))?;
    let img = Image::from_png(&bytes).with_context(|| format!("decoding {}", image.display()))?;
    let parsing = match parsing.map(Path::to_path_buf).or_else(|| dataset_parsing_path(image)) {
        Some(p) => {
            let b = fs::read(&p).with_context(|| format!("reading {}", p.display()))?;
            ParsingMap::from_png(&b).with_context(|| format!("decoding {}", p.display()))?
        }
        None => {
            let stem = image.file_stem().map(|s| s.to_string_lossy()).unwrap_or_default();
            let Some((seed, domain, index)) = parse_sample_id(&stem) else {
                bail!(
                    "no parsing map for {}: pass one explicitly (no face parser is bundled)",
                    image.display()
                );
            };
            synth_sample(seed, domain, index, img.height())?.parsing
        }
    };
    if (parsing.height(), parsing.width()) != (img.height(), img.width()) {
        bail!("parsing map size differs from {}", image.display());
    }
    Ok((img, parsing))
}

fn write_png(path: &Path, img: &Image) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, img.to_png()?).with_context(|| format!("writing {}", path.display()))
}

fn write_output(io: &IoArgs, out: &control::ControlOutput) -> Result<()> {
    for w in &out.warnings {
        warn!("{w}");
    }
    write_png(&io.out, &out.image)?;
    if let Some(p) = &io.preview {
        write_png(p, &out.preview()?)?;
    }
    info!("wrote {}", io.out.display());
    Ok(())
}

fn infer(a: &InferArgs) -> Result<()> {
    let model = Model::load(&a.io.checkpoint)?;
    let x = load_face(&a.io.source, a.io.source_parsing.as_deref())?;
    let y = load_face(&a.reference, a.reference_parsing.as_deref())?;
    let out = control::transfer(&model, (&x.0, &x.1), (&y.0, &y.1))?;
    write_output(&a.io, &out)
}

fn control_op(a: &ControlArgs) -> Result<ControlOp> {
    let beta = || a.beta.with_context(|| format!("--op {:?} needs --beta", a.op));
    Ok(match a.op {
        OpName::Removal => ControlOp::Removal,
        OpName::Partial => ControlOp::Partial,
        OpName::Edit => ControlOp::Edit,
        OpName::InterpGlobal => ControlOp::InterpolateGlobal { beta: beta()? },
        OpName::Skin => ControlOp::PreserveSkin { beta: beta()? },
        OpName::InterpLocal => ControlOp::InterpolateLocal {
            beta: beta()?,
            region: a.region.context("--op interp-local needs --region")?,
        },
    })
}

fn control_cmd(a: &ControlArgs) -> Result<()> {
    let op = control_op(a)?;
    if a.references.len() != op.references() {
        bail!("--op {:?} needs {} --reference, got {}", a.op, op.references(), a.references.len());
    }
    if !a.reference_parsings.is_empty() && a.reference_parsings.len() != a.references.len() {
        bail!("give one --reference-parsing per --reference or none");
    }
    let model = Model::load(&a.io.checkpoint)?;
    let x = load_face(&a.io.source, a.io.source_parsing.as_deref())?;
    let mut refs = Vec::new();
    for (i, r) in a.references.iter().enumerate() {
        refs.push(load_face(r, a.reference_parsings.get(i).map(PathBuf::as_path))?);
    }
    match (&a.edited, a.op) {
        (Some(e), OpName::Edit) => {
            let bytes = fs::read(e).with_context(|| format!("reading {}", e.display()))?;
            refs[0].0 = Image::from_png(&bytes).with_context(|| format!("decoding {}", e.display()))?;
        }
        (None, OpName::Edit) => bail!("--op edit needs --edited"),
        (Some(_), _) => bail!("--edited only applies to --op edit"),
        (None, _) => {}
    }
    let views: Vec<_> = refs.iter().map(|(i, p)| (i, p)).collect();
    let out = control::run(&model, &op, (&x.0, &x.1), &views)?;
    write_output(&a.io, &out)
}

fn eval_cmd(a: &EvalArgs) -> Result<()> {
    let model = Model::load(&a.checkpoint)?;
    let cfg = EvalConfig {
        checkpoint: a.checkpoint.display().to_string(),
        seed: a.seed,
        dataset_seed: a.dataset_seed,
        first_index: a.first_index,
        samples: a.samples,
        size: a.size,
        ..Default::default()
    };
    let report = evaluate(&model, model.d(), &cfg)?;
    if let Some(p) = &a.out {
        fs::write(p, report.to_json()?).with_context(|| format!("writing {}", p.display()))?;
    }
    let md = report.to_markdown();
    if let Some(p) = &a.markdown {
        fs::write(p, &md).with_context(|| format!("writing {}", p.display()))?;
    }
    print!("{md}");
    Ok(())
}
