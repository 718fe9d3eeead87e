//! The `nowcast` command line.
//!
//! Exit codes: 0 on success, 1 on runtime failure, 2 on usage errors
//! (bad flags, unknown model names, missing input paths).

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::checkpoint::Checkpoint;
use crate::data::{
    self, chunk, ingest, quality_filter, split, Dataset, FrameSequence, Ingest, SplitSizes, SynthConfig,
};
use crate::error::Error;
use crate::metrics::SsimMode;
use crate::models::{Model, ModelKind, ModelSpec};
use crate::tensor::Tensor;
use crate::training::{comparison_table, evaluate, rollout, train, EvalReport, Forecaster, Persistence, TrainConfig};

/// Environment variable naming the directory under which run directories
/// are created when `--out` is not given.
pub const RUN_ROOT_ENV: &str = "NOWCAST_RUN_ROOT";

#[derive(Debug, Parser)]
#[command(name = "nowcast", version, about = "Radar nowcasting with axial-attention UNets and baselines")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Ingest frame folders, chunk, filter, normalize, split and pack.
    Preprocess(PreprocessArgs),
    /// Generate a synthetic advection dataset.
    Synth(SynthArgs),
    /// Train a model and write a run directory.
    Train(TrainArgs),
    /// Score a checkpoint against the persistence baseline.
    Evaluate(EvaluateArgs),
    /// Roll a checkpoint forward on one sequence and print per-step scores.
    Rollout(RolloutArgs),
    /// Write target and predicted frames of one sequence as PGM images.
    Render(RenderArgs),
}

#[derive(Debug, Args)]
pub struct PreprocessArgs {
    /// Directory containing one sub-directory of frames per recording.
    pub input_dir: PathBuf,
    pub output_file: PathBuf,
    #[arg(long, default_value_t = 128)]
    pub size: usize,
    #[arg(long, default_value_t = data::SEQ_LEN)]
    pub seq_len: usize,
    #[arg(long, default_value_t = data::BAD_LIMIT)]
    pub bad_limit: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Frames kept per folder; shorter folders are rejected.
    #[arg(long, default_value_t = data::FOLDER_FRAMES)]
    pub clip: usize,
}

#[derive(Debug, Args)]
pub struct SplitArgs {
    /// Explicit split sizes; all three must be given together.
    #[arg(long, requires_all = ["val", "test"])]
    pub train: Option<usize>,
    #[arg(long, requires_all = ["train", "test"])]
    pub val: Option<usize>,
    #[arg(long, requires_all = ["train", "val"])]
    pub test: Option<usize>,
}

impl SplitArgs {
    fn sizes(&self, n: usize) -> SplitSizes {
        match (self.train, self.val, self.test) {
            (Some(train), Some(val), Some(test)) => SplitSizes { train, val, test },
            _ => SplitSizes::standard(n),
        }
    }
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    pub output_file: PathBuf,
    #[arg(long, default_value_t = 300)]
    pub sequences: usize,
    #[arg(long, default_value_t = 32)]
    pub size: usize,
    #[arg(long, default_value_t = data::SEQ_LEN)]
    pub seq_len: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub split: SplitArgs,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    /// Full widths at 128×128, reduced widths at any other size.
    Auto,
    Full,
    Desk,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    pub dataset: PathBuf,
    #[arg(long, value_parser = parse_model)]
    pub model: ModelKind,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t = Preset::Auto)]
    pub preset: Preset,
    /// Run directory; defaults to `$NOWCAST_RUN_ROOT/<model>-seed<seed>`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SplitName {
    Train,
    Val,
    Test,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    pub checkpoint: PathBuf,
    pub dataset: PathBuf,
    /// Rollout length; defaults to 5, shortened to what the sequences allow.
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long, value_enum, default_value_t = SplitName::Test)]
    pub split: SplitName,
    /// Use mean SSIM over k×k windows instead of whole-image statistics.
    #[arg(long, value_name = "K")]
    pub windowed_ssim: Option<usize>,
    /// Directory for `report.csv` and `persistence.csv`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RolloutArgs {
    pub checkpoint: PathBuf,
    pub dataset: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub sequence: usize,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long, value_enum, default_value_t = SplitName::Test)]
    pub split: SplitName,
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    pub checkpoint: PathBuf,
    pub dataset: PathBuf,
    pub sequence: usize,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long, value_enum, default_value_t = SplitName::Test)]
    pub split: SplitName,
    #[arg(long, default_value = "render")]
    pub out_dir: PathBuf,
}

fn parse_model(s: &str) -> Result<ModelKind, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

/// A failure classified by exit code.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Runtime(e)
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Runtime(e) => write!(f, "error: {e}"),
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn require_exists(path: &Path, what: &str) -> CliResult<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::Usage(format!("{what} `{}` does not exist", path.display())))
    }
}

/// Parses `args` (including the program name), runs the command, writes
/// human-readable output to `out`, and returns the process exit code.
pub fn run<I, T>(args: I, out: &mut dyn std::io::Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let command_line: Vec<String> = args.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    let result = match cli.command {
        Command::Preprocess(a) => cmd_preprocess(&a),
        Command::Synth(a) => cmd_synth(&a),
        Command::Train(a) => cmd_train(&a, &command_line),
        Command::Evaluate(a) => cmd_evaluate(&a),
        Command::Rollout(a) => cmd_rollout(&a),
        Command::Render(a) => cmd_render(&a),
    };
    match result {
        Ok(text) => {
            let _ = out.write_all(text.as_bytes());
            0
        }
        Err(e) => {
            eprintln!("{e}");
            e.exit_code()
        }
    }
}

pub fn cmd_preprocess(a: &PreprocessArgs) -> CliResult<String> {
    require_exists(&a.input_dir, "input directory")?;
    let mut folders: Vec<PathBuf> = fs::read_dir(&a.input_dir)
        .map_err(|e| Error::io(&a.input_dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    folders.sort();
    if folders.is_empty() {
        return Err(Error::Data(format!("{}: no frame folders found", a.input_dir.display())).into());
    }
    let mut report = String::new();
    let _ = writeln!(report, "folders found: {}", folders.len());
    let mut seqs = Vec::new();
    let (mut accepted, mut rejected) = (0usize, 0usize);
    for (i, folder) in folders.iter().enumerate() {
        match ingest(folder, a.size, a.clip)? {
            Ingest::Accepted(raw) => {
                accepted += 1;
                seqs.extend(chunk(&raw, i as u32, a.seq_len)?);
            }
            Ingest::Rejected { path, frames } => {
                rejected += 1;
                log::info!("rejected {} ({frames} frames < {})", path.display(), a.clip);
            }
        }
    }
    let _ = writeln!(report, "folders accepted: {accepted} (clipped to {} frames), rejected: {rejected}", a.clip);
    let _ = writeln!(report, "{} sequences of length {} before filtering", seqs.len(), a.seq_len);
    if seqs.is_empty() {
        return Err(Error::Data("no sequences survived ingestion".into()).into());
    }
    let f = quality_filter(seqs, a.bad_limit)?;
    let _ = writeln!(
        report,
        "frame-sum quartiles: {:.4} .. {:.4}; bad frames: {}; sequences dropped (> {} bad): {}",
        f.lower, f.upper, f.bad_frames, a.bad_limit, f.dropped
    );
    let _ = writeln!(report, "{} sequences after filtering", f.kept.len());
    let sizes = SplitSizes::standard(f.kept.len());
    let ds = split(f.kept, a.seed, sizes)?;
    ds.save(&a.output_file)?;
    let _ = writeln!(report, "split: {} train / {} val / {} test", ds.train.len(), ds.val.len(), ds.test.len());
    let _ = writeln!(report, "wrote {} (sha256 {})", a.output_file.display(), file_hash(&a.output_file)?);
    Ok(report)
}

pub fn cmd_synth(a: &SynthArgs) -> CliResult<String> {
    let cfg = SynthConfig::new(a.sequences, a.seq_len, a.size, a.seed);
    let seqs = data::synth_generate(&cfg)?;
    let sizes = a.split.sizes(seqs.len());
    if sizes.total() != seqs.len() {
        return Err(CliError::Usage(format!(
            "split {}+{}+{} does not match --sequences {}",
            sizes.train, sizes.val, sizes.test, a.sequences
        )));
    }
    let ds = split(seqs, a.seed, sizes)?;
    ds.save(&a.output_file)?;
    Ok(format!(
        "wrote {}: {} train / {} val / {} test, {}x{}x{} (sha256 {})\n",
        a.output_file.display(),
        ds.train.len(),
        ds.val.len(),
        ds.test.len(),
        a.seq_len,
        a.size,
        a.size,
        file_hash(&a.output_file)?
    ))
}

/// Hex SHA-256 of a file's bytes.
pub fn file_hash(path: &Path) -> crate::Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let digest = Sha256::digest(&bytes);
    Ok(digest.iter().fold(String::with_capacity(64), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    }))
}

/// Contents of `manifest.json` in a run directory.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command_line: Vec<String>,
    pub version: String,
    pub config: TrainConfig,
    pub model: ModelSpec,
    pub seed: u64,
    pub dataset: PathBuf,
    pub dataset_sha256: String,
    pub started_unix: u64,
    pub finished_unix: Option<u64>,
}

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

pub const CHECKPOINT_FILE: &str = "checkpoint.axnw";
pub const LOSS_FILE: &str = "loss.csv";
pub const MANIFEST_FILE: &str = "manifest.json";

fn write_manifest(dir: &Path, m: &RunManifest) -> crate::Result<()> {
    let path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(m).expect("manifest serializes");
    fs::write(&path, text + "\n").map_err(|e| Error::io(path, e))
}

fn load_dataset(path: &Path) -> CliResult<Dataset> {
    require_exists(path, "dataset")?;
    Ok(Dataset::load(path)?)
}

fn model_spec_for(kind: ModelKind, preset: Preset, h: usize, w: usize) -> CliResult<ModelSpec> {
    if h != w {
        return Err(Error::Data(format!("frames must be square, got {h}x{w}")).into());
    }
    Ok(match preset {
        Preset::Full => {
            let mut s = ModelSpec::full(kind);
            s.height = h;
            s.width = w;
            s
        }
        Preset::Desk => ModelSpec::desk(kind, h),
        Preset::Auto if h == 128 => ModelSpec::full(kind),
        Preset::Auto => ModelSpec::desk(kind, h),
    })
}

pub fn cmd_train(a: &TrainArgs, command_line: &[String]) -> CliResult<String> {
    let ds = load_dataset(&a.dataset)?;
    let (_, h, w) = ds.dims()?;
    let spec = model_spec_for(a.model, a.preset, h, w)?;
    let mut cfg = TrainConfig::defaults(a.model);
    cfg.seed = a.seed;
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    if let Some(lr) = a.lr {
        cfg.lr = lr;
    }
    if let Some(b) = a.batch {
        cfg.batch_size = b;
    }
    let dir = match &a.out {
        Some(d) => d.clone(),
        None => {
            let root = std::env::var_os(RUN_ROOT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs"));
            root.join(format!("{}-seed{}", a.model, a.seed))
        }
    };
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut manifest = RunManifest {
        command_line: command_line.to_vec(),
        version: concat!("v", env!("CARGO_PKG_VERSION")).to_string(),
        config: cfg.clone(),
        model: spec.clone(),
        seed: a.seed,
        dataset: a.dataset.clone(),
        dataset_sha256: file_hash(&a.dataset)?,
        started_unix: unix_now(),
        finished_unix: None,
    };
    write_manifest(&dir, &manifest)?;

    let model = Model::new(spec, a.seed)?;
    let ckpt_path = dir.join(CHECKPOINT_FILE);
    let loss_path = dir.join(LOSS_FILE);
    let mut curve = crate::training::LossCurve::default();
    let mut log = String::new();
    // The checkpoint and curve on disk always reflect the last completed
    // epoch, so a diverging run leaves its last good state behind.
    let result = train(model, cfg, &ds, |row, model| {
        curve.rows.push(*row);
        curve.save(&loss_path)?;
        model.to_checkpoint().save(&ckpt_path)?;
        let _ = writeln!(log, "epoch {:>3}  train {:.6}  val {:.6}", row.epoch, row.train_loss, row.val_loss);
        Ok(())
    });
    let (_, curve) = result?;
    manifest.finished_unix = Some(unix_now());
    write_manifest(&dir, &manifest)?;
    let last = curve.rows.last().expect("row 0 is always present");
    let _ = writeln!(log, "run directory: {} (final train loss {:.6})", dir.display(), last.train_loss);
    Ok(log)
}

fn pick(ds: &Dataset, s: SplitName) -> &[FrameSequence] {
    match s {
        SplitName::Train => &ds.train,
        SplitName::Val => &ds.val,
        SplitName::Test => &ds.test,
    }
}

fn load_compatible(ckpt: &Path, ds_path: &Path) -> CliResult<(Model, Dataset)> {
    require_exists(ckpt, "checkpoint")?;
    let model = Model::from_checkpoint(&Checkpoint::load(ckpt)?)?;
    let ds = load_dataset(ds_path)?;
    let (l, h, w) = ds.dims()?;
    let spec = model.spec();
    if (h, w) != (spec.height, spec.width) {
        return Err(Error::shape(
            "evaluate",
            format!("model expects {}x{} frames but the dataset holds {h}x{w}", spec.height, spec.width),
        )
        .into());
    }
    if l <= spec.input_frames() {
        return Err(Error::shape(
            "evaluate",
            format!("model takes {} input frames but sequences have only {l}", spec.input_frames()),
        )
        .into());
    }
    Ok((model, ds))
}

/// Requested steps, or 5 shortened to what the sequence length allows.
fn resolve_steps(requested: Option<usize>, seq_len: usize, m: usize) -> CliResult<usize> {
    let avail = seq_len - m;
    match requested {
        Some(0) => Err(CliError::Usage("--steps must be >= 1".into())),
        Some(s) if s > avail => {
            Err(CliError::Usage(format!("--steps {s} needs {} frames per sequence, only {seq_len} available", m + s)))
        }
        Some(s) => Ok(s),
        None => Ok(avail.min(5)),
    }
}

pub fn cmd_evaluate(a: &EvaluateArgs) -> CliResult<String> {
    let (model, ds) = load_compatible(&a.checkpoint, &a.dataset)?;
    let seqs = pick(&ds, a.split);
    if seqs.is_empty() {
        return Err(Error::Data(format!("{:?} split is empty", a.split)).into());
    }
    let m = model.spec().input_frames();
    let steps = resolve_steps(a.steps, seqs[0].len(), m)?;
    let mode = match a.windowed_ssim {
        Some(k) => SsimMode::Windowed(k),
        None => SsimMode::Global,
    };
    let report = evaluate(&model, seqs, steps, mode)?;
    let base = evaluate(&Persistence { input_frames: m }, seqs, steps, mode)?;
    if let Some(dir) = &a.out {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        report.save(&dir.join("report.csv"))?;
        base.save(&dir.join("persistence.csv"))?;
    }
    Ok(summary(&report, &base, seqs.len()))
}

fn summary(report: &EvalReport, base: &EvalReport, n: usize) -> String {
    let mut s = format!("{n} sequences x {} steps\n", report.steps);
    s.push_str(&comparison_table(&[report, base]));
    for step in 1..=report.steps {
        let (r, b) = (report.step_aggregate(step), base.step_aggregate(step));
        let _ = writeln!(
            s,
            "step {step}: {} SSIM {:.4} PSNR {:.4} | persistence SSIM {:.4} PSNR {:.4}",
            report.label, r.ssim, r.psnr, b.ssim, b.psnr
        );
    }
    let inf = report.aggregate().infinite_psnr + base.aggregate().infinite_psnr;
    if inf > 0 {
        let _ = writeln!(s, "{inf} exact predictions (infinite PSNR) excluded from PSNR means");
    }
    s
}

fn sequence<'d>(ds: &'d Dataset, split: SplitName, id: usize) -> CliResult<&'d FrameSequence> {
    let seqs = pick(ds, split);
    seqs.get(id).ok_or_else(|| {
        CliError::Runtime(Error::Data(format!(
            "sequence {id} out of range: valid ids are 0..={} in the {:?} split",
            seqs.len().saturating_sub(1),
            split
        )))
    })
}

pub fn cmd_rollout(a: &RolloutArgs) -> CliResult<String> {
    let (model, ds) = load_compatible(&a.checkpoint, &a.dataset)?;
    let seq = sequence(&ds, a.split, a.sequence)?;
    let m = model.spec().input_frames();
    let steps = resolve_steps(a.steps, seq.len(), m)?;
    let report = evaluate(&model, std::slice::from_ref(seq), steps, SsimMode::Global)?;
    let mut s = String::from("step,mse,psnr,ssim\n");
    for r in &report.rows {
        let _ = writeln!(s, "{},{},{},{}", r.step, r.metrics.mse, r.metrics.psnr, r.metrics.ssim);
    }
    Ok(s)
}

/// Display quantization: `round(255 v)`.
pub fn to_gray8(frame: &Tensor) -> Vec<u8> {
    frame.data().iter().map(|v| (255.0 * v.clamp(0.0, 1.0)).round() as u8).collect()
}

fn write_pgm(path: &Path, frame: &Tensor) -> crate::Result<()> {
    let (h, w) = (frame.shape()[0], frame.shape()[1]);
    let img = image::GrayImage::from_raw(w as u32, h as u32, to_gray8(frame)).expect("buffer matches extent");
    use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let encoder =
        PnmEncoder::new(std::io::BufWriter::new(file)).with_subtype(PnmSubtype::Graymap(SampleEncoding::Binary));
    img.write_with_encoder(encoder).map_err(|e| Error::Image { path: path.to_path_buf(), source: e })
}

pub fn cmd_render(a: &RenderArgs) -> CliResult<String> {
    let (model, ds) = load_compatible(&a.checkpoint, &a.dataset)?;
    let seq = sequence(&ds, a.split, a.sequence)?;
    let m = model.spec().input_frames();
    let steps = resolve_steps(a.steps, seq.len(), m)?;
    let pred = rollout(&model as &dyn Forecaster, &seq.window(0, m), steps)?;
    fs::create_dir_all(&a.out_dir).map_err(|e| Error::io(&a.out_dir, e))?;
    for t in 0..steps {
        write_pgm(&a.out_dir.join(format!("target_{}.pgm", t + 1)), &seq.frame(m + t))?;
        write_pgm(&a.out_dir.join(format!("output_{}.pgm", t + 1)), &pred.index_first(t))?;
    }
    Ok(format!("wrote {} images to {}\n", 2 * steps, a.out_dir.display()))
}
