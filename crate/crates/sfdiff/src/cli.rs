//! Command-line entry point: simulate fields, build corpora, train the
//! denoiser, reconstruct from sparse observations, and aggregate sweeps.
//!
//! One JSON run configuration feeds every subcommand; flags override
//! config values. Exit codes: 0 success, 2 usage/configuration, 3
//! numerical failure. Identical inputs and seed give byte-identical
//! outputs (the loss CSV's wall-clock column is the sole exception).

use std::ffi::OsString;
use std::fs::{self, File, OpenOptions};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{build_test_corpus, build_training_corpus, CorpusReader, ProtocolConfig};
use crate::diffusion::{
    load_checkpoint, reconstruct, train, DenoiserSpec, UNet, DEFAULT_SAMPLING_STEPS,
};
use crate::error::{Error, Result};
use crate::eval::{
    nmse, nmse_db_from_ratios, render_heatmap, render_panel, sample_ratio, Region, SweepRow,
    SweepTable,
};
use crate::kernel_baseline::{reconstruct_slice, FitMode, DEFAULT_LAMBDA_REL};
use crate::rng::{substream, Domain};
use crate::room_acoustics::{magnitude, simulate_rtf, Grid, MagnitudeField, RoomSpec, DEFAULT_MARGIN};
use crate::diffusion::TrainerConfig;

pub const ESTIMATES_MAGIC: &[u8; 4] = b"SFE1";
pub const ESTIMATES_FORMAT_VERSION: u32 = 1;
/// Frequency window the denoiser's conditioning channel is calibrated for.
pub const MODEL_FREQUENCY_WINDOW_HZ: [f64; 2] = [30.0, 300.0];

/// Kernel baseline settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaselineConfig {
    pub lambda: f64,
    pub mode: FitMode,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self { lambda: DEFAULT_LAMBDA_REL, mode: FitMode::Complex }
    }
}

/// Evaluation settings.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSettings {
    pub region: Region,
}

/// JSON-backed run configuration shared by every subcommand. Unknown keys
/// are rejected; command-line flags override any value here.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub protocol: ProtocolConfig,
    pub model: DenoiserSpec,
    pub trainer: TrainerConfig,
    pub baseline: BaselineConfig,
    pub eval: EvalSettings,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("config {}: {e}", path.display())))
    }
}

#[derive(Parser)]
#[command(
    name = "sfdiff",
    version,
    about = "Sound field reconstruction: modal simulator, diffusion model, kernel baseline",
    propagate_version = true
)]
struct Cli {
    /// JSON run configuration; flags override its values.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Base seed for every random stream.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for parallel paths (default: machine parallelism).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate one room transfer function slice and render it.
    Simulate(SimulateArgs),
    /// Build a training or test corpus with its manifest.
    Dataset(DatasetArgs),
    /// Train the denoiser on a corpus.
    Train(TrainArgs),
    /// Reconstruct fields from sparse observations.
    Reconstruct(ReconstructArgs),
    /// Aggregate saved reconstructions into a sweep CSV.
    Eval(EvalArgs),
}

#[derive(Args)]
struct SimulateArgs {
    /// Room length along x in meters.
    #[arg(long)]
    lx: f64,
    /// Room length along y in meters.
    #[arg(long)]
    ly: f64,
    /// Room height in meters.
    #[arg(long)]
    lz: f64,
    /// Source x coordinate in meters.
    #[arg(long)]
    source_x: f64,
    /// Source y coordinate in meters.
    #[arg(long)]
    source_y: f64,
    /// Source z coordinate in meters.
    #[arg(long)]
    source_z: f64,
    /// Reverberation time in seconds.
    #[arg(long, default_value_t = 0.6)]
    t60: f64,
    /// Frequency in Hz.
    #[arg(long)]
    frequency: f64,
    /// Measurement-plane height in meters.
    #[arg(long)]
    z_o: f64,
    /// Mode-truncation margin.
    #[arg(long, default_value_t = DEFAULT_MARGIN)]
    margin: f64,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    out_dir: PathBuf,
}

#[derive(Args)]
struct DatasetArgs {
    /// Corpus kind: train or test.
    #[arg(long)]
    kind: String,
    /// Number of rooms to draw.
    #[arg(long)]
    rooms: usize,
    /// Frequencies per room (test corpora only).
    #[arg(long, default_value_t = 10)]
    freqs: usize,
    /// Permit frequency ranges outside the 30-300 Hz model window.
    #[arg(long)]
    allow_any_frequency: bool,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    out_dir: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Training corpus path.
    #[arg(long)]
    corpus: PathBuf,
    /// Checkpoint path to write (and to resume from).
    #[arg(long)]
    checkpoint: PathBuf,
    /// Per-step loss CSV path.
    #[arg(long)]
    loss_csv: Option<PathBuf>,
    /// Continue training from the existing checkpoint file.
    #[arg(long)]
    resume: bool,
    /// Passes over the corpus.
    #[arg(long)]
    epochs: Option<usize>,
    /// Samples per optimizer step.
    #[arg(long)]
    batch_size: Option<usize>,
    /// Adam learning rate.
    #[arg(long)]
    learning_rate: Option<f64>,
    /// Loss region: observed-only or full-grid.
    #[arg(long)]
    loss_mask: Option<String>,
    /// Steps between checkpoint saves (0 saves only at the end).
    #[arg(long)]
    checkpoint_every: Option<usize>,
    /// Base channel width of the denoiser.
    #[arg(long)]
    base: Option<usize>,
}

#[derive(Args)]
struct ReconstructArgs {
    /// Reconstruction method: sf-diff or kernel.
    #[arg(long)]
    method: String,
    /// Input corpus path.
    #[arg(long)]
    corpus: PathBuf,
    /// Trained checkpoint (sf-diff only).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Reconstruct only the sample at this corpus index.
    #[arg(long)]
    index: Option<u64>,
    /// Sampling steps (sf-diff only).
    #[arg(long)]
    steps: Option<usize>,
    /// Ridge weight (kernel only).
    #[arg(long)]
    lambda: Option<f64>,
    /// Kernel observation mode: complex or magnitude.
    #[arg(long)]
    fit_mode: Option<String>,
    /// Error region: full or unknown-only.
    #[arg(long)]
    region: Option<String>,
    /// Emit per-sample heatmaps and true/estimate panels.
    #[arg(long)]
    images: bool,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    out_dir: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Saved reconstructions from the reconstruct subcommand.
    #[arg(long)]
    estimates: PathBuf,
    /// Truth corpus path.
    #[arg(long)]
    corpus: PathBuf,
    /// Output CSV path (stdout if omitted).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Error region: full or unknown-only.
    #[arg(long)]
    region: Option<String>,
    /// Comma-separated microphone counts to aggregate (empty for none).
    #[arg(long)]
    densities: Option<String>,
}

/// Parses and dispatches, returning the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    let cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    let seed = cli.seed.or(cfg.seed).unwrap_or(0);
    if let Some(threads) = cli.threads.or(cfg.threads) {
        if threads == 0 {
            return Err(Error::Config("threads must be >= 1".into()));
        }
        let _ = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();
    }
    match cli.command {
        Command::Simulate(args) => cmd_simulate(&args),
        Command::Dataset(args) => cmd_dataset(&args, &cfg, seed),
        Command::Train(args) => cmd_train(&args, &cfg, cli.seed.or(cfg.seed)),
        Command::Reconstruct(args) => cmd_reconstruct(&args, &cfg, seed),
        Command::Eval(args) => cmd_eval(&args, &cfg),
    }
}

/// Deserializes a kebab-case enum token exactly as the config file would.
fn parse_token<T: DeserializeOwned>(what: &str, token: &str) -> Result<T> {
    serde_json::from_value(serde_json::Value::String(token.to_string()))
        .map_err(|_| Error::Config(format!("invalid {what} \"{token}\"")))
}

fn sha256_file(path: &Path) -> Result<String> {
    let mut file = File::open(path)?;
    let mut hasher = Sha256::new();
    std::io::copy(&mut file, &mut hasher)?;
    Ok(format!("{:x}", hasher.finalize()))
}

fn cmd_simulate(args: &SimulateArgs) -> Result<()> {
    let geometry = |e: Error| Error::Config(e.to_string());
    let room = RoomSpec::new(
        args.lx,
        args.ly,
        args.lz,
        args.t60,
        [args.source_x, args.source_y, args.source_z],
    )
    .map_err(geometry)?;
    let grid = Grid::standard(args.z_o).map_err(geometry)?;
    grid.validate_for(&room).map_err(geometry)?;
    if !(args.frequency.is_finite() && args.frequency > 0.0) {
        return Err(Error::Config(format!("frequency must be positive, got {}", args.frequency)));
    }
    let omega = 2.0 * std::f64::consts::PI * args.frequency;
    let field = simulate_rtf(&room, &grid, omega, args.margin)?;
    let mag = magnitude(&field);

    fs::create_dir_all(&args.out_dir)?;
    let complex_path = args.out_dir.join("field_complex.csv");
    let mut csv = String::from("i,j,re,im\n");
    for ((i, j), v) in field.indexed_iter() {
        csv.push_str(&format!("{i},{j},{},{}\n", v.re, v.im));
    }
    fs::write(&complex_path, csv)?;

    let magnitude_path = args.out_dir.join("field_magnitude.csv");
    let mut csv = String::from("i,j,magnitude\n");
    for ((i, j), v) in mag.indexed_iter() {
        csv.push_str(&format!("{i},{j},{v}\n"));
    }
    fs::write(&magnitude_path, csv)?;

    let png_path = args.out_dir.join("field.png");
    render_heatmap(&mag, &png_path)?;
    println!("wrote {}", complex_path.display());
    println!("wrote {}", magnitude_path.display());
    println!("wrote {}", png_path.display());
    Ok(())
}

fn cmd_dataset(args: &DatasetArgs, cfg: &RunConfig, seed: u64) -> Result<()> {
    let protocol = &cfg.protocol;
    let [lo, hi] = protocol.frequency;
    let [model_lo, model_hi] = MODEL_FREQUENCY_WINDOW_HZ;
    if (lo < model_lo || hi > model_hi) && !args.allow_any_frequency {
        return Err(Error::Config(format!(
            "frequency range [{lo}, {hi}] leaves the model window [{model_lo}, {model_hi}]; \
             pass --allow-any-frequency to build it anyway"
        )));
    }
    fs::create_dir_all(&args.out_dir)?;
    let (corpus_path, manifest_path, manifest) = match args.kind.as_str() {
        "train" => {
            let corpus = args.out_dir.join("train.sfd");
            let manifest = args.out_dir.join("train.manifest.json");
            let m = build_training_corpus(seed, args.rooms, protocol, &corpus, &manifest)?;
            (corpus, manifest, m)
        }
        "test" => {
            let corpus = args.out_dir.join("test.sfd");
            let manifest = args.out_dir.join("test.manifest.json");
            let m = build_test_corpus(seed, args.rooms, args.freqs, protocol, &corpus, &manifest)?;
            (corpus, manifest, m)
        }
        other => return Err(Error::Config(format!("invalid kind \"{other}\" (train or test)"))),
    };
    println!("wrote {} ({} samples)", corpus_path.display(), manifest.sample_count);
    println!("wrote {}", manifest_path.display());
    println!("corpus sha256 {}", sha256_file(&corpus_path)?);
    Ok(())
}

fn cmd_train(args: &TrainArgs, cfg: &RunConfig, seed: Option<u64>) -> Result<()> {
    let mut trainer = cfg.trainer.clone();
    if let Some(v) = seed {
        trainer.seed = v;
    }
    if let Some(v) = args.epochs {
        trainer.epochs = v;
    }
    if let Some(v) = args.batch_size {
        trainer.batch_size = v;
    }
    if let Some(v) = args.learning_rate {
        trainer.learning_rate = v;
    }
    if let Some(token) = &args.loss_mask {
        trainer.loss_mask = parse_token("loss mask", token)?;
    }
    if let Some(v) = args.checkpoint_every {
        trainer.checkpoint_every = v;
    }
    trainer.validate()?;
    let mut spec = cfg.model.clone();
    if let Some(v) = args.base {
        spec.base = v;
    }
    spec.validate()?;

    let corpus = CorpusReader::open(&args.corpus)?.read_all()?;
    if let Some(parent) = args.checkpoint.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }

    let (mut net, start_step, opt_state) = if args.resume {
        let ckpt = load_checkpoint(&args.checkpoint)?;
        if ckpt.spec != spec {
            return Err(Error::Config(
                "checkpoint model differs from the configured model; resume needs the same config"
                    .into(),
            ));
        }
        if ckpt.schedule != trainer.schedule {
            return Err(Error::Config(
                "checkpoint noise schedule differs from the configured schedule".into(),
            ));
        }
        let state = ckpt.optimizer.clone().ok_or_else(|| {
            Error::Config("checkpoint carries no optimizer state; cannot resume".into())
        })?;
        (ckpt.restore_network()?, ckpt.train_steps, Some(state))
    } else {
        (UNet::init(spec)?, 0, None)
    };

    let mut loss_file = match &args.loss_csv {
        Some(path) => {
            if let Some(parent) = path.parent() {
                if !parent.as_os_str().is_empty() {
                    fs::create_dir_all(parent)?;
                }
            }
            let file = OpenOptions::new()
                .create(true)
                .append(args.resume)
                .write(true)
                .truncate(!args.resume)
                .open(path)?;
            Some(BufWriter::new(file))
        }
        None => None,
    };
    let report = train(
        &mut net,
        &corpus,
        &trainer,
        start_step,
        opt_state.as_ref(),
        Some(&args.checkpoint),
        loss_file.as_mut().map(|f| f as &mut dyn Write),
    )?;
    if let Some(mut f) = loss_file {
        f.flush()?;
    }
    let final_loss = report.losses.last().copied().unwrap_or(f64::NAN);
    println!("trained to step {} (final loss {:.9})", report.steps, final_loss);
    println!("wrote {}", args.checkpoint.display());
    println!("checkpoint sha256 {}", sha256_file(&args.checkpoint)?);
    Ok(())
}

fn write_estimates(path: &Path, dims: (usize, usize), entries: &[(u64, MagnitudeField)]) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(ESTIMATES_MAGIC)?;
    out.write_all(&ESTIMATES_FORMAT_VERSION.to_le_bytes())?;
    out.write_all(&(entries.len() as u64).to_le_bytes())?;
    out.write_all(&(dims.0 as u32).to_le_bytes())?;
    out.write_all(&(dims.1 as u32).to_le_bytes())?;
    for (index, field) in entries {
        if field.dim() != dims {
            return Err(Error::Contract(format!(
                "estimate {index} has shape {:?}, file is {:?}",
                field.dim(),
                dims
            )));
        }
        out.write_all(&index.to_le_bytes())?;
        for v in field.iter() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn read_estimates(path: &Path) -> Result<Vec<(u64, MagnitudeField)>> {
    let mut input = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    input.read_exact(&mut magic)?;
    if &magic != ESTIMATES_MAGIC {
        return Err(Error::Format(format!("{} is not an estimates file", path.display())));
    }
    let mut u32buf = [0u8; 4];
    let mut u64buf = [0u8; 8];
    input.read_exact(&mut u32buf)?;
    let version = u32::from_le_bytes(u32buf);
    if version != ESTIMATES_FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported estimates version {version}")));
    }
    input.read_exact(&mut u64buf)?;
    let count = u64::from_le_bytes(u64buf);
    input.read_exact(&mut u32buf)?;
    let i_dim = u32::from_le_bytes(u32buf) as usize;
    input.read_exact(&mut u32buf)?;
    let j_dim = u32::from_le_bytes(u32buf) as usize;
    if i_dim == 0 || j_dim == 0 || count > 1 << 32 {
        return Err(Error::Format("estimates header out of range".into()));
    }
    let mut entries = Vec::with_capacity(count as usize);
    for _ in 0..count {
        input.read_exact(&mut u64buf)?;
        let index = u64::from_le_bytes(u64buf);
        let mut field = MagnitudeField::zeros((i_dim, j_dim));
        for v in field.iter_mut() {
            input.read_exact(&mut u64buf)?;
            *v = f64::from_le_bytes(u64buf);
        }
        entries.push((index, field));
    }
    let mut trailing = [0u8; 1];
    if input.read(&mut trailing)? != 0 {
        return Err(Error::Format("trailing bytes after estimates records".into()));
    }
    Ok(entries)
}

fn cmd_reconstruct(args: &ReconstructArgs, cfg: &RunConfig, seed: u64) -> Result<()> {
    let region = match &args.region {
        Some(token) => parse_token("region", token)?,
        None => cfg.eval.region,
    };
    let samples = CorpusReader::open(&args.corpus)?.read_all()?;
    if samples.is_empty() {
        return Err(Error::Config(format!("corpus {} has no samples", args.corpus.display())));
    }
    let indices: Vec<u64> = match args.index {
        Some(index) => {
            if index as usize >= samples.len() {
                return Err(Error::Config(format!(
                    "index {index} out of range for a {}-sample corpus",
                    samples.len()
                )));
            }
            vec![index]
        }
        None => (0..samples.len() as u64).collect(),
    };

    let method = args.method.as_str();
    let entries: Vec<(u64, MagnitudeField)> = match method {
        "kernel" => {
            let lambda = args.lambda.unwrap_or(cfg.baseline.lambda);
            let mode = match &args.fit_mode {
                Some(token) => parse_token("fit mode", token)?,
                None => cfg.baseline.mode,
            };
            indices
                .par_iter()
                .map(|&i| Ok((i, reconstruct_slice(&samples[i as usize], mode, lambda)?)))
                .collect::<Result<_>>()?
        }
        "sf-diff" => {
            let path = args.checkpoint.as_ref().ok_or_else(|| {
                Error::Config("sf-diff reconstruction needs --checkpoint".into())
            })?;
            let ckpt = load_checkpoint(path)?;
            let mut net = ckpt.restore_network()?;
            let schedule = ckpt.schedule.build()?;
            let steps = args.steps.unwrap_or(DEFAULT_SAMPLING_STEPS);
            let mut out = Vec::with_capacity(indices.len());
            for &i in &indices {
                let mut rng = substream(seed, Domain::Reconstruct, i);
                out.push((i, reconstruct(&mut net, &samples[i as usize], &schedule, steps, &mut rng)?));
            }
            out
        }
        other => {
            return Err(Error::Config(format!("invalid method \"{other}\" (sf-diff or kernel)")))
        }
    };

    fs::create_dir_all(&args.out_dir)?;
    let estimates_path = args.out_dir.join("estimates.sfe");
    let dims = entries[0].1.dim();
    write_estimates(&estimates_path, dims, &entries)?;
    if args.images {
        for (i, field) in &entries {
            let sample = &samples[*i as usize];
            render_heatmap(field, &args.out_dir.join(format!("sample_{i:05}_estimate.png")))?;
            render_panel(
                &[("true", &sample.magnitude), (method, field)],
                &args.out_dir.join(format!("sample_{i:05}_panel.png")),
            )?;
        }
    }
    let estimates: Vec<MagnitudeField> = entries.iter().map(|(_, f)| f.clone()).collect();
    let truths: Vec<MagnitudeField> =
        entries.iter().map(|(i, _)| samples[*i as usize].magnitude.clone()).collect();
    let masks: Vec<_> = entries.iter().map(|(i, _)| samples[*i as usize].mask.clone()).collect();
    let db = nmse(&estimates, &truths, Some(&masks), region)?;
    println!("wrote {}", estimates_path.display());
    println!("nmse_db {db:.6}");
    Ok(())
}

fn parse_densities(text: &str) -> Result<Vec<usize>> {
    let trimmed = text.trim();
    if trimmed.is_empty() {
        return Ok(Vec::new());
    }
    trimmed
        .split(',')
        .map(|tok| {
            tok.trim()
                .parse::<usize>()
                .map_err(|_| Error::Config(format!("invalid density \"{tok}\"")))
        })
        .collect()
}

fn cmd_eval(args: &EvalArgs, cfg: &RunConfig) -> Result<()> {
    let region = match &args.region {
        Some(token) => parse_token("region", token)?,
        None => cfg.eval.region,
    };
    let densities = match &args.densities {
        Some(text) => parse_densities(text)?,
        None => cfg.protocol.densities.clone(),
    };
    let entries = read_estimates(&args.estimates)?;
    if entries.is_empty() {
        return Err(Error::Config(format!(
            "estimates file {} holds no reconstructions",
            args.estimates.display()
        )));
    }
    let samples = CorpusReader::open(&args.corpus)?.read_all()?;
    let mut bad: Vec<u64> = entries
        .iter()
        .map(|(i, _)| *i)
        .filter(|&i| i as usize >= samples.len())
        .collect();
    let mut seen = vec![false; samples.len()];
    for (i, _) in &entries {
        if (*i as usize) < samples.len() {
            if seen[*i as usize] {
                bad.push(*i);
            }
            seen[*i as usize] = true;
        }
    }
    if !bad.is_empty() {
        bad.sort_unstable();
        return Err(Error::Config(format!(
            "estimates do not match the {}-sample corpus; offending ids {:?}",
            samples.len(),
            bad
        )));
    }

    let mut sorted: Vec<&(u64, MagnitudeField)> = entries.iter().collect();
    sorted.sort_by_key(|(i, _)| *i);
    let mut cells: Vec<((u64, usize), Vec<f64>)> = Vec::new();
    for (i, estimate) in sorted {
        let sample = &samples[*i as usize];
        let m = sample.mask.count();
        if !densities.contains(&m) {
            continue;
        }
        let ratio = sample_ratio(estimate, &sample.magnitude, Some(&sample.mask), region)
            .map_err(|e| Error::Domain(format!("sample {i}: {e}")))?;
        let key = (sample.frequency_hz.to_bits(), m);
        match cells.iter_mut().find(|(k, _)| *k == key) {
            Some((_, v)) => v.push(ratio),
            None => cells.push((key, vec![ratio])),
        }
    }
    cells.sort_by(|((fa, ma), _), ((fb, mb), _)| {
        f64::from_bits(*fa).total_cmp(&f64::from_bits(*fb)).then(ma.cmp(mb))
    });
    let rows = cells
        .into_iter()
        .map(|((fbits, m), ratios)| {
            Ok(SweepRow {
                frequency_hz: f64::from_bits(fbits),
                m,
                nmse_db: nmse_db_from_ratios(&ratios)?,
                n_samples: ratios.len(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let table = SweepTable { rows };
    let csv = table.to_csv();
    match &args.out {
        Some(path) => {
            if let Some(parent) = path.parent() {
                if !parent.as_os_str().is_empty() {
                    fs::create_dir_all(parent)?;
                }
            }
            fs::write(path, csv)?;
            println!("wrote {}", path.display());
        }
        None => print!("{csv}"),
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    #[test]
    fn run_config_rejects_unknown_keys() {
        let err = serde_json::from_str::<RunConfig>("{\"sead\": 1}");
        assert!(err.is_err());
    }

    #[test]
    fn run_config_defaults_round_trip() {
        let cfg = RunConfig::default();
        let json = serde_json::to_string(&cfg).unwrap();
        let back: RunConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(back.protocol.densities, cfg.protocol.densities);
        assert_eq!(back.trainer, cfg.trainer);
        assert_eq!(back.model, cfg.model);
    }

    #[test]
    fn token_parsing_matches_config_names() {
        let mask: crate::diffusion::LossMask = parse_token("loss mask", "observed-only").unwrap();
        assert_eq!(mask, crate::diffusion::LossMask::ObservedOnly);
        let mode: FitMode = parse_token("fit mode", "magnitude").unwrap();
        assert_eq!(mode, FitMode::Magnitude);
        let region: Region = parse_token("region", "unknown-only").unwrap();
        assert_eq!(region, Region::UnknownOnly);
        assert!(parse_token::<Region>("region", "both").is_err());
    }

    #[test]
    fn densities_parsing() {
        assert_eq!(parse_densities("").unwrap(), Vec::<usize>::new());
        assert_eq!(parse_densities(" 64, 128 ").unwrap(), vec![64, 128]);
        assert!(parse_densities("64,x").is_err());
    }

    #[test]
    fn estimates_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("est.sfe");
        let a = Array2::from_shape_fn((4, 3), |(i, j)| (i * 3 + j) as f64 * 0.25);
        let b = a.mapv(|v| v + 1.0);
        write_estimates(&path, (4, 3), &[(7, a.clone()), (2, b.clone())]).unwrap();
        let back = read_estimates(&path).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0].0, 7);
        assert_eq!(back[0].1, a);
        assert_eq!(back[1].0, 2);
        assert_eq!(back[1].1, b);
    }

    #[test]
    fn estimates_reject_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("est.sfe");
        let a = Array2::zeros((2, 2));
        write_estimates(&path, (2, 2), &[(0, a)]).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes[0] ^= 0xff;
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(read_estimates(&path), Err(Error::Format(_))));
        let mut bytes = fs::read(&path).unwrap();
        bytes[0] ^= 0xff;
        bytes.push(0);
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(read_estimates(&path), Err(Error::Format(_))));
    }
}
