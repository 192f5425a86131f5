//! Command-line driver. Every subcommand resolves its configuration
//! (defaults, then an optional TOML file, then flags), writes it to a fresh
//! run directory and puts all of its outputs there.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::datakit::{self, Corruption, DatasetRecord};
use crate::decomposition::{eta_statistics, estimate_common_direction, score_table, CommonDirection, PromptCorpus};
use crate::diffusion::{self, ddim_update, guided_eps, initial_noise, train_sft, DiffusionModel, ScheduleConfig, SftConfig};
use crate::encoders::{ImageEncoderConfig, TextEncoderConfig};
use crate::error::{Error, Result};
use crate::evalkit::{generation_scores, length_sweep, retrieval_r_at_1, segment_alignment_report, EmbeddingKind};
use crate::params::AdamConfig;
use crate::preference::{train_preference_model, LossVariant, PrefTrainConfig, PreferenceModel, ScoreMode};
use crate::checkpoint::Checkpoint;
use crate::reward::{train_rft, RewardConfig};
use crate::rng;
use crate::segmentation::{RawPrompt, Vocabulary};

pub const VOCAB_FILE: &str = "vocab.txt";
pub const CONFIG_FILE: &str = "config.toml";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const SPLITS: [&str; 3] = ["train", "val", "test"];

const PAIR_SEED_TAG: u64 = 0x5041_4952;

#[derive(Debug, Parser)]
#[command(name = "longalign", version, about = "Toy long-caption alignment pipeline", arg_required_else_help = true)]
pub struct Cli {
    /// Parent directory for run directories.
    #[arg(long, global = true, default_value = "runs")]
    pub runs: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic dataset with manifests and preference pairs.
    GenData(GenDataArgs),
    /// Train the segment-level preference model.
    TrainPref(TrainPrefArgs),
    /// Estimate the common text direction of a trained preference model.
    FitDirection(FitDirectionArgs),
    /// Supervised fine-tuning of the diffusion model on long captions.
    TrainSft(TrainSftArgs),
    /// Reward fine-tuning against the decomposed preference score.
    TrainRft(TrainRftArgs),
    /// Draw images from a diffusion checkpoint.
    Sample(SampleArgs),
    /// Text-to-image R@1 for full and relevant embeddings.
    EvalRetrieval(EvalRetrievalArgs),
    /// Decomposed score tables, and generation scores for a model.
    EvalScores(EvalScoresArgs),
    /// Per-segment best-matching image among candidates.
    AlignReport(AlignReportArgs),
}

fn parse_kebab<T: DeserializeOwned>(s: &str) -> std::result::Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|e| e.to_string())
}

macro_rules! overlay {
    ($cfg:ident, $args:ident; $($f:ident),* $(,)?) => {
        $( if let Some(v) = $args.$f.clone() { $cfg.$f = v; } )*
    };
}

macro_rules! overlay_opt {
    ($cfg:ident, $args:ident; $($f:ident),* $(,)?) => {
        $( if let Some(v) = $args.$f.clone() { $cfg.$f = Some(v); } )*
    };
}

fn load_config<C: DeserializeOwned + Default>(path: Option<&Path>) -> Result<C> {
    match path {
        None => Ok(C::default()),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))
        }
    }
}

fn need<'a>(p: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path> {
    p.as_deref().ok_or_else(|| Error::Config(format!("--{flag} is required (flag or config file)")))
}

/// A fresh output directory `<command>-<timestamp>-s<seed>` holding
/// the resolved config and the metrics stream.
pub struct RunDir {
    pub path: PathBuf,
    metrics: BufWriter<fs::File>,
}

impl RunDir {
    pub fn create(root: &Path, command: &str, seed: u64, config: &impl Serialize) -> Result<Self> {
        fs::create_dir_all(root)?;
        let base = format!("{command}-{}-s{seed}", chrono::Utc::now().format("%Y%m%d-%H%M%S"));
        let mut k = 0;
        let path = loop {
            let name = if k == 0 { base.clone() } else { format!("{base}-{k}") };
            let p = root.join(name);
            match fs::create_dir(&p) {
                Ok(()) => break p,
                Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => k += 1,
                Err(e) => return Err(e.into()),
            }
        };
        let text = toml::to_string(config).map_err(|e| Error::Config(e.to_string()))?;
        fs::write(path.join(CONFIG_FILE), text)?;
        let metrics = BufWriter::new(fs::File::create(path.join(METRICS_FILE))?);
        Ok(Self { path, metrics })
    }

    pub fn log(&mut self, record: &impl Serialize) -> Result<()> {
        serde_json::to_writer(&mut self.metrics, record)?;
        self.metrics.write_all(b"\n")?;
        Ok(())
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    fn finish(mut self) -> Result<PathBuf> {
        self.metrics.flush()?;
        println!("run directory: {}", self.path.display());
        Ok(self.path)
    }
}

// ---------------------------------------------------------------- gen-data

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenDataConfig {
    pub n: usize,
    pub seed: u64,
    pub train: f64,
    pub val: f64,
    pub test: f64,
    pub corruption: Corruption,
}

impl Default for GenDataConfig {
    fn default() -> Self {
        Self { n: 1000, seed: 0, train: 0.8, val: 0.1, test: 0.1, corruption: Corruption::Mixed }
    }
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub train: Option<f64>,
    #[arg(long)]
    pub val: Option<f64>,
    #[arg(long)]
    pub test: Option<f64>,
    /// segment-drop, attribute-swap or mixed.
    #[arg(long, value_parser = parse_kebab::<Corruption>)]
    pub corruption: Option<Corruption>,
}

fn gen_data(runs: &Path, a: &GenDataArgs) -> Result<PathBuf> {
    let mut cfg: GenDataConfig = load_config(a.config.as_deref())?;
    overlay!(cfg, a; n, seed, train, val, test, corruption);
    if cfg.n == 0 {
        return Err(Error::Config("n must be at least 1".into()));
    }
    let mut run = RunDir::create(runs, "gen-data", cfg.seed, &cfg)?;
    let splits = datakit::generate_dataset(cfg.n, cfg.seed, (cfg.train, cfg.val, cfg.test))?;
    datakit::grammar_vocabulary().save(&run.file(VOCAB_FILE))?;
    for (i, (name, records)) in SPLITS.iter().zip([&splits.train, &splits.val, &splits.test]).enumerate() {
        datakit::write_manifest(&run.path, name, records)?;
        let (pairs, skipped) = datakit::derive_preference_pairs(records, rng::derive_seed(cfg.seed, PAIR_SEED_TAG, i as u64), cfg.corruption)?;
        datakit::write_pairs(&run.path, &format!("pairs_{name}"), &pairs)?;
        run.log(&json!({ "split": name, "records": records.len(), "pairs": pairs.len(), "skipped": skipped }))?;
        println!("{name:5}  {:5} records  {:5} pairs  {skipped} skipped", records.len(), pairs.len());
    }
    run.finish()
}

// ---------------------------------------------------------------- train-pref

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainPrefConfig {
    pub data: Option<PathBuf>,
    pub seed: u64,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub variant: LossVariant,
    pub tau: f64,
    pub ema_decay: f64,
    pub cosine: bool,
}

impl Default for TrainPrefConfig {
    fn default() -> Self {
        let d = PrefTrainConfig::default();
        Self {
            data: None,
            seed: d.seed,
            steps: d.steps,
            batch_size: d.batch_size,
            lr: d.adam.lr,
            variant: d.variant,
            tau: crate::preference::DEFAULT_TAU,
            ema_decay: d.ema_decay,
            cosine: d.cosine,
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainPrefArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// A gen-data run directory.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// single, seg, seg-a or seg-o.
    #[arg(long, value_parser = parse_kebab::<LossVariant>)]
    pub variant: Option<LossVariant>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub ema_decay: Option<f64>,
    #[arg(long)]
    pub cosine: Option<bool>,
}

fn train_pref(runs: &Path, a: &TrainPrefArgs) -> Result<PathBuf> {
    let mut cfg: TrainPrefConfig = load_config(a.config.as_deref())?;
    overlay!(cfg, a; seed, steps, batch_size, lr, variant, tau, ema_decay, cosine);
    overlay_opt!(cfg, a; data);
    let data = need(&cfg.data, "data")?.to_path_buf();
    let vocab = Vocabulary::load(&data.join(VOCAB_FILE))?;
    let train = datakit::read_pairs(&data, "pairs_train")?;
    let val = datakit::read_pairs(&data, "pairs_val")?;
    let mut run = RunDir::create(runs, "train-pref", cfg.seed, &cfg)?;
    let text = TextEncoderConfig::toy(vocab.size());
    let image = ImageEncoderConfig::toy(datakit::IMAGE_SHAPE, datakit::CELL_PX);
    let mut model = PreferenceModel::new(vocab, text, image, cfg.tau, cfg.seed)?;
    let tc = PrefTrainConfig {
        seed: cfg.seed,
        steps: cfg.steps,
        batch_size: cfg.batch_size,
        variant: cfg.variant,
        adam: AdamConfig { lr: cfg.lr, ..PrefTrainConfig::default().adam },
        ema_decay: cfg.ema_decay,
        cosine: cfg.cosine,
    };
    let mut losses = Vec::new();
    let report = train_preference_model(&mut model, &train, &val, &tc, |step, loss| losses.push((step, loss)))?;
    for (step, loss) in losses {
        run.log(&json!({ "step": step, "loss": loss }))?;
    }
    if let (Some(before), Some(after)) = (report.heldout_before, report.heldout_after) {
        run.log(&json!({ "heldout_before": before, "heldout_after": after }))?;
        println!("held-out NLL {:.4} -> {:.4}, accuracy {:.3} -> {:.3}", before.nll, after.nll, before.accuracy, after.accuracy);
    }
    model.to_checkpoint()?.save(&run.file("pref.ckpt"))?;
    run.finish()
}

// ---------------------------------------------------------------- fit-direction

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitDirectionConfig {
    pub pref: Option<PathBuf>,
    pub data: Option<PathBuf>,
    pub split: String,
    pub mode: ScoreMode,
    pub bins: usize,
    pub seed: u64,
}

impl Default for FitDirectionConfig {
    fn default() -> Self {
        Self { pref: None, data: None, split: "train".into(), mode: ScoreMode::SegmentAvg, bins: 20, seed: 0 }
    }
}

#[derive(Debug, Args)]
pub struct FitDirectionArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Preference checkpoint.
    #[arg(long)]
    pub pref: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub split: Option<String>,
    /// single or segment-avg.
    #[arg(long, value_parser = parse_kebab::<ScoreMode>)]
    pub mode: Option<ScoreMode>,
    #[arg(long)]
    pub bins: Option<usize>,
    /// Only names the run directory; estimation is deterministic.
    #[arg(long)]
    pub seed: Option<u64>,
}

fn corpus_from(records: &[DatasetRecord], source: &str) -> Result<PromptCorpus> {
    PromptCorpus::new(records.iter().map(|r| r.prompt()).collect(), source.to_string())
}

fn fit_direction(runs: &Path, a: &FitDirectionArgs) -> Result<PathBuf> {
    let mut cfg: FitDirectionConfig = load_config(a.config.as_deref())?;
    overlay!(cfg, a; split, mode, bins, seed);
    overlay_opt!(cfg, a; pref, data);
    let pref = load_pref(need(&cfg.pref, "pref")?)?;
    let data = need(&cfg.data, "data")?.to_path_buf();
    let corpus = corpus_from(&datakit::read_manifest(&data, &cfg.split)?, &cfg.split)?;
    let mut run = RunDir::create(runs, "fit-direction", cfg.seed, &cfg)?;
    let dir = estimate_common_direction(&corpus, &pref, cfg.mode)?;
    let eta = eta_statistics(&corpus, &pref, &dir, cfg.bins)?;
    run.log(&json!({ "prompts": corpus.len(), "eta_mean": eta.mean, "eta_min": eta.min, "eta_max": eta.max, "histogram": eta.histogram }))?;
    println!("{} prompts, eta mean {:.4} (min {:.4}, max {:.4})", corpus.len(), eta.mean, eta.min, eta.max);
    dir.to_checkpoint()?.save(&run.file("direction.ckpt"))?;
    run.finish()
}

// ---------------------------------------------------------------- train-sft

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSftConfig {
    pub data: Option<PathBuf>,
    pub seed: u64,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub cond_dropout: f64,
    pub patch: usize,
    pub t_max: usize,
    pub alpha_end: f64,
}

impl Default for TrainSftConfig {
    fn default() -> Self {
        let d = SftConfig::default();
        let s = ScheduleConfig::default();
        Self {
            data: None,
            seed: d.seed,
            steps: d.steps,
            batch_size: d.batch_size,
            lr: d.adam.lr,
            cond_dropout: d.cond_dropout,
            patch: diffusion::DEFAULT_PATCH,
            t_max: s.t_max,
            alpha_end: s.alpha_end,
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainSftArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub cond_dropout: Option<f64>,
    #[arg(long)]
    pub patch: Option<usize>,
    #[arg(long)]
    pub t_max: Option<usize>,
    #[arg(long)]
    pub alpha_end: Option<f64>,
}

fn train_sft_cmd(runs: &Path, a: &TrainSftArgs) -> Result<PathBuf> {
    let mut cfg: TrainSftConfig = load_config(a.config.as_deref())?;
    overlay!(cfg, a; seed, steps, batch_size, lr, cond_dropout, patch, t_max, alpha_end);
    overlay_opt!(cfg, a; data);
    let data = need(&cfg.data, "data")?.to_path_buf();
    let vocab = Vocabulary::load(&data.join(VOCAB_FILE))?;
    let train = datakit::read_manifest(&data, "train")?;
    let mut run = RunDir::create(runs, "train-sft", cfg.seed, &cfg)?;
    let text = TextEncoderConfig::toy(vocab.size());
    let schedule = ScheduleConfig { t_max: cfg.t_max, alpha_end: cfg.alpha_end };
    let mut model = DiffusionModel::new(vocab, text, datakit::IMAGE_SHAPE, cfg.patch, schedule, cfg.seed)?;
    let sc = SftConfig {
        seed: cfg.seed,
        steps: cfg.steps,
        batch_size: cfg.batch_size,
        adam: AdamConfig { lr: cfg.lr, ..SftConfig::default().adam },
        cond_dropout: cfg.cond_dropout,
        train_cond_encoder: true,
    };
    let report = train_sft(&mut model, &train, &sc, |step, loss| {
        if step % 100 == 0 {
            println!("step {step:5}  eps-loss {loss:.3}");
        }
    })?;
    for (step, loss) in report.losses.iter().enumerate() {
        run.log(&json!({ "step": step, "loss": loss }))?;
    }
    model.to_checkpoint()?.save(&run.file("sft.ckpt"))?;
    run.finish()
}

// ---------------------------------------------------------------- train-rft

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainRftConfig {
    /// Diffusion checkpoint to start from.
    pub sft: Option<PathBuf>,
    pub pref: Option<PathBuf>,
    pub direction: Option<PathBuf>,
    pub data: Option<PathBuf>,
    pub seed: u64,
    pub omega: f64,
    pub updates: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub subset: usize,
    pub sample_steps: usize,
    /// Training prompts taken from the front of the train split.
    pub prompts: usize,
}

impl Default for TrainRftConfig {
    fn default() -> Self {
        let d = RewardConfig::default();
        Self {
            sft: None,
            pref: None,
            direction: None,
            data: None,
            seed: d.seed,
            omega: d.omega,
            updates: d.total_updates,
            batch_size: d.batch_size,
            lr: d.adam.lr,
            subset: d.steps_subset_size,
            sample_steps: d.sample_steps,
            prompts: 512,
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainRftArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub sft: Option<PathBuf>,
    #[arg(long)]
    pub pref: Option<PathBuf>,
    #[arg(long)]
    pub direction: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub omega: Option<f64>,
    #[arg(long)]
    pub updates: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Trajectory steps that keep their gradient.
    #[arg(long)]
    pub subset: Option<usize>,
    #[arg(long)]
    pub sample_steps: Option<usize>,
    #[arg(long)]
    pub prompts: Option<usize>,
}

fn train_rft_cmd(runs: &Path, a: &TrainRftArgs) -> Result<PathBuf> {
    let mut cfg: TrainRftConfig = load_config(a.config.as_deref())?;
    overlay!(cfg, a; seed, omega, updates, batch_size, lr, subset, sample_steps, prompts);
    overlay_opt!(cfg, a; sft, pref, direction, data);
    let mut model = load_diffusion(need(&cfg.sft, "sft")?)?;
    let pref = load_pref(need(&cfg.pref, "pref")?)?;
    let dir = load_direction(need(&cfg.direction, "direction")?)?;
    let data = need(&cfg.data, "data")?.to_path_buf();
    let rc = RewardConfig {
        omega: cfg.omega,
        steps_subset_size: cfg.subset,
        sample_steps: cfg.sample_steps,
        seed: cfg.seed,
        adam: AdamConfig { lr: cfg.lr, ..RewardConfig::default().adam },
        total_updates: cfg.updates,
        batch_size: cfg.batch_size,
    };
    rc.validate()?;
    let prompts = split_prompts(&data, "train", cfg.prompts)?;
    let mut run = RunDir::create(runs, "train-rft", cfg.seed, &cfg)?;
    let metrics = train_rft(&mut model, &prompts, &pref, &dir, &rc, |m| {
        if m.step % 25 == 0 {
            println!("update {:4}  loss {:.4}  relevant {:.4}  irrelevant {:.4}", m.step, m.reward_loss, m.mean_relevant, m.mean_irrelevant);
        }
    })?;
    for m in &metrics {
        run.log(m)?;
    }
    model.to_checkpoint()?.save(&run.file("rft.ckpt"))?;
    run.finish()
}

// ---------------------------------------------------------------- sample

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleConfig {
    pub model: Option<PathBuf>,
    /// Explicit prompts; when empty, captions come from `data`/`split`.
    pub prompts: Vec<String>,
    pub data: Option<PathBuf>,
    pub split: String,
    pub n: usize,
    pub steps: usize,
    pub guidance: f64,
    pub seed: u64,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self { model: None, prompts: Vec::new(), data: None, split: "test".into(), n: 8, steps: 10, guidance: 1.0, seed: 0 }
    }
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Diffusion checkpoint.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Repeatable.
    #[arg(long = "prompt")]
    pub prompts: Vec<String>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub split: Option<String>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub guidance: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
}

fn split_prompts(data: &Path, split: &str, n: usize) -> Result<Vec<RawPrompt>> {
    Ok(datakit::read_manifest(data, split)?.iter().take(n).map(|r| r.prompt()).collect())
}

fn sample_cmd(runs: &Path, a: &SampleArgs) -> Result<PathBuf> {
    let mut cfg: SampleConfig = load_config(a.config.as_deref())?;
    overlay!(cfg, a; split, n, steps, guidance, seed);
    overlay_opt!(cfg, a; model, data);
    if !a.prompts.is_empty() {
        cfg.prompts = a.prompts.clone();
    }
    let model = load_diffusion(need(&cfg.model, "model")?)?;
    let prompts = if cfg.prompts.is_empty() {
        split_prompts(need(&cfg.data, "data")?, &cfg.split, cfg.n)?
    } else {
        cfg.prompts.iter().map(RawPrompt::new).collect::<Result<_>>()?
    };
    if prompts.is_empty() {
        return Err(Error::Config("no prompts to sample".into()));
    }
    let mut run = RunDir::create(runs, "sample", cfg.seed, &cfg)?;
    let sched = model.sched();
    let ts = sched.timesteps(cfg.steps)?;
    let conds = prompts.iter().map(|p| model.conditioning(p).map(|c| c.embeddings)).collect::<Result<Vec<_>>>()?;
    let null = model.null_conditioning().embeddings;
    let seeds: Vec<u64> = (0..prompts.len() as u64).map(|i| cfg.seed + i).collect();
    let mut xs: Vec<_> = seeds.iter().map(|&s| initial_noise(s, model.numel())).collect();
    for (i, w) in ts.windows(2).enumerate() {
        let t0 = Instant::now();
        for (x, c) in xs.iter_mut().zip(&conds) {
            let eps = guided_eps(&model.denoiser, x, w[0], &[c], &null, cfg.guidance);
            *x = ddim_update(x, w[0], w[1], &eps, &sched)?.0;
        }
        println!("step {:3}/{}  t {:3} -> {:3}  {:8.2} ms", i + 1, ts.len() - 1, w[0], w[1], t0.elapsed().as_secs_f64() * 1e3);
    }
    for (i, ((x, p), s)) in xs.iter().zip(&prompts).zip(&seeds).enumerate() {
        let name = format!("sample_{i:03}.png");
        let px = datakit::tensor_to_pixels(&diffusion::to_pixels(x));
        fs::write(run.file(&name), datakit::encode_png(&px, datakit::IMAGE_SHAPE)?)?;
        run.log(&json!({ "index": i, "seed": s, "prompt": p.text, "image": name }))?;
    }
    run.finish()
}

// ---------------------------------------------------------------- eval-retrieval

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalRetrievalConfig {
    pub pref: Option<PathBuf>,
    pub direction: Option<PathBuf>,
    pub data: Option<PathBuf>,
    pub split: String,
    /// Caps the corpus size; 0 uses the whole split.
    pub n: usize,
    /// Sentence caps for a length sweep; empty skips it.
    pub caps: Vec<usize>,
    pub seed: u64,
}

impl Default for EvalRetrievalConfig {
    fn default() -> Self {
        Self { pref: None, direction: None, data: None, split: "test".into(), n: 0, caps: Vec::new(), seed: 0 }
    }
}

#[derive(Debug, Args)]
pub struct EvalRetrievalArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub pref: Option<PathBuf>,
    #[arg(long)]
    pub direction: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub split: Option<String>,
    #[arg(long)]
    pub n: Option<usize>,
    /// Comma-separated sentence caps.
    #[arg(long, value_delimiter = ',')]
    pub caps: Option<Vec<usize>>,
    #[arg(long)]
    pub seed: Option<u64>,
}

fn eval_split(data: &Path, split: &str, n: usize) -> Result<(Vec<crate::Tensor>, Vec<RawPrompt>)> {
    let mut records = datakit::read_manifest(data, split)?;
    if n > 0 {
        records.truncate(n);
    }
    Ok((records.iter().map(|r| r.image.clone()).collect(), records.iter().map(|r| r.prompt()).collect()))
}

fn eval_retrieval(runs: &Path, a: &EvalRetrievalArgs) -> Result<PathBuf> {
    let mut cfg: EvalRetrievalConfig = load_config(a.config.as_deref())?;
    overlay!(cfg, a; split, n, caps, seed);
    overlay_opt!(cfg, a; pref, direction, data);
    let pref = load_pref(need(&cfg.pref, "pref")?)?;
    let dir = load_direction(need(&cfg.direction, "direction")?)?;
    let (images, prompts) = eval_split(need(&cfg.data, "data")?, &cfg.split, cfg.n)?;
    let mut run = RunDir::create(runs, "eval-retrieval", cfg.seed, &cfg)?;
    println!("{:12} {:9} {:>7}", "mode", "embedding", "R@1");
    for mode in [ScoreMode::Single, ScoreMode::SegmentAvg] {
        for emb in [EmbeddingKind::Full, EmbeddingKind::Relevant] {
            let r = retrieval_r_at_1(&images, &prompts, &pref, Some(&dir), mode, emb)?;
            println!("{:12} {:9} {:7.4}", kebab(&mode), kebab(&emb), r.r_at_1);
            run.log(&r)?;
        }
    }
    if !cfg.caps.is_empty() {
        for emb in [EmbeddingKind::Full, EmbeddingKind::Relevant] {
            for (cap, r) in length_sweep(&images, &prompts, &pref, Some(&dir), &cfg.caps, ScoreMode::SegmentAvg, emb)? {
                println!("cap {cap:2}       {:9} {:7.4}", kebab(&emb), r.r_at_1);
                run.log(&json!({ "cap": cap, "report": r }))?;
            }
        }
    }
    run.finish()
}

fn kebab(v: &impl Serialize) -> String {
    serde_json::to_value(v).ok().and_then(|v| v.as_str().map(str::to_string)).unwrap_or_default()
}

// ---------------------------------------------------------------- eval-scores

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalScoresConfig {
    pub pref: Option<PathBuf>,
    pub direction: Option<PathBuf>,
    pub data: Option<PathBuf>,
    pub split: String,
    pub n: usize,
    /// Diffusion checkpoint whose samples are also scored.
    pub model: Option<PathBuf>,
    pub steps: usize,
    pub guidance: f64,
    pub seed: u64,
}

impl Default for EvalScoresConfig {
    fn default() -> Self {
        Self { pref: None, direction: None, data: None, split: "test".into(), n: 64, model: None, steps: 10, guidance: 1.0, seed: 0 }
    }
}

#[derive(Debug, Args)]
pub struct EvalScoresArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub pref: Option<PathBuf>,
    #[arg(long)]
    pub direction: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub split: Option<String>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub guidance: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
}

fn eval_scores(runs: &Path, a: &EvalScoresArgs) -> Result<PathBuf> {
    let mut cfg: EvalScoresConfig = load_config(a.config.as_deref())?;
    overlay!(cfg, a; split, n, steps, guidance, seed);
    overlay_opt!(cfg, a; pref, direction, data, model);
    let pref = load_pref(need(&cfg.pref, "pref")?)?;
    let dir = load_direction(need(&cfg.direction, "direction")?)?;
    let (images, prompts) = eval_split(need(&cfg.data, "data")?, &cfg.split, cfg.n)?;
    let model = cfg.model.as_deref().map(load_diffusion).transpose()?;
    let mut run = RunDir::create(runs, "eval-scores", cfg.seed, &cfg)?;
    let table = score_table(&images, &prompts, &pref, &dir)?;
    table.export(&run.path)?;
    run.log(&json!({ "table": table.summary }))?;
    let s = &table.summary;
    println!("{:10} {:>10} {:>10}", "score", "diagonal", "off-diag");
    for (name, d) in [("full", &s.full), ("relevant", &s.relevant), ("irrelevant", &s.irrelevant)] {
        println!("{name:10} {:10.4} {:10.4}", d.diagonal_mean, d.off_diagonal_mean.unwrap_or(f64::NAN));
    }
    if let Some(m) = model {
        let seeds: Vec<u64> = (0..prompts.len() as u64).map(|i| cfg.seed + i).collect();
        let x = m.sample(&prompts, cfg.steps, cfg.guidance, &seeds)?;
        let g = generation_scores(&x, &prompts, &pref, &dir)?;
        println!("samples: full {:.4}  relevant {:.4}  irrelevant {:.4}", g.full, g.relevant, g.irrelevant);
        run.log(&json!({ "generation": g }))?;
    }
    run.finish()
}

// ---------------------------------------------------------------- align-report

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AlignReportConfig {
    pub pref: Option<PathBuf>,
    /// Prompt text; defaults to the caption of record `index` in `data`.
    pub prompt: Option<String>,
    /// Candidate PNGs; defaults to the first `candidates` images of `data`.
    pub images: Vec<PathBuf>,
    pub data: Option<PathBuf>,
    pub split: String,
    pub index: usize,
    pub candidates: usize,
    pub seed: u64,
}

impl Default for AlignReportConfig {
    fn default() -> Self {
        Self { pref: None, prompt: None, images: Vec::new(), data: None, split: "test".into(), index: 0, candidates: 4, seed: 0 }
    }
}

#[derive(Debug, Args)]
pub struct AlignReportArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub pref: Option<PathBuf>,
    #[arg(long)]
    pub prompt: Option<String>,
    /// Repeatable.
    #[arg(long = "image")]
    pub images: Vec<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub split: Option<String>,
    #[arg(long)]
    pub index: Option<usize>,
    #[arg(long)]
    pub candidates: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

fn align_report(runs: &Path, a: &AlignReportArgs) -> Result<PathBuf> {
    let mut cfg: AlignReportConfig = load_config(a.config.as_deref())?;
    overlay!(cfg, a; split, index, candidates, seed);
    overlay_opt!(cfg, a; pref, prompt, data);
    if !a.images.is_empty() {
        cfg.images = a.images.clone();
    }
    let pref = load_pref(need(&cfg.pref, "pref")?)?;
    let records = match (&cfg.data, cfg.prompt.is_none() || cfg.images.is_empty()) {
        (Some(d), true) => datakit::read_manifest(d, &cfg.split)?,
        (None, true) => return Err(Error::Config("--data is required unless both --prompt and --image are given".into())),
        _ => Vec::new(),
    };
    let prompt = match &cfg.prompt {
        Some(p) => RawPrompt::new(p.clone())?,
        None => records.get(cfg.index).ok_or_else(|| Error::Config(format!("index {} outside the {} split", cfg.index, cfg.split)))?.prompt(),
    };
    let images = if cfg.images.is_empty() {
        records.iter().take(cfg.candidates).map(|r| r.image.clone()).collect()
    } else {
        cfg.images.iter().map(|p| datakit::load_png_tensor(p)).collect::<Result<Vec<_>>>()?
    };
    let mut run = RunDir::create(runs, "align-report", cfg.seed, &cfg)?;
    let report = segment_alignment_report(&prompt, &images, &pref)?;
    for (i, seg) in report.segments.iter().enumerate() {
        let row: Vec<String> = report.scores[i].iter().map(|s| format!("{s:7.4}")).collect();
        println!("{}  best {}  {seg}", row.join(" "), report.best[i]);
    }
    run.log(&report)?;
    run.finish()
}

// ---------------------------------------------------------------- loading

pub fn load_pref(path: &Path) -> Result<PreferenceModel> {
    PreferenceModel::from_checkpoint(&Checkpoint::load(path)?)
}

pub fn load_direction(path: &Path) -> Result<CommonDirection> {
    CommonDirection::from_checkpoint(&Checkpoint::load(path)?)
}

pub fn load_diffusion(path: &Path) -> Result<DiffusionModel> {
    DiffusionModel::from_checkpoint(&Checkpoint::load(path)?)
}

/// Runs one parsed command; returns its run directory.
pub fn execute(cli: &Cli) -> Result<PathBuf> {
    let r = &cli.runs;
    match &cli.command {
        Command::GenData(a) => gen_data(r, a),
        Command::TrainPref(a) => train_pref(r, a),
        Command::FitDirection(a) => fit_direction(r, a),
        Command::TrainSft(a) => train_sft_cmd(r, a),
        Command::TrainRft(a) => train_rft_cmd(r, a),
        Command::Sample(a) => sample_cmd(r, a),
        Command::EvalRetrieval(a) => eval_retrieval(r, a),
        Command::EvalScores(a) => eval_scores(r, a),
        Command::AlignReport(a) => align_report(r, a),
    }
}

/// Parses `argv` and runs it. Exit status: 0 on success, 1 on a failed
/// command, 2 on a usage error.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(&cli) {
        Ok(_) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}
