//! `fluency`: synthetic corpus generation, K-means pseudo-labelling,
//! scorer training, prediction, evaluation and co-occurrence analysis.

use std::collections::HashMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fluency::codebook::{load_cluster_sequences, KMeansParams, DEFAULT_K, DEFAULT_MAX_ITERS, DEFAULT_TOL};
use fluency::corpus::{PhoneInventory, Split};
use fluency::eval::{conditional_phone_given_index, heatmap_csv};
use fluency::gradsuite;
use fluency::nnet::gradcheck::DEFAULT_STEP;
use fluency::pipeline::{self, Corpus, KMeansOptions, ModelOptions, SideInputs, TrainOutputs, Variant};
use fluency::scorer::{Scorer, ScorerConfig};
use fluency::synth::{self, SynthConfig};
use fluency::training::{Monitor, TrainConfig};

const FORMATS: &str = "\
File formats:
  manifest.jsonl    {\"id\": str, \"path\": str, \"score\": 0..4, \"split\": train|dev|test} per line
  *.fmx             \"FMX1\", u32 LE frames T, u32 LE dim D, T*D f32 LE row-major
  alignments.jsonl  {\"id\": str, \"segments\": [[phone, start_frame, end_frame), ...]} per line
  phones.txt        one phone label per line, must include \"sil\"
  *.kmc             \"KMC1\", u32 LE k, u32 LE dim, u64 LE seed, k*dim f32 LE centroids
  clusters.jsonl    {\"id\": str, \"indexes\": [int, ...]} per line
  *.ckpt            \"CKP1\", u32 LE header length, JSON header, u32 LE tensor count, tensors
                    (u32 name length, name, u32 rank, u32 dims, f64 LE values)
  predictions.jsonl {\"id\": str, \"score_norm\": float, \"score_denorm\": float} per line
  report.json       {\"split\": str, \"n\": int, \"pcc\": float, \"mse\": float}
  heatmap.csv       header \"phone,0,1,...,K-1\"; one row per phone of P(phone | index), 6 decimals";

#[derive(Parser)]
#[command(name = "fluency", version, about = "ASR-free fluency scoring pipeline", after_help = FORMATS)]
struct Cli {
    /// Worker threads; 1 guarantees bit-reproducible outputs.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus with planted pause structure.
    #[command(after_help = FORMATS)]
    Synth(SynthArgs),
    /// Fit a K-means codebook on training-split frames.
    #[command(name = "kmeans-train", after_help = FORMATS)]
    KmeansTrain(KmeansTrainArgs),
    /// Assign every frame of every utterance its nearest cluster index.
    #[command(name = "kmeans-assign", after_help = FORMATS)]
    KmeansAssign(KmeansAssignArgs),
    /// Train a scorer with dev-set early stopping.
    #[command(after_help = FORMATS)]
    Train(TrainArgs),
    /// Score utterances with a trained checkpoint.
    #[command(after_help = FORMATS)]
    Predict(PredictArgs),
    /// PCC and MSE of predictions against manifest scores.
    #[command(after_help = FORMATS)]
    Eval(EvalArgs),
    /// P(phone | cluster index) heatmap data from alignments and clusters.
    #[command(after_help = FORMATS)]
    Cooccur(CooccurArgs),
    /// Finite-difference gradient checks of every layer and both scorers.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct CorpusArgs {
    /// Utterance manifest (JSON lines).
    #[arg(long)]
    manifest: PathBuf,
    /// Base directory for relative feature paths [default: manifest directory].
    #[arg(long)]
    features_dir: Option<PathBuf>,
}

impl CorpusArgs {
    fn load(&self) -> Result<Corpus, CliError> {
        Ok(pipeline::load_corpus(&self.manifest, self.features_dir.as_deref())?)
    }
}

#[derive(Args)]
struct SynthArgs {
    /// Output corpus directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 500)]
    n_train: usize,
    #[arg(long, default_value_t = 100)]
    n_dev: usize,
    #[arg(long, default_value_t = 100)]
    n_test: usize,
    #[arg(long, default_value_t = 16)]
    feature_dim: usize,
    #[arg(long, default_value_t = 8)]
    speech_clusters: usize,
    /// Isotropic standard deviation around each center.
    #[arg(long, default_value_t = 0.1)]
    cluster_spread: f64,
    #[arg(long, default_value_t = 0.02)]
    frame_period: f64,
    #[arg(long, default_value_t = 50)]
    min_len: usize,
    #[arg(long, default_value_t = 400)]
    max_len: usize,
    #[arg(long, default_value_t = 0.0)]
    min_pause_ratio: f64,
    #[arg(long, default_value_t = 0.6)]
    max_pause_ratio: f64,
}

#[derive(Args)]
struct KmeansTrainArgs {
    #[command(flatten)]
    corpus: CorpusArgs,
    /// Output codebook (.kmc).
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = DEFAULT_K)]
    k: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = DEFAULT_MAX_ITERS)]
    max_iters: usize,
    /// Stop when no centroid moves farther than this.
    #[arg(long, default_value_t = DEFAULT_TOL)]
    tol: f64,
    /// Standardize each dimension with training-split statistics first
    /// (stored next to the codebook as <out>.std.json).
    #[arg(long)]
    standardize: bool,
    /// Uniformly subsample at most this many training frames.
    #[arg(long)]
    max_frames: Option<usize>,
}

#[derive(Args)]
struct KmeansAssignArgs {
    #[command(flatten)]
    corpus: CorpusArgs,
    #[arg(long)]
    codebook: PathBuf,
    /// Output cluster sequences (JSON lines).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SideArgs {
    /// Scorer variant.
    #[arg(long, default_value = "asr_free", value_parser = ["asr_free", "asr_based"])]
    variant: String,
    /// Codebook; gives the cluster count and, without --clusters, the assignment.
    #[arg(long)]
    codebook: Option<PathBuf>,
    /// Precomputed cluster sequences (asr_free).
    #[arg(long)]
    clusters: Option<PathBuf>,
    /// Phone alignments (asr_based).
    #[arg(long)]
    alignments: Option<PathBuf>,
    /// Phone inventory [default: phones.txt next to the manifest].
    #[arg(long)]
    phones: Option<PathBuf>,
}

impl SideArgs {
    fn variant(&self) -> Result<Variant, CliError> {
        Ok(self.variant.parse()?)
    }

    fn resolve(
        &self,
        corpus: &Corpus,
        manifest: &Path,
        variant: Variant,
        k: Option<usize>,
    ) -> Result<SideInputs, CliError> {
        let mut side = SideInputs::default();
        match variant {
            Variant::AsrFree => {
                let cluster_count = match (&self.codebook, k) {
                    (_, Some(k)) => Some(k),
                    (Some(path), None) => Some(pipeline::load_codebook_with(path)?.0.k()),
                    (None, None) => None,
                };
                let k = cluster_count.ok_or_else(|| CliError::usage("asr_free needs --codebook"))?;
                let seqs = match (&self.clusters, &self.codebook) {
                    (Some(path), _) => load_cluster_sequences(path, Some(k))?,
                    (None, Some(cb)) => {
                        let (cb, std) = pipeline::load_codebook_with(cb)?;
                        pipeline::kmeans_assign(corpus, &cb, std.as_ref())?
                    }
                    (None, None) => return Err(CliError::usage("asr_free needs --clusters or --codebook")),
                };
                side.clusters = Some(seqs.into_iter().collect());
                side.cluster_count = Some(k);
            }
            Variant::AsrBased => {
                let path = self.alignments.as_ref().ok_or_else(|| CliError::usage("asr_based needs --alignments"))?;
                let inventory = load_inventory(self.phones.as_deref(), manifest)?;
                side.alignments = Some(pipeline::load_checked_alignments(corpus, path, &inventory)?);
                side.inventory = Some(inventory);
            }
        }
        Ok(side)
    }
}

fn load_inventory(phones: Option<&Path>, manifest: &Path) -> Result<PhoneInventory, CliError> {
    let path = match phones {
        Some(p) => p.to_path_buf(),
        None => manifest.parent().unwrap_or(Path::new(".")).join("phones.txt"),
    };
    Ok(PhoneInventory::load(path)?)
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    corpus: CorpusArgs,
    #[command(flatten)]
    side: SideArgs,
    /// Output checkpoint of the best-dev scorer; the report, timing and
    /// resumable state are written beside it.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Continue from <checkpoint>.state if present.
    #[arg(long)]
    resume: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0.002)]
    lr: f64,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    #[arg(long, default_value_t = 50)]
    max_epochs: usize,
    #[arg(long, default_value_t = 7)]
    patience: usize,
    #[arg(long, default_value = "dev_mse", value_parser = ["dev_mse", "dev_pcc"])]
    monitor: String,
    #[arg(long, default_value_t = 1e-6)]
    min_delta: f64,
    /// Clip the global gradient norm to this value.
    #[arg(long)]
    grad_clip: Option<f64>,
    #[arg(long, default_value_t = ModelOptions::default().hidden_dim)]
    hidden_dim: usize,
    #[arg(long, default_value_t = ModelOptions::default().blstm_layers)]
    blstm_layers: usize,
    #[arg(long, default_value_t = ModelOptions::default().cluster_embed_dim)]
    cluster_embed_dim: usize,
}

#[derive(Args)]
struct PredictArgs {
    #[command(flatten)]
    corpus: CorpusArgs,
    #[command(flatten)]
    side: SideArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Restrict to one split [default: all utterances].
    #[arg(long)]
    split: Option<String>,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    /// Output predictions [default: stdout].
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    predictions: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    /// Output report [default: stdout].
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CooccurArgs {
    #[command(flatten)]
    corpus: CorpusArgs,
    #[arg(long)]
    alignments: PathBuf,
    #[arg(long)]
    clusters: PathBuf,
    /// Codebook supplying K; alternatively give --k.
    #[arg(long)]
    codebook: Option<PathBuf>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    phones: Option<PathBuf>,
    /// Restrict to one split [default: train].
    #[arg(long, default_value = "train")]
    split: String,
    /// Output heatmap CSV.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 20)]
    seeds: usize,
    #[arg(long, default_value_t = DEFAULT_STEP)]
    step: f64,
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Core(fluency::Error),
    CheckFailed(String),
}

impl CliError {
    fn usage(msg: impl Into<String>) -> Self {
        CliError::Usage(msg.into())
    }

    fn kind(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "usage",
            CliError::Core(e) => e.kind(),
            CliError::CheckFailed(_) => "check_failed",
        }
    }

    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Core(e) => match e {
                fluency::Error::Validation { .. } | fluency::Error::Shape(_) | fluency::Error::Domain(_) => 3,
                fluency::Error::Io { .. } => 4,
                fluency::Error::Format { .. } => 5,
                fluency::Error::Numerical(_) => 6,
            },
            CliError::CheckFailed(_) => 1,
        }
    }

    fn message(&self) -> String {
        match self {
            CliError::Usage(m) | CliError::CheckFailed(m) => m.clone(),
            CliError::Core(e) => e.to_string(),
        }
    }
}

impl From<fluency::Error> for CliError {
    fn from(e: fluency::Error) -> Self {
        CliError::Core(e)
    }
}

fn parse_split(s: &str) -> Result<Split, CliError> {
    s.parse().map_err(|_| CliError::usage(format!("unknown split {s:?}")))
}

fn emit(out: Option<&Path>, text: &str) -> Result<(), CliError> {
    match out {
        Some(p) => Ok(pipeline::write_text(p, text)?),
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout
                .write_all(text.as_bytes())
                .map_err(|e| CliError::Core(fluency::Error::Io { path: "<stdout>".into(), source: e }))
        }
    }
}

fn synth_cmd(a: SynthArgs) -> Result<(), CliError> {
    let config = SynthConfig {
        n_train: a.n_train,
        n_dev: a.n_dev,
        n_test: a.n_test,
        feature_dim: a.feature_dim,
        n_speech_clusters: a.speech_clusters,
        cluster_spread: a.cluster_spread,
        frame_period: a.frame_period,
        min_len: a.min_len,
        max_len: a.max_len,
        min_pause_ratio: a.min_pause_ratio,
        max_pause_ratio: a.max_pause_ratio,
        seed: a.seed,
    };
    synth::generate(&config, &a.out)?;
    Ok(())
}

fn kmeans_train_cmd(a: KmeansTrainArgs) -> Result<(), CliError> {
    let corpus = a.corpus.load()?;
    let opts = KMeansOptions {
        params: KMeansParams { k: a.k, seed: a.seed, max_iters: a.max_iters, tol: a.tol },
        standardize: a.standardize,
        max_frames: a.max_frames,
    };
    let (fit, std) = pipeline::kmeans_train(&corpus, &opts)?;
    pipeline::save_codebook_with(&fit.codebook, std.as_ref(), &a.out)?;
    Ok(())
}

fn kmeans_assign_cmd(a: KmeansAssignArgs) -> Result<(), CliError> {
    let corpus = a.corpus.load()?;
    let (cb, std) = pipeline::load_codebook_with(&a.codebook)?;
    let seqs = pipeline::kmeans_assign(&corpus, &cb, std.as_ref())?;
    pipeline::write_text(&a.out, pipeline::cluster_sequences_text(&seqs))?;
    Ok(())
}

fn train_cmd(a: TrainArgs) -> Result<(), CliError> {
    let corpus = a.corpus.load()?;
    let variant = a.side.variant()?;
    let side = a.side.resolve(&corpus, &a.corpus.manifest, variant, None)?;
    let model =
        ModelOptions { hidden_dim: a.hidden_dim, blstm_layers: a.blstm_layers, cluster_embed_dim: a.cluster_embed_dim };
    let config = pipeline::scorer_config(variant, &corpus, &side, &model)?;
    let train_config = TrainConfig {
        lr: a.lr,
        batch_size: a.batch_size,
        max_epochs: a.max_epochs,
        patience: a.patience,
        seed: a.seed,
        monitor: a.monitor.parse::<Monitor>()?,
        min_delta: a.min_delta,
        grad_clip: a.grad_clip,
    };
    let train = pipeline::examples(&corpus, &config, &side, Some(Split::Train))?;
    let dev = pipeline::examples(&corpus, &config, &side, Some(Split::Dev))?;
    let outputs = TrainOutputs::beside(&a.checkpoint);
    pipeline::train_scorer(config, train_config, &train, &dev, &outputs, a.resume)?;
    Ok(())
}

fn predict_cmd(a: PredictArgs) -> Result<(), CliError> {
    let corpus = a.corpus.load()?;
    let scorer = Scorer::load(&a.checkpoint)?;
    let variant = a.side.variant()?;
    if variant.as_str() != scorer.config.variant() {
        return Err(CliError::usage(format!("checkpoint holds a {} scorer", scorer.config.variant())));
    }
    let k = match &scorer.config {
        ScorerConfig::AsrFree(c) => Some(c.cluster_count),
        ScorerConfig::AsrBased(_) => None,
    };
    let side = a.side.resolve(&corpus, &a.corpus.manifest, variant, k)?;
    let split = a.split.as_deref().map(parse_split).transpose()?;
    let examples = pipeline::examples(&corpus, &scorer.config, &side, split)?;
    let preds = pipeline::predict(&scorer, &examples, a.batch_size)?;
    emit(a.out.as_deref(), &pipeline::predictions_text(&preds))
}

fn eval_cmd(a: EvalArgs) -> Result<(), CliError> {
    let text = std::fs::read_to_string(&a.predictions)
        .map_err(|e| CliError::Core(fluency::Error::Io { path: a.predictions.clone(), source: e }))?;
    let preds = pipeline::parse_predictions(&text)?;
    let records = fluency::corpus::load_manifest(&a.manifest)?;
    let report = pipeline::evaluate_predictions(&preds, &records, parse_split(&a.split)?)?;
    emit(a.out.as_deref(), &pipeline::eval_report_json(&report))
}

fn cooccur_cmd(a: CooccurArgs) -> Result<(), CliError> {
    let corpus = a.corpus.load()?;
    let k = match (a.k, &a.codebook) {
        (Some(k), _) => k,
        (None, Some(cb)) => pipeline::load_codebook_with(cb)?.0.k(),
        (None, None) => return Err(CliError::usage("cooccur needs --k or --codebook")),
    };
    let inventory = load_inventory(a.phones.as_deref(), &a.corpus.manifest)?;
    let alignments = pipeline::load_checked_alignments(&corpus, &a.alignments, &inventory)?;
    let split = parse_split(&a.split)?;
    let keep: HashMap<&str, Split> = corpus.records.iter().map(|r| (r.id.as_str(), r.split)).collect();
    let clusters: Vec<_> = load_cluster_sequences(&a.clusters, Some(k))?
        .into_iter()
        .filter(|(id, _)| keep.get(id.as_str()) == Some(&split))
        .collect();
    let m = pipeline::cooccurrence(&alignments, &clusters, &inventory, k)?;
    let c = conditional_phone_given_index(&m);
    if !c.empty_columns.is_empty() {
        log::warn!("cluster indexes with no aligned frames: {:?}", c.empty_columns);
    }
    pipeline::write_text(&a.out, heatmap_csv(&c)?)?;
    Ok(())
}

fn gradcheck_cmd(a: GradcheckArgs) -> Result<(), CliError> {
    let results = gradsuite::run_suite(a.seeds, a.step)?;
    emit(None, &gradsuite::format_table(&results))?;
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed).map(|r| r.case.as_str()).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::CheckFailed(format!("gradient check failed for {}", failed.join(", "))))
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    if cli.threads == 0 {
        return Err(CliError::usage("--threads must be at least 1"));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads)
        .build_global()
        .map_err(|e| CliError::usage(format!("thread pool: {e}")))?;
    match cli.command {
        Command::Synth(a) => synth_cmd(a),
        Command::KmeansTrain(a) => kmeans_train_cmd(a),
        Command::KmeansAssign(a) => kmeans_assign_cmd(a),
        Command::Train(a) => train_cmd(a),
        Command::Predict(a) => predict_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Cooccur(a) => cooccur_cmd(a),
        Command::Gradcheck(a) => gradcheck_cmd(a),
    }
}

fn report(err: &CliError) -> ExitCode {
    let line = serde_json::json!({ "error": err.kind(), "message": err.message() });
    eprintln!("{line}");
    ExitCode::from(err.exit_code())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("FLUENCY_LOG", "error")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) => {
            let first =
                e.to_string().lines().next().unwrap_or("invalid arguments").trim_start_matches("error: ").to_string();
            return report(&CliError::Usage(first));
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => report(&e),
    }
}
