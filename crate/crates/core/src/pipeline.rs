//! File-level stages of the scoring workflow: corpus loading, codebook
//! fitting and assignment, training, prediction, evaluation and the
//! co-occurrence analysis. The CLI is a thin layer over these functions.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::codebook::{
    cluster_line, fit_kmeans, subsample_frames, ClusterSequence, Codebook, KMeansFit, KMeansParams, Standardizer,
};
use crate::corpus::{
    load_manifest, pool_phone_features, read_feature_matrix, CorpusMeta, FeatureMatrix, PhoneAlignment, PhoneFeatures,
    PhoneInventory, Split, UtteranceRecord, DEFAULT_FRAME_PERIOD,
};
use crate::error::{Error, Result};
use crate::eval::{build_cooccurrence, evaluate, CooccurrenceMatrix, EvalReport};
use crate::scorer::{
    duration_stats, AsrBasedScorerConfig, AsrFreeScorerConfig, Prediction, Scorer, ScorerConfig, ScorerInput,
};
use crate::training::{Example, TrainConfig, TrainReport, Trainer};

/// A manifest with its decoded feature matrices, in manifest order.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub records: Vec<UtteranceRecord>,
    pub features: Vec<FeatureMatrix>,
    pub frame_period: f64,
}

impl Corpus {
    pub fn feature_dim(&self) -> usize {
        self.features[0].dim()
    }

    pub fn split_indices(&self, split: Split) -> Vec<usize> {
        (0..self.records.len()).filter(|&i| self.records[i].split == split).collect()
    }

    pub fn get(&self, id: &str) -> Option<(&UtteranceRecord, &FeatureMatrix)> {
        self.records.iter().position(|r| r.id == id).map(|i| (&self.records[i], &self.features[i]))
    }
}

/// Loads a manifest and every feature file it lists. Relative paths resolve
/// against `features_dir`, or the manifest's directory when absent. A
/// `meta.json` next to the manifest supplies the frame period.
pub fn load_corpus(manifest: impl AsRef<Path>, features_dir: Option<&Path>) -> Result<Corpus> {
    let manifest = manifest.as_ref();
    let records = load_manifest(manifest)?;
    if records.is_empty() {
        return Err(Error::validation(None, format!("{}: manifest lists no utterances", manifest.display())));
    }
    let root = manifest.parent().unwrap_or(Path::new("."));
    let base = features_dir.unwrap_or(root);
    let features =
        records.par_iter().map(|r| read_feature_matrix(r.resolve_features(base))).collect::<Result<Vec<_>>>()?;
    let dim = features[0].dim();
    if let Some(i) = features.iter().position(|f| f.dim() != dim) {
        return Err(Error::shape(format!(
            "utterance {:?} has feature dim {}, expected {dim}",
            records[i].id,
            features[i].dim()
        )));
    }
    let meta_path = root.join("meta.json");
    let frame_period = if meta_path.exists() {
        let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        let meta: CorpusMeta = serde_json::from_str(&text)
            .map_err(|e| Error::validation(None, format!("{}: {e}", meta_path.display())))?;
        if meta.feature_dim != dim {
            return Err(Error::shape(format!("meta.json declares dim {}, features have {dim}", meta.feature_dim)));
        }
        meta.frame_period
    } else {
        DEFAULT_FRAME_PERIOD
    };
    Ok(Corpus { records, features, frame_period })
}

/// Alignments keyed by id, each validated against its feature length and
/// the inventory.
pub fn load_checked_alignments(
    corpus: &Corpus,
    path: impl AsRef<Path>,
    inventory: &PhoneInventory,
) -> Result<HashMap<String, PhoneAlignment>> {
    let path = path.as_ref();
    let mut out = HashMap::new();
    for (id, a) in crate::corpus::load_alignments(path)? {
        let (_, m) = corpus
            .get(&id)
            .ok_or_else(|| Error::validation(None, format!("alignment for unknown utterance {id:?}")))?;
        a.validate(m.num_frames(), Some(inventory))
            .map_err(|e| Error::validation(None, format!("{}: utterance {id:?}: {e}", path.display())))?;
        out.insert(id, a);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct KMeansOptions {
    pub params: KMeansParams,
    /// Fit a per-dimension standardizer on the training frames first.
    pub standardize: bool,
    /// Cap on the number of training frames clustered.
    pub max_frames: Option<usize>,
}

/// Fits a codebook on the training-split frames.
pub fn kmeans_train(corpus: &Corpus, opts: &KMeansOptions) -> Result<(KMeansFit, Option<Standardizer>)> {
    let dim = corpus.feature_dim();
    let train = corpus.split_indices(Split::Train);
    if train.is_empty() {
        return Err(Error::validation(None, "no training utterances to cluster"));
    }
    let mut frames: Vec<f64> =
        train.iter().flat_map(|&i| corpus.features[i].values().iter().map(|&v| f64::from(v))).collect();
    if let Some(cap) = opts.max_frames {
        frames = subsample_frames(&frames, dim, cap, opts.params.seed);
    }
    let standardizer = opts.standardize.then(|| Standardizer::fit(&frames, dim));
    if let Some(s) = &standardizer {
        s.apply_in_place(&mut frames);
    }
    let fit = fit_kmeans(&frames, dim, &opts.params)?;
    log::info!(
        "kmeans k={} on {} frames: inertia {:.6} after {} iterations (converged: {})",
        opts.params.k,
        frames.len() / dim,
        fit.codebook.inertia(),
        fit.iterations,
        fit.converged
    );
    Ok((fit, standardizer))
}

/// Sidecar holding the standardizer fitted with a codebook.
pub fn standardizer_path(codebook: &Path) -> PathBuf {
    let mut s = codebook.as_os_str().to_owned();
    s.push(".std.json");
    PathBuf::from(s)
}

pub fn save_codebook_with(codebook: &Codebook, standardizer: Option<&Standardizer>, path: &Path) -> Result<()> {
    crate::codebook::save_codebook(codebook, path)?;
    let side = standardizer_path(path);
    match standardizer {
        Some(s) => write_text(&side, serde_json::to_string(s).expect("standardizer serializes") + "\n"),
        None if side.exists() => fs::remove_file(&side).map_err(|e| Error::io(&side, e)),
        None => Ok(()),
    }
}

pub fn load_codebook_with(path: &Path) -> Result<(Codebook, Option<Standardizer>)> {
    let cb = crate::codebook::load_codebook(path)?;
    let side = standardizer_path(path);
    if !side.exists() {
        return Ok((cb, None));
    }
    let text = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    let s: Standardizer =
        serde_json::from_str(&text).map_err(|e| Error::validation(None, format!("{}: {e}", side.display())))?;
    if s.mean.len() != cb.dim() || s.std.len() != cb.dim() {
        return Err(Error::shape(format!("{}: standardizer dim differs from codebook", side.display())));
    }
    Ok((cb, Some(s)))
}

/// Cluster index sequence for every utterance, in manifest order.
pub fn kmeans_assign(
    corpus: &Corpus,
    codebook: &Codebook,
    standardizer: Option<&Standardizer>,
) -> Result<Vec<(String, ClusterSequence)>> {
    if codebook.dim() != corpus.feature_dim() {
        return Err(Error::shape(format!(
            "codebook dim {} does not match feature dim {}",
            codebook.dim(),
            corpus.feature_dim()
        )));
    }
    corpus
        .records
        .iter()
        .zip(&corpus.features)
        .map(|(r, m)| {
            let seq = match standardizer {
                Some(s) => codebook.assign(&s.apply(m)?)?,
                None => codebook.assign(m)?,
            };
            Ok((r.id.clone(), seq))
        })
        .collect()
}

pub fn cluster_sequences_text(seqs: &[(String, ClusterSequence)]) -> String {
    seqs.iter().map(|(id, s)| cluster_line(id, s) + "\n").collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    AsrFree,
    AsrBased,
}

impl Variant {
    pub fn as_str(self) -> &'static str {
        match self {
            Variant::AsrFree => "asr_free",
            Variant::AsrBased => "asr_based",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "asr_free" => Ok(Variant::AsrFree),
            "asr_based" => Ok(Variant::AsrBased),
            other => Err(Error::validation(None, format!("unknown variant {other:?}"))),
        }
    }
}

/// Model sizes chosen on the command line; the rest of the scorer
/// configuration is derived from the data.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelOptions {
    pub hidden_dim: usize,
    pub blstm_layers: usize,
    pub cluster_embed_dim: usize,
}

impl Default for ModelOptions {
    fn default() -> Self {
        let c = AsrFreeScorerConfig::new(1);
        Self { hidden_dim: c.hidden_dim, blstm_layers: c.blstm_layers, cluster_embed_dim: c.cluster_embed_dim }
    }
}

/// Side inputs a variant needs beyond the features.
#[derive(Debug, Clone, Default)]
pub struct SideInputs {
    pub clusters: Option<HashMap<String, ClusterSequence>>,
    pub cluster_count: Option<usize>,
    pub alignments: Option<HashMap<String, PhoneAlignment>>,
    pub inventory: Option<PhoneInventory>,
}

pub fn pooled_features(
    corpus: &Corpus,
    alignments: &HashMap<String, PhoneAlignment>,
    indices: &[usize],
) -> Result<Vec<PhoneFeatures>> {
    indices
        .iter()
        .map(|&i| {
            let r = &corpus.records[i];
            let a = alignments
                .get(&r.id)
                .ok_or_else(|| Error::validation(None, format!("no alignment for utterance {:?}", r.id)))?;
            pool_phone_features(&corpus.features[i], a, corpus.frame_period)
        })
        .collect()
}

/// Scorer configuration for `variant`, with duration statistics taken
/// from the training split when phone-level.
pub fn scorer_config(
    variant: Variant,
    corpus: &Corpus,
    side: &SideInputs,
    model: &ModelOptions,
) -> Result<ScorerConfig> {
    let feature_dim = corpus.feature_dim();
    match variant {
        Variant::AsrFree => {
            let cluster_count = side
                .cluster_count
                .ok_or_else(|| Error::validation(None, "asr_free needs a codebook (cluster count)"))?;
            Ok(ScorerConfig::AsrFree(AsrFreeScorerConfig {
                feature_dim,
                hidden_dim: model.hidden_dim,
                cluster_count,
                cluster_embed_dim: model.cluster_embed_dim,
                blstm_layers: model.blstm_layers,
            }))
        }
        Variant::AsrBased => {
            let alignments =
                side.alignments.as_ref().ok_or_else(|| Error::validation(None, "asr_based needs alignments"))?;
            let inventory =
                side.inventory.as_ref().ok_or_else(|| Error::validation(None, "asr_based needs a phone inventory"))?;
            let pooled = pooled_features(corpus, alignments, &corpus.split_indices(Split::Train))?;
            let (duration_mean, duration_std) = duration_stats(&pooled);
            Ok(ScorerConfig::AsrBased(AsrBasedScorerConfig {
                feature_dim,
                hidden_dim: model.hidden_dim,
                phones: inventory.labels().to_vec(),
                blstm_layers: model.blstm_layers,
                duration_mean,
                duration_std,
            }))
        }
    }
}

/// Model inputs and normalized targets for the utterances of `split`
/// (all utterances when `None`), in manifest order.
pub fn examples(
    corpus: &Corpus,
    config: &ScorerConfig,
    side: &SideInputs,
    split: Option<Split>,
) -> Result<Vec<Example>> {
    let indices: Vec<usize> = match split {
        Some(s) => corpus.split_indices(s),
        None => (0..corpus.records.len()).collect(),
    };
    match config {
        ScorerConfig::AsrFree(c) => {
            let clusters =
                side.clusters.as_ref().ok_or_else(|| Error::validation(None, "asr_free needs cluster sequences"))?;
            indices
                .iter()
                .map(|&i| {
                    let r = &corpus.records[i];
                    let m = &corpus.features[i];
                    let seq = clusters
                        .get(&r.id)
                        .ok_or_else(|| Error::validation(None, format!("no cluster sequence for {:?}", r.id)))?;
                    if seq.len() != m.num_frames() {
                        return Err(Error::shape(format!(
                            "utterance {:?}: {} cluster indexes for {} frames",
                            r.id,
                            seq.len(),
                            m.num_frames()
                        )));
                    }
                    if let Some(&bad) = seq.indexes.iter().find(|&&j| j >= c.cluster_count) {
                        return Err(Error::validation(
                            None,
                            format!("utterance {:?}: index {bad} outside [0, {})", r.id, c.cluster_count),
                        ));
                    }
                    Ok(Example {
                        id: r.id.clone(),
                        input: ScorerInput::Frames { features: m.to_array(), clusters: seq.indexes.clone() },
                        target: r.score_norm(),
                    })
                })
                .collect()
        }
        ScorerConfig::AsrBased(c) => {
            let alignments =
                side.alignments.as_ref().ok_or_else(|| Error::validation(None, "asr_based needs alignments"))?;
            let pooled = pooled_features(corpus, alignments, &indices)?;
            indices
                .iter()
                .zip(pooled)
                .map(|(&i, p)| {
                    let r = &corpus.records[i];
                    Ok(Example { id: r.id.clone(), input: ScorerInput::phones(c, &p)?, target: r.score_norm() })
                })
                .collect()
        }
    }
}

/// Files written by a training run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutputs {
    /// Best-epoch scorer.
    pub checkpoint: PathBuf,
    /// Resumable trainer state (plus `.opt`).
    pub state: PathBuf,
    pub report: PathBuf,
    pub timing: PathBuf,
}

impl TrainOutputs {
    pub fn beside(checkpoint: impl Into<PathBuf>) -> Self {
        let checkpoint = checkpoint.into();
        let with = |suffix: &str| {
            let mut s = checkpoint.as_os_str().to_owned();
            s.push(suffix);
            PathBuf::from(s)
        };
        Self { state: with(".state"), report: with(".report.jsonl"), timing: with(".timing.jsonl"), checkpoint }
    }
}

/// Trains a scorer, saving resumable state after every epoch. With
/// `resume` and an existing state file, training continues from it.
pub fn train_scorer(
    config: ScorerConfig,
    train_config: TrainConfig,
    train: &[Example],
    dev: &[Example],
    outputs: &TrainOutputs,
    resume: bool,
) -> Result<(Scorer, TrainReport)> {
    let mut trainer = if resume && outputs.state.exists() {
        let t = Trainer::resume(&outputs.state, &config)?;
        if t.config() != &train_config {
            return Err(Error::validation(None, "training configuration differs from the saved state"));
        }
        log::info!("resuming after epoch {}", t.epochs_done());
        t
    } else {
        Trainer::new(train_config.clone(), Scorer::init(config, train_config.seed)?)?
    };
    while !trainer.finished() {
        trainer.run_epoch(train, dev)?;
        trainer.save(&outputs.state)?;
    }
    let (best, report) = trainer.into_best();
    best.save(&outputs.checkpoint)?;
    write_text(&outputs.report, report.to_json_lines())?;
    write_text(&outputs.timing, report.timing_json_lines())?;
    if let (Some(b), Some(last)) = (report.best(), report.epochs.last()) {
        log::info!(
            "best epoch {} (dev mse {:.6}); final epoch {} (dev mse {:.6})",
            b.epoch,
            b.dev_loss,
            last.epoch,
            last.dev_loss
        );
    }
    Ok((best, report))
}

pub fn predict(scorer: &Scorer, examples: &[Example], batch_size: usize) -> Result<Vec<Prediction>> {
    let inputs: Vec<&ScorerInput> = examples.iter().map(|e| &e.input).collect();
    let scores = scorer.score_all(&inputs, batch_size)?;
    Ok(examples.iter().zip(scores).map(|(e, s)| Prediction::new(e.id.clone(), s)).collect())
}

pub fn predictions_text(preds: &[Prediction]) -> String {
    preds.iter().map(|p| serde_json::to_string(p).expect("prediction serializes") + "\n").collect()
}

pub fn parse_predictions(text: &str) -> Result<Vec<Prediction>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let p: Prediction = serde_json::from_str(line)
            .map_err(|e| Error::validation(Some(i + 1), format!("bad prediction entry: {e}")))?;
        if !p.score_norm.is_finite() {
            return Err(Error::validation(Some(i + 1), "non-finite prediction"));
        }
        out.push(p);
    }
    Ok(out)
}

/// PCC and MSE (normalized scale) of predictions over one split's records.
pub fn evaluate_predictions(preds: &[Prediction], records: &[UtteranceRecord], split: Split) -> Result<EvalReport> {
    let by_id: HashMap<&str, f64> = preds.iter().map(|p| (p.utterance_id.as_str(), p.score_norm)).collect();
    let mut pred = Vec::new();
    let mut truth = Vec::new();
    for r in records.iter().filter(|r| r.split == split) {
        let p = by_id
            .get(r.id.as_str())
            .ok_or_else(|| Error::validation(None, format!("no prediction for utterance {:?}", r.id)))?;
        pred.push(*p);
        truth.push(r.score_norm());
    }
    evaluate(split.as_str(), &pred, &truth)
}

pub fn eval_report_json(report: &EvalReport) -> String {
    serde_json::to_string(report).expect("report serializes") + "\n"
}

/// Co-occurrence over every utterance that has both an alignment and a
/// cluster sequence, visited in sorted id order.
pub fn cooccurrence(
    alignments: &HashMap<String, PhoneAlignment>,
    clusters: &[(String, ClusterSequence)],
    inventory: &PhoneInventory,
    k: usize,
) -> Result<CooccurrenceMatrix> {
    let mut pairs: Vec<(&String, &PhoneAlignment, &ClusterSequence)> =
        clusters.iter().filter_map(|(id, c)| alignments.get(id).map(|a| (id, a, c))).collect();
    pairs.sort_by(|a, b| a.0.cmp(b.0));
    if pairs.len() < clusters.len() {
        log::info!("{} utterances without alignment skipped", clusters.len() - pairs.len());
    }
    build_cooccurrence(pairs.into_iter().map(|(_, a, c)| (a, c)), inventory, k)
}

pub fn write_text(path: &Path, text: impl AsRef<[u8]>) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}
