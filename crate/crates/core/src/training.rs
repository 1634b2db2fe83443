//! Mini-batch training with Adam, dev-set early stopping and resumable
//! checkpoints.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::pcc;
use crate::nnet::{checkpoint, mse, Adam, AdamConfig, ParamGrads, ParamSet, SeqLayout};
use crate::scorer::{loss_and_grads, Scorer, ScorerConfig, ScorerInput};

/// Batches per length-sorting pool.
const BUCKET_POOL: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Monitor {
    DevMse,
    DevPcc,
}

impl std::str::FromStr for Monitor {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dev_mse" => Ok(Monitor::DevMse),
            "dev_pcc" => Ok(Monitor::DevPcc),
            other => Err(Error::validation(None, format!("unknown monitor {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub monitor: Monitor,
    /// Minimum absolute change that counts as an improvement.
    pub min_delta: f64,
    /// Global gradient-norm clip; off when `None`.
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.002,
            batch_size: 32,
            max_epochs: 50,
            patience: 7,
            seed: 0,
            monitor: Monitor::DevMse,
            min_delta: 1e-6,
            grad_clip: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::validation(None, format!("learning rate {} must be finite and non-negative", self.lr)));
        }
        if self.batch_size == 0 || self.max_epochs == 0 || self.patience == 0 {
            return Err(Error::validation(None, "batch_size, max_epochs and patience must be positive"));
        }
        if self.patience > self.max_epochs {
            return Err(Error::validation(None, "patience exceeds max_epochs"));
        }
        if let Some(c) = self.grad_clip {
            if c.is_nan() || c <= 0.0 {
                return Err(Error::validation(None, "grad_clip must be positive"));
            }
        }
        Ok(())
    }
}

/// One training utterance: model input and normalized target score.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub id: String,
    pub input: ScorerInput,
    pub target: f64,
}

/// A mini-batch: example indices plus the padded layout they pack into.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub indices: Vec<usize>,
    pub layout: SeqLayout,
}

impl Batch {
    /// Row mask of the packed batch, true on real frames.
    pub fn mask(&self) -> Vec<bool> {
        self.layout.mask()
    }
}

fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// Shuffles, groups similar lengths together within pools of
/// `BUCKET_POOL` batches, and shuffles the batch order. Deterministic in
/// `(seed, epoch)`; every index appears exactly once.
pub fn make_batches(lengths: &[usize], batch_size: usize, seed: u64, epoch: usize) -> Result<Vec<Batch>> {
    if lengths.is_empty() {
        return Err(Error::validation(None, "cannot batch an empty split"));
    }
    if batch_size == 0 {
        return Err(Error::validation(None, "batch size must be positive"));
    }
    let mut rng = epoch_rng(seed, epoch);
    let mut order: Vec<usize> = (0..lengths.len()).collect();
    order.shuffle(&mut rng);
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for pool in order.chunks(batch_size * BUCKET_POOL) {
        let mut pool = pool.to_vec();
        pool.sort_by_key(|&i| lengths[i]);
        groups.extend(pool.chunks(batch_size).map(<[usize]>::to_vec));
    }
    groups.shuffle(&mut rng);
    groups
        .into_iter()
        .map(|indices| {
            let layout = SeqLayout::new(indices.iter().map(|&i| lengths[i]).collect())?;
            Ok(Batch { indices, layout })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    EarlyStopping,
    MaxEpochs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_loss: f64,
    pub dev_pcc: Option<f64>,
    pub improved: bool,
    /// Wall-clock seconds; kept out of the serialized report so reports
    /// stay byte-identical across runs.
    #[serde(skip)]
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub best_monitor: Option<f64>,
    pub stop_reason: Option<StopReason>,
}

#[derive(Serialize)]
struct ReportSummary {
    summary: bool,
    best_epoch: Option<usize>,
    best_monitor: Option<f64>,
    stop_reason: Option<StopReason>,
    epochs_run: usize,
    last_dev_loss: Option<f64>,
    last_dev_pcc: Option<f64>,
}

impl TrainReport {
    pub fn last_epoch(&self) -> usize {
        self.epochs.last().map_or(0, |e| e.epoch)
    }

    pub fn best(&self) -> Option<&EpochRecord> {
        let best = self.best_epoch?;
        self.epochs.iter().find(|e| e.epoch == best)
    }

    /// One JSON object per epoch followed by a summary object.
    pub fn to_json_lines(&self) -> String {
        let mut out = String::new();
        for e in &self.epochs {
            out.push_str(&serde_json::to_string(e).expect("epoch serializes"));
            out.push('\n');
        }
        let last = self.epochs.last();
        let summary = ReportSummary {
            summary: true,
            best_epoch: self.best_epoch,
            best_monitor: self.best_monitor,
            stop_reason: self.stop_reason,
            epochs_run: self.epochs.len(),
            last_dev_loss: last.map(|e| e.dev_loss),
            last_dev_pcc: last.and_then(|e| e.dev_pcc),
        };
        out.push_str(&serde_json::to_string(&summary).expect("summary serializes"));
        out.push('\n');
        out
    }

    pub fn timing_json_lines(&self) -> String {
        self.epochs.iter().map(|e| format!("{{\"epoch\":{},\"seconds\":{:.3}}}\n", e.epoch, e.seconds)).collect()
    }
}

fn clip_gradients(grads: &mut ParamGrads, max_norm: f64) {
    let norm = grads.values().flat_map(|g| g.iter()).map(|v| v * v).sum::<f64>().sqrt();
    if norm > max_norm {
        let scale = max_norm / norm;
        grads.values_mut().for_each(|g| g.mapv_inplace(|v| v * scale));
    }
}

/// Dev-set loss and PCC (absent when predictions are constant).
pub fn evaluate_examples(scorer: &Scorer, examples: &[Example], batch_size: usize) -> Result<(f64, Option<f64>)> {
    let inputs: Vec<&ScorerInput> = examples.iter().map(|e| &e.input).collect();
    let preds = scorer.score_all(&inputs, batch_size)?;
    let targets: Vec<f64> = examples.iter().map(|e| e.target).collect();
    let loss = mse(&preds, &targets)?;
    Ok((loss, pcc(&preds, &targets).ok()))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TrainerState {
    config: TrainConfig,
    epochs_done: usize,
    best_epoch: Option<usize>,
    best_monitor: Option<f64>,
    bad_epochs: usize,
    report: TrainReport,
}

#[derive(Serialize, Deserialize)]
struct TrainCheckpointHeader {
    scorer: ScorerConfig,
    trainer: TrainerState,
}

#[derive(Serialize, Deserialize)]
struct OptimizerHeader {
    adam: AdamConfig,
    step: u64,
}

const BEST_PREFIX: &str = "best/";

/// Owns the scorer being trained, its optimizer and the early-stopping state.
#[derive(Debug, Clone)]
pub struct Trainer {
    config: TrainConfig,
    scorer: Scorer,
    best_params: ParamSet,
    adam: Adam,
    epochs_done: usize,
    best_epoch: Option<usize>,
    best_monitor: Option<f64>,
    bad_epochs: usize,
    report: TrainReport,
}

impl Trainer {
    pub fn new(config: TrainConfig, scorer: Scorer) -> Result<Self> {
        config.validate()?;
        let adam = Adam::new(AdamConfig { lr: config.lr, ..AdamConfig::default() }, &scorer.params);
        Ok(Self {
            best_params: scorer.params.clone(),
            config,
            scorer,
            adam,
            epochs_done: 0,
            best_epoch: None,
            best_monitor: None,
            bad_epochs: 0,
            report: TrainReport::default(),
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn scorer(&self) -> &Scorer {
        &self.scorer
    }

    pub fn report(&self) -> &TrainReport {
        &self.report
    }

    pub fn epochs_done(&self) -> usize {
        self.epochs_done
    }

    pub fn finished(&self) -> bool {
        self.report.stop_reason.is_some()
    }

    /// One Adam step on a batch; returns the batch loss.
    pub fn step(&mut self, inputs: &[&ScorerInput], targets: &[f64]) -> Result<f64> {
        let (loss, mut grads, _) = loss_and_grads(&self.scorer.config, &self.scorer.params, inputs, targets)?;
        if !loss.is_finite() {
            return Err(Error::Numerical(format!("non-finite loss {loss}")));
        }
        if let Some(c) = self.config.grad_clip {
            clip_gradients(&mut grads, c);
        }
        self.adam.step(&mut self.scorer.params, &grads)?;
        Ok(loss)
    }

    fn improves(&self, value: Option<f64>) -> bool {
        let Some(v) = value else { return false };
        match (self.best_monitor, self.config.monitor) {
            (None, _) => true,
            (Some(best), Monitor::DevMse) => v < best - self.config.min_delta,
            (Some(best), Monitor::DevPcc) => v > best + self.config.min_delta,
        }
    }

    /// Runs one full epoch over `train`, then evaluates on `dev`.
    pub fn run_epoch(&mut self, train: &[Example], dev: &[Example]) -> Result<&EpochRecord> {
        if self.finished() {
            return Err(Error::validation(None, "training already stopped"));
        }
        if train.is_empty() || dev.is_empty() {
            return Err(Error::validation(None, "train and dev splits must be non-empty"));
        }
        let start = Instant::now();
        let epoch = self.epochs_done + 1;
        let lengths: Vec<usize> = train.iter().map(|e| e.input.len()).collect();
        let batches = make_batches(&lengths, self.config.batch_size, self.config.seed, epoch)?;
        let mut total = 0.0;
        for (bi, batch) in batches.iter().enumerate() {
            let inputs: Vec<&ScorerInput> = batch.indices.iter().map(|&i| &train[i].input).collect();
            let targets: Vec<f64> = batch.indices.iter().map(|&i| train[i].target).collect();
            let loss = self.step(&inputs, &targets).map_err(|e| match e {
                Error::Numerical(msg) => {
                    let ids: Vec<&str> = batch.indices.iter().map(|&i| train[i].id.as_str()).collect();
                    Error::Numerical(format!("{msg} in epoch {epoch} batch {bi} (utterances {ids:?})"))
                }
                other => other,
            })?;
            total += loss;
        }
        let train_loss = total / batches.len() as f64;
        let (dev_loss, dev_pcc) = evaluate_examples(&self.scorer, dev, self.config.batch_size)?;
        let monitor = match self.config.monitor {
            Monitor::DevMse => Some(dev_loss),
            Monitor::DevPcc => dev_pcc,
        };
        let improved = self.improves(monitor);
        if improved {
            self.best_monitor = monitor;
            self.best_epoch = Some(epoch);
            self.best_params = self.scorer.params.clone();
            self.bad_epochs = 0;
        } else {
            self.bad_epochs += 1;
        }
        self.epochs_done = epoch;
        let record =
            EpochRecord { epoch, train_loss, dev_loss, dev_pcc, improved, seconds: start.elapsed().as_secs_f64() };
        log::info!(
            "epoch {epoch}: train {train_loss:.6} dev {dev_loss:.6} pcc {} {}",
            dev_pcc.map_or("n/a".to_string(), |p| format!("{p:.4}")),
            if improved { "*" } else { "" }
        );
        self.report.epochs.push(record);
        self.report.best_epoch = self.best_epoch;
        self.report.best_monitor = self.best_monitor;
        if self.bad_epochs >= self.config.patience {
            self.report.stop_reason = Some(StopReason::EarlyStopping);
        } else if epoch >= self.config.max_epochs {
            self.report.stop_reason = Some(StopReason::MaxEpochs);
        }
        Ok(self.report.epochs.last().expect("just pushed"))
    }

    /// Trains until early stopping, `max_epochs`, or `until_epoch` if given.
    pub fn run(&mut self, train: &[Example], dev: &[Example], until_epoch: Option<usize>) -> Result<()> {
        while !self.finished() && until_epoch.is_none_or(|u| self.epochs_done < u) {
            self.run_epoch(train, dev)?;
        }
        Ok(())
    }

    /// Scorer with the best-epoch parameters, and the report.
    pub fn into_best(self) -> (Scorer, TrainReport) {
        let best = Scorer { config: self.scorer.config, params: self.best_params };
        (best, self.report)
    }

    pub fn best_scorer(&self) -> Scorer {
        Scorer { config: self.scorer.config.clone(), params: self.best_params.clone() }
    }

    fn opt_path(path: &Path) -> PathBuf {
        let mut s = path.as_os_str().to_owned();
        s.push(".opt");
        PathBuf::from(s)
    }

    /// Writes the training state to `path` and the optimizer moments to
    /// `path` + `.opt`.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let header = TrainCheckpointHeader {
            scorer: self.scorer.config.clone(),
            trainer: TrainerState {
                config: self.config.clone(),
                epochs_done: self.epochs_done,
                best_epoch: self.best_epoch,
                best_monitor: self.best_monitor,
                bad_epochs: self.bad_epochs,
                report: self.report.clone(),
            },
        };
        let mut tensors = self.scorer.params.clone();
        for (name, t) in self.best_params.iter() {
            tensors.insert(format!("{BEST_PREFIX}{name}"), t.clone())?;
        }
        checkpoint::save(path, &serde_json::to_string(&header).expect("header serializes"), &tensors)?;

        let mut moments = ParamSet::new();
        for (name, m) in self.adam.first_moments() {
            moments.insert(format!("m/{name}"), m.clone())?;
        }
        for (name, v) in self.adam.second_moments() {
            moments.insert(format!("v/{name}"), v.clone())?;
        }
        let opt = OptimizerHeader { adam: self.adam.config, step: self.adam.step_count() };
        checkpoint::save(Self::opt_path(path), &serde_json::to_string(&opt).expect("header serializes"), &moments)
    }

    /// Restores a trainer saved with [`Trainer::save`]. Fails if the stored
    /// scorer configuration differs from `expected`.
    pub fn resume(path: impl AsRef<Path>, expected: &ScorerConfig) -> Result<Self> {
        let path = path.as_ref();
        let corrupt = |msg: String| Error::validation(None, format!("{}: {msg}", path.display()));
        let (header, tensors) = checkpoint::load(path)?;
        let header: TrainCheckpointHeader =
            serde_json::from_str(&header).map_err(|e| corrupt(format!("bad training header: {e}")))?;
        if &header.scorer != expected {
            return Err(corrupt(format!(
                "checkpoint scorer config {} does not match the requested one",
                serde_json::to_string(&header.scorer).unwrap_or_default()
            )));
        }
        let mut current = ParamSet::new();
        let mut best = ParamSet::new();
        for (name, t) in tensors.iter() {
            match name.strip_prefix(BEST_PREFIX) {
                Some(n) => best.insert(n, t.clone())?,
                None => current.insert(name.clone(), t.clone())?,
            }
        }
        let scorer = Scorer::from_parts(header.scorer, current)?;
        if !scorer.params.same_layout(&best) {
            return Err(corrupt("best-epoch parameters do not match the scorer".into()));
        }

        let opt_path = Self::opt_path(path);
        let (opt_header, moments) = checkpoint::load(&opt_path)?;
        let opt: OptimizerHeader =
            serde_json::from_str(&opt_header).map_err(|e| corrupt(format!("bad optimizer header: {e}")))?;
        let mut first = BTreeMap::new();
        let mut second = BTreeMap::new();
        for (name, t) in moments.iter() {
            let slot = if let Some(n) = name.strip_prefix("m/") {
                first.insert(n.to_string(), t.clone())
            } else if let Some(n) = name.strip_prefix("v/") {
                second.insert(n.to_string(), t.clone())
            } else {
                return Err(corrupt(format!("unexpected optimizer tensor {name:?}")));
            };
            debug_assert!(slot.is_none());
        }
        let adam = Adam::from_parts(opt.adam, opt.step, first, second)?;
        let layout_ok = adam.first_moments().len() == scorer.params.len()
            && adam
                .first_moments()
                .iter()
                .zip(scorer.params.iter())
                .all(|((a, m), (b, p))| a == b && m.dim() == p.dim());
        if !layout_ok {
            return Err(corrupt("optimizer state does not match the scorer".into()));
        }
        let t = header.trainer;
        t.config.validate()?;
        Ok(Self {
            config: t.config,
            scorer,
            best_params: best,
            adam,
            epochs_done: t.epochs_done,
            best_epoch: t.best_epoch,
            best_monitor: t.best_monitor,
            bad_epochs: t.bad_epochs,
            report: t.report,
        })
    }
}

/// Trains `scorer` to completion and returns the best-epoch scorer.
pub fn train(config: TrainConfig, scorer: Scorer, train: &[Example], dev: &[Example]) -> Result<(Scorer, TrainReport)> {
    let mut trainer = Trainer::new(config, scorer)?;
    trainer.run(train, dev, None)?;
    Ok(trainer.into_best())
}
