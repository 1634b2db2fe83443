//! Synthetic corpora with planted pause structure.
//!
//! Every utterance alternates speech segments, drawn around cyclically
//! chosen speech centers, with pause segments drawn around a dedicated
//! pause center. The rating is `4 * (1 - pause_frames / total_frames)`.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{
    alignment_line, manifest_line, CorpusMeta, FeatureMatrix, PhoneAlignment, PhoneInventory, Split, UtteranceRecord,
    DEFAULT_FRAME_PERIOD, SILENCE,
};
use crate::error::{Error, Result};

const SPEECH_SEGMENT: (usize, usize) = (3, 12);
const MEAN_PAUSE_FRAMES: f64 = 15.0;
const MAX_CENTER_TRIES: usize = 10_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_train: usize,
    pub n_dev: usize,
    pub n_test: usize,
    pub feature_dim: usize,
    pub n_speech_clusters: usize,
    pub cluster_spread: f64,
    pub frame_period: f64,
    pub min_len: usize,
    pub max_len: usize,
    pub min_pause_ratio: f64,
    pub max_pause_ratio: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_train: 500,
            n_dev: 100,
            n_test: 100,
            feature_dim: 16,
            n_speech_clusters: 8,
            cluster_spread: 0.1,
            frame_period: DEFAULT_FRAME_PERIOD,
            min_len: 50,
            max_len: 400,
            min_pause_ratio: 0.0,
            max_pause_ratio: 0.6,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::validation(None, msg.to_string()));
        if self.n_train == 0 || self.n_dev == 0 || self.n_test == 0 {
            return bad("every split needs at least one utterance");
        }
        if self.feature_dim == 0 || self.n_speech_clusters == 0 {
            return bad("feature_dim and n_speech_clusters must be positive");
        }
        if !(self.cluster_spread > 0.0 && self.cluster_spread.is_finite()) {
            return bad("cluster_spread must be positive and finite");
        }
        if !(self.frame_period > 0.0 && self.frame_period.is_finite()) {
            return bad("frame_period must be positive and finite");
        }
        if self.min_len < 2 || self.min_len > self.max_len {
            return bad("length range must satisfy 2 <= min_len <= max_len");
        }
        let r = 0.0..=0.8;
        if !(r.contains(&self.min_pause_ratio) && r.contains(&self.max_pause_ratio))
            || self.min_pause_ratio > self.max_pause_ratio
        {
            return bad("pause ratio range must lie within [0, 0.8]");
        }
        Ok(())
    }

    pub fn speech_label(c: usize) -> String {
        format!("ph{c}")
    }

    /// `sil` followed by one pseudo-phone per speech center.
    pub fn inventory(&self) -> PhoneInventory {
        let mut labels = vec![SILENCE.to_string()];
        labels.extend((0..self.n_speech_clusters).map(Self::speech_label));
        PhoneInventory::new(labels).expect("synthetic labels are unique")
    }
}

/// `4 * (1 - pause_ratio)`.
pub fn score_from_pause_ratio(pause_ratio: f64) -> f64 {
    4.0 * (1.0 - pause_ratio)
}

/// Planted generator state: speech centers followed by the pause center.
#[derive(Debug, Clone, PartialEq)]
pub struct Centers {
    pub dim: usize,
    pub speech: Vec<Vec<f64>>,
    pub pause: Vec<f64>,
}

impl Centers {
    fn all(&self) -> impl Iterator<Item = &Vec<f64>> {
        self.speech.iter().chain(std::iter::once(&self.pause))
    }

    pub fn min_separation(&self) -> f64 {
        let all: Vec<&Vec<f64>> = self.all().collect();
        let mut best = f64::INFINITY;
        for (i, a) in all.iter().enumerate() {
            for b in &all[i + 1..] {
                let d = a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
                best = best.min(d);
            }
        }
        best
    }
}

/// Draws centers uniformly in `[-1, 1]^D`, rejecting any closer than
/// `10 * cluster_spread` to one already accepted.
pub fn draw_centers(config: &SynthConfig) -> Result<Centers> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let min_sep = 10.0 * config.cluster_spread;
    let mut accepted: Vec<Vec<f64>> = Vec::with_capacity(config.n_speech_clusters + 1);
    let mut tries = 0;
    while accepted.len() < config.n_speech_clusters + 1 {
        tries += 1;
        if tries > MAX_CENTER_TRIES {
            return Err(Error::validation(
                None,
                format!(
                    "cannot place {} centers {min_sep} apart in [-1, 1]^{}",
                    config.n_speech_clusters + 1,
                    config.feature_dim
                ),
            ));
        }
        let c: Vec<f64> = (0..config.feature_dim).map(|_| rng.random_range(-1.0..=1.0)).collect();
        let far =
            accepted.iter().all(|a| a.iter().zip(&c).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt() >= min_sep);
        if far {
            accepted.push(c);
        }
    }
    let pause = accepted.pop().expect("at least one center");
    Ok(Centers { dim: config.feature_dim, speech: accepted, pause })
}

/// One generated utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthUtterance {
    pub id: String,
    pub split: Split,
    pub features: FeatureMatrix,
    pub alignment: PhoneAlignment,
    /// Center index per frame; the pause center is `n_speech_clusters`.
    pub planted: Vec<usize>,
    pub pause_ratio: f64,
    pub score_raw: f64,
}

fn utterance_rng(seed: u64, split: Split, index: usize) -> ChaCha8Rng {
    let tag = match split {
        Split::Train => 1u64,
        Split::Dev => 2,
        Split::Test => 3,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(tag << 32 | index as u64);
    rng
}

/// Splits `total` into `parts` positive lengths.
fn random_partition(rng: &mut ChaCha8Rng, total: usize, parts: usize) -> Vec<usize> {
    debug_assert!(parts >= 1 && parts <= total);
    let mut cuts: Vec<usize> = sample(rng, total - 1, parts - 1).into_iter().map(|c| c + 1).collect();
    cuts.sort_unstable();
    let mut out = Vec::with_capacity(parts);
    let mut prev = 0;
    for c in cuts.into_iter().chain(std::iter::once(total)) {
        out.push(c - prev);
        prev = c;
    }
    out
}

pub fn generate_utterance(config: &SynthConfig, centers: &Centers, split: Split, index: usize) -> SynthUtterance {
    let mut rng = utterance_rng(config.seed, split, index);
    let total = rng.random_range(config.min_len..=config.max_len);
    let ratio = rng.random_range(config.min_pause_ratio..=config.max_pause_ratio);
    let pause_total = ((ratio * total as f64).round() as usize).min(total - 1);
    let speech_total = total - pause_total;

    let mut speech = Vec::new();
    let mut left = speech_total;
    while left > 0 {
        let len = rng.random_range(SPEECH_SEGMENT.0..=SPEECH_SEGMENT.1).min(left);
        speech.push(len);
        left -= len;
    }
    let gaps = speech.len() + 1;
    let n_pauses = if pause_total == 0 {
        0
    } else {
        ((pause_total as f64 / MEAN_PAUSE_FRAMES).round() as usize).clamp(1, gaps.min(pause_total))
    };
    let pause_lengths = if n_pauses == 0 { Vec::new() } else { random_partition(&mut rng, pause_total, n_pauses) };
    let mut gap_slots: Vec<usize> = sample(&mut rng, gaps, n_pauses).into_vec();
    gap_slots.sort_unstable();
    let mut pause_at = vec![None; gaps];
    for (slot, len) in gap_slots.into_iter().zip(pause_lengths) {
        pause_at[slot] = Some(len);
    }

    let offset = rng.random_range(0..config.n_speech_clusters);
    let pause_id = config.n_speech_clusters;
    let mut segments = Vec::new();
    let mut planted = Vec::with_capacity(total);
    let mut push = |label: String, center: usize, len: usize, planted: &mut Vec<usize>| {
        let start = planted.len();
        planted.extend(std::iter::repeat_n(center, len));
        segments.push((label, start, planted.len()));
    };
    for (i, &len) in speech.iter().enumerate() {
        if let Some(p) = pause_at[i] {
            push(SILENCE.to_string(), pause_id, p, &mut planted);
        }
        let c = (offset + i) % config.n_speech_clusters;
        push(SynthConfig::speech_label(c), c, len, &mut planted);
    }
    if let Some(p) = pause_at[speech.len()] {
        push(SILENCE.to_string(), pause_id, p, &mut planted);
    }
    debug_assert_eq!(planted.len(), total);

    let mut values = Vec::with_capacity(total * config.feature_dim);
    for &c in &planted {
        let center = if c == pause_id { &centers.pause } else { &centers.speech[c] };
        for &mu in center {
            let z: f64 = StandardNormal.sample(&mut rng);
            values.push((mu + config.cluster_spread * z) as f32);
        }
    }
    let features = FeatureMatrix::new(total, config.feature_dim, values).expect("finite synthetic frames");
    let pause_ratio = pause_total as f64 / total as f64;
    SynthUtterance {
        id: format!("{}_{index:04}", split.as_str()),
        split,
        features,
        alignment: PhoneAlignment::new(segments),
        planted,
        pause_ratio,
        score_raw: score_from_pause_ratio(pause_ratio),
    }
}

/// All utterances of a corpus in split order (train, dev, test).
pub fn generate_in_memory(config: &SynthConfig) -> Result<(Centers, Vec<SynthUtterance>)> {
    let centers = draw_centers(config)?;
    let jobs: Vec<(Split, usize)> =
        [(Split::Train, config.n_train), (Split::Dev, config.n_dev), (Split::Test, config.n_test)]
            .into_iter()
            .flat_map(|(s, n)| (0..n).map(move |i| (s, i)))
            .collect();
    let utts = jobs.par_iter().map(|&(s, i)| generate_utterance(config, &centers, s, i)).collect();
    Ok((centers, utts))
}

#[derive(Serialize)]
struct TruthLine<'a> {
    id: &'a str,
    pause_ratio: f64,
}

/// Paths of a generated corpus directory.
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusLayout {
    pub root: PathBuf,
}

impl CorpusLayout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }
    pub fn manifest(&self) -> PathBuf {
        self.root.join("manifest.jsonl")
    }
    pub fn alignments(&self) -> PathBuf {
        self.root.join("alignments.jsonl")
    }
    pub fn phones(&self) -> PathBuf {
        self.root.join("phones.txt")
    }
    pub fn truth(&self) -> PathBuf {
        self.root.join("truth.jsonl")
    }
    pub fn meta(&self) -> PathBuf {
        self.root.join("meta.json")
    }
    pub fn config(&self) -> PathBuf {
        self.root.join("synth.json")
    }
    pub fn features_dir(&self) -> PathBuf {
        self.root.join("features")
    }
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Writes a corpus to `dir`: `features/<id>.fmx`, `manifest.jsonl`,
/// `alignments.jsonl`, `phones.txt`, `truth.jsonl`, `meta.json` and the
/// generating `synth.json`.
pub fn generate(config: &SynthConfig, dir: impl AsRef<Path>) -> Result<CorpusLayout> {
    let layout = CorpusLayout::new(dir.as_ref());
    let (_, utts) = generate_in_memory(config)?;
    let features = layout.features_dir();
    fs::create_dir_all(&features).map_err(|e| Error::io(&features, e))?;
    utts.par_iter().try_for_each(|u| write(&features.join(format!("{}.fmx", u.id)), u.features.encode()))?;

    let mut manifest = String::new();
    let mut alignments = String::new();
    let mut truth = String::new();
    for u in &utts {
        let record = UtteranceRecord {
            id: u.id.clone(),
            score_raw: u.score_raw,
            split: u.split,
            feature_path: PathBuf::from(format!("features/{}.fmx", u.id)),
            alignment: None,
        };
        manifest.push_str(&manifest_line(&record));
        manifest.push('\n');
        alignments.push_str(&alignment_line(&u.id, &u.alignment));
        alignments.push('\n');
        truth.push_str(
            &serde_json::to_string(&TruthLine { id: &u.id, pause_ratio: u.pause_ratio }).expect("truth serializes"),
        );
        truth.push('\n');
    }
    write(&layout.manifest(), manifest)?;
    write(&layout.alignments(), alignments)?;
    write(&layout.truth(), truth)?;
    write(&layout.phones(), config.inventory().to_text())?;
    let meta = CorpusMeta { feature_dim: config.feature_dim, frame_period: config.frame_period };
    write(&layout.meta(), serde_json::to_string_pretty(&meta).expect("meta serializes") + "\n")?;
    write(&layout.config(), serde_json::to_string_pretty(config).expect("config serializes") + "\n")?;
    Ok(layout)
}
