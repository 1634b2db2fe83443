//! On-disk corpus formats: frame-level feature files, manifests, phone
//! alignments and the phone inventory.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const FEATURE_MAGIC: &[u8; 4] = b"FMX1";
const FEATURE_HEADER_LEN: usize = 12;

/// Label reserved for silence in every phone inventory.
pub const SILENCE: &str = "sil";

/// Default frame period of the feature encoder, in seconds.
pub const DEFAULT_FRAME_PERIOD: f64 = 0.02;

/// Rated score range of the human annotations.
pub const SCORE_MIN: f64 = 0.0;
pub const SCORE_MAX: f64 = 4.0;

/// A `T x D` matrix of frame-level features, stored frame-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    num_frames: usize,
    dim: usize,
    values: Vec<f32>,
}

impl FeatureMatrix {
    pub fn new(num_frames: usize, dim: usize, values: Vec<f32>) -> Result<Self> {
        if num_frames == 0 || dim == 0 {
            return Err(Error::shape(format!("feature matrix must be non-empty, got {num_frames}x{dim}")));
        }
        if values.len() != num_frames * dim {
            return Err(Error::shape(format!(
                "expected {} values for {num_frames}x{dim}, got {}",
                num_frames * dim,
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Domain(format!("non-finite feature value at index {i}")));
        }
        Ok(Self { num_frames, dim, values })
    }

    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != dim) {
            return Err(Error::shape("ragged feature rows"));
        }
        Self::new(rows.len(), dim, rows.concat())
    }

    pub fn num_frames(&self) -> usize {
        self.num_frames
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn row(&self, t: usize) -> &[f32] {
        &self.values[t * self.dim..(t + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f32]> {
        self.values.chunks_exact(self.dim)
    }

    /// Widens the matrix to binary64 for computation.
    pub fn to_array(&self) -> Array2<f64> {
        Array2::from_shape_fn((self.num_frames, self.dim), |(t, d)| f64::from(self.values[t * self.dim + d]))
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(FEATURE_HEADER_LEN + 4 * self.values.len());
        out.extend_from_slice(FEATURE_MAGIC);
        out.extend_from_slice(&(self.num_frames as u32).to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != FEATURE_MAGIC {
            return Err(Error::format(0, "missing FMX1 magic"));
        }
        if bytes.len() < FEATURE_HEADER_LEN {
            return Err(Error::format(bytes.len(), "truncated header"));
        }
        let num_frames = read_u32(bytes, 4) as usize;
        let dim = read_u32(bytes, 8) as usize;
        if num_frames == 0 || dim == 0 {
            return Err(Error::format(4, format!("empty shape {num_frames}x{dim}")));
        }
        let expected = num_frames
            .checked_mul(dim)
            .and_then(|n| n.checked_mul(4))
            .and_then(|n| n.checked_add(FEATURE_HEADER_LEN))
            .ok_or_else(|| Error::format(4, "shape overflows"))?;
        if bytes.len() < expected {
            return Err(Error::format(bytes.len(), format!("truncated payload, expected {expected} bytes")));
        }
        if bytes.len() > expected {
            return Err(Error::format(expected, "trailing bytes after payload"));
        }
        let mut values = Vec::with_capacity(num_frames * dim);
        for (i, chunk) in bytes[FEATURE_HEADER_LEN..].chunks_exact(4).enumerate() {
            let v = f32::from_le_bytes(chunk.try_into().expect("4-byte chunk"));
            if !v.is_finite() {
                return Err(Error::format(FEATURE_HEADER_LEN + 4 * i, "non-finite feature value"));
            }
            values.push(v);
        }
        Ok(Self { num_frames, dim, values })
    }
}

pub(crate) fn read_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes"))
}

pub fn read_feature_matrix(path: impl AsRef<Path>) -> Result<FeatureMatrix> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    FeatureMatrix::decode(&bytes)
}

pub fn write_feature_matrix(m: &FeatureMatrix, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, m.encode()).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "dev" => Ok(Split::Dev),
            "test" => Ok(Split::Test),
            other => Err(Error::validation(None, format!("unknown split {other:?}"))),
        }
    }
}

/// One phone-level segment of a forced alignment; `end` is exclusive.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub phone: String,
    pub start: usize,
    pub end: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct PhoneAlignment {
    pub segments: Vec<Segment>,
}

impl PhoneAlignment {
    pub fn new(segments: Vec<(impl Into<String>, usize, usize)>) -> Self {
        let segments =
            segments.into_iter().map(|(phone, start, end)| Segment { phone: phone.into(), start, end }).collect();
        Self { segments }
    }

    /// Checks ordering, bounds and (optionally) phone membership against a
    /// feature matrix of `num_frames` frames.
    pub fn validate(&self, num_frames: usize, inventory: Option<&PhoneInventory>) -> Result<()> {
        let mut prev_end = 0;
        for (i, seg) in self.segments.iter().enumerate() {
            if seg.start >= seg.end {
                return Err(Error::validation(
                    None,
                    format!("segment {i} ({}) is empty or reversed: [{}, {})", seg.phone, seg.start, seg.end),
                ));
            }
            if seg.start < prev_end {
                return Err(Error::validation(None, format!("segment {i} overlaps its predecessor")));
            }
            if seg.end > num_frames {
                return Err(Error::validation(
                    None,
                    format!("segment {i} ends at {} beyond {num_frames} frames", seg.end),
                ));
            }
            if let Some(inv) = inventory {
                if inv.index_of(&seg.phone).is_none() {
                    return Err(Error::validation(None, format!("unknown phone {:?}", seg.phone)));
                }
            }
            prev_end = seg.end;
        }
        Ok(())
    }

    /// Frame extent covered by the last segment.
    pub fn span(&self) -> usize {
        self.segments.last().map_or(0, |s| s.end)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UtteranceRecord {
    pub id: String,
    pub score_raw: f64,
    pub split: Split,
    pub feature_path: PathBuf,
    pub alignment: Option<PhoneAlignment>,
}

impl UtteranceRecord {
    /// Raw score mapped onto the training target range.
    pub fn score_norm(&self) -> f64 {
        self.score_raw / 2.0 - 1.0
    }

    pub fn resolve_features(&self, base: &Path) -> PathBuf {
        if self.feature_path.is_absolute() {
            self.feature_path.clone()
        } else {
            base.join(&self.feature_path)
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestLine {
    id: String,
    path: String,
    score: f64,
    split: String,
}

pub fn parse_manifest(text: &str) -> Result<Vec<UtteranceRecord>> {
    let mut seen = HashSet::new();
    let mut records = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: ManifestLine = serde_json::from_str(line)
            .map_err(|e| Error::validation(Some(lineno), format!("bad manifest entry: {e}")))?;
        if !(SCORE_MIN..=SCORE_MAX).contains(&parsed.score) {
            return Err(Error::validation(Some(lineno), format!("score {} outside [0, 4]", parsed.score)));
        }
        let split = parsed
            .split
            .parse::<Split>()
            .map_err(|_| Error::validation(Some(lineno), format!("unknown split {:?}", parsed.split)))?;
        if !seen.insert(parsed.id.clone()) {
            return Err(Error::validation(Some(lineno), format!("duplicate id {:?}", parsed.id)));
        }
        records.push(UtteranceRecord {
            id: parsed.id,
            score_raw: parsed.score,
            split,
            feature_path: PathBuf::from(parsed.path),
            alignment: None,
        });
    }
    Ok(records)
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<Vec<UtteranceRecord>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_manifest(&text)
}

pub fn manifest_line(record: &UtteranceRecord) -> String {
    let line = ManifestLine {
        id: record.id.clone(),
        path: record.feature_path.to_string_lossy().into_owned(),
        score: record.score_raw,
        split: record.split.as_str().to_string(),
    };
    serde_json::to_string(&line).expect("manifest line serializes")
}

#[derive(Debug, Serialize, Deserialize)]
struct AlignmentLine {
    id: String,
    segments: Vec<(String, usize, usize)>,
}

/// Parses an alignment file into `(id, alignment)` pairs in file order.
/// Only structural ordering is checked here; bounds need the feature length.
pub fn parse_alignments(text: &str) -> Result<Vec<(String, PhoneAlignment)>> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: AlignmentLine = serde_json::from_str(line)
            .map_err(|e| Error::validation(Some(lineno), format!("bad alignment entry: {e}")))?;
        if !seen.insert(parsed.id.clone()) {
            return Err(Error::validation(Some(lineno), format!("duplicate alignment id {:?}", parsed.id)));
        }
        let alignment = PhoneAlignment::new(parsed.segments);
        alignment.validate(usize::MAX, None).map_err(|e| Error::validation(Some(lineno), e.to_string()))?;
        out.push((parsed.id, alignment));
    }
    Ok(out)
}

pub fn load_alignments(path: impl AsRef<Path>) -> Result<Vec<(String, PhoneAlignment)>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_alignments(&text)
}

pub fn alignment_line(id: &str, alignment: &PhoneAlignment) -> String {
    let line = AlignmentLine {
        id: id.to_string(),
        segments: alignment.segments.iter().map(|s| (s.phone.clone(), s.start, s.end)).collect(),
    };
    serde_json::to_string(&line).expect("alignment line serializes")
}

/// Attaches alignments to their manifest records by id. Records without an
/// alignment are left untouched; alignments for unknown ids are an error.
pub fn attach_alignments(records: &mut [UtteranceRecord], alignments: Vec<(String, PhoneAlignment)>) -> Result<()> {
    let index: HashMap<&str, usize> = records.iter().enumerate().map(|(i, r)| (r.id.as_str(), i)).collect();
    let mut slots = Vec::with_capacity(alignments.len());
    for (id, a) in alignments {
        let Some(&i) = index.get(id.as_str()) else {
            return Err(Error::validation(None, format!("alignment for unknown utterance {id:?}")));
        };
        slots.push((i, a));
    }
    for (i, a) in slots {
        records[i].alignment = Some(a);
    }
    Ok(())
}

/// Ordered phone labels; always contains [`SILENCE`] exactly once.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PhoneInventory {
    labels: Vec<String>,
    index: HashMap<String, usize>,
}

impl PhoneInventory {
    pub fn new(labels: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(labels.len());
        for (i, l) in labels.iter().enumerate() {
            if l.is_empty() || l.chars().any(char::is_whitespace) {
                return Err(Error::validation(Some(i + 1), format!("invalid phone label {l:?}")));
            }
            if index.insert(l.clone(), i).is_some() {
                return Err(Error::validation(Some(i + 1), format!("duplicate phone label {l:?}")));
            }
        }
        if !index.contains_key(SILENCE) {
            return Err(Error::validation(None, "phone inventory lacks \"sil\""));
        }
        Ok(Self { labels, index })
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut labels = Vec::new();
        for line in text.lines() {
            let l = line.trim();
            if !l.is_empty() {
                labels.push(l.to_string());
            }
        }
        Self::new(labels)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn to_text(&self) -> String {
        let mut s = self.labels.join("\n");
        s.push('\n');
        s
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.index.get(label).copied()
    }
}

/// Maps a raw `[0, 4]` rating onto `[-1, 1]`.
pub fn normalize_score(score_raw: f64) -> Result<f64> {
    if !(SCORE_MIN..=SCORE_MAX).contains(&score_raw) {
        return Err(Error::Domain(format!("score {score_raw} outside [0, 4]")));
    }
    Ok(score_raw / 2.0 - 1.0)
}

pub fn denormalize_score(score_norm: f64) -> f64 {
    2.0 * (score_norm + 1.0)
}

/// Phone-level view of an utterance: segment-mean features, durations in
/// seconds and the phone label of each segment.
#[derive(Debug, Clone, PartialEq)]
pub struct PhoneFeatures {
    pub features: Array2<f64>,
    pub durations: Vec<f64>,
    pub phones: Vec<String>,
}

pub fn pool_phone_features(m: &FeatureMatrix, alignment: &PhoneAlignment, frame_period: f64) -> Result<PhoneFeatures> {
    alignment.validate(m.num_frames(), None)?;
    let n = alignment.segments.len();
    let mut features = Array2::zeros((n, m.dim()));
    let mut durations = Vec::with_capacity(n);
    let mut phones = Vec::with_capacity(n);
    for (i, seg) in alignment.segments.iter().enumerate() {
        let len = seg.end - seg.start;
        let mut row = features.row_mut(i);
        for t in seg.start..seg.end {
            for (acc, &v) in row.iter_mut().zip(m.row(t)) {
                *acc += f64::from(v);
            }
        }
        row /= len as f64;
        durations.push(len as f64 * frame_period);
        phones.push(seg.phone.clone());
    }
    Ok(PhoneFeatures { features, durations, phones })
}

/// Corpus-wide metadata stored next to a manifest as `meta.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusMeta {
    pub feature_dim: usize,
    #[serde(default = "default_frame_period")]
    pub frame_period: f64,
}

fn default_frame_period() -> f64 {
    DEFAULT_FRAME_PERIOD
}
