//! K-means codebook over frame-level features. Each frame's nearest
//! centroid index is its pseudo-label.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{read_u32, FeatureMatrix};
use crate::error::{Error, Result};

pub const CODEBOOK_MAGIC: &[u8; 4] = b"KMC1";
const CODEBOOK_HEADER_LEN: usize = 20;

pub const DEFAULT_K: usize = 50;
pub const DEFAULT_MAX_ITERS: usize = 100;
pub const DEFAULT_TOL: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    k: usize,
    dim: usize,
    centroids: Vec<f64>,
    seed: u64,
    inertia: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KMeansParams {
    pub k: usize,
    pub seed: u64,
    pub max_iters: usize,
    /// Convergence threshold on the largest per-centroid L2 movement.
    pub tol: f64,
}

impl Default for KMeansParams {
    fn default() -> Self {
        Self { k: DEFAULT_K, seed: 0, max_iters: DEFAULT_MAX_ITERS, tol: DEFAULT_TOL }
    }
}

/// Result of a K-means fit, including per-iteration diagnostics.
#[derive(Debug, Clone)]
pub struct KMeansFit {
    pub codebook: Codebook,
    /// Final assignment of every training frame.
    pub assignments: Vec<usize>,
    /// Inertia after each assignment step, starting with the initial centroids.
    pub inertia_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

/// Pseudo-label sequence of one utterance, one index per frame.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterSequence {
    pub indexes: Vec<usize>,
}

impl ClusterSequence {
    pub fn len(&self) -> usize {
        self.indexes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indexes.is_empty()
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest centroid by squared distance; ties go to the lowest index.
fn nearest(centroids: &[f64], dim: usize, x: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.chunks_exact(dim).enumerate() {
        let d = sq_dist(c, x);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

fn assign_all(frames: &[f64], dim: usize, centroids: &[f64]) -> Vec<(usize, f64)> {
    frames.par_chunks_exact(dim).map(|x| nearest(centroids, dim, x)).collect()
}

/// D²-weighted draw from `closest`; falls back to a uniform draw when
/// every frame coincides with a chosen centroid.
fn d2_sample(closest: &[f64], total: f64, rng: &mut ChaCha8Rng) -> usize {
    let n = closest.len();
    if total <= 0.0 {
        return rng.random_range(0..n);
    }
    let target = rng.random::<f64>() * total;
    let mut acc = 0.0;
    for (i, &d) in closest.iter().enumerate() {
        acc += d;
        if acc > target && d > 0.0 {
            return i;
        }
    }
    closest.iter().rposition(|&d| d > 0.0).unwrap_or(n - 1)
}

/// Greedy k-means++: each new centroid is the best of `2 + ln k`
/// D²-sampled candidates, judged by the resulting potential.
fn kmeans_plus_plus(frames: &[f64], dim: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n = frames.len() / dim;
    let trials = 2 + (k as f64).ln().floor() as usize;
    let mut centroids = Vec::with_capacity(k * dim);
    let first = rng.random_range(0..n);
    centroids.extend_from_slice(&frames[first * dim..(first + 1) * dim]);
    let mut closest: Vec<f64> = frames.par_chunks_exact(dim).map(|x| sq_dist(x, &centroids[..dim])).collect();
    for _ in 1..k {
        let total: f64 = closest.iter().sum();
        let mut best: Option<(f64, usize, Vec<f64>)> = None;
        for _ in 0..trials {
            let pick = d2_sample(&closest, total, rng);
            let c = &frames[pick * dim..(pick + 1) * dim];
            let updated: Vec<f64> =
                closest.par_iter().zip(frames.par_chunks_exact(dim)).map(|(&b, x)| b.min(sq_dist(x, c))).collect();
            let potential: f64 = updated.iter().sum();
            if best.as_ref().is_none_or(|(p, _, _)| potential < *p) {
                best = Some((potential, pick, updated));
            }
        }
        let (_, pick, updated) = best.expect("at least one trial");
        centroids.extend_from_slice(&frames[pick * dim..(pick + 1) * dim]);
        closest = updated;
    }
    centroids
}

/// Moves the farthest frame of a multi-member cluster into each empty one.
fn fill_empty_clusters(assign: &mut [(usize, f64)], k: usize) {
    let mut counts = vec![0usize; k];
    for &(j, _) in assign.iter() {
        counts[j] += 1;
    }
    for empty in 0..k {
        if counts[empty] > 0 {
            continue;
        }
        let mut far: Option<(usize, f64)> = None;
        for (i, &(j, d)) in assign.iter().enumerate() {
            if counts[j] > 1 && far.is_none_or(|(_, fd)| d > fd) {
                far = Some((i, d));
            }
        }
        let Some((i, _)) = far else { return };
        counts[assign[i].0] -= 1;
        counts[empty] += 1;
        assign[i] = (empty, 0.0);
    }
}

fn recompute_centroids(frames: &[f64], dim: usize, k: usize, assign: &[(usize, f64)], fallback: &[f64]) -> Vec<f64> {
    let mut sums = vec![0.0; k * dim];
    let mut counts = vec![0usize; k];
    for (x, &(j, _)) in frames.chunks_exact(dim).zip(assign) {
        counts[j] += 1;
        for (s, v) in sums[j * dim..(j + 1) * dim].iter_mut().zip(x) {
            *s += v;
        }
    }
    for j in 0..k {
        let row = &mut sums[j * dim..(j + 1) * dim];
        if counts[j] == 0 {
            row.copy_from_slice(&fallback[j * dim..(j + 1) * dim]);
        } else {
            let c = counts[j] as f64;
            row.iter_mut().for_each(|v| *v /= c);
        }
    }
    sums
}

/// Lloyd's algorithm from a seeded k-means++ start.
///
/// `frames` holds `n` frames of `dim` values each, frame-major. Iteration
/// stops when no centroid moves by `tol` or more, when the assignment is
/// stable, or after `max_iters` updates.
pub fn fit_kmeans(frames: &[f64], dim: usize, params: &KMeansParams) -> Result<KMeansFit> {
    let k = params.k;
    if k == 0 || dim == 0 {
        return Err(Error::Domain("k and dim must be positive".into()));
    }
    if !frames.len().is_multiple_of(dim) {
        return Err(Error::shape(format!("{} values are not a multiple of dim {dim}", frames.len())));
    }
    let n = frames.len() / dim;
    if n < k {
        return Err(Error::Domain(format!("need at least k={k} frames, got {n}")));
    }
    if let Some(i) = frames.iter().position(|v| !v.is_finite()) {
        return Err(Error::Domain(format!("non-finite value in frame {}", i / dim)));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut centroids = kmeans_plus_plus(frames, dim, k, &mut rng);
    let mut assign = assign_all(frames, dim, &centroids);
    let mut trace = vec![assign.iter().map(|a| a.1).sum::<f64>()];
    let mut iterations = 0;
    let mut converged = false;

    while iterations < params.max_iters {
        iterations += 1;
        fill_empty_clusters(&mut assign, k);
        let updated = recompute_centroids(frames, dim, k, &assign, &centroids);
        let shift = centroids
            .chunks_exact(dim)
            .zip(updated.chunks_exact(dim))
            .map(|(a, b)| sq_dist(a, b).sqrt())
            .fold(0.0, f64::max);
        let next = assign_all(frames, dim, &updated);
        let stable = next.iter().zip(&assign).all(|(a, b)| a.0 == b.0);
        centroids = updated;
        assign = next;
        let inertia: f64 = assign.iter().map(|a| a.1).sum();
        log::debug!("kmeans iter {iterations}: inertia {inertia:.6} shift {shift:.3e}");
        trace.push(inertia);
        if stable || shift < params.tol {
            converged = true;
            break;
        }
    }

    let inertia = *trace.last().expect("trace is non-empty");
    Ok(KMeansFit {
        codebook: Codebook { k, dim, centroids, seed: params.seed, inertia },
        assignments: assign.into_iter().map(|a| a.0).collect(),
        inertia_trace: trace,
        iterations,
        converged,
    })
}

/// Uniformly subsamples at most `max_frames` frames without replacement,
/// keeping their original order.
pub fn subsample_frames(frames: &[f64], dim: usize, max_frames: usize, seed: u64) -> Vec<f64> {
    let n = frames.len() / dim;
    if n <= max_frames {
        return frames.to_vec();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = rand::seq::index::sample(&mut rng, n, max_frames).into_vec();
    picked.sort_unstable();
    picked.into_iter().flat_map(|i| frames[i * dim..(i + 1) * dim].iter().copied()).collect()
}

impl Codebook {
    pub fn new(k: usize, dim: usize, centroids: Vec<f64>, seed: u64) -> Result<Self> {
        if k == 0 || dim == 0 {
            return Err(Error::Domain("codebook needs k >= 1 and dim >= 1".into()));
        }
        if centroids.len() != k * dim {
            return Err(Error::shape(format!("expected {} centroid values, got {}", k * dim, centroids.len())));
        }
        if centroids.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("non-finite centroid".into()));
        }
        Ok(Self { k, dim, centroids, seed, inertia: 0.0 })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Training inertia; zero for codebooks loaded from disk.
    pub fn inertia(&self) -> f64 {
        self.inertia
    }

    pub fn centroids(&self) -> &[f64] {
        &self.centroids
    }

    pub fn centroid(&self, j: usize) -> &[f64] {
        &self.centroids[j * self.dim..(j + 1) * self.dim]
    }

    pub fn nearest(&self, x: &[f64]) -> usize {
        nearest(&self.centroids, self.dim, x).0
    }

    pub fn assign(&self, m: &FeatureMatrix) -> Result<ClusterSequence> {
        if m.dim() != self.dim {
            return Err(Error::shape(format!("feature dim {} does not match codebook dim {}", m.dim(), self.dim)));
        }
        let mut x = vec![0.0; self.dim];
        let indexes = m
            .rows()
            .map(|row| {
                x.iter_mut().zip(row).for_each(|(d, &v)| *d = f64::from(v));
                self.nearest(&x)
            })
            .collect();
        Ok(ClusterSequence { indexes })
    }

    /// Serializes to the KMC1 layout; centroids are narrowed to binary32.
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(CODEBOOK_HEADER_LEN + 4 * self.centroids.len());
        out.extend_from_slice(CODEBOOK_MAGIC);
        out.extend_from_slice(&(self.k as u32).to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
        for &c in &self.centroids {
            out.extend_from_slice(&(c as f32).to_le_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != CODEBOOK_MAGIC {
            return Err(Error::format(0, "missing KMC1 magic"));
        }
        if bytes.len() < CODEBOOK_HEADER_LEN {
            return Err(Error::format(bytes.len(), "truncated codebook header"));
        }
        let k = read_u32(bytes, 4) as usize;
        let dim = read_u32(bytes, 8) as usize;
        let seed = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes"));
        if k == 0 || dim == 0 {
            return Err(Error::format(4, format!("empty codebook shape {k}x{dim}")));
        }
        let expected = k
            .checked_mul(dim)
            .and_then(|n| n.checked_mul(4))
            .and_then(|n| n.checked_add(CODEBOOK_HEADER_LEN))
            .ok_or_else(|| Error::format(4, "codebook shape overflows"))?;
        if bytes.len() != expected {
            return Err(Error::format(
                bytes.len().min(expected),
                format!("shape mismatch: {k}x{dim} needs {expected} bytes, file has {}", bytes.len()),
            ));
        }
        let mut centroids = Vec::with_capacity(k * dim);
        for (i, chunk) in bytes[CODEBOOK_HEADER_LEN..].chunks_exact(4).enumerate() {
            let v = f32::from_le_bytes(chunk.try_into().expect("4 bytes"));
            if !v.is_finite() {
                return Err(Error::format(CODEBOOK_HEADER_LEN + 4 * i, "non-finite centroid"));
            }
            centroids.push(f64::from(v));
        }
        Ok(Self { k, dim, centroids, seed, inertia: 0.0 })
    }
}

pub fn save_codebook(cb: &Codebook, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, cb.encode()).map_err(|e| Error::io(path, e))
}

pub fn load_codebook(path: impl AsRef<Path>) -> Result<Codebook> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Codebook::decode(&bytes)
}

#[derive(Debug, Serialize, Deserialize)]
struct ClusterLine {
    id: String,
    indexes: Vec<usize>,
}

pub fn cluster_line(id: &str, seq: &ClusterSequence) -> String {
    serde_json::to_string(&ClusterLine { id: id.to_string(), indexes: seq.indexes.clone() })
        .expect("cluster line serializes")
}

/// Parses cluster-sequence JSON lines. When `k` is given every index must
/// fall in `[0, k)`.
pub fn parse_cluster_sequences(text: &str, k: Option<usize>) -> Result<Vec<(String, ClusterSequence)>> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parsed: ClusterLine = serde_json::from_str(line)
            .map_err(|e| Error::validation(Some(i + 1), format!("bad cluster entry: {e}")))?;
        if let Some(k) = k {
            if let Some(&bad) = parsed.indexes.iter().find(|&&j| j >= k) {
                return Err(Error::validation(Some(i + 1), format!("cluster index {bad} outside [0, {k})")));
            }
        }
        if !seen.insert(parsed.id.clone()) {
            return Err(Error::validation(Some(i + 1), format!("duplicate id {:?}", parsed.id)));
        }
        out.push((parsed.id, ClusterSequence { indexes: parsed.indexes }));
    }
    Ok(out)
}

pub fn load_cluster_sequences(path: impl AsRef<Path>, k: Option<usize>) -> Result<Vec<(String, ClusterSequence)>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_cluster_sequences(&text, k)
}

/// Per-dimension standardization fitted on training frames, applied before
/// clustering when enabled.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn fit(frames: &[f64], dim: usize) -> Self {
        let n = (frames.len() / dim).max(1) as f64;
        let mut mean = vec![0.0; dim];
        for x in frames.chunks_exact(dim) {
            mean.iter_mut().zip(x).for_each(|(m, v)| *m += v);
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; dim];
        for x in frames.chunks_exact(dim) {
            for ((s, v), m) in var.iter_mut().zip(x).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let std = var.into_iter().map(|s| (s / n).sqrt().max(1e-8)).collect();
        Self { mean, std }
    }

    pub fn apply_in_place(&self, frames: &mut [f64]) {
        let dim = self.mean.len();
        for x in frames.chunks_exact_mut(dim) {
            for ((v, m), s) in x.iter_mut().zip(&self.mean).zip(&self.std) {
                *v = (*v - m) / s;
            }
        }
    }

    pub fn apply(&self, m: &FeatureMatrix) -> Result<FeatureMatrix> {
        if m.dim() != self.mean.len() {
            return Err(Error::shape("standardizer dim mismatch"));
        }
        let dim = m.dim();
        let values = m
            .values()
            .iter()
            .enumerate()
            .map(|(i, &v)| ((f64::from(v) - self.mean[i % dim]) / self.std[i % dim]) as f32)
            .collect();
        FeatureMatrix::new(m.num_frames(), dim, values)
    }
}
