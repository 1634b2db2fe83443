//! Independent reference implementations used as test oracles. Everything
//! here is written with plain loops over `Vec`s and shares no code with
//! the library beyond reading parameter tensors by name.

#![allow(dead_code)]

use std::collections::HashMap;

use fluency::codebook::{fit_kmeans, ClusterSequence, KMeansParams};
use fluency::corpus::{FeatureMatrix, PhoneAlignment, PhoneInventory, UtteranceRecord};
use fluency::pipeline::{Corpus, SideInputs};
use fluency::scorer::Scorer;
use fluency::synth::{generate_in_memory, SynthConfig};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub type Rows = Vec<Vec<f64>>;

/// Single-pass textbook Pearson formula.
pub fn pcc_direct(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (mut sx, mut sy, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for (&a, &b) in x.iter().zip(y) {
        sx += a;
        sy += b;
        sxx += a * a;
        syy += b * b;
        sxy += a * b;
    }
    (n * sxy - sx * sy) / ((n * sxx - sx * sx).sqrt() * (n * syy - sy * sy).sqrt())
}

pub fn sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest centroid with lowest-index tie-break.
pub fn nearest(c: &[Vec<f64>], x: &[f64]) -> usize {
    let mut best = 0;
    for j in 1..c.len() {
        if sq(x, &c[j]) < sq(x, &c[best]) {
            best = j;
        }
    }
    best
}

/// One reassignment followed by one centroid recomputation. Empty
/// clusters keep their centroid.
pub fn lloyd_round(points: &[Vec<f64>], centroids: &[Vec<f64>]) -> (Vec<usize>, Vec<Vec<f64>>) {
    let assign: Vec<usize> = points.iter().map(|p| nearest(centroids, p)).collect();
    let dim = points[0].len();
    let mut next = centroids.to_vec();
    for (j, c) in next.iter_mut().enumerate() {
        let members: Vec<&Vec<f64>> = points.iter().zip(&assign).filter(|(_, &a)| a == j).map(|(p, _)| p).collect();
        if !members.is_empty() {
            *c = (0..dim).map(|d| members.iter().map(|m| m[d]).sum::<f64>() / members.len() as f64).collect();
        }
    }
    (assign, next)
}

/// Ragged little K-means instances: a few blobs plus duplicates.
pub fn random_instance(rng: &mut ChaCha8Rng, max_points: usize) -> (Vec<Vec<f64>>, usize) {
    let k = rng.random_range(1..=3);
    let n = rng.random_range(k.max(2)..=max_points);
    let dim = rng.random_range(1..=3);
    let blobs: Vec<Vec<f64>> =
        (0..rng.random_range(1..=4)).map(|_| (0..dim).map(|_| rng.random_range(-5.0..5.0)).collect()).collect();
    let mut points: Vec<Vec<f64>> = Vec::with_capacity(n);
    for _ in 0..n {
        if !points.is_empty() && rng.random_bool(0.1) {
            let dup = points[rng.random_range(0..points.len())].clone();
            points.push(dup);
        } else {
            let b = &blobs[rng.random_range(0..blobs.len())];
            points.push(b.iter().map(|c| c + rng.random_range(-1.0..1.0)).collect());
        }
    }
    (points, k)
}

pub fn inertia(points: &[Vec<f64>], centroids: &[Vec<f64>]) -> f64 {
    points.iter().map(|p| sq(p, &centroids[nearest(centroids, p)])).sum()
}

/// Minimum within-cluster sum of squares over every assignment of the
/// points to at most `k` labels.
pub fn exhaustive_best_inertia(points: &[Vec<f64>], k: usize) -> f64 {
    let n = points.len();
    let dim = points[0].len();
    let mut labels = vec![0usize; n];
    let mut best = f64::INFINITY;
    loop {
        let mut cost = 0.0;
        for j in 0..k {
            let members: Vec<&Vec<f64>> = points.iter().zip(&labels).filter(|(_, &l)| l == j).map(|(p, _)| p).collect();
            if members.is_empty() {
                continue;
            }
            let mean: Vec<f64> =
                (0..dim).map(|d| members.iter().map(|m| m[d]).sum::<f64>() / members.len() as f64).collect();
            cost += members.iter().map(|m| sq(m, &mean)).sum::<f64>();
        }
        best = best.min(cost);
        let mut i = 0;
        loop {
            if i == n {
                return best;
            }
            labels[i] += 1;
            if labels[i] < k {
                break;
            }
            labels[i] = 0;
            i += 1;
        }
    }
}

fn rows_of(s: &Scorer, name: &str) -> Rows {
    let m = s.params.get(name).unwrap_or_else(|| panic!("missing {name}"));
    m.rows().into_iter().map(|r| r.to_vec()).collect()
}

fn affine(x: &Rows, w: &Rows, b: &[f64]) -> Rows {
    x.iter()
        .map(|row| (0..b.len()).map(|j| b[j] + row.iter().zip(w).map(|(v, wr)| v * wr[j]).sum::<f64>()).collect())
        .collect()
}

fn logistic(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

fn layer_norm(x: &Rows, gamma: &[f64], beta: &[f64], eps: f64) -> Rows {
    x.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            row.iter().enumerate().map(|(j, v)| (v - mean) / (var + eps).sqrt() * gamma[j] + beta[j]).collect()
        })
        .collect()
}

fn lstm(s: &Scorer, prefix: &str, x: &Rows, reverse: bool) -> Rows {
    let w_ih = rows_of(s, &format!("{prefix}.w_ih"));
    let w_hh = rows_of(s, &format!("{prefix}.w_hh"));
    let bias = rows_of(s, &format!("{prefix}.bias")).remove(0);
    let hdim = w_hh.len();
    let t_len = x.len();
    let mut h = vec![0.0; hdim];
    let mut c = vec![0.0; hdim];
    let mut out = vec![vec![0.0; hdim]; t_len];
    for step in 0..t_len {
        let t = if reverse { t_len - 1 - step } else { step };
        let mut pre = bias.clone();
        for (k, p) in pre.iter_mut().enumerate() {
            for (d, v) in x[t].iter().enumerate() {
                *p += v * w_ih[d][k];
            }
            for (d, v) in h.iter().enumerate() {
                *p += v * w_hh[d][k];
            }
        }
        for j in 0..hdim {
            let i = logistic(pre[j]);
            let f = logistic(pre[hdim + j]);
            let g = pre[2 * hdim + j].tanh();
            let o = logistic(pre[3 * hdim + j]);
            c[j] = f * c[j] + i * g;
            h[j] = o * c[j].tanh();
        }
        out[t] = h.clone();
    }
    out
}

fn blstm_head(s: &Scorer, mut x: Rows, layers: usize) -> f64 {
    for l in 0..layers {
        let f = lstm(s, &format!("blstm.l{l}.fwd"), &x, false);
        let b = lstm(s, &format!("blstm.l{l}.bwd"), &x, true);
        x = f
            .into_iter()
            .zip(b)
            .map(|(mut a, b)| {
                a.extend(b);
                a
            })
            .collect();
    }
    let width = x[0].len();
    let pooled: Vec<f64> = (0..width).map(|j| x.iter().map(|r| r[j]).sum::<f64>() / x.len() as f64).collect();
    let w = rows_of(s, "head.weight");
    let b = rows_of(s, "head.bias")[0][0];
    (b + pooled.iter().zip(&w).map(|(p, wr)| p * wr[0]).sum::<f64>()).tanh()
}

fn pre(s: &Scorer, x: &Rows) -> Rows {
    let lin = affine(x, &rows_of(s, "pre.linear.weight"), &rows_of(s, "pre.linear.bias")[0]);
    let ln = layer_norm(&lin, &rows_of(s, "pre.norm.gamma")[0], &rows_of(s, "pre.norm.beta")[0], 1e-5);
    ln.into_iter().map(|r| r.into_iter().map(f64::tanh).collect()).collect()
}

pub fn oracle_asr_free(s: &Scorer, features: &Rows, clusters: &[usize], layers: usize) -> f64 {
    let table = rows_of(s, "cluster_embedding");
    let x: Rows = pre(s, features)
        .into_iter()
        .zip(clusters)
        .map(|(mut h, &c)| {
            h.extend(&table[c]);
            h
        })
        .collect();
    blstm_head(s, x, layers)
}

/// `durations` already z-normalized.
pub fn oracle_asr_based(s: &Scorer, features: &Rows, durations: &[f64], phones: &[usize], layers: usize) -> f64 {
    let table = rows_of(s, "phone_embedding");
    let x: Rows = pre(s, features)
        .into_iter()
        .zip(phones)
        .zip(durations)
        .map(|((h, &p), &d)| {
            let mut r: Vec<f64> = h.iter().zip(&table[p]).map(|(a, b)| a + b).collect();
            r.push(d);
            r
        })
        .collect();
    blstm_head(s, x, layers)
}

pub fn to_rows(m: &ndarray::Array2<f64>) -> Rows {
    m.rows().into_iter().map(|r| r.to_vec()).collect()
}

/// A small synthetic corpus in memory, its alignments, inventory and
/// a K-means assignment with `k = n_speech_clusters + 1`.
pub struct SmallCorpus {
    pub corpus: Corpus,
    pub side: SideInputs,
}

pub fn small_corpus(config: &SynthConfig) -> SmallCorpus {
    let (_, utts) = generate_in_memory(config).unwrap();
    let records: Vec<UtteranceRecord> = utts
        .iter()
        .map(|u| UtteranceRecord {
            id: u.id.clone(),
            score_raw: u.score_raw,
            split: u.split,
            feature_path: format!("features/{}.fmx", u.id).into(),
            alignment: None,
        })
        .collect();
    let features: Vec<FeatureMatrix> = utts.iter().map(|u| u.features.clone()).collect();
    let corpus = Corpus { records, features, frame_period: config.frame_period };
    let k = config.n_speech_clusters + 1;
    let frames: Vec<f64> = corpus
        .split_indices(fluency::corpus::Split::Train)
        .iter()
        .flat_map(|&i| corpus.features[i].values().iter().map(|&v| f64::from(v)))
        .collect();
    let fit = fit_kmeans(&frames, config.feature_dim, &KMeansParams { k, seed: 0, ..KMeansParams::default() }).unwrap();
    let clusters: HashMap<String, ClusterSequence> =
        utts.iter().map(|u| (u.id.clone(), fit.codebook.assign(&u.features).unwrap())).collect();
    let alignments: HashMap<String, PhoneAlignment> =
        utts.iter().map(|u| (u.id.clone(), u.alignment.clone())).collect();
    let inventory: PhoneInventory = config.inventory();
    SmallCorpus {
        corpus,
        side: SideInputs {
            clusters: Some(clusters),
            cluster_count: Some(k),
            alignments: Some(alignments),
            inventory: Some(inventory),
        },
    }
}

/// Files produced by [`run_chain`].
pub struct ChainOutputs {
    pub layout: fluency::synth::CorpusLayout,
    pub codebook: std::path::PathBuf,
    pub clusters: std::path::PathBuf,
    pub checkpoint: std::path::PathBuf,
    pub predictions: std::path::PathBuf,
    pub eval: std::path::PathBuf,
    pub report: fluency::eval::EvalReport,
    pub scorer: Scorer,
    pub test_examples: Vec<fluency::training::Example>,
}

/// synth → kmeans-train → kmeans-assign → train → predict(test) → eval,
/// through the library with every artifact written under `dir`.
pub fn run_chain(
    dir: &std::path::Path,
    synth: &SynthConfig,
    k: usize,
    variant: fluency::pipeline::Variant,
    train_config: fluency::training::TrainConfig,
    model: &fluency::pipeline::ModelOptions,
) -> fluency::Result<ChainOutputs> {
    use fluency::corpus::Split;
    use fluency::pipeline::*;

    let layout = fluency::synth::generate(synth, dir.join("corpus"))?;
    let corpus = load_corpus(layout.manifest(), None)?;
    let opts =
        KMeansOptions { params: KMeansParams { k, seed: 0, ..KMeansParams::default() }, ..KMeansOptions::default() };
    let (fit, std) = kmeans_train(&corpus, &opts)?;
    let codebook = dir.join("codebook.kmc");
    save_codebook_with(&fit.codebook, std.as_ref(), &codebook)?;
    let (cb, std) = load_codebook_with(&codebook)?;
    let seqs = kmeans_assign(&corpus, &cb, std.as_ref())?;
    let clusters = dir.join("clusters.jsonl");
    write_text(&clusters, cluster_sequences_text(&seqs))?;

    let inventory = fluency::corpus::PhoneInventory::load(layout.phones())?;
    let side = SideInputs {
        clusters: Some(fluency::codebook::load_cluster_sequences(&clusters, Some(cb.k()))?.into_iter().collect()),
        cluster_count: Some(cb.k()),
        alignments: Some(load_checked_alignments(&corpus, layout.alignments(), &inventory)?),
        inventory: Some(inventory),
    };
    let config = scorer_config(variant, &corpus, &side, model)?;
    let train = examples(&corpus, &config, &side, Some(Split::Train))?;
    let dev = examples(&corpus, &config, &side, Some(Split::Dev))?;
    let test = examples(&corpus, &config, &side, Some(Split::Test))?;
    let checkpoint = dir.join("scorer.ckpt");
    let bs = train_config.batch_size;
    train_scorer(config, train_config, &train, &dev, &TrainOutputs::beside(&checkpoint), false)?;

    let scorer = Scorer::load(&checkpoint)?;
    let preds = predict(&scorer, &test, bs)?;
    let predictions = dir.join("predictions.jsonl");
    write_text(&predictions, predictions_text(&preds))?;
    let preds = parse_predictions(
        &std::fs::read_to_string(&predictions)
            .map_err(|source| fluency::Error::Io { path: predictions.clone(), source })?,
    )?;
    let report = evaluate_predictions(&preds, &corpus.records, Split::Test)?;
    let eval = dir.join("eval.json");
    write_text(&eval, eval_report_json(&report))?;
    Ok(ChainOutputs { layout, codebook, clusters, checkpoint, predictions, eval, report, scorer, test_examples: test })
}
