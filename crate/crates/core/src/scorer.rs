//! The two scoring architectures.
//!
//! * ASR-free: `H_f = tanh(LayerNorm(Linear(X_f)))` per frame, cluster
//!   embeddings `I`, BLSTM over `[H_f ; I]`.
//! * ASR-based: the same preprocessing over phone-level features `X_s`,
//!   phone embeddings `E`, BLSTM over `[E + H_s ; t]` with `t` the
//!   z-normalized phone duration.
//!
//! Both read out with a masked mean over time of the last BLSTM layer, a
//! dense `2 Dh -> 1` layer and a tanh, so scores live in `(-1, 1)`.

use std::path::Path;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{denormalize_score, PhoneFeatures};
use crate::error::{Error, Result};
use crate::nnet::{self, checkpoint, Graph, Mat, ParamGrads, ParamSet, SeqLayout, Var};

pub const PRE_LINEAR: &str = "pre.linear";
pub const PRE_NORM: &str = "pre.norm";
pub const CLUSTER_EMBEDDING: &str = "cluster_embedding";
pub const PHONE_EMBEDDING: &str = "phone_embedding";
pub const BLSTM: &str = "blstm";
pub const HEAD: &str = "head";

const EMBEDDING_INIT_STD: f64 = 0.1;

fn default_hidden() -> usize {
    32
}

fn default_layers() -> usize {
    2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AsrFreeScorerConfig {
    pub feature_dim: usize,
    #[serde(default = "default_hidden")]
    pub hidden_dim: usize,
    pub cluster_count: usize,
    pub cluster_embed_dim: usize,
    #[serde(default = "default_layers")]
    pub blstm_layers: usize,
}

impl AsrFreeScorerConfig {
    pub fn new(feature_dim: usize) -> Self {
        Self { feature_dim, hidden_dim: 32, cluster_count: 50, cluster_embed_dim: 6, blstm_layers: 2 }
    }

    pub fn blstm_input_dim(&self) -> usize {
        self.hidden_dim + self.cluster_embed_dim
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AsrBasedScorerConfig {
    pub feature_dim: usize,
    #[serde(default = "default_hidden")]
    pub hidden_dim: usize,
    /// Phone inventory, in embedding-row order.
    pub phones: Vec<String>,
    #[serde(default = "default_layers")]
    pub blstm_layers: usize,
    /// Training-split duration statistics (seconds) for z-normalization.
    pub duration_mean: f64,
    pub duration_std: f64,
}

impl AsrBasedScorerConfig {
    pub fn phone_inventory_size(&self) -> usize {
        self.phones.len()
    }

    pub fn phone_index(&self, label: &str) -> Option<usize> {
        self.phones.iter().position(|p| p == label)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant")]
pub enum ScorerConfig {
    #[serde(rename = "asr_free")]
    AsrFree(AsrFreeScorerConfig),
    #[serde(rename = "asr_based")]
    AsrBased(AsrBasedScorerConfig),
}

impl ScorerConfig {
    pub fn variant(&self) -> &'static str {
        match self {
            ScorerConfig::AsrFree(_) => "asr_free",
            ScorerConfig::AsrBased(_) => "asr_based",
        }
    }

    pub fn hidden_dim(&self) -> usize {
        match self {
            ScorerConfig::AsrFree(c) => c.hidden_dim,
            ScorerConfig::AsrBased(c) => c.hidden_dim,
        }
    }

    pub fn layers(&self) -> usize {
        match self {
            ScorerConfig::AsrFree(c) => c.blstm_layers,
            ScorerConfig::AsrBased(c) => c.blstm_layers,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = match self {
            ScorerConfig::AsrFree(c) => {
                [c.feature_dim, c.hidden_dim, c.cluster_count, c.cluster_embed_dim, c.blstm_layers]
                    .iter()
                    .all(|&v| v > 0)
            }
            ScorerConfig::AsrBased(c) => {
                if !(c.duration_std > 0.0 && c.duration_std.is_finite() && c.duration_mean.is_finite()) {
                    return Err(Error::validation(None, "duration statistics must be finite with positive std"));
                }
                [c.feature_dim, c.hidden_dim, c.phones.len(), c.blstm_layers].iter().all(|&v| v > 0)
            }
        };
        if !positive {
            return Err(Error::validation(None, format!("{} scorer dimensions must be positive", self.variant())));
        }
        Ok(())
    }
}

/// Model input for one utterance.
#[derive(Debug, Clone, PartialEq)]
pub enum ScorerInput {
    /// `T x D2` frame features and one cluster index per frame.
    Frames { features: Mat, clusters: Vec<usize> },
    /// `N x D1` phone features, z-normalized durations and phone ids.
    Phones { features: Mat, durations: Vec<f64>, phone_ids: Vec<usize> },
}

impl ScorerInput {
    pub fn len(&self) -> usize {
        match self {
            ScorerInput::Frames { features, .. } | ScorerInput::Phones { features, .. } => features.nrows(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Builds phone-level input from pooled features, mapping labels to
    /// embedding rows and z-normalizing durations with the config's statistics.
    pub fn phones(config: &AsrBasedScorerConfig, pooled: &PhoneFeatures) -> Result<Self> {
        let phone_ids = pooled
            .phones
            .iter()
            .map(|p| config.phone_index(p).ok_or_else(|| Error::validation(None, format!("unknown phone label {p:?}"))))
            .collect::<Result<Vec<_>>>()?;
        let durations = pooled.durations.iter().map(|d| (d - config.duration_mean) / config.duration_std).collect();
        Ok(ScorerInput::Phones { features: pooled.features.clone(), durations, phone_ids })
    }

    fn check(&self, config: &ScorerConfig) -> Result<()> {
        if self.is_empty() {
            return Err(Error::shape("utterance has no frames"));
        }
        match (self, config) {
            (ScorerInput::Frames { features, clusters }, ScorerConfig::AsrFree(c)) => {
                if features.ncols() != c.feature_dim {
                    return Err(Error::shape(format!("feature dim {} != {}", features.ncols(), c.feature_dim)));
                }
                if clusters.len() != features.nrows() {
                    return Err(Error::shape(format!(
                        "{} cluster indexes for {} frames",
                        clusters.len(),
                        features.nrows()
                    )));
                }
                if let Some(&bad) = clusters.iter().find(|&&i| i >= c.cluster_count) {
                    return Err(Error::Domain(format!("cluster index {bad} outside [0, {})", c.cluster_count)));
                }
            }
            (ScorerInput::Phones { features, durations, phone_ids }, ScorerConfig::AsrBased(c)) => {
                if features.ncols() != c.feature_dim {
                    return Err(Error::shape(format!("phone feature dim {} != {}", features.ncols(), c.feature_dim)));
                }
                if durations.len() != features.nrows() || phone_ids.len() != features.nrows() {
                    return Err(Error::shape("phone features, durations and labels disagree in length"));
                }
                if let Some(&bad) = phone_ids.iter().find(|&&i| i >= c.phones.len()) {
                    return Err(Error::Domain(format!("phone id {bad} outside inventory")));
                }
                if durations.iter().any(|d| !d.is_finite()) {
                    return Err(Error::Domain("non-finite duration".into()));
                }
            }
            (_, cfg) => {
                return Err(Error::validation(None, format!("input kind does not match {} scorer", cfg.variant())));
            }
        }
        Ok(())
    }
}

/// Utterance-level prediction in both normalized and rating scales.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    #[serde(rename = "id")]
    pub utterance_id: String,
    pub score_norm: f64,
    pub score_denorm: f64,
}

impl Prediction {
    pub fn new(utterance_id: impl Into<String>, score_norm: f64) -> Self {
        Self { utterance_id: utterance_id.into(), score_norm, score_denorm: denormalize_score(score_norm) }
    }
}

/// Initializes parameters for `config` from `seed`.
pub fn init_params(config: &ScorerConfig, seed: u64) -> Result<ParamSet> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ParamSet::new();
    let dh = config.hidden_dim();
    let (din, blstm_in) = match config {
        ScorerConfig::AsrFree(c) => (c.feature_dim, c.blstm_input_dim()),
        ScorerConfig::AsrBased(c) => (c.feature_dim, dh + 1),
    };
    nnet::init_linear(&mut p, &mut rng, PRE_LINEAR, din, dh)?;
    nnet::init_layer_norm(&mut p, PRE_NORM, dh)?;
    match config {
        ScorerConfig::AsrFree(c) => p.insert(
            CLUSTER_EMBEDDING,
            nnet::init_normal(&mut rng, c.cluster_count, c.cluster_embed_dim, EMBEDDING_INIT_STD),
        )?,
        ScorerConfig::AsrBased(c) => {
            p.insert(PHONE_EMBEDDING, nnet::init_normal(&mut rng, c.phones.len(), dh, EMBEDDING_INIT_STD))?
        }
    }
    nnet::init_bilstm(&mut p, &mut rng, BLSTM, blstm_in, dh, config.layers())?;
    nnet::init_linear(&mut p, &mut rng, HEAD, 2 * dh, 1)?;
    Ok(p)
}

fn pack_rows(layout: &SeqLayout, mats: &[&Mat]) -> Mat {
    let cols = mats[0].ncols();
    let batch = layout.batch();
    let mut out = Array2::zeros((layout.rows(), cols));
    for (b, m) in mats.iter().enumerate() {
        for (t, row) in m.rows().into_iter().enumerate() {
            out.row_mut(t * batch + b).assign(&row);
        }
    }
    out
}

fn pack_values<T: Copy + Default>(layout: &SeqLayout, seqs: &[&[T]]) -> Vec<T> {
    let batch = layout.batch();
    let mut out = vec![T::default(); layout.rows()];
    for (b, s) in seqs.iter().enumerate() {
        for (t, &v) in s.iter().enumerate() {
            out[t * batch + b] = v;
        }
    }
    out
}

/// Records the scorer forward pass for a batch on `g` and returns the
/// `B x 1` prediction node.
pub fn forward_graph(config: &ScorerConfig, params: &ParamSet, g: &mut Graph, inputs: &[&ScorerInput]) -> Result<Var> {
    if inputs.is_empty() {
        return Err(Error::shape("empty batch"));
    }
    for input in inputs {
        input.check(config)?;
    }
    let layout = SeqLayout::new(inputs.iter().map(|i| i.len()).collect())?;
    let blstm_in = match config {
        ScorerConfig::AsrFree(_) => {
            let feats: Vec<&Mat> = inputs
                .iter()
                .map(|i| match i {
                    ScorerInput::Frames { features, .. } => features,
                    ScorerInput::Phones { .. } => unreachable!("checked above"),
                })
                .collect();
            let clusters: Vec<&[usize]> = inputs
                .iter()
                .map(|i| match i {
                    ScorerInput::Frames { clusters, .. } => clusters.as_slice(),
                    ScorerInput::Phones { .. } => unreachable!("checked above"),
                })
                .collect();
            let x = g.input(pack_rows(&layout, &feats));
            let hf = preprocess(g, params, x)?;
            let table = g.param(CLUSTER_EMBEDDING, params)?;
            let emb = g.embedding(table, &pack_values(&layout, &clusters))?;
            g.concat_cols(hf, emb)?
        }
        ScorerConfig::AsrBased(_) => {
            let mut feats = Vec::with_capacity(inputs.len());
            let mut ids = Vec::with_capacity(inputs.len());
            let mut durs = Vec::with_capacity(inputs.len());
            for i in inputs {
                let ScorerInput::Phones { features, durations, phone_ids } = i else { unreachable!("checked above") };
                feats.push(features);
                ids.push(phone_ids.as_slice());
                durs.push(durations.as_slice());
            }
            let x = g.input(pack_rows(&layout, &feats));
            let hs = preprocess(g, params, x)?;
            let table = g.param(PHONE_EMBEDDING, params)?;
            let emb = g.embedding(table, &pack_values(&layout, &ids))?;
            let summed = g.add(emb, hs)?;
            let t = pack_values(&layout, &durs);
            let t = g.input(Array2::from_shape_vec((layout.rows(), 1), t).expect("one column"));
            g.concat_cols(summed, t)?
        }
    };
    let h = g.bilstm_stack(params, BLSTM, blstm_in, &layout, config.layers())?;
    let pooled = g.masked_mean_pool(h, &layout)?;
    let logit = g.linear(params, HEAD, pooled)?;
    Ok(g.tanh(logit))
}

fn preprocess(g: &mut Graph, params: &ParamSet, x: Var) -> Result<Var> {
    let lin = g.linear(params, PRE_LINEAR, x)?;
    let norm = g.layer_norm_named(params, PRE_NORM, lin)?;
    Ok(g.tanh(norm))
}

/// Batch MSE loss, its parameter gradients, and the batch predictions.
pub fn loss_and_grads(
    config: &ScorerConfig,
    params: &ParamSet,
    inputs: &[&ScorerInput],
    targets: &[f64],
) -> Result<(f64, ParamGrads, Vec<f64>)> {
    let mut g = Graph::new();
    let pred = forward_graph(config, params, &mut g, inputs)?;
    let loss = g.mse(pred, targets)?;
    let grads = g.backward(loss)?;
    let preds = g.value(pred).column(0).to_vec();
    Ok((g.scalar(loss), grads.params(), preds))
}

/// A scorer configuration with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Scorer {
    pub config: ScorerConfig,
    pub params: ParamSet,
}

#[derive(Serialize, Deserialize)]
struct ModelHeader {
    scorer: ScorerConfig,
}

impl Scorer {
    pub fn init(config: ScorerConfig, seed: u64) -> Result<Self> {
        let params = init_params(&config, seed)?;
        Ok(Self { config, params })
    }

    pub fn from_parts(config: ScorerConfig, params: ParamSet) -> Result<Self> {
        config.validate()?;
        let reference = init_params(&config, 0)?;
        if !reference.same_layout(&params) {
            return Err(Error::validation(None, "parameters do not match the scorer configuration"));
        }
        Ok(Self { config, params })
    }

    /// Normalized scores for a batch, in input order.
    pub fn forward_batch(&self, inputs: &[&ScorerInput]) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let out = forward_graph(&self.config, &self.params, &mut g, inputs)?;
        Ok(g.value(out).column(0).to_vec())
    }

    pub fn score(&self, input: &ScorerInput) -> Result<f64> {
        Ok(self.forward_batch(&[input])?[0])
    }

    /// Scores utterances in consecutive batches of `batch_size`.
    pub fn score_all(&self, inputs: &[&ScorerInput], batch_size: usize) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(inputs.len());
        for chunk in inputs.chunks(batch_size.max(1)) {
            out.extend(self.forward_batch(chunk)?);
        }
        Ok(out)
    }

    pub fn header_json(&self) -> String {
        serde_json::to_string(&ModelHeader { scorer: self.config.clone() }).expect("config serializes")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        checkpoint::save(path, &self.header_json(), &self.params)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let (header, params) = checkpoint::load(path)?;
        let header: ModelHeader = serde_json::from_str(&header)
            .map_err(|e| Error::validation(None, format!("{}: bad scorer header: {e}", path.display())))?;
        Self::from_parts(header.scorer, params)
    }
}

/// ASR-free forward for one utterance.
pub fn asrfree_forward(
    id: &str,
    features: &crate::corpus::FeatureMatrix,
    clusters: &crate::codebook::ClusterSequence,
    scorer: &Scorer,
) -> Result<Prediction> {
    let input = ScorerInput::Frames { features: features.to_array(), clusters: clusters.indexes.clone() };
    Ok(Prediction::new(id, scorer.score(&input)?))
}

/// ASR-based forward for one utterance from pooled phone features.
pub fn asrbased_forward(id: &str, pooled: &PhoneFeatures, scorer: &Scorer) -> Result<Prediction> {
    let ScorerConfig::AsrBased(cfg) = &scorer.config else {
        return Err(Error::validation(None, "asr_based forward needs an asr_based scorer"));
    };
    let input = ScorerInput::phones(cfg, pooled)?;
    Ok(Prediction::new(id, scorer.score(&input)?))
}

/// Per-utterance predictions computed in padded batches.
pub fn predict_batch(scorer: &Scorer, items: &[(String, ScorerInput)], batch_size: usize) -> Result<Vec<Prediction>> {
    let inputs: Vec<&ScorerInput> = items.iter().map(|(_, i)| i).collect();
    let scores = scorer.score_all(&inputs, batch_size)?;
    Ok(items.iter().zip(scores).map(|((id, _), s)| Prediction::new(id.clone(), s)).collect())
}

/// Mean and standard deviation of durations (seconds) over a set of
/// pooled utterances; std falls back to 1 when degenerate.
pub fn duration_stats<'a>(pooled: impl IntoIterator<Item = &'a PhoneFeatures>) -> (f64, f64) {
    let all: Vec<f64> = pooled.into_iter().flat_map(|p| p.durations.iter().copied()).collect();
    if all.is_empty() {
        return (0.0, 1.0);
    }
    let n = all.len() as f64;
    let mean = all.iter().sum::<f64>() / n;
    let var = all.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / n;
    let std = if var > 0.0 { var.sqrt() } else { 1.0 };
    (mean, std)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_free() -> ScorerConfig {
        ScorerConfig::AsrFree(AsrFreeScorerConfig {
            feature_dim: 8,
            hidden_dim: 4,
            cluster_count: 3,
            cluster_embed_dim: 2,
            blstm_layers: 2,
        })
    }

    #[test]
    fn default_config_matches_published_setup() {
        let c = AsrFreeScorerConfig::new(1024);
        assert_eq!((c.hidden_dim, c.cluster_count, c.cluster_embed_dim, c.blstm_layers), (32, 50, 6, 2));
        assert_eq!(c.blstm_input_dim(), 38);
    }

    #[test]
    fn config_json_carries_variant_tag() {
        let json = serde_json::to_value(tiny_free()).unwrap();
        assert_eq!(json["variant"], "asr_free");
        let back: ScorerConfig = serde_json::from_value(json).unwrap();
        assert_eq!(back, tiny_free());
    }

    #[test]
    fn zero_head_gives_tanh_of_bias() {
        let mut s = Scorer::init(tiny_free(), 3).unwrap();
        s.params.get_mut("head.weight").unwrap().fill(0.0);
        s.params.get_mut("head.bias").unwrap().fill(0.0);
        let x = ScorerInput::Frames { features: Array2::from_elem((5, 8), 0.3), clusters: vec![0, 1, 2, 1, 0] };
        assert_eq!(s.score(&x).unwrap(), 0.0);
        s.params.get_mut("head.bias").unwrap().fill(0.4);
        assert_eq!(s.score(&x).unwrap(), 0.4f64.tanh());
    }

    #[test]
    fn rejects_mismatched_inputs() {
        let s = Scorer::init(tiny_free(), 3).unwrap();
        let short = ScorerInput::Frames { features: Array2::zeros((3, 8)), clusters: vec![0, 1] };
        assert!(matches!(s.score(&short), Err(Error::Shape(_))));
        let wide = ScorerInput::Frames { features: Array2::zeros((2, 7)), clusters: vec![0, 1] };
        assert!(s.score(&wide).is_err());
        let out_of_range = ScorerInput::Frames { features: Array2::zeros((2, 8)), clusters: vec![0, 3] };
        assert!(s.score(&out_of_range).is_err());
        let phones =
            ScorerInput::Phones { features: Array2::zeros((2, 8)), durations: vec![0.0; 2], phone_ids: vec![0; 2] };
        assert!(matches!(s.score(&phones), Err(Error::Validation { .. })));
    }

    #[test]
    fn checkpoint_round_trip_and_layout_check() {
        let s = Scorer::init(tiny_free(), 9).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckp");
        s.save(&path).unwrap();
        assert_eq!(Scorer::load(&path).unwrap(), s);
        let mut other = tiny_free();
        if let ScorerConfig::AsrFree(c) = &mut other {
            c.hidden_dim = 5;
        }
        assert!(Scorer::from_parts(other, s.params.clone()).is_err());
    }

    #[test]
    fn duration_stats_fallback() {
        assert_eq!(duration_stats(std::iter::empty()), (0.0, 1.0));
    }
}
