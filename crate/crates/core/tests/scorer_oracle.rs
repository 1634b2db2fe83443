mod common;

use common::{oracle_asr_based, oracle_asr_free, to_rows};
use fluency::scorer::{AsrBasedScorerConfig, AsrFreeScorerConfig, Scorer, ScorerConfig, ScorerInput};
use ndarray::Array2;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_mat(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-1.5..1.5))
}

fn free_scorer(seed: u64, layers: usize) -> Scorer {
    let config = ScorerConfig::AsrFree(AsrFreeScorerConfig {
        feature_dim: 5,
        hidden_dim: 7,
        cluster_count: 4,
        cluster_embed_dim: 3,
        blstm_layers: layers,
    });
    Scorer::init(config, seed).unwrap()
}

fn based_scorer(seed: u64) -> Scorer {
    let config = ScorerConfig::AsrBased(AsrBasedScorerConfig {
        feature_dim: 5,
        hidden_dim: 6,
        phones: ["sil", "a", "b", "c"].map(String::from).to_vec(),
        blstm_layers: 2,
        duration_mean: 0.1,
        duration_std: 0.05,
    });
    Scorer::init(config, seed).unwrap()
}

fn free_inputs(rng: &mut ChaCha8Rng, n: usize) -> Vec<ScorerInput> {
    (0..n)
        .map(|_| {
            let t = rng.random_range(1..=12);
            ScorerInput::Frames {
                features: random_mat(rng, t, 5),
                clusters: (0..t).map(|_| rng.random_range(0..4)).collect(),
            }
        })
        .collect()
}

fn oracle(s: &Scorer, input: &ScorerInput) -> f64 {
    match input {
        ScorerInput::Frames { features, clusters } => {
            oracle_asr_free(s, &to_rows(features), clusters, s.config.layers())
        }
        ScorerInput::Phones { features, durations, phone_ids } => {
            oracle_asr_based(s, &to_rows(features), durations, phone_ids, s.config.layers())
        }
    }
}

#[test]
fn asr_free_forward_matches_straight_line_oracle() {
    for (seed, layers) in [(0, 1), (1, 2), (2, 3)] {
        let s = free_scorer(seed, layers);
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        let inputs = free_inputs(&mut rng, 6);
        let refs: Vec<&ScorerInput> = inputs.iter().collect();
        let batch = s.forward_batch(&refs).unwrap();
        for (input, got) in inputs.iter().zip(batch) {
            let want = oracle(&s, input);
            assert!((got - want).abs() < 1e-12, "layers {layers}: {got} vs {want}");
        }
    }
}

#[test]
fn asr_based_forward_matches_straight_line_oracle() {
    let s = based_scorer(3);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let inputs: Vec<ScorerInput> = (0..5)
        .map(|_| {
            let n = rng.random_range(1..=9);
            ScorerInput::Phones {
                features: random_mat(&mut rng, n, 5),
                durations: (0..n).map(|_| rng.random_range(-2.0..2.0)).collect(),
                phone_ids: (0..n).map(|_| rng.random_range(0..4)).collect(),
            }
        })
        .collect();
    let refs: Vec<&ScorerInput> = inputs.iter().collect();
    let batch = s.forward_batch(&refs).unwrap();
    for (input, got) in inputs.iter().zip(batch) {
        let want = oracle(&s, input);
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
    }
}

#[test]
fn outputs_lie_in_open_unit_interval() {
    let s = free_scorer(9, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for input in free_inputs(&mut rng, 10) {
        let y = s.score(&input).unwrap();
        assert!(y > -1.0 && y < 1.0);
    }
}

#[test]
fn mismatched_inputs_are_rejected() {
    let s = free_scorer(0, 2);
    let wrong_dim = ScorerInput::Frames { features: Array2::zeros((3, 4)), clusters: vec![0; 3] };
    assert!(s.score(&wrong_dim).is_err());
    let bad_index = ScorerInput::Frames { features: Array2::zeros((3, 5)), clusters: vec![0, 4, 1] };
    assert!(s.score(&bad_index).is_err());
    let short = ScorerInput::Frames { features: Array2::zeros((3, 5)), clusters: vec![0; 2] };
    assert!(s.score(&short).is_err());
    let phones =
        ScorerInput::Phones { features: Array2::zeros((2, 5)), durations: vec![0.0; 2], phone_ids: vec![0; 2] };
    assert!(s.score(&phones).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    /// Any grouping of the same utterances into batches gives the same scores.
    #[test]
    fn batching_is_invariant(seed in 0u64..1000, n in 2usize..9, bs in 1usize..6) {
        let s = free_scorer(seed, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs = free_inputs(&mut rng, n);
        let refs: Vec<&ScorerInput> = inputs.iter().collect();
        let alone: Vec<f64> = inputs.iter().map(|i| s.score(i).unwrap()).collect();
        let grouped = s.score_all(&refs, bs).unwrap();
        for (a, b) in alone.iter().zip(&grouped) {
            prop_assert!((a - b).abs() < 1e-10);
        }
    }
}
