mod common;

use common::{exhaustive_best_inertia, inertia, lloyd_round, random_instance};
use fluency::codebook::{fit_kmeans, KMeansParams};
use fluency::corpus::FeatureMatrix;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn centroids_of(fit: &fluency::codebook::KMeansFit) -> Vec<Vec<f64>> {
    let cb = &fit.codebook;
    (0..cb.k()).map(|j| cb.centroid(j).to_vec()).collect()
}

fn fit(points: &[Vec<f64>], k: usize, seed: u64) -> fluency::codebook::KMeansFit {
    let flat: Vec<f64> = points.iter().flatten().copied().collect();
    fit_kmeans(&flat, points[0].len(), &KMeansParams { k, seed, ..KMeansParams::default() }).unwrap()
}

#[test]
fn four_point_example() {
    let points = vec![vec![0.0, 0.0], vec![0.0, 1.0], vec![10.0, 10.0], vec![10.0, 11.0]];
    for seed in 0..10 {
        let f = fit(&points, 2, seed);
        let mut c = centroids_of(&f);
        c.sort_by(|a, b| a[0].total_cmp(&b[0]));
        assert_eq!(c, vec![vec![0.0, 0.5], vec![10.0, 10.5]]);
        assert_eq!(f.codebook.inertia(), 1.0);
    }
    assert_eq!(exhaustive_best_inertia(&points, 2), 1.0);
}

#[test]
fn single_cluster_of_copies() {
    let points = vec![vec![3.0, 3.0]; 5];
    let f = fit(&points, 1, 0);
    assert_eq!(f.codebook.centroid(0), &[3.0, 3.0]);
    assert_eq!(f.codebook.inertia(), 0.0);
}

#[test]
fn fifty_instances_are_lloyd_fixed_points() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for case in 0..50 {
        let (points, k) = random_instance(&mut rng, 16);
        let f = fit(&points, k, case);
        let c = centroids_of(&f);
        let (assign, next) = lloyd_round(&points, &c);
        assert_eq!(assign, f.assignments, "case {case}");
        for (a, b) in c.iter().zip(&next) {
            for (x, y) in a.iter().zip(b) {
                assert!((x - y).abs() <= 1e-12, "case {case}: centroid moved {x} -> {y}");
            }
        }
        for w in f.inertia_trace.windows(2) {
            assert!(w[1] <= w[0] + 1e-12, "case {case}: inertia rose {:?}", f.inertia_trace);
        }
        assert!((f.codebook.inertia() - inertia(&points, &c)).abs() < 1e-9);
    }
}

#[test]
fn fitted_inertia_is_bounded_below_by_exhaustive_optimum() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut optimal = 0;
    for case in 0..50 {
        let (points, k) = random_instance(&mut rng, 10);
        let best = exhaustive_best_inertia(&points, k);
        let got = fit(&points, k, case).codebook.inertia();
        assert!(got >= best - 1e-9, "case {case}: {got} below optimum {best}");
        if got <= best + 1e-9 {
            optimal += 1;
        }
    }
    // Lloyd's only guarantees a local optimum; 43/50 reach the global one
    // with the current seeding. Guard against a regression in seeding.
    eprintln!("{optimal}/50 instances at the exhaustive optimum");
    assert!(optimal >= 25, "only {optimal}/50 optimal");
}

#[test]
fn assignment_matches_oracle_nearest() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (points, k) = random_instance(&mut rng, 16);
    let f = fit(&points, k, 0);
    let c = centroids_of(&f);
    let rows: Vec<Vec<f32>> = points.iter().map(|p| p.iter().map(|&v| v as f32).collect()).collect();
    let m = FeatureMatrix::from_rows(&rows).unwrap();
    let seq = f.codebook.assign(&m).unwrap();
    let want: Vec<usize> = points
        .iter()
        .map(|p| common::nearest(&c, &p.iter().map(|&v| f64::from(v as f32)).collect::<Vec<_>>()))
        .collect();
    assert_eq!(seq.indexes, want);
}

#[test]
fn same_seed_same_codebook_bytes() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (points, k) = random_instance(&mut rng, 16);
    assert_eq!(fit(&points, k, 3).codebook.encode(), fit(&points, k, 3).codebook.encode());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn inertia_trace_never_increases(seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (points, k) = random_instance(&mut rng, 40);
        let f = fit(&points, k, seed);
        for w in f.inertia_trace.windows(2) {
            prop_assert!(w[1] <= w[0] + 1e-12);
        }
    }
}
