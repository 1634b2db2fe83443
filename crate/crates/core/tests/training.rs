mod common;

use common::small_corpus;
use fluency::corpus::Split;
use fluency::pipeline::{examples, scorer_config, ModelOptions, Variant};
use fluency::scorer::{loss_and_grads, Scorer, ScorerInput};
use fluency::synth::SynthConfig;
use fluency::training::{train, Example, Monitor, StopReason, TrainConfig, Trainer};
use fluency::Error;

fn tiny_synth() -> SynthConfig {
    SynthConfig {
        n_train: 24,
        n_dev: 8,
        n_test: 8,
        feature_dim: 4,
        n_speech_clusters: 3,
        min_len: 20,
        max_len: 60,
        seed: 5,
        ..SynthConfig::default()
    }
}

const MODEL: ModelOptions = ModelOptions { hidden_dim: 8, blstm_layers: 1, cluster_embed_dim: 3 };

struct Setup {
    config: fluency::scorer::ScorerConfig,
    train: Vec<Example>,
    dev: Vec<Example>,
}

fn setup(variant: Variant) -> Setup {
    let c = small_corpus(&tiny_synth());
    let config = scorer_config(variant, &c.corpus, &c.side, &MODEL).unwrap();
    let train = examples(&c.corpus, &config, &c.side, Some(Split::Train)).unwrap();
    let dev = examples(&c.corpus, &config, &c.side, Some(Split::Dev)).unwrap();
    Setup { config, train, dev }
}

fn train_config(lr: f64, max_epochs: usize, patience: usize) -> TrainConfig {
    TrainConfig { lr, batch_size: 8, max_epochs, patience, seed: 3, ..TrainConfig::default() }
}

#[test]
fn zero_learning_rate_is_a_null_update() {
    let s = setup(Variant::AsrFree);
    let init = Scorer::init(s.config.clone(), 0).unwrap();
    let mut t = Trainer::new(train_config(0.0, 3, 3), init.clone()).unwrap();
    t.run(&s.train, &s.dev, None).unwrap();
    assert_eq!(t.scorer().params, init.params);
    let devs: Vec<f64> = t.report().epochs.iter().map(|e| e.dev_loss).collect();
    assert!(devs.windows(2).all(|w| w[0] == w[1]), "{devs:?}");
}

#[test]
fn zero_learning_rate_with_patience_one_stops_after_epoch_two() {
    let s = setup(Variant::AsrFree);
    let (_, report) =
        train(train_config(0.0, 10, 1), Scorer::init(s.config.clone(), 0).unwrap(), &s.train, &s.dev).unwrap();
    assert_eq!(report.last_epoch(), 2);
    assert_eq!(report.stop_reason, Some(StopReason::EarlyStopping));
    assert_eq!(report.best_epoch, Some(1));
}

#[test]
fn one_repeated_utterance_is_memorized() {
    let s = setup(Variant::AsrFree);
    let one: Vec<Example> = (0..32).map(|_| s.train[0].clone()).collect();
    let config = train_config(TrainConfig::default().lr, 50, 50);
    let (_, report) = train(config, Scorer::init(s.config.clone(), 1).unwrap(), &one, &one).unwrap();
    let losses: Vec<f64> = report.epochs.iter().map(|e| e.train_loss).collect();
    let last = *losses.last().unwrap();
    assert!(last < 1e-3, "final train loss {last}");
    // Monotone down to the threshold; past it, Adam momentum makes the
    // loss bounce around a minimum that is already near zero.
    let first_below = losses.iter().position(|&l| l < 1e-3).unwrap();
    assert!(losses[..=first_below].windows(2).all(|w| w[1] <= w[0]), "{losses:?}");
}

#[test]
fn single_batch_overfit_drops_mse_a_hundredfold() {
    for variant in [Variant::AsrFree, Variant::AsrBased] {
        let s = setup(variant);
        let batch: Vec<&ScorerInput> = s.train[..8].iter().map(|e| &e.input).collect();
        let targets: Vec<f64> = s.train[..8].iter().map(|e| e.target).collect();
        let mut t = Trainer::new(train_config(0.01, 1, 1), Scorer::init(s.config.clone(), 2).unwrap()).unwrap();
        let initial = t.step(&batch, &targets).unwrap();
        for _ in 1..200 {
            t.step(&batch, &targets).unwrap();
        }
        let (after, _, _) = loss_and_grads(&s.config, &t.scorer().params, &batch, &targets).unwrap();
        assert!(after * 100.0 <= initial, "{variant:?}: {initial} -> {after}");
    }
}

#[test]
fn padded_batch_loss_is_mean_of_single_losses() {
    let s = setup(Variant::AsrFree);
    let scorer = Scorer::init(s.config.clone(), 4).unwrap();
    let items = &s.train[..7];
    let inputs: Vec<&ScorerInput> = items.iter().map(|e| &e.input).collect();
    let targets: Vec<f64> = items.iter().map(|e| e.target).collect();
    assert!(inputs.iter().any(|i| i.len() != inputs[0].len()), "want mixed lengths");
    let (batch_loss, _, _) = loss_and_grads(&s.config, &scorer.params, &inputs, &targets).unwrap();
    let singles: f64 = items
        .iter()
        .map(|e| loss_and_grads(&s.config, &scorer.params, &[&e.input], &[e.target]).unwrap().0)
        .sum::<f64>()
        / items.len() as f64;
    assert!((batch_loss - singles).abs() < 1e-10, "{batch_loss} vs {singles}");
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let s = setup(Variant::AsrFree);
    let config = train_config(0.005, 5, 5);
    let mut full = Trainer::new(config.clone(), Scorer::init(s.config.clone(), 0).unwrap()).unwrap();
    full.run(&s.train, &s.dev, None).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let state = dir.path().join("state.ckpt");
    let mut first = Trainer::new(config, Scorer::init(s.config.clone(), 0).unwrap()).unwrap();
    first.run(&s.train, &s.dev, Some(3)).unwrap();
    first.save(&state).unwrap();
    drop(first);
    let mut resumed = Trainer::resume(&state, &s.config).unwrap();
    assert_eq!(resumed.epochs_done(), 3);
    resumed.run(&s.train, &s.dev, None).unwrap();

    assert_eq!(resumed.report().epochs[4].dev_loss, full.report().epochs[4].dev_loss);
    assert_eq!(resumed.report().to_json_lines(), full.report().to_json_lines());
    assert_eq!(resumed.scorer().params, full.scorer().params);
}

#[test]
fn resume_with_other_scorer_config_is_rejected() {
    let s = setup(Variant::AsrFree);
    let dir = tempfile::tempdir().unwrap();
    let state = dir.path().join("state.ckpt");
    let mut t = Trainer::new(train_config(0.005, 2, 2), Scorer::init(s.config.clone(), 0).unwrap()).unwrap();
    t.run(&s.train, &s.dev, Some(1)).unwrap();
    t.save(&state).unwrap();
    let other = setup(Variant::AsrBased).config;
    assert!(matches!(Trainer::resume(&state, &other), Err(Error::Validation { .. })));
}

#[test]
fn identical_runs_give_identical_reports_and_params() {
    let s = setup(Variant::AsrBased);
    let run =
        || train(train_config(0.005, 3, 3), Scorer::init(s.config.clone(), 8).unwrap(), &s.train, &s.dev).unwrap();
    let (a, ra) = run();
    let (b, rb) = run();
    assert_eq!(ra.to_json_lines(), rb.to_json_lines());
    assert_eq!(a.params, b.params);
}

#[test]
fn early_stopping_returns_the_best_epoch() {
    for monitor in [Monitor::DevMse, Monitor::DevPcc] {
        let s = setup(Variant::AsrFree);
        let config = TrainConfig { monitor, ..train_config(0.02, 8, 3) };
        let (best, report) = train(config, Scorer::init(s.config.clone(), 6).unwrap(), &s.train, &s.dev).unwrap();
        let b = report.best().unwrap();
        let (dev_loss, dev_pcc) = fluency::training::evaluate_examples(&best, &s.dev, 8).unwrap();
        assert_eq!(dev_loss, b.dev_loss);
        assert_eq!(dev_pcc, b.dev_pcc);
        for e in &report.epochs {
            match monitor {
                Monitor::DevMse => assert!(b.dev_loss <= e.dev_loss),
                Monitor::DevPcc => assert!(b.dev_pcc.unwrap() >= e.dev_pcc.unwrap()),
            }
        }
        assert!(report.best_epoch.unwrap() <= report.last_epoch());
    }
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let s = setup(Variant::AsrBased);
    let scorer = Scorer::init(s.config.clone(), 12).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("m.ckpt");
    scorer.save(&p).unwrap();
    assert_eq!(Scorer::load(&p).unwrap(), scorer);
}

#[test]
fn non_finite_target_names_the_batch() {
    let mut s = setup(Variant::AsrFree);
    s.train[3].target = f64::NAN;
    let err =
        train(train_config(0.005, 1, 1), Scorer::init(s.config.clone(), 0).unwrap(), &s.train, &s.dev).unwrap_err();
    let msg = err.to_string();
    assert!(matches!(err, Error::Numerical(_)), "{msg}");
    assert!(msg.contains("batch") && msg.contains(&s.train[3].id), "{msg}");
}
