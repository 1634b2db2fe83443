//! Finite-difference gradient checks for every layer and both scorers.
//!
//! Each case draws random parameters and inputs from a seed, reduces the
//! layer output to a scalar through a fixed random projection and an MSE
//! against random targets, and compares the tape gradient with central
//! differences over every scalar (inputs are registered as parameters so
//! their gradients are checked too).

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::Result;
use crate::nnet::{self, gradcheck, Graph, Mat, ParamSet, SeqLayout, Var, LAYER_NORM_EPS};
use crate::scorer::{self, AsrBasedScorerConfig, AsrFreeScorerConfig, ScorerConfig, ScorerInput};

/// Pass threshold on the maximum relative error.
pub const TOLERANCE: f64 = 1e-4;

/// Hidden width of the scorer cases. At width 3, LayerNorm rows with
/// near-equal entries make central-difference truncation error approach
/// the tolerance even though the tape gradient is exact.
const SCORER_HIDDEN: usize = 6;

pub const CASES: &[&str] = &[
    "linear",
    "layer_norm",
    "embedding",
    "activations",
    "lstm_cell",
    "lstm",
    "blstm_stack",
    "pooling",
    "head",
    "asr_free_scorer",
    "asr_based_scorer",
];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CaseResult {
    pub case: String,
    pub seeds: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub passed: bool,
}

fn randn(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Mat {
    nnet::init_normal(rng, rows, cols, 1.0)
}

/// Loss builder: records the forward pass and returns the scalar loss node.
type Builder = Box<dyn Fn(&mut Graph, &ParamSet) -> Result<Var>>;

/// `mse(out . r, y)` with `r` and `y` fixed by `rng`.
fn projector(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> impl Fn(&mut Graph, Var) -> Result<Var> + 'static {
    let r = randn(rng, cols, 1);
    let y: Vec<f64> = (0..rows).map(|_| rng.random_range(-1.0..1.0)).collect();
    move |g: &mut Graph, out: Var| {
        let rv = g.input(r.clone());
        let p = g.matmul(out, rv)?;
        g.mse(p, &y)
    }
}

fn random_layout(rng: &mut ChaCha8Rng, batch: usize, max_len: usize) -> SeqLayout {
    let mut lengths: Vec<usize> = (0..batch).map(|_| rng.random_range(1..=max_len)).collect();
    lengths[0] = max_len;
    SeqLayout::new(lengths).expect("positive lengths")
}

fn random_bias(rng: &mut ChaCha8Rng, p: &mut ParamSet, name: &str) {
    let b = p.get_mut(name).expect("registered");
    let noise = randn(rng, b.nrows(), b.ncols());
    *b += &(noise * 0.5);
}

fn build_case(case: &str, seed: u64) -> Result<(ParamSet, Builder)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0000);
    let mut p = ParamSet::new();
    let builder: Builder = match case {
        "linear" => {
            p.insert("x", randn(&mut rng, 5, 4))?;
            nnet::init_linear(&mut p, &mut rng, "lin", 4, 3)?;
            random_bias(&mut rng, &mut p, "lin.bias");
            let proj = projector(&mut rng, 5, 3);
            Box::new(move |g, p| {
                let x = g.param("x", p)?;
                let y = g.linear(p, "lin", x)?;
                proj(g, y)
            })
        }
        "layer_norm" => {
            p.insert("x", randn(&mut rng, 4, 6))?;
            p.insert("ln.gamma", randn(&mut rng, 1, 6))?;
            p.insert("ln.beta", randn(&mut rng, 1, 6))?;
            let proj = projector(&mut rng, 4, 6);
            Box::new(move |g, p| {
                let x = g.param("x", p)?;
                let gamma = g.param("ln.gamma", p)?;
                let beta = g.param("ln.beta", p)?;
                let y = g.layer_norm(x, gamma, beta, LAYER_NORM_EPS)?;
                proj(g, y)
            })
        }
        "embedding" => {
            p.insert("table", randn(&mut rng, 7, 3))?;
            let idx: Vec<usize> = (0..6).map(|_| rng.random_range(0..7)).collect();
            let proj = projector(&mut rng, 6, 3);
            Box::new(move |g, p| {
                let t = g.param("table", p)?;
                let y = g.embedding(t, &idx)?;
                proj(g, y)
            })
        }
        "activations" => {
            p.insert("a", randn(&mut rng, 4, 3))?;
            p.insert("b", randn(&mut rng, 4, 2))?;
            p.insert("row", randn(&mut rng, 1, 5))?;
            let proj = projector(&mut rng, 4, 5);
            Box::new(move |g, p| {
                let a = g.param("a", p)?;
                let b = g.param("b", p)?;
                let row = g.param("row", p)?;
                let ta = g.tanh(a);
                let sb = g.sigmoid(b);
                let cat = g.concat_cols(ta, sb)?;
                let shifted = g.add_row(cat, row)?;
                let both = g.add(shifted, cat)?;
                proj(g, both)
            })
        }
        "lstm_cell" | "lstm" => {
            let (batch, max_len) = if case == "lstm_cell" { (3, 1) } else { (3, 5) };
            let layout = random_layout(&mut rng, batch, max_len);
            p.insert("x", randn(&mut rng, layout.rows(), 3))?;
            nnet::init_lstm(&mut p, &mut rng, "fwd", 3, 2)?;
            nnet::init_lstm(&mut p, &mut rng, "bwd", 3, 2)?;
            random_bias(&mut rng, &mut p, "fwd.bias");
            random_bias(&mut rng, &mut p, "bwd.bias");
            let proj = projector(&mut rng, layout.rows(), 4);
            Box::new(move |g, p| {
                let x = g.param("x", p)?;
                let f = g.lstm_named(p, "fwd", x, &layout, nnet::Direction::Forward)?;
                let b = g.lstm_named(p, "bwd", x, &layout, nnet::Direction::Backward)?;
                let y = g.concat_cols(f, b)?;
                proj(g, y)
            })
        }
        "blstm_stack" => {
            let layout = random_layout(&mut rng, 3, 4);
            p.insert("x", randn(&mut rng, layout.rows(), 2))?;
            nnet::init_bilstm(&mut p, &mut rng, "blstm", 2, 2, 2)?;
            let proj = projector(&mut rng, layout.rows(), 4);
            Box::new(move |g, p| {
                let x = g.param("x", p)?;
                let y = g.bilstm_stack(p, "blstm", x, &layout, 2)?;
                proj(g, y)
            })
        }
        "pooling" => {
            let layout = random_layout(&mut rng, 4, 5);
            p.insert("x", randn(&mut rng, layout.rows(), 3))?;
            let proj = projector(&mut rng, 4, 3);
            Box::new(move |g, p| {
                let x = g.param("x", p)?;
                let y = g.masked_mean_pool(x, &layout)?;
                proj(g, y)
            })
        }
        "head" => {
            p.insert("pooled", randn(&mut rng, 4, 6))?;
            nnet::init_linear(&mut p, &mut rng, "head", 6, 1)?;
            let y: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
            Box::new(move |g, p| {
                let x = g.param("pooled", p)?;
                let logit = g.linear(p, "head", x)?;
                let out = g.tanh(logit);
                g.mse(out, &y)
            })
        }
        "asr_free_scorer" | "asr_based_scorer" => {
            let config = if case == "asr_free_scorer" {
                ScorerConfig::AsrFree(AsrFreeScorerConfig {
                    feature_dim: 3,
                    hidden_dim: SCORER_HIDDEN,
                    cluster_count: 4,
                    cluster_embed_dim: 2,
                    blstm_layers: 2,
                })
            } else {
                ScorerConfig::AsrBased(AsrBasedScorerConfig {
                    feature_dim: 3,
                    hidden_dim: SCORER_HIDDEN,
                    phones: vec!["sil".into(), "a".into(), "b".into()],
                    blstm_layers: 2,
                    duration_mean: 0.1,
                    duration_std: 0.05,
                })
            };
            p = scorer::init_params(&config, rng.random())?;
            for name in [format!("{}.bias", scorer::PRE_LINEAR), format!("{}.beta", scorer::PRE_NORM)] {
                random_bias(&mut rng, &mut p, &name);
            }
            let inputs: Vec<ScorerInput> = (0..3)
                .map(|_| {
                    let t = rng.random_range(2..=5);
                    let features = randn(&mut rng, t, 3);
                    match &config {
                        ScorerConfig::AsrFree(_) => {
                            ScorerInput::Frames { features, clusters: (0..t).map(|_| rng.random_range(0..4)).collect() }
                        }
                        ScorerConfig::AsrBased(_) => ScorerInput::Phones {
                            features,
                            durations: (0..t).map(|_| rng.random_range(-2.0..2.0)).collect(),
                            phone_ids: (0..t).map(|_| rng.random_range(0..3)).collect(),
                        },
                    }
                })
                .collect();
            let y: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
            Box::new(move |g, p| {
                let refs: Vec<&ScorerInput> = inputs.iter().collect();
                let out = scorer::forward_graph(&config, p, g, &refs)?;
                g.mse(out, &y)
            })
        }
        other => {
            return Err(crate::Error::validation(None, format!("unknown gradient-check case {other:?}")));
        }
    };
    Ok((p, builder))
}

/// Tape gradients versus central differences for one case and seed.
pub fn check_case(case: &str, seed: u64, step: f64) -> Result<gradcheck::GradCheckReport> {
    let (params, build) = build_case(case, seed)?;
    let mut g = Graph::new();
    let loss = build(&mut g, &params)?;
    let analytic = g.backward(loss)?.params();
    gradcheck::check(&params, &analytic, step, |p| {
        let mut g = Graph::new();
        let loss = build(&mut g, p)?;
        Ok(g.scalar(loss))
    })
}

/// Runs every case over seeds `0..seeds`.
pub fn run_suite(seeds: usize, step: f64) -> Result<Vec<CaseResult>> {
    CASES
        .iter()
        .map(|&case| {
            let mut rel = 0.0f64;
            let mut abs = 0.0f64;
            for seed in 0..seeds as u64 {
                let report = check_case(case, seed, step)?;
                rel = rel.max(report.max_rel_err());
                abs = abs.max(report.tensors.iter().map(|t| t.max_abs_err).fold(0.0, f64::max));
            }
            log::info!("gradcheck {case}: max rel err {rel:.3e}");
            Ok(CaseResult {
                case: case.to_string(),
                seeds,
                max_rel_err: rel,
                max_abs_err: abs,
                passed: rel < TOLERANCE,
            })
        })
        .collect()
}

/// Plain-text pass/fail table.
pub fn format_table(results: &[CaseResult]) -> String {
    let mut out = format!("{:<18} {:>5} {:>12} {:>12}  result\n", "case", "seeds", "max_rel_err", "max_abs_err");
    for r in results {
        out.push_str(&format!(
            "{:<18} {:>5} {:>12.3e} {:>12.3e}  {}\n",
            r.case,
            r.seeds,
            r.max_rel_err,
            r.max_abs_err,
            if r.passed { "PASS" } else { "FAIL" }
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_case_builds_and_passes_one_seed() {
        for case in CASES {
            let report = check_case(case, 0, gradcheck::DEFAULT_STEP).unwrap();
            assert!(report.passes(TOLERANCE), "{case}: {report:?}");
        }
    }

    #[test]
    fn unknown_case_is_an_error() {
        assert!(check_case("conv", 0, 1e-3).is_err());
    }
}
