//! Fast invariant suite behind the `selftest` command.
//!
//! Each check is self-contained and seeded. The full ablation is not part of
//! the suite; it is exercised by the `ablate` command and the acceptance tests.

use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::analysis::compare_complexity;
use crate::data::{generate_dataset, DataConfig, SyntheticDataset};
use crate::dropout::{dropout_probabilities, sample_keep, DropoutMode};
use crate::encoder::{Bind, DropoutRequest, EncoderConfig, EncoderState, Graph};
use crate::error::Result;
use crate::gradcheck::finite_diff_check;
use crate::residual::{anneal_lambda, residual, AnnealSchedule};
use crate::rng::{derive_seed, rng_for, Purpose};
use crate::tape::Tape;
use crate::tensor::Tensor;
use crate::train::{evaluate, hm, step_graph, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckOutcome {
    pub name: String,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

/// Encoder small enough for exhaustive finite differences.
pub fn toy_encoder() -> EncoderConfig {
    EncoderConfig {
        layers: 3,
        heads: 2,
        model_dim: 8,
        mlp_dim: 16,
        prompt_len_text: 2,
        prompt_len_vision: 2,
        prompt_depth: 2,
        dropout_layers: 2,
        shared_dim: 4,
        bridge_count: 3,
        embed_dim: 4,
        temperature: 0.5,
        vocab_size: 8,
        max_text_len: 8,
        grid: 2,
        patch_dim: 4,
    }
}

pub fn toy_data_config() -> DataConfig {
    DataConfig {
        num_classes: 4,
        base_classes: 2,
        attributes: 4,
        attrs_per_class: 3,
        shots: 8,
        test_per_class: 4,
        noise_std: 0.3,
        distractor_fraction: 0.5,
        distractor_std: 1.0,
        grid: 2,
        patch_dim: 4,
    }
}

/// Training configuration of the toy gradient check: importance-weighted
/// dropout, residual entropy and the anchor all active.
pub fn toy_train_config(seed: u64) -> TrainConfig {
    TrainConfig {
        encoder: toy_encoder(),
        dropout: DropoutMode::Iwtd { p_min: 0.1, p_max: 0.5 },
        schedule: AnnealSchedule::new(0.1, 10),
        learning_rate: 0.1,
        batch_size: 4,
        seed,
        residual_entropy: true,
        anchor_weight: 0.5,
    }
}

/// Batch seed of the gradient check. Fixed so that the check does not
/// depend on the suite seed; some draws contain coordinates whose gradient
/// is below the resolution of central differences at `eps = 1e-5`.
pub const GRADCHECK_SEED: u64 = 0;

/// Largest relative error between tape gradients and central differences of
/// the full objective, over every trainable parameter of the toy model. The
/// objective is re-evaluated by replaying the recorded graph, so the clean
/// branch, attention scores and dropout masks stay at their recorded values
/// exactly as the stop-gradients in the backward pass assume.
pub fn gradient_check(seed: u64) -> Result<GradCheckSummary> {
    let cfg = toy_train_config(seed);
    let data = generate_dataset(&toy_data_config(), seed)?;
    let state = EncoderState::init(&cfg.encoder, &mut rng_for(derive_seed(seed, Purpose::Init)))?;
    let sg = step_graph(&state, &cfg, &data, &[0, 3, 8, 12], 6)?;
    let grads = sg.tape.backward(sg.loss)?;
    let vars: Vec<_> = sg.trainable.iter().map(|(_, v)| *v).collect();
    let params: Vec<Tensor> = vars.iter().map(|v| sg.tape.value(*v).clone()).collect();
    let analytic: Vec<Tensor> = vars.iter().map(|v| grads.get(*v)).collect();
    let report = finite_diff_check(&params, &analytic, 1e-5, |ps| {
        let leaves: Vec<_> = vars.iter().copied().zip(ps.iter().cloned()).collect();
        Ok(sg.tape.replay(&leaves)?.value(sg.loss).data()[0])
    })?;
    let covered = sg
        .trainable
        .iter()
        .zip(&analytic)
        .filter(|(_, g)| g.data().iter().any(|x| *x != 0.0))
        .map(|((id, _), _)| state.params.name(*id).to_string())
        .collect();
    Ok(GradCheckSummary {
        max_rel_error: report.max_rel_error,
        parameters: state.params.ids().map(|id| state.params.get(id).numel()).sum(),
        coordinates: report.entries.len(),
        covered,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckSummary {
    pub max_rel_error: f64,
    /// Every parameter of the model, frozen ones included.
    pub parameters: usize,
    /// Trainable coordinates compared.
    pub coordinates: usize,
    /// Trainable tensors that received a nonzero gradient.
    pub covered: Vec<String>,
}

/// Mean surviving value of a unit token under drop probability `p`.
pub fn dropout_mean(p: f64, draws: usize, seed: u64) -> f64 {
    let mut rng = rng_for(seed);
    let probs = [p];
    let mut total = 0.0;
    for _ in 0..draws {
        if sample_keep(&probs, &[0], &mut rng)[0] {
            total += 1.0 / (1.0 - p);
        }
    }
    total / draws as f64
}

/// Gradient descent on the residual entropy of a free vector, started at a
/// random direction, against `k` frozen unit references. Returns the final
/// largest class probability.
pub fn entropy_descent(k: usize, dim: usize, steps: usize, lr: f64, tau: f64, seed: u64) -> Result<f64> {
    let mut rng = rng_for(seed);
    let unit = |rng: &mut rand_chacha::ChaCha8Rng| {
        let v: Vec<f64> = (0..dim).map(|_| rng.gen::<f64>() - 0.5).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.into_iter().map(|x| x / n).collect::<Vec<_>>()
    };
    let refs: Vec<Vec<f64>> = (0..k).map(|_| unit(&mut rng)).collect();
    let refs = Tensor::from_rows(&refs)?;
    let mut z = unit(&mut rng);
    let mut max_p = 1.0;
    for _ in 0..=steps {
        let mut tape = Tape::new();
        let zv = tape.param(Tensor::matrix(1, dim, z.clone())?);
        let r = tape.constant(refs.clone());
        let zn = tape.l2_normalize_rows(zv)?;
        let logits = tape.matmul_t(zn, r)?;
        let logits = tape.scale(logits, 1.0 / tau);
        let p = tape.softmax_rows(logits);
        let logp = tape.log_softmax_rows(logits);
        let plogp = tape.mul(p, logp)?;
        let loss = tape.sum(plogp);
        max_p = tape.value(p).data().iter().copied().fold(0.0, f64::max);
        let g = tape.backward(loss)?.get(zv);
        z.iter_mut().zip(g.data()).for_each(|(w, d)| *w -= lr * d);
    }
    Ok(max_p)
}

/// Evaluates twice and compares bit patterns; also compares an all-zero
/// fixed dropout plan with a pass that has no plan.
pub fn inference_determinism(state: &EncoderState, data: &SyntheticDataset) -> Result<bool> {
    let a = evaluate(state, data)?;
    let b = evaluate(state, data)?;
    let same = [(a.base_acc, b.base_acc), (a.novel_acc, b.novel_acc), (a.hm, b.hm)]
        .iter()
        .all(|(x, y)| x.to_bits() == y.to_bits());
    let image = &data.test_base[0].image;
    let plain = {
        let mut g = Graph::new(state, Bind::Frozen);
        let seq = g.build_vision_sequence(image)?;
        let e = g.encode(&seq, None)?;
        g.tape.value(e.embedding).clone()
    };
    let zeroed = {
        let mut g = Graph::new(state, Bind::Frozen);
        let seq = g.build_vision_sequence(image)?;
        let layers = state.config().dropout_layers;
        let mode = DropoutMode::Fixed {
            probs: vec![vec![0.0; seq.len()]; layers],
        };
        let e = g.encode(&seq, Some(DropoutRequest { mode: &mode, seed: 1, stream: 0 }))?;
        g.tape.value(e.embedding).clone()
    };
    let enc_same = plain.data().iter().zip(zeroed.data()).all(|(x, y)| x.to_bits() == y.to_bits());
    Ok(same && enc_same)
}

fn timed(name: &str, f: impl FnOnce() -> Result<(bool, String)>) -> CheckOutcome {
    let t = Instant::now();
    let (passed, detail) = f().unwrap_or_else(|e| (false, format!("error: {e}")));
    CheckOutcome {
        name: name.into(),
        passed,
        detail,
        seconds: t.elapsed().as_secs_f64(),
    }
}

/// Runs every check. Takes a few seconds in an optimized build.
pub fn run(seed: u64) -> Vec<CheckOutcome> {
    let mut out = Vec::new();
    out.push(timed("gradient_check", || {
        let g = gradient_check(GRADCHECK_SEED)?;
        Ok((
            g.max_rel_error < 1e-4,
            format!(
                "max relative error {:.3e} over {} coordinates of a {}-parameter model",
                g.max_rel_error, g.coordinates, g.parameters
            ),
        ))
    }));
    out.push(timed("dropout_expectation", || {
        let m = dropout_mean(0.3, 100_000, seed);
        Ok(((m - 1.0).abs() < 0.01, format!("mean {m:.5}")))
    }));
    out.push(timed("probability_mapping", || {
        let mut rng = rng_for(seed);
        let mut ok = true;
        for _ in 0..1000 {
            let n = rng.gen_range(1..20);
            let mut i_hat: Vec<f64> = (0..n).map(|_| rng.gen()).collect();
            i_hat[0] = 1.0;
            if n > 1 {
                i_hat[1] = 0.0;
            }
            let targets: Vec<usize> = (0..n).collect();
            let p = dropout_probabilities(&i_hat, 0.1, 0.5, &targets, n)?;
            ok &= p[0] == 0.1 && (n == 1 || p[1] == 0.5);
            ok &= p.iter().all(|v| (0.1..=0.5).contains(v));
            for a in 0..n {
                for b in 0..n {
                    ok &= !(i_hat[a] < i_hat[b]) || p[a] >= p[b];
                }
            }
        }
        Ok((ok, "1000 random importance vectors".into()))
    }));
    out.push(timed("residual_invertibility", || {
        let mut rng = rng_for(seed ^ 1);
        let mut worst: f64 = 0.0;
        for _ in 0..1000 {
            let n = rng.gen_range(1..32);
            let zo: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let zd: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let l = rng.gen_range(0.0..=0.99);
            let zr = residual(&zd, &zo, l)?;
            for j in 0..n {
                worst = worst.max((l * zo[j] + (1.0 - l) * zr[j] - zd[j]).abs());
            }
        }
        Ok((worst < 1e-12, format!("worst reconstruction error {worst:.3e}")))
    }));
    out.push(timed("residual_uniformity", || {
        let mut detail = Vec::new();
        let mut ok = true;
        for k in [4, 8, 16] {
            let m = entropy_descent(k, 32, 500, 0.05, 0.07, seed)?;
            ok &= m < 1.0 / k as f64 + 0.01;
            detail.push(format!("K={k}: max p {m:.4}"));
        }
        Ok((ok, detail.join(", ")))
    }));
    out.push(timed("retention_sums", || {
        let mut rng = rng_for(seed ^ 2);
        let mut ok = true;
        for _ in 0..1000 {
            let n = rng.gen_range(1..40);
            let i_hat: Vec<f64> = (0..n).map(|_| rng.gen()).collect();
            let targets: Vec<usize> = (0..n).collect();
            let p = dropout_probabilities(&i_hat, 0.1, 0.5, &targets, n)?;
            let v = compare_complexity(&p, 0.9);
            ok &= v.holds && (i_hat.iter().all(|&x| x == 1.0) || v.margin > 0.0);
        }
        Ok((ok, "1000 random plans".into()))
    }));
    out.push(timed("harmonic_mean", || {
        let a = hm(82.69, 63.22);
        let b = hm(80.73, 73.60);
        Ok(((a - 71.66).abs() <= 0.01 && (b - 77.00).abs() <= 0.01, format!("{a:.4}, {b:.4}")))
    }));
    out.push(timed("inference_determinism", || {
        let data = generate_dataset(&toy_data_config(), seed)?;
        let state = EncoderState::init(&toy_encoder(), &mut rng_for(seed))?;
        Ok((inference_determinism(&state, &data)?, "repeat evaluation and zero-probability plan".into()))
    }));
    out.push(timed("lambda_schedule", || {
        let s = AnnealSchedule::new(0.1, 1000);
        let first = anneal_lambda(&s, 0)?;
        let last = anneal_lambda(&s, 1000)?;
        let expect = 0.1 * (11f64.powf(0.75) - 1.0);
        let mut prev = first;
        let mut monotone = true;
        for t in 1..=1000 {
            let l = anneal_lambda(&s, t)?;
            monotone &= l >= prev;
            prev = l;
        }
        Ok((
            first == 0.0 && (last - expect).abs() < 1e-10 && monotone,
            format!("λ(0) = {first}, λ(T) = {last:.12}"),
        ))
    }));
    out
}
