//! Token dropout: importance-weighted probabilities, sampling, and the
//! vanilla / block baselines.
//!
//! Dropping a token zeroes its whole vector. Survivors are scaled by
//! `1 / (1 - p_j)` using their own probability, so every target token keeps
//! its expected value. Global tokens are never targets and pass through
//! untouched in every mode.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::TokenSequence;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// How an encoder pass drops tokens.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum DropoutMode {
    None,
    /// Importance-weighted probabilities in `[p_min, p_max]`.
    Iwtd { p_min: f64, p_max: f64 },
    Vanilla { p: f64 },
    DropBlock { p: f64, block_size: usize },
    /// Caller-provided per-layer, per-position probabilities.
    Fixed { probs: Vec<Vec<f64>> },
}

impl DropoutMode {
    pub fn is_none(&self) -> bool {
        matches!(self, DropoutMode::None)
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            DropoutMode::None => Ok(()),
            DropoutMode::Iwtd { p_min, p_max } => validate_bounds(*p_min, *p_max),
            DropoutMode::Vanilla { p } => validate_rate(*p),
            DropoutMode::DropBlock { p, block_size } => {
                validate_rate(*p)?;
                if *block_size == 0 {
                    return Err(Error::Parameter("block_size must be at least 1".into()));
                }
                Ok(())
            }
            DropoutMode::Fixed { probs } => probs.iter().flatten().try_for_each(|p| validate_rate(*p)),
        }
    }

    /// Probability bounds reported in plan logs.
    pub fn bounds(&self) -> (f64, f64) {
        match self {
            DropoutMode::None => (0.0, 0.0),
            DropoutMode::Iwtd { p_min, p_max } => (*p_min, *p_max),
            DropoutMode::Vanilla { p } | DropoutMode::DropBlock { p, .. } => (*p, *p),
            DropoutMode::Fixed { probs } => {
                let flat = probs.iter().flatten();
                let lo = flat.clone().copied().fold(f64::INFINITY, f64::min);
                let hi = flat.copied().fold(0.0, f64::max);
                (if lo.is_finite() { lo } else { 0.0 }, hi)
            }
        }
    }
}

/// `0 <= p_min <= p_max < 1`.
pub fn validate_bounds(p_min: f64, p_max: f64) -> Result<()> {
    if !(0.0..1.0).contains(&p_min) || !(0.0..1.0).contains(&p_max) || p_min > p_max {
        return Err(Error::Parameter(format!(
            "dropout bounds need 0 <= p_min <= p_max < 1, got p_min = {p_min}, p_max = {p_max}"
        )));
    }
    Ok(())
}

fn validate_rate(p: f64) -> Result<()> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::Parameter(format!("dropout probability {p} outside [0, 1)")));
    }
    Ok(())
}

/// Maps normalized importance to drop probability: `p_j = p_max − Î_j (p_max − p_min)`
/// on the targets and 0 elsewhere. `i_hat` is aligned with `targets`. Evaluated as
/// `(1 − Î) p_max + Î p_min` so both endpoints are exact.
pub fn dropout_probabilities(i_hat: &[f64], p_min: f64, p_max: f64, targets: &[usize], len: usize) -> Result<Vec<f64>> {
    validate_bounds(p_min, p_max)?;
    if i_hat.len() != targets.len() {
        return Err(Error::Dimension {
            op: "dropout_probabilities",
            left: vec![i_hat.len()],
            right: vec![targets.len()],
        });
    }
    let mut p = vec![0.0; len];
    for (&j, &imp) in targets.iter().zip(i_hat) {
        if j >= len {
            return Err(Error::Index { index: j, len });
        }
        if !(0.0..=1.0).contains(&imp) {
            return Err(Error::Range { value: imp, lo: 0.0, hi: 1.0 });
        }
        p[j] = (1.0 - imp) * p_max + imp * p_min;
    }
    Ok(p)
}

/// Draws one uniform per target, in target order, and drops the target when
/// the draw falls below its probability. Non-targets are always kept.
pub fn sample_keep<R: Rng + ?Sized>(p: &[f64], targets: &[usize], rng: &mut R) -> Vec<bool> {
    let mut keep = vec![true; p.len()];
    for &j in targets {
        let u: f64 = rng.gen();
        keep[j] = u >= p[j];
    }
    keep
}

/// Per-position multiplier: 0 for dropped tokens, `1 / (1 - p_j)` for kept ones.
pub fn keep_scale(p: &[f64], keep: &[bool]) -> Vec<f64> {
    p.iter()
        .zip(keep)
        .map(|(&pj, &k)| if k { 1.0 / (1.0 - pj) } else { 0.0 })
        .collect()
}

fn scaled(seq: &TokenSequence<Tensor>, scale: &[f64]) -> TokenSequence<Tensor> {
    let (rows, cols) = seq.tokens.rows_cols();
    let mut data = seq.tokens.data().to_vec();
    for i in 0..rows {
        if scale[i] != 1.0 {
            data[i * cols..(i + 1) * cols].iter_mut().for_each(|v| *v *= scale[i]);
        }
    }
    TokenSequence {
        modality: seq.modality,
        tokens: Tensor::from_parts(seq.tokens.shape().to_vec(), data),
        roles: seq.roles.clone(),
        target_indices: seq.target_indices.clone(),
    }
}

fn check_probs(seq: &TokenSequence<Tensor>, p: &[f64]) -> Result<()> {
    if p.len() != seq.len() {
        return Err(Error::Contract(format!(
            "probability vector has length {} for a sequence of length {}",
            p.len(),
            seq.len()
        )));
    }
    p.iter().try_for_each(|v| validate_rate(*v))
}

/// Zeroes each target token with probability `p_j` and rescales survivors.
/// Returns the new sequence and the keep mask.
pub fn apply_token_dropout<R: Rng + ?Sized>(
    seq: &TokenSequence<Tensor>,
    p: &[f64],
    rng: &mut R,
) -> Result<(TokenSequence<Tensor>, Vec<bool>)> {
    check_probs(seq, p)?;
    let mut p = p.to_vec();
    for (j, pj) in p.iter_mut().enumerate() {
        if !seq.target_indices.contains(&j) {
            *pj = 0.0;
        }
    }
    let keep = sample_keep(&p, &seq.target_indices, rng);
    Ok((scaled(seq, &keep_scale(&p, &keep)), keep))
}

/// Uniform probability over the targets.
pub fn uniform_probabilities(p: f64, targets: &[usize], len: usize) -> Vec<f64> {
    let mut probs = vec![0.0; len];
    for &j in targets {
        probs[j] = p;
    }
    probs
}

pub fn vanilla_token_dropout<R: Rng + ?Sized>(
    seq: &TokenSequence<Tensor>,
    p: f64,
    rng: &mut R,
) -> Result<(TokenSequence<Tensor>, Vec<bool>)> {
    validate_rate(p)?;
    apply_token_dropout(seq, &uniform_probabilities(p, &seq.target_indices, seq.len()), rng)
}

/// Expected dropped fraction when each of `n` positions independently starts
/// a block of `block` positions (clipped at the end) with probability `gamma`.
pub fn dropblock_expected_fraction(n: usize, block: usize, gamma: f64) -> f64 {
    // Position j is covered by min(j + 1, block) possible starts.
    let covered: f64 = (0..n)
        .map(|j| 1.0 - (1.0 - gamma).powi(((j + 1).min(block)) as i32))
        .sum();
    covered / n as f64
}

/// Start rate whose expected dropped fraction equals `p`.
pub fn dropblock_start_rate(n: usize, block: usize, p: f64) -> f64 {
    if block == 1 || p == 0.0 {
        return p;
    }
    let (mut lo, mut hi) = (0.0, 1.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if dropblock_expected_fraction(n, block, mid) < p {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Samples block starts over `n` consecutive target positions. Returns the
/// dropped flag per target position and the chosen starts.
pub fn dropblock_mask<R: Rng + ?Sized>(n: usize, p: f64, block: usize, rng: &mut R) -> Result<(Vec<bool>, Vec<usize>)> {
    validate_rate(p)?;
    if block == 0 || block > n {
        return Err(Error::Parameter(format!(
            "block_size {block} must be in 1..={n} (the target count)"
        )));
    }
    let gamma = dropblock_start_rate(n, block, p);
    let mut dropped = vec![false; n];
    let mut starts = Vec::new();
    for s in 0..n {
        let u: f64 = rng.gen();
        if u < gamma {
            starts.push(s);
            dropped[s..(s + block).min(n)].iter_mut().for_each(|d| *d = true);
        }
    }
    Ok((dropped, starts))
}

/// Keep mask over the full sequence for a block plan.
pub fn dropblock_keep<R: Rng + ?Sized>(targets: &[usize], len: usize, p: f64, block: usize, rng: &mut R) -> Result<Vec<bool>> {
    let (dropped, _) = dropblock_mask(targets.len(), p, block, rng)?;
    let mut keep = vec![true; len];
    for (&j, d) in targets.iter().zip(dropped) {
        keep[j] = !d;
    }
    Ok(keep)
}

/// Drops runs of `block_size` consecutive target tokens so that the expected
/// dropped fraction is `p`; survivors are scaled by `1 / (1 - p)`.
pub fn dropblock_tokens<R: Rng + ?Sized>(
    seq: &TokenSequence<Tensor>,
    p: f64,
    block_size: usize,
    rng: &mut R,
) -> Result<(TokenSequence<Tensor>, Vec<bool>)> {
    let keep = dropblock_keep(&seq.target_indices, seq.len(), p, block_size, rng)?;
    let probs = uniform_probabilities(p, &seq.target_indices, seq.len());
    Ok((scaled(seq, &keep_scale(&probs, &keep)), keep))
}

/// Probabilities and sampled keep mask of one layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerDropout {
    pub layer: usize,
    pub probs: Vec<f64>,
    pub keep: Vec<bool>,
}

impl LayerDropout {
    pub fn dropped(&self) -> Vec<usize> {
        self.keep.iter().enumerate().filter(|(_, k)| !**k).map(|(j, _)| j).collect()
    }
}

/// Realized dropout of one encoder pass.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DropoutPlan {
    pub mode: DropoutMode,
    pub p_min: f64,
    pub p_max: f64,
    pub rng_seed: u64,
    pub layers: Vec<LayerDropout>,
}

impl DropoutPlan {
    pub fn new(mode: DropoutMode, rng_seed: u64) -> Self {
        let (p_min, p_max) = mode.bounds();
        Self {
            mode,
            p_min,
            p_max,
            rng_seed,
            layers: Vec::new(),
        }
    }

    /// Audit record: mode, bounds and per-layer dropped indices.
    pub fn audit_json(&self) -> serde_json::Value {
        let mode = match &self.mode {
            DropoutMode::None => "none",
            DropoutMode::Iwtd { .. } => "iwtd",
            DropoutMode::Vanilla { .. } => "vanilla",
            DropoutMode::DropBlock { .. } => "dropblock",
            DropoutMode::Fixed { .. } => "fixed",
        };
        serde_json::json!({
            "mode": mode,
            "p_min": self.p_min,
            "p_max": self.p_max,
            "rng_seed": self.rng_seed,
            "dropped": self.layers.iter().map(|l| l.dropped()).collect::<Vec<_>>(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{Modality, TokenRole};
    use crate::rng::rng_for;

    fn seq(values: Vec<Vec<f64>>, roles: Vec<TokenRole>) -> TokenSequence<Tensor> {
        let target_indices = roles
            .iter()
            .enumerate()
            .filter(|(_, r)| !r.is_global())
            .map(|(j, _)| j)
            .collect();
        TokenSequence {
            modality: Modality::Vision,
            tokens: Tensor::from_rows(&values).unwrap(),
            roles,
            target_indices,
        }
    }

    fn vision_seq(n_targets: usize, value: f64) -> TokenSequence<Tensor> {
        let mut roles = vec![TokenRole::GlobalCls];
        roles.extend(std::iter::repeat_n(TokenRole::Content, n_targets));
        seq(vec![vec![value]; n_targets + 1], roles)
    }

    #[test]
    fn probability_endpoints_and_midpoint() {
        let p = dropout_probabilities(&[1.0, 0.0, 0.5], 0.1, 0.5, &[1, 2, 3], 4).unwrap();
        assert_eq!(p[0], 0.0);
        assert_eq!(p[1], 0.1);
        assert_eq!(p[2], 0.5);
        assert!((p[3] - 0.3).abs() < 1e-15);
    }

    #[test]
    fn bounds_are_validated() {
        assert!(matches!(dropout_probabilities(&[0.5], 0.6, 0.5, &[0], 1), Err(Error::Parameter(_))));
        assert!(matches!(dropout_probabilities(&[0.5], 0.1, 1.0, &[0], 1), Err(Error::Parameter(_))));
    }

    #[test]
    fn zero_probability_is_identity() {
        let s = vision_seq(5, 1.7);
        let p = vec![0.0; 6];
        let (out, keep) = apply_token_dropout(&s, &p, &mut rng_for(1)).unwrap();
        assert_eq!(out.tokens, s.tokens);
        assert!(keep.iter().all(|k| *k));
    }

    #[test]
    fn half_probability_drops_or_doubles() {
        let s = seq(vec![vec![9.0, 9.0], vec![2.0, 4.0]], vec![TokenRole::GlobalCls, TokenRole::Content]);
        let mut rng = rng_for(4);
        let (mut dropped, mut kept) = (false, false);
        for _ in 0..64 {
            let (out, keep) = apply_token_dropout(&s, &[0.0, 0.5], &mut rng).unwrap();
            assert_eq!(out.tokens.row(0), &[9.0, 9.0]);
            if keep[1] {
                assert_eq!(out.tokens.row(1), &[4.0, 8.0]);
                kept = true;
            } else {
                assert_eq!(out.tokens.row(1), &[0.0, 0.0]);
                dropped = true;
            }
        }
        assert!(dropped && kept);
    }

    #[test]
    fn probability_of_one_rejected() {
        let s = vision_seq(2, 1.0);
        assert!(apply_token_dropout(&s, &[0.0, 1.0, 0.2], &mut rng_for(0)).is_err());
        assert!(vanilla_token_dropout(&s, 1.0, &mut rng_for(0)).is_err());
        assert!(apply_token_dropout(&s, &[0.0, 0.1], &mut rng_for(0)).is_err());
    }

    #[test]
    fn vanilla_zero_is_identity_and_globals_survive() {
        let s = vision_seq(4, 3.0);
        let (out, _) = vanilla_token_dropout(&s, 0.0, &mut rng_for(2)).unwrap();
        assert_eq!(out.tokens, s.tokens);
        let mut rng = rng_for(3);
        for p in [0.3, 0.5, 0.9, 0.999] {
            for _ in 0..50 {
                let (out, keep) = vanilla_token_dropout(&s, p, &mut rng).unwrap();
                assert!(keep[0]);
                assert_eq!(out.tokens.row(0), s.tokens.row(0));
            }
        }
    }

    #[test]
    fn vanilla_dropped_count_mean() {
        // Binomial(10, 0.5): mean 5, sd of the mean over 10000 trials is 0.0158
        let s = vision_seq(10, 1.0);
        let mut rng = rng_for(17);
        let trials = 10_000;
        let total: usize = (0..trials)
            .map(|_| vanilla_token_dropout(&s, 0.5, &mut rng).unwrap().1.iter().filter(|k| !**k).count())
            .sum();
        let mean = total as f64 / trials as f64;
        assert!((mean - 5.0).abs() < 0.15, "mean dropped {mean}");
    }

    #[test]
    fn dropblock_mean_fraction() {
        let s = vision_seq(20, 1.0);
        let mut rng = rng_for(23);
        let trials = 10_000;
        let total: usize = (0..trials)
            .map(|_| dropblock_tokens(&s, 0.3, 3, &mut rng).unwrap().1.iter().filter(|k| !**k).count())
            .sum();
        let frac = total as f64 / (trials * 20) as f64;
        assert!((frac - 0.3).abs() < 0.01, "dropped fraction {frac}");
    }

    #[test]
    fn dropblock_rate_solves_expectation() {
        let g = dropblock_start_rate(20, 3, 0.3);
        assert!((dropblock_expected_fraction(20, 3, g) - 0.3).abs() < 1e-12);
        assert_eq!(dropblock_start_rate(20, 1, 0.3), 0.3);
    }

    #[test]
    fn dropblock_blocks_are_runs() {
        let mut rng = rng_for(5);
        for _ in 0..500 {
            let (dropped, starts) = dropblock_mask(12, 0.4, 3, &mut rng).unwrap();
            let mut covered = vec![false; 12];
            for s in &starts {
                let end = (s + 3).min(12);
                assert!(end - s <= 3);
                covered[*s..end].iter_mut().for_each(|c| *c = true);
            }
            assert_eq!(covered, dropped);
        }
    }

    #[test]
    fn dropblock_size_one_matches_vanilla_distribution() {
        let s = vision_seq(8, 1.0);
        let (mut r1, mut r2) = (rng_for(31), rng_for(32));
        let trials = 20_000;
        let mut hist_block = [0usize; 9];
        let mut hist_vanilla = [0usize; 9];
        for _ in 0..trials {
            let c = dropblock_tokens(&s, 0.3, 1, &mut r1).unwrap().1.iter().filter(|k| !**k).count();
            hist_block[c] += 1;
            let c = vanilla_token_dropout(&s, 0.3, &mut r2).unwrap().1.iter().filter(|k| !**k).count();
            hist_vanilla[c] += 1;
        }
        for c in 0..9 {
            let (a, b) = (hist_block[c] as f64 / trials as f64, hist_vanilla[c] as f64 / trials as f64);
            assert!((a - b).abs() < 0.015, "count {c}: {a} vs {b}");
        }
    }

    #[test]
    fn dropblock_rejects_oversized_block() {
        let s = vision_seq(2, 1.0);
        assert!(matches!(dropblock_tokens(&s, 0.3, 3, &mut rng_for(0)), Err(Error::Parameter(_))));
    }

    #[test]
    fn plan_audit_lists_dropped_indices() {
        let mut plan = DropoutPlan::new(DropoutMode::Iwtd { p_min: 0.1, p_max: 0.5 }, 9);
        plan.layers.push(LayerDropout {
            layer: 0,
            probs: vec![0.0, 0.2, 0.4],
            keep: vec![true, false, true],
        });
        let j = plan.audit_json();
        assert_eq!(j["mode"], "iwtd");
        assert_eq!(j["dropped"][0][0], 1);
        assert_eq!(j["p_max"], 0.5);
    }
}
