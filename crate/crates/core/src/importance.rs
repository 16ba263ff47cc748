//! Multimodal token importance.
//!
//! Three per-token signals are combined into one importance score:
//!
//! - self-attention score: head-averaged strongest attention a token pays to
//!   any other non-global token,
//! - class-attention score: head-averaged attention the modality's task token
//!   (`[CLS]` for vision, `[EOS]` for text) pays to the token,
//! - cross-modal score: strongest attention the token receives from a small
//!   set of learnable bridge tokens living in a shared projection space.
//!
//! Each signal is min-max rescaled over the dropout targets, averaged, and the
//! mean is rescaled again to give `Î ∈ [0, 1]`.
//!
//! The functions here work on plain values. The encoder evaluates the same
//! formulas on the tape so that bridge tokens and projections receive gradients.

use std::fmt::Write as _;

use serde::Serialize;

use crate::encoder::TokenRole;
use crate::error::{Error, Result};
use crate::tape::MINMAX_DEGENERATE;
use crate::tensor::{softmax_in_place, Tensor};

/// Scores of one sequence at one layer, aligned with `targets`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ImportanceScores {
    pub layer: usize,
    pub targets: Vec<usize>,
    pub s_self: Vec<f64>,
    pub s_cls: Vec<f64>,
    pub s_cross: Vec<f64>,
    /// Mean of the three rescaled signals.
    pub fused: Vec<f64>,
    /// `fused` rescaled to `[0, 1]`.
    pub normalized: Vec<f64>,
}

impl ImportanceScores {
    /// `Î` spread over the full sequence; `None` at positions outside the targets.
    pub fn normalized_full(&self, len: usize) -> Vec<Option<f64>> {
        let mut out = vec![None; len];
        for (k, &j) in self.targets.iter().enumerate() {
            out[j] = Some(self.normalized[k]);
        }
        out
    }
}

/// Bridge-token attention over one modality's projected tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct CrossModalAttention {
    /// `ξ × L'`, rows sum to one.
    pub weights: Tensor,
}

fn attention_dims(attn: &Tensor, sample: usize) -> Result<(usize, usize)> {
    match attn.shape() {
        [b, h, l, l2] if l == l2 => {
            if sample >= *b {
                return Err(Error::Index { index: sample, len: *b });
            }
            Ok((*h, *l))
        }
        other => Err(Error::Dimension {
            op: "attention",
            left: other.to_vec(),
            right: vec![0, 0, 0, 0],
        }),
    }
}

#[inline]
fn at(attn: &Tensor, sample: usize, h: usize, heads: usize, len: usize, row: usize, col: usize) -> f64 {
    attn.data()[((sample * heads + h) * len + row) * len + col]
}

/// For each target `j`, the head average of `max_{k ≠ j, k ∉ globals} A[b, h, j, k]`.
/// A row with no eligible `k` contributes 0.
pub fn self_attention_score(attn: &Tensor, sample: usize, targets: &[usize], globals: &[usize]) -> Result<Vec<f64>> {
    if targets.is_empty() {
        return Err(Error::EmptyTarget);
    }
    let (heads, len) = attention_dims(attn, sample)?;
    check_indices(targets, len)?;
    let eligible: Vec<usize> = (0..len).filter(|k| !globals.contains(k)).collect();
    Ok(targets
        .iter()
        .map(|&j| {
            let total: f64 = (0..heads)
                .map(|h| {
                    eligible
                        .iter()
                        .filter(|&&k| k != j)
                        .map(|&k| at(attn, sample, h, heads, len, j, k))
                        .fold(0.0, f64::max)
                })
                .sum();
            total / heads as f64
        })
        .collect())
}

/// For each target `j`, the head average of `A[b, h, cls, j]`.
pub fn class_attention_score(attn: &Tensor, sample: usize, cls_index: usize, targets: &[usize]) -> Result<Vec<f64>> {
    let (heads, len) = attention_dims(attn, sample)?;
    if cls_index >= len {
        return Err(Error::Index { index: cls_index, len });
    }
    check_indices(targets, len)?;
    Ok(targets
        .iter()
        .map(|&j| (0..heads).map(|h| at(attn, sample, h, heads, len, cls_index, j)).sum::<f64>() / heads as f64)
        .collect())
}

fn check_indices(idx: &[usize], len: usize) -> Result<()> {
    match idx.iter().find(|&&j| j >= len) {
        Some(&bad) => Err(Error::Index { index: bad, len }),
        None => Ok(()),
    }
}

/// `softmax(E X'ᵀ / √d)` row by row.
pub fn cross_modal_attention(bridge: &Tensor, projected: &Tensor) -> Result<CrossModalAttention> {
    let (xi, d) = bridge.rows_cols();
    let (n, d2) = projected.rows_cols();
    if d != d2 || bridge.shape().len() != 2 || projected.shape().len() != 2 {
        return Err(Error::Dimension {
            op: "cross_modal_attention",
            left: bridge.shape().to_vec(),
            right: projected.shape().to_vec(),
        });
    }
    let scale = 1.0 / (d as f64).sqrt();
    let mut data = vec![0.0; xi * n];
    for kappa in 0..xi {
        let row = &mut data[kappa * n..(kappa + 1) * n];
        for (j, r) in row.iter_mut().enumerate() {
            *r = bridge.row(kappa).iter().zip(projected.row(j)).map(|(a, b)| a * b).sum::<f64>() * scale;
        }
        softmax_in_place(row);
    }
    Ok(CrossModalAttention {
        weights: Tensor::from_parts(vec![xi, n], data),
    })
}

/// Column-wise maximum over bridge rows.
pub fn cross_modal_score(attn: &CrossModalAttention) -> Vec<f64> {
    let (rows, cols) = attn.weights.rows_cols();
    (0..cols)
        .map(|j| (0..rows).map(|k| attn.weights.get2(k, j)).fold(f64::NEG_INFINITY, f64::max))
        .collect()
}

/// Min-max rescaling to `[0, 1]`; a vector with spread below the degeneracy
/// threshold maps to 0.5 everywhere.
pub fn min_max(xs: &[f64]) -> Vec<f64> {
    let lo = xs.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = hi - lo;
    if range < MINMAX_DEGENERATE {
        vec![0.5; xs.len()]
    } else {
        xs.iter().map(|x| (x - lo) / range).collect()
    }
}

/// Rescales each signal, averages them with equal weights, and rescales the mean.
pub fn fuse_importance(layer: usize, targets: &[usize], s_self: &[f64], s_cls: &[f64], s_cross: &[f64]) -> Result<ImportanceScores> {
    let n = targets.len();
    if n == 0 {
        return Err(Error::EmptyTarget);
    }
    if s_self.len() != n || s_cls.len() != n || s_cross.len() != n {
        return Err(Error::Dimension {
            op: "fuse_importance",
            left: vec![n],
            right: vec![s_self.len(), s_cls.len(), s_cross.len()],
        });
    }
    if s_self.iter().chain(s_cls).chain(s_cross).any(|v| v.is_nan()) {
        return Err(Error::Numeric("NaN importance score".into()));
    }
    let (a, b, c) = (min_max(s_self), min_max(s_cls), min_max(s_cross));
    let fused: Vec<f64> = (0..n).map(|k| (a[k] + b[k] + c[k]) * (1.0 / 3.0)).collect();
    let normalized = min_max(&fused);
    Ok(ImportanceScores {
        layer,
        targets: targets.to_vec(),
        s_self: s_self.to_vec(),
        s_cls: s_cls.to_vec(),
        s_cross: s_cross.to_vec(),
        fused,
        normalized,
    })
}

/// CSV header for [`scores_csv_rows`].
pub const SCORES_CSV_HEADER: &str = "sample_id,layer,token_index,role,s_self,s_cls,s_cross,I_hat";

/// One CSV row per target token.
pub fn scores_csv_rows(sample_id: usize, scores: &ImportanceScores, roles: &[TokenRole]) -> String {
    let mut out = String::new();
    for (k, &j) in scores.targets.iter().enumerate() {
        let _ = writeln!(
            out,
            "{sample_id},{},{j},{},{},{},{},{}",
            scores.layer,
            roles[j].as_str(),
            scores.s_self[k],
            scores.s_cls[k],
            scores.s_cross[k],
            scores.normalized[k]
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_attention(rng: &mut ChaCha8Rng, heads: usize, len: usize) -> Tensor {
        let mut data = Vec::new();
        for _ in 0..heads * len {
            let mut row: Vec<f64> = (0..len).map(|_| rng.gen_range(-2.0..2.0)).collect();
            softmax_in_place(&mut row);
            data.extend(row);
        }
        Tensor::new(vec![1, heads, len, len], data).unwrap()
    }

    #[test]
    fn self_score_one_hot_row() {
        let len = 4;
        let mut data = vec![0.0; len * len];
        for j in 0..len {
            data[j * len + (j + 1) % len] = 1.0;
        }
        let attn = Tensor::new(vec![1, 1, len, len], data).unwrap();
        let s = self_attention_score(&attn, 0, &[1, 2], &[0]).unwrap();
        assert_eq!(s, vec![1.0, 1.0]);
    }

    #[test]
    fn self_score_uniform_row() {
        let attn = Tensor::filled(&[1, 1, 5, 5], 0.2);
        let s = self_attention_score(&attn, 0, &[1, 2, 3], &[0, 4]).unwrap();
        assert!(s.iter().all(|v| (*v - 0.2).abs() < 1e-15));
    }

    #[test]
    fn self_score_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let attn = random_attention(&mut rng, 2, 6);
        let globals = [0, 5];
        let targets = [1, 2, 3, 4];
        let got = self_attention_score(&attn, 0, &targets, &globals).unwrap();
        for (t, &j) in targets.iter().enumerate() {
            let mut acc = 0.0;
            for h in 0..2 {
                let mut best = 0.0f64;
                for k in 0..6 {
                    if k != j && k != 0 && k != 5 {
                        best = best.max(attn.data()[h * 36 + j * 6 + k]);
                    }
                }
                acc += best;
            }
            assert!((got[t] - acc / 2.0).abs() < 1e-15);
        }
    }

    #[test]
    fn empty_targets_rejected() {
        let attn = Tensor::filled(&[1, 1, 3, 3], 1.0 / 3.0);
        assert!(matches!(self_attention_score(&attn, 0, &[], &[0]), Err(Error::EmptyTarget)));
    }

    #[test]
    fn class_score_examples() {
        let attn = Tensor::filled(&[1, 1, 4, 4], 0.25);
        assert_eq!(class_attention_score(&attn, 0, 0, &[1, 2, 3]).unwrap(), vec![0.25; 3]);

        let mut data = vec![0.25; 16];
        data[..4].copy_from_slice(&[0.0, 0.0, 1.0, 0.0]);
        let attn = Tensor::new(vec![1, 1, 4, 4], data).unwrap();
        assert_eq!(class_attention_score(&attn, 0, 0, &[1, 2, 3]).unwrap(), vec![0.0, 1.0, 0.0]);
        assert!(matches!(class_attention_score(&attn, 0, 4, &[1]), Err(Error::Index { .. })));
    }

    #[test]
    fn class_score_matches_index_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let attn = random_attention(&mut rng, 2, 5);
        let got = class_attention_score(&attn, 0, 4, &[0, 1, 2, 3]).unwrap();
        for j in 0..4 {
            let want = (attn.data()[4 * 5 + j] + attn.data()[25 + 4 * 5 + j]) / 2.0;
            assert!((got[j] - want).abs() < 1e-15);
        }
    }

    #[test]
    fn cross_attention_orthogonal_row_is_uniform() {
        let bridge = Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let x = Tensor::from_rows(&[vec![0.0, 2.0], vec![0.0, -2.0], vec![0.0, 1.0]]).unwrap();
        let a = cross_modal_attention(&bridge, &x).unwrap();
        assert!(a.weights.data().iter().all(|v| (*v - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn cross_attention_logit_gap_ten() {
        let d = 4usize;
        let bridge = Tensor::from_rows(&[vec![1.0, 0.0, 0.0, 0.0]]).unwrap();
        let x = Tensor::from_rows(&[vec![10.0 * (d as f64).sqrt(), 0.0, 0.0, 0.0], vec![0.0; 4]]).unwrap();
        let a = cross_modal_attention(&bridge, &x).unwrap();
        // logits [10, 0]
        let want0 = 1.0 / (1.0 + (-10.0f64).exp());
        assert!((a.weights.data()[0] - want0).abs() < 1e-15);
        assert!((a.weights.data()[0] - 0.999_954_602_131_297_6).abs() < 1e-15);
    }

    #[test]
    fn cross_attention_matches_scalar_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let e: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let x: Vec<f64> = (0..9).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let a = cross_modal_attention(&Tensor::matrix(2, 3, e.clone()).unwrap(), &Tensor::matrix(3, 3, x.clone()).unwrap()).unwrap();
        for k in 0..2 {
            let logits: Vec<f64> = (0..3)
                .map(|j| (0..3).map(|c| e[k * 3 + c] * x[j * 3 + c]).sum::<f64>() / 3f64.sqrt())
                .collect();
            let z: f64 = logits.iter().map(|l| l.exp()).sum();
            let mut row_sum = 0.0;
            for j in 0..3 {
                let w = a.weights.get2(k, j);
                row_sum += w;
                assert!((w - logits[j].exp() / z).abs() < 1e-14);
            }
            assert!((row_sum - 1.0).abs() < 1e-10);
        }
        let bad = Tensor::zeros(&[3, 2]);
        assert!(cross_modal_attention(&Tensor::zeros(&[2, 3]), &bad).is_err());
    }

    #[test]
    fn cross_score_examples() {
        let one = CrossModalAttention {
            weights: Tensor::from_rows(&[vec![0.1, 0.6, 0.3]]).unwrap(),
        };
        assert_eq!(cross_modal_score(&one), vec![0.1, 0.6, 0.3]);
        let two = CrossModalAttention {
            weights: Tensor::from_rows(&[vec![0.7, 0.3], vec![0.2, 0.8]]).unwrap(),
        };
        assert_eq!(cross_modal_score(&two), vec![0.7, 0.8]);
    }

    #[test]
    fn cross_score_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut data = Vec::new();
        for _ in 0..4 {
            let mut row: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
            softmax_in_place(&mut row);
            data.extend(row);
        }
        let attn = CrossModalAttention {
            weights: Tensor::matrix(4, 6, data.clone()).unwrap(),
        };
        let got = cross_modal_score(&attn);
        for j in 0..6 {
            let mut best = data[j];
            for k in 1..4 {
                if data[k * 6 + j] > best {
                    best = data[k * 6 + j];
                }
            }
            assert_eq!(got[j], best);
        }
    }

    #[test]
    fn fuse_identical_signals() {
        let s = [0.1, 0.4, 0.3];
        let f = fuse_importance(0, &[1, 2, 3], &s, &s, &s).unwrap();
        let want = min_max(&s);
        for (a, b) in f.normalized.iter().zip(want) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn fuse_constant_signals_is_half() {
        let f = fuse_importance(0, &[1, 2], &[0.3, 0.3], &[0.1, 0.1], &[0.9, 0.9]).unwrap();
        assert_eq!(f.normalized, vec![0.5, 0.5]);
    }

    #[test]
    fn fuse_hand_example() {
        let f = fuse_importance(0, &[1, 2], &[0.2, 0.8], &[0.4, 0.4], &[0.9, 0.1]).unwrap();
        assert_eq!(f.fused, vec![0.5, 0.5]);
        assert_eq!(f.normalized, vec![0.5, 0.5]);
    }

    #[test]
    fn fuse_rejects_nan() {
        assert!(matches!(
            fuse_importance(0, &[1, 2], &[f64::NAN, 0.1], &[0.1, 0.2], &[0.1, 0.2]),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn csv_rows_have_all_columns() {
        let f = fuse_importance(1, &[1, 2], &[0.2, 0.8], &[0.4, 0.5], &[0.9, 0.1]).unwrap();
        let roles = [TokenRole::GlobalCls, TokenRole::Content, TokenRole::Prompt];
        let csv = scores_csv_rows(3, &f, &roles);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 2);
        assert!(lines[1].starts_with("3,1,2,prompt,0.8,0.5,0.1,"));
        assert_eq!(lines[0].split(',').count(), SCORES_CSV_HEADER.split(',').count());
    }
}
