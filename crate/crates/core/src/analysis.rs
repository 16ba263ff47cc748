//! Retention sums, residual uniformity and importance heatmaps.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Split, SyntheticDataset};
use crate::dropout::{dropout_probabilities, DropoutMode, LayerDropout};
use crate::encoder::{Bind, DropoutRequest, EncoderState, Graph, TokenRole};
use crate::error::{Error, Result};
use crate::importance::ImportanceScores;
use crate::residual::{cosine_distribution, residual};
use crate::rng::rng_for;
use crate::tensor::Tensor;
use crate::train::{image_embedding, text_embeddings};

/// `Σ_{j ∈ targets} (1 − p_j)`.
pub fn retention_sum(p: &[f64], targets: &[usize]) -> f64 {
    targets.iter().map(|&j| 1.0 - p[j]).sum()
}

/// Retention of one layer's target tokens.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetentionProfile {
    /// `q_j = 1 − p_j` per target, in target order.
    pub q: Vec<f64>,
    pub phi: f64,
    pub q_high: f64,
    pub q_low: f64,
    /// Targets retained at least halfway between `q_low` and `q_high`.
    pub n_important: usize,
    pub n_unimportant: usize,
}

impl RetentionProfile {
    pub fn new(p: &[f64], targets: &[usize], p_min: f64, p_max: f64) -> Self {
        let q: Vec<f64> = targets.iter().map(|&j| 1.0 - p[j]).collect();
        let (q_high, q_low) = (1.0 - p_min, 1.0 - p_max);
        let mid = 0.5 * (q_high + q_low);
        let n_important = q.iter().filter(|&&v| v >= mid).count();
        Self {
            phi: retention_sum(p, targets),
            n_unimportant: q.len() - n_important,
            q,
            q_high,
            q_low,
            n_important,
        }
    }
}

/// Comparison of an importance-weighted plan against uniform retention `q_v`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComplexityVerdict {
    pub phi_iwtd: f64,
    pub phi_uniform: f64,
    pub tokens: usize,
    /// `phi_uniform − phi_iwtd`.
    pub margin: f64,
    pub holds: bool,
}

/// `target_p` holds one probability per target token.
pub fn compare_complexity(target_p: &[f64], q_v: f64) -> ComplexityVerdict {
    let phi_iwtd: f64 = target_p.iter().map(|p| 1.0 - p).sum();
    let phi_uniform = target_p.len() as f64 * q_v;
    ComplexityVerdict {
        phi_iwtd,
        phi_uniform,
        tokens: target_p.len(),
        margin: phi_uniform - phi_iwtd,
        holds: phi_iwtd <= phi_uniform,
    }
}

/// Summary of a set of class distributions.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct UniformityReport {
    pub mean_entropy: f64,
    pub kl_to_uniform: f64,
    /// Largest class probability over all distributions.
    pub max_prob: f64,
    pub k: usize,
}

impl UniformityReport {
    pub fn from_distributions(dists: &[Vec<f64>]) -> Result<Self> {
        let k = dists.first().map(Vec::len).ok_or_else(|| Error::Data("no distributions".into()))?;
        if k == 0 || dists.iter().any(|d| d.len() != k) {
            return Err(Error::Contract("distributions must share a positive length".into()));
        }
        let n = dists.len() as f64;
        let entropy = |d: &Vec<f64>| -d.iter().filter(|&&p| p > 0.0).map(|p| p * p.ln()).sum::<f64>();
        let mean_entropy = dists.iter().map(entropy).sum::<f64>() / n;
        let log_k = (k as f64).ln();
        Ok(Self {
            mean_entropy,
            kl_to_uniform: (log_k - mean_entropy).max(0.0),
            max_prob: dists.iter().flatten().copied().fold(0.0, f64::max),
            k,
        })
    }
}

/// Residual class distributions of the held-out base images against clean
/// base-class text embeddings, with dropout drawn from `seed`.
pub fn residual_uniformity(state: &EncoderState, data: &SyntheticDataset, lambda: f64, mode: &DropoutMode, seed: u64) -> Result<UniformityReport> {
    let pool = data.test_pool(Split::Base);
    if pool.is_empty() {
        return Err(Error::Data("empty evaluation pool".into()));
    }
    let text = text_embeddings(state, data, &data.base)?;
    let refs: Vec<Vec<f64>> = (0..data.base.len()).map(|k| text.row(k).to_vec()).collect();
    let mut dists = Vec::with_capacity(pool.len());
    for (i, s) in pool.iter().enumerate() {
        let z_o = image_embedding(state, &s.image)?;
        let mut g = Graph::new(state, Bind::Frozen);
        let seq = g.build_vision_sequence(&s.image)?;
        let req = DropoutRequest {
            mode,
            seed,
            stream: i as u64,
        };
        let enc = g.encode(&seq, Some(req))?;
        let z_d = g.tape.value(enc.embedding).data().to_vec();
        dists.push(cosine_distribution(&residual(&z_d, &z_o, lambda)?, &refs, state.temperature())?);
    }
    UniformityReport::from_distributions(&dists)
}

pub const HEATMAP_HEADER: &str = "layer,token_index,role,s_self,s_cls,s_cross,i_hat,p_j,dropped";

/// One importance-weighted pass over an image.
pub struct ImportancePass {
    pub roles: Vec<TokenRole>,
    pub targets: Vec<usize>,
    pub importance: Vec<ImportanceScores>,
    pub layers: Vec<LayerDropout>,
}

pub fn importance_pass(state: &EncoderState, image: &Tensor, p_min: f64, p_max: f64, seed: u64) -> Result<ImportancePass> {
    let mode = DropoutMode::Iwtd { p_min, p_max };
    let mut g = Graph::new(state, Bind::Frozen);
    let seq = g.build_vision_sequence(image)?;
    let enc = g.encode(&seq, Some(DropoutRequest { mode: &mode, seed, stream: 0 }))?;
    Ok(ImportancePass {
        roles: seq.roles.clone(),
        targets: seq.target_indices.clone(),
        importance: enc.importance,
        layers: enc.plan.map(|p| p.layers).unwrap_or_default(),
    })
}

impl ImportancePass {
    /// One row per token per dropout layer; score columns are empty for global tokens.
    pub fn csv(&self) -> String {
        let mut out = String::from(HEATMAP_HEADER);
        out.push('\n');
        for (scores, layer) in self.importance.iter().zip(&self.layers) {
            for (j, role) in self.roles.iter().enumerate() {
                let fields = match scores.targets.iter().position(|&t| t == j) {
                    Some(k) => format!(
                        "{},{},{},{}",
                        scores.s_self[k], scores.s_cls[k], scores.s_cross[k], scores.normalized[k]
                    ),
                    None => ",,,".to_string(),
                };
                out.push_str(&format!(
                    "{},{j},{},{fields},{},{}\n",
                    layer.layer,
                    role.as_str(),
                    layer.probs[j],
                    !layer.keep[j]
                ));
            }
        }
        out
    }

    pub fn retention(&self, p_min: f64, p_max: f64) -> Vec<RetentionProfile> {
        self.layers
            .iter()
            .map(|l| RetentionProfile::new(&l.probs, &self.targets, p_min, p_max))
            .collect()
    }
}

/// Heatmap CSV of one importance-weighted pass over an image.
pub fn export_importance_heatmap(state: &EncoderState, image: &Tensor, p_min: f64, p_max: f64, seed: u64) -> Result<String> {
    Ok(importance_pass(state, image, p_min, p_max, seed)?.csv())
}

/// Outcome of comparing many random importance-weighted plans with uniform retention.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetentionSurvey {
    pub plans: usize,
    pub holding: usize,
    /// Plans with some `Î < 1` whose margin is strictly positive.
    pub strict: usize,
    /// Plans with some `Î < 1`.
    pub non_boundary: usize,
    pub worst_margin: f64,
}

/// Draws `plans` random importance vectors of 1 to 63 targets, maps them to
/// probabilities and compares each plan with uniform retention `1 − p_min`.
pub fn retention_survey(plans: usize, p_min: f64, p_max: f64, seed: u64) -> Result<RetentionSurvey> {
    let mut rng = rng_for(seed);
    let mut s = RetentionSurvey {
        plans,
        holding: 0,
        strict: 0,
        non_boundary: 0,
        worst_margin: f64::INFINITY,
    };
    for _ in 0..plans {
        let n = rng.gen_range(1..64);
        let i_hat: Vec<f64> = (0..n).map(|_| rng.gen()).collect();
        let targets: Vec<usize> = (0..n).collect();
        let v = compare_complexity(&dropout_probabilities(&i_hat, p_min, p_max, &targets, n)?, 1.0 - p_min);
        s.holding += usize::from(v.holds);
        if i_hat.iter().any(|&x| x < 1.0) {
            s.non_boundary += 1;
            s.strict += usize::from(v.margin > 0.0);
        }
        s.worst_margin = s.worst_margin.min(v.margin);
    }
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn retention_examples() {
        assert!((retention_sum(&[0.3; 10], &(0..10).collect::<Vec<_>>()) - 7.0).abs() < 1e-12);
        assert_eq!(retention_sum(&[0.3; 4], &[]), 0.0);
        let mut p = vec![0.1; 4];
        p.extend([0.5; 6]);
        let targets: Vec<usize> = (0..10).collect();
        // 4 · 0.9 + 6 · 0.5
        assert!((retention_sum(&p, &targets) - 6.6).abs() < 1e-12);
        let prof = RetentionProfile::new(&p, &targets, 0.1, 0.5);
        assert_eq!((prof.n_important, prof.n_unimportant), (4, 6));
    }

    #[test]
    fn verdict_boundary_and_strict() {
        let v = compare_complexity(&[0.1; 5], 0.9);
        assert!(v.holds);
        assert!(v.margin.abs() < 1e-12);
        let v = compare_complexity(&[0.1, 0.1, 0.3], 0.9);
        assert!(v.holds && v.margin > 0.0);
    }

    #[test]
    fn uniformity_extremes() {
        let u = UniformityReport::from_distributions(&[vec![0.25; 4]]).unwrap();
        assert!((u.mean_entropy - 4f64.ln()).abs() < 1e-15);
        assert!(u.kl_to_uniform.abs() < 1e-15);
        let h = UniformityReport::from_distributions(&[vec![0.0, 1.0, 0.0]]).unwrap();
        assert_eq!(h.mean_entropy, 0.0);
        assert!((h.kl_to_uniform - 3f64.ln()).abs() < 1e-15);
        assert!(UniformityReport::from_distributions(&[]).is_err());
    }
}
