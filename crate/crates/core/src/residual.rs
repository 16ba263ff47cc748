//! Residual decomposition `z_d = λ z_o + (1 − λ) z_r`, the λ schedule, and the
//! residual-entropy objective.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::{softmax_vec, Tensor};

/// Balance-coefficient schedule.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnealSchedule {
    pub lambda0: f64,
    pub total_steps: usize,
    pub epsilon: f64,
    /// Evaluate `λ0 (1 − (1 + 10t/T)^{3/4})` as written, without clamping.
    /// It is non-positive for `t > 0`; kept only for auditing.
    pub literal: bool,
}

impl AnnealSchedule {
    pub fn new(lambda0: f64, total_steps: usize) -> Self {
        Self {
            lambda0,
            total_steps,
            epsilon: 0.01,
            literal: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda0 > 0.0 && self.lambda0 < 1.0) {
            return Err(Error::Parameter(format!("lambda0 must lie in (0, 1), got {}", self.lambda0)));
        }
        if self.total_steps == 0 {
            return Err(Error::Parameter("schedule needs at least one step".into()));
        }
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return Err(Error::Parameter(format!("epsilon must lie in (0, 1), got {}", self.epsilon)));
        }
        Ok(())
    }

    pub fn at(&self, t: usize) -> Result<f64> {
        anneal_lambda(self, t)
    }
}

/// `λ(t) = clamp(λ0 ((1 + 10t/T)^{3/4} − 1), 0, 1 − ε)`.
pub fn anneal_lambda(sched: &AnnealSchedule, t: usize) -> Result<f64> {
    sched.validate()?;
    if t > sched.total_steps {
        return Err(Error::Range {
            value: t as f64,
            lo: 0.0,
            hi: sched.total_steps as f64,
        });
    }
    let growth = (1.0 + 10.0 * t as f64 / sched.total_steps as f64).powf(0.75);
    if sched.literal {
        return Ok(sched.lambda0 * (1.0 - growth));
    }
    Ok((sched.lambda0 * (growth - 1.0)).clamp(0.0, 1.0 - sched.epsilon))
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !lambda.is_finite() || lambda >= 1.0 {
        return Err(Error::Parameter(format!("balance coefficient must be below 1, got {lambda}")));
    }
    Ok(())
}

/// `z_r = (z_d − λ z_o) / (1 − λ)`.
pub fn residual(z_d: &[f64], z_o: &[f64], lambda: f64) -> Result<Vec<f64>> {
    check_lambda(lambda)?;
    if z_d.len() != z_o.len() {
        return Err(Error::Dimension {
            op: "residual",
            left: vec![z_d.len()],
            right: vec![z_o.len()],
        });
    }
    let inv = 1.0 / (1.0 - lambda);
    Ok(z_d.iter().zip(z_o).map(|(d, o)| (d - lambda * o) * inv).collect())
}

fn unit(v: &[f64]) -> Result<Vec<f64>> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !(n > 0.0) || !n.is_finite() {
        return Err(Error::Numeric("cannot normalize a zero or non-finite vector".into()));
    }
    Ok(v.iter().map(|x| x / n).collect())
}

/// Softmax over `cos(z, ref_k) / τ`.
pub fn cosine_distribution(z: &[f64], refs: &[Vec<f64>], tau: f64) -> Result<Vec<f64>> {
    if refs.len() < 2 {
        return Err(Error::Parameter("at least two references are required".into()));
    }
    if !(tau > 0.0) {
        return Err(Error::Parameter(format!("temperature must be positive, got {tau}")));
    }
    let z = unit(z)?;
    let logits = refs
        .iter()
        .map(|r| {
            if r.len() != z.len() {
                return Err(Error::Dimension {
                    op: "cosine_distribution",
                    left: vec![z.len()],
                    right: vec![r.len()],
                });
            }
            let r = unit(r)?;
            Ok(z.iter().zip(&r).map(|(a, b)| a * b).sum::<f64>() / tau)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(softmax_vec(&logits))
}

/// `Σ p log p`, with `0 log 0 = 0`.
pub fn negative_entropy(p: &[f64]) -> f64 {
    p.iter().filter(|&&v| v > 0.0).map(|v| v * v.ln()).sum()
}

/// Negative entropy of the residual's class distribution. Minimizing it
/// pushes the distribution toward uniform.
pub fn residual_entropy_loss(z_r: &[f64], refs: &[Vec<f64>], tau: f64) -> Result<f64> {
    Ok(negative_entropy(&cosine_distribution(z_r, refs, tau)?))
}

/// Per-step objective terms.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub lambda: f64,
    pub ce: f64,
    pub re_v: f64,
    pub re_t: f64,
    /// Squared-distance consistency term of the anchored baseline; 0 otherwise.
    pub anchor: f64,
    pub total: f64,
}

pub const LOSS_CSV_HEADER: &str = "step,lambda,l_ce,l_re_v,l_re_t,l_total,l_anchor";

impl LossBreakdown {
    pub fn csv_row(&self, step: usize) -> String {
        format!(
            "{step},{},{},{},{},{},{}",
            self.lambda, self.ce, self.re_v, self.re_t, self.total, self.anchor
        )
    }
}

/// Embeddings of one batch. Rows are unit vectors.
#[derive(Clone, Debug)]
pub struct BatchEmbeddings<'a> {
    pub image_dropped: &'a [Vec<f64>],
    pub image_clean: &'a [Vec<f64>],
    /// One row per class.
    pub text_dropped: &'a [Vec<f64>],
    pub text_clean: &'a [Vec<f64>],
    pub labels: &'a [usize],
}

/// Which terms enter the objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub residual_entropy: bool,
    /// Weight of `‖z_d − z_o‖²`; 0 disables the anchor.
    pub anchor_weight: f64,
}

fn check_batch(b: &BatchEmbeddings<'_>) -> Result<()> {
    if b.image_dropped.is_empty() {
        return Err(Error::Data("empty batch".into()));
    }
    if b.image_dropped.len() != b.image_clean.len() || b.image_dropped.len() != b.labels.len() {
        return Err(Error::Contract("batch image and label counts differ".into()));
    }
    if b.text_dropped.len() != b.text_clean.len() || b.text_dropped.len() < 2 {
        return Err(Error::Contract("need matching dropped and clean text rows for at least two classes".into()));
    }
    if let Some(&bad) = b.labels.iter().find(|&&y| y >= b.text_dropped.len()) {
        return Err(Error::Data(format!("label {bad} outside {} classes", b.text_dropped.len())));
    }
    Ok(())
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Value-level objective: cross-entropy of the dropped branch, residual
/// entropies of both modalities (each averaged over its residuals) and the
/// optional anchor (averaged per modality).
pub fn total_loss(b: &BatchEmbeddings<'_>, lambda: f64, tau: f64, terms: LossTerms) -> Result<LossBreakdown> {
    check_batch(b)?;
    check_lambda(lambda)?;
    let n = b.image_dropped.len() as f64;
    let mut ce = 0.0;
    for (z, &y) in b.image_dropped.iter().zip(b.labels) {
        let logits: Vec<f64> = b
            .text_dropped
            .iter()
            .map(|t| z.iter().zip(t).map(|(a, c)| a * c).sum::<f64>() / tau)
            .collect();
        ce -= softmax_vec(&logits)[y].ln();
    }
    ce /= n;
    let (mut re_v, mut re_t) = (0.0, 0.0);
    if terms.residual_entropy {
        for (d, o) in b.image_dropped.iter().zip(b.image_clean) {
            re_v += residual_entropy_loss(&residual(d, o, lambda)?, b.text_clean, tau)?;
        }
        re_v /= n;
        if b.image_clean.len() >= 2 {
            for (d, o) in b.text_dropped.iter().zip(b.text_clean) {
                re_t += residual_entropy_loss(&residual(d, o, lambda)?, b.image_clean, tau)?;
            }
            re_t /= b.text_dropped.len() as f64;
        }
    }
    let mut anchor = 0.0;
    if terms.anchor_weight != 0.0 {
        let v: f64 = b.image_dropped.iter().zip(b.image_clean).map(|(d, o)| sq_dist(d, o)).sum::<f64>() / n;
        let t: f64 = b.text_dropped.iter().zip(b.text_clean).map(|(d, o)| sq_dist(d, o)).sum::<f64>()
            / b.text_dropped.len() as f64;
        anchor = terms.anchor_weight * (v + t);
    }
    Ok(LossBreakdown {
        lambda,
        ce,
        re_v,
        re_t,
        anchor,
        total: ce + re_v + re_t + anchor,
    })
}

/// Tape handles of one batch: `image_dropped` is `B × e`, `text_dropped`
/// `K × e`; the clean rows are plain values and never receive gradient.
pub struct TapeBatch<'a> {
    pub image_dropped: Var,
    pub text_dropped: Var,
    pub image_clean: &'a Tensor,
    pub text_clean: &'a Tensor,
    pub labels: &'a [usize],
}

/// Differentiable counterpart of [`total_loss`]. Returns the scalar loss and
/// the per-term breakdown.
pub fn total_loss_tape(
    tape: &mut Tape,
    b: &TapeBatch<'_>,
    lambda: f64,
    tau: f64,
    terms: LossTerms,
) -> Result<(Var, LossBreakdown)> {
    check_lambda(lambda)?;
    let (n, e) = tape.value(b.image_dropped).rows_cols();
    let k = tape.value(b.text_dropped).rows_cols().0;
    if n == 0 || b.labels.len() != n || b.image_clean.shape() != [n, e] || b.text_clean.shape() != [k, e] {
        return Err(Error::Contract("batch tensors disagree in shape".into()));
    }
    if let Some(&bad) = b.labels.iter().find(|&&y| y >= k) {
        return Err(Error::Data(format!("label {bad} outside {k} classes")));
    }
    let logits = tape.matmul_t(b.image_dropped, b.text_dropped)?;
    let logits = tape.scale(logits, 1.0 / tau);
    let logp = tape.log_softmax_rows(logits);
    let flat: Vec<usize> = b.labels.iter().enumerate().map(|(i, &y)| i * k + y).collect();
    let picked = tape.gather(logp, &flat)?;
    let ce = tape.mean(picked);
    let ce = tape.scale(ce, -1.0);
    let mut parts = vec![ce];
    let mut out = LossBreakdown {
        lambda,
        ce: tape.value(ce).data()[0],
        ..Default::default()
    };

    if terms.residual_entropy {
        let text_refs = tape.constant(unit_rows(b.text_clean)?);
        let re_v = residual_entropy_tape(tape, b.image_dropped, b.image_clean, text_refs, lambda, tau)?;
        out.re_v = tape.value(re_v).data()[0];
        parts.push(re_v);
        if n >= 2 {
            let image_refs = tape.constant(unit_rows(b.image_clean)?);
            let re_t = residual_entropy_tape(tape, b.text_dropped, b.text_clean, image_refs, lambda, tau)?;
            out.re_t = tape.value(re_t).data()[0];
            parts.push(re_t);
        }
    }
    if terms.anchor_weight != 0.0 {
        let v = mean_sq_dist(tape, b.image_dropped, b.image_clean)?;
        let t = mean_sq_dist(tape, b.text_dropped, b.text_clean)?;
        let a = tape.add(v, t)?;
        let a = tape.scale(a, terms.anchor_weight);
        out.anchor = tape.value(a).data()[0];
        parts.push(a);
    }
    let mut total = parts[0];
    for &p in &parts[1..] {
        total = tape.add(total, p)?;
    }
    out.total = tape.value(total).data()[0];
    Ok((total, out))
}

fn unit_rows(t: &Tensor) -> Result<Tensor> {
    let (r, c) = t.rows_cols();
    let mut data = Vec::with_capacity(r * c);
    for i in 0..r {
        data.extend(unit(t.row(i))?);
    }
    Ok(Tensor::from_parts(vec![r, c], data))
}

/// Mean over rows of `Σ p log p` for the residuals of `dropped` against unit references.
fn residual_entropy_tape(tape: &mut Tape, dropped: Var, clean: &Tensor, refs: Var, lambda: f64, tau: f64) -> Result<Var> {
    let clean = tape.constant(clean.clone());
    let scaled = tape.scale(clean, lambda);
    let diff = tape.sub(dropped, scaled)?;
    let z_r = tape.scale(diff, 1.0 / (1.0 - lambda));
    let z_r = tape.l2_normalize_rows(z_r)?;
    let logits = tape.matmul_t(z_r, refs)?;
    let logits = tape.scale(logits, 1.0 / tau);
    let p = tape.softmax_rows(logits);
    let logp = tape.log_softmax_rows(logits);
    let plogp = tape.mul(p, logp)?;
    let rows = tape.value(dropped).rows_cols().0 as f64;
    let s = tape.sum(plogp);
    Ok(tape.scale(s, 1.0 / rows))
}

fn mean_sq_dist(tape: &mut Tape, dropped: Var, clean: &Tensor) -> Result<Var> {
    let rows = clean.rows_cols().0 as f64;
    let clean = tape.constant(clean.clone());
    let d = tape.sub(dropped, clean)?;
    let sq = tape.mul(d, d)?;
    let s = tape.sum(sq);
    Ok(tape.scale(s, 1.0 / rows))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    use crate::rng::rng_for;

    const LAMBDA_T: f64 = 0.504_010_535_453_723_7;

    #[test]
    fn schedule_endpoints() {
        let s = AnnealSchedule::new(0.1, 100);
        assert_eq!(anneal_lambda(&s, 0).unwrap(), 0.0);
        assert!((anneal_lambda(&s, 100).unwrap() - LAMBDA_T).abs() < 1e-10);
        let big = AnnealSchedule::new(0.3, 10);
        assert!(anneal_lambda(&big, 10).unwrap() <= 0.99);
        assert!(matches!(anneal_lambda(&s, 101), Err(Error::Range { .. })));
    }

    #[test]
    fn literal_schedule_is_non_positive() {
        let s = AnnealSchedule {
            literal: true,
            ..AnnealSchedule::new(0.1, 50)
        };
        assert_eq!(anneal_lambda(&s, 0).unwrap(), 0.0);
        assert!((anneal_lambda(&s, 50).unwrap() + LAMBDA_T).abs() < 1e-10);
    }

    #[test]
    fn residual_examples() {
        assert_eq!(residual(&[1.0, 1.0], &[1.0, 0.0], 0.5).unwrap(), vec![1.0, 2.0]);
        let z = [0.3, -0.2, 0.9];
        for l in [0.0, 0.25, 0.7, 0.99] {
            let r = residual(&z, &z, l).unwrap();
            assert!(r.iter().zip(&z).all(|(a, b)| (a - b).abs() < 1e-14));
        }
        assert!(matches!(residual(&z, &z, 1.0), Err(Error::Parameter(_))));
    }

    #[test]
    fn entropy_bounds() {
        // Equidistant references: the orthonormal basis seen from the diagonal.
        let refs: Vec<Vec<f64>> = (0..3).map(|k| (0..3).map(|i| if i == k { 1.0 } else { 0.0 }).collect()).collect();
        let l = residual_entropy_loss(&[1.0, 1.0, 1.0], &refs, 0.07).unwrap();
        assert!((l + 3f64.ln()).abs() < 1e-14);
        let sharp = residual_entropy_loss(&[1.0, 0.1, 0.0], &refs, 1e-3).unwrap();
        assert!(sharp.abs() < 1e-12);
        assert!(matches!(residual_entropy_loss(&[0.0; 3], &refs, 0.07), Err(Error::Numeric(_))));
        assert!(matches!(residual_entropy_loss(&[1.0; 3], &refs[..1], 0.07), Err(Error::Parameter(_))));
    }

    #[test]
    fn entropy_matches_scalar_oracle() {
        // Independent recomputation: cosines by hand, log-sum-exp entropy.
        let refs = vec![vec![1.0, 0.0], vec![0.6, 0.8], vec![-1.0, 0.0]];
        let z = [0.8, 0.6];
        let cos = [0.8, 0.6 * 0.8 + 0.8 * 0.6, -0.8];
        let tau = 0.07;
        let m = cos.iter().cloned().fold(f64::MIN, f64::max) / tau;
        let lse = m + cos.iter().map(|c| (c / tau - m).exp()).sum::<f64>().ln();
        let expect: f64 = cos.iter().map(|c| (c / tau - lse).exp() * (c / tau - lse)).sum();
        let got = residual_entropy_loss(&z, &refs, tau).unwrap();
        assert!((got - expect).abs() < 1e-12, "{got} vs {expect}");
    }

    fn unit_rand(rng: &mut impl Rng, e: usize) -> Vec<f64> {
        unit(&(0..e).map(|_| rng.gen::<f64>() - 0.5).collect::<Vec<_>>()).unwrap()
    }

    fn mat(rows: &[Vec<f64>]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn degenerate_lambda_zero_without_dropout() {
        let mut rng = rng_for(2);
        let imgs: Vec<_> = (0..3).map(|_| unit_rand(&mut rng, 4)).collect();
        let txt: Vec<_> = (0..2).map(|_| unit_rand(&mut rng, 4)).collect();
        let labels = [0, 1, 1];
        let b = BatchEmbeddings {
            image_dropped: &imgs,
            image_clean: &imgs,
            text_dropped: &txt,
            text_clean: &txt,
            labels: &labels,
        };
        let terms = LossTerms {
            residual_entropy: true,
            anchor_weight: 0.0,
        };
        let l = total_loss(&b, 0.0, 0.5, terms).unwrap();
        let re_v: f64 = imgs.iter().map(|z| residual_entropy_loss(z, &txt, 0.5).unwrap()).sum::<f64>() / 3.0;
        assert!((l.re_v - re_v).abs() < 1e-15);
        assert_eq!(l.total, l.ce + l.re_v + l.re_t);
    }

    #[test]
    fn two_by_two_hand_computation() {
        let s = std::f64::consts::FRAC_1_SQRT_2;
        let img_d = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let img_o = vec![vec![s, s], vec![s, -s]];
        let txt_d = vec![vec![1.0, 0.0], vec![s, s]];
        let txt_o = vec![vec![0.0, 1.0], vec![1.0, 0.0]];
        let labels = [0, 1];
        let (lambda, tau) = (0.5, 1.0);
        let b = BatchEmbeddings {
            image_dropped: &img_d,
            image_clean: &img_o,
            text_dropped: &txt_d,
            text_clean: &txt_o,
            labels: &labels,
        };
        let terms = LossTerms {
            residual_entropy: true,
            anchor_weight: 0.0,
        };
        let got = total_loss(&b, lambda, tau, terms).unwrap();

        let ce0 = -(1.0f64.exp() / (1.0f64.exp() + s.exp())).ln();
        let ce1 = -(s.exp() / (0.0f64.exp() + s.exp())).ln();
        let ce = (ce0 + ce1) / 2.0;
        let h = |a: f64, b: f64| {
            let (pa, pb) = (a.exp() / (a.exp() + b.exp()), b.exp() / (a.exp() + b.exp()));
            pa * pa.ln() + pb * pb.ln()
        };
        let cos2 = |x: [f64; 2], r: [f64; 2]| {
            let n = (x[0] * x[0] + x[1] * x[1]).sqrt();
            (x[0] * r[0] + x[1] * r[1]) / n
        };
        // z_r = 2 z_d − z_o.
        let rv0 = [2.0 - s, -s];
        let rv1 = [-s, 2.0 + s];
        let re_v = (h(cos2(rv0, [0.0, 1.0]), cos2(rv0, [1.0, 0.0])) + h(cos2(rv1, [0.0, 1.0]), cos2(rv1, [1.0, 0.0]))) / 2.0;
        let rt0 = [2.0, -1.0];
        let rt1 = [2.0 * s - 1.0, 2.0 * s];
        let re_t = (h(cos2(rt0, [s, s]), cos2(rt0, [s, -s])) + h(cos2(rt1, [s, s]), cos2(rt1, [s, -s]))) / 2.0;
        assert!((got.ce - ce).abs() < 1e-12);
        assert!((got.re_v - re_v).abs() < 1e-12);
        assert!((got.re_t - re_t).abs() < 1e-12);
        assert!((got.total - (ce + re_v + re_t)).abs() < 1e-12);
    }

    #[test]
    fn tape_matches_values() {
        let mut rng = rng_for(5);
        let id: Vec<_> = (0..4).map(|_| unit_rand(&mut rng, 3)).collect();
        let io: Vec<_> = (0..4).map(|_| unit_rand(&mut rng, 3)).collect();
        let td: Vec<_> = (0..3).map(|_| unit_rand(&mut rng, 3)).collect();
        let to: Vec<_> = (0..3).map(|_| unit_rand(&mut rng, 3)).collect();
        let labels = [2, 0, 1, 2];
        let terms = LossTerms {
            residual_entropy: true,
            anchor_weight: 0.7,
        };
        let value = total_loss(
            &BatchEmbeddings {
                image_dropped: &id,
                image_clean: &io,
                text_dropped: &td,
                text_clean: &to,
                labels: &labels,
            },
            0.3,
            0.2,
            terms,
        )
        .unwrap();
        let mut tape = Tape::new();
        let a = tape.param(mat(&id));
        let t = tape.param(mat(&td));
        let (io_t, to_t) = (mat(&io), mat(&to));
        let tb = TapeBatch {
            image_dropped: a,
            text_dropped: t,
            image_clean: &io_t,
            text_clean: &to_t,
            labels: &labels,
        };
        let (_, tb_out) = total_loss_tape(&mut tape, &tb, 0.3, 0.2, terms).unwrap();
        for (x, y) in [
            (value.ce, tb_out.ce),
            (value.re_v, tb_out.re_v),
            (value.re_t, tb_out.re_t),
            (value.anchor, tb_out.anchor),
            (value.total, tb_out.total),
        ] {
            assert!((x - y).abs() < 1e-12, "{x} vs {y}");
        }
    }

    #[test]
    fn bad_label_is_data_error() {
        let v = vec![vec![1.0, 0.0]];
        let t = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let b = BatchEmbeddings {
            image_dropped: &v,
            image_clean: &v,
            text_dropped: &t,
            text_clean: &t,
            labels: &[5],
        };
        let terms = LossTerms {
            residual_entropy: false,
            anchor_weight: 0.0,
        };
        assert!(matches!(total_loss(&b, 0.0, 1.0, terms), Err(Error::Data(_))));
    }
}
