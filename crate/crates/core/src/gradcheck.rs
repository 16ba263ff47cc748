//! Central finite-difference oracle for analytic gradients.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One coordinate of a gradient comparison.
#[derive(Clone, Debug, Serialize)]
pub struct GradEntry {
    pub param: usize,
    pub coord: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradReport {
    pub entries: Vec<GradEntry>,
    pub max_rel_error: f64,
}

impl GradReport {
    /// Entry with the largest relative error.
    pub fn worst(&self) -> Option<&GradEntry> {
        self.entries
            .iter()
            .max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }
}

/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares `analytic` gradients against `(f(θ+ε) − f(θ−ε)) / 2ε` for every
/// coordinate of every tensor in `params`.
///
/// `f` must be deterministic; it is evaluated twice at the base point and a
/// mismatch is reported as [`Error::OracleValidity`].
pub fn finite_diff_check<F>(params: &[Tensor], analytic: &[Tensor], eps: f64, mut f: F) -> Result<GradReport>
where
    F: FnMut(&[Tensor]) -> Result<f64>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::Range {
            value: eps,
            lo: 1e-7,
            hi: 1e-3,
        });
    }
    if analytic.len() != params.len() || params.iter().zip(analytic).any(|(p, a)| p.shape() != a.shape()) {
        return Err(Error::Contract("analytic gradients do not match parameter shapes".into()));
    }
    let base = f(params)?;
    let again = f(params)?;
    if base.to_bits() != again.to_bits() {
        return Err(Error::OracleValidity(format!(
            "function is not deterministic: {base} vs {again}"
        )));
    }

    let mut work = params.to_vec();
    let mut entries = Vec::new();
    let mut max_rel_error: f64 = 0.0;
    for (pi, grad) in analytic.iter().enumerate() {
        for ci in 0..params[pi].numel() {
            let orig = params[pi].data()[ci];
            work[pi].data_mut()[ci] = orig + eps;
            let plus = f(&work)?;
            work[pi].data_mut()[ci] = orig - eps;
            let minus = f(&work)?;
            work[pi].data_mut()[ci] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = grad.data()[ci];
            let rel_error = relative_error(a, numeric);
            max_rel_error = max_rel_error.max(rel_error);
            entries.push(GradEntry {
                param: pi,
                coord: ci,
                analytic: a,
                numeric,
                rel_error,
            });
        }
    }
    Ok(GradReport {
        entries,
        max_rel_error,
    })
}
