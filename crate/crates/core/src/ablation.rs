//! Four-arm component ablation over several seeds.

use serde::{Deserialize, Serialize};

use crate::data::{generate_dataset, DataConfig};
use crate::dropout::DropoutMode;
use crate::error::{Error, Result};
use crate::train::{evaluate, hm, train, Metrics, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arm {
    /// No dropout; cross-entropy plus the dual-branch squared-distance anchor.
    Baseline,
    /// Anchor plus uniform token dropout.
    Vanilla,
    /// Anchor plus importance-weighted token dropout.
    Iwtd,
    /// Importance-weighted dropout with residual-entropy regularization.
    IwtdRe,
}

impl Arm {
    pub const ALL: [Arm; 4] = [Arm::Baseline, Arm::Vanilla, Arm::Iwtd, Arm::IwtdRe];

    pub fn as_str(self) -> &'static str {
        match self {
            Arm::Baseline => "baseline",
            Arm::Vanilla => "vanilla",
            Arm::Iwtd => "iwtd",
            Arm::IwtdRe => "iwtd_re",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationConfig {
    pub train: TrainConfig,
    pub data: DataConfig,
    /// Importance-weighted probability bounds.
    pub p_min: f64,
    pub p_max: f64,
    /// Rate of the uniform-dropout arm.
    pub vanilla_p: f64,
    pub anchor_weight: f64,
}

/// Training configuration of one arm; `seed` replaces the template seed.
pub fn arm_config(cfg: &AblationConfig, arm: Arm, seed: u64) -> TrainConfig {
    let mut t = cfg.train.clone();
    t.seed = seed;
    let iwtd = DropoutMode::Iwtd {
        p_min: cfg.p_min,
        p_max: cfg.p_max,
    };
    (t.dropout, t.residual_entropy, t.anchor_weight) = match arm {
        Arm::Baseline => (DropoutMode::None, false, cfg.anchor_weight),
        Arm::Vanilla => (DropoutMode::Vanilla { p: cfg.vanilla_p }, false, cfg.anchor_weight),
        Arm::Iwtd => (iwtd, false, cfg.anchor_weight),
        Arm::IwtdRe => (iwtd, true, 0.0),
    };
    t
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub arm: Arm,
    pub seed: u64,
    pub metrics: Option<Metrics>,
    /// Set when the arm failed for this seed.
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmSummary {
    pub arm: Arm,
    pub median: Option<Metrics>,
    pub failed_seeds: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
    pub summary: Vec<ArmSummary>,
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        (xs[n / 2 - 1] + xs[n / 2]) / 2.0
    }
}

/// Trains and evaluates every arm for every seed. Each seed gets its own
/// dataset, shared by the four arms; failed runs are reported in their rows
/// rather than aborting the table.
pub fn run_ablation(cfg: &AblationConfig, seeds: &[u64]) -> Result<AblationTable> {
    run_ablation_with(cfg, seeds, |_, _| {})
}

/// As [`run_ablation`], calling `progress` after each finished run.
pub fn run_ablation_with(cfg: &AblationConfig, seeds: &[u64], mut progress: impl FnMut(&AblationRow, usize)) -> Result<AblationTable> {
    if seeds.len() < 3 {
        return Err(Error::Parameter(format!("an ablation needs at least 3 seeds, got {}", seeds.len())));
    }
    let mut rows = Vec::with_capacity(4 * seeds.len());
    for &seed in seeds {
        let data = generate_dataset(&cfg.data, seed)?;
        for arm in Arm::ALL {
            let outcome = train(&arm_config(cfg, arm, seed), &data).and_then(|(state, _)| evaluate(&state, &data));
            let row = match outcome {
                Ok(m) => AblationRow {
                    arm,
                    seed,
                    metrics: Some(m),
                    error: None,
                },
                Err(e) => AblationRow {
                    arm,
                    seed,
                    metrics: None,
                    error: Some(e.to_string()),
                },
            };
            rows.push(row);
            progress(rows.last().expect("just pushed"), rows.len());
        }
    }
    let summary = Arm::ALL
        .iter()
        .map(|&arm| {
            let mine: Vec<_> = rows.iter().filter(|r| r.arm == arm).collect();
            let ok: Vec<Metrics> = mine.iter().filter_map(|r| r.metrics).collect();
            let median = (!ok.is_empty()).then(|| {
                let base = median(ok.iter().map(|m| m.base_acc).collect());
                let novel = median(ok.iter().map(|m| m.novel_acc).collect());
                Metrics {
                    base_acc: base,
                    novel_acc: novel,
                    hm: median(ok.iter().map(|m| m.hm).collect()),
                }
            });
            ArmSummary {
                arm,
                median,
                failed_seeds: mine.iter().filter(|r| r.metrics.is_none()).map(|r| r.seed).collect(),
            }
        })
        .collect();
    Ok(AblationTable {
        seeds: seeds.to_vec(),
        rows,
        summary,
    })
}

impl AblationTable {
    pub fn median_hm(&self, arm: Arm) -> Option<f64> {
        self.summary.iter().find(|s| s.arm == arm).and_then(|s| s.median).map(|m| m.hm)
    }

    pub fn hm(&self, arm: Arm, seed: u64) -> Option<f64> {
        self.rows.iter().find(|r| r.arm == arm && r.seed == seed).and_then(|r| r.metrics).map(|m| m.hm)
    }

    /// Tab-separated summary: one line per arm with median accuracies.
    pub fn summary_tsv(&self) -> String {
        let mut out = String::from("arm\tmedian_base_acc\tmedian_novel_acc\tmedian_hm\tfailed_seeds\n");
        for s in &self.summary {
            let (b, n, h) = s.median.map_or((f64::NAN, f64::NAN, f64::NAN), |m| (m.base_acc, m.novel_acc, m.hm));
            out.push_str(&format!("{}\t{b:.4}\t{n:.4}\t{h:.4}\t{:?}\n", s.arm.as_str(), s.failed_seeds));
        }
        out
    }

    /// Checks the expected ordering of the arms.
    pub fn ordering(&self) -> OrderingReport {
        let get = |arm| self.median_hm(arm).unwrap_or(f64::NAN);
        let (b, v, i, r) = (get(Arm::Baseline), get(Arm::Vanilla), get(Arm::Iwtd), get(Arm::IwtdRe));
        let per_seed: Vec<bool> = self
            .seeds
            .iter()
            .map(|&s| {
                let h = |arm| self.hm(arm, s).unwrap_or(f64::NAN);
                seed_ordering(h(Arm::Baseline), h(Arm::Vanilla), h(Arm::Iwtd), h(Arm::IwtdRe))
            })
            .collect();
        OrderingReport {
            median_holds: seed_ordering(b, v, i, r),
            seeds_holding: per_seed.iter().filter(|&&x| x).count(),
            seeds: per_seed.len(),
        }
    }
}

fn seed_ordering(baseline: f64, vanilla: f64, iwtd: f64, iwtd_re: f64) -> bool {
    baseline < iwtd && iwtd <= iwtd_re && iwtd > vanilla
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct OrderingReport {
    /// `baseline < iwtd ≤ iwtd_re` and `iwtd > vanilla` on median HM.
    pub median_holds: bool,
    /// Seeds on which the same ordering holds for that seed's HM values.
    pub seeds_holding: usize,
    pub seeds: usize,
}

impl OrderingReport {
    /// The median ordering holds and no majority of seeds contradicts it.
    pub fn passes(&self) -> bool {
        self.median_holds && 2 * (self.seeds - self.seeds_holding) <= self.seeds
    }
}

/// Row metrics as `{arm, seed, base_acc, novel_acc, hm}`.
pub fn metrics_json(arm: Arm, seed: u64, m: &Metrics) -> serde_json::Value {
    serde_json::json!({
        "arm": arm.as_str(),
        "seed": seed,
        "base_acc": m.base_acc,
        "novel_acc": m.novel_acc,
        "hm": hm(m.base_acc, m.novel_acc),
    })
}
