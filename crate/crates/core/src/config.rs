//! TOML run configuration.
//!
//! Every section and key is optional and falls back to the defaults below;
//! unknown keys are errors. Errors name the offending key path and, when it
//! appears in the file, its line.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::ablation::AblationConfig;
use crate::data::DataConfig;
use crate::dropout::DropoutMode;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::residual::AnnealSchedule;
use crate::train::TrainConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropoutKind {
    None,
    Iwtd,
    Vanilla,
    DropBlock,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DropoutSection {
    pub mode: DropoutKind,
    pub p_min: f64,
    pub p_max: f64,
    /// Rate for `vanilla` and `drop_block`.
    pub p: f64,
    pub block_size: usize,
}

impl Default for DropoutSection {
    fn default() -> Self {
        Self {
            mode: DropoutKind::Iwtd,
            p_min: 0.1,
            p_max: 0.5,
            p: 0.3,
            block_size: 2,
        }
    }
}

impl DropoutSection {
    pub fn mode(&self) -> DropoutMode {
        match self.mode {
            DropoutKind::None => DropoutMode::None,
            DropoutKind::Iwtd => DropoutMode::Iwtd {
                p_min: self.p_min,
                p_max: self.p_max,
            },
            DropoutKind::Vanilla => DropoutMode::Vanilla { p: self.p },
            DropoutKind::DropBlock => DropoutMode::DropBlock {
                p: self.p,
                block_size: self.block_size,
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleSection {
    pub lambda0: f64,
    pub epsilon: f64,
    /// Use the unclamped, non-increasing formula instead of the annealed one.
    pub literal: bool,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        Self {
            lambda0: 0.1,
            epsilon: 0.01,
            literal: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub steps: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub residual_entropy: bool,
    pub anchor_weight: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            steps: 800,
            learning_rate: 0.05,
            batch_size: 16,
            residual_entropy: true,
            anchor_weight: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationSection {
    pub seeds: Vec<u64>,
    pub vanilla_p: f64,
    pub anchor_weight: f64,
}

impl Default for AblationSection {
    fn default() -> Self {
        Self {
            seeds: vec![0, 1, 2, 3, 4],
            vanilla_p: 0.3,
            anchor_weight: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisSection {
    /// Index into the held-out base pool of the image used for the heatmap.
    pub heatmap_sample: usize,
    /// Retention plans sampled for the retention-sum comparison.
    pub retention_plans: usize,
}

impl Default for AnalysisSection {
    fn default() -> Self {
        Self {
            heatmap_sample: 0,
            retention_plans: 1000,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    /// Root seed; required by every command unless given on the command line.
    pub seed: Option<u64>,
    pub encoder: EncoderConfig,
    pub data: DataConfig,
    pub dropout: DropoutSection,
    pub schedule: ScheduleSection,
    pub train: TrainSection,
    pub ablation: AblationSection,
    pub analysis: AnalysisSection,
}

/// 1-based line of the `key` assignment under `[section]` (top level when
/// `section` is empty).
fn locate(source: &str, path: &str) -> Option<usize> {
    let (section, key) = path.rsplit_once('.').unwrap_or(("", path));
    let mut current = String::new();
    for (i, line) in source.lines().enumerate() {
        let t = line.trim();
        if let Some(h) = t.strip_prefix('[').and_then(|h| h.strip_suffix(']')) {
            current = h.trim().to_string();
            continue;
        }
        if current == section {
            if let Some((k, _)) = t.split_once('=') {
                if k.trim().trim_matches('"') == key {
                    return Some(i + 1);
                }
            }
        }
    }
    None
}

/// Key path and line at byte `offset`.
fn key_at(source: &str, offset: usize) -> (String, usize) {
    let offset = offset.min(source.len());
    let line_no = source[..offset].matches('\n').count() + 1;
    let mut section = String::new();
    for line in source[..offset].lines() {
        let t = line.trim();
        if let Some(h) = t.strip_prefix('[').and_then(|h| h.strip_suffix(']')) {
            section = h.trim().to_string();
        }
    }
    let line = source.lines().nth(line_no - 1).unwrap_or("");
    let key = line.split_once('=').map_or(line, |(k, _)| k).trim().trim_matches('"').to_string();
    let path = match (section.is_empty(), key.is_empty() || key.starts_with('[')) {
        (_, true) => section,
        (true, false) => key,
        (false, false) => format!("{section}.{key}"),
    };
    (path, line_no)
}

impl Config {
    /// Parses and validates TOML text.
    pub fn parse(source: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(source).map_err(|e| {
            let (key, line) = e.span().map_or((String::new(), None), |s| {
                let (k, l) = key_at(source, s.start);
                (k, Some(l))
            });
            Error::Config {
                key,
                line,
                message: e.message().to_string(),
            }
        })?;
        cfg.validate().map_err(|e| match e {
            Error::Config { key, line: None, message } => Error::Config {
                line: locate(source, &key),
                key,
                message,
            },
            other => other,
        })?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration is always representable")
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let canon = serde_json::to_vec(self).expect("configuration is always serializable");
        hex::encode(Sha256::digest(canon))
    }

    pub fn validate(&self) -> Result<()> {
        let err = |key: &str, message: String| Error::Config {
            key: key.into(),
            line: None,
            message,
        };
        self.encoder.validate()?;
        self.data.validate()?;
        if self.encoder.grid != self.data.grid {
            return Err(err(
                "data.grid",
                format!("data.grid = {} but encoder.grid = {}", self.data.grid, self.encoder.grid),
            ));
        }
        if self.encoder.patch_dim != self.data.patch_dim {
            return Err(err(
                "data.patch_dim",
                format!("data.patch_dim = {} but encoder.patch_dim = {}", self.data.patch_dim, self.encoder.patch_dim),
            ));
        }
        if self.data.attributes + 1 > self.encoder.vocab_size {
            return Err(err(
                "encoder.vocab_size",
                format!("{} attributes need a vocabulary of at least {}", self.data.attributes, self.data.attributes + 1),
            ));
        }
        let d = &self.dropout;
        if !(0.0..1.0).contains(&d.p_min) {
            return Err(err("dropout.p_min", format!("must lie in [0, 1), got {}", d.p_min)));
        }
        if !(0.0..1.0).contains(&d.p_max) {
            return Err(err("dropout.p_max", format!("must lie in [0, 1), got {}", d.p_max)));
        }
        if d.p_min > d.p_max {
            return Err(err("dropout.p_min", format!("p_min ({}) exceeds p_max ({})", d.p_min, d.p_max)));
        }
        if !(0.0..1.0).contains(&d.p) {
            return Err(err("dropout.p", format!("must lie in [0, 1), got {}", d.p)));
        }
        if d.block_size == 0 {
            return Err(err("dropout.block_size", "must be at least 1".into()));
        }
        let s = &self.schedule;
        if !(s.lambda0 > 0.0 && s.lambda0 < 1.0) {
            return Err(err("schedule.lambda0", format!("must lie in (0, 1), got {}", s.lambda0)));
        }
        if !(s.epsilon > 0.0 && s.epsilon < 1.0) {
            return Err(err("schedule.epsilon", format!("must lie in (0, 1), got {}", s.epsilon)));
        }
        let t = &self.train;
        if t.steps == 0 {
            return Err(err("train.steps", "must be at least 1".into()));
        }
        if !(t.learning_rate >= 0.0 && t.learning_rate.is_finite()) {
            return Err(err("train.learning_rate", format!("must be non-negative, got {}", t.learning_rate)));
        }
        if t.batch_size == 0 {
            return Err(err("train.batch_size", "must be at least 1".into()));
        }
        if !(t.anchor_weight >= 0.0 && t.anchor_weight.is_finite()) {
            return Err(err("train.anchor_weight", format!("must be non-negative, got {}", t.anchor_weight)));
        }
        let a = &self.ablation;
        if a.seeds.len() < 3 {
            return Err(err("ablation.seeds", format!("need at least 3 seeds, got {}", a.seeds.len())));
        }
        if !(0.0..1.0).contains(&a.vanilla_p) {
            return Err(err("ablation.vanilla_p", format!("must lie in [0, 1), got {}", a.vanilla_p)));
        }
        if !(a.anchor_weight >= 0.0 && a.anchor_weight.is_finite()) {
            return Err(err("ablation.anchor_weight", format!("must be non-negative, got {}", a.anchor_weight)));
        }
        if self.analysis.heatmap_sample >= self.data.base_classes * self.data.test_per_class {
            return Err(err(
                "analysis.heatmap_sample",
                format!("index {} is outside the held-out base pool", self.analysis.heatmap_sample),
            ));
        }
        Ok(())
    }

    /// The configured seed, or an error naming the missing key.
    pub fn require_seed(&self) -> Result<u64> {
        self.seed.ok_or_else(|| Error::Config {
            key: "seed".into(),
            line: None,
            message: "a seed is required (config `seed` or --seed)".into(),
        })
    }

    pub fn schedule(&self) -> AnnealSchedule {
        AnnealSchedule {
            lambda0: self.schedule.lambda0,
            total_steps: self.train.steps,
            epsilon: self.schedule.epsilon,
            literal: self.schedule.literal,
        }
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            encoder: self.encoder.clone(),
            dropout: self.dropout.mode(),
            schedule: self.schedule(),
            learning_rate: self.train.learning_rate,
            batch_size: self.train.batch_size,
            seed,
            residual_entropy: self.train.residual_entropy,
            anchor_weight: self.train.anchor_weight,
        }
    }

    pub fn ablation_config(&self) -> AblationConfig {
        AblationConfig {
            train: self.train_config(0),
            data: self.data.clone(),
            p_min: self.dropout.p_min,
            p_max: self.dropout.p_max,
            vanilla_p: self.ablation.vanilla_p,
            anchor_weight: self.ablation.anchor_weight,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config_err(r: Result<Config>) -> (String, Option<usize>, String) {
        match r {
            Err(Error::Config { key, line, message }) => (key, line, message),
            other => panic!("expected a config error, got {other:?}"),
        }
    }

    #[test]
    fn empty_file_gives_defaults() {
        let c = Config::parse("").unwrap();
        assert_eq!(c, Config::default());
        assert_eq!((c.dropout.p_min, c.dropout.p_max, c.schedule.lambda0), (0.1, 0.5, 0.1));
        assert!(c.require_seed().is_err());
    }

    #[test]
    fn unknown_key_has_path_and_line() {
        let (key, line, msg) = config_err(Config::parse("seed = 1\n[dropout]\np_min = 0.2\npmax = 0.4\n"));
        assert_eq!(key, "dropout.pmax");
        assert_eq!(line, Some(4));
        assert!(msg.contains("pmax"));
    }

    #[test]
    fn type_mismatch_has_path_and_line() {
        let (key, line, _) = config_err(Config::parse("[train]\n\nsteps = \"many\"\n"));
        assert_eq!(key, "train.steps");
        assert_eq!(line, Some(3));
    }

    #[test]
    fn inverted_bounds_echo_both_values() {
        let (key, line, msg) = config_err(Config::parse("[dropout]\np_min = 0.6\np_max = 0.5\n"));
        assert_eq!(key, "dropout.p_min");
        assert_eq!(line, Some(2));
        assert!(msg.contains("0.6") && msg.contains("0.5"), "{msg}");
    }

    #[test]
    fn serialize_round_trip() {
        let mut c = Config::default();
        c.seed = Some(11);
        c.dropout.mode = DropoutKind::DropBlock;
        c.train.learning_rate = 0.123456789;
        let back = Config::parse(&c.to_toml()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
        c.seed = Some(12);
        assert_ne!(back.hash(), c.hash());
    }

    #[test]
    fn encoder_constraint_gets_line() {
        let (key, line, _) = config_err(Config::parse("[encoder]\nmodel_dim = 30\nheads = 4\n"));
        assert!(key.starts_with("encoder."), "{key}");
        assert!(line.is_some());
    }
}
