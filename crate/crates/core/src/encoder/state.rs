use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Shape and size of both towers.
///
/// Defaults are desk scale. The larger reference setting (64 bridge tokens,
/// prompt length 4, 16 supplementary text tokens, deeper prompting) is
/// reachable by changing these fields.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub layers: usize,
    pub heads: usize,
    pub model_dim: usize,
    pub mlp_dim: usize,
    /// Supplementary learnable text tokens per prompted layer.
    pub prompt_len_text: usize,
    pub prompt_len_vision: usize,
    /// Number of leading layers that receive fresh prompts.
    pub prompt_depth: usize,
    /// Number of leading layers followed by token dropout.
    pub dropout_layers: usize,
    /// Width of the bridge-token space.
    pub shared_dim: usize,
    pub bridge_count: usize,
    pub embed_dim: usize,
    pub temperature: f64,
    pub vocab_size: usize,
    pub max_text_len: usize,
    /// Patches per side of the square image grid.
    pub grid: usize,
    pub patch_dim: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            heads: 2,
            model_dim: 32,
            mlp_dim: 64,
            prompt_len_text: 16,
            prompt_len_vision: 4,
            prompt_depth: 1,
            dropout_layers: 1,
            shared_dim: 16,
            bridge_count: 8,
            embed_dim: 16,
            temperature: 0.07,
            vocab_size: 64,
            max_text_len: 32,
            grid: 4,
            patch_dim: 8,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |key: &str, message: String| {
            Err(Error::Config {
                key: format!("encoder.{key}"),
                line: None,
                message,
            })
        };
        if self.layers == 0 || self.heads == 0 || self.model_dim == 0 || self.mlp_dim == 0 {
            return fail("layers", "layers, heads, model_dim and mlp_dim must be positive".into());
        }
        if !self.model_dim.is_multiple_of(self.heads) {
            return fail(
                "heads",
                format!("model_dim {} not divisible by heads {}", self.model_dim, self.heads),
            );
        }
        if self.dropout_layers > self.layers {
            return fail(
                "dropout_layers",
                format!("{} exceeds layers {}", self.dropout_layers, self.layers),
            );
        }
        if self.prompt_depth > self.layers {
            return fail(
                "prompt_depth",
                format!("{} exceeds layers {}", self.prompt_depth, self.layers),
            );
        }
        if self.prompt_depth == 0 && (self.prompt_len_text > 0 || self.prompt_len_vision > 0) {
            return fail("prompt_depth", "prompts need at least one prompted layer".into());
        }
        if self.shared_dim == 0 || self.bridge_count == 0 || self.embed_dim == 0 {
            return fail("shared_dim", "shared_dim, bridge_count and embed_dim must be positive".into());
        }
        if !(self.temperature > 0.0) {
            return fail("temperature", format!("must be positive, got {}", self.temperature));
        }
        if self.grid == 0 || self.patch_dim == 0 || self.vocab_size == 0 {
            return fail("grid", "grid, patch_dim and vocab_size must be positive".into());
        }
        if self.max_text_len < 2 + self.prompt_len_text + 1 {
            return fail(
                "max_text_len",
                format!("{} leaves no room for content after {} prompts", self.max_text_len, self.prompt_len_text),
            );
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.heads
    }

    pub fn patches(&self) -> usize {
        self.grid * self.grid
    }

    /// Number of prompt slots of a tower.
    pub fn prompt_len(&self, modality: super::Modality) -> usize {
        match modality {
            super::Modality::Vision => self.prompt_len_vision,
            super::Modality::Text => self.prompt_len_text,
        }
    }
}

/// Index of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered, named parameter tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    trainable: Vec<bool>,
}

impl ParamStore {
    fn add(&mut self, name: String, tensor: Tensor, trainable: bool) -> ParamId {
        self.names.push(name);
        self.tensors.push(tensor);
        self.trainable.push(trainable);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.trainable[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.ids().filter(|id| self.trainable[id.0]).collect()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    /// Total element count of trainable tensors.
    pub fn trainable_count(&self) -> usize {
        self.trainable_ids().iter().map(|id| self.get(*id).numel()).sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub(crate) struct LayerIds {
    pub wq: Vec<ParamId>,
    pub wk: Vec<ParamId>,
    pub wv: Vec<ParamId>,
    pub wo: Vec<ParamId>,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

#[derive(Clone, Debug, PartialEq)]
pub(crate) struct TowerIds {
    /// Patch projection (vision) or token table (text).
    pub input: ParamId,
    /// `[CLS]` for vision; `[BOS]`, `[EOS]` for text.
    pub globals: Vec<ParamId>,
    pub pos: ParamId,
    pub prompts: Vec<ParamId>,
    pub layers: Vec<LayerIds>,
    pub head: ParamId,
}

/// All weights of the dual encoder. Backbone tensors are frozen after random
/// initialization; prompts, bridge tokens, projections and readout heads train.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderState {
    pub(crate) cfg: EncoderConfig,
    pub params: ParamStore,
    pub(crate) vision: TowerIds,
    pub(crate) text: TowerIds,
    pub(crate) bridge: ParamId,
    pub(crate) proj_vision: ParamId,
    pub(crate) proj_text: ParamId,
}

fn normal<R: Rng + ?Sized>(rng: &mut R, shape: &[usize], std: f64) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::from_parts(shape.to_vec(), (0..n).map(|_| std * Distribution::<f64>::sample(&StandardNormal, rng)).collect())
}

const PROMPT_STD: f64 = 0.1;

impl EncoderState {
    /// Random initialization. Identical `(cfg, rng state)` gives identical weights.
    pub fn init<R: Rng + ?Sized>(cfg: &EncoderConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let mut params = ParamStore::default();
        let d = cfg.model_dim;
        let vision = Self::init_tower(&mut params, cfg, super::Modality::Vision, rng);
        let text = Self::init_tower(&mut params, cfg, super::Modality::Text, rng);
        let s = 1.0 / (cfg.shared_dim as f64).sqrt();
        let bridge = params.add("bridge".into(), normal(rng, &[cfg.bridge_count, cfg.shared_dim], s), true);
        let proj_vision = params.add("proj.vision".into(), normal(rng, &[d, cfg.shared_dim], s), true);
        let proj_text = params.add("proj.text".into(), normal(rng, &[d, cfg.shared_dim], s), true);
        Ok(Self {
            cfg: cfg.clone(),
            params,
            vision,
            text,
            bridge,
            proj_vision,
            proj_text,
        })
    }

    fn init_tower<R: Rng + ?Sized>(
        params: &mut ParamStore,
        cfg: &EncoderConfig,
        modality: super::Modality,
        rng: &mut R,
    ) -> TowerIds {
        let d = cfg.model_dim;
        let tag = modality.as_str();
        let (input, globals, pos_len) = match modality {
            super::Modality::Vision => {
                let input = params.add(
                    format!("{tag}.patch_proj"),
                    normal(rng, &[cfg.patch_dim, d], 1.0 / (cfg.patch_dim as f64).sqrt()),
                    false,
                );
                let cls = params.add(format!("{tag}.cls"), normal(rng, &[1, d], 1.0), false);
                (input, vec![cls], 1 + cfg.patches())
            }
            super::Modality::Text => {
                let input = params.add(format!("{tag}.embed"), normal(rng, &[cfg.vocab_size, d], 1.0), false);
                let bos = params.add(format!("{tag}.bos"), normal(rng, &[1, d], 1.0), false);
                let eos = params.add(format!("{tag}.eos"), normal(rng, &[1, d], 1.0), false);
                (input, vec![bos, eos], cfg.max_text_len)
            }
        };
        let pos = params.add(format!("{tag}.pos"), normal(rng, &[pos_len, d], 0.1), false);
        let inv = 1.0 / (d as f64).sqrt();
        let dh = cfg.head_dim();
        let layers = (0..cfg.layers)
            .map(|l| {
                let mut per_head = |w: &str, rows: usize, cols: usize, std: f64| -> Vec<ParamId> {
                    (0..cfg.heads)
                        .map(|h| params.add(format!("{tag}.layer.{l}.{w}.{h}"), normal(rng, &[rows, cols], std), false))
                        .collect()
                };
                let wq = per_head("wq", d, dh, inv);
                let wk = per_head("wk", d, dh, inv);
                let wv = per_head("wv", d, dh, inv);
                let wo = per_head("wo", dh, d, inv);
                LayerIds {
                    wq,
                    wk,
                    wv,
                    wo,
                    w1: params.add(format!("{tag}.layer.{l}.w1"), normal(rng, &[d, cfg.mlp_dim], inv), false),
                    b1: params.add(format!("{tag}.layer.{l}.b1"), Tensor::zeros(&[cfg.mlp_dim]), false),
                    w2: params.add(
                        format!("{tag}.layer.{l}.w2"),
                        normal(rng, &[cfg.mlp_dim, d], 1.0 / (cfg.mlp_dim as f64).sqrt()),
                        false,
                    ),
                    b2: params.add(format!("{tag}.layer.{l}.b2"), Tensor::zeros(&[d]), false),
                }
            })
            .collect();
        let n_prompt = cfg.prompt_len(modality);
        let prompts = if n_prompt == 0 {
            Vec::new()
        } else {
            (0..cfg.prompt_depth)
                .map(|i| params.add(format!("{tag}.prompt.{i}"), normal(rng, &[n_prompt, d], PROMPT_STD), true))
                .collect()
        };
        let head = params.add(format!("{tag}.head"), normal(rng, &[d, cfg.embed_dim], inv), true);
        TowerIds {
            input,
            globals,
            pos,
            prompts,
            layers,
            head,
        }
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    pub fn temperature(&self) -> f64 {
        self.cfg.temperature
    }

    pub(crate) fn tower(&self, modality: super::Modality) -> &TowerIds {
        match modality {
            super::Modality::Vision => &self.vision,
            super::Modality::Text => &self.text,
        }
    }

    pub fn bridge_tokens(&self) -> &Tensor {
        self.params.get(self.bridge)
    }

    pub fn projection(&self, modality: super::Modality) -> &Tensor {
        match modality {
            super::Modality::Vision => self.params.get(self.proj_vision),
            super::Modality::Text => self.params.get(self.proj_text),
        }
    }

    /// Number of layers carrying learnable prompts in a tower.
    pub fn prompt_layers(&self, modality: super::Modality) -> usize {
        self.tower(modality).prompts.len()
    }

    /// Replaces the tensor named `name`, keeping its shape.
    pub fn set_param(&mut self, name: &str, tensor: Tensor) -> Result<()> {
        let id = self
            .params
            .find(name)
            .ok_or_else(|| Error::Format(format!("unknown parameter `{name}`")))?;
        if self.params.get(id).shape() != tensor.shape() {
            return Err(Error::Dimension {
                op: "set_param",
                left: self.params.get(id).shape().to_vec(),
                right: tensor.shape().to_vec(),
            });
        }
        *self.params.get_mut(id) = tensor;
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.params.ids().all(|id| self.params.get(id).is_finite())
    }
}
