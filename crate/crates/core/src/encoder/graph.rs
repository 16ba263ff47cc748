//! Forward passes of both towers on a differentiation tape.

use serde::{Deserialize, Serialize};

use super::sequence::{targets_from_roles, Modality, TokenRole, TokenSequence};
use super::state::{EncoderState, ParamId};
use crate::dropout::{dropblock_keep, keep_scale, sample_keep, uniform_probabilities, DropoutMode, DropoutPlan, LayerDropout};
use crate::error::{Error, Result};
use crate::importance::{class_attention_score, min_max, self_attention_score, ImportanceScores};
use crate::rng::stream_rng;
use crate::tape::{Tape, Var};
use crate::tensor::{softmax_vec, Tensor};

/// Which parameters become differentiable leaves when a state is bound.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Bind {
    /// Trainable parameters are leaves with gradients; the backbone is constant.
    Trainable,
    /// Everything is constant (inference, frozen branch).
    Frozen,
}

/// Dropout to apply during one encoder pass. The generator for layer `l` is
/// the stream `(stream, l)` under `seed`.
#[derive(Clone, Copy, Debug)]
pub struct DropoutRequest<'a> {
    pub mode: &'a DropoutMode,
    pub seed: u64,
    pub stream: u64,
}

/// Self-attention maps of one pass, one `[1, H, L, L]` tensor per layer.
pub type LayerAttentions = Vec<Tensor>;

/// Result of [`Graph::encode`].
#[derive(Clone, Debug)]
pub struct Encoded {
    /// `1 × embed_dim`, unit norm.
    pub embedding: Var,
    pub attentions: LayerAttentions,
    /// Realized dropout, when a request was made.
    pub plan: Option<DropoutPlan>,
    /// Importance scores of the IWTD layers.
    pub importance: Vec<ImportanceScores>,
}

/// A unit-norm embedding value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Embedding {
    pub z: Vec<f64>,
    pub modality: Modality,
}

impl Embedding {
    /// Normalizes `z`; zero vectors are rejected.
    pub fn new(z: Vec<f64>, modality: Modality) -> Result<Self> {
        let norm = z.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(norm > 0.0) || !norm.is_finite() {
            return Err(Error::Numeric("embedding has zero or non-finite norm".into()));
        }
        Ok(Self {
            z: z.into_iter().map(|v| v / norm).collect(),
            modality,
        })
    }
}

/// Cosine similarity of two vectors.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// Class probabilities: softmax over `cos(z_v, z_k) / τ`.
pub fn classify(image: &Embedding, classes: &[Embedding], tau: f64) -> Result<Vec<f64>> {
    if !(tau > 0.0) {
        return Err(Error::Parameter(format!("temperature must be positive, got {tau}")));
    }
    if classes.len() < 2 {
        return Err(Error::Parameter("classification needs at least two classes".into()));
    }
    let logits: Vec<f64> = classes.iter().map(|c| cosine(&image.z, &c.z) / tau).collect();
    Ok(softmax_vec(&logits))
}

/// A tape with an [`EncoderState`] bound onto it.
pub struct Graph<'s> {
    pub tape: Tape,
    state: &'s EncoderState,
    vars: Vec<Var>,
}

impl<'s> Graph<'s> {
    pub fn new(state: &'s EncoderState, bind: Bind) -> Self {
        let mut tape = Tape::new();
        let vars = state
            .params
            .ids()
            .map(|id| {
                let t = state.params.get(id).clone();
                if bind == Bind::Trainable && state.params.is_trainable(id) {
                    tape.param(t)
                } else {
                    tape.constant(t)
                }
            })
            .collect();
        Self { tape, state, vars }
    }

    pub fn state(&self) -> &EncoderState {
        self.state
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    /// `(parameter, leaf)` pairs of the trainable parameters.
    pub fn trainable(&self) -> Vec<(ParamId, Var)> {
        self.state
            .params
            .trainable_ids()
            .into_iter()
            .map(|id| (id, self.vars[id.0]))
            .collect()
    }

    /// `[BOS, prompts, content, EOS]`.
    pub fn build_text_sequence(&mut self, ids: &[usize]) -> Result<TokenSequence> {
        let cfg = self.state.cfg.clone();
        if let Some(&bad) = ids.iter().find(|&&id| id >= cfg.vocab_size) {
            return Err(Error::Vocabulary {
                id: bad,
                vocab: cfg.vocab_size,
            });
        }
        let len = 2 + cfg.prompt_len_text + ids.len();
        if len > cfg.max_text_len {
            return Err(Error::Contract(format!(
                "text sequence of length {len} exceeds max_text_len {}",
                cfg.max_text_len
            )));
        }
        let tower = self.state.tower(Modality::Text).clone();
        let mut parts = vec![self.var(tower.globals[0])];
        if let Some(p) = tower.prompts.first() {
            parts.push(self.var(*p));
        }
        if !ids.is_empty() {
            parts.push(self.tape.gather_rows(self.var(tower.input), ids)?);
        }
        parts.push(self.var(tower.globals[1]));
        let tokens = self.tape.concat_rows(&parts)?;
        let pos = self.tape.rows(self.var(tower.pos), 0, len)?;
        let tokens = self.tape.add(tokens, pos)?;

        let mut roles = vec![TokenRole::GlobalBos];
        roles.extend(std::iter::repeat_n(TokenRole::Prompt, cfg.prompt_len_text));
        roles.extend(std::iter::repeat_n(TokenRole::Content, ids.len()));
        roles.push(TokenRole::GlobalEos);
        Ok(TokenSequence {
            modality: Modality::Text,
            tokens,
            target_indices: targets_from_roles(&roles),
            roles,
        })
    }

    /// `[CLS, patches, prompts]`; `image` is `grid² × patch_dim`.
    pub fn build_vision_sequence(&mut self, image: &Tensor) -> Result<TokenSequence> {
        let cfg = self.state.cfg.clone();
        if image.shape() != [cfg.patches(), cfg.patch_dim] {
            return Err(Error::Dimension {
                op: "build_vision_sequence",
                left: image.shape().to_vec(),
                right: vec![cfg.patches(), cfg.patch_dim],
            });
        }
        let tower = self.state.tower(Modality::Vision).clone();
        let pixels = self.tape.constant(image.clone());
        let patches = self.tape.matmul(pixels, self.var(tower.input))?;
        let body = self.tape.concat_rows(&[self.var(tower.globals[0]), patches])?;
        let body = self.tape.add(body, self.var(tower.pos))?;
        let tokens = match tower.prompts.first() {
            Some(p) => self.tape.concat_rows(&[body, self.var(*p)])?,
            None => body,
        };
        let mut roles = vec![TokenRole::GlobalCls];
        roles.extend(std::iter::repeat_n(TokenRole::Content, cfg.patches()));
        roles.extend(std::iter::repeat_n(TokenRole::Prompt, cfg.prompt_len_vision));
        Ok(TokenSequence {
            modality: Modality::Vision,
            tokens,
            target_indices: targets_from_roles(&roles),
            roles,
        })
    }

    /// Copies the current token values out of the tape.
    pub fn materialize(&self, seq: &TokenSequence) -> TokenSequence<Tensor> {
        seq.with_tokens(self.tape.value(seq.tokens).clone())
    }

    /// Runs the transformer, applying token dropout after each of the first
    /// `dropout_layers` layers when `dropout` is given, and pools the
    /// `[CLS]`/`[EOS]` position into a unit-norm embedding.
    pub fn encode(&mut self, seq: &TokenSequence, dropout: Option<DropoutRequest<'_>>) -> Result<Encoded> {
        let cfg = self.state.cfg.clone();
        let tower = self.state.tower(seq.modality).clone();
        let len = seq.len();
        if self.tape.value(seq.tokens).shape() != [len, cfg.model_dim] {
            return Err(Error::Contract("token matrix does not match roles".into()));
        }
        let prompt_rows = seq.prompt_indices();
        let mut plan = None;
        if let Some(req) = dropout {
            req.mode.validate()?;
            if let DropoutMode::Fixed { probs } = req.mode {
                if probs.len() > cfg.dropout_layers {
                    return Err(Error::Contract(format!(
                        "plan covers {} layers but only {} dropout layers exist",
                        probs.len(),
                        cfg.dropout_layers
                    )));
                }
                for (l, p) in probs.iter().enumerate() {
                    if p.len() != len {
                        return Err(Error::Contract(format!(
                            "plan layer {l} has {} probabilities for a sequence of length {len}",
                            p.len()
                        )));
                    }
                    if p.iter().enumerate().any(|(j, v)| *v != 0.0 && !seq.target_indices.contains(&j)) {
                        return Err(Error::Contract(format!("plan layer {l} drops a global token")));
                    }
                }
            }
            plan = Some(DropoutPlan::new(req.mode.clone(), req.seed));
        }

        let mut x = seq.tokens;
        let mut attentions = Vec::with_capacity(cfg.layers);
        let mut importance = Vec::new();
        for layer in 0..cfg.layers {
            if layer > 0 && layer < tower.prompts.len() && !prompt_rows.is_empty() {
                x = self.replace_rows(x, &prompt_rows, self.var(tower.prompts[layer]))?;
            }
            let x_in = x;
            let (out, attn) = self.layer_forward(&tower.layers[layer], x_in)?;
            x = out;
            if let (Some(req), Some(plan)) = (dropout, plan.as_mut()) {
                if layer < cfg.dropout_layers {
                    let record = self.drop_tokens(seq, req, layer, x_in, &attn, &mut x, &mut importance)?;
                    if let Some(r) = record {
                        plan.layers.push(r);
                    }
                }
            }
            attentions.push(attn);
        }

        let pooled = self.tape.row(x, seq.pool_index())?;
        let pooled = self.tape.layer_norm_rows(pooled);
        let projected = self.tape.matmul(pooled, self.var(tower.head))?;
        let embedding = self.tape.l2_normalize_rows(projected)?;
        Ok(Encoded {
            embedding,
            attentions,
            plan,
            importance,
        })
    }

    /// Overwrites the contiguous block `rows` of `x` with `block`.
    fn replace_rows(&mut self, x: Var, rows: &[usize], block: Var) -> Result<Var> {
        let len = self.tape.value(x).rows_cols().0;
        let (start, end) = (rows[0], rows[rows.len() - 1] + 1);
        let mut parts = Vec::with_capacity(3);
        if start > 0 {
            parts.push(self.tape.rows(x, 0, start)?);
        }
        parts.push(block);
        if end < len {
            parts.push(self.tape.rows(x, end, len - end)?);
        }
        self.tape.concat_rows(&parts)
    }

    /// Pre-norm block: multi-head self-attention then a GELU MLP, both residual.
    fn layer_forward(&mut self, ids: &super::state::LayerIds, x: Var) -> Result<(Var, Tensor)> {
        let cfg = &self.state.cfg;
        let (heads, len) = (cfg.heads, self.tape.value(x).rows_cols().0);
        let scale = 1.0 / (cfg.head_dim() as f64).sqrt();
        let h = self.tape.layer_norm_rows(x);
        let mut maps = Vec::with_capacity(heads * len * len);
        let mut mixed: Option<Var> = None;
        for hd in 0..heads {
            let q = self.tape.matmul(h, self.vars[ids.wq[hd].0])?;
            let k = self.tape.matmul(h, self.vars[ids.wk[hd].0])?;
            let v = self.tape.matmul(h, self.vars[ids.wv[hd].0])?;
            let scores = self.tape.matmul_t(q, k)?;
            let scores = self.tape.scale(scores, scale);
            let attn = self.tape.softmax_rows(scores);
            maps.extend_from_slice(self.tape.value(attn).data());
            let o = self.tape.matmul(attn, v)?;
            let o = self.tape.matmul(o, self.vars[ids.wo[hd].0])?;
            mixed = Some(match mixed {
                Some(acc) => self.tape.add(acc, o)?,
                None => o,
            });
        }
        let x1 = self.tape.add(x, mixed.expect("at least one head"))?;
        let h2 = self.tape.layer_norm_rows(x1);
        let m = self.tape.matmul(h2, self.vars[ids.w1.0])?;
        let m = self.tape.add_row(m, self.vars[ids.b1.0])?;
        let m = self.tape.gelu(m);
        let m = self.tape.matmul(m, self.vars[ids.w2.0])?;
        let m = self.tape.add_row(m, self.vars[ids.b2.0])?;
        let out = self.tape.add(x1, m)?;
        Ok((out, Tensor::from_parts(vec![1, heads, len, len], maps)))
    }

    /// Applies one layer of token dropout to `x` in place.
    #[allow(clippy::too_many_arguments)]
    fn drop_tokens(
        &mut self,
        seq: &TokenSequence,
        req: DropoutRequest<'_>,
        layer: usize,
        x_in: Var,
        attn: &Tensor,
        x: &mut Var,
        importance: &mut Vec<ImportanceScores>,
    ) -> Result<Option<LayerDropout>> {
        let len = seq.len();
        let targets = &seq.target_indices;
        let mut rng = stream_rng(req.seed, &[req.stream, layer as u64]);
        let (probs, keep, scale) = match req.mode {
            DropoutMode::None => return Ok(None),
            DropoutMode::Iwtd { p_min, p_max } => {
                let (scores, p_var) = self.iwtd_probabilities(seq, layer, x_in, attn, *p_min, *p_max)?;
                let p_targets = self.tape.value(p_var).data().to_vec();
                let mut probs = vec![0.0; len];
                for (&j, &p) in targets.iter().zip(&p_targets) {
                    probs[j] = p;
                }
                let keep = sample_keep(&probs, targets, &mut rng);
                // Keep factor 1 / (1 - p_j) stays differentiable in p_j; the mask is constant.
                let q = self.tape.scale(p_var, -1.0);
                let q = self.tape.add_scalar(q, 1.0);
                let inv = self.tape.recip(q);
                let mask: Vec<f64> = targets.iter().map(|&j| if keep[j] { 1.0 } else { 0.0 }).collect();
                let mask = self.tape.constant(Tensor::from_parts(vec![targets.len()], mask));
                let factor = self.tape.mul(inv, mask)?;
                let scale = self.tape.scatter(factor, targets, len, 1.0)?;
                importance.push(scores);
                (probs, keep, scale)
            }
            DropoutMode::Vanilla { p } => {
                let probs = uniform_probabilities(*p, targets, len);
                let keep = sample_keep(&probs, targets, &mut rng);
                let scale = self.constant_scale(&probs, &keep);
                (probs, keep, scale)
            }
            DropoutMode::DropBlock { p, block_size } => {
                let probs = uniform_probabilities(*p, targets, len);
                let keep = dropblock_keep(targets, len, *p, *block_size, &mut rng)?;
                let scale = self.constant_scale(&probs, &keep);
                (probs, keep, scale)
            }
            DropoutMode::Fixed { probs } => {
                let Some(probs) = probs.get(layer).cloned() else {
                    return Ok(None);
                };
                let keep = sample_keep(&probs, targets, &mut rng);
                let scale = self.constant_scale(&probs, &keep);
                (probs, keep, scale)
            }
        };
        *x = self.tape.scale_rows(*x, scale)?;
        Ok(Some(LayerDropout { layer, probs, keep }))
    }

    fn constant_scale(&mut self, probs: &[f64], keep: &[bool]) -> Var {
        let s = keep_scale(probs, keep);
        self.tape.constant(Tensor::from_parts(vec![s.len()], s))
    }

    /// Importance scores and per-target drop probabilities of one layer. The
    /// attention-derived signals are constants; the cross-modal signal is
    /// differentiable in the bridge tokens and the modality projection.
    fn iwtd_probabilities(
        &mut self,
        seq: &TokenSequence,
        layer: usize,
        x_in: Var,
        attn: &Tensor,
        p_min: f64,
        p_max: f64,
    ) -> Result<(ImportanceScores, Var)> {
        let targets = &seq.target_indices;
        if targets.is_empty() {
            return Err(Error::EmptyTarget);
        }
        let cls = seq.pool_index();
        let s_self = self_attention_score(attn, 0, targets, &seq.global_indices())?;
        let s_cls = class_attention_score(attn, 0, cls, targets)?;

        let proj = match seq.modality {
            Modality::Vision => self.state.proj_vision,
            Modality::Text => self.state.proj_text,
        };
        let shared_dim = self.state.cfg.shared_dim as f64;
        let tokens = Tensor::from_parts(
            vec![targets.len(), self.state.cfg.model_dim],
            targets.iter().flat_map(|&j| self.tape.value(x_in).row(j).to_vec()).collect(),
        );
        let tokens = self.tape.constant(tokens);
        let projected = self.tape.matmul(tokens, self.var(proj))?;
        let logits = self.tape.matmul_t(self.var(self.state.bridge), projected)?;
        let logits = self.tape.scale(logits, 1.0 / shared_dim.sqrt());
        let cross = self.tape.softmax_rows(logits);
        let s_cross = self.tape.col_max(cross);

        let n_self = self.tape.constant(Tensor::from_parts(vec![targets.len()], min_max(&s_self)));
        let n_cls = self.tape.constant(Tensor::from_parts(vec![targets.len()], min_max(&s_cls)));
        let n_cross = self.tape.min_max_normalize(s_cross);
        let fused = self.tape.add(n_self, n_cls)?;
        let fused = self.tape.add(fused, n_cross)?;
        let fused = self.tape.scale(fused, 1.0 / 3.0);
        let i_hat = self.tape.min_max_normalize(fused);
        let lo = self.tape.scale(i_hat, p_min);
        let hi = self.tape.scale(i_hat, -1.0);
        let hi = self.tape.add_scalar(hi, 1.0);
        let hi = self.tape.scale(hi, p_max);
        let p = self.tape.add(hi, lo)?;

        let scores = ImportanceScores {
            layer,
            targets: targets.clone(),
            s_self,
            s_cls,
            s_cross: self.tape.value(s_cross).data().to_vec(),
            fused: self.tape.value(fused).data().to_vec(),
            normalized: self.tape.value(i_hat).data().to_vec(),
        };
        Ok((scores, p))
    }

    /// Embedding value of an encoded pass.
    pub fn embedding(&self, encoded: &Encoded, modality: Modality) -> Embedding {
        Embedding {
            z: self.tape.value(encoded.embedding).data().to_vec(),
            modality,
        }
    }
}
