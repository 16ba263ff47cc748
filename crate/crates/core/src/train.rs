//! Training loop, evaluation and metrics.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{Split, SyntheticDataset};
use crate::dropout::{DropoutMode, DropoutPlan};
use crate::encoder::{classify, Bind, DropoutRequest, EncoderConfig, EncoderState, Graph, Modality, ParamId, TokenSequence};
use crate::error::{Error, Result};
use crate::importance::ImportanceScores;
use crate::residual::{total_loss_tape, AnnealSchedule, LossBreakdown, LossTerms, TapeBatch, LOSS_CSV_HEADER};
use crate::rng::{derive_seed, rng_for, stream_id, Purpose};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub encoder: EncoderConfig,
    pub dropout: DropoutMode,
    pub schedule: AnnealSchedule,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Add the residual-entropy terms of both modalities.
    pub residual_entropy: bool,
    /// Weight of the squared distance between dropped and clean embeddings.
    pub anchor_weight: f64,
}

impl TrainConfig {
    pub fn steps(&self) -> usize {
        self.schedule.total_steps
    }

    pub fn terms(&self) -> LossTerms {
        LossTerms {
            residual_entropy: self.residual_entropy,
            anchor_weight: self.anchor_weight,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.dropout.validate()?;
        self.schedule.validate()?;
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Parameter(format!("learning rate must be non-negative, got {}", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(Error::Parameter("batch size must be positive".into()));
        }
        if !(self.anchor_weight >= 0.0 && self.anchor_weight.is_finite()) {
            return Err(Error::Parameter(format!("anchor weight must be non-negative, got {}", self.anchor_weight)));
        }
        Ok(())
    }

    /// Checks that a dataset fits this encoder.
    pub fn check_data(&self, data: &SyntheticDataset) -> Result<()> {
        let (e, d) = (&self.encoder, &data.config);
        if e.grid != d.grid || e.patch_dim != d.patch_dim {
            return Err(Error::Config {
                key: "data.grid".into(),
                line: None,
                message: format!(
                    "dataset images are {}x{} patches of {} values, encoder expects {}x{} of {}",
                    d.grid, d.grid, d.patch_dim, e.grid, e.grid, e.patch_dim
                ),
            });
        }
        if data.vocab_needed() > e.vocab_size {
            return Err(Error::Config {
                key: "encoder.vocab_size".into(),
                line: None,
                message: format!("dataset needs {} token ids, vocabulary has {}", data.vocab_needed(), e.vocab_size),
            });
        }
        Ok(())
    }
}

/// Per-step record of a run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunHistory {
    pub losses: Vec<LossBreakdown>,
    /// Tokens dropped per step, over both towers and all dropout layers.
    pub dropped_tokens: Vec<usize>,
    /// Dropped positions that were global tokens; must stay 0.
    pub global_drops: usize,
}

impl RunHistory {
    pub fn csv(&self) -> String {
        let mut out = String::from(LOSS_CSV_HEADER);
        out.push('\n');
        for (step, l) in self.losses.iter().enumerate() {
            out.push_str(&l.csv_row(step));
            out.push('\n');
        }
        out
    }
}

/// Differentiable objective of one step.
pub struct StepGraph {
    pub tape: Tape,
    pub loss: Var,
    pub breakdown: LossBreakdown,
    pub trainable: Vec<(ParamId, Var)>,
    pub plans: Vec<DropoutPlan>,
    pub importance: Vec<ImportanceScores>,
    pub dropped: usize,
    pub global_drops: usize,
}

fn audit(seq: &TokenSequence, plan: &Option<DropoutPlan>, dropped: &mut usize, globals: &mut usize) {
    if let Some(plan) = plan {
        for layer in &plan.layers {
            for j in layer.dropped() {
                *dropped += 1;
                if seq.roles[j].is_global() {
                    *globals += 1;
                }
            }
        }
    }
}

fn stack(tape: &Tape, rows: &[Var]) -> Tensor {
    let cols = tape.value(rows[0]).numel();
    let data = rows.iter().flat_map(|v| tape.value(*v).data().to_vec()).collect();
    Tensor::from_parts(vec![rows.len(), cols], data)
}

/// Clean (dropout-free, gradient-free) embeddings of class descriptions.
pub fn text_embeddings(state: &EncoderState, data: &SyntheticDataset, classes: &[usize]) -> Result<Tensor> {
    let mut g = Graph::new(state, Bind::Frozen);
    let mut rows = Vec::with_capacity(classes.len());
    for &c in classes {
        let seq = g.build_text_sequence(&data.class_tokens(c))?;
        rows.push(g.encode(&seq, None)?.embedding);
    }
    Ok(stack(&g.tape, &rows))
}

/// Clean embedding of one image.
pub fn image_embedding(state: &EncoderState, image: &Tensor) -> Result<Vec<f64>> {
    let mut g = Graph::new(state, Bind::Frozen);
    let seq = g.build_vision_sequence(image)?;
    let enc = g.encode(&seq, None)?;
    Ok(g.tape.value(enc.embedding).data().to_vec())
}

/// Builds the objective for training samples `batch` at `step`.
pub fn step_graph(state: &EncoderState, cfg: &TrainConfig, data: &SyntheticDataset, batch: &[usize], step: usize) -> Result<StepGraph> {
    let lambda = cfg.schedule.at(step)?;
    let dropout_seed = derive_seed(cfg.seed, Purpose::Dropout);
    let use_dropout = !cfg.dropout.is_none();
    let mut g = Graph::new(state, Bind::Trainable);
    let (mut plans, mut importance) = (Vec::new(), Vec::new());
    let (mut dropped, mut global_drops) = (0, 0);

    let mut encode = |g: &mut Graph<'_>, seq: &TokenSequence, modality: u64, index: usize| -> Result<Var> {
        let req = use_dropout.then(|| DropoutRequest {
            mode: &cfg.dropout,
            seed: dropout_seed,
            stream: stream_id(&[step as u64, modality, index as u64]),
        });
        let enc = g.encode(seq, req)?;
        audit(seq, &enc.plan, &mut dropped, &mut global_drops);
        importance.extend(enc.importance);
        plans.extend(enc.plan);
        Ok(enc.embedding)
    };

    let mut text_rows = Vec::with_capacity(data.base.len());
    for (k, &c) in data.base.iter().enumerate() {
        let seq = g.build_text_sequence(&data.class_tokens(c))?;
        text_rows.push(encode(&mut g, &seq, 1, k)?);
    }
    let mut image_rows = Vec::with_capacity(batch.len());
    let mut labels = Vec::with_capacity(batch.len());
    for (i, &s) in batch.iter().enumerate() {
        let sample = data.train.get(s).ok_or(Error::Index {
            index: s,
            len: data.train.len(),
        })?;
        let seq = g.build_vision_sequence(&sample.image)?;
        image_rows.push(encode(&mut g, &seq, 0, i)?);
        match data.split_index(sample.label) {
            Some((Split::Base, y)) => labels.push(y),
            _ => return Err(Error::Data(format!("training sample of non-base class {}", sample.label))),
        }
    }
    let text_d = g.tape.concat_rows(&text_rows)?;
    let image_d = g.tape.concat_rows(&image_rows)?;

    let needs_clean = cfg.residual_entropy || cfg.anchor_weight != 0.0;
    let (text_o, image_o) = if !needs_clean || !use_dropout {
        (g.tape.value(text_d).clone(), g.tape.value(image_d).clone())
    } else {
        let text_o = text_embeddings(state, data, &data.base)?;
        let mut rows = Vec::with_capacity(batch.len() * state.config().embed_dim);
        for &s in batch {
            rows.extend(image_embedding(state, &data.train[s].image)?);
        }
        (text_o, Tensor::from_parts(vec![batch.len(), state.config().embed_dim], rows))
    };

    let tb = TapeBatch {
        image_dropped: image_d,
        text_dropped: text_d,
        image_clean: &image_o,
        text_clean: &text_o,
        labels: &labels,
    };
    let (loss, breakdown) = total_loss_tape(&mut g.tape, &tb, lambda, state.temperature(), cfg.terms())?;
    let trainable = g.trainable();
    Ok(StepGraph {
        tape: g.tape,
        loss,
        breakdown,
        trainable,
        plans,
        importance,
        dropped,
        global_drops,
    })
}

/// Runs SGD on the prompts, bridge tokens, projections and readout heads.
/// The backbone stays at its random initialization.
pub fn train(cfg: &TrainConfig, data: &SyntheticDataset) -> Result<(EncoderState, RunHistory)> {
    cfg.validate()?;
    cfg.check_data(data)?;
    if data.train.is_empty() {
        return Err(Error::Data("no training samples".into()));
    }
    let mut state = EncoderState::init(&cfg.encoder, &mut rng_for(derive_seed(cfg.seed, Purpose::Init)))?;
    let mut batch_rng = rng_for(derive_seed(cfg.seed, Purpose::Batch));
    let mut order: Vec<usize> = Vec::new();
    let mut history = RunHistory::default();

    for step in 0..cfg.steps() {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        while batch.len() < cfg.batch_size.min(data.train.len()) {
            if order.is_empty() {
                order = (0..data.train.len()).collect();
                order.shuffle(&mut batch_rng);
            }
            batch.push(order.pop().expect("refilled above"));
        }
        let sg = step_graph(&state, cfg, data, &batch, step).map_err(|e| match e {
            Error::Numeric(reason) => Error::TrainingFailure { step, reason },
            other => other,
        })?;
        if !sg.breakdown.total.is_finite() {
            return Err(Error::TrainingFailure {
                step,
                reason: format!("non-finite loss {}", sg.breakdown.total),
            });
        }
        let grads = sg.tape.backward(sg.loss)?;
        for (id, var) in &sg.trainable {
            let g = grads.get(*var);
            let p = state.params.get_mut(*id);
            for (w, d) in p.data_mut().iter_mut().zip(g.data()) {
                *w -= cfg.learning_rate * d;
            }
        }
        if !state.all_finite() {
            return Err(Error::TrainingFailure {
                step,
                reason: "parameters became non-finite".into(),
            });
        }
        history.losses.push(sg.breakdown);
        history.dropped_tokens.push(sg.dropped);
        history.global_drops += sg.global_drops;
    }
    Ok((state, history))
}

/// Base accuracy, novel accuracy and their harmonic mean, as fractions.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub base_acc: f64,
    pub novel_acc: f64,
    pub hm: f64,
}

/// `2ab / (a + b)`, 0 when both are 0 and exactly `a` when `a == b`.
pub fn hm(a: f64, b: f64) -> f64 {
    if a == b {
        a
    } else if a + b == 0.0 {
        0.0
    } else {
        2.0 * a * b / (a + b)
    }
}

/// Dropout-free accuracy on a split's test pool, classifying among that
/// split's classes only.
pub fn evaluate_split(state: &EncoderState, data: &SyntheticDataset, split: Split) -> Result<f64> {
    let classes = data.classes(split);
    let pool = data.test_pool(split);
    if classes.is_empty() || pool.is_empty() {
        return Err(Error::Data(format!("{split:?} split is empty")));
    }
    let text = text_embeddings(state, data, classes)?;
    let class_embs: Vec<_> = (0..classes.len())
        .map(|k| crate::encoder::Embedding {
            z: text.row(k).to_vec(),
            modality: Modality::Text,
        })
        .collect();
    let mut correct = 0usize;
    for s in pool {
        let z = crate::encoder::Embedding {
            z: image_embedding(state, &s.image)?,
            modality: Modality::Vision,
        };
        let probs = classify(&z, &class_embs, state.temperature())?;
        let pred = (0..probs.len()).max_by(|&i, &j| probs[i].total_cmp(&probs[j])).expect("two classes");
        if classes[pred] == s.label {
            correct += 1;
        }
    }
    Ok(correct as f64 / pool.len() as f64)
}

pub fn evaluate(state: &EncoderState, data: &SyntheticDataset) -> Result<Metrics> {
    let base_acc = evaluate_split(state, data, Split::Base)?;
    let novel_acc = evaluate_split(state, data, Split::Novel)?;
    Ok(Metrics {
        base_acc,
        novel_acc,
        hm: hm(base_acc, novel_acc),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hm_identities() {
        assert_eq!(hm(0.4, 0.4), 0.4);
        assert_eq!(hm(0.2, 0.7), hm(0.7, 0.2));
        assert_eq!(hm(0.0, 0.0), 0.0);
        assert!((hm(82.69, 63.22) - 71.66).abs() < 0.01);
        assert!((hm(80.73, 73.60) - 77.00).abs() < 0.01);
    }
}
