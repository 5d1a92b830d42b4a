//! Training: synthetic data, Adam, validation-driven checkpointing and
//! checkpoint averaging.

mod data;

pub use data::{
    generate_dataset, load_dataset, read_frames, save_dataset, token_symbol, write_frames, ContextRule, Dataset,
    SyntheticTask, SyntheticTaskSpec, Utterance, INVENTORY_FILE, LEXICON_FILE, MANIFEST,
};

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analysis::{align, Alignment};
use crate::lexicon::LexiconError;
use crate::transducer::{Transducer, TransducerError};

#[derive(Debug, Error)]
pub enum TrainingError {
    #[error("invalid synthetic task: {0}")]
    InvalidSpec(String),
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("training diverged at step {step}: {detail}")]
    DivergenceDetected { step: usize, detail: String },
    #[error("checkpoints are not compatible: {0}")]
    ConfigMismatch(String),
    #[error("manifest: {0}")]
    Manifest(String),
    #[error("malformed checkpoint: {0}")]
    Checkpoint(#[from] serde_json::Error),
    #[error(transparent)]
    Transducer(#[from] TransducerError),
    #[error(transparent)]
    Lexicon(#[from] LexiconError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub steps: usize,
    pub learning_rate: f64,
    /// Linear warm-up length; the rate is constant afterwards.
    pub warmup_steps: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub clip_norm: f64,
    /// Validate every this many steps (and after the last step).
    pub eval_interval: usize,
    /// How many best checkpoints to keep and average.
    pub n_checkpoints_to_average: usize,
    /// Stop after this many evaluations without improvement; 0 disables.
    pub patience: usize,
    pub max_symbols_per_frame: usize,
    /// Seeds batch shuffling.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 16,
            steps: 1000,
            learning_rate: 1e-3,
            warmup_steps: 50,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: 5.0,
            eval_interval: 100,
            n_checkpoints_to_average: 3,
            patience: 0,
            max_symbols_per_frame: 4,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainingError> {
        let bad = |m: &str| Err(TrainingError::InvalidConfig(m.to_string()));
        if self.batch_size == 0 || self.eval_interval == 0 || self.max_symbols_per_frame == 0 {
            return bad("batch_size, eval_interval and max_symbols_per_frame must be positive");
        }
        if self.n_checkpoints_to_average == 0 {
            return bad("n_checkpoints_to_average must be at least 1");
        }
        if self.learning_rate.is_nan()
            || self.learning_rate < 0.0
            || !(0.0..1.0).contains(&self.beta1)
            || !(0.0..1.0).contains(&self.beta2)
        {
            return bad("need learning_rate >= 0 and betas in [0, 1)");
        }
        if self.eps.is_nan() || self.eps <= 0.0 || self.clip_norm.is_nan() || self.clip_norm < 0.0 {
            return bad("need eps > 0 and clip_norm >= 0");
        }
        Ok(())
    }

    pub fn learning_rate_at(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            self.learning_rate * (step + 1) as f64 / self.warmup_steps as f64
        } else {
            self.learning_rate
        }
    }
}

/// Adam with bias correction; moments live in the same layout as the model.
#[derive(Debug, Clone)]
pub struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl Adam {
    pub fn new(model: &Transducer, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros: Vec<Vec<f64>> = model.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
        Self { m: zeros.clone(), v: zeros, t: 0, beta1, beta2, eps }
    }

    pub fn step(&mut self, model: &mut Transducer, grads: &Transducer, lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (k, (p, g)) in model.tensors_mut().into_iter().zip(grads.tensors()).enumerate() {
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                p[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
            }
        }
    }
}

/// A saved model with the validation score that selected it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub step: usize,
    pub valid_cer: f64,
    pub model: Transducer,
}

impl Checkpoint {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("checkpoint serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, TrainingError> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn save(&self, path: &Path) -> Result<(), TrainingError> {
        fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, TrainingError> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    pub step: usize,
    /// Mean per-utterance loss over the batches since the previous evaluation.
    pub train_loss: f64,
    pub valid_cer: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Best checkpoints, best first (lower CER, then earlier step).
    pub best: Vec<Checkpoint>,
    pub history: Vec<EvalPoint>,
    pub last: Transducer,
    /// Mean of the `best` checkpoints.
    pub averaged: Transducer,
}

/// Decoded hypotheses with their alignments against the references.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub hypotheses: Vec<Vec<usize>>,
    pub alignments: Vec<Alignment>,
}

impl Evaluation {
    /// Corpus CER: total edits over total reference length.
    pub fn cer(&self) -> f64 {
        let edits: usize = self.alignments.iter().map(Alignment::edits).sum();
        let n: usize = self.alignments.iter().map(Alignment::ref_len).sum();
        edits as f64 / n.max(1) as f64
    }
}

pub fn evaluate(model: &Transducer, data: &Dataset, max_symbols_per_frame: usize) -> Result<Evaluation, TrainingError> {
    let mut hypotheses = Vec::with_capacity(data.len());
    let mut alignments = Vec::with_capacity(data.len());
    for u in &data.utterances {
        let hyp = model.greedy_decode(&u.frames, max_symbols_per_frame)?;
        alignments.push(align(&u.tokens, &hyp));
        hypotheses.push(hyp);
    }
    Ok(Evaluation { hypotheses, alignments })
}

fn check_vocab(model: &Transducer, data: &Dataset) -> Result<(), TrainingError> {
    if model.vocab() != data.vocab.as_slice() {
        return Err(TrainingError::ConfigMismatch("model and dataset vocabularies differ".into()));
    }
    Ok(())
}

fn global_norm(grads: &Transducer) -> f64 {
    grads.tensors().iter().flat_map(|t| t.iter()).map(|g| g * g).sum::<f64>().sqrt()
}

pub fn train(
    model: Transducer,
    train: &Dataset,
    valid: &Dataset,
    cfg: &TrainConfig,
) -> Result<TrainOutcome, TrainingError> {
    train_with_progress(model, train, valid, cfg, |_| {})
}

/// Like [`train`], calling `on_eval` after every validation pass.
pub fn train_with_progress(
    mut model: Transducer,
    train: &Dataset,
    valid: &Dataset,
    cfg: &TrainConfig,
    mut on_eval: impl FnMut(&EvalPoint),
) -> Result<TrainOutcome, TrainingError> {
    cfg.validate()?;
    check_vocab(&model, train)?;
    check_vocab(&model, valid)?;
    if train.is_empty() || valid.is_empty() {
        return Err(TrainingError::InvalidConfig("training and validation sets must be non-empty".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(&model, cfg.beta1, cfg.beta2, cfg.eps);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut cursor = order.len();
    let mut best: Vec<Checkpoint> = Vec::new();
    let mut history = Vec::new();
    let (mut loss_sum, mut loss_count) = (0.0, 0usize);
    let mut since_improvement = 0;

    for step in 0..cfg.steps {
        let mut grads = model.zeros_like();
        for _ in 0..cfg.batch_size.min(train.len()) {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let u = &train.utterances[order[cursor]];
            cursor += 1;
            let loss = match model.loss_and_grad(&u.frames, &u.tokens, &mut grads) {
                Err(TransducerError::NumericalUnderflow(what)) => {
                    return Err(TrainingError::DivergenceDetected {
                        step,
                        detail: format!("non-finite {what} on {}", u.id),
                    })
                }
                other => other?,
            };
            if !loss.is_finite() {
                return Err(TrainingError::DivergenceDetected { step, detail: format!("loss {loss} on {}", u.id) });
            }
            loss_sum += loss;
            loss_count += 1;
        }
        let scale = 1.0 / cfg.batch_size.min(train.len()) as f64;
        let norm = global_norm(&grads) * scale;
        if !norm.is_finite() {
            return Err(TrainingError::DivergenceDetected { step, detail: format!("gradient norm {norm}") });
        }
        let scale = if cfg.clip_norm > 0.0 && norm > cfg.clip_norm { scale * cfg.clip_norm / norm } else { scale };
        for g in grads.tensors_mut() {
            g.iter_mut().for_each(|x| *x *= scale);
        }
        adam.step(&mut model, &grads, cfg.learning_rate_at(step));
        if !model.is_finite() {
            return Err(TrainingError::DivergenceDetected { step, detail: "non-finite parameter".into() });
        }

        let done = step + 1;
        if done % cfg.eval_interval == 0 || done == cfg.steps {
            let valid_cer = evaluate(&model, valid, cfg.max_symbols_per_frame)?.cer();
            let point = EvalPoint { step: done, train_loss: loss_sum / loss_count.max(1) as f64, valid_cer };
            (loss_sum, loss_count) = (0.0, 0);
            on_eval(&point);
            history.push(point);

            let improved = best.first().is_none_or(|b| valid_cer < b.valid_cer);
            since_improvement = if improved { 0 } else { since_improvement + 1 };
            best.push(Checkpoint { step: done, valid_cer, model: model.clone() });
            best.sort_by(|a, b| a.valid_cer.total_cmp(&b.valid_cer).then(a.step.cmp(&b.step)));
            best.truncate(cfg.n_checkpoints_to_average);
            if cfg.patience > 0 && since_improvement >= cfg.patience {
                break;
            }
        }
    }

    if best.is_empty() {
        // zero steps: the untouched model is the only checkpoint
        let valid_cer = evaluate(&model, valid, cfg.max_symbols_per_frame)?.cer();
        best.push(Checkpoint { step: 0, valid_cer, model: model.clone() });
    }
    let models: Vec<Transducer> = best.iter().map(|c| c.model.clone()).collect();
    let averaged = average_checkpoints(&models)?;
    Ok(TrainOutcome { best, history, last: model, averaged })
}

/// Elementwise mean of compatible checkpoints.
///
/// Each coordinate is averaged over its values in sorted order, so the result
/// does not depend on the order of `models`; equal values average to
/// themselves exactly.
pub fn average_checkpoints(models: &[Transducer]) -> Result<Transducer, TrainingError> {
    let first = models.first().ok_or_else(|| TrainingError::ConfigMismatch("no checkpoints to average".into()))?;
    for m in &models[1..] {
        if m.features != first.features || m.dims != first.dims {
            return Err(TrainingError::ConfigMismatch(format!(
                "{} {:?} vs {} {:?}",
                first.features, first.dims, m.features, m.dims
            )));
        }
        if m.vocab() != first.vocab() || m.is_folded() != first.is_folded() || m.tensor_names() != first.tensor_names()
        {
            return Err(TrainingError::ConfigMismatch("vocabulary or parameter layout differs".into()));
        }
        let shapes = |x: &Transducer| x.tensors().iter().map(|t| t.len()).collect::<Vec<_>>();
        if shapes(m) != shapes(first) {
            return Err(TrainingError::ConfigMismatch("parameter shapes differ".into()));
        }
    }
    let k = models.len() as f64;
    let sources: Vec<Vec<&[f64]>> = models.iter().map(|m| m.tensors()).collect();
    let mut out = first.clone();
    let mut column = Vec::with_capacity(models.len());
    for (ti, dst) in out.tensors_mut().into_iter().enumerate() {
        for (i, x) in dst.iter_mut().enumerate() {
            column.clear();
            column.extend(sources.iter().map(|s| s[ti][i]));
            column.sort_by(f64::total_cmp);
            *x = if column[0] == column[column.len() - 1] { column[0] } else { column.iter().sum::<f64>() / k };
        }
    }
    Ok(out)
}
