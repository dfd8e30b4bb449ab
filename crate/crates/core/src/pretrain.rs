//! Masked-language-model pretraining over packed samples.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::batching::{apply_dynamic_masking, BatchError, MaskPolicy, MlmBatch, Sample};
use crate::bbpe::ByteVocab;
use crate::neural::{
    adam_step, forward_transformer, init_transformer, mlm_logits, mlm_loss, AdamConfig, AdamState, Graph, NeuralError,
    ParamSet, Schedule, TrainingLog, TransformerConfig,
};

#[derive(Debug, Error)]
pub enum PretrainError {
    #[error(transparent)]
    Neural(#[from] NeuralError),
    #[error(transparent)]
    Batch(#[from] BatchError),
    #[error("invalid pretraining setup: {0}")]
    Config(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub model: TransformerConfig,
    pub schedule: Schedule,
    #[serde(default)]
    pub adam: AdamConfig,
    /// Sequences per update.
    pub batch_size: usize,
    pub mask_prob: f64,
    pub steps: u64,
    pub seed: u64,
}

impl PretrainConfig {
    pub fn validate(&self, vocab: &ByteVocab) -> Result<(), PretrainError> {
        self.model.validate()?;
        self.schedule.validate()?;
        self.adam.validate()?;
        if self.model.vocab_size != vocab.len() {
            return Err(PretrainError::Config(format!(
                "model vocabulary {} differs from tokenizer vocabulary {}",
                self.model.vocab_size,
                vocab.len()
            )));
        }
        if self.batch_size == 0 {
            return Err(PretrainError::Config("batch_size must be positive".into()));
        }
        if !(self.mask_prob > 0.0 && self.mask_prob < 1.0) {
            return Err(PretrainError::Config(format!(
                "mask_prob must be in (0, 1), got {}",
                self.mask_prob
            )));
        }
        Ok(())
    }
}

pub struct PretrainOutcome {
    pub params: ParamSet,
    pub log: TrainingLog,
}

fn mix(seed: u64, a: u64, b: u64) -> u64 {
    seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xC2B2_AE3D_27D4_EB4F)
}

/// Cycles through samples in a freshly shuffled order each epoch.
struct Sampler {
    order: Vec<usize>,
    cursor: usize,
    epoch: u64,
    seed: u64,
}

impl Sampler {
    fn new(n: usize, seed: u64) -> Self {
        Sampler {
            order: (0..n).collect(),
            cursor: n,
            epoch: 0,
            seed,
        }
    }

    fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let size = size.min(self.order.len());
        let mut batch = Vec::with_capacity(size);
        while batch.len() < size {
            if self.cursor == self.order.len() {
                self.order.sort_unstable();
                self.order
                    .shuffle(&mut ChaCha8Rng::seed_from_u64(mix(self.seed, self.epoch, 0)));
                self.epoch += 1;
                self.cursor = 0;
            }
            let i = self.order[self.cursor];
            self.cursor += 1;
            if !batch.contains(&i) {
                batch.push(i);
            }
        }
        batch
    }
}

/// Loss of one masked batch, leaving gradients in `params`.
fn batch_step(params: &mut ParamSet, model: &TransformerConfig, batch: &MlmBatch) -> Result<f64, PretrainError> {
    let mut graph = Graph::new();
    let bound = params.bind(&mut graph);
    let out = forward_transformer(&mut graph, model, &bound, &batch.input_ids, Some(&batch.lengths))?;
    let width = batch.input_ids[0].len();
    let mut rows = Vec::new();
    let mut targets = Vec::new();
    for (b, positions) in batch.mask_positions.iter().enumerate() {
        for &p in positions {
            rows.push(b * width + p);
            targets.push(batch.target_ids[b][p]);
        }
    }
    params.zero_grads();
    if rows.is_empty() {
        return Ok(0.0);
    }
    let logits = mlm_logits(&mut graph, &bound, out.final_hidden, &rows);
    let loss = mlm_loss(&mut graph, logits, &targets)?;
    let value = graph.scalar(loss);
    if !value.is_finite() {
        return Err(NeuralError::NonFiniteLoss.into());
    }
    let grads = graph.backward(loss);
    params.store_grads(&graph, &bound, &grads);
    Ok(value)
}

/// Trains a fresh model; calls `on_step(step, lr, loss)` after each update.
pub fn pretrain_with(
    samples: &[Sample],
    vocab: &ByteVocab,
    config: &PretrainConfig,
    mut on_step: impl FnMut(u64, f64, f64),
) -> Result<PretrainOutcome, PretrainError> {
    config.validate(vocab)?;
    if samples.is_empty() {
        return Err(PretrainError::Config("no training samples".into()));
    }
    if let Some(s) = samples.iter().find(|s| s.len() > config.model.max_positions) {
        return Err(PretrainError::Config(format!(
            "sample of {} ids exceeds {} positions",
            s.len(),
            config.model.max_positions
        )));
    }
    let mut params = init_transformer(&config.model, config.seed)?;
    let mut state = AdamState::new();
    let mut sampler = Sampler::new(samples.len(), config.seed);
    let mut log = TrainingLog::default();
    let pad = vocab.specials().pad;
    for step in 1..=config.steps {
        let picked = sampler.next_batch(config.batch_size);
        let rows = picked
            .iter()
            .map(|&i| {
                apply_dynamic_masking(
                    &samples[i],
                    vocab,
                    config.mask_prob,
                    MaskPolicy::default(),
                    mix(config.seed, step, i as u64 + 1),
                )
            })
            .collect();
        let batch = MlmBatch::collate(rows, pad);
        let loss = batch_step(&mut params, &config.model, &batch)?;
        let lr = config.schedule.lr_at_step(step);
        adam_step(&mut params, &mut state, &config.adam, lr)?;
        log.push(step, lr, loss);
        on_step(step, lr, loss);
    }
    params.zero_grads();
    for (_, t) in params.iter_mut() {
        t.grad = None;
    }
    Ok(PretrainOutcome { params, log })
}

pub fn pretrain(
    samples: &[Sample],
    vocab: &ByteVocab,
    config: &PretrainConfig,
) -> Result<PretrainOutcome, PretrainError> {
    pretrain_with(samples, vocab, config, |_, _, _| {})
}

/// Fraction of masked positions whose original id is the argmax prediction.
/// Every round masks each sample afresh with probability `mask_prob`, always
/// replacing selected positions by the mask token.
pub fn masked_accuracy(
    params: &ParamSet,
    model: &TransformerConfig,
    samples: &[Sample],
    vocab: &ByteVocab,
    mask_prob: f64,
    rounds: u64,
    seed: u64,
) -> Result<f64, PretrainError> {
    let policy = MaskPolicy {
        mask: 1.0,
        random: 0.0,
        keep: 0.0,
    };
    let (mut correct, mut total) = (0usize, 0usize);
    for round in 0..rounds {
        let rows = samples
            .iter()
            .enumerate()
            .map(|(i, s)| apply_dynamic_masking(s, vocab, mask_prob, policy, mix(seed, round + 1, i as u64 + 1)))
            .collect();
        let batch = MlmBatch::collate(rows, vocab.specials().pad);
        let mut graph = Graph::new();
        let bound = params.bind(&mut graph);
        let out = forward_transformer(&mut graph, model, &bound, &batch.input_ids, Some(&batch.lengths))?;
        let width = batch.input_ids[0].len();
        let mut rows = Vec::new();
        let mut targets = Vec::new();
        for (b, positions) in batch.mask_positions.iter().enumerate() {
            for &p in positions {
                rows.push(b * width + p);
                targets.push(batch.target_ids[b][p].expect("masked position has a target"));
            }
        }
        if rows.is_empty() {
            continue;
        }
        let logits = mlm_logits(&mut graph, &bound, out.final_hidden, &rows);
        let logits = graph.value(logits);
        for (r, &t) in targets.iter().enumerate() {
            let row = logits.row(r);
            let best = (0..row.len()).fold(0, |b, j| if row[j] > row[b] { j } else { b });
            correct += usize::from(best as u32 == t);
            total += 1;
        }
    }
    Ok(if total == 0 { 0.0 } else { correct as f64 / total as f64 })
}
