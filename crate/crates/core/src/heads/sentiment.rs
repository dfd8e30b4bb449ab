use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bbpe::SPECIALS;
use crate::corpus::kfold_split;
use crate::metrics::{aggregate_folds, macro_f1};
use crate::neural::{
    adam_step, forward_transformer, AdamConfig, AdamState, Graph, NeuralError, ParamSet, Schedule, Tensor,
};

use super::{ContextualEncoder, HeadsError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Polarity {
    Positive,
    Neutral,
    Negative,
}

impl Polarity {
    pub const ALL: [Polarity; 3] = [Polarity::Positive, Polarity::Neutral, Polarity::Negative];

    pub fn index(self) -> usize {
        self as usize
    }

    /// Dataset code: `p`, `0` or `n`.
    pub fn code(self) -> &'static str {
        match self {
            Polarity::Positive => "p",
            Polarity::Neutral => "0",
            Polarity::Negative => "n",
        }
    }

    pub fn from_code(code: &str) -> Option<Self> {
        match code {
            "p" => Some(Polarity::Positive),
            "0" => Some(Polarity::Neutral),
            "n" => Some(Polarity::Negative),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SentimentExample {
    pub label: Polarity,
    pub text: String,
}

/// Reads `label<TAB>text` lines; blank lines are skipped.
pub fn parse_sentiment_tsv(text: &str) -> Result<Vec<SentimentExample>, HeadsError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (code, body) = line
            .split_once('\t')
            .ok_or_else(|| HeadsError::Data(format!("line {}: expected label<TAB>text", i + 1)))?;
        let label = Polarity::from_code(code.trim())
            .ok_or_else(|| HeadsError::Data(format!("line {}: unknown label `{code}`", i + 1)))?;
        out.push(SentimentExample {
            label,
            text: body.to_string(),
        });
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SentimentConfig {
    pub lr_grid: Vec<f64>,
    pub folds: usize,
    pub dev_fraction: f64,
    /// Total epochs; the first trains only the classifier.
    pub epochs: usize,
    pub frozen_lr: f64,
    pub warmup_epochs: f64,
    pub decay_epochs: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for SentimentConfig {
    fn default() -> Self {
        SentimentConfig {
            lr_grid: vec![1e-5, 2e-5, 3e-5, 5e-5],
            folds: 10,
            dev_fraction: 0.1,
            epochs: 15,
            frozen_lr: 1e-3,
            warmup_epochs: 4.0,
            decay_epochs: 10.0,
            batch_size: 64,
            seed: 42,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldOutcome {
    pub fold: usize,
    pub lr: f64,
    pub dev_f1: f64,
    pub test_f1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SentimentReport {
    /// Per grid value: (peak lr, mean dev macro-F1, mean test macro-F1, test std).
    pub per_lr: Vec<(f64, f64, f64, f64)>,
    pub selected_lr: f64,
    pub test_mean: f64,
    pub test_std: f64,
    pub folds: Vec<FoldOutcome>,
}

/// Trained weights and the learning rate used at every update, keyed by
/// fractional epoch (0-based, so the first fine-tuning epoch starts at 1).
pub struct FoldTraining {
    pub params: ParamSet,
    pub step_lrs: Vec<(f64, f64)>,
}

const CLASSIFIER_PREFIX: &str = "cls.";

fn encode_texts(encoder: &ContextualEncoder, items: &[&SentimentExample]) -> Vec<Vec<u32>> {
    let budget = encoder.config.max_positions.saturating_sub(2);
    items
        .iter()
        .map(|ex| {
            let mut ids = vec![SPECIALS.bos];
            let mut body = encoder.vocab.encode(&ex.text).ids;
            body.truncate(budget);
            ids.extend(body);
            ids.push(SPECIALS.eos);
            ids
        })
        .collect()
}

fn pad(rows: &[&Vec<u32>]) -> (Vec<Vec<u32>>, Vec<usize>) {
    let len = rows.iter().map(|r| r.len()).max().unwrap_or(0);
    let lengths = rows.iter().map(|r| r.len()).collect();
    let padded = rows
        .iter()
        .map(|r| {
            let mut v = (*r).clone();
            v.resize(len, SPECIALS.pad);
            v
        })
        .collect();
    (padded, lengths)
}

/// Class logits from the first position of the final (normalized) layer.
fn logits(
    graph: &mut Graph,
    encoder: &ContextualEncoder,
    bound: &crate::neural::Bound,
    rows: &[&Vec<u32>],
) -> Result<crate::neural::Var, HeadsError> {
    let (ids, lengths) = pad(rows);
    let seq = ids[0].len();
    let out = forward_transformer(graph, &encoder.config, bound, &ids, Some(&lengths))?;
    let firsts: Vec<usize> = (0..rows.len()).map(|b| b * seq).collect();
    let cls = graph.gather(out.final_hidden, &firsts);
    let m = graph.matmul(cls, bound.get("cls.w"));
    Ok(graph.add(m, bound.get("cls.b")))
}

pub fn predict_polarity(
    encoder: &ContextualEncoder,
    params: &ParamSet,
    items: &[&SentimentExample],
) -> Result<Vec<Polarity>, HeadsError> {
    let encoded = encode_texts(encoder, items);
    let mut out = Vec::with_capacity(items.len());
    for chunk in encoded.chunks(64) {
        let rows: Vec<&Vec<u32>> = chunk.iter().collect();
        let mut graph = Graph::new();
        let bound = params.bind_where(&mut graph, |_| false);
        let l = logits(&mut graph, encoder, &bound, &rows)?;
        let v = graph.value(l);
        for r in 0..rows.len() {
            let row = v.row(r);
            let mut best = 0;
            for k in 1..3 {
                if row[k] > row[best] {
                    best = k;
                }
            }
            out.push(Polarity::ALL[best]);
        }
    }
    Ok(out)
}

fn macro_f1_of(gold: &[&SentimentExample], predicted: &[Polarity]) -> f64 {
    let mut confusion = vec![vec![0usize; 3]; 3];
    for (g, p) in gold.iter().zip(predicted) {
        confusion[g.label.index()][p.index()] += 1;
    }
    macro_f1(&confusion)
}

/// One fine-tuning run: an epoch of classifier-only training at
/// `frozen_lr`, then full training under cosine warm-up and decay peaking
/// at `peak_lr`. Lazy Adam throughout; the classifier starts at zero.
pub fn train_sentiment_fold(
    encoder: &ContextualEncoder,
    train: &[&SentimentExample],
    peak_lr: f64,
    config: &SentimentConfig,
    seed: u64,
) -> Result<FoldTraining, HeadsError> {
    if train.is_empty() {
        return Err(HeadsError::EmptyFold("no training items".into()));
    }
    let d = encoder.config.hidden;
    let mut params = encoder.params.clone();
    params.insert("cls.w", Tensor::zeros(&[d, 3]));
    params.insert("cls.b", Tensor::zeros(&[3]));
    let schedule = Schedule::CosineWarmupDecay {
        peak_lr,
        warmup_epochs: config.warmup_epochs,
        decay_epochs: config.decay_epochs,
    };
    schedule.validate()?;
    let adam = AdamConfig {
        lazy: true,
        ..AdamConfig::default()
    };
    let mut state = AdamState::new();
    let encoded = encode_texts(encoder, train);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bs = config.batch_size.max(1);
    let steps_per_epoch = encoded.len().div_ceil(bs);
    let mut step_lrs = Vec::new();

    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..encoded.len()).collect();
        order.shuffle(&mut rng);
        for (k, chunk) in order.chunks(bs).enumerate() {
            let frozen = epoch == 0;
            let (lr, position) = if frozen {
                (config.frozen_lr, k as f64 / steps_per_epoch as f64)
            } else {
                let e = (epoch - 1) as f64 + k as f64 / steps_per_epoch as f64;
                (schedule.lr(e), e + 1.0)
            };
            step_lrs.push((position, lr));
            let rows: Vec<&Vec<u32>> = chunk.iter().map(|&i| &encoded[i]).collect();
            let targets: Vec<Option<usize>> = chunk.iter().map(|&i| Some(train[i].label.index())).collect();
            let mut graph = Graph::new();
            let bound = params.bind_where(&mut graph, |name| !frozen || name.starts_with(CLASSIFIER_PREFIX));
            let l = logits(&mut graph, encoder, &bound, &rows)?;
            let loss = graph.cross_entropy(l, &targets);
            if !graph.scalar(loss).is_finite() {
                return Err(NeuralError::NonFiniteLoss.into());
            }
            let grads = graph.backward(loss);
            params.store_grads(&graph, &bound, &grads);
            adam_step(&mut params, &mut state, &adam, lr)?;
        }
    }
    params.zero_grads();
    Ok(FoldTraining { params, step_lrs })
}

/// Runs every grid learning rate on every fold, selects the rate with the
/// best mean development macro-F1 (earlier grid entries win ties) and
/// reports its test macro-F1 mean and population standard deviation.
pub fn run_sentiment_protocol(
    data: &[SentimentExample],
    encoder: &ContextualEncoder,
    config: &SentimentConfig,
) -> Result<SentimentReport, HeadsError> {
    if config.lr_grid.is_empty() {
        return Err(HeadsError::Data("empty learning-rate grid".into()));
    }
    let ids: Vec<usize> = (0..data.len()).collect();
    let folds = kfold_split(&ids, config.folds, config.dev_fraction, config.seed)
        .map_err(|e| HeadsError::EmptyFold(e.to_string()))?;
    for f in &folds {
        if f.train_ids.is_empty() || f.dev_ids.is_empty() || f.test_ids.is_empty() {
            return Err(HeadsError::EmptyFold(format!(
                "fold {} has an empty part",
                f.fold_index
            )));
        }
    }

    let jobs: Vec<(usize, usize)> = (0..config.lr_grid.len())
        .flat_map(|g| (0..folds.len()).map(move |f| (g, f)))
        .collect();
    let outcomes: Vec<FoldOutcome> = jobs
        .par_iter()
        .map(|&(g, f)| {
            let split = &folds[f];
            let pick = |ids: &[usize]| ids.iter().map(|&i| &data[i]).collect::<Vec<_>>();
            let (train, dev, test) = (pick(&split.train_ids), pick(&split.dev_ids), pick(&split.test_ids));
            let fold_seed = config.seed ^ (0xA076_1D64_78BD_642F_u64.wrapping_mul(f as u64 + 1));
            let lr = config.lr_grid[g];
            let trained = train_sentiment_fold(encoder, &train, lr, config, fold_seed)?;
            let dev_pred = predict_polarity(encoder, &trained.params, &dev)?;
            let test_pred = predict_polarity(encoder, &trained.params, &test)?;
            Ok(FoldOutcome {
                fold: f,
                lr,
                dev_f1: macro_f1_of(&dev, &dev_pred),
                test_f1: macro_f1_of(&test, &test_pred),
            })
        })
        .collect::<Result<_, HeadsError>>()?;

    let mut per_lr = Vec::new();
    for &lr in &config.lr_grid {
        let dev: Vec<f64> = outcomes.iter().filter(|o| o.lr == lr).map(|o| o.dev_f1).collect();
        let test: Vec<f64> = outcomes.iter().filter(|o| o.lr == lr).map(|o| o.test_f1).collect();
        let (dev_mean, _) = aggregate_folds(&dev).map_err(|e| HeadsError::Data(e.to_string()))?;
        let (test_mean, test_std) = aggregate_folds(&test).map_err(|e| HeadsError::Data(e.to_string()))?;
        per_lr.push((lr, dev_mean, test_mean, test_std));
    }
    let mut best = 0;
    for (i, row) in per_lr.iter().enumerate() {
        if row.1 > per_lr[best].1 {
            best = i;
        }
    }
    let (selected_lr, _, test_mean, test_std) = per_lr[best];
    Ok(SentimentReport {
        per_lr,
        selected_lr,
        test_mean,
        test_std,
        folds: outcomes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tsv_labels() {
        let data = parse_sentiment_tsv("p\tskvělé\nn\throzné\n\n0\tnic\n").unwrap();
        let labels: Vec<Polarity> = data.iter().map(|e| e.label).collect();
        assert_eq!(labels, vec![Polarity::Positive, Polarity::Negative, Polarity::Neutral]);
        assert!(parse_sentiment_tsv("x\ttext").is_err());
        assert!(parse_sentiment_tsv("p text").is_err());
    }
}
