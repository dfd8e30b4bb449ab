//! Evaluation metrics.
//!
//! Every F1 here uses the zero-denominator convention: precision, recall or
//! F1 whose denominator is zero is reported as 0. Values on the 0–1 scale are
//! returned by [`PrfCounts`]; report types state their scale explicitly.

mod conll;
mod mrp;

pub use conll::{eval_conllu, ConlluEvalReport, CONTENT_DEPRELS, FUNCTIONAL_DEPRELS, UNIVERSAL_FEATURES};
pub use mrp::{
    mces_align, mrp_score, read_mrp_jsonl, write_mrp_jsonl, MrpAlignment, MrpAnchor, MrpEdge, MrpGraph, MrpNode,
    MrpScore, DEFAULT_NODE_LIMIT,
};

use std::collections::HashMap;
use std::ops::{Add, AddAssign};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::EntitySpan;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("gold and system text differ at character {offset}: {gold:?} vs {system:?}")]
    TextMismatch {
        offset: usize,
        gold: String,
        system: String,
    },
    #[error("invalid tree in {side} data: {message}")]
    InvalidTree { side: &'static str, message: String },
    #[error("invalid graph {id}: {message}")]
    InvalidGraph { id: String, message: String },
    #[error("alignment refers to unknown node {0}")]
    UnknownNode(usize),
    #[error("cannot aggregate an empty list of scores")]
    EmptyScores,
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
}

/// Counts behind a precision/recall/F1 triple.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrfCounts {
    pub correct: usize,
    pub system_total: usize,
    pub gold_total: usize,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

impl PrfCounts {
    pub fn new(correct: usize, system_total: usize, gold_total: usize) -> Self {
        PrfCounts {
            correct,
            system_total,
            gold_total,
        }
    }

    pub fn precision(&self) -> f64 {
        ratio(self.correct, self.system_total)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.correct, self.gold_total)
    }

    pub fn f1(&self) -> f64 {
        ratio(2 * self.correct, self.system_total + self.gold_total)
    }
}

impl Add for PrfCounts {
    type Output = PrfCounts;

    fn add(self, rhs: PrfCounts) -> PrfCounts {
        PrfCounts {
            correct: self.correct + rhs.correct,
            system_total: self.system_total + rhs.system_total,
            gold_total: self.gold_total + rhs.gold_total,
        }
    }
}

impl AddAssign for PrfCounts {
    fn add_assign(&mut self, rhs: PrfCounts) {
        *self = *self + rhs;
    }
}

impl std::iter::Sum for PrfCounts {
    fn sum<I: Iterator<Item = PrfCounts>>(iter: I) -> Self {
        iter.fold(PrfCounts::default(), Add::add)
    }
}

/// Exact-match span scoring with multiset semantics.
pub fn span_f1(gold: &[EntitySpan], system: &[EntitySpan]) -> PrfCounts {
    let mut remaining: HashMap<&EntitySpan, usize> = HashMap::new();
    for span in gold {
        *remaining.entry(span).or_default() += 1;
    }
    let mut correct = 0;
    for span in system {
        if let Some(n) = remaining.get_mut(span) {
            if *n > 0 {
                *n -= 1;
                correct += 1;
            }
        }
    }
    PrfCounts::new(correct, system.len(), gold.len())
}

/// Unweighted mean of per-label F1 on the 0–100 scale. Rows are gold labels,
/// columns predicted labels.
pub fn macro_f1(confusion: &[Vec<usize>]) -> f64 {
    let n = confusion.len();
    if n == 0 {
        return 0.0;
    }
    assert!(
        confusion.iter().all(|r| r.len() == n),
        "confusion matrix must be square"
    );
    let total: f64 = (0..n)
        .map(|i| {
            let tp = confusion[i][i];
            let gold: usize = confusion[i].iter().sum();
            let predicted: usize = confusion.iter().map(|r| r[i]).sum();
            PrfCounts::new(tp, predicted, gold).f1()
        })
        .sum();
    100.0 * total / n as f64
}

/// Confusion matrix from parallel gold and predicted label indices.
pub fn confusion_matrix(gold: &[usize], predicted: &[usize], labels: usize) -> Vec<Vec<usize>> {
    let mut m = vec![vec![0; labels]; labels];
    for (&g, &p) in gold.iter().zip(predicted) {
        m[g][p] += 1;
    }
    m
}

/// Mean and population standard deviation.
pub fn aggregate_folds(scores: &[f64]) -> Result<(f64, f64), MetricsError> {
    if scores.is_empty() {
        return Err(MetricsError::EmptyScores);
    }
    let n = scores.len() as f64;
    let mean = scores.iter().sum::<f64>() / n;
    let var = scores.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / n;
    Ok((mean, var.sqrt()))
}

/// Renders `(name, value)` rows as an aligned two-column table.
pub fn render_table(header: (&str, &str), rows: &[(String, String)]) -> String {
    let width = rows
        .iter()
        .map(|(k, _)| k.chars().count())
        .chain(std::iter::once(header.0.chars().count()))
        .max()
        .unwrap_or(0);
    let vwidth = rows
        .iter()
        .map(|(_, v)| v.chars().count())
        .chain(std::iter::once(header.1.chars().count()))
        .max()
        .unwrap_or(0);
    let mut out = format!("{:<width$}  {:>vwidth$}\n", header.0, header.1);
    out.push_str(&format!("{}  {}\n", "-".repeat(width), "-".repeat(vwidth)));
    for (k, v) in rows {
        out.push_str(&format!("{k:<width$}  {v:>vwidth$}\n"));
    }
    out
}
