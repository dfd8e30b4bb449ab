use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Corpus, CorpusError, Document};

/// Groups sentences greedily into blocks of at most `max_block_words` words
/// and permutes the blocks. A sentence longer than the cap is its own block.
pub fn block_shuffle(doc: &Document, max_block_words: usize, seed: u64) -> Document {
    assert!(max_block_words >= 1, "max_block_words must be positive");
    let mut blocks: Vec<Vec<usize>> = Vec::new();
    let mut current = Vec::new();
    let mut words = 0;
    for (i, s) in doc.sentences.iter().enumerate() {
        if !current.is_empty() && words + s.len() > max_block_words {
            blocks.push(std::mem::take(&mut current));
            words = 0;
        }
        current.push(i);
        words += s.len();
    }
    if !current.is_empty() {
        blocks.push(current);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    blocks.shuffle(&mut rng);

    Document {
        id: doc.id.clone(),
        sentences: blocks.into_iter().flatten().map(|i| doc.sentences[i].clone()).collect(),
        marked: doc.marked,
    }
}

/// Keeps documents with at least `min_tokens` words.
pub fn filter_min_tokens(corpus: &Corpus, min_tokens: usize) -> Corpus {
    Corpus::new(
        corpus
            .documents
            .iter()
            .filter(|d| d.token_count() >= min_tokens)
            .cloned()
            .collect(),
    )
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FoldRole {
    Train,
    Dev,
    Test,
}

impl fmt::Display for FoldRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FoldRole::Train => "train",
            FoldRole::Dev => "dev",
            FoldRole::Test => "test",
        })
    }
}

impl FromStr for FoldRole {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(FoldRole::Train),
            "dev" => Ok(FoldRole::Dev),
            "test" => Ok(FoldRole::Test),
            other => Err(format!("unknown fold role {other:?}")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FoldSplit<T> {
    pub fold_index: usize,
    pub train_ids: Vec<T>,
    pub dev_ids: Vec<T>,
    pub test_ids: Vec<T>,
}

/// Seeded k-fold cross-validation with a random dev carve-out per fold.
///
/// Test folds partition the items with sizes differing by at most one. Each
/// fold's dev set holds `round(dev_fraction * non_test)` items drawn from its
/// non-test items; the remainder is the training set. Within each list the
/// items keep their input order.
pub fn kfold_split<T: Clone>(
    item_ids: &[T],
    k: usize,
    dev_fraction: f64,
    seed: u64,
) -> Result<Vec<FoldSplit<T>>, CorpusError> {
    if k < 2 {
        return Err(CorpusError::InvalidArgument(format!("k must be at least 2, got {k}")));
    }
    if item_ids.len() < k {
        return Err(CorpusError::InvalidArgument(format!(
            "{} items cannot form {k} folds",
            item_ids.len()
        )));
    }
    if !(0.0..1.0).contains(&dev_fraction) {
        return Err(CorpusError::InvalidArgument(format!(
            "dev_fraction must be in [0, 1), got {dev_fraction}"
        )));
    }

    let n = item_ids.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

    let base = n / k;
    let extra = n % k;
    let mut folds = Vec::with_capacity(k);
    let mut start = 0;
    for fold in 0..k {
        let size = base + usize::from(fold < extra);
        let mut in_test = vec![false; n];
        for &i in &order[start..start + size] {
            in_test[i] = true;
        }
        start += size;

        let mut rest: Vec<usize> = (0..n).filter(|&i| !in_test[i]).collect();
        let n_dev = (dev_fraction * rest.len() as f64).round() as usize;
        let fold_seed = seed ^ (0x9E37_79B9_7F4A_7C15u64.wrapping_mul(fold as u64 + 1));
        rest.shuffle(&mut ChaCha8Rng::seed_from_u64(fold_seed));
        let mut in_dev = vec![false; n];
        for &i in &rest[..n_dev] {
            in_dev[i] = true;
        }

        let pick = |pred: &dyn Fn(usize) -> bool| -> Vec<T> {
            (0..n).filter(|&i| pred(i)).map(|i| item_ids[i].clone()).collect()
        };
        folds.push(FoldSplit {
            fold_index: fold,
            train_ids: pick(&|i| !in_test[i] && !in_dev[i]),
            dev_ids: pick(&|i| in_dev[i]),
            test_ids: pick(&|i| in_test[i]),
        });
    }
    Ok(folds)
}

/// Serializes folds as `fold<TAB>role<TAB>id` lines.
pub fn write_folds<T: fmt::Display>(folds: &[FoldSplit<T>]) -> String {
    let mut out = String::new();
    for fold in folds {
        for (role, ids) in [
            (FoldRole::Train, &fold.train_ids),
            (FoldRole::Dev, &fold.dev_ids),
            (FoldRole::Test, &fold.test_ids),
        ] {
            for id in ids {
                out.push_str(&format!("{}\t{role}\t{id}\n", fold.fold_index));
            }
        }
    }
    out
}

pub fn read_folds(text: &str) -> Result<Vec<FoldSplit<String>>, CorpusError> {
    let mut folds: Vec<FoldSplit<String>> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let err = |message: String| CorpusError::Parse { line: i + 1, message };
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 3 {
            return Err(err(format!("expected 3 columns, found {}", cols.len())));
        }
        let fold: usize = cols[0].parse().map_err(|_| err(format!("bad fold {:?}", cols[0])))?;
        let role: FoldRole = cols[1].parse().map_err(err)?;
        while folds.len() <= fold {
            folds.push(FoldSplit {
                fold_index: folds.len(),
                train_ids: Vec::new(),
                dev_ids: Vec::new(),
                test_ids: Vec::new(),
            });
        }
        let f = &mut folds[fold];
        match role {
            FoldRole::Train => f.train_ids.push(cols[2].to_string()),
            FoldRole::Dev => f.dev_ids.push(cols[2].to_string()),
            FoldRole::Test => f.test_ids.push(cols[2].to_string()),
        }
    }
    Ok(folds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Sentence;

    fn sentence(n: usize) -> Sentence {
        let forms: Vec<String> = (0..n).map(|i| format!("w{i}")).collect();
        Sentence::from_forms(&forms)
    }

    #[test]
    fn two_sixty_word_sentences_form_two_blocks() {
        let doc = Document::new("d", vec![sentence(60), sentence(60)]);
        let mut outcomes = std::collections::HashSet::new();
        for seed in 0..32 {
            let out = block_shuffle(&doc, 100, seed);
            assert_eq!(out.sentences.len(), 2);
            outcomes.insert(out.sentences.iter().map(|s| s.len()).collect::<Vec<_>>());
        }
        // Both sentences have 60 words, so distinguish by identity instead.
        let mut a = sentence(60);
        a.tokens[0].form = "first".into();
        let doc = Document::new("d", vec![a.clone(), sentence(60)]);
        let orders: std::collections::HashSet<bool> = (0..32)
            .map(|seed| block_shuffle(&doc, 100, seed).sentences[0] == a)
            .collect();
        assert_eq!(orders.len(), 2, "both orderings should be reachable");
        assert_eq!(outcomes.len(), 1);
    }

    #[test]
    fn oversized_sentence_is_identity() {
        let doc = Document::new("d", vec![sentence(150)]);
        assert_eq!(block_shuffle(&doc, 100, 7), doc);
    }

    #[test]
    fn block_shuffle_is_deterministic() {
        let doc = Document::new("d", (1..30).map(sentence).collect());
        assert_eq!(block_shuffle(&doc, 100, 3), block_shuffle(&doc, 100, 3));
    }

    #[test]
    fn filter_boundary() {
        let corpus = Corpus::new(vec![
            Document::new("a", vec![sentence(399)]),
            Document::new("b", vec![sentence(200), sentence(200)]),
        ]);
        let out = filter_min_tokens(&corpus, 400);
        assert_eq!(out.documents.len(), 1);
        assert_eq!(out.documents[0].id, "b");
        assert_eq!(filter_min_tokens(&corpus, 0), corpus);
    }

    #[test]
    fn ten_items_ten_folds() {
        let ids: Vec<u32> = (0..10).collect();
        let folds = kfold_split(&ids, 10, 0.1, 1).unwrap();
        assert!(folds.iter().all(|f| f.test_ids.len() == 1));
        let mut all: Vec<u32> = folds.iter().flat_map(|f| f.test_ids.clone()).collect();
        all.sort();
        assert_eq!(all, ids);
    }

    #[test]
    fn dev_size_is_rounded_fraction() {
        let ids: Vec<u32> = (0..100).collect();
        for f in kfold_split(&ids, 10, 0.1, 5).unwrap() {
            assert_eq!(f.dev_ids.len(), 9);
            assert_eq!(f.train_ids.len(), 81);
        }
    }

    #[test]
    fn too_few_items() {
        assert!(matches!(
            kfold_split(&[1, 2, 3], 10, 0.1, 0),
            Err(CorpusError::InvalidArgument(_))
        ));
    }

    #[test]
    fn folds_serialize_round_trip() {
        let ids: Vec<String> = (0..23).map(|i| format!("item{i}")).collect();
        let folds = kfold_split(&ids, 4, 0.1, 9).unwrap();
        let text = write_folds(&folds);
        assert_eq!(read_folds(&text).unwrap(), folds);
    }
}
