use std::cmp::Ordering;
use std::collections::{BTreeMap, HashMap, HashSet};

use rayon::prelude::*;

use super::{pretokenize, BpeError, ByteVocab, Merge, MIN_VOCAB};
use crate::corpus::Corpus;

struct Word {
    symbols: Vec<u32>,
    count: i64,
}

fn pairs_of(symbols: &[u32]) -> impl Iterator<Item = (u32, u32)> + '_ {
    symbols.windows(2).map(|w| (w[0], w[1]))
}

/// Learns a byte-level BPE vocabulary over the corpus sentences.
///
/// Each step merges the most frequent adjacent pair. Ties prefer the pair
/// whose newer operand was created earlier, then the lexicographically
/// smaller `(left bytes, right bytes)`. Training stops when the vocabulary
/// reaches `vocab_cap` or no pair occurs at least twice.
pub fn train_bbpe(corpus: &Corpus, vocab_cap: usize) -> Result<ByteVocab, BpeError> {
    if vocab_cap < MIN_VOCAB {
        return Err(BpeError::Training(format!(
            "vocab_cap {vocab_cap} is below the minimum {MIN_VOCAB}"
        )));
    }
    if corpus.token_count() == 0 {
        return Err(BpeError::Training("corpus is empty".into()));
    }

    let sentences: Vec<String> = corpus.sentences().map(|s| s.text()).collect();
    let piece_counts: BTreeMap<Vec<u8>, i64> = sentences
        .par_iter()
        .map(|text| {
            let mut counts: HashMap<Vec<u8>, i64> = HashMap::new();
            for (s, e) in pretokenize(text) {
                *counts.entry(text.as_bytes()[s..e].to_vec()).or_default() += 1;
            }
            counts
        })
        .reduce(HashMap::new, |mut a, b| {
            for (k, v) in b {
                *a.entry(k).or_default() += v;
            }
            a
        })
        .into_iter()
        .collect();

    let mut words: Vec<Word> = piece_counts
        .into_iter()
        .map(|(bytes, count)| Word {
            symbols: bytes.iter().map(|&b| ByteVocab::byte_id(b)).collect(),
            count,
        })
        .collect();

    let mut pair_counts: HashMap<(u32, u32), i64> = HashMap::new();
    let mut pair_words: HashMap<(u32, u32), HashSet<usize>> = HashMap::new();
    for (wi, w) in words.iter().enumerate() {
        for p in pairs_of(&w.symbols) {
            *pair_counts.entry(p).or_default() += w.count;
            pair_words.entry(p).or_default().insert(wi);
        }
    }

    let base = ByteVocab::bytes_only();
    let mut tokens = base.tokens;
    let mut index: HashMap<Vec<u8>, u32> = tokens
        .iter()
        .enumerate()
        .skip(super::NUM_SPECIAL as usize)
        .map(|(i, t)| (t.clone(), i as u32))
        .collect();
    let mut merges = Vec::new();

    loop {
        let best = pair_counts
            .iter()
            .filter(|(_, &c)| c >= 2)
            .max_by(|a, b| compare_candidates(&tokens, *a, *b));
        let Some((&pair, _)) = best else { break };

        let mut merged = tokens[pair.0 as usize].clone();
        merged.extend_from_slice(&tokens[pair.1 as usize]);
        let result = match index.get(&merged) {
            Some(&id) => id,
            None => {
                if tokens.len() >= vocab_cap {
                    break;
                }
                let id = tokens.len() as u32;
                index.insert(merged.clone(), id);
                tokens.push(merged);
                id
            }
        };
        merges.push(Merge {
            left: pair.0,
            right: pair.1,
            result,
        });

        let affected: Vec<usize> = {
            let mut v: Vec<usize> = pair_words.remove(&pair).unwrap_or_default().into_iter().collect();
            v.sort_unstable();
            v
        };
        for wi in affected {
            let word = &mut words[wi];
            for p in pairs_of(&word.symbols) {
                if let Some(c) = pair_counts.get_mut(&p) {
                    *c -= word.count;
                }
            }
            let mut next = Vec::with_capacity(word.symbols.len());
            let mut i = 0;
            while i < word.symbols.len() {
                if i + 1 < word.symbols.len() && (word.symbols[i], word.symbols[i + 1]) == pair {
                    next.push(result);
                    i += 2;
                } else {
                    next.push(word.symbols[i]);
                    i += 1;
                }
            }
            word.symbols = next;
            for p in pairs_of(&word.symbols) {
                *pair_counts.entry(p).or_default() += word.count;
                pair_words.entry(p).or_default().insert(wi);
            }
        }
        pair_counts.retain(|_, c| *c > 0);
    }

    Ok(ByteVocab::from_parts(tokens, merges))
}

fn compare_candidates(tokens: &[Vec<u8>], a: (&(u32, u32), &i64), b: (&(u32, u32), &i64)) -> Ordering {
    let (pa, ca) = a;
    let (pb, cb) = b;
    ca.cmp(cb)
        // Larger is better for max_by, so invert the "earlier wins" keys.
        .then_with(|| pb.0.max(pb.1).cmp(&pa.0.max(pa.1)))
        .then_with(|| {
            let ka = (&tokens[pb.0 as usize], &tokens[pb.1 as usize]);
            let kb = (&tokens[pa.0 as usize], &tokens[pa.1 as usize]);
            ka.cmp(&kb)
        })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{ingest_plaintext, DocSeparator};

    fn corpus(text: &str) -> Corpus {
        ingest_plaintext(text.as_bytes(), DocSeparator::BlankLine).unwrap()
    }

    #[test]
    fn abab_merge_sequence() {
        let vocab = train_bbpe(&corpus("abab abab"), 300).unwrap();
        let a = ByteVocab::byte_id(b'a');
        let b = ByteVocab::byte_id(b'b');
        let ab = MIN_VOCAB as u32;
        assert_eq!(
            vocab.merges(),
            &[
                Merge {
                    left: a,
                    right: b,
                    result: ab
                },
                Merge {
                    left: ab,
                    right: ab,
                    result: ab + 1
                },
            ]
        );
        assert_eq!(vocab.token_bytes(ab + 1), Some(&b"abab"[..]));
        assert_eq!(vocab.encode("abab").ids, vec![ab + 1]);
    }

    #[test]
    fn minimum_cap_means_no_merges() {
        let vocab = train_bbpe(&corpus("abab abab"), MIN_VOCAB).unwrap();
        assert!(vocab.merges().is_empty());
        assert_eq!(vocab.len(), MIN_VOCAB);
    }

    #[test]
    fn training_is_deterministic() {
        let c = corpus("the cat sat on the mat\nthe dog sat on the log\n\nthat is that");
        assert_eq!(train_bbpe(&c, 400).unwrap(), train_bbpe(&c, 400).unwrap());
    }

    #[test]
    fn empty_corpus_is_an_error() {
        assert!(matches!(train_bbpe(&corpus(""), 300), Err(BpeError::Training(_))));
    }

    #[test]
    fn unseen_characters_fall_back_to_bytes() {
        let vocab = train_bbpe(&corpus("abab abab"), 300).unwrap();
        let enc = vocab.encode("ab ř");
        assert!(enc
            .ids
            .iter()
            .all(|&id| (id as usize) < vocab.len() && !vocab.is_special(id)));
        assert_eq!(vocab.decode(&enc.ids).unwrap(), "ab ř");
    }

    #[test]
    fn cap_is_respected() {
        let c = corpus("aaaa bbbb cccc dddd aaaa bbbb cccc dddd abcd abcd");
        for cap in MIN_VOCAB..MIN_VOCAB + 8 {
            assert!(train_bbpe(&c, cap).unwrap().len() <= cap);
        }
    }
}
