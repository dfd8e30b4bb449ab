//! FULL-SENTENCES packing and dynamic MLM masking.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::bbpe::ByteVocab;
use crate::corpus::Corpus;

#[derive(Debug, Error, PartialEq)]
pub enum BatchError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("sample stream: {0}")]
    Format(String),
}

/// A packed training sequence: `<s> sentence sentence ... </s>`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Sample {
    pub ids: Vec<u32>,
    /// Positions in `ids` where the first token of a new document starts.
    pub doc_boundary_positions: Vec<usize>,
    /// Set when a single sentence had to be cut to fit.
    pub truncated: bool,
}

impl Sample {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// The ids between the begin and end markers.
    pub fn content(&self) -> &[u32] {
        &self.ids[1..self.ids.len() - 1]
    }
}

/// Packs consecutive sentences into samples of at most `max_len` ids.
///
/// Sentences are appended in corpus order and a sample is closed when the
/// next sentence would not fit. Document boundaries do not close a sample.
/// A sentence longer than `max_len - 2` is truncated into its own sample.
pub fn pack_full_sentences(corpus: &Corpus, vocab: &ByteVocab, max_len: usize) -> Result<Vec<Sample>, BatchError> {
    if max_len < 8 {
        return Err(BatchError::InvalidArgument(format!(
            "max_len must be at least 8, got {max_len}"
        )));
    }
    let specials = vocab.specials();
    let budget = max_len - 2;
    let mut samples = Vec::new();
    let mut content: Vec<u32> = Vec::new();
    let mut boundaries: Vec<usize> = Vec::new();

    let close = |content: &mut Vec<u32>, boundaries: &mut Vec<usize>, truncated: bool, samples: &mut Vec<Sample>| {
        if content.is_empty() {
            return;
        }
        let mut ids = Vec::with_capacity(content.len() + 2);
        ids.push(specials.bos);
        ids.append(content);
        ids.push(specials.eos);
        samples.push(Sample {
            ids,
            doc_boundary_positions: std::mem::take(boundaries),
            truncated,
        });
    };

    for (doc_index, doc) in corpus.documents.iter().enumerate() {
        let mut doc_start = doc_index > 0;
        for sentence in &doc.sentences {
            let mut ids = vocab.encode(&sentence.text()).ids;
            if ids.is_empty() {
                continue;
            }
            if content.len() + ids.len() > budget {
                close(&mut content, &mut boundaries, false, &mut samples);
            }
            if doc_start {
                if !content.is_empty() {
                    boundaries.push(content.len() + 1);
                }
                doc_start = false;
            }
            if ids.len() > budget {
                ids.truncate(budget);
                content = ids;
                close(&mut content, &mut boundaries, true, &mut samples);
            } else {
                content.extend_from_slice(&ids);
            }
        }
    }
    close(&mut content, &mut boundaries, false, &mut samples);
    Ok(samples)
}

/// Corruption probabilities for selected positions: replace with the mask
/// token, replace with a random token, or keep.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MaskPolicy {
    pub mask: f64,
    pub random: f64,
    pub keep: f64,
}

impl Default for MaskPolicy {
    fn default() -> Self {
        MaskPolicy {
            mask: 0.8,
            random: 0.1,
            keep: 0.1,
        }
    }
}

/// One corrupted sample with its prediction targets.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskedRow {
    pub input_ids: Vec<u32>,
    /// `Some(original id)` exactly at the selected positions.
    pub targets: Vec<Option<u32>>,
    pub mask_positions: Vec<usize>,
}

/// Selects each non-special position with probability `mask_prob` and
/// corrupts it according to `policy`.
pub fn apply_dynamic_masking(
    sample: &Sample,
    vocab: &ByteVocab,
    mask_prob: f64,
    policy: MaskPolicy,
    seed: u64,
) -> MaskedRow {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let specials = vocab.specials();
    let first_regular = crate::bbpe::NUM_SPECIAL;
    let vocab_len = vocab.len() as u32;

    let mut input_ids = sample.ids.clone();
    let mut targets = vec![None; sample.ids.len()];
    let mut mask_positions = Vec::new();
    for (pos, &id) in sample.ids.iter().enumerate() {
        if vocab.is_special(id) || rng.gen::<f64>() >= mask_prob {
            continue;
        }
        mask_positions.push(pos);
        targets[pos] = Some(id);
        let u: f64 = rng.gen();
        if u < policy.mask {
            input_ids[pos] = specials.mask;
        } else if u < policy.mask + policy.random {
            input_ids[pos] = rng.gen_range(first_regular..vocab_len);
        }
    }
    MaskedRow {
        input_ids,
        targets,
        mask_positions,
    }
}

/// Rows padded to a common width.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MlmBatch {
    pub input_ids: Vec<Vec<u32>>,
    pub target_ids: Vec<Vec<Option<u32>>>,
    pub mask_positions: Vec<Vec<usize>>,
    pub lengths: Vec<usize>,
}

impl MlmBatch {
    /// Pads rows with `pad_id` (targets with `None`) to the longest row.
    pub fn collate(rows: Vec<MaskedRow>, pad_id: u32) -> Self {
        let width = rows.iter().map(|r| r.input_ids.len()).max().unwrap_or(0);
        let mut batch = MlmBatch {
            input_ids: Vec::with_capacity(rows.len()),
            target_ids: Vec::with_capacity(rows.len()),
            mask_positions: Vec::with_capacity(rows.len()),
            lengths: Vec::with_capacity(rows.len()),
        };
        for mut row in rows {
            batch.lengths.push(row.input_ids.len());
            row.input_ids.resize(width, pad_id);
            row.targets.resize(width, None);
            batch.input_ids.push(row.input_ids);
            batch.target_ids.push(row.targets);
            batch.mask_positions.push(row.mask_positions);
        }
        batch
    }

    pub fn num_targets(&self) -> usize {
        self.mask_positions.iter().map(Vec::len).sum()
    }
}

const SAMPLE_MAGIC: &[u8; 4] = b"MLMS";
const SAMPLE_VERSION: u8 = 1;

/// Binary sample stream: magic `MLMS`, version byte, then per sample a
/// little-endian u32 length followed by that many u32 ids.
pub fn write_samples(samples: &[Sample]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(SAMPLE_MAGIC);
    out.push(SAMPLE_VERSION);
    for s in samples {
        out.extend_from_slice(&(s.ids.len() as u32).to_le_bytes());
        for id in &s.ids {
            out.extend_from_slice(&id.to_le_bytes());
        }
    }
    out
}

/// Reads a sample stream. Boundary positions and truncation flags are not
/// stored and come back empty.
pub fn read_samples(bytes: &[u8]) -> Result<Vec<Vec<u32>>, BatchError> {
    if bytes.len() < 5 || &bytes[..4] != SAMPLE_MAGIC {
        return Err(BatchError::Format("missing MLMS header".into()));
    }
    if bytes[4] != SAMPLE_VERSION {
        return Err(BatchError::Format(format!("unsupported version {}", bytes[4])));
    }
    let mut rest = &bytes[5..];
    let take_u32 = |rest: &mut &[u8]| -> Result<u32, BatchError> {
        if rest.len() < 4 {
            return Err(BatchError::Format("truncated stream".into()));
        }
        let (head, tail) = rest.split_at(4);
        *rest = tail;
        Ok(u32::from_le_bytes(head.try_into().expect("4 bytes")))
    };
    let mut samples = Vec::new();
    while !rest.is_empty() {
        let len = take_u32(&mut rest)? as usize;
        let mut ids = Vec::with_capacity(len);
        for _ in 0..len {
            ids.push(take_u32(&mut rest)?);
        }
        samples.push(ids);
    }
    Ok(samples)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Document, Sentence};

    /// Vocabulary without merges: every byte is one id, so a sentence of
    /// `n` one-byte words has `2n - 1` ids.
    fn bytes_vocab() -> ByteVocab {
        ByteVocab::bytes_only()
    }

    fn sentence_of_len(n_ids: usize) -> Sentence {
        // A single word of n_ids ASCII bytes encodes to n_ids byte tokens.
        Sentence::from_forms(&["x".repeat(n_ids)])
    }

    #[test]
    fn three_two_hundred_sentences() {
        let corpus = Corpus::new(vec![Document::new(
            "d",
            vec![sentence_of_len(200), sentence_of_len(200), sentence_of_len(200)],
        )]);
        let samples = pack_full_sentences(&corpus, &bytes_vocab(), 512).unwrap();
        assert_eq!(samples.len(), 2);
        assert_eq!(samples[0].len(), 402);
        assert_eq!(samples[1].len(), 202);
        assert!(samples.iter().all(|s| !s.truncated));
    }

    #[test]
    fn oversized_sentence_is_truncated() {
        let corpus = Corpus::new(vec![Document::new("d", vec![sentence_of_len(600)])]);
        let samples = pack_full_sentences(&corpus, &bytes_vocab(), 512).unwrap();
        assert_eq!(samples.len(), 1);
        assert_eq!(samples[0].len(), 512);
        assert!(samples[0].truncated);
    }

    #[test]
    fn document_boundaries_are_recorded_not_closing() {
        let corpus = Corpus::new(vec![
            Document::new("a", vec![sentence_of_len(10)]),
            Document::new("b", vec![sentence_of_len(10)]),
        ]);
        let samples = pack_full_sentences(&corpus, &bytes_vocab(), 64).unwrap();
        assert_eq!(samples.len(), 1);
        assert_eq!(samples[0].doc_boundary_positions, vec![11]);
    }

    #[test]
    fn stream_equality() {
        let vocab = bytes_vocab();
        let corpus = Corpus::new(vec![
            Document::new("a", (1..20).map(|n| sentence_of_len(n * 3)).collect()),
            Document::new("b", (1..20).map(|n| sentence_of_len(n * 5)).collect()),
        ]);
        let samples = pack_full_sentences(&corpus, &vocab, 64).unwrap();
        let packed: Vec<u32> = samples.iter().flat_map(|s| s.content().to_vec()).collect();
        let expected: Vec<u32> = corpus
            .sentences()
            .flat_map(|s| {
                let mut ids = vocab.encode(&s.text()).ids;
                ids.truncate(62);
                ids
            })
            .collect();
        assert_eq!(packed, expected);
        assert!(samples.iter().all(|s| s.len() <= 64));
    }

    #[test]
    fn small_max_len_rejected() {
        assert!(pack_full_sentences(&Corpus::default(), &bytes_vocab(), 7).is_err());
    }

    fn long_sample(n: usize) -> Sample {
        let mut ids = vec![0];
        ids.extend((0..n).map(|i| 10 + (i % 200) as u32));
        ids.push(2);
        Sample {
            ids,
            doc_boundary_positions: vec![],
            truncated: false,
        }
    }

    #[test]
    fn zero_probability_is_identity() {
        let s = long_sample(50);
        let row = apply_dynamic_masking(&s, &bytes_vocab(), 0.0, MaskPolicy::default(), 1);
        assert_eq!(row.input_ids, s.ids);
        assert!(row.targets.iter().all(Option::is_none));
    }

    #[test]
    fn full_probability_mask_policy() {
        let s = long_sample(50);
        let vocab = bytes_vocab();
        let policy = MaskPolicy {
            mask: 1.0,
            random: 0.0,
            keep: 0.0,
        };
        let row = apply_dynamic_masking(&s, &vocab, 1.0, policy, 1);
        assert_eq!(row.input_ids[0], 0);
        assert_eq!(*row.input_ids.last().unwrap(), 2);
        assert!(row.input_ids[1..51].iter().all(|&id| id == vocab.specials().mask));
        assert_eq!(row.mask_positions.len(), 50);
    }

    #[test]
    fn selection_rate_concentrates() {
        let s = long_sample(100_000);
        let row = apply_dynamic_masking(&s, &bytes_vocab(), 0.15, MaskPolicy::default(), 42);
        let rate = row.mask_positions.len() as f64 / 100_000.0;
        assert!((0.143..=0.157).contains(&rate), "rate {rate}");
    }

    #[test]
    fn masking_invariants() {
        let s = long_sample(500);
        let vocab = bytes_vocab();
        let a = apply_dynamic_masking(&s, &vocab, 0.15, MaskPolicy::default(), 3);
        let b = apply_dynamic_masking(&s, &vocab, 0.15, MaskPolicy::default(), 4);
        assert_ne!(a, b, "different seeds corrupt differently");
        assert_eq!(a, apply_dynamic_masking(&s, &vocab, 0.15, MaskPolicy::default(), 3));
        for (pos, (&orig, (&inp, tgt))) in s.ids.iter().zip(a.input_ids.iter().zip(&a.targets)).enumerate() {
            match tgt {
                Some(t) => {
                    assert_eq!(*t, orig);
                    assert!(!vocab.is_special(orig));
                    assert!(a.mask_positions.contains(&pos));
                }
                None => assert_eq!(inp, orig),
            }
        }
    }

    #[test]
    fn sample_stream_round_trip() {
        let samples = vec![long_sample(3), long_sample(0)];
        let bytes = write_samples(&samples);
        let back = read_samples(&bytes).unwrap();
        assert_eq!(back, samples.iter().map(|s| s.ids.clone()).collect::<Vec<_>>());
        assert!(read_samples(&bytes[..bytes.len() - 1]).is_err());
        assert!(read_samples(b"XXXX\x01").is_err());
    }

    #[test]
    fn collate_pads() {
        let vocab = bytes_vocab();
        let rows = vec![
            apply_dynamic_masking(&long_sample(3), &vocab, 0.5, MaskPolicy::default(), 1),
            apply_dynamic_masking(&long_sample(6), &vocab, 0.5, MaskPolicy::default(), 2),
        ];
        let batch = MlmBatch::collate(rows, vocab.specials().pad);
        assert_eq!(batch.input_ids[0].len(), 8);
        assert_eq!(batch.lengths, vec![5, 8]);
        assert_eq!(batch.input_ids[0][5..], [1, 1, 1]);
    }
}
