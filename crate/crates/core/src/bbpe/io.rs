use super::{BpeError, ByteVocab, Merge, MIN_VOCAB, NUM_SPECIAL, SPECIAL_NAMES};

/// Serializes the vocabulary as `(vocab file, merge file)`.
///
/// Vocab lines are `id<TAB>hex bytes`; merge lines are
/// `left<TAB>right<TAB>result` in training order.
pub fn save_vocab(vocab: &ByteVocab) -> (String, String) {
    let mut tokens = String::new();
    for (id, bytes) in vocab.tokens().iter().enumerate() {
        tokens.push_str(&format!("{id}\t{}\n", hex::encode(bytes)));
    }
    let mut merges = String::new();
    for m in vocab.merges() {
        merges.push_str(&format!("{}\t{}\t{}\n", m.left, m.right, m.result));
    }
    (tokens, merges)
}

fn vocab_err(line: usize, message: impl Into<String>) -> BpeError {
    BpeError::Format {
        file: "vocab",
        line,
        message: message.into(),
    }
}

fn merge_err(line: usize, message: impl Into<String>) -> BpeError {
    BpeError::Format {
        file: "merges",
        line,
        message: message.into(),
    }
}

/// Parses and validates the two files written by [`save_vocab`].
pub fn load_vocab(vocab_text: &str, merges_text: &str) -> Result<ByteVocab, BpeError> {
    let mut tokens: Vec<Vec<u8>> = Vec::new();
    for (i, line) in vocab_text.lines().enumerate() {
        let line_no = i + 1;
        let (id, hex_bytes) = line
            .split_once('\t')
            .ok_or_else(|| vocab_err(line_no, "expected id<TAB>hex"))?;
        let id: usize = id.parse().map_err(|_| vocab_err(line_no, format!("bad id {id:?}")))?;
        if id != tokens.len() {
            return Err(vocab_err(line_no, format!("expected id {}, found {id}", tokens.len())));
        }
        let bytes = hex::decode(hex_bytes).map_err(|e| vocab_err(line_no, e.to_string()))?;
        if id < NUM_SPECIAL as usize {
            if bytes != SPECIAL_NAMES[id].as_bytes() {
                return Err(vocab_err(
                    line_no,
                    format!("expected special token {}", SPECIAL_NAMES[id]),
                ));
            }
        } else if id < MIN_VOCAB && bytes != [(id - NUM_SPECIAL as usize) as u8] {
            return Err(vocab_err(line_no, "byte tokens must enumerate 0x00..=0xff in order"));
        }
        tokens.push(bytes);
    }
    if tokens.len() < MIN_VOCAB {
        return Err(vocab_err(tokens.len() + 1, "vocabulary is missing byte tokens"));
    }

    let mut merges = Vec::new();
    let mut next_new = MIN_VOCAB;
    for (i, line) in merges_text.lines().enumerate() {
        let line_no = i + 1;
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 3 {
            return Err(merge_err(line_no, format!("expected 3 columns, found {}", cols.len())));
        }
        let mut ids = [0u32; 3];
        for (slot, col) in ids.iter_mut().zip(&cols) {
            *slot = col.parse().map_err(|_| merge_err(line_no, format!("bad id {col:?}")))?;
        }
        let [left, right, result] = ids;
        for id in ids {
            if id as usize >= tokens.len() || id < NUM_SPECIAL {
                return Err(merge_err(line_no, format!("unknown token id {id}")));
            }
        }
        let r = result as usize;
        if r == next_new {
            next_new += 1;
        } else if r > next_new || r < MIN_VOCAB {
            return Err(merge_err(line_no, format!("result id {result} out of training order")));
        }
        let mut joined = tokens[left as usize].clone();
        joined.extend_from_slice(&tokens[right as usize]);
        if joined != tokens[r] {
            return Err(merge_err(line_no, "result is not the concatenation of its operands"));
        }
        if left as usize >= next_new.max(MIN_VOCAB) || right as usize >= next_new.max(MIN_VOCAB) {
            return Err(merge_err(line_no, "operand used before it was created"));
        }
        merges.push(Merge { left, right, result });
    }
    if next_new != tokens.len() {
        return Err(merge_err(
            merges.len() + 1,
            format!("token {next_new} is never produced by a merge"),
        ));
    }
    Ok(ByteVocab::from_parts(tokens, merges))
}
