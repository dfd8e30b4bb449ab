use super::{decode_utf8, Corpus, CorpusError, Document, Sentence};

/// How document boundaries are recognised in plain text.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum DocSeparator {
    /// One or more blank lines end a document.
    #[default]
    BlankLine,
    /// The whole stream is a single document.
    None,
}

/// Reads plain text: one sentence per non-empty line, whitespace tokenized.
pub fn ingest_plaintext(stream: &[u8], separator: DocSeparator) -> Result<Corpus, CorpusError> {
    let text = decode_utf8(stream)?;
    let mut documents = Vec::new();
    let mut current: Vec<Sentence> = Vec::new();

    let flush = |current: &mut Vec<Sentence>, documents: &mut Vec<Document>| {
        if !current.is_empty() {
            let id = format!("d{}", documents.len() + 1);
            documents.push(Document::new(id, std::mem::take(current)));
        }
    };

    for line in text.lines() {
        let words: Vec<&str> = line.split_whitespace().collect();
        if words.is_empty() {
            if separator == DocSeparator::BlankLine {
                flush(&mut current, &mut documents);
            }
            continue;
        }
        current.push(Sentence::from_forms(&words));
    }
    flush(&mut current, &mut documents);

    Ok(Corpus::new(documents))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blank_lines_split_documents() {
        let corpus = ingest_plaintext(b"a b\n\nc", DocSeparator::BlankLine).unwrap();
        assert_eq!(corpus.documents.len(), 2);
        assert_eq!(corpus.token_count(), 3);
    }

    #[test]
    fn empty_stream() {
        let corpus = ingest_plaintext(b"", DocSeparator::BlankLine).unwrap();
        assert!(corpus.documents.is_empty());
        assert_eq!(corpus.token_count(), 0);
    }

    #[test]
    fn thousand_words_single_document() {
        let words: Vec<String> = (0..1000).map(|i| format!("w{}", i % 37)).collect();
        // Lines of varying width, no blank lines.
        let mut text = String::new();
        for (i, w) in words.iter().enumerate() {
            text.push_str(w);
            text.push(if i % 13 == 12 { '\n' } else { ' ' });
        }
        let corpus = ingest_plaintext(text.as_bytes(), DocSeparator::BlankLine).unwrap();
        assert_eq!(corpus.documents.len(), 1);
        assert_eq!(corpus.token_count(), text.split_whitespace().count());
        assert_eq!(corpus.token_count(), 1000);
    }

    #[test]
    fn invalid_utf8_reports_offset() {
        let err = ingest_plaintext(b"ab\xffcd", DocSeparator::BlankLine).unwrap_err();
        assert_eq!(err, CorpusError::Utf8 { offset: 2 });
    }

    #[test]
    fn no_separator_keeps_one_document() {
        let corpus = ingest_plaintext(b"a\n\nb\n", DocSeparator::None).unwrap();
        assert_eq!(corpus.documents.len(), 1);
        assert_eq!(corpus.sentence_count(), 2);
    }
}
