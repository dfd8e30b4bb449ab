use std::fmt::Write as _;

use super::{decode_utf8, sort_feats, Corpus, CorpusError, Document, MultiwordToken, Sentence, Token};

fn opt(col: &str) -> Option<String> {
    if col == "_" {
        None
    } else {
        Some(col.to_string())
    }
}

fn parse_feats(col: &str, line: usize) -> Result<Option<Vec<(String, String)>>, CorpusError> {
    if col == "_" {
        return Ok(None);
    }
    let mut feats = Vec::new();
    for pair in col.split('|') {
        let (k, v) = pair.split_once('=').ok_or_else(|| CorpusError::Parse {
            line,
            message: format!("malformed feature {pair:?}"),
        })?;
        feats.push((k.to_string(), v.to_string()));
    }
    sort_feats(&mut feats);
    if feats.windows(2).any(|w| w[0].0 == w[1].0) {
        return Err(CorpusError::Parse {
            line,
            message: format!("duplicate feature name in {col:?}"),
        });
    }
    Ok(Some(feats))
}

fn parse_error(line: usize, message: impl Into<String>) -> CorpusError {
    CorpusError::Parse {
        line,
        message: message.into(),
    }
}

#[derive(Default)]
struct Builder {
    documents: Vec<Document>,
    doc: Document,
    sentence: Sentence,
    /// (line number, head) for range checking once the sentence is complete.
    heads: Vec<(usize, usize)>,
}

impl Builder {
    fn finish_sentence(&mut self) -> Result<(), CorpusError> {
        if self.sentence.tokens.is_empty() && self.sentence.comments.is_empty() {
            return Ok(());
        }
        let len = self.sentence.tokens.len();
        for &(line, head) in &self.heads {
            if head > len {
                return Err(parse_error(line, format!("HEAD {head} out of range 0..={len}")));
            }
        }
        self.heads.clear();
        self.doc.sentences.push(std::mem::take(&mut self.sentence));
        Ok(())
    }

    fn finish_document(&mut self) {
        if !self.doc.sentences.is_empty() || self.doc.marked {
            self.documents.push(std::mem::take(&mut self.doc));
        }
    }
}

/// Parses CoNLL-U. `# newdoc` lines start documents; other comments are
/// kept verbatim on the following sentence.
pub fn ingest_conllu(stream: &[u8]) -> Result<Corpus, CorpusError> {
    let text = decode_utf8(stream)?;
    let mut b = Builder::default();

    for (idx, raw) in text.split('\n').enumerate() {
        let line_no = idx + 1;
        let line = raw.strip_suffix('\r').unwrap_or(raw);
        if line.is_empty() {
            b.finish_sentence()?;
            continue;
        }
        if let Some(rest) = line.strip_prefix("# newdoc") {
            b.finish_sentence()?;
            b.finish_document();
            let id = rest
                .trim()
                .strip_prefix("id")
                .map(|r| r.trim_start().trim_start_matches('=').trim())
                .unwrap_or("");
            b.doc = Document {
                id: id.to_string(),
                sentences: Vec::new(),
                marked: true,
            };
            continue;
        }
        if line.starts_with('#') {
            b.sentence.comments.push(line.to_string());
            continue;
        }

        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 10 {
            return Err(parse_error(
                line_no,
                format!("expected 10 tab-separated columns, found {}", cols.len()),
            ));
        }
        let id = cols[0];
        if let Some((a, z)) = id.split_once('-') {
            let first = a
                .parse()
                .map_err(|_| parse_error(line_no, format!("bad range id {id:?}")))?;
            let last = z
                .parse()
                .map_err(|_| parse_error(line_no, format!("bad range id {id:?}")))?;
            b.sentence.multiword.push(MultiwordToken {
                first,
                last,
                form: cols[1].to_string(),
                rest: cols[2..].join("\t"),
            });
            continue;
        }
        if id.contains('.') {
            let after = b.sentence.tokens.len();
            b.sentence.empty_nodes.push((after, line.to_string()));
            continue;
        }
        let index: usize = id
            .parse()
            .map_err(|_| parse_error(line_no, format!("non-integer ID {id:?}")))?;
        if index != b.sentence.tokens.len() + 1 {
            return Err(parse_error(
                line_no,
                format!("ID {index} out of sequence, expected {}", b.sentence.tokens.len() + 1),
            ));
        }
        if cols[1].is_empty() {
            return Err(parse_error(line_no, "empty FORM"));
        }
        let head = if cols[6] == "_" {
            None
        } else {
            let h: usize = cols[6]
                .parse()
                .map_err(|_| parse_error(line_no, format!("non-integer HEAD {:?}", cols[6])))?;
            b.heads.push((line_no, h));
            Some(h)
        };
        b.sentence.tokens.push(Token {
            form: cols[1].to_string(),
            lemma: opt(cols[2]),
            upos: opt(cols[3]),
            xpos: opt(cols[4]),
            ufeats: parse_feats(cols[5], line_no)?,
            head,
            deprel: opt(cols[7]),
            deps: opt(cols[8]),
            misc: opt(cols[9]),
        });
    }
    b.finish_sentence()?;
    b.finish_document();
    Ok(Corpus::new(b.documents))
}

fn or_blank(v: &Option<String>) -> &str {
    v.as_deref().unwrap_or("_")
}

/// Serializes a corpus as CoNLL-U; inverse of [`ingest_conllu`].
pub fn write_conllu(corpus: &Corpus) -> String {
    let mut out = String::new();
    for doc in &corpus.documents {
        if doc.marked {
            if doc.id.is_empty() {
                out.push_str("# newdoc\n");
            } else {
                let _ = writeln!(out, "# newdoc id = {}", doc.id);
            }
        }
        for sentence in &doc.sentences {
            write_sentence(&mut out, sentence);
        }
    }
    out
}

fn write_sentence(out: &mut String, sentence: &Sentence) {
    for c in &sentence.comments {
        out.push_str(c);
        out.push('\n');
    }
    let emit_empty = |out: &mut String, after: usize| {
        for (_, line) in sentence.empty_nodes.iter().filter(|(a, _)| *a == after) {
            out.push_str(line);
            out.push('\n');
        }
    };
    emit_empty(out, 0);
    for (i, t) in sentence.tokens.iter().enumerate() {
        let index = i + 1;
        for mwt in sentence.multiword.iter().filter(|m| m.first == index) {
            let _ = writeln!(out, "{}-{}\t{}\t{}", mwt.first, mwt.last, mwt.form, mwt.rest);
        }
        let head = t.head.map(|h| h.to_string()).unwrap_or_else(|| "_".into());
        let _ = writeln!(
            out,
            "{index}\t{}\t{}\t{}\t{}\t{}\t{head}\t{}\t{}\t{}",
            t.form,
            or_blank(&t.lemma),
            or_blank(&t.upos),
            or_blank(&t.xpos),
            t.feats_string(),
            or_blank(&t.deprel),
            or_blank(&t.deps),
            or_blank(&t.misc),
        );
        emit_empty(out, index);
    }
    out.push('\n');
}
