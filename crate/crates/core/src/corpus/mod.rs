//! Corpus model and ingestion.
//!
//! A [`Corpus`] is an ordered list of [`Document`]s, each an ordered list of
//! [`Sentence`]s of [`Token`]s. Plain text and CoNLL-U inputs are supported;
//! the preprocessing helpers ([`block_shuffle`], [`filter_min_tokens`]) and
//! the cross-validation splitter ([`kfold_split`]) operate on this model.

mod conllu;
mod plaintext;
mod split;

pub use conllu::{ingest_conllu, write_conllu};
pub use plaintext::{ingest_plaintext, DocSeparator};
pub use split::{block_shuffle, filter_min_tokens, kfold_split, read_folds, write_folds, FoldRole, FoldSplit};

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum CorpusError {
    #[error("invalid UTF-8 at byte offset {offset}")]
    Utf8 { offset: usize },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("I/O error: {0}")]
    Io(String),
}

impl From<std::io::Error> for CorpusError {
    fn from(err: std::io::Error) -> Self {
        CorpusError::Io(err.to_string())
    }
}

/// Decode a byte buffer, reporting the offset of the first invalid byte.
pub(crate) fn decode_utf8(bytes: &[u8]) -> Result<&str, CorpusError> {
    std::str::from_utf8(bytes).map_err(|e| CorpusError::Utf8 {
        offset: e.valid_up_to(),
    })
}

/// A single syntactic word with optional morphosyntactic annotation.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Token {
    pub form: String,
    pub lemma: Option<String>,
    pub upos: Option<String>,
    pub xpos: Option<String>,
    /// Feature-value pairs, unique by name and sorted case-insensitively.
    pub ufeats: Option<Vec<(String, String)>>,
    /// 0 is the artificial root.
    pub head: Option<usize>,
    pub deprel: Option<String>,
    /// Columns 9 and 10 are carried verbatim so CoNLL-U round-trips.
    pub deps: Option<String>,
    pub misc: Option<String>,
}

impl Token {
    pub fn new(form: impl Into<String>) -> Self {
        Token {
            form: form.into(),
            ..Default::default()
        }
    }

    /// Feature string in CoNLL-U notation, `_` when absent.
    pub fn feats_string(&self) -> String {
        match &self.ufeats {
            None => "_".to_string(),
            Some(feats) if feats.is_empty() => "_".to_string(),
            Some(feats) => feats
                .iter()
                .map(|(k, v)| format!("{k}={v}"))
                .collect::<Vec<_>>()
                .join("|"),
        }
    }
}

/// Sort features the way UD treebanks order them.
pub fn sort_feats(feats: &mut [(String, String)]) {
    feats.sort_by(|a, b| a.0.to_lowercase().cmp(&b.0.to_lowercase()).then_with(|| a.0.cmp(&b.0)));
}

/// An entity mention over 1-based inclusive token indices.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct EntitySpan {
    pub start: usize,
    pub end: usize,
    pub label: String,
}

impl EntitySpan {
    pub fn new(start: usize, end: usize, label: impl Into<String>) -> Self {
        EntitySpan {
            start,
            end,
            label: label.into(),
        }
    }

    pub fn contains(&self, other: &EntitySpan) -> bool {
        self.start <= other.start && other.end <= self.end
    }

    pub fn disjoint(&self, other: &EntitySpan) -> bool {
        self.end < other.start || other.end < self.start
    }
}

/// A CoNLL-U multiword token range line such as `1-2  del`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MultiwordToken {
    pub first: usize,
    pub last: usize,
    pub form: String,
    /// Remaining eight columns, verbatim.
    pub rest: String,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Sentence {
    pub tokens: Vec<Token>,
    pub entity_spans: Vec<EntitySpan>,
    /// Comment lines other than `# newdoc`, verbatim.
    pub comments: Vec<String>,
    pub multiword: Vec<MultiwordToken>,
    /// Empty-node lines keyed by the index of the token they follow.
    pub empty_nodes: Vec<(usize, String)>,
}

impl Sentence {
    pub fn from_forms<S: AsRef<str>>(forms: &[S]) -> Self {
        Sentence {
            tokens: forms.iter().map(|f| Token::new(f.as_ref())).collect(),
            ..Default::default()
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn forms(&self) -> impl Iterator<Item = &str> {
        self.tokens.iter().map(|t| t.form.as_str())
    }

    /// Words joined by single spaces.
    pub fn text(&self) -> String {
        self.forms().collect::<Vec<_>>().join(" ")
    }

    /// Checks that spans are within bounds and pairwise well-nested.
    pub fn spans_well_nested(&self) -> bool {
        spans_well_nested(&self.entity_spans, self.len())
    }
}

pub(crate) fn spans_well_nested(spans: &[EntitySpan], len: usize) -> bool {
    if spans.iter().any(|s| s.start < 1 || s.start > s.end || s.end > len) {
        return false;
    }
    for (i, a) in spans.iter().enumerate() {
        for b in &spans[i + 1..] {
            if !(a.disjoint(b) || a.contains(b) || b.contains(a)) {
                return false;
            }
        }
    }
    true
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Document {
    pub id: String,
    pub sentences: Vec<Sentence>,
    /// Whether the source carried an explicit `# newdoc` marker.
    pub marked: bool,
}

impl Document {
    pub fn new(id: impl Into<String>, sentences: Vec<Sentence>) -> Self {
        Document {
            id: id.into(),
            sentences,
            marked: false,
        }
    }

    pub fn token_count(&self) -> usize {
        self.sentences.iter().map(Sentence::len).sum()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Corpus {
    pub documents: Vec<Document>,
}

impl Corpus {
    pub fn new(documents: Vec<Document>) -> Self {
        Corpus { documents }
    }

    pub fn token_count(&self) -> usize {
        self.documents.iter().map(Document::token_count).sum()
    }

    pub fn sentences(&self) -> impl Iterator<Item = &Sentence> {
        self.documents.iter().flat_map(|d| d.sentences.iter())
    }

    pub fn sentence_count(&self) -> usize {
        self.documents.iter().map(|d| d.sentences.len()).sum()
    }

    /// Wraps loose sentences into a single unmarked document.
    pub fn from_sentences(sentences: Vec<Sentence>) -> Self {
        Corpus::new(vec![Document::new("", sentences)])
    }
}
