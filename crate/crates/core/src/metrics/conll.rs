//! Morphosyntactic scores following the CoNLL 2018 shared-task evaluation.
//!
//! Words of the gold and system corpora are placed on a shared character
//! axis (forms concatenated with whitespace removed). Words outside
//! multiword tokens align when their character spans coincide; inside a
//! region touched by a multiword token they align by a longest common
//! subsequence of lowercased forms.
//!
//! Feature comparison uses only [`UNIVERSAL_FEATURES`]. Deprels are compared
//! without subtypes. MLAS and BLEX score words whose gold deprel is in
//! [`CONTENT_DEPRELS`]; MLAS additionally checks the attachment of children
//! whose deprel is in [`FUNCTIONAL_DEPRELS`].

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, Sentence, Token};

use super::{render_table, MetricsError, PrfCounts};

pub const UNIVERSAL_FEATURES: &[&str] = &[
    "PronType", "NumType", "Poss", "Reflex", "Foreign", "Abbr", "Gender", "Animacy", "Number", "Case", "Definite",
    "Degree", "VerbForm", "Mood", "Tense", "Aspect", "Voice", "Evident", "Polarity", "Person", "Polite",
];

pub const CONTENT_DEPRELS: &[&str] = &[
    "nsubj",
    "obj",
    "iobj",
    "csubj",
    "ccomp",
    "xcomp",
    "obl",
    "vocative",
    "expl",
    "dislocated",
    "advcl",
    "advmod",
    "discourse",
    "nmod",
    "appos",
    "nummod",
    "acl",
    "amod",
    "conj",
    "fixed",
    "flat",
    "compound",
    "list",
    "parataxis",
    "orphan",
    "goeswith",
    "reparandum",
    "root",
    "dep",
];

pub const FUNCTIONAL_DEPRELS: &[&str] = &["aux", "cop", "mark", "det", "clf", "case", "cc"];

/// Counts for the eight scores; F1 values are on the 0–100 scale.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConlluEvalReport {
    #[serde(rename = "UPOS")]
    pub upos: PrfCounts,
    #[serde(rename = "XPOS")]
    pub xpos: PrfCounts,
    #[serde(rename = "UFeats")]
    pub ufeats: PrfCounts,
    #[serde(rename = "Lemmas")]
    pub lemmas: PrfCounts,
    #[serde(rename = "UAS")]
    pub uas: PrfCounts,
    #[serde(rename = "LAS")]
    pub las: PrfCounts,
    #[serde(rename = "MLAS")]
    pub mlas: PrfCounts,
    #[serde(rename = "BLEX")]
    pub blex: PrfCounts,
}

impl ConlluEvalReport {
    pub const METRICS: [&'static str; 8] = ["UPOS", "XPOS", "UFeats", "Lemmas", "UAS", "LAS", "MLAS", "BLEX"];

    pub fn counts(&self) -> [(&'static str, PrfCounts); 8] {
        [
            ("UPOS", self.upos),
            ("XPOS", self.xpos),
            ("UFeats", self.ufeats),
            ("Lemmas", self.lemmas),
            ("UAS", self.uas),
            ("LAS", self.las),
            ("MLAS", self.mlas),
            ("BLEX", self.blex),
        ]
    }

    /// F1 of a metric on the 0–100 scale.
    pub fn f1(&self, metric: &str) -> Option<f64> {
        self.counts()
            .iter()
            .find(|(name, _)| *name == metric)
            .map(|(_, c)| 100.0 * c.f1())
    }

    /// `{"UPOS": 97.5, ...}` with F1 on the 0–100 scale.
    pub fn to_json(&self) -> serde_json::Value {
        let mut map = serde_json::Map::new();
        for (name, c) in self.counts() {
            map.insert(name.to_string(), serde_json::json!(100.0 * c.f1()));
        }
        serde_json::Value::Object(map)
    }

    pub fn to_table(&self) -> String {
        let rows: Vec<(String, String)> = self
            .counts()
            .iter()
            .map(|(name, c)| {
                (
                    name.to_string(),
                    format!(
                        "{:.2}  {:.2}  {:.2}",
                        100.0 * c.precision(),
                        100.0 * c.recall(),
                        100.0 * c.f1()
                    ),
                )
            })
            .collect();
        render_table(("Metric", "P (%)   R (%)   F1 (%)"), &rows)
    }
}

#[derive(Clone, Debug)]
struct Word {
    form_lower: String,
    start: usize,
    end: usize,
    multiword: bool,
    upos: String,
    xpos: String,
    feats: String,
    lemma: String,
    deprel: String,
    /// Index of the head word in the flattened list; `None` for the root.
    parent: Option<usize>,
    functional_children: Vec<usize>,
    content: bool,
}

fn field(v: &Option<String>) -> String {
    v.clone().unwrap_or_else(|| "_".to_string())
}

fn universal_feats(token: &Token) -> String {
    let mut kept: Vec<String> = token
        .ufeats
        .iter()
        .flatten()
        .filter(|(k, _)| UNIVERSAL_FEATURES.contains(&k.as_str()))
        .map(|(k, v)| format!("{k}={v}"))
        .collect();
    kept.sort();
    kept.join("|")
}

fn strip_ws(s: &str) -> impl Iterator<Item = char> + '_ {
    s.chars().filter(|c| !c.is_whitespace())
}

/// Flattens a corpus to words with character spans. Returns the words and
/// the concatenated text.
fn load(corpus: &Corpus, side: &'static str) -> Result<(Vec<Word>, Vec<char>), MetricsError> {
    let mut words = Vec::new();
    let mut text = Vec::new();
    for sentence in corpus.sentences() {
        load_sentence(sentence, side, &mut words, &mut text)?;
    }
    Ok((words, text))
}

fn load_sentence(
    s: &Sentence,
    side: &'static str,
    words: &mut Vec<Word>,
    text: &mut Vec<char>,
) -> Result<(), MetricsError> {
    let offset = words.len();
    let n = s.tokens.len();
    let mut i = 0;
    while i < n {
        let id = i + 1;
        if let Some(mwt) = s.multiword.iter().find(|m| m.first == id) {
            if mwt.last < mwt.first || mwt.last > n {
                return Err(MetricsError::InvalidTree {
                    side,
                    message: format!("multiword range {}-{} out of bounds", mwt.first, mwt.last),
                });
            }
            let start = text.len();
            text.extend(strip_ws(&mwt.form));
            let end = text.len();
            for tok in &s.tokens[mwt.first - 1..mwt.last] {
                words.push(make_word(tok, start, end, true));
            }
            i = mwt.last;
        } else {
            let start = text.len();
            text.extend(strip_ws(&s.tokens[i].form));
            let end = text.len();
            words.push(make_word(&s.tokens[i], start, end, false));
            i += 1;
        }
    }

    for (k, tok) in s.tokens.iter().enumerate() {
        let head = tok.head.ok_or_else(|| MetricsError::InvalidTree {
            side,
            message: format!("word {} has no head", k + 1),
        })?;
        if head > n {
            return Err(MetricsError::InvalidTree {
                side,
                message: format!("word {} has head {head} beyond sentence length {n}", k + 1),
            });
        }
        words[offset + k].parent = (head > 0).then(|| offset + head - 1);
    }
    // Every word must reach the root.
    for k in 0..n {
        let mut v = Some(offset + k);
        let mut steps = 0;
        while let Some(w) = v {
            steps += 1;
            if steps > n + 1 {
                return Err(MetricsError::InvalidTree {
                    side,
                    message: format!("cycle through word {}", k + 1),
                });
            }
            v = words[w].parent;
        }
    }
    for k in offset..offset + n {
        let is_functional = FUNCTIONAL_DEPRELS.contains(&words[k].deprel.as_str());
        if let (true, Some(p)) = (is_functional, words[k].parent) {
            words[p].functional_children.push(k);
        }
    }
    Ok(())
}

fn make_word(tok: &Token, start: usize, end: usize, multiword: bool) -> Word {
    let deprel = field(&tok.deprel);
    let deprel = deprel.split(':').next().unwrap_or("_").to_string();
    Word {
        form_lower: strip_ws(&tok.form).collect::<String>().to_lowercase(),
        start,
        end,
        multiword,
        upos: field(&tok.upos),
        xpos: field(&tok.xpos),
        feats: universal_feats(tok),
        lemma: field(&tok.lemma),
        content: CONTENT_DEPRELS.contains(&deprel.as_str()),
        deprel,
        parent: None,
        functional_children: Vec::new(),
    }
}

fn beyond_end(words: &[Word], i: usize, end: usize) -> bool {
    match words.get(i) {
        None => true,
        Some(w) if w.multiword => w.start >= end,
        Some(w) => w.end > end,
    }
}

fn extend_end(word: &Word, end: usize) -> usize {
    if word.multiword && word.end > end {
        word.end
    } else {
        end
    }
}

/// Returns `(gold_start, system_start, gold_end, system_end)` of the region
/// around a multiword token.
fn multiword_region(gold: &[Word], system: &[Word], mut gi: usize, mut si: usize) -> (usize, usize, usize, usize) {
    let mut end;
    if gold[gi].multiword {
        end = gold[gi].end;
        if !system[si].multiword && system[si].start < gold[gi].start {
            si += 1;
        }
    } else {
        end = system[si].end;
        if !gold[gi].multiword && gold[gi].start < system[si].start {
            gi += 1;
        }
    }
    let (gs, ss) = (gi, si);
    while !beyond_end(gold, gi, end) || !beyond_end(system, si, end) {
        if gi < gold.len() && (si >= system.len() || gold[gi].start <= system[si].start) {
            end = extend_end(&gold[gi], end);
            gi += 1;
        } else {
            end = extend_end(&system[si], end);
            si += 1;
        }
    }
    (gs, ss, gi, si)
}

/// Aligned `(gold, system)` word index pairs.
fn align(gold: &[Word], system: &[Word]) -> Vec<(usize, usize)> {
    let mut pairs = Vec::new();
    let (mut gi, mut si) = (0, 0);
    while gi < gold.len() && si < system.len() {
        if gold[gi].multiword || system[si].multiword {
            let (gs, ss, ge, se) = multiword_region(gold, system, gi, si);
            gi = ge;
            si = se;
            if ge > gs && se > ss {
                let (gn, sn) = (ge - gs, se - ss);
                let mut lcs = vec![vec![0usize; sn + 1]; gn + 1];
                for g in (0..gn).rev() {
                    for s in (0..sn).rev() {
                        let m = if gold[gs + g].form_lower == system[ss + s].form_lower {
                            1 + lcs[g + 1][s + 1]
                        } else {
                            0
                        };
                        lcs[g][s] = m.max(lcs[g + 1][s]).max(lcs[g][s + 1]);
                    }
                }
                let (mut g, mut s) = (0, 0);
                while g < gn && s < sn {
                    if gold[gs + g].form_lower == system[ss + s].form_lower {
                        pairs.push((gs + g, ss + s));
                        g += 1;
                        s += 1;
                    } else if lcs[g][s] == lcs[g + 1][s] {
                        g += 1;
                    } else {
                        s += 1;
                    }
                }
            }
        } else if (gold[gi].start, gold[gi].end) == (system[si].start, system[si].end) {
            pairs.push((gi, si));
            gi += 1;
            si += 1;
        } else if gold[gi].start <= system[si].start {
            gi += 1;
        } else {
            si += 1;
        }
    }
    pairs
}

/// A head as seen from the gold side: root, an aligned gold word, or a
/// system word with no gold counterpart.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Head {
    Root,
    Gold(usize),
    Unaligned,
}

/// Scores `system` against `gold`.
pub fn eval_conllu(gold: &Corpus, system: &Corpus) -> Result<ConlluEvalReport, MetricsError> {
    let (gw, gtext) = load(gold, "gold")?;
    let (sw, stext) = load(system, "system")?;
    if gtext != stext {
        let offset = gtext.iter().zip(&stext).take_while(|(a, b)| a == b).count();
        let snippet = |t: &[char]| t.iter().skip(offset).take(20).collect::<String>();
        return Err(MetricsError::TextMismatch {
            offset,
            gold: snippet(&gtext),
            system: snippet(&stext),
        });
    }

    let pairs = align(&gw, &sw);
    let sys_to_gold: HashMap<usize, usize> = pairs.iter().map(|&(g, s)| (s, g)).collect();
    let gold_head = |w: &Word| w.parent.map_or(Head::Root, Head::Gold);
    let sys_head = |w: &Word| match w.parent {
        None => Head::Root,
        Some(p) => sys_to_gold.get(&p).map_or(Head::Unaligned, |&g| Head::Gold(g)),
    };
    let sys_child = |c: usize| sys_to_gold.get(&c).map_or(Head::Unaligned, |&g| Head::Gold(g));
    // Lemmas count as correct wherever the gold lemma is unspecified.
    let lemma_ok = |g: &Word, s: &Word| g.lemma == "_" || g.lemma == s.lemma;

    let all = PrfCounts::new(0, sw.len(), gw.len());
    let content = PrfCounts::new(
        0,
        sw.iter().filter(|w| w.content).count(),
        gw.iter().filter(|w| w.content).count(),
    );
    let mut r = ConlluEvalReport {
        upos: all,
        xpos: all,
        ufeats: all,
        lemmas: all,
        uas: all,
        las: all,
        mlas: content,
        blex: content,
    };
    for &(g, s) in &pairs {
        let (g, s) = (&gw[g], &sw[s]);
        let head_ok = gold_head(g) == sys_head(s);
        let label_ok = head_ok && g.deprel == s.deprel;
        r.upos.correct += usize::from(g.upos == s.upos);
        r.xpos.correct += usize::from(g.xpos == s.xpos);
        r.ufeats.correct += usize::from(g.feats == s.feats);
        r.lemmas.correct += usize::from(lemma_ok(g, s));
        r.uas.correct += usize::from(head_ok);
        r.las.correct += usize::from(label_ok);
        if g.content {
            let children_ok = g.functional_children.len() == s.functional_children.len()
                && g.functional_children
                    .iter()
                    .zip(&s.functional_children)
                    .all(|(&gc, &sc)| {
                        let (gcw, scw) = (&gw[gc], &sw[sc]);
                        Head::Gold(gc) == sys_child(sc)
                            && gcw.deprel == scw.deprel
                            && gcw.upos == scw.upos
                            && gcw.feats == scw.feats
                    });
            r.mlas.correct += usize::from(label_ok && g.upos == s.upos && g.feats == s.feats && children_ok);
            r.blex.correct += usize::from(label_ok && lemma_ok(g, s));
        }
    }
    Ok(r)
}
