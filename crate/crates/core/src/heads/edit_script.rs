use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use super::HeadsError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Case {
    Upper,
    Lower,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EditOp {
    Keep(usize),
    Delete(usize),
    Insert(String),
}

/// Form-to-lemma program. The prefix and suffix programs rewrite the ends of
/// the lowercased form; casing runs then re-case the result, each run
/// lasting until the next one starts.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EditScript {
    pub casing: Vec<(usize, Case)>,
    pub prefix: Vec<EditOp>,
    pub suffix: Vec<EditOp>,
}

impl EditScript {
    pub fn is_identity(&self) -> bool {
        self.casing.is_empty() && self.prefix.is_empty() && self.suffix.is_empty()
    }
}

fn fmt_program(ops: &[EditOp], f: &mut fmt::Formatter<'_>) -> fmt::Result {
    for op in ops {
        match op {
            EditOp::Keep(n) => write!(f, "k{n}")?,
            EditOp::Delete(n) => write!(f, "d{n}")?,
            EditOp::Insert(s) => write!(f, "i{s:?}")?,
        }
    }
    Ok(())
}

impl fmt::Display for EditScript {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (p, c) in &self.casing {
            write!(f, "{}{p}", if *c == Case::Upper { 'U' } else { 'L' })?;
        }
        f.write_str("|")?;
        fmt_program(&self.prefix, f)?;
        f.write_str("|")?;
        fmt_program(&self.suffix, f)
    }
}

fn replace_program(delete: usize, insert: &[char]) -> Vec<EditOp> {
    let mut ops = Vec::new();
    if delete > 0 {
        ops.push(EditOp::Delete(delete));
    }
    if !insert.is_empty() {
        ops.push(EditOp::Insert(insert.iter().collect()));
    }
    ops
}

/// Longest common substring as (form start, lemma start, length); the
/// earliest occurrence in the form, then in the lemma, wins ties.
fn longest_common_substring(a: &[char], b: &[char]) -> (usize, usize, usize) {
    let mut best = (0, 0, 0);
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for i in 1..=a.len() {
        for j in 1..=b.len() {
            cur[j] = if a[i - 1] == b[j - 1] { prev[j - 1] + 1 } else { 0 };
            let len = cur[j];
            let (ai, bj) = (i - len, j - len);
            let better = len > best.2 || (len == best.2 && len > 0 && (ai, bj) < (best.0, best.1));
            if better {
                best = (ai, bj, len);
            }
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    best
}

fn casing_runs(lemma: &[char], lowered: &[char]) -> Vec<(usize, Case)> {
    let mut runs = Vec::new();
    let mut prev = Case::Lower;
    for (i, (orig, low)) in lemma.iter().zip(lowered).enumerate() {
        let case = if orig != low { Case::Upper } else { Case::Lower };
        if case != prev {
            runs.push((i, case));
            prev = case;
        }
    }
    runs
}

/// Derives the canonical script turning `form` into `lemma`: the longest
/// common infix of the lowercased strings is kept, the changed prefix and
/// suffix are replaced, and case is restored by runs. When that
/// construction cannot reproduce the lemma (unusual case mappings), a
/// whole-word replacement is returned instead.
pub fn derive_edit_script(form: &str, lemma: &str) -> EditScript {
    let f: Vec<char> = form.to_lowercase().chars().collect();
    let original: Vec<char> = lemma.chars().collect();
    let l: Vec<char> = lemma.to_lowercase().chars().collect();

    let candidate = if original.len() == l.len() {
        let casing = casing_runs(&original, &l);
        let (fs, ls, len) = longest_common_substring(&f, &l);
        let script = if len == 0 {
            EditScript {
                casing,
                prefix: replace_program(f.len(), &l),
                suffix: Vec::new(),
            }
        } else {
            EditScript {
                casing,
                prefix: replace_program(fs, &l[..ls]),
                suffix: replace_program(f.len() - fs - len, &l[ls + len..]),
            }
        };
        Some(script)
    } else {
        None
    };

    match candidate {
        Some(s) if apply_edit_script(form, &s).ok().as_deref() == Some(lemma) => s,
        _ => EditScript {
            casing: Vec::new(),
            prefix: replace_program(f.len(), &original),
            suffix: Vec::new(),
        },
    }
}

fn consumption(ops: &[EditOp]) -> usize {
    ops.iter()
        .map(|op| match op {
            EditOp::Keep(n) | EditOp::Delete(n) => *n,
            EditOp::Insert(_) => 0,
        })
        .sum()
}

fn run_program(ops: &[EditOp], input: &[char], out: &mut Vec<char>) {
    let mut pos = 0;
    for op in ops {
        match op {
            EditOp::Keep(n) => {
                out.extend_from_slice(&input[pos..pos + n]);
                pos += n;
            }
            EditOp::Delete(n) => pos += n,
            EditOp::Insert(s) => out.extend(s.chars()),
        }
    }
}

/// Applies `script` to `form`. Fails when the prefix and suffix programs
/// together consume more characters than the lowercased form has.
pub fn apply_edit_script(form: &str, script: &EditScript) -> Result<String, HeadsError> {
    let f: Vec<char> = form.to_lowercase().chars().collect();
    let (pre, suf) = (consumption(&script.prefix), consumption(&script.suffix));
    if pre + suf > f.len() {
        return Err(HeadsError::ScriptApplication { form: form.to_string() });
    }
    let mut out = Vec::with_capacity(f.len() + 4);
    run_program(&script.prefix, &f[..pre], &mut out);
    out.extend_from_slice(&f[pre..f.len() - suf]);
    run_program(&script.suffix, &f[f.len() - suf..], &mut out);

    if script.casing.is_empty() {
        return Ok(out.into_iter().collect());
    }
    let mut result = String::with_capacity(out.len());
    let mut run = 0;
    let mut case = None;
    for (i, c) in out.into_iter().enumerate() {
        while run < script.casing.len() && script.casing[run].0 <= i {
            case = Some(script.casing[run].1);
            run += 1;
        }
        match case {
            Some(Case::Upper) => result.extend(c.to_uppercase()),
            Some(Case::Lower) => result.extend(c.to_lowercase()),
            None => result.push(c),
        }
    }
    Ok(result)
}

/// Deduplicated scripts with ids ordered by descending frequency, then by
/// first occurrence.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LemmaCategoryInventory {
    pub categories: Vec<EditScript>,
    pub counts: Vec<usize>,
    #[serde(skip)]
    index: HashMap<EditScript, usize>,
}

impl LemmaCategoryInventory {
    pub fn len(&self) -> usize {
        self.categories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.categories.is_empty()
    }

    pub fn id_of(&self, script: &EditScript) -> Option<usize> {
        if self.index.len() != self.categories.len() {
            return self.categories.iter().position(|c| c == script);
        }
        self.index.get(script).copied()
    }

    pub fn get(&self, id: usize) -> Option<&EditScript> {
        self.categories.get(id)
    }

    /// Rebuilds the lookup table, e.g. after deserialization.
    pub fn reindex(&mut self) {
        self.index = self
            .categories
            .iter()
            .cloned()
            .enumerate()
            .map(|(i, s)| (s, i))
            .collect();
    }
}

pub fn build_lemma_inventory<F: AsRef<str>, L: AsRef<str>>(pairs: &[(F, L)]) -> LemmaCategoryInventory {
    let mut seen: HashMap<EditScript, (usize, usize)> = HashMap::new();
    for (order, (form, lemma)) in pairs.iter().enumerate() {
        let script = derive_edit_script(form.as_ref(), lemma.as_ref());
        seen.entry(script).or_insert((0, order)).0 += 1;
    }
    let mut entries: Vec<(EditScript, usize, usize)> = seen.into_iter().map(|(s, (c, o))| (s, c, o)).collect();
    entries.sort_by(|a, b| b.1.cmp(&a.1).then(a.2.cmp(&b.2)));
    let mut inv = LemmaCategoryInventory {
        counts: entries.iter().map(|e| e.1).collect(),
        categories: entries.into_iter().map(|e| e.0).collect(),
        index: HashMap::new(),
    };
    inv.reindex();
    inv
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn round_trip(form: &str, lemma: &str) -> EditScript {
        let s = derive_edit_script(form, lemma);
        assert_eq!(apply_edit_script(form, &s).unwrap(), lemma, "{form} -> {lemma} via {s}");
        s
    }

    #[test]
    fn identity_pair() {
        assert!(round_trip("kočka", "kočka").is_identity());
    }

    #[test]
    fn suffix_change() {
        let s = round_trip("koček", "kočka");
        assert_eq!(s.suffix, vec![EditOp::Delete(2), EditOp::Insert("ka".into())]);
        assert_eq!(apply_edit_script("loděk", &s).unwrap(), "lodka");
    }

    #[test]
    fn capitalised_lemma() {
        let s = round_trip("Prahou", "Praha");
        assert_eq!(s.casing, vec![(0, Case::Upper), (1, Case::Lower)]);
        round_trip("PRAHOU", "Praha");
        round_trip("praha", "Praha");
        round_trip("USA", "USA");
        round_trip("Je", "být");
    }

    #[test]
    fn unusual_case_mappings_fall_back() {
        round_trip("straße", "STRASSE");
        round_trip("İstanbul", "İstanbul");
        round_trip("x", "ǅ");
    }

    #[test]
    fn over_consumption_is_an_error() {
        let s = derive_edit_script("abcdef", "xyz");
        assert!(matches!(
            apply_edit_script("ab", &s),
            Err(HeadsError::ScriptApplication { .. })
        ));
    }

    #[test]
    fn inventory_examples() {
        let inv = build_lemma_inventory(&[("psa", "pes"), ("psem", "pes")]);
        assert_eq!(inv.len(), 2);
        let same: Vec<(&str, &str)> = vec![("ženy", "žena"); 100];
        let inv = build_lemma_inventory(&same);
        assert_eq!((inv.len(), inv.counts[0]), (1, 100));
    }

    #[test]
    fn inventory_orders_by_frequency_then_first_seen() {
        let pairs = [("a", "b"), ("hrady", "hrad"), ("domy", "dům"), ("stromy", "strom")];
        let inv = build_lemma_inventory(&pairs);
        assert_eq!(inv.counts, vec![2, 1, 1]);
        assert_eq!(inv.id_of(&derive_edit_script("hrady", "hrad")), Some(0));
        assert_eq!(inv.id_of(&derive_edit_script("a", "b")), Some(1));
    }

    proptest! {
        #[test]
        fn derive_then_apply_is_identity(form in "\\PC{1,12}", lemma in "\\PC{1,12}") {
            let s = derive_edit_script(&form, &lemma);
            prop_assert_eq!(apply_edit_script(&form, &s).unwrap(), lemma);
        }

        #[test]
        fn scripts_are_canonical(form in "[a-zA-ZáčďéěíňóřšťúůýžÁČŘŠŽ]{1,10}", lemma in "[a-zA-ZáčďéěíňóřšťúůýžÁČŘŠŽ]{1,10}") {
            prop_assert_eq!(derive_edit_script(&form, &lemma), derive_edit_script(&form, &lemma));
        }
    }
}
