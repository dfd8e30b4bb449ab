use crate::corpus::{spans_well_nested, EntitySpan};

use super::HeadsError;

/// Label of a token outside every entity.
pub const OUTSIDE: &str = "O";

/// Per-token stacks of BIO tags, outermost entity first.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct NestedLabelSequence {
    pub stacks: Vec<Vec<String>>,
}

impl NestedLabelSequence {
    /// One label per token: the stack joined by `|`, or `O` when empty.
    pub fn to_strings(&self) -> Vec<String> {
        self.stacks
            .iter()
            .map(|s| if s.is_empty() { OUTSIDE.to_string() } else { s.join("|") })
            .collect()
    }

    pub fn from_strings<S: AsRef<str>>(labels: &[S]) -> Self {
        let stacks = labels
            .iter()
            .map(|l| match l.as_ref() {
                "" | OUTSIDE => Vec::new(),
                s => s.split('|').map(str::to_string).collect(),
            })
            .collect();
        NestedLabelSequence { stacks }
    }
}

fn canonical_order(spans: &mut [EntitySpan]) {
    spans.sort_by(|a, b| {
        a.start
            .cmp(&b.start)
            .then(b.end.cmp(&a.end))
            .then(a.label.cmp(&b.label))
    });
}

/// Linearizes well-nested 1-based inclusive spans over `len` tokens.
pub fn encode_nested(spans: &[EntitySpan], len: usize) -> Result<NestedLabelSequence, HeadsError> {
    if !spans_well_nested(spans, len) {
        return Err(HeadsError::IllNestedSpans);
    }
    let mut ordered = spans.to_vec();
    canonical_order(&mut ordered);
    let mut stacks = vec![Vec::new(); len];
    for s in &ordered {
        for t in s.start..=s.end {
            let tag = if t == s.start { 'B' } else { 'I' };
            stacks[t - 1].push(format!("{tag}-{}", s.label));
        }
    }
    Ok(NestedLabelSequence { stacks })
}

/// Recovers spans from label stacks. Malformed input is read leniently: an
/// `I-` tag that cannot continue an open entity of its type starts one.
pub fn decode_nested(seq: &NestedLabelSequence) -> Vec<EntitySpan> {
    let mut spans = Vec::new();
    let mut open: Vec<Option<(usize, String)>> = Vec::new();
    let close = |slot: &mut Option<(usize, String)>, end: usize, spans: &mut Vec<EntitySpan>| {
        if let Some((start, label)) = slot.take() {
            spans.push(EntitySpan::new(start, end, label));
        }
    };
    for (i, stack) in seq.stacks.iter().enumerate() {
        let t = i + 1;
        if open.len() < stack.len() {
            open.resize(stack.len(), None);
        }
        let mut restarted = false;
        for depth in 0..open.len() {
            let Some(tag) = stack.get(depth) else {
                close(&mut open[depth], t - 1, &mut spans);
                continue;
            };
            let (kind, label) = match tag.split_once('-') {
                Some((k, l)) if k == "B" || k == "I" => (k, l),
                _ => ("B", tag.as_str()),
            };
            let continues =
                kind == "I" && !restarted && matches!(&open[depth], Some((_, open_label)) if open_label == label);
            if !continues {
                close(&mut open[depth], t - 1, &mut spans);
                open[depth] = Some((t, label.to_string()));
                restarted = true;
            }
        }
    }
    let end = seq.stacks.len();
    for slot in open.iter_mut() {
        close(slot, end, &mut spans);
    }
    canonical_order(&mut spans);
    spans
}
