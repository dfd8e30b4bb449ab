/// Arc scores `arcs[head][dependent - 1]` with head 0 the artificial root,
/// and optional label scores `labels[head][dependent - 1][relation]`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DepArcScores {
    pub arcs: Vec<Vec<f64>>,
    pub labels: Vec<Vec<Vec<f64>>>,
}

impl DepArcScores {
    pub fn len(&self) -> usize {
        self.arcs.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn score(&self, heads: &[usize]) -> f64 {
        heads.iter().enumerate().map(|(d, &h)| self.arcs[h][d]).sum()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum RootConstraint {
    /// The root has exactly one child.
    #[default]
    Single,
    Any,
}

/// Heads (0 = root) and relation indices for tokens `1..=n`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParsedTree {
    pub heads: Vec<usize>,
    pub labels: Vec<usize>,
}

/// Maximum spanning arborescence over nodes `0..n` rooted at 0;
/// `scores[h][d]` is the score of arc `h -> d`. Returns the head of every
/// node (`heads[0]` is unused).
fn chu_liu_edmonds(scores: &[Vec<f64>]) -> Vec<usize> {
    let n = scores.len();
    let mut heads = vec![0usize; n];
    for d in 1..n {
        let mut best = (f64::NEG_INFINITY, usize::MAX);
        for (h, row) in scores.iter().enumerate() {
            if h != d && row[d] > best.0 {
                best = (row[d], h);
            }
        }
        heads[d] = if best.1 == usize::MAX { 0 } else { best.1 };
    }

    let Some(cycle) = find_cycle(&heads) else { return heads };
    let in_cycle: Vec<bool> = (0..n).map(|v| cycle.contains(&v)).collect();

    // Contract the cycle into a single node placed last.
    let outside: Vec<usize> = (0..n).filter(|&v| !in_cycle[v]).collect();
    let m = outside.len() + 1;
    let c = m - 1;
    let mut sub = vec![vec![f64::NEG_INFINITY; m]; m];
    let mut enter = vec![usize::MAX; m];
    let mut leave = vec![usize::MAX; m];
    for (ui, &u) in outside.iter().enumerate() {
        for (vi, &v) in outside.iter().enumerate() {
            if u != v {
                sub[ui][vi] = scores[u][v];
            }
        }
        let mut best = (f64::NEG_INFINITY, usize::MAX);
        for &v in &cycle {
            let s = scores[u][v] - scores[heads[v]][v];
            if s > best.0 {
                best = (s, v);
            }
        }
        sub[ui][c] = best.0;
        enter[ui] = best.1;
    }
    for (vi, &v) in outside.iter().enumerate() {
        let mut best = (f64::NEG_INFINITY, usize::MAX);
        for &u in &cycle {
            if scores[u][v] > best.0 {
                best = (scores[u][v], u);
            }
        }
        sub[c][vi] = best.0;
        leave[vi] = best.1;
    }

    let sub_heads = chu_liu_edmonds(&sub);
    let mut result = heads.clone();
    for (vi, &v) in outside.iter().enumerate().skip(1) {
        result[v] = if sub_heads[vi] == c {
            leave[vi]
        } else {
            outside[sub_heads[vi]]
        };
    }
    let entry_from = sub_heads[c];
    let v = enter[entry_from];
    if v != usize::MAX {
        result[v] = outside[entry_from];
    }
    result
}

fn find_cycle(heads: &[usize]) -> Option<Vec<usize>> {
    let n = heads.len();
    let mut state = vec![0u8; n]; // 0 unvisited, 1 on current path, 2 done
    state[0] = 2;
    for start in 1..n {
        let mut path = Vec::new();
        let mut v = start;
        while state[v] == 0 {
            state[v] = 1;
            path.push(v);
            v = heads[v];
        }
        if state[v] == 1 {
            let pos = path.iter().position(|&p| p == v).unwrap();
            return Some(path[pos..].to_vec());
        }
        for p in path {
            state[p] = 2;
        }
    }
    None
}

/// Maximum-score dependency tree with per-arc label argmax. Ties between
/// relations prefer the smaller index.
pub fn decode_tree(scores: &DepArcScores, root: RootConstraint) -> ParsedTree {
    let n = scores.len();
    if n == 0 {
        return ParsedTree {
            heads: Vec::new(),
            labels: Vec::new(),
        };
    }
    // Square matrix over nodes 0..=n, with no arcs into the root.
    let full: Vec<Vec<f64>> = (0..=n)
        .map(|h| {
            (0..=n)
                .map(|d| {
                    if d == 0 || d == h {
                        f64::NEG_INFINITY
                    } else {
                        scores.arcs[h][d - 1]
                    }
                })
                .collect()
        })
        .collect();
    let mut heads = chu_liu_edmonds(&full);
    if root == RootConstraint::Single && heads[1..].iter().filter(|&&h| h == 0).count() > 1 {
        let mut best: Option<(f64, Vec<usize>)> = None;
        for child in 1..=n {
            let mut restricted = full.clone();
            for d in 1..=n {
                if d != child {
                    restricted[0][d] = f64::NEG_INFINITY;
                }
            }
            let candidate = chu_liu_edmonds(&restricted);
            let s = scores.score(&candidate[1..]);
            if best.as_ref().is_none_or(|(b, _)| s > *b) {
                best = Some((s, candidate));
            }
        }
        heads = best.expect("at least one token").1;
    }
    let heads: Vec<usize> = heads[1..].to_vec();
    let labels = heads
        .iter()
        .enumerate()
        .map(|(d, &h)| {
            scores.labels.get(h).and_then(|row| row.get(d)).map_or(0, |l| {
                let mut best = 0;
                for (r, &v) in l.iter().enumerate() {
                    if v > l[best] {
                        best = r;
                    }
                }
                best
            })
        })
        .collect();
    ParsedTree { heads, labels }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn is_tree(heads: &[usize], single_root: bool) -> bool {
        let n = heads.len();
        if single_root && heads.iter().filter(|&&h| h == 0).count() != 1 {
            return false;
        }
        (1..=n).all(|start| {
            let mut v = start;
            for _ in 0..=n {
                if v == 0 {
                    return true;
                }
                v = heads[v - 1];
            }
            false
        })
    }

    fn brute_force(scores: &DepArcScores, single_root: bool) -> f64 {
        let n = scores.len();
        let mut heads = vec![0usize; n];
        let mut best = f64::NEG_INFINITY;
        loop {
            if heads.iter().enumerate().all(|(d, &h)| h != d + 1) && is_tree(&heads, single_root) {
                best = best.max(scores.score(&heads));
            }
            let mut i = 0;
            while i < n {
                heads[i] += 1;
                if heads[i] <= n {
                    break;
                }
                heads[i] = 0;
                i += 1;
            }
            if i == n {
                return best;
            }
        }
    }

    #[test]
    fn single_token_attaches_to_root() {
        let scores = DepArcScores {
            arcs: vec![vec![-5.0], vec![3.0]],
            labels: vec![],
        };
        assert_eq!(decode_tree(&scores, RootConstraint::Single).heads, vec![0]);
    }

    #[test]
    fn greedy_cycle_is_broken() {
        // Each token prefers the other as head.
        let scores = DepArcScores {
            arcs: vec![
                vec![1.0, 0.5],
                vec![f64::NEG_INFINITY, 10.0],
                vec![10.0, f64::NEG_INFINITY],
            ],
            labels: vec![],
        };
        let tree = decode_tree(&scores, RootConstraint::Single);
        assert!(is_tree(&tree.heads, true));
        assert_eq!(scores.score(&tree.heads), brute_force(&scores, true));
        assert_eq!(tree.heads, vec![0, 1]);
    }

    #[test]
    fn labels_take_argmax_with_smallest_tie() {
        let scores = DepArcScores {
            arcs: vec![vec![1.0], vec![0.0]],
            labels: vec![vec![vec![0.5, 2.0, 2.0]], vec![vec![9.0, 0.0, 0.0]]],
        };
        assert_eq!(decode_tree(&scores, RootConstraint::Single).labels, vec![1]);
    }

    #[test]
    fn random_instances_match_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for trial in 0..300 {
            let n = rng.gen_range(1..=5);
            let arcs = (0..=n)
                .map(|_| (0..n).map(|_| rng.gen_range(-5.0..5.0)).collect())
                .collect();
            let scores = DepArcScores { arcs, labels: vec![] };
            for (constraint, single) in [(RootConstraint::Single, true), (RootConstraint::Any, false)] {
                let tree = decode_tree(&scores, constraint);
                assert!(is_tree(&tree.heads, single), "trial {trial}: {:?}", tree.heads);
                let diff = (scores.score(&tree.heads) - brute_force(&scores, single)).abs();
                assert!(diff < 1e-9, "trial {trial}");
            }
        }
    }
}
