//! Deterministic inputs shared by the benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use mlmkit::corpus::{ingest_plaintext, Corpus, DocSeparator};
use mlmkit::heads::CrfScores;
use mlmkit::metrics::{MrpEdge, MrpGraph, MrpNode};

pub const CORPUS: &str = include_str!("../../../data/corpus.txt");

pub fn corpus() -> Corpus {
    ingest_plaintext(CORPUS.as_bytes(), DocSeparator::BlankLine).expect("bundled corpus parses")
}

/// Arc score matrix `[n + 1][n]` with uniform entries.
pub fn arc_scores(n: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..=n)
        .map(|_| (0..n).map(|_| rng.gen_range(-5.0..5.0)).collect())
        .collect()
}

pub fn crf_scores(len: usize, labels: usize, seed: u64) -> CrfScores {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut table = |rows: usize| -> Vec<Vec<f64>> {
        (0..rows)
            .map(|_| (0..labels).map(|_| rng.gen_range(-3.0..3.0)).collect())
            .collect()
    };
    CrfScores {
        emissions: table(len),
        transitions: table(labels),
    }
}

/// A random labelled graph and a perturbed copy with shuffled node ids.
pub fn graph_pair(nodes: usize, seed: u64) -> (MrpGraph, MrpGraph) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let labels = ["a", "b", "c", "d"];
    let node = |id, label: &str| MrpNode {
        id,
        label: Some(label.to_string()),
        ..Default::default()
    };
    let gold_labels: Vec<&str> = (0..nodes).map(|_| labels[rng.gen_range(0..labels.len())]).collect();
    let edges: Vec<(usize, usize, &str)> = (0..nodes * 3 / 2)
        .map(|_| {
            (
                rng.gen_range(0..nodes),
                rng.gen_range(0..nodes),
                labels[rng.gen_range(0..2)],
            )
        })
        .filter(|(s, t, _)| s != t)
        .collect();
    let mut perm: Vec<usize> = (0..nodes).collect();
    for i in (1..nodes).rev() {
        perm.swap(i, rng.gen_range(0..=i));
    }
    let edge = |source, target, label: &str| MrpEdge {
        source,
        target,
        label: Some(label.to_string()),
        ..Default::default()
    };
    let gold = MrpGraph {
        id: "g".into(),
        tops: vec![0],
        nodes: gold_labels.iter().enumerate().map(|(i, l)| node(i, l)).collect(),
        edges: edges.iter().map(|&(s, t, l)| edge(s, t, l)).collect(),
        ..Default::default()
    };
    let mut system_nodes: Vec<MrpNode> = gold_labels
        .iter()
        .enumerate()
        .map(|(i, l)| node(perm[i], if rng.gen_bool(0.2) { "z" } else { l }))
        .collect();
    system_nodes.sort_by_key(|n| n.id);
    let system = MrpGraph {
        id: "g".into(),
        tops: vec![perm[0]],
        nodes: system_nodes,
        edges: edges
            .iter()
            .filter(|_| rng.gen_bool(0.8))
            .map(|&(s, t, l)| edge(perm[s], perm[t], l))
            .collect(),
        ..Default::default()
    };
    (gold, system)
}
