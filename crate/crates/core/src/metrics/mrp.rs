//! Semantic graph scoring by node alignment.
//!
//! A node alignment is a partial injective map from gold to system nodes.
//! Under an alignment the matched items are: tops whose image is a system
//! top, equal node labels, shared property/value pairs, equal anchor sets,
//! edges whose mapped endpoints carry an equally labelled system edge, and
//! shared attribute/value pairs on matched edges. [`mces_align`] maximizes
//! the total number of matched items.

use std::collections::{BTreeMap, HashMap};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{render_table, MetricsError, PrfCounts};

/// Graphs with at most this many nodes on either side are aligned exactly.
pub const DEFAULT_NODE_LIMIT: usize = 10;
const RESTARTS: u64 = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct MrpAnchor {
    pub from: usize,
    pub to: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MrpNode {
    pub id: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub properties: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub values: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub anchors: Vec<MrpAnchor>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MrpEdge {
    pub source: usize,
    pub target: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub attributes: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub values: Vec<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MrpGraph {
    pub id: String,
    #[serde(default)]
    pub input: String,
    #[serde(default)]
    pub tops: Vec<usize>,
    #[serde(default)]
    pub nodes: Vec<MrpNode>,
    #[serde(default)]
    pub edges: Vec<MrpEdge>,
}

impl MrpGraph {
    pub fn validate(&self) -> Result<(), MetricsError> {
        let bad = |message: String| MetricsError::InvalidGraph {
            id: self.id.clone(),
            message,
        };
        let mut seen = std::collections::HashSet::new();
        for n in &self.nodes {
            if !seen.insert(n.id) {
                return Err(bad(format!("duplicate node id {}", n.id)));
            }
            if n.properties.len() != n.values.len() {
                return Err(bad(format!(
                    "node {} has {} properties but {} values",
                    n.id,
                    n.properties.len(),
                    n.values.len()
                )));
            }
            let len = self.input.chars().count();
            if let Some(a) = n.anchors.iter().find(|a| a.from > a.to || a.to > len) {
                return Err(bad(format!(
                    "node {} anchor {}:{} outside input of length {len}",
                    n.id, a.from, a.to
                )));
            }
        }
        for e in &self.edges {
            for end in [e.source, e.target] {
                if !seen.contains(&end) {
                    return Err(bad(format!("edge endpoint {end} is not a node")));
                }
            }
            if e.attributes.len() != e.values.len() {
                return Err(bad(format!(
                    "edge {}->{} has mismatched attributes",
                    e.source, e.target
                )));
            }
        }
        if let Some(t) = self.tops.iter().find(|t| !seen.contains(t)) {
            return Err(bad(format!("top {t} is not a node")));
        }
        Ok(())
    }

    /// Number of scorable items: tops, labels, properties, anchored nodes,
    /// edges and edge attributes.
    pub fn item_count(&self) -> usize {
        self.nodes.iter().map(|n| node_items(self, n)).sum::<usize>()
            + self.edges.iter().map(|e| 1 + e.attributes.len()).sum::<usize>()
    }

    fn position(&self, id: usize) -> Option<usize> {
        self.nodes.iter().position(|n| n.id == id)
    }
}

/// Parses one graph per non-empty line.
pub fn read_mrp_jsonl(text: &str) -> Result<Vec<MrpGraph>, MetricsError> {
    let mut graphs = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let g: MrpGraph = serde_json::from_str(line).map_err(|e| MetricsError::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        g.validate()?;
        graphs.push(g);
    }
    Ok(graphs)
}

pub fn write_mrp_jsonl(graphs: &[MrpGraph]) -> String {
    graphs
        .iter()
        .map(|g| serde_json::to_string(g).expect("graphs serialize") + "\n")
        .collect()
}

/// Gold node id to system node id.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct MrpAlignment {
    pub mapping: BTreeMap<usize, usize>,
    /// Total matched items under `mapping`.
    pub matched: usize,
    /// Whether `matched` is certified maximal.
    pub exact: bool,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MrpScore {
    pub tops: PrfCounts,
    pub labels: PrfCounts,
    pub properties: PrfCounts,
    pub anchors: PrfCounts,
    pub edges: PrfCounts,
    pub attributes: PrfCounts,
}

impl MrpScore {
    pub fn facets(&self) -> [(&'static str, PrfCounts); 6] {
        [
            ("tops", self.tops),
            ("labels", self.labels),
            ("properties", self.properties),
            ("anchors", self.anchors),
            ("edges", self.edges),
            ("attributes", self.attributes),
        ]
    }

    /// Counts pooled over all facets.
    pub fn pooled(&self) -> PrfCounts {
        self.facets().iter().map(|(_, c)| *c).sum()
    }

    /// Micro-averaged F1 on the 0–1 scale.
    pub fn average_f1(&self) -> f64 {
        self.pooled().f1()
    }

    /// Facet and average F1 values on the 0–1 scale.
    pub fn to_json(&self) -> serde_json::Value {
        let mut map = serde_json::Map::new();
        for (name, c) in self.facets() {
            map.insert(name.to_string(), serde_json::json!(c.f1()));
        }
        map.insert("average".into(), serde_json::json!(self.average_f1()));
        serde_json::Value::Object(map)
    }

    pub fn to_table(&self) -> String {
        let mut rows: Vec<(String, String)> = self
            .facets()
            .iter()
            .map(|(name, c)| (name.to_string(), format!("{:.4}", c.f1())))
            .collect();
        rows.push(("average".into(), format!("{:.4}", self.average_f1())));
        render_table(("Facet", "F1 (0-1)"), &rows)
    }
}

impl std::ops::Add for MrpScore {
    type Output = MrpScore;

    fn add(self, o: MrpScore) -> MrpScore {
        MrpScore {
            tops: self.tops + o.tops,
            labels: self.labels + o.labels,
            properties: self.properties + o.properties,
            anchors: self.anchors + o.anchors,
            edges: self.edges + o.edges,
            attributes: self.attributes + o.attributes,
        }
    }
}

impl std::iter::Sum for MrpScore {
    fn sum<I: Iterator<Item = MrpScore>>(iter: I) -> Self {
        iter.fold(MrpScore::default(), std::ops::Add::add)
    }
}

type Pairs = Vec<(String, String)>;

fn pairs(names: &[String], values: &[String]) -> Pairs {
    let mut p: Pairs = names.iter().cloned().zip(values.iter().cloned()).collect();
    p.sort();
    p
}

/// Size of the multiset intersection of two sorted lists.
fn common<T: Ord>(a: &[T], b: &[T]) -> usize {
    let (mut i, mut j, mut n) = (0, 0, 0);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                n += 1;
                i += 1;
                j += 1;
            }
        }
    }
    n
}

fn anchor_set(n: &MrpNode) -> Vec<MrpAnchor> {
    let mut a = n.anchors.clone();
    a.sort();
    a.dedup();
    a
}

fn node_items(g: &MrpGraph, n: &MrpNode) -> usize {
    usize::from(g.tops.contains(&n.id))
        + usize::from(n.label.is_some())
        + n.properties.len()
        + usize::from(!n.anchors.is_empty())
}

fn local_score(gold: &MrpGraph, gn: &MrpNode, system: &MrpGraph, sn: &MrpNode) -> usize {
    let tops = usize::from(gold.tops.contains(&gn.id) && system.tops.contains(&sn.id));
    let label = usize::from(gn.label.is_some() && gn.label == sn.label);
    let props = common(&pairs(&gn.properties, &gn.values), &pairs(&sn.properties, &sn.values));
    let anchors = usize::from(!gn.anchors.is_empty() && anchor_set(gn) == anchor_set(sn));
    tops + label + props + anchors
}

type EdgeKey = (usize, usize, Option<String>);

/// Gold edges grouped by endpoints and label, keeping edge order so that
/// duplicates pair with system duplicates first-to-first.
struct EdgeGroup {
    source: usize,
    target: usize,
    label: Option<String>,
    attrs: Vec<Pairs>,
}

/// Precomputed scoring tables over node positions.
struct Tables {
    gold_n: usize,
    sys_n: usize,
    local: Vec<Vec<usize>>,
    groups: Vec<EdgeGroup>,
    sys_groups: HashMap<EdgeKey, Vec<Pairs>>,
    incident: Vec<Vec<usize>>,
}

fn group_edges(g: &MrpGraph) -> Vec<(EdgeKey, Vec<Pairs>)> {
    let mut order: Vec<EdgeKey> = Vec::new();
    let mut map: HashMap<EdgeKey, Vec<Pairs>> = HashMap::new();
    for e in &g.edges {
        let key = (
            g.position(e.source).expect("validated"),
            g.position(e.target).expect("validated"),
            e.label.clone(),
        );
        if !map.contains_key(&key) {
            order.push(key.clone());
        }
        map.entry(key).or_default().push(pairs(&e.attributes, &e.values));
    }
    order
        .into_iter()
        .map(|k| {
            let v = map.remove(&k).expect("grouped");
            (k, v)
        })
        .collect()
}

impl Tables {
    fn new(gold: &MrpGraph, system: &MrpGraph) -> Self {
        let local = gold
            .nodes
            .iter()
            .map(|gn| {
                system
                    .nodes
                    .iter()
                    .map(|sn| local_score(gold, gn, system, sn))
                    .collect()
            })
            .collect();
        let groups: Vec<EdgeGroup> = group_edges(gold)
            .into_iter()
            .map(|((source, target, label), attrs)| EdgeGroup {
                source,
                target,
                label,
                attrs,
            })
            .collect();
        let mut incident = vec![Vec::new(); gold.nodes.len()];
        for (i, grp) in groups.iter().enumerate() {
            incident[grp.source].push(i);
            if grp.target != grp.source {
                incident[grp.target].push(i);
            }
        }
        Tables {
            gold_n: gold.nodes.len(),
            sys_n: system.nodes.len(),
            local,
            groups,
            sys_groups: group_edges(system).into_iter().collect(),
            incident,
        }
    }

    /// Matched edges plus attributes of a gold group under endpoint images.
    fn group_value(&self, gi: usize, x: usize, y: usize) -> usize {
        let grp = &self.groups[gi];
        let Some(sys) = self.sys_groups.get(&(x, y, grp.label.clone())) else {
            return 0;
        };
        grp.attrs.iter().zip(sys).map(|(a, b)| 1 + common(a, b)).sum()
    }

    fn group_max(&self, gi: usize) -> usize {
        self.groups[gi].attrs.iter().map(|a| 1 + a.len()).sum()
    }

    fn total(&self, map: &[Option<usize>]) -> usize {
        let nodes: usize = map
            .iter()
            .enumerate()
            .filter_map(|(g, s)| s.map(|s| self.local[g][s]))
            .sum();
        let edges: usize = self
            .groups
            .iter()
            .enumerate()
            .filter_map(|(gi, grp)| match (map[grp.source], map[grp.target]) {
                (Some(x), Some(y)) => Some(self.group_value(gi, x, y)),
                _ => None,
            })
            .sum();
        nodes + edges
    }
}

fn greedy(t: &Tables, order: &[usize], rng: Option<&mut ChaCha8Rng>) -> Vec<Option<usize>> {
    let mut map = vec![None; t.gold_n];
    let mut used = vec![false; t.sys_n];
    let mut candidates: Vec<usize> = (0..t.sys_n).collect();
    if let Some(rng) = rng {
        candidates.shuffle(rng);
    }
    for &g in order {
        let best = candidates.iter().copied().filter(|&s| !used[s]).max_by_key(|&s| {
            (
                t.local[g][s],
                std::cmp::Reverse(candidates.iter().position(|&c| c == s)),
            )
        });
        if let Some(s) = best {
            map[g] = Some(s);
            used[s] = true;
        }
    }
    map
}

/// First-improvement local search over reassignments and swaps.
fn hill_climb(t: &Tables, mut map: Vec<Option<usize>>) -> (Vec<Option<usize>>, usize) {
    let mut best = t.total(&map);
    loop {
        let mut improved = false;
        for g in 0..t.gold_n {
            for target in (0..t.sys_n).map(Some).chain(std::iter::once(None)) {
                if map[g] == target {
                    continue;
                }
                let holder = target.and_then(|s| map.iter().position(|&m| m == Some(s)));
                let old = map[g];
                map[g] = target;
                if let Some(h) = holder {
                    map[h] = old;
                }
                let score = t.total(&map);
                if score > best {
                    best = score;
                    improved = true;
                } else {
                    if let Some(h) = holder {
                        map[h] = target;
                    }
                    map[g] = old;
                }
            }
        }
        if !improved {
            return (map, best);
        }
    }
}

fn approximate(t: &Tables) -> (Vec<Option<usize>>, usize) {
    let natural: Vec<usize> = (0..t.gold_n).collect();
    let mut best = hill_climb(t, greedy(t, &natural, None));
    for restart in 1..RESTARTS {
        let mut rng = ChaCha8Rng::seed_from_u64(restart);
        let mut order = natural.clone();
        order.shuffle(&mut rng);
        let candidate = hill_climb(t, greedy(t, &order, Some(&mut rng)));
        if candidate.1 > best.1 {
            best = candidate;
        }
    }
    best
}

struct Search<'a> {
    t: &'a Tables,
    order: Vec<usize>,
    map: Vec<Option<usize>>,
    used: Vec<bool>,
    best: usize,
    best_map: Vec<Option<usize>>,
}

impl Search<'_> {
    fn bound(&self, depth: usize) -> usize {
        let nodes: usize = self.order[depth..]
            .iter()
            .map(|&g| {
                (0..self.t.sys_n)
                    .filter(|&s| !self.used[s])
                    .map(|s| self.t.local[g][s])
                    .max()
                    .unwrap_or(0)
            })
            .sum();
        let edges: usize = self
            .t
            .groups
            .iter()
            .enumerate()
            .filter(|(_, grp)| {
                let open = |v: usize| self.order[depth..].contains(&v);
                open(grp.source) || open(grp.target)
            })
            .map(|(gi, _)| self.t.group_max(gi))
            .sum();
        nodes + edges
    }

    fn gain(&self, g: usize, s: usize) -> usize {
        let mut gain = self.t.local[g][s];
        for &gi in &self.t.incident[g] {
            let grp = &self.t.groups[gi];
            let image = |v: usize| if v == g { Some(s) } else { self.map[v] };
            if let (Some(x), Some(y)) = (image(grp.source), image(grp.target)) {
                gain += self.t.group_value(gi, x, y);
            }
        }
        gain
    }

    fn run(&mut self, depth: usize, score: usize) {
        if score > self.best {
            self.best = score;
            self.best_map = self.map.clone();
        }
        if depth == self.order.len() || score + self.bound(depth) <= self.best {
            return;
        }
        let g = self.order[depth];
        let mut options: Vec<(usize, usize)> = (0..self.t.sys_n)
            .filter(|&s| !self.used[s])
            .map(|s| (self.gain(g, s), s))
            .collect();
        options.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
        for (gain, s) in options {
            self.map[g] = Some(s);
            self.used[s] = true;
            self.run(depth + 1, score + gain);
            self.used[s] = false;
            self.map[g] = None;
        }
        self.run(depth + 1, score);
    }
}

fn exact(t: &Tables) -> (Vec<Option<usize>>, usize) {
    let (start, start_score) = approximate(t);
    let mut order: Vec<usize> = (0..t.gold_n).collect();
    order.sort_by_key(|&g| std::cmp::Reverse(t.incident[g].len() + t.local[g].iter().max().copied().unwrap_or(0)));
    let mut search = Search {
        t,
        order,
        map: vec![None; t.gold_n],
        used: vec![false; t.sys_n],
        best: start_score,
        best_map: start,
    };
    search.run(0, 0);
    (search.best_map, search.best)
}

/// Node alignment maximizing the matched-item count. Exact when neither
/// graph has more than `node_limit` nodes, hill-climbing otherwise.
pub fn mces_align(gold: &MrpGraph, system: &MrpGraph, node_limit: usize) -> MrpAlignment {
    let t = Tables::new(gold, system);
    let is_exact = gold.nodes.len().max(system.nodes.len()) <= node_limit;
    let (map, matched) = if is_exact { exact(&t) } else { approximate(&t) };
    let mapping = map
        .iter()
        .enumerate()
        .filter_map(|(g, s)| s.map(|s| (gold.nodes[g].id, system.nodes[s].id)))
        .collect();
    MrpAlignment {
        mapping,
        matched,
        exact: is_exact,
    }
}

/// Per-facet counts under `alignment`.
pub fn mrp_score(gold: &MrpGraph, system: &MrpGraph, alignment: &MrpAlignment) -> Result<MrpScore, MetricsError> {
    let mut image: HashMap<usize, usize> = HashMap::new();
    let mut taken = std::collections::HashSet::new();
    for (&g, &s) in &alignment.mapping {
        gold.position(g).ok_or(MetricsError::UnknownNode(g))?;
        system.position(s).ok_or(MetricsError::UnknownNode(s))?;
        if !taken.insert(s) {
            return Err(MetricsError::InvalidGraph {
                id: system.id.clone(),
                message: format!("node {s} is the image of several gold nodes"),
            });
        }
        image.insert(g, s);
    }
    let node = |graph: &MrpGraph, id: usize| graph.nodes[graph.position(id).expect("checked")].clone();

    let mut score = MrpScore::default();
    let unique = |ids: &[usize]| {
        let mut v = ids.to_vec();
        v.sort();
        v.dedup();
        v
    };
    let (gtops, stops) = (unique(&gold.tops), unique(&system.tops));
    score.tops = PrfCounts::new(
        gtops
            .iter()
            .filter(|t| image.get(t).is_some_and(|s| stops.contains(s)))
            .count(),
        stops.len(),
        gtops.len(),
    );

    let count = |g: &MrpGraph, f: &dyn Fn(&MrpNode) -> usize| g.nodes.iter().map(f).sum::<usize>();
    score.labels.gold_total = count(gold, &|n| usize::from(n.label.is_some()));
    score.labels.system_total = count(system, &|n| usize::from(n.label.is_some()));
    score.properties.gold_total = count(gold, &|n| n.properties.len());
    score.properties.system_total = count(system, &|n| n.properties.len());
    score.anchors.gold_total = count(gold, &|n| usize::from(!n.anchors.is_empty()));
    score.anchors.system_total = count(system, &|n| usize::from(!n.anchors.is_empty()));
    for (&g, &s) in &image {
        let (gn, sn) = (node(gold, g), node(system, s));
        score.labels.correct += usize::from(gn.label.is_some() && gn.label == sn.label);
        score.properties.correct += common(&pairs(&gn.properties, &gn.values), &pairs(&sn.properties, &sn.values));
        score.anchors.correct += usize::from(!gn.anchors.is_empty() && anchor_set(&gn) == anchor_set(&sn));
    }

    score.edges.gold_total = gold.edges.len();
    score.edges.system_total = system.edges.len();
    score.attributes.gold_total = gold.edges.iter().map(|e| e.attributes.len()).sum();
    score.attributes.system_total = system.edges.iter().map(|e| e.attributes.len()).sum();
    let mut used = vec![false; system.edges.len()];
    for e in &gold.edges {
        let (Some(&x), Some(&y)) = (image.get(&e.source), image.get(&e.target)) else {
            continue;
        };
        let hit = system
            .edges
            .iter()
            .enumerate()
            .find(|(i, f)| !used[*i] && f.source == x && f.target == y && f.label == e.label);
        if let Some((i, f)) = hit {
            used[i] = true;
            score.edges.correct += 1;
            score.attributes.correct += common(&pairs(&e.attributes, &e.values), &pairs(&f.attributes, &f.values));
        }
    }
    Ok(score)
}
