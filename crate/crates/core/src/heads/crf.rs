use crate::neural::{log_sum_exp, CustomOp, Graph, Tensor, Var};

use super::HeadsError;

/// Emission scores `[n][labels]` and transition scores `[from][to]`.
#[derive(Clone, Debug, PartialEq)]
pub struct CrfScores {
    pub emissions: Vec<Vec<f64>>,
    pub transitions: Vec<Vec<f64>>,
}

impl CrfScores {
    pub fn num_labels(&self) -> usize {
        self.transitions.len()
    }

    fn from_tensors(emissions: &Tensor, transitions: &Tensor) -> Self {
        let (n, l) = emissions.dims2();
        CrfScores {
            emissions: (0..n).map(|i| emissions.values[i * l..(i + 1) * l].to_vec()).collect(),
            transitions: (0..l).map(|i| transitions.row(i).to_vec()).collect(),
        }
    }
}

/// Which labels may start a sequence and which transitions are allowed.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BioConstraints {
    pub allowed_start: Vec<bool>,
    pub allowed: Vec<Vec<bool>>,
}

impl BioConstraints {
    /// `I-X` may only follow `B-X` or `I-X` and may not start a sequence.
    pub fn from_labels<S: AsRef<str>>(labels: &[S]) -> Self {
        let parsed: Vec<(Option<char>, &str)> = labels
            .iter()
            .map(|l| match l.as_ref().split_once('-') {
                Some((p, t)) if p == "B" || p == "I" => (p.chars().next(), t),
                _ => (None, l.as_ref()),
            })
            .collect();
        let allowed_start = parsed.iter().map(|(p, _)| *p != Some('I')).collect();
        let allowed = parsed
            .iter()
            .map(|(from_p, from_type)| {
                parsed
                    .iter()
                    .map(|(to_p, to_type)| *to_p != Some('I') || (from_p.is_some() && from_type == to_type))
                    .collect()
            })
            .collect();
        BioConstraints { allowed_start, allowed }
    }

    pub fn check(&self, tags: &[usize]) -> Result<(), HeadsError> {
        let l = self.allowed.len();
        if let Some(&bad) = tags.iter().find(|&&t| t >= l) {
            return Err(HeadsError::InvalidTags(format!("tag {bad} outside {l} labels")));
        }
        if let Some(&first) = tags.first() {
            if !self.allowed_start[first] {
                return Err(HeadsError::InvalidTags(format!("tag {first} cannot start a sequence")));
            }
        }
        for (i, w) in tags.windows(2).enumerate() {
            if !self.allowed[w[0]][w[1]] {
                return Err(HeadsError::InvalidTags(format!(
                    "transition {} -> {} at position {}",
                    w[0],
                    w[1],
                    i + 1
                )));
            }
        }
        Ok(())
    }
}

fn start_ok(c: Option<&BioConstraints>, j: usize) -> bool {
    c.is_none_or(|c| c.allowed_start[j])
}

fn trans_ok(c: Option<&BioConstraints>, i: usize, j: usize) -> bool {
    c.is_none_or(|c| c.allowed[i][j])
}

fn forward(scores: &CrfScores, c: Option<&BioConstraints>) -> Vec<Vec<f64>> {
    let l = scores.num_labels();
    let mut alpha: Vec<Vec<f64>> = Vec::with_capacity(scores.emissions.len());
    for (t, e) in scores.emissions.iter().enumerate() {
        let row = (0..l)
            .map(|j| {
                if t == 0 {
                    if start_ok(c, j) {
                        e[j]
                    } else {
                        f64::NEG_INFINITY
                    }
                } else {
                    let terms: Vec<f64> = (0..l)
                        .map(|i| {
                            if trans_ok(c, i, j) {
                                alpha[t - 1][i] + scores.transitions[i][j]
                            } else {
                                f64::NEG_INFINITY
                            }
                        })
                        .collect();
                    e[j] + log_sum_exp(&terms)
                }
            })
            .collect();
        alpha.push(row);
    }
    alpha
}

fn backward(scores: &CrfScores, c: Option<&BioConstraints>) -> Vec<Vec<f64>> {
    let (n, l) = (scores.emissions.len(), scores.num_labels());
    let mut beta = vec![vec![0.0; l]; n];
    for t in (0..n.saturating_sub(1)).rev() {
        for i in 0..l {
            let terms: Vec<f64> = (0..l)
                .map(|j| {
                    if trans_ok(c, i, j) {
                        scores.transitions[i][j] + scores.emissions[t + 1][j] + beta[t + 1][j]
                    } else {
                        f64::NEG_INFINITY
                    }
                })
                .collect();
            beta[t][i] = log_sum_exp(&terms);
        }
    }
    beta
}

/// Log of the sum of exponentiated path scores over all allowed paths.
pub fn crf_log_partition(scores: &CrfScores, constraints: Option<&BioConstraints>) -> f64 {
    match forward(scores, constraints).last() {
        Some(last) => log_sum_exp(last),
        None => 0.0,
    }
}

pub fn crf_path_score(scores: &CrfScores, tags: &[usize]) -> f64 {
    let emit: f64 = tags.iter().enumerate().map(|(t, &y)| scores.emissions[t][y]).sum();
    let trans: f64 = tags.windows(2).map(|w| scores.transitions[w[0]][w[1]]).sum();
    emit + trans
}

/// Highest-scoring allowed path; ties prefer smaller label indices.
pub fn crf_decode(scores: &CrfScores, constraints: Option<&BioConstraints>) -> Vec<usize> {
    let (n, l) = (scores.emissions.len(), scores.num_labels());
    if n == 0 {
        return Vec::new();
    }
    let mut delta: Vec<f64> = (0..l)
        .map(|j| {
            if start_ok(constraints, j) {
                scores.emissions[0][j]
            } else {
                f64::NEG_INFINITY
            }
        })
        .collect();
    let mut back = vec![vec![0usize; l]; n];
    for t in 1..n {
        let mut next = vec![f64::NEG_INFINITY; l];
        for j in 0..l {
            let mut best = (f64::NEG_INFINITY, 0);
            for (i, &d) in delta.iter().enumerate() {
                if !trans_ok(constraints, i, j) {
                    continue;
                }
                let s = d + scores.transitions[i][j];
                if s > best.0 {
                    best = (s, i);
                }
            }
            next[j] = best.0 + scores.emissions[t][j];
            back[t][j] = best.1;
        }
        delta = next;
    }
    let mut last = 0;
    for j in 1..l {
        if delta[j] > delta[last] {
            last = j;
        }
    }
    let mut path = vec![last; n];
    for t in (1..n).rev() {
        path[t - 1] = back[t][path[t]];
    }
    path
}

struct CrfNll {
    d_emissions: Vec<f64>,
    d_transitions: Vec<f64>,
}

impl CustomOp for CrfNll {
    fn backward(&self, _inputs: &[&Tensor], _output: &Tensor, out_grad: &[f64]) -> Vec<Option<Vec<f64>>> {
        let g = out_grad[0];
        vec![
            Some(self.d_emissions.iter().map(|v| v * g).collect()),
            Some(self.d_transitions.iter().map(|v| v * g).collect()),
        ]
    }
}

/// Negative log-likelihood of `gold` under a linear-chain CRF with
/// emissions `[n, labels]` and transitions `[labels, labels]`.
pub fn crf_loss(
    graph: &mut Graph,
    emissions: Var,
    transitions: Var,
    gold: &[usize],
    constraints: Option<&BioConstraints>,
) -> Result<Var, HeadsError> {
    let (n, l) = graph.dims(emissions);
    if graph.dims(transitions) != (l, l) {
        return Err(HeadsError::Dimension(format!(
            "transitions {:?} for {l} labels",
            graph.dims(transitions)
        )));
    }
    if gold.len() != n {
        return Err(HeadsError::Dimension(format!(
            "{} gold tags for {n} positions",
            gold.len()
        )));
    }
    match constraints {
        Some(c) if c.allowed.len() != l => {
            return Err(HeadsError::Dimension("constraints cover a different label set".into()));
        }
        Some(c) => c.check(gold)?,
        None => {
            if let Some(&bad) = gold.iter().find(|&&t| t >= l) {
                return Err(HeadsError::InvalidTags(format!("tag {bad} outside {l} labels")));
            }
        }
    }
    let scores = CrfScores::from_tensors(graph.value(emissions), graph.value(transitions));
    let alpha = forward(&scores, constraints);
    let beta = backward(&scores, constraints);
    let log_z = alpha.last().map_or(0.0, |a| log_sum_exp(a));

    let mut d_emissions = vec![0.0; n * l];
    let mut d_transitions = vec![0.0; l * l];
    for t in 0..n {
        for j in 0..l {
            d_emissions[t * l + j] = (alpha[t][j] + beta[t][j] - log_z).exp();
        }
        d_emissions[t * l + gold[t]] -= 1.0;
        if t > 0 {
            for i in 0..l {
                for j in 0..l {
                    if trans_ok(constraints, i, j) {
                        let lp =
                            alpha[t - 1][i] + scores.transitions[i][j] + scores.emissions[t][j] + beta[t][j] - log_z;
                        d_transitions[i * l + j] += lp.exp();
                    }
                }
            }
            d_transitions[gold[t - 1] * l + gold[t]] -= 1.0;
        }
    }
    let nll = log_z - crf_path_score(&scores, gold);
    Ok(graph.custom(
        &[emissions, transitions],
        Tensor::scalar(nll),
        Box::new(CrfNll {
            d_emissions,
            d_transitions,
        }),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn all_paths(n: usize, l: usize) -> Vec<Vec<usize>> {
        let mut out = vec![vec![]];
        for _ in 0..n {
            out = out
                .into_iter()
                .flat_map(|p| {
                    (0..l).map(move |y| {
                        let mut q = p.clone();
                        q.push(y);
                        q
                    })
                })
                .collect();
        }
        out
    }

    #[test]
    fn zero_scores_give_uniform_partition() {
        let scores = CrfScores {
            emissions: vec![vec![0.0; 3]; 4],
            transitions: vec![vec![0.0; 3]; 3],
        };
        assert!((crf_log_partition(&scores, None) - 4.0 * 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn hand_instance_matches_enumeration() {
        let scores = CrfScores {
            emissions: vec![vec![1.0, 0.5, -0.3], vec![0.2, 1.5, 0.1], vec![-1.0, 0.3, 0.9]],
            transitions: vec![vec![0.1, -0.4, 0.6], vec![0.7, 0.0, -1.2], vec![-0.5, 0.8, 0.2]],
        };
        let paths = all_paths(3, 3);
        let best = paths
            .iter()
            .max_by(|a, b| crf_path_score(&scores, a).total_cmp(&crf_path_score(&scores, b)))
            .unwrap();
        assert_eq!(&crf_decode(&scores, None), best);
        let z: f64 = paths.iter().map(|p| crf_path_score(&scores, p).exp()).sum();
        assert!((crf_log_partition(&scores, None) - z.ln()).abs() < 1e-12);
    }

    #[test]
    fn bio_constraints() {
        let c = BioConstraints::from_labels(&["O", "B-PER", "I-PER", "B-LOC", "I-LOC"]);
        assert!(c.check(&[0, 1, 2, 2, 0, 3, 4]).is_ok());
        assert!(c.check(&[2]).is_err());
        assert!(c.check(&[0, 2]).is_err());
        assert!(c.check(&[1, 4]).is_err());

        let scores = CrfScores {
            emissions: vec![vec![0.0, 0.0, 9.0, 0.0, 0.0], vec![0.0, 0.0, 0.0, 0.0, 9.0]],
            transitions: vec![vec![0.0; 5]; 5],
        };
        let path = crf_decode(&scores, Some(&c));
        assert!(c.check(&path).is_ok());
    }

    #[test]
    fn invalid_gold_is_rejected() {
        let c = BioConstraints::from_labels(&["O", "B-X", "I-X"]);
        let mut g = Graph::new();
        let e = g.param(&Tensor::zeros(&[2, 3]));
        let t = g.param(&Tensor::zeros(&[3, 3]));
        assert!(matches!(
            crf_loss(&mut g, e, t, &[0, 2], Some(&c)),
            Err(HeadsError::InvalidTags(_))
        ));
        assert!(matches!(
            crf_loss(&mut g, e, t, &[0], Some(&c)),
            Err(HeadsError::Dimension(_))
        ));
    }
}
