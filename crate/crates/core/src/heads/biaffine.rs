use rand::Rng;

use crate::neural::{Bound, Graph, ParamSet, Tensor, Var};

use super::HeadsError;

/// Parameter names of a biaffine arc and relation scorer.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BiaffineParams {
    pub prefix: String,
    pub dim: usize,
    pub relations: usize,
}

impl BiaffineParams {
    pub fn name(&self, part: &str) -> String {
        format!("{}.{part}", self.prefix)
    }
}

/// Registers `arc_u [a, a]`, `arc_h [a, 1]`, `arc_d [a, 1]`, `arc_b [1]` and
/// the relation scorer `lab_u [a, R*a]`, `lab_w [2a, R]`, `lab_b [R]`.
pub fn init_biaffine<R: Rng>(
    params: &mut ParamSet,
    prefix: &str,
    dim: usize,
    relations: usize,
    rng: &mut R,
) -> BiaffineParams {
    let p = BiaffineParams {
        prefix: prefix.to_string(),
        dim,
        relations,
    };
    let bound = 1.0 / (dim as f64).sqrt();
    params.insert(p.name("arc_u"), Tensor::uniform(&[dim, dim], bound, rng));
    params.insert(p.name("arc_h"), Tensor::uniform(&[dim, 1], bound, rng));
    params.insert(p.name("arc_d"), Tensor::uniform(&[dim, 1], bound, rng));
    params.insert(p.name("arc_b"), Tensor::zeros(&[1]));
    params.insert(
        p.name("lab_u"),
        Tensor::uniform(&[dim, relations.max(1) * dim], bound, rng),
    );
    params.insert(
        p.name("lab_w"),
        Tensor::uniform(&[2 * dim, relations.max(1)], bound, rng),
    );
    params.insert(p.name("lab_b"), Tensor::zeros(&[relations.max(1)]));
    p
}

/// Arc scores `[n + 1, n]`: entry `(i, j)` is `hᵢ·U·dⱼ + u·hᵢ + v·dⱼ + b`,
/// where row 0 of `heads` represents the root.
pub fn biaffine_scores(
    graph: &mut Graph,
    bound: &Bound,
    p: &BiaffineParams,
    heads: Var,
    deps: Var,
) -> Result<Var, HeadsError> {
    let (hn, ha) = graph.dims(heads);
    let (dn, da) = graph.dims(deps);
    if ha != p.dim || da != p.dim {
        return Err(HeadsError::Dimension(format!(
            "representations of width {ha} and {da}, scorer expects {}",
            p.dim
        )));
    }
    if hn != dn + 1 {
        return Err(HeadsError::Dimension(format!("{hn} head rows for {dn} dependents")));
    }
    let hu = graph.matmul(heads, bound.get(&p.name("arc_u")));
    let bilinear = graph.matmul_t(hu, deps, false, true);
    let head_term = graph.matmul(heads, bound.get(&p.name("arc_h")));
    let dep_term = graph.matmul_t(bound.get(&p.name("arc_d")), deps, true, true);
    let s = graph.add(bilinear, head_term);
    let s = graph.add(s, dep_term);
    Ok(graph.add(s, bound.get(&p.name("arc_b"))))
}

/// Relation scores `[n, R]` for dependents `deps` attached to the matching
/// rows of `head_rows`.
pub fn label_scores(
    graph: &mut Graph,
    bound: &Bound,
    p: &BiaffineParams,
    head_rows: Var,
    deps: Var,
) -> Result<Var, HeadsError> {
    let (hn, ha) = graph.dims(head_rows);
    let (dn, da) = graph.dims(deps);
    if ha != p.dim || da != p.dim || hn != dn {
        return Err(HeadsError::Dimension(format!(
            "label scorer got heads {:?} and dependents {:?}",
            (hn, ha),
            (dn, da)
        )));
    }
    let r = p.relations.max(1);
    let a = p.dim;
    let hu = graph.matmul(head_rows, bound.get(&p.name("lab_u")));
    let tiled = if r == 1 {
        deps
    } else {
        graph.concat_cols(&vec![deps; r])
    };
    let prod = graph.mul(hu, tiled);
    let mut block = vec![0.0; r * a * r];
    for rel in 0..r {
        for k in 0..a {
            block[(rel * a + k) * r + rel] = 1.0;
        }
    }
    let block = graph.constant(Tensor::matrix(r * a, r, block));
    let bilinear = graph.matmul(prod, block);
    let both = graph.concat_cols(&[head_rows, deps]);
    let linear = graph.matmul(both, bound.get(&p.name("lab_w")));
    let s = graph.add(bilinear, linear);
    Ok(graph.add(s, bound.get(&p.name("lab_b"))))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(u: Vec<f64>, b: f64) -> (ParamSet, BiaffineParams) {
        let mut ps = ParamSet::new();
        let p = BiaffineParams {
            prefix: "bi".into(),
            dim: 2,
            relations: 1,
        };
        ps.insert("bi.arc_u", Tensor::matrix(2, 2, u));
        ps.insert("bi.arc_h", Tensor::zeros(&[2, 1]));
        ps.insert("bi.arc_d", Tensor::zeros(&[2, 1]));
        ps.insert("bi.arc_b", Tensor::scalar(b));
        (ps, p)
    }

    #[test]
    fn constant_bias_only() {
        let (ps, p) = params(vec![0.0; 4], 3.0);
        let mut g = Graph::new();
        let bound = ps.bind(&mut g);
        let h = g.constant(Tensor::matrix(3, 2, vec![1.0, 2.0, -1.0, 0.5, 4.0, 4.0]));
        let d = g.constant(Tensor::matrix(2, 2, vec![0.3, 0.1, 9.0, -2.0]));
        let s = biaffine_scores(&mut g, &bound, &p, h, d).unwrap();
        assert_eq!(g.shape(s), &[3, 2]);
        assert!(g.value(s).values.iter().all(|&v| v == 3.0));
    }

    #[test]
    fn hand_two_by_two() {
        let (ps, p) = params(vec![2.0, 0.0, 0.0, 5.0], 0.0);
        let mut g = Graph::new();
        let bound = ps.bind(&mut g);
        let h = g.constant(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]));
        let d = g.constant(Tensor::matrix(1, 2, vec![1.0, 1.0]));
        let s = biaffine_scores(&mut g, &bound, &p, h, d).unwrap();
        assert_eq!(g.value(s).values, vec![2.0, 5.0]);
    }

    #[test]
    fn mismatched_dimensions_are_errors() {
        let (ps, p) = params(vec![0.0; 4], 0.0);
        let mut g = Graph::new();
        let bound = ps.bind(&mut g);
        let h = g.constant(Tensor::zeros(&[2, 2]));
        let d = g.constant(Tensor::zeros(&[2, 2]));
        assert!(biaffine_scores(&mut g, &bound, &p, h, d).is_err());
        let wide = g.constant(Tensor::zeros(&[1, 3]));
        assert!(biaffine_scores(&mut g, &bound, &p, h, wide).is_err());
    }
}
