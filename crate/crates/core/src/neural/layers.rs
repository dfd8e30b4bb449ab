use rand::Rng;

use super::{Bound, Graph, NeuralError, ParamSet, Tensor, Var};

/// Layer normalization over the last dimension of `x`.
pub fn layer_norm(graph: &mut Graph, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var, NeuralError> {
    let (_, n) = graph.dims(x);
    if n == 0 {
        return Err(NeuralError::Shape("layer norm over an empty dimension".into()));
    }
    for (what, v) in [("gain", gain), ("bias", bias)] {
        if graph.value(v).numel() != n {
            return Err(NeuralError::Shape(format!(
                "layer norm {what} has {} entries, input has {n} features",
                graph.value(v).numel()
            )));
        }
    }
    if eps <= 0.0 {
        return Err(NeuralError::Config("layer norm epsilon must be positive".into()));
    }
    Ok(graph.layer_norm(x, gain, bias, eps))
}

/// Softmax-weighted sum of equally shaped layers, scaled by `gamma`.
pub fn scalar_mix(graph: &mut Graph, layers: &[Var], logits: Var, gamma: Var) -> Result<Var, NeuralError> {
    let Some(&first) = layers.first() else {
        return Err(NeuralError::Shape("scalar mix over zero layers".into()));
    };
    let shape = graph.shape(first).to_vec();
    if let Some(bad) = layers.iter().find(|&&l| graph.shape(l) != shape.as_slice()) {
        return Err(NeuralError::Shape(format!(
            "scalar mix layers differ: {:?} vs {shape:?}",
            graph.shape(*bad)
        )));
    }
    if graph.value(logits).numel() != layers.len() {
        return Err(NeuralError::Shape(format!(
            "{} mixing logits for {} layers",
            graph.value(logits).numel(),
            layers.len()
        )));
    }
    if graph.value(gamma).numel() != 1 {
        return Err(NeuralError::Shape("scalar mix gamma must be a scalar".into()));
    }
    Ok(graph.scalar_mix(layers, logits, gamma))
}

/// Sums the subword rows of `subwords` belonging to each token.
pub fn pool_subwords(graph: &mut Graph, subwords: Var, token_map: &[Vec<usize>]) -> Result<Var, NeuralError> {
    let rows = graph.dims(subwords).0;
    for (t, group) in token_map.iter().enumerate() {
        if group.is_empty() {
            return Err(NeuralError::Shape(format!("token {t} has no subwords")));
        }
        if let Some(&r) = group.iter().find(|&&r| r >= rows) {
            return Err(NeuralError::Bounds(format!("token {t} maps to subword {r} of {rows}")));
        }
    }
    Ok(graph.group_sum(subwords, token_map))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Backward,
}

/// Names of one gated recurrent cell's parameters inside a [`ParamSet`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GruParams {
    pub prefix: String,
    pub hidden: usize,
}

impl GruParams {
    fn name(&self, part: &str) -> String {
        format!("{}.{part}", self.prefix)
    }
}

/// Registers a cell's weights: input `[input, 3h]`, recurrent `[h, 3h]` and
/// two biases, gate order reset, update, candidate.
pub fn init_gru<R: Rng>(params: &mut ParamSet, prefix: &str, input: usize, hidden: usize, rng: &mut R) -> GruParams {
    let cell = GruParams {
        prefix: prefix.to_string(),
        hidden,
    };
    let bound = 1.0 / (hidden as f64).sqrt();
    params.insert(cell.name("w_ih"), Tensor::uniform(&[input, 3 * hidden], bound, rng));
    params.insert(cell.name("w_hh"), Tensor::uniform(&[hidden, 3 * hidden], bound, rng));
    params.insert(cell.name("b_ih"), Tensor::uniform(&[3 * hidden], bound, rng));
    params.insert(cell.name("b_hh"), Tensor::uniform(&[3 * hidden], bound, rng));
    cell
}

/// Runs a cell over time-major rows of `x` (row `t * batch + b`). Sequences
/// shorter than the longest carry their state through padded steps, so the
/// backward pass starts at each sequence's true end. Returns one `[batch, h]`
/// state per time step, in input order.
pub fn gru_pass(
    graph: &mut Graph,
    bound: &Bound,
    cell: &GruParams,
    x: Var,
    batch: usize,
    lengths: &[usize],
    direction: Direction,
) -> Result<Vec<Var>, NeuralError> {
    let (rows, _) = graph.dims(x);
    if batch == 0 || rows % batch != 0 {
        return Err(NeuralError::Shape(format!(
            "{rows} rows do not split into batches of {batch}"
        )));
    }
    if lengths.len() != batch {
        return Err(NeuralError::Shape(format!(
            "{} lengths for batch {batch}",
            lengths.len()
        )));
    }
    let steps = rows / batch;
    if steps == 0 {
        return Err(NeuralError::Shape("recurrent layer over an empty sequence".into()));
    }
    if let Some(&l) = lengths.iter().find(|&&l| l > steps || l == 0) {
        return Err(NeuralError::Shape(format!("sequence length {l} outside 1..={steps}")));
    }
    let h = cell.hidden;
    let w_ih = bound.get(&cell.name("w_ih"));
    let w_hh = bound.get(&cell.name("w_hh"));
    let b_ih = bound.get(&cell.name("b_ih"));
    let b_hh = bound.get(&cell.name("b_hh"));
    if graph.dims(w_ih).1 != 3 * h || graph.dims(w_ih).0 != graph.dims(x).1 {
        return Err(NeuralError::Shape(format!(
            "cell `{}` expects input width {}, got {}",
            cell.prefix,
            graph.dims(w_ih).0,
            graph.dims(x).1
        )));
    }

    let xi = graph.matmul(x, w_ih);
    let gates_in = graph.add(xi, b_ih);
    let ragged = lengths.iter().any(|&l| l != steps);

    let mut state = graph.constant(Tensor::zeros(&[batch, h]));
    let mut outputs = vec![state; steps];
    let order: Vec<usize> = match direction {
        Direction::Forward => (0..steps).collect(),
        Direction::Backward => (0..steps).rev().collect(),
    };
    for t in order {
        let rows: Vec<usize> = (t * batch..(t + 1) * batch).collect();
        let gi = graph.gather(gates_in, &rows);
        let hw = graph.matmul(state, w_hh);
        let gh = graph.add(hw, b_hh);

        let gi_r = graph.slice_cols(gi, 0, h);
        let gh_r = graph.slice_cols(gh, 0, h);
        let r_pre = graph.add(gi_r, gh_r);
        let r = graph.sigmoid(r_pre);
        let gi_z = graph.slice_cols(gi, h, h);
        let gh_z = graph.slice_cols(gh, h, h);
        let z_pre = graph.add(gi_z, gh_z);
        let z = graph.sigmoid(z_pre);
        let gi_n = graph.slice_cols(gi, 2 * h, h);
        let gh_n = graph.slice_cols(gh, 2 * h, h);
        let rn = graph.mul(r, gh_n);
        let n_pre = graph.add(gi_n, rn);
        let n = graph.tanh(n_pre);

        let diff = graph.sub(state, n);
        let zd = graph.mul(z, diff);
        let mut next = graph.add(n, zd);
        if ragged {
            let mask: Vec<f64> = lengths.iter().map(|&l| if t < l { 1.0 } else { 0.0 }).collect();
            let m = graph.constant(Tensor::matrix(batch, 1, mask));
            let delta = graph.sub(next, state);
            let md = graph.mul(delta, m);
            next = graph.add(state, md);
        }
        state = next;
        outputs[t] = state;
    }
    Ok(outputs)
}

/// Bidirectional layer: forward and backward states concatenated per
/// position, returned as time-major rows `[steps * batch, 2h]`.
pub fn birnn_layer(
    graph: &mut Graph,
    bound: &Bound,
    cells: (&GruParams, &GruParams),
    x: Var,
    batch: usize,
    lengths: &[usize],
) -> Result<Var, NeuralError> {
    let fwd = gru_pass(graph, bound, cells.0, x, batch, lengths, Direction::Forward)?;
    let bwd = gru_pass(graph, bound, cells.1, x, batch, lengths, Direction::Backward)?;
    let per_step: Vec<Var> = fwd
        .iter()
        .zip(&bwd)
        .map(|(&f, &b)| graph.concat_cols(&[f, b]))
        .collect();
    Ok(graph.concat_rows(&per_step))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn constant_input_normalizes_to_zero() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[2, 4], 3.5));
        let gain = g.constant(Tensor::full(&[4], 1.0));
        let bias = g.constant(Tensor::zeros(&[4]));
        let y = layer_norm(&mut g, x, gain, bias, 1e-5).unwrap();
        assert!(g.value(y).values.iter().all(|v| v.abs() < 1e-9));
    }

    #[test]
    fn normalized_rows_have_unit_variance() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::matrix(1, 5, vec![1.0, -2.0, 4.0, 0.5, 9.0]));
        let gain = g.constant(Tensor::full(&[5], 1.0));
        let bias = g.constant(Tensor::zeros(&[5]));
        let y = layer_norm(&mut g, x, gain, bias, 1e-12).unwrap();
        let v = &g.value(y).values;
        let mean = v.iter().sum::<f64>() / 5.0;
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 5.0;
        assert!(mean.abs() < 1e-6 && (var - 1.0).abs() < 1e-6);
    }

    #[test]
    fn scalar_mix_cases() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::matrix(1, 2, vec![1.0, 2.0]));
        let b = g.constant(Tensor::matrix(1, 2, vec![3.0, 6.0]));
        let gamma = g.constant(Tensor::scalar(1.0));
        let equal = g.constant(Tensor::zeros(&[2]));
        let m = scalar_mix(&mut g, &[a, b], equal, gamma).unwrap();
        assert_eq!(g.value(m).values, vec![2.0, 4.0]);
        let saturated = g.constant(Tensor::new(vec![2], vec![1000.0, -1000.0]));
        let m = scalar_mix(&mut g, &[a, b], saturated, gamma).unwrap();
        assert!((g.value(m).values[0] - 1.0).abs() < 1e-6);
        let c = g.constant(Tensor::zeros(&[1, 3]));
        assert!(scalar_mix(&mut g, &[a, c], equal, gamma).is_err());
    }

    #[test]
    fn pooling_sums_subwords() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::matrix(3, 2, vec![1.0, 2.0, 1.0, 2.0, 5.0, 7.0]));
        let p = pool_subwords(&mut g, x, &[vec![0, 1], vec![2]]).unwrap();
        assert_eq!(g.value(p).values, vec![2.0, 4.0, 5.0, 7.0]);
        assert!(pool_subwords(&mut g, x, &[vec![]]).is_err());
    }

    #[test]
    fn birnn_shapes_and_single_step() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut ps = ParamSet::new();
        let f = init_gru(&mut ps, "f", 3, 4, &mut rng);
        let b = init_gru(&mut ps, "b", 3, 4, &mut rng);
        let mut g = Graph::new();
        let bound = ps.bind(&mut g);
        let x = g.constant(Tensor::matrix(1, 3, vec![0.1, -0.2, 0.3]));
        let y = birnn_layer(&mut g, &bound, (&f, &b), x, 1, &[1]).unwrap();
        assert_eq!(g.dims(y), (1, 8));

        // Same weights in both directions: a one-step sequence gives equal halves.
        let mut g = Graph::new();
        let bound = ps.bind(&mut g);
        let x = g.constant(Tensor::matrix(1, 3, vec![0.1, -0.2, 0.3]));
        let y = birnn_layer(&mut g, &bound, (&f, &f), x, 1, &[1]).unwrap();
        let v = &g.value(y).values;
        assert_eq!(&v[..4], &v[4..]);
    }

    #[test]
    fn padding_does_not_change_short_sequences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut ps = ParamSet::new();
        let f = init_gru(&mut ps, "f", 2, 3, &mut rng);
        let b = init_gru(&mut ps, "b", 2, 3, &mut rng);
        let seq = [0.5, -1.0, 0.25, 0.75];

        let mut g = Graph::new();
        let bound = ps.bind(&mut g);
        let x = g.constant(Tensor::matrix(2, 2, seq.to_vec()));
        let alone = birnn_layer(&mut g, &bound, (&f, &b), x, 1, &[2]).unwrap();
        let alone = g.value(alone).values.clone();

        // Batch of two, time-major; the first sequence is padded to length 3.
        let mut g = Graph::new();
        let bound = ps.bind(&mut g);
        let rows = vec![seq[0], seq[1], 1.0, 1.0, seq[2], seq[3], 2.0, 2.0, 9.0, 9.0, 3.0, 3.0];
        let x = g.constant(Tensor::matrix(6, 2, rows));
        let y = birnn_layer(&mut g, &bound, (&f, &b), x, 2, &[2, 3]).unwrap();
        let v = &g.value(y).values;
        for (got, want) in [&v[0..6], &v[12..18]].iter().zip(alone.chunks(6)) {
            for (a, b) in got.iter().zip(want) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
