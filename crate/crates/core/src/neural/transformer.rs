use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Bound, Graph, NeuralError, ParamSet, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransformerConfig {
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub ffn: usize,
    pub vocab_size: usize,
    pub max_positions: usize,
    pub eps: f64,
}

impl TransformerConfig {
    pub fn validate(&self) -> Result<(), NeuralError> {
        let mut problems = Vec::new();
        if self.heads == 0 || !self.hidden.is_multiple_of(self.heads) {
            problems.push(format!(
                "hidden {} is not divisible by heads {}",
                self.hidden, self.heads
            ));
        }
        if self.hidden == 0 || self.ffn == 0 || self.vocab_size == 0 || self.max_positions == 0 {
            problems.push("dimensions must be positive".to_string());
        }
        if !(self.eps > 0.0) {
            problems.push("layer norm epsilon must be positive".to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(NeuralError::Config(problems.join("; ")))
        }
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }
}

/// Encoder activations for one batch.
pub struct TransformerOutput {
    /// Embeddings followed by each block's output, `[batch, seq, hidden]`.
    pub layers: Vec<Var>,
    /// Last layer after the final layer norm, `[batch * seq, hidden]`.
    pub final_hidden: Var,
    /// Attention probabilities `[seq, seq]`, indexed `[layer][b * heads + head]`.
    pub attention: Vec<Vec<Var>>,
}

/// Creates parameters with uniform `±1/sqrt(fan_in)` weights, unit layer-norm
/// gains and zero biases. The output projection is tied to the token
/// embeddings; only an output bias is separate.
pub fn init_transformer(config: &TransformerConfig, seed: u64) -> Result<ParamSet, NeuralError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (d, f) = (config.hidden, config.ffn);
    let dense = |rows: usize, cols: usize, rng: &mut ChaCha8Rng| {
        Tensor::uniform(&[rows, cols], 1.0 / (rows as f64).sqrt(), rng)
    };
    let mut p = ParamSet::new();
    p.insert("tok_emb", dense(config.vocab_size, d, &mut rng));
    p.insert("pos_emb", dense(config.max_positions, d, &mut rng));
    for l in 0..config.layers {
        let k = |s: &str| format!("l{l}.{s}");
        p.insert(k("ln1.g"), Tensor::full(&[d], 1.0));
        p.insert(k("ln1.b"), Tensor::zeros(&[d]));
        for w in ["wq", "wk", "wv", "wo"] {
            p.insert(k(&format!("attn.{w}")), dense(d, d, &mut rng));
            p.insert(k(&format!("attn.b{}", &w[1..])), Tensor::zeros(&[d]));
        }
        p.insert(k("ln2.g"), Tensor::full(&[d], 1.0));
        p.insert(k("ln2.b"), Tensor::zeros(&[d]));
        p.insert(k("ff1.w"), dense(d, f, &mut rng));
        p.insert(k("ff1.b"), Tensor::zeros(&[f]));
        p.insert(k("ff2.w"), dense(f, d, &mut rng));
        p.insert(k("ff2.b"), Tensor::zeros(&[d]));
    }
    p.insert("final_ln.g", Tensor::full(&[d], 1.0));
    p.insert("final_ln.b", Tensor::zeros(&[d]));
    p.insert("mlm.bias", Tensor::zeros(&[config.vocab_size]));
    Ok(p)
}

const MASKED_SCORE: f64 = -1e9;

/// Pre-norm encoder over a padded batch. Every row of `input_ids` must have
/// the same length; `lengths` (when given) marks the real tokens of each row
/// and keys beyond it are excluded from attention.
pub fn forward_transformer(
    graph: &mut Graph,
    config: &TransformerConfig,
    params: &Bound,
    input_ids: &[Vec<u32>],
    lengths: Option<&[usize]>,
) -> Result<TransformerOutput, NeuralError> {
    let batch = input_ids.len();
    if batch == 0 {
        return Err(NeuralError::Shape("empty batch".into()));
    }
    let seq = input_ids[0].len();
    if seq == 0 || input_ids.iter().any(|r| r.len() != seq) {
        return Err(NeuralError::Shape(
            "input rows must be non-empty and equally long".into(),
        ));
    }
    if seq > config.max_positions {
        return Err(NeuralError::Bounds(format!(
            "sequence length {seq} exceeds {} positions",
            config.max_positions
        )));
    }
    if let Some(&bad) = input_ids.iter().flatten().find(|&&id| id as usize >= config.vocab_size) {
        return Err(NeuralError::Bounds(format!(
            "token id {bad} outside vocabulary of {}",
            config.vocab_size
        )));
    }
    if let Some(lengths) = lengths {
        if lengths.len() != batch || lengths.iter().any(|&l| l == 0 || l > seq) {
            return Err(NeuralError::Shape("lengths must give 1..=seq per row".into()));
        }
    }

    let (d, heads) = (config.hidden, config.heads);
    let dh = config.head_dim();
    let flat: Vec<usize> = input_ids.iter().flatten().map(|&id| id as usize).collect();
    let positions: Vec<usize> = (0..batch).flat_map(|_| 0..seq).collect();
    let tok = graph.gather(params.get("tok_emb"), &flat);
    let pos = graph.gather(params.get("pos_emb"), &positions);
    let mut x = graph.add(tok, pos);

    let key_masks: Vec<Option<Var>> = (0..batch)
        .map(|b| {
            let len = lengths.map_or(seq, |l| l[b]);
            (len < seq).then(|| {
                let row = (0..seq).map(|j| if j < len { 0.0 } else { MASKED_SCORE }).collect();
                graph.constant(Tensor::matrix(1, seq, row))
            })
        })
        .collect();

    let mut layers = vec![graph.reshape(x, vec![batch, seq, d])];
    let mut attention = Vec::with_capacity(config.layers);
    let scale = 1.0 / (dh as f64).sqrt();
    for l in 0..config.layers {
        let p = |s: &str| params.get(&format!("l{l}.{s}"));
        let h = graph.layer_norm(x, p("ln1.g"), p("ln1.b"), config.eps);
        let project = |graph: &mut Graph, w: &str, b: &str| {
            let m = graph.matmul(h, p(w));
            graph.add(m, p(b))
        };
        let q = project(graph, "attn.wq", "attn.bq");
        let k = project(graph, "attn.wk", "attn.bk");
        let v = project(graph, "attn.wv", "attn.bv");

        let mut probs_l = Vec::with_capacity(batch * heads);
        let mut contexts = Vec::with_capacity(batch);
        for (b, key_mask) in key_masks.iter().enumerate() {
            let rows: Vec<usize> = (b * seq..(b + 1) * seq).collect();
            let (qb, kb, vb) = if batch == 1 {
                (q, k, v)
            } else {
                (graph.gather(q, &rows), graph.gather(k, &rows), graph.gather(v, &rows))
            };
            let mut per_head = Vec::with_capacity(heads);
            for hd in 0..heads {
                let qh = graph.slice_cols(qb, hd * dh, dh);
                let kh = graph.slice_cols(kb, hd * dh, dh);
                let vh = graph.slice_cols(vb, hd * dh, dh);
                let raw = graph.matmul_t(qh, kh, false, true);
                let mut scores = graph.scale(raw, scale);
                if let Some(m) = key_mask {
                    scores = graph.add(scores, *m);
                }
                let probs = graph.softmax_rows(scores);
                probs_l.push(probs);
                per_head.push(graph.matmul(probs, vh));
            }
            contexts.push(if heads == 1 {
                per_head[0]
            } else {
                graph.concat_cols(&per_head)
            });
        }
        let ctx = if batch == 1 {
            contexts[0]
        } else {
            graph.concat_rows(&contexts)
        };
        let o = graph.matmul(ctx, p("attn.wo"));
        let o = graph.add(o, p("attn.bo"));
        x = graph.add(x, o);

        let h2 = graph.layer_norm(x, p("ln2.g"), p("ln2.b"), config.eps);
        let f1 = graph.matmul(h2, p("ff1.w"));
        let f1 = graph.add(f1, p("ff1.b"));
        let a = graph.gelu(f1);
        let f2 = graph.matmul(a, p("ff2.w"));
        let f2 = graph.add(f2, p("ff2.b"));
        x = graph.add(x, f2);

        layers.push(graph.reshape(x, vec![batch, seq, d]));
        attention.push(probs_l);
    }
    let final_hidden = graph.layer_norm(x, params.get("final_ln.g"), params.get("final_ln.b"), config.eps);
    Ok(TransformerOutput {
        layers,
        final_hidden,
        attention,
    })
}

/// Vocabulary logits for the selected rows of `final_hidden`.
pub fn mlm_logits(graph: &mut Graph, params: &Bound, final_hidden: Var, rows: &[usize]) -> Var {
    let selected = graph.gather(final_hidden, rows);
    let scores = graph.matmul_t(selected, params.get("tok_emb"), false, true);
    graph.add(scores, params.get("mlm.bias"))
}

/// Mean cross-entropy over rows with a target; 0 when there are none.
pub fn mlm_loss(graph: &mut Graph, logits: Var, targets: &[Option<u32>]) -> Result<Var, NeuralError> {
    let (rows, vocab) = graph.dims(logits);
    if rows != targets.len() {
        return Err(NeuralError::Shape(format!(
            "{rows} logit rows for {} targets",
            targets.len()
        )));
    }
    if let Some(t) = targets.iter().flatten().find(|&&t| t as usize >= vocab) {
        return Err(NeuralError::Bounds(format!("target {t} outside {vocab} classes")));
    }
    let t: Vec<Option<usize>> = targets.iter().map(|t| t.map(|v| v as usize)).collect();
    Ok(graph.cross_entropy(logits, &t))
}

/// Loss value and its gradient with respect to `logits`.
pub fn mlm_loss_value(logits: &Tensor, targets: &[Option<u32>]) -> Result<(f64, Tensor), NeuralError> {
    let mut graph = Graph::new();
    let v = graph.param(logits);
    let loss = mlm_loss(&mut graph, v, targets)?;
    let grads = graph.backward(loss);
    let grad = grads.get(v).map_or_else(|| vec![0.0; logits.numel()], <[f64]>::to_vec);
    Ok((graph.scalar(loss), Tensor::new(logits.shape.clone(), grad)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> TransformerConfig {
        TransformerConfig {
            layers: 2,
            hidden: 8,
            heads: 2,
            ffn: 16,
            vocab_size: 11,
            max_positions: 6,
            eps: 1e-5,
        }
    }

    #[test]
    fn shapes_and_attention_normalization() {
        let cfg = tiny();
        let params = init_transformer(&cfg, 3).unwrap();
        let mut g = Graph::new();
        let bound = params.bind(&mut g);
        let ids = vec![vec![0, 5, 6, 2, 1], vec![0, 7, 8, 9, 2]];
        let out = forward_transformer(&mut g, &cfg, &bound, &ids, Some(&[4, 5])).unwrap();
        assert_eq!(out.layers.len(), cfg.layers + 1);
        for &l in &out.layers {
            assert_eq!(g.shape(l), &[2, 5, 8]);
        }
        for probs in out.attention.iter().flatten() {
            for row in g.value(*probs).values.chunks(5) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            }
        }
        // Padded key of the first row receives no attention.
        let p = g.value(out.attention[0][0]);
        assert!((0..5).all(|i| p.at(i, 4) < 1e-12));
    }

    #[test]
    fn bounds_errors() {
        let cfg = tiny();
        let params = init_transformer(&cfg, 3).unwrap();
        let mut g = Graph::new();
        let bound = params.bind(&mut g);
        assert!(matches!(
            forward_transformer(&mut g, &cfg, &bound, &[vec![11]], None),
            Err(NeuralError::Bounds(_))
        ));
        assert!(matches!(
            forward_transformer(&mut g, &cfg, &bound, &[vec![1; 7]], None),
            Err(NeuralError::Bounds(_))
        ));
    }

    #[test]
    fn loss_edge_cases() {
        let uniform = Tensor::zeros(&[2, 7]);
        let (loss, _) = mlm_loss_value(&uniform, &[Some(3), Some(0)]).unwrap();
        assert!((loss - 7f64.ln()).abs() < 1e-12);

        let mut confident = Tensor::zeros(&[1, 4]);
        confident.values[2] = 80.0;
        let (loss, _) = mlm_loss_value(&confident, &[Some(2)]).unwrap();
        assert!(loss < 1e-30);

        let (loss, grad) = mlm_loss_value(&uniform, &[None, None]).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grad.values.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn loss_matches_direct_evaluation() {
        let values: Vec<f64> = (0..15).map(|i| ((i * 7 % 11) as f64 - 5.0) * 0.37).collect();
        let logits = Tensor::matrix(3, 5, values.clone());
        let targets = [Some(1), None, Some(4)];
        let (loss, _) = mlm_loss_value(&logits, &targets).unwrap();
        let mut total = 0.0;
        for (row, t) in [(0usize, 1usize), (2, 4)] {
            let r = &values[row * 5..row * 5 + 5];
            let z: f64 = r.iter().map(|v| v.exp()).sum();
            total += z.ln() - r[t];
        }
        assert!((loss - total / 2.0).abs() < 1e-10);
    }
}
