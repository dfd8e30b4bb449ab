//! Reverse-mode automatic differentiation over 2-D views of [`Tensor`]s.
//!
//! A [`Graph`] is a tape: every operation appends a node holding its value
//! and enough information to push gradients back to its inputs. Tensors of
//! rank other than two are viewed as matrices (see [`Tensor::dims2`]).
//! Shape misuse inside the graph is a programming error and panics; the
//! public layer functions validate user-facing shapes before building ops.

use super::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

/// A differentiable operation implemented outside this module.
pub trait CustomOp: Send + Sync {
    /// Gradients for each input given the output gradient. `None` marks an
    /// input that receives no gradient.
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, out_grad: &[f64]) -> Vec<Option<Vec<f64>>>;
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MatMul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
    },
    Transpose(Var),
    Reshape(Var),
    Gelu(Var),
    Tanh(Var),
    Sigmoid(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    GroupSum {
        x: Var,
        groups: Vec<Vec<usize>>,
    },
    ScalarMix {
        layers: Vec<Var>,
        logits: Var,
        gamma: Var,
        weights: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Vec<f64>,
        count: usize,
    },
    Sum(Var),
    Custom {
        inputs: Vec<Var>,
        op: Box<dyn CustomOp>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every node that needs one.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }
}

/// `c += op(a) * op(b)` for row-major matrices.
pub(crate) fn gemm(
    ta: bool,
    tb: bool,
    a: &[f64],
    a_dims: (usize, usize),
    b: &[f64],
    b_dims: (usize, usize),
    c: &mut [f64],
) {
    let (m, k) = if ta { (a_dims.1, a_dims.0) } else { a_dims };
    let (k2, n) = if tb { (b_dims.1, b_dims.0) } else { b_dims };
    assert_eq!(
        k,
        k2,
        "inner dimensions differ: {a_dims:?}{} x {b_dims:?}{}",
        if ta { "ᵀ" } else { "" },
        if tb { "ᵀ" } else { "" }
    );
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the strides address exactly the checked buffer lengths.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            1.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn broadcast_index(b_dims: (usize, usize), i: usize, j: usize) -> usize {
    let bi = if b_dims.0 == 1 { 0 } else { i };
    let bj = if b_dims.1 == 1 { 0 } else { j };
    bi * b_dims.1 + bj
}

fn check_broadcast(a: (usize, usize), b: (usize, usize)) -> bool {
    (b.0 == a.0 || b.0 == 1) && (b.1 == a.1 || b.1 == 1)
}

fn gelu(x: f64) -> (f64, f64) {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
    let inner = C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    let value = 0.5 * x * (1.0 + t);
    let d_inner = C * (1.0 + 3.0 * 0.044715 * x * x);
    let deriv = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * d_inner;
    (value, deriv)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable in-place softmax of one row.
pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        let u = 1.0 / row.len() as f64;
        row.iter_mut().for_each(|v| *v = u);
        return;
    }
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    row.iter_mut().for_each(|v| *v /= total);
}

pub(crate) fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Whether gradients flow into `v`.
    pub fn is_trainable(&self, v: Var) -> bool {
        self.needs(v)
    }

    /// A trainable leaf. The gradient field of `t` is not copied.
    pub fn param(&mut self, t: &Tensor) -> Var {
        let value = Tensor::new(t.shape.clone(), t.values.clone());
        self.push(value, Op::Leaf, true)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        let value = Tensor::new(t.shape, t.values);
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    pub fn dims(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dims2()
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let t = self.value(v);
        assert_eq!(t.numel(), 1, "not a scalar: {:?}", t.shape);
        t.values[0]
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, make: fn(Var, Var) -> Op) -> Var {
        let (ad, bd) = (self.dims(a), self.dims(b));
        assert!(check_broadcast(ad, bd), "cannot broadcast {bd:?} into {ad:?}");
        let av = &self.value(a).values;
        let bv = &self.value(b).values;
        let mut out = Vec::with_capacity(av.len());
        for i in 0..ad.0 {
            for j in 0..ad.1 {
                out.push(f(av[i * ad.1 + j], bv[broadcast_index(bd, i, j)]));
            }
        }
        let shape = self.shape(a).to_vec();
        let needs = self.needs(a) || self.needs(b);
        self.push(Tensor::new(shape, out), make(a, b), needs)
    }

    /// Element-wise sum; the smaller operand is broadcast over rows/columns.
    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (ad, bd) = (self.dims(a), self.dims(b));
        if ad.0 * ad.1 < bd.0 * bd.1 {
            return self.add(b, a);
        }
        self.binary(a, b, |x, y| x + y, Op::Add)
    }

    /// `a - b` with `b` broadcast into `a`.
    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (ad, bd) = (self.dims(a), self.dims(b));
        if ad.0 * ad.1 < bd.0 * bd.1 {
            return self.mul(b, a);
        }
        self.binary(a, b, |x, y| x * y, Op::Mul)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let t = self.value(a);
        let value = Tensor::new(t.shape.clone(), t.values.iter().map(|v| v * factor).collect());
        let needs = self.needs(a);
        self.push(value, Op::Scale(a, factor), needs)
    }

    /// `1 - a`, element-wise.
    pub fn one_minus(&mut self, a: Var) -> Var {
        let neg = self.scale(a, -1.0);
        let one = self.constant(Tensor::scalar(1.0));
        self.add(neg, one)
    }

    /// `op(a) * op(b)` where `op` optionally transposes.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Var {
        let (ad, bd) = (self.dims(a), self.dims(b));
        let m = if ta { ad.1 } else { ad.0 };
        let n = if tb { bd.0 } else { bd.1 };
        let mut out = vec![0.0; m * n];
        gemm(ta, tb, &self.value(a).values, ad, &self.value(b).values, bd, &mut out);
        let needs = self.needs(a) || self.needs(b);
        self.push(Tensor::matrix(m, n, out), Op::MatMul { a, b, ta, tb }, needs)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.matmul_t(a, b, false, false)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let (m, n) = self.dims(a);
        let v = &self.value(a).values;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = v[i * n + j];
            }
        }
        let needs = self.needs(a);
        self.push(Tensor::matrix(n, m, out), Op::Transpose(a), needs)
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Var {
        let value = self.value(a).clone().reshaped(shape);
        let needs = self.needs(a);
        self.push(value, Op::Reshape(a), needs)
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let t = self.value(a);
        let value = Tensor::new(t.shape.clone(), t.values.iter().map(|&v| f(v)).collect());
        let needs = self.needs(a);
        self.push(value, op, needs)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, |x| gelu(x).0, Op::Gelu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    /// Softmax over the last dimension.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let (_, n) = self.dims(a);
        let mut value = self.value(a).clone();
        value.grad = None;
        for row in value.values.chunks_mut(n) {
            softmax_in_place(row);
        }
        let needs = self.needs(a);
        self.push(value, Op::SoftmaxRows(a), needs)
    }

    /// Per-row standardization followed by `gain * x + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Var {
        let (m, n) = self.dims(x);
        assert_eq!(self.value(gain).numel(), n, "layer norm gain size");
        assert_eq!(self.value(bias).numel(), n, "layer norm bias size");
        let xv = &self.value(x).values;
        let g = &self.value(gain).values;
        let b = &self.value(bias).values;
        let mut xhat = vec![0.0; m * n];
        let mut rstd = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &xv[i * n..(i + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let r = 1.0 / (var + eps).sqrt();
            rstd[i] = r;
            for j in 0..n {
                let h = (row[j] - mean) * r;
                xhat[i * n + j] = h;
                out[i * n + j] = h * g[j] + b[j];
            }
        }
        let shape = self.shape(x).to_vec();
        let needs = self.needs(x) || self.needs(gain) || self.needs(bias);
        self.push(
            Tensor::new(shape, out),
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            needs,
        )
    }

    /// Rows of `table` selected by `ids`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Var {
        let (rows, cols) = self.dims(table);
        let tv = &self.value(table).values;
        let mut out = Vec::with_capacity(ids.len() * cols);
        for &id in ids {
            assert!(id < rows, "gather index {id} out of {rows} rows");
            out.extend_from_slice(&tv[id * cols..(id + 1) * cols]);
        }
        let needs = self.needs(table);
        self.push(
            Tensor::matrix(ids.len(), cols, out),
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            needs,
        )
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let (m, n) = self.dims(x);
        assert!(start + len <= n, "column slice {start}+{len} exceeds {n}");
        let xv = &self.value(x).values;
        let mut out = Vec::with_capacity(m * len);
        for i in 0..m {
            out.extend_from_slice(&xv[i * n + start..i * n + start + len]);
        }
        let needs = self.needs(x);
        self.push(Tensor::matrix(m, len, out), Op::SliceCols { x, start }, needs)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let m = self.dims(parts[0]).0;
        let widths: Vec<usize> = parts.iter().map(|&p| self.dims(p).1).collect();
        assert!(parts.iter().all(|&p| self.dims(p).0 == m), "row counts differ");
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * total);
        for i in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).values[i * w..(i + 1) * w]);
            }
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        self.push(Tensor::matrix(m, total, out), Op::ConcatCols(parts.to_vec()), needs)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let n = self.dims(parts[0]).1;
        assert!(parts.iter().all(|&p| self.dims(p).1 == n), "column counts differ");
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            out.extend_from_slice(&self.value(p).values);
            rows += self.dims(p).0;
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        self.push(Tensor::matrix(rows, n, out), Op::ConcatRows(parts.to_vec()), needs)
    }

    /// Row `i` of the result is the sum of the rows of `x` listed in `groups[i]`.
    pub fn group_sum(&mut self, x: Var, groups: &[Vec<usize>]) -> Var {
        let (m, n) = self.dims(x);
        let xv = &self.value(x).values;
        let mut out = vec![0.0; groups.len() * n];
        for (gi, group) in groups.iter().enumerate() {
            for &r in group {
                assert!(r < m, "group row {r} out of {m}");
                for j in 0..n {
                    out[gi * n + j] += xv[r * n + j];
                }
            }
        }
        let needs = self.needs(x);
        self.push(
            Tensor::matrix(groups.len(), n, out),
            Op::GroupSum {
                x,
                groups: groups.to_vec(),
            },
            needs,
        )
    }

    /// `gamma * sum_l softmax(logits)_l * layers[l]`.
    pub fn scalar_mix(&mut self, layers: &[Var], logits: Var, gamma: Var) -> Var {
        let mut weights = self.value(logits).values.clone();
        assert_eq!(weights.len(), layers.len(), "one mixing logit per layer");
        softmax_in_place(&mut weights);
        let g = self.scalar(gamma);
        let shape = self.shape(layers[0]).to_vec();
        let mut out = vec![0.0; self.value(layers[0]).numel()];
        for (&l, &w) in layers.iter().zip(&weights) {
            let lv = &self.value(l).values;
            assert_eq!(lv.len(), out.len(), "layer shapes differ");
            for (o, v) in out.iter_mut().zip(lv) {
                *o += w * v;
            }
        }
        out.iter_mut().for_each(|o| *o *= g);
        let needs = layers.iter().any(|&l| self.needs(l)) || self.needs(logits) || self.needs(gamma);
        self.push(
            Tensor::new(shape, out),
            Op::ScalarMix {
                layers: layers.to_vec(),
                logits,
                gamma,
                weights,
            },
            needs,
        )
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of
    /// `logits`; rows with `None` are ignored. With no targets the loss is 0.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Var {
        let (m, n) = self.dims(logits);
        assert_eq!(m, targets.len(), "one target per row");
        let lv = &self.value(logits).values;
        let mut probs = lv.clone();
        let mut total = 0.0;
        let mut count = 0;
        for (i, t) in targets.iter().enumerate() {
            let row = &mut probs[i * n..(i + 1) * n];
            if let Some(t) = *t {
                assert!(t < n, "target {t} out of {n} classes");
                let lse = log_sum_exp(&lv[i * n..(i + 1) * n]);
                total += lse - lv[i * n + t];
                count += 1;
                softmax_in_place(row);
            }
        }
        let loss = if count == 0 { 0.0 } else { total / count as f64 };
        let needs = self.needs(logits);
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
                count,
            },
            needs,
        )
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).values.iter().sum();
        let needs = self.needs(a);
        self.push(Tensor::scalar(s), Op::Sum(a), needs)
    }

    pub fn custom(&mut self, inputs: &[Var], value: Tensor, op: Box<dyn CustomOp>) -> Var {
        let needs = inputs.iter().any(|&v| self.needs(v));
        self.push(
            value,
            Op::Custom {
                inputs: inputs.to_vec(),
                op,
            },
            needs,
        )
    }

    /// Back-propagates from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).numel(), 1, "backward needs a scalar");
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.needs(v) {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.numel()]);
        f(slot);
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                self.accumulate(grads, *a, |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                let (m, n) = out.dims2();
                let bd = self.dims(*b);
                self.accumulate(grads, *b, |gb| {
                    for i in 0..m {
                        for j in 0..n {
                            gb[broadcast_index(bd, i, j)] += sign * g[i * n + j];
                        }
                    }
                });
            }
            Op::Mul(a, b) => {
                let (m, n) = out.dims2();
                let bd = self.dims(*b);
                let av = &self.value(*a).values;
                let bv = &self.value(*b).values;
                self.accumulate(grads, *a, |ga| {
                    for i in 0..m {
                        for j in 0..n {
                            ga[i * n + j] += g[i * n + j] * bv[broadcast_index(bd, i, j)];
                        }
                    }
                });
                self.accumulate(grads, *b, |gb| {
                    for i in 0..m {
                        for j in 0..n {
                            gb[broadcast_index(bd, i, j)] += g[i * n + j] * av[i * n + j];
                        }
                    }
                });
            }
            Op::Scale(a, factor) => {
                self.accumulate(grads, *a, |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += factor * y));
            }
            Op::MatMul { a, b, ta, tb } => {
                let (ta, tb) = (*ta, *tb);
                let ad = self.dims(*a);
                let bd = self.dims(*b);
                let gd = out.dims2();
                let av = &self.value(*a).values;
                let bv = &self.value(*b).values;
                self.accumulate(grads, *a, |ga| {
                    if ta {
                        gemm(tb, true, bv, bd, g, gd, ga);
                    } else {
                        gemm(false, !tb, g, gd, bv, bd, ga);
                    }
                });
                self.accumulate(grads, *b, |gb| {
                    if tb {
                        gemm(true, ta, g, gd, av, ad, gb);
                    } else {
                        gemm(!ta, false, av, ad, g, gd, gb);
                    }
                });
            }
            Op::Transpose(a) => {
                let (m, n) = self.dims(*a);
                self.accumulate(grads, *a, |ga| {
                    for i in 0..m {
                        for j in 0..n {
                            ga[i * n + j] += g[j * m + i];
                        }
                    }
                });
            }
            Op::Reshape(a) => {
                self.accumulate(grads, *a, |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += y));
            }
            Op::Gelu(a) => {
                let av = &self.value(*a).values;
                self.accumulate(grads, *a, |ga| {
                    for ((x, gi), v) in ga.iter_mut().zip(g).zip(av) {
                        *x += gi * gelu(*v).1;
                    }
                });
            }
            Op::Tanh(a) => {
                self.accumulate(grads, *a, |ga| {
                    for ((x, gi), y) in ga.iter_mut().zip(g).zip(&out.values) {
                        *x += gi * (1.0 - y * y);
                    }
                });
            }
            Op::Sigmoid(a) => {
                self.accumulate(grads, *a, |ga| {
                    for ((x, gi), y) in ga.iter_mut().zip(g).zip(&out.values) {
                        *x += gi * y * (1.0 - y);
                    }
                });
            }
            Op::SoftmaxRows(a) => {
                let (_, n) = out.dims2();
                self.accumulate(grads, *a, |ga| {
                    for ((gar, gr), yr) in ga.chunks_mut(n).zip(g.chunks(n)).zip(out.values.chunks(n)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(x, y)| x * y).sum();
                        for j in 0..n {
                            gar[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let (m, n) = out.dims2();
                let gv = &self.value(*gain).values;
                self.accumulate(grads, *x, |gx| {
                    for i in 0..m {
                        let dxhat: Vec<f64> = (0..n).map(|j| g[i * n + j] * gv[j]).collect();
                        let mean_d = dxhat.iter().sum::<f64>() / n as f64;
                        let mean_dx = (0..n).map(|j| dxhat[j] * xhat[i * n + j]).sum::<f64>() / n as f64;
                        for j in 0..n {
                            gx[i * n + j] += rstd[i] * (dxhat[j] - mean_d - xhat[i * n + j] * mean_dx);
                        }
                    }
                });
                self.accumulate(grads, *gain, |gg| {
                    for i in 0..m {
                        for j in 0..n {
                            gg[j] += g[i * n + j] * xhat[i * n + j];
                        }
                    }
                });
                self.accumulate(grads, *bias, |gb| {
                    for i in 0..m {
                        for j in 0..n {
                            gb[j] += g[i * n + j];
                        }
                    }
                });
            }
            Op::Gather { table, ids } => {
                let cols = self.dims(*table).1;
                self.accumulate(grads, *table, |gt| {
                    for (r, &id) in ids.iter().enumerate() {
                        for j in 0..cols {
                            gt[id * cols + j] += g[r * cols + j];
                        }
                    }
                });
            }
            Op::SliceCols { x, start } => {
                let (m, n) = self.dims(*x);
                let len = out.dims2().1;
                self.accumulate(grads, *x, |gx| {
                    for i in 0..m {
                        for j in 0..len {
                            gx[i * n + start + j] += g[i * len + j];
                        }
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let (m, total) = out.dims2();
                let mut offset = 0;
                for &p in parts {
                    let w = self.dims(p).1;
                    self.accumulate(grads, p, |gp| {
                        for i in 0..m {
                            for j in 0..w {
                                gp[i * w + j] += g[i * total + offset + j];
                            }
                        }
                    });
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).numel();
                    self.accumulate(grads, p, |gp| {
                        gp.iter_mut().zip(&g[offset..offset + len]).for_each(|(x, y)| *x += y)
                    });
                    offset += len;
                }
            }
            Op::GroupSum { x, groups } => {
                let n = out.dims2().1;
                self.accumulate(grads, *x, |gx| {
                    for (gi, group) in groups.iter().enumerate() {
                        for &r in group {
                            for j in 0..n {
                                gx[r * n + j] += g[gi * n + j];
                            }
                        }
                    }
                });
            }
            Op::ScalarMix {
                layers,
                logits,
                gamma,
                weights,
            } => {
                let gam = self.scalar(*gamma);
                for (&l, &w) in layers.iter().zip(weights) {
                    self.accumulate(grads, l, |gl| gl.iter_mut().zip(g).for_each(|(x, y)| *x += gam * w * y));
                }
                // d/dw_l = gamma * <g, layer_l>
                let dw: Vec<f64> = layers
                    .iter()
                    .map(|&l| gam * self.value(l).values.iter().zip(g).map(|(v, y)| v * y).sum::<f64>())
                    .collect();
                let weighted: f64 = dw.iter().zip(weights).map(|(d, w)| d * w).sum();
                self.accumulate(grads, *logits, |gl| {
                    for (k, x) in gl.iter_mut().enumerate() {
                        *x += weights[k] * (dw[k] - weighted);
                    }
                });
                if gam != 0.0 {
                    let dgamma: f64 = out.values.iter().zip(g).map(|(o, y)| o / gam * y).sum();
                    self.accumulate(grads, *gamma, |gg| gg[0] += dgamma);
                } else {
                    let mix: f64 = layers
                        .iter()
                        .zip(weights)
                        .map(|(&l, &w)| w * self.value(l).values.iter().zip(g).map(|(v, y)| v * y).sum::<f64>())
                        .sum();
                    self.accumulate(grads, *gamma, |gg| gg[0] += mix);
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                count,
            } => {
                if *count == 0 {
                    return;
                }
                let n = self.dims(*logits).1;
                let scale = g[0] / *count as f64;
                self.accumulate(grads, *logits, |gl| {
                    for (i, t) in targets.iter().enumerate() {
                        if let Some(t) = *t {
                            for j in 0..n {
                                gl[i * n + j] += scale * probs[i * n + j];
                            }
                            gl[i * n + t] -= scale;
                        }
                    }
                });
            }
            Op::Sum(a) => {
                self.accumulate(grads, *a, |ga| ga.iter_mut().for_each(|x| *x += g[0]));
            }
            Op::Custom { inputs, op } => {
                let values: Vec<&Tensor> = inputs.iter().map(|&v| self.value(v)).collect();
                let partials = op.backward(&values, out, g);
                for (&v, partial) in inputs.iter().zip(partials) {
                    if let Some(p) = partial {
                        self.accumulate(grads, v, |gv| gv.iter_mut().zip(&p).for_each(|(x, y)| *x += y));
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_matches_naive_product_for_every_layout() {
        let (m, k, n) = (5, 7, 3);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.53).cos()).collect();
        let at = |i: usize, p: usize| a[i * k + p];
        let bt = |p: usize, j: usize| b[p * n + j];
        let expected: Vec<f64> = (0..m * n)
            .map(|idx| (0..k).map(|p| at(idx / n, p) * bt(p, idx % n)).sum())
            .collect();
        let transpose =
            |v: &[f64], r: usize, c: usize| -> Vec<f64> { (0..r * c).map(|idx| v[(idx % r) * c + idx / r]).collect() };
        let a_t = transpose(&a, m, k);
        let b_t = transpose(&b, k, n);
        for (ta, tb) in [(false, false), (false, true), (true, false), (true, true)] {
            let (av, ad) = if ta { (&a_t, (k, m)) } else { (&a, (m, k)) };
            let (bv, bd) = if tb { (&b_t, (n, k)) } else { (&b, (k, n)) };
            let mut c = vec![1.0; m * n];
            gemm(ta, tb, av, ad, bv, bd, &mut c);
            for (x, y) in c.iter().zip(&expected) {
                assert!((x - 1.0 - y).abs() < 1e-12, "layout {ta} {tb}");
            }
        }
    }

    fn numeric_grad(f: impl Fn(&[f64]) -> f64, x: &[f64]) -> Vec<f64> {
        let h = 1e-6;
        (0..x.len())
            .map(|i| {
                let mut p = x.to_vec();
                p[i] += h;
                let fp = f(&p);
                p[i] -= 2.0 * h;
                let fm = f(&p);
                (fp - fm) / (2.0 * h)
            })
            .collect()
    }

    fn assert_close(a: &[f64], b: &[f64], tol: f64) {
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() <= tol * (1.0 + x.abs().max(y.abs())), "{a:?} vs {b:?}");
        }
    }

    /// Builds `sum(w ⊙ f(x))` for a fixed random weighting so every output
    /// element contributes a distinct gradient.
    fn check_unary_op(build: impl Fn(&mut Graph, Var) -> Var, shape: &[usize], x: Vec<f64>) {
        let eval = |vals: &[f64]| {
            let mut g = Graph::new();
            let v = g.param(&Tensor::new(shape.to_vec(), vals.to_vec()));
            let y = build(&mut g, v);
            let n = g.value(y).numel();
            let w = g.constant(Tensor::new(
                g.shape(y).to_vec(),
                (0..n).map(|i| 0.3 + 0.1 * i as f64).collect(),
            ));
            let p = g.mul(y, w);
            let s = g.sum(p);
            (g, v, s)
        };
        let (g, v, s) = eval(&x);
        let analytic = g.backward(s).get(v).unwrap().to_vec();
        let numeric = numeric_grad(
            |p| {
                let (g, _, s) = eval(p);
                g.scalar(s)
            },
            &x,
        );
        assert_close(&analytic, &numeric, 1e-6);
    }

    #[test]
    fn elementwise_ops() {
        let x = vec![-1.3, 0.2, 0.7, 2.1, -0.4, 1.0];
        check_unary_op(|g, v| g.gelu(v), &[2, 3], x.clone());
        check_unary_op(|g, v| g.tanh(v), &[2, 3], x.clone());
        check_unary_op(|g, v| g.sigmoid(v), &[2, 3], x.clone());
        check_unary_op(|g, v| g.softmax_rows(v), &[2, 3], x.clone());
        check_unary_op(|g, v| g.transpose(v), &[2, 3], x.clone());
        check_unary_op(|g, v| g.scale(v, -2.5), &[2, 3], x.clone());
        check_unary_op(|g, v| g.one_minus(v), &[2, 3], x.clone());
        check_unary_op(|g, v| g.slice_cols(v, 1, 2), &[2, 3], x.clone());
        check_unary_op(|g, v| g.gather(v, &[1, 0, 1]), &[2, 3], x.clone());
        check_unary_op(|g, v| g.group_sum(v, &[vec![0, 1], vec![1]]), &[2, 3], x.clone());
        check_unary_op(|g, v| g.mul(v, v), &[2, 3], x.clone());
        check_unary_op(
            |g, v| {
                let t = g.transpose(v);
                g.matmul(v, t)
            },
            &[2, 3],
            x.clone(),
        );
        check_unary_op(|g, v| g.matmul_t(v, v, true, false), &[2, 3], x.clone());
        check_unary_op(|g, v| g.matmul_t(v, v, false, true), &[2, 3], x.clone());
        check_unary_op(
            |g, v| g.matmul_t(v, v, true, true),
            &[3, 3],
            vec![0.1, 0.5, -0.3, 1.2, 0.8, -0.9, 0.4, 0.3, 0.2],
        );
        check_unary_op(
            |g, v| {
                let c = g.concat_cols(&[v, v]);
                g.concat_rows(&[c, c])
            },
            &[2, 3],
            x.clone(),
        );
    }

    #[test]
    fn broadcast_ops() {
        let x = vec![-1.3, 0.2, 0.7, 2.1, -0.4, 1.0];
        for bshape in [vec![1, 3], vec![2, 1], vec![1, 1]] {
            let n: usize = bshape.iter().product();
            let b: Vec<f64> = (0..n).map(|i| 0.5 - 0.7 * i as f64).collect();
            let bs = bshape.clone();
            check_unary_op(
                move |g, v| {
                    let c = g.param(&Tensor::new(bs.clone(), b.clone()));
                    let s = g.sub(v, c);
                    let m = g.mul(c, s);
                    g.add(m, c)
                },
                &[2, 3],
                x.clone(),
            );
            // Gradient flowing into the broadcast operand.
            let xs = x.clone();
            check_unary_op(
                move |g, c| {
                    let v = g.constant(Tensor::new(vec![2, 3], xs.clone()));
                    let s = g.sub(v, c);
                    let m = g.mul(s, c);
                    g.add(c, m)
                },
                &bshape,
                (0..n).map(|i| 0.3 + 0.2 * i as f64).collect(),
            );
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut g = Graph::new();
        let v = g.constant(Tensor::matrix(2, 3, vec![1000.0, -5.0, 3.0, 0.0, 0.0, 0.0]));
        let s = g.softmax_rows(v);
        for row in g.value(s).values.chunks(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut g = Graph::new();
        let c = g.constant(Tensor::scalar(2.0));
        let p = g.param(&Tensor::scalar(3.0));
        let m = g.mul(c, p);
        let grads = g.backward(m);
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(p).unwrap(), &[2.0]);
    }
}
