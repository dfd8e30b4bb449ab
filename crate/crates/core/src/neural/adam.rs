use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use super::{NeuralError, ParamSet};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Skip rows whose gradient is entirely zero.
    pub lazy: bool,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-6,
            lazy: false,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<(), NeuralError> {
        let ok = (0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2) && self.eps > 0.0;
        if ok {
            Ok(())
        } else {
            Err(NeuralError::Config(format!(
                "adam needs 0 <= beta < 1 and eps > 0, got {self:?}"
            )))
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
    /// Update count per row; rows advance independently in lazy mode.
    steps: Vec<u64>,
}

/// Optimizer moments keyed by parameter name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    moments: IndexMap<String, Moments>,
}

impl AdamState {
    pub fn new() -> Self {
        AdamState::default()
    }

    pub fn first_moment(&self, name: &str) -> Option<&[f64]> {
        self.moments.get(name).map(|m| m.m.as_slice())
    }

    pub fn second_moment(&self, name: &str) -> Option<&[f64]> {
        self.moments.get(name).map(|m| m.v.as_slice())
    }

    pub fn row_steps(&self, name: &str) -> Option<&[u64]> {
        self.moments.get(name).map(|m| m.steps.as_slice())
    }
}

/// One bias-corrected Adam update using the `grad` field of every parameter
/// that has one. Parameters without a gradient are left alone. Nothing is
/// modified when any gradient is non-finite.
pub fn adam_step(
    params: &mut ParamSet,
    state: &mut AdamState,
    config: &AdamConfig,
    lr: f64,
) -> Result<(), NeuralError> {
    for (name, t) in params.iter() {
        if let Some(g) = &t.grad {
            if g.len() != t.numel() {
                return Err(NeuralError::Shape(format!("gradient of `{name}` has the wrong size")));
            }
            if g.iter().any(|v| !v.is_finite()) {
                return Err(NeuralError::NonFiniteGradient {
                    param: name.to_string(),
                });
            }
        }
    }
    let (b1, b2) = (config.beta1, config.beta2);
    for (name, t) in params.iter_mut() {
        let Some(grad) = &t.grad else { continue };
        let (rows, cols) = t.dims2();
        let st = state.moments.entry(name.to_string()).or_insert_with(|| Moments {
            m: vec![0.0; rows * cols],
            v: vec![0.0; rows * cols],
            steps: vec![0; rows],
        });
        for r in 0..rows {
            let span = r * cols..(r + 1) * cols;
            if config.lazy && grad[span.clone()].iter().all(|&g| g == 0.0) {
                continue;
            }
            st.steps[r] += 1;
            let step = st.steps[r] as i32;
            let c1 = 1.0 - b1.powi(step);
            let c2 = 1.0 - b2.powi(step);
            for i in span {
                let g = grad[i];
                st.m[i] = b1 * st.m[i] + (1.0 - b1) * g;
                st.v[i] = b2 * st.v[i] + (1.0 - b2) * g * g;
                let m_hat = st.m[i] / c1;
                let v_hat = st.v[i] / c2;
                t.values[i] -= lr * m_hat / (v_hat.sqrt() + config.eps);
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neural::Tensor;

    fn with_grad(shape: &[usize], values: Vec<f64>, grad: Vec<f64>) -> Tensor {
        let mut t = Tensor::new(shape.to_vec(), values);
        t.grad = Some(grad);
        t
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut ps = ParamSet::new();
        ps.insert("w", with_grad(&[3], vec![1.0, 1.0, 1.0], vec![0.5, -2.0, 1e-3]));
        let mut st = AdamState::new();
        let cfg = AdamConfig {
            eps: 1e-12,
            ..AdamConfig::default()
        };
        adam_step(&mut ps, &mut st, &cfg, 0.01).unwrap();
        let v = &ps.get("w").unwrap().values;
        for (x, sign) in v.iter().zip([1.0, -1.0, 1.0]) {
            assert!((x - (1.0 - 0.01 * sign)).abs() < 1e-8);
        }
    }

    #[test]
    fn zero_gradient_decays_moments_only() {
        let mut ps = ParamSet::new();
        ps.insert("w", with_grad(&[2], vec![1.0, 2.0], vec![1.0, 1.0]));
        let mut st = AdamState::new();
        let cfg = AdamConfig::default();
        adam_step(&mut ps, &mut st, &cfg, 0.1).unwrap();
        let before = ps.get("w").unwrap().values.clone();
        // Once the moments are non-zero a zero gradient still moves values,
        // so check the moment decay on a fresh parameter.
        let m0 = st.first_moment("w").unwrap().to_vec();
        let v0 = st.second_moment("w").unwrap().to_vec();
        ps.get_mut("w").unwrap().grad = Some(vec![0.0, 0.0]);
        adam_step(&mut ps, &mut st, &cfg, 0.1).unwrap();
        for i in 0..2 {
            assert!((st.first_moment("w").unwrap()[i] - 0.9 * m0[i]).abs() < 1e-15);
            assert!((st.second_moment("w").unwrap()[i] - 0.98 * v0[i]).abs() < 1e-15);
        }
        assert_ne!(ps.get("w").unwrap().values, before);

        let mut fresh = ParamSet::new();
        fresh.insert("z", with_grad(&[2], vec![3.0, 4.0], vec![0.0, 0.0]));
        let mut st = AdamState::new();
        adam_step(&mut fresh, &mut st, &cfg, 0.1).unwrap();
        assert_eq!(fresh.get("z").unwrap().values, vec![3.0, 4.0]);
    }

    #[test]
    fn lazy_rows_stay_bit_identical() {
        let mut ps = ParamSet::new();
        ps.insert(
            "emb",
            with_grad(&[2, 2], vec![0.1, 0.2, 0.3, 0.4], vec![1.0, -1.0, 0.5, 0.5]),
        );
        let mut st = AdamState::new();
        let cfg = AdamConfig {
            lazy: true,
            ..AdamConfig::default()
        };
        adam_step(&mut ps, &mut st, &cfg, 0.01).unwrap();
        let values = ps.get("emb").unwrap().values.clone();
        let m = st.first_moment("emb").unwrap().to_vec();
        ps.get_mut("emb").unwrap().grad = Some(vec![0.0, 0.0, 0.2, 0.1]);
        adam_step(&mut ps, &mut st, &cfg, 0.01).unwrap();
        let after = &ps.get("emb").unwrap().values;
        assert_eq!(
            after[..2].iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            values[..2].iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        assert_eq!(&st.first_moment("emb").unwrap()[..2], &m[..2]);
        assert_eq!(st.row_steps("emb").unwrap(), &[1, 2]);
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut ps = ParamSet::new();
        ps.insert("ok", with_grad(&[1], vec![0.0], vec![1.0]));
        ps.insert("bad", with_grad(&[1], vec![0.0], vec![f64::NAN]));
        let err = adam_step(&mut ps, &mut AdamState::new(), &AdamConfig::default(), 0.1).unwrap_err();
        assert!(matches!(err, NeuralError::NonFiniteGradient { ref param } if param == "bad"));
        assert_eq!(ps.get("ok").unwrap().values, vec![0.0]);
    }
}
