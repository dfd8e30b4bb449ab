use indexmap::IndexMap;

use super::{Bound, Graph, NeuralError, ParamSet, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub step: f64,
    /// Denominator floor of the relative error, so that two near-zero
    /// derivatives are not reported as wildly different.
    pub floor: f64,
    /// Check at most this many evenly spaced entries per parameter.
    pub max_entries_per_param: Option<usize>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-5,
            floor: 1e-6,
            max_entries_per_param: None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradCheckReport {
    /// Maximum relative error per parameter.
    pub per_param: IndexMap<String, f64>,
}

impl GradCheckReport {
    pub fn max_error(&self) -> f64 {
        self.per_param.values().copied().fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<(&str, f64)> {
        self.per_param
            .iter()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(k, &v)| (k.as_str(), v))
    }

    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_error() < tolerance
    }
}

fn relative_error(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

fn checked_entries(len: usize, limit: Option<usize>) -> Vec<usize> {
    match limit {
        Some(k) if k < len => (0..k).map(|j| j * len / k).collect(),
        _ => (0..len).collect(),
    }
}

fn evaluate<F>(params: &ParamSet, build: &F) -> Result<f64, NeuralError>
where
    F: Fn(&mut Graph, &Bound) -> Result<Var, NeuralError>,
{
    let mut graph = Graph::new();
    let bound = params.bind(&mut graph);
    let loss = build(&mut graph, &bound)?;
    let value = graph.scalar(loss);
    if value.is_finite() {
        Ok(value)
    } else {
        Err(NeuralError::NonFiniteLoss)
    }
}

/// Central-difference derivatives at the checked entries of every parameter.
pub fn numeric_gradients<F>(
    params: &ParamSet,
    build: F,
    options: &GradCheckOptions,
) -> Result<IndexMap<String, Vec<(usize, f64)>>, NeuralError>
where
    F: Fn(&mut Graph, &Bound) -> Result<Var, NeuralError>,
{
    let mut work = params.clone();
    let mut out = IndexMap::new();
    let names: Vec<String> = params.names().map(str::to_string).collect();
    for name in names {
        let len = work.get(&name).map_or(0, |t| t.numel());
        let mut derivs = Vec::new();
        for i in checked_entries(len, options.max_entries_per_param) {
            let original = work.get(&name).unwrap().values[i];
            work.get_mut(&name).unwrap().values[i] = original + options.step;
            let plus = evaluate(&work, &build)?;
            work.get_mut(&name).unwrap().values[i] = original - options.step;
            let minus = evaluate(&work, &build)?;
            work.get_mut(&name).unwrap().values[i] = original;
            derivs.push((i, (plus - minus) / (2.0 * options.step)));
        }
        out.insert(name, derivs);
    }
    Ok(out)
}

/// Compares analytic gradients against numeric ones entry by entry.
pub fn compare_gradients(
    analytic: &IndexMap<String, Vec<f64>>,
    numeric: &IndexMap<String, Vec<(usize, f64)>>,
    floor: f64,
) -> GradCheckReport {
    let per_param = numeric
        .iter()
        .map(|(name, entries)| {
            let grad = analytic.get(name);
            let worst = entries
                .iter()
                .map(|&(i, n)| {
                    let a = grad.map_or(0.0, |g| g[i]);
                    relative_error(a, n, floor)
                })
                .fold(0.0, f64::max);
            (name.clone(), worst)
        })
        .collect();
    GradCheckReport { per_param }
}

/// Checks the reverse-mode gradient of the scalar built by `build` against
/// central finite differences, for every parameter in `params`.
pub fn gradient_check<F>(
    params: &ParamSet,
    build: F,
    options: &GradCheckOptions,
) -> Result<GradCheckReport, NeuralError>
where
    F: Fn(&mut Graph, &Bound) -> Result<Var, NeuralError>,
{
    let mut graph = Graph::new();
    let bound = params.bind(&mut graph);
    let loss = build(&mut graph, &bound)?;
    if !graph.scalar(loss).is_finite() {
        return Err(NeuralError::NonFiniteLoss);
    }
    let grads = graph.backward(loss);
    let analytic: IndexMap<String, Vec<f64>> = bound
        .iter()
        .map(|(name, v)| {
            let n = graph.value(v).numel();
            (
                name.to_string(),
                grads.get(v).map_or_else(|| vec![0.0; n], <[f64]>::to_vec),
            )
        })
        .collect();
    let numeric = numeric_gradients(params, &build, options)?;
    Ok(compare_gradients(&analytic, &numeric, options.floor))
}
