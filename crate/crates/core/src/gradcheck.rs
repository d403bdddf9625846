//! Central finite-difference verification of reverse-mode gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autograd::{Graph, Var};
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct CheckOptions {
    pub step: f64,
    /// Check at most this many coordinates per input array (all when `None`).
    pub samples_per_array: Option<usize>,
    pub seed: u64,
}

impl Default for CheckOptions {
    fn default() -> Self {
        Self {
            step: DEFAULT_STEP,
            samples_per_array: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ArrayError {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct CheckReport {
    pub arrays: Vec<ArrayError>,
    pub max_rel_error: f64,
}

impl CheckReport {
    pub fn worst(&self) -> Option<&ArrayError> {
        self.arrays
            .iter()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }
}

/// Compare the tape gradient of the scalar `build(graph, inputs)` against
/// central differences, coordinate by coordinate.
///
/// The relative error of a coordinate is
/// `|analytic − numeric| / max(|analytic|, |numeric|, 1e-3·g∞, 1e-10)` where
/// `g∞` is the largest analytic gradient over all inputs, so coordinates whose
/// true gradient is negligible (or identically zero) are judged on an
/// absolute scale.
pub fn check_gradients<F>(
    build: F,
    inputs: &[(String, Tensor)],
    opts: &CheckOptions,
) -> CheckReport
where
    F: Fn(&Graph, &[Var]) -> Var,
{
    let eval = |values: &[Tensor]| -> f64 {
        let g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.constant(t.clone())).collect();
        let out = build(&g, &vars);
        g.value(out).item()
    };

    let graph = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|(_, t)| graph.param(t.clone())).collect();
    let out = graph.backward(build(&graph, &vars));
    let analytic: Vec<Tensor> = inputs
        .iter()
        .zip(&vars)
        .map(|((_, t), v)| {
            out.get(*v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(t.shape()))
        })
        .collect();

    let scale = analytic.iter().fold(0.0_f64, |m, t| m.max(t.max_abs()));
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut values: Vec<Tensor> = inputs.iter().map(|(_, t)| t.clone()).collect();
    let mut arrays = Vec::with_capacity(inputs.len());
    for (ai, (name, tensor)) in inputs.iter().enumerate() {
        let len = tensor.len();
        let coords: Vec<usize> = match opts.samples_per_array {
            Some(k) if k < len => sample(&mut rng, len, k).into_vec(),
            _ => (0..len).collect(),
        };
        let mut worst: f64 = 0.0;
        for &i in &coords {
            let orig = values[ai].data()[i];
            values[ai].data_mut()[i] = orig + opts.step;
            let plus = eval(&values);
            values[ai].data_mut()[i] = orig - opts.step;
            let minus = eval(&values);
            values[ai].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * opts.step);
            let a = analytic[ai].data()[i];
            let denom = a.abs().max(numeric.abs()).max(1e-3 * scale).max(1e-10);
            worst = worst.max((a - numeric).abs() / denom);
        }
        arrays.push(ArrayError {
            name: name.clone(),
            checked: coords.len(),
            max_rel_error: worst,
        });
    }
    let max_rel_error = arrays.iter().fold(0.0_f64, |m, a| m.max(a.max_rel_error));
    CheckReport {
        arrays,
        max_rel_error,
    }
}
