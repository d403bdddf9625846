use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autograd::{Graph, Var};
use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    /// Zero-mean Gaussian with variance `2 / fan_in`.
    Kaiming { fan_in: usize },
    Zeros,
    Ones,
    /// `[c, c, 1, 1]` channel identity.
    Identity,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

/// Declares the parameters of a network, in call order.
#[derive(Default, Debug)]
pub struct SpecBuilder {
    specs: Vec<ParamSpec>,
}

impl SpecBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: String, shape: Vec<usize>, init: Init) {
        self.specs.push(ParamSpec { name, shape, init });
    }

    /// `{name}.weight: [cout, cin/groups, k, k]` and `{name}.bias: [cout]`.
    pub fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, groups: usize) {
        let fan_in = cin / groups * k * k;
        self.push(
            format!("{name}.weight"),
            vec![cout, cin / groups, k, k],
            Init::Kaiming { fan_in },
        );
        self.push(format!("{name}.bias"), vec![cout], Init::Zeros);
    }

    /// A 1×1 convolution `c -> c` that starts as the identity map.
    pub fn identity_conv(&mut self, name: &str, c: usize) {
        self.push(format!("{name}.weight"), vec![c, c, 1, 1], Init::Identity);
        self.push(format!("{name}.bias"), vec![c], Init::Zeros);
    }

    pub fn layer_norm(&mut self, name: &str, c: usize) {
        self.push(format!("{name}.gain"), vec![c], Init::Ones);
        self.push(format!("{name}.offset"), vec![c], Init::Zeros);
    }

    pub fn finish(self) -> Vec<ParamSpec> {
        self.specs
    }
}

/// Named parameter arrays. Values are kept representable in `f32` so that
/// checkpoints round-trip exactly.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct NetParams {
    arrays: BTreeMap<String, Tensor>,
}

impl NetParams {
    pub fn new() -> Self {
        Self::default()
    }

    /// Kaiming-normal weights, zero biases and offsets, unit gains.
    pub fn from_specs(specs: &[ParamSpec], seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut arrays = BTreeMap::new();
        for spec in specs {
            let mut t = match spec.init {
                Init::Kaiming { fan_in } => {
                    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("std > 0");
                    Tensor::from_fn(&spec.shape, |_| normal.sample(&mut rng))
                }
                Init::Zeros => Tensor::zeros(&spec.shape),
                Init::Ones => Tensor::full(&spec.shape, 1.0),
                Init::Identity => {
                    let c = spec.shape[0];
                    Tensor::from_fn(&spec.shape, |i| if i % (c + 1) == 0 { 1.0 } else { 0.0 })
                }
            };
            t.round_to_f32();
            arrays.insert(spec.name.clone(), t);
        }
        Self { arrays }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.arrays.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.arrays.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.arrays.get_mut(name)
    }

    /// Mutable access that fails loudly on an unknown name.
    pub fn expect_mut(&mut self, name: &str) -> &mut Tensor {
        self.arrays
            .get_mut(name)
            .unwrap_or_else(|| panic!("no parameter named {name}"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.arrays.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.arrays.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.arrays.keys()
    }

    pub fn len(&self) -> usize {
        self.arrays.len()
    }

    pub fn is_empty(&self) -> bool {
        self.arrays.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.arrays.values().map(Tensor::len).sum()
    }

    /// Every spec present with the declared shape and finite values.
    pub fn check_against(&self, specs: &[ParamSpec]) -> Result<()> {
        for spec in specs {
            let Some(t) = self.arrays.get(&spec.name) else {
                return shape_err(format!("missing parameter {}", spec.name));
            };
            if t.shape() != spec.shape.as_slice() {
                return shape_err(format!(
                    "parameter {} has shape {:?}, expected {:?}",
                    spec.name,
                    t.shape(),
                    spec.shape
                ));
            }
            if !t.all_finite() {
                return Err(Error::Numerical {
                    location: format!("parameter {}", spec.name),
                });
            }
        }
        Ok(())
    }

    /// Sub-collection of the arrays whose names start with `prefix`.
    pub fn subset(&self, prefix: &str) -> NetParams {
        NetParams {
            arrays: self
                .arrays
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    pub fn zeros_like(&self) -> NetParams {
        NetParams {
            arrays: self
                .arrays
                .iter()
                .map(|(k, v)| (k.clone(), Tensor::zeros(v.shape())))
                .collect(),
        }
    }
}

impl FromIterator<(String, Tensor)> for NetParams {
    fn from_iter<I: IntoIterator<Item = (String, Tensor)>>(iter: I) -> Self {
        Self {
            arrays: iter.into_iter().collect(),
        }
    }
}

/// Parameters registered on a [`Graph`] for one evaluation.
pub struct ParamVars<'g> {
    pub graph: &'g Graph,
    vars: BTreeMap<String, Var>,
}

impl<'g> ParamVars<'g> {
    /// Register every array; trainable arrays become gradient leaves.
    pub fn bind(graph: &'g Graph, params: &NetParams, trainable: bool) -> Self {
        let vars = params
            .iter()
            .map(|(name, t)| {
                let v = if trainable {
                    graph.param(t.clone())
                } else {
                    graph.constant(t.clone())
                };
                (name.clone(), v)
            })
            .collect();
        Self { graph, vars }
    }

    /// Wrap variables that are already on the graph.
    pub fn from_vars(graph: &'g Graph, vars: impl IntoIterator<Item = (String, Var)>) -> Self {
        Self {
            graph,
            vars: vars.into_iter().collect(),
        }
    }

    pub fn get(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name} not bound"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}
