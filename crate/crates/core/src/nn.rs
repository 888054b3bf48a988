//! Named parameters and the small set of layers shared by the model.
//!
//! Every trainable tensor has a stable dotted name (`encoder.0.attn.wq`). The
//! same names key the optimizer state, gradients and checkpoints, so binding a
//! module onto a [`Graph`] and visiting it mutably always agree.

use std::collections::BTreeMap;

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Grads, Graph, Var};

/// Something that owns named trainable tensors.
pub trait Module {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Array2<f64>));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Array2<f64>));

    fn num_parameters(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, p| n += p.len());
        n
    }

    fn named_parameters(&self) -> BTreeMap<String, Array2<f64>> {
        let mut out = BTreeMap::new();
        self.visit("", &mut |name, p| {
            out.insert(name.to_string(), p.clone());
        });
        out
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Places module parameters on a graph, remembering which [`Var`] holds which name.
pub struct Binder<'g> {
    graph: &'g mut Graph,
    trainable: bool,
    vars: BTreeMap<String, Var>,
}

impl<'g> Binder<'g> {
    /// `trainable = false` binds everything as constants (inference).
    pub fn new(graph: &'g mut Graph, trainable: bool) -> Self {
        Self {
            graph,
            trainable,
            vars: BTreeMap::new(),
        }
    }

    pub fn bind(&mut self, prefix: &str, name: &str, value: &Array2<f64>) -> Var {
        let full = join(prefix, name);
        let v = if self.trainable {
            self.graph.param(value.clone())
        } else {
            self.graph.constant(value.clone())
        };
        let previous = self.vars.insert(full.clone(), v);
        debug_assert!(previous.is_none(), "parameter `{full}` bound twice");
        v
    }

    pub fn graph(&mut self) -> &mut Graph {
        self.graph
    }

    pub fn finish(self) -> Bindings {
        Bindings { vars: self.vars }
    }
}

/// Name → [`Var`] table produced by a [`Binder`].
#[derive(Clone, Debug, Default)]
pub struct Bindings {
    vars: BTreeMap<String, Var>,
}

impl Bindings {
    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.vars.keys().map(String::as_str)
    }

    /// Collects gradients by parameter name; parameters the loss does not
    /// depend on get no entry.
    pub fn gradients(&self, grads: &mut Grads) -> BTreeMap<String, Array2<f64>> {
        self.vars
            .iter()
            .filter_map(|(name, &v)| grads.take(v).map(|g| (name.clone(), g)))
            .collect()
    }
}

/// Xavier-uniform matrix.
pub fn xavier(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Array2<f64> {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Array2::from_shape_fn((fan_in, fan_out), |_| rng.random_range(-bound..bound))
}

/// `y = x·W + b`, with `W` of shape `in × out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Array2<f64>,
    pub bias: Option<Array2<f64>>,
}

impl Linear {
    pub fn new(rng: &mut ChaCha8Rng, d_in: usize, d_out: usize, bias: bool) -> Self {
        Self {
            weight: xavier(rng, d_in, d_out),
            bias: bias.then(|| Array2::zeros((1, d_out))),
        }
    }

    pub fn zeros(d_in: usize, d_out: usize, bias: bool) -> Self {
        Self {
            weight: Array2::zeros((d_in, d_out)),
            bias: bias.then(|| Array2::zeros((1, d_out))),
        }
    }

    pub fn bind(&self, b: &mut Binder, prefix: &str) -> BoundLinear {
        BoundLinear {
            weight: b.bind(prefix, "weight", &self.weight),
            bias: self.bias.as_ref().map(|bias| b.bind(prefix, "bias", bias)),
        }
    }
}

impl Module for Linear {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Array2<f64>)) {
        f(&join(prefix, "weight"), &self.weight);
        if let Some(b) = &self.bias {
            f(&join(prefix, "bias"), b);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Array2<f64>)) {
        f(&join(prefix, "weight"), &mut self.weight);
        if let Some(b) = &mut self.bias {
            f(&join(prefix, "bias"), b);
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BoundLinear {
    pub weight: Var,
    pub bias: Option<Var>,
}

impl BoundLinear {
    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let y = g.matmul(x, self.weight);
        match self.bias {
            Some(b) => g.add_row(y, b),
            None => y,
        }
    }
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm {
    pub gamma: Array2<f64>,
    pub beta: Array2<f64>,
}

impl LayerNorm {
    pub fn new(dim: usize) -> Self {
        Self {
            gamma: Array2::ones((1, dim)),
            beta: Array2::zeros((1, dim)),
        }
    }

    pub fn bind(&self, b: &mut Binder, prefix: &str) -> BoundLayerNorm {
        BoundLayerNorm {
            gamma: b.bind(prefix, "gamma", &self.gamma),
            beta: b.bind(prefix, "beta", &self.beta),
        }
    }
}

impl Module for LayerNorm {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Array2<f64>)) {
        f(&join(prefix, "gamma"), &self.gamma);
        f(&join(prefix, "beta"), &self.beta);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Array2<f64>)) {
        f(&join(prefix, "gamma"), &mut self.gamma);
        f(&join(prefix, "beta"), &mut self.beta);
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BoundLayerNorm {
    pub gamma: Var,
    pub beta: Var,
}

impl BoundLayerNorm {
    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        g.layer_norm(x, self.gamma, self.beta, LAYER_NORM_EPS)
    }
}

/// Two-layer perceptron with GELU.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new(rng: &mut ChaCha8Rng, dim: usize, hidden: usize) -> Self {
        Self {
            fc1: Linear::new(rng, dim, hidden, true),
            fc2: Linear::new(rng, hidden, dim, true),
        }
    }

    pub fn bind(&self, b: &mut Binder, prefix: &str) -> BoundMlp {
        BoundMlp {
            fc1: self.fc1.bind(b, &join(prefix, "fc1")),
            fc2: self.fc2.bind(b, &join(prefix, "fc2")),
        }
    }
}

impl Module for Mlp {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Array2<f64>)) {
        self.fc1.visit(&join(prefix, "fc1"), f);
        self.fc2.visit(&join(prefix, "fc2"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Array2<f64>)) {
        self.fc1.visit_mut(&join(prefix, "fc1"), f);
        self.fc2.visit_mut(&join(prefix, "fc2"), f);
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BoundMlp {
    pub fc1: BoundLinear,
    pub fc2: BoundLinear,
}

impl BoundMlp {
    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let h = self.fc1.forward(g, x);
        let h = g.gelu(h);
        self.fc2.forward(g, h)
    }
}
