//! MLPs with a shared ReLU trunk and two linear heads: the mean of the
//! variational output and a variance logit passed through a positive link.

use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{softplus, Graph, Tensor, Var};

#[derive(Debug, Error)]
pub enum NetworkError {
    #[error("invalid network spec: {0}")]
    InvalidSpec(String),
    #[error("input has {got} features, network expects {expected}")]
    Dimension { expected: usize, got: usize },
    #[error("parameter {index} has {got} values, expected {expected}")]
    ParamShape {
        index: usize,
        expected: usize,
        got: usize,
    },
    #[error("expected {expected} parameter arrays, got {got}")]
    ParamCount { expected: usize, got: usize },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Positive link mapping a variance logit to a variance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Link {
    /// `log(1 + exp(l))`, 1-Lipschitz.
    #[default]
    Softplus,
    Exp,
    /// `min(exp(l), cap)`.
    BoundedExp { cap: f64 },
}

impl Link {
    pub const DEFAULT_CAP: f64 = 1e4;

    pub fn apply(self, l: f64) -> f64 {
        match self {
            Link::Softplus => softplus(l),
            Link::Exp => l.exp(),
            Link::BoundedExp { cap } => l.exp().min(cap),
        }
    }

    pub fn apply_graph(self, g: &mut Graph, l: Var) -> Var {
        match self {
            Link::Softplus => g.softplus(l),
            Link::Exp => g.exp(l),
            Link::BoundedExp { cap } => {
                let e = g.exp(l);
                g.min_scalar(e, cap)
            }
        }
    }

    /// The logit `l` with `apply(l) == v`.
    pub fn inverse(self, v: f64) -> f64 {
        match self {
            // log(e^v - 1), written to stay accurate for small v
            Link::Softplus => v + (-(-v).exp_m1()).ln(),
            Link::Exp | Link::BoundedExp { .. } => v.ln(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
}

fn default_true() -> bool {
    true
}

fn default_init_variance() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub output_dim: usize,
    #[serde(default)]
    pub activation: Activation,
    /// Maps variance-head logits to `σ²`.
    #[serde(default)]
    pub link: Link,
    /// Maps the scale logit `l` of a regression output to the noise variance `g(l)`.
    #[serde(default)]
    pub noise_link: Link,
    /// When false the mean and variance heads get separate trunks.
    #[serde(default = "default_true")]
    pub shared_trunk: bool,
    /// Initial `σ²` the variance-head bias is set to produce.
    #[serde(default = "default_init_variance")]
    pub init_variance: f64,
}

impl MlpSpec {
    pub fn new(input_dim: usize, hidden: Vec<usize>, output_dim: usize) -> Self {
        Self {
            input_dim,
            hidden,
            output_dim,
            activation: Activation::Relu,
            link: Link::Softplus,
            noise_link: Link::Softplus,
            shared_trunk: true,
            init_variance: 1.0,
        }
    }

    pub fn with_link(mut self, link: Link) -> Self {
        self.link = link;
        self
    }

    pub fn with_noise_link(mut self, link: Link) -> Self {
        self.noise_link = link;
        self
    }

    pub fn validate(&self) -> Result<(), NetworkError> {
        if let Link::BoundedExp { cap } = self.noise_link {
            if !(cap > 0.0) {
                return Err(NetworkError::InvalidSpec("bounded_exp cap must be > 0".into()));
            }
        }
        if self.input_dim == 0 || self.output_dim == 0 || self.hidden.contains(&0) {
            return Err(NetworkError::InvalidSpec("all widths must be >= 1".into()));
        }
        if let Link::BoundedExp { cap } = self.link {
            if !(cap > 0.0) {
                return Err(NetworkError::InvalidSpec("bounded_exp cap must be > 0".into()));
            }
            if self.init_variance >= cap {
                return Err(NetworkError::InvalidSpec(
                    "init_variance must be below the bounded_exp cap".into(),
                ));
            }
        }
        if !(self.init_variance > 0.0 && self.init_variance.is_finite()) {
            return Err(NetworkError::InvalidSpec("init_variance must be > 0".into()));
        }
        Ok(())
    }

    fn trunk_shapes(&self) -> Vec<Vec<usize>> {
        let mut shapes = Vec::new();
        let mut fan_in = self.input_dim;
        for &h in &self.hidden {
            shapes.push(vec![fan_in, h]);
            shapes.push(vec![h]);
            fan_in = h;
        }
        shapes
    }

    fn head_shapes(&self) -> Vec<Vec<usize>> {
        let fan_in = self.hidden.last().copied().unwrap_or(self.input_dim);
        vec![vec![fan_in, self.output_dim], vec![self.output_dim]]
    }

    pub fn layout(&self) -> Layout {
        let t = 2 * self.hidden.len();
        let mean_trunk = 0..t;
        let mean_head = t..t + 2;
        let (var_trunk, var_head) = if self.shared_trunk {
            (None, t + 2..t + 4)
        } else {
            (Some(t + 2..2 * t + 2), 2 * t + 2..2 * t + 4)
        };
        Layout {
            mean_trunk,
            mean_head,
            var_trunk,
            var_head,
        }
    }

    /// Shapes of every parameter tensor, in storage order.
    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        let mut shapes = self.trunk_shapes();
        shapes.extend(self.head_shapes());
        if !self.shared_trunk {
            shapes.extend(self.trunk_shapes());
        }
        shapes.extend(self.head_shapes());
        shapes
    }

    /// Shapes of the trunk and mean head only: the deterministic base network.
    pub fn mean_path_shapes(&self) -> Vec<Vec<usize>> {
        let mut shapes = self.trunk_shapes();
        shapes.extend(self.head_shapes());
        shapes
    }

    pub fn param_count(&self) -> usize {
        self.param_shapes()
            .iter()
            .map(|s| s.iter().product::<usize>())
            .sum()
    }

    pub fn mean_path_param_count(&self) -> usize {
        self.mean_path_shapes()
            .iter()
            .map(|s| s.iter().product::<usize>())
            .sum()
    }
}

/// Index ranges of each parameter group inside [`Network::params`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    pub mean_trunk: Range<usize>,
    pub mean_head: Range<usize>,
    pub var_trunk: Option<Range<usize>>,
    pub var_head: Range<usize>,
}

impl Layout {
    pub fn mean_path(&self) -> Range<usize> {
        self.mean_trunk.start..self.mean_head.end
    }
}

/// Graph handles of the two output heads for a batch.
#[derive(Debug, Clone, Copy)]
pub struct Heads {
    pub mu: Var,
    pub sigma2: Var,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    spec: MlpSpec,
    params: Vec<Tensor>,
}

#[derive(Serialize, Deserialize)]
struct NetworkFile {
    spec: MlpSpec,
    params: Vec<Vec<f64>>,
}

/// Applies `x -> act(x W + b)` for each `(W, b)` pair in `layers`.
pub fn trunk_forward(g: &mut Graph, layers: &[Var], x: Var) -> Var {
    let mut h = x;
    for pair in layers.chunks(2) {
        let z = g.matmul(h, pair[0]);
        let z = g.add(z, pair[1]);
        h = g.relu(z);
    }
    h
}

pub fn linear(g: &mut Graph, w: Var, b: Var, h: Var) -> Var {
    let z = g.matmul(h, w);
    g.add(z, b)
}

/// Output of the deterministic trunk + mean head, given its parameter handles.
pub fn mean_path_forward(g: &mut Graph, mean_path: &[Var], x: Var) -> Var {
    let t = mean_path.len() - 2;
    let h = trunk_forward(g, &mean_path[..t], x);
    linear(g, mean_path[t], mean_path[t + 1], h)
}

impl Network {
    pub fn init(spec: MlpSpec, seed: u64) -> Result<Self, NetworkError> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layout = spec.layout();
        let var_bias = spec.link.inverse(spec.init_variance);
        let params = spec
            .param_shapes()
            .into_iter()
            .enumerate()
            .map(|(i, shape)| {
                if i == layout.var_head.end - 1 {
                    return Tensor::filled(&shape, var_bias);
                }
                // biases share the fan-in of the weight matrix stored before them
                let fan_in = if shape.len() == 2 {
                    shape[0]
                } else {
                    fan_in_of_bias(&spec, i)
                };
                let bound = 1.0 / (fan_in as f64).sqrt();
                let n = shape.iter().product();
                let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
                Tensor::new(shape, data).expect("shape from spec")
            })
            .collect();
        Ok(Self { spec, params })
    }

    pub fn from_params(spec: MlpSpec, params: Vec<Tensor>) -> Result<Self, NetworkError> {
        spec.validate()?;
        let shapes = spec.param_shapes();
        if shapes.len() != params.len() {
            return Err(NetworkError::ParamCount {
                expected: shapes.len(),
                got: params.len(),
            });
        }
        for (index, (s, p)) in shapes.iter().zip(&params).enumerate() {
            if s.as_slice() != p.shape() {
                return Err(NetworkError::ParamShape {
                    index,
                    expected: s.iter().product(),
                    got: p.len(),
                });
            }
        }
        Ok(Self { spec, params })
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    pub fn mean_path_params(&self) -> &[Tensor] {
        &self.params[self.spec.layout().mean_path()]
    }

    /// Registers every parameter as a trainable leaf.
    pub fn bind(&self, g: &mut Graph) -> Vec<Var> {
        self.params.iter().map(|p| g.param(p.clone())).collect()
    }

    fn bind_constant(&self, g: &mut Graph) -> Vec<Var> {
        self.params.iter().map(|p| g.constant(p.clone())).collect()
    }

    /// Builds `μ_q(x)` and `σ²_q(x)` on `g` from handles produced by [`Network::bind`].
    pub fn heads_on_graph(&self, g: &mut Graph, vars: &[Var], x: Var) -> Heads {
        let layout = self.spec.layout();
        let mean_h = trunk_forward(g, &vars[layout.mean_trunk.clone()], x);
        let var_h = match &layout.var_trunk {
            Some(r) => trunk_forward(g, &vars[r.clone()], x),
            None => mean_h,
        };
        let mh = layout.mean_head.start;
        let mu = linear(g, vars[mh], vars[mh + 1], mean_h);
        let vh = layout.var_head.start;
        let logit = linear(g, vars[vh], vars[vh + 1], var_h);
        let sigma2 = self.spec.link.apply_graph(g, logit);
        Heads { mu, sigma2 }
    }

    fn check_input(&self, x: &Tensor) -> Result<(), NetworkError> {
        if x.rank() != 2 || x.cols() != self.spec.input_dim {
            return Err(NetworkError::Dimension {
                expected: self.spec.input_dim,
                got: if x.rank() == 2 { x.cols() } else { x.len() },
            });
        }
        Ok(())
    }

    /// Evaluates both heads on a `[B, D]` batch: `(μ [B, K], σ² [B, K])`.
    pub fn forward_heads(&self, x: &Tensor) -> Result<(Tensor, Tensor), NetworkError> {
        self.check_input(x)?;
        let mut g = Graph::new();
        let vars = self.bind_constant(&mut g);
        let xv = g.constant(x.clone());
        let h = self.heads_on_graph(&mut g, &vars, xv);
        Ok((g.value(h.mu).clone(), g.value(h.sigma2).clone()))
    }

    /// Evaluates only the trunk and mean head (the base model's output).
    pub fn forward_mean(&self, x: &Tensor) -> Result<Tensor, NetworkError> {
        self.check_input(x)?;
        let mut g = Graph::new();
        let vars: Vec<Var> = self
            .mean_path_params()
            .iter()
            .map(|p| g.constant(p.clone()))
            .collect();
        let xv = g.constant(x.clone());
        let out = mean_path_forward(&mut g, &vars, xv);
        Ok(g.value(out).clone())
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(Tensor::is_finite)
    }

    pub fn to_json(&self) -> Result<String, NetworkError> {
        let file = NetworkFile {
            spec: self.spec.clone(),
            params: self.params.iter().map(|p| p.data().to_vec()).collect(),
        };
        Ok(serde_json::to_string(&file)?)
    }

    pub fn from_json(s: &str) -> Result<Self, NetworkError> {
        let file: NetworkFile = serde_json::from_str(s)?;
        let shapes = file.spec.param_shapes();
        if shapes.len() != file.params.len() {
            return Err(NetworkError::ParamCount {
                expected: shapes.len(),
                got: file.params.len(),
            });
        }
        let params = shapes
            .into_iter()
            .zip(file.params)
            .enumerate()
            .map(|(index, (shape, data))| {
                let expected = shape.iter().product();
                let got = data.len();
                Tensor::new(shape, data).map_err(|_| NetworkError::ParamShape {
                    index,
                    expected,
                    got,
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        Self::from_params(file.spec, params)
    }
}

fn fan_in_of_bias(spec: &MlpSpec, index: usize) -> usize {
    let shapes = spec.param_shapes();
    shapes[index - 1][0]
}
