//! Dense feed-forward networks exposing the pre-logit latent layer.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Gradients, Graph, Tensor, Var};
use crate::error::{NdaError, Result};

const CHECKPOINT_MAGIC: &str = "nda-checkpoint v1";

/// One affine layer `x W + b`, optionally followed by relu.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    /// `in × out`
    pub weight: Tensor,
    /// length `out`
    pub bias: Tensor,
    pub relu: bool,
}

impl Dense {
    pub fn in_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.cols()
    }
}

/// Stack of dense layers. The second-to-last layer's output is the latent
/// representation; the last layer produces the logits.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    layers: Vec<Dense>,
}

/// Graph handles for a model's parameters, in `parameters()` order.
#[derive(Clone, Debug)]
pub struct ParamVars {
    vars: Vec<Var>,
}

impl ParamVars {
    pub fn from_vars(vars: Vec<Var>) -> Self {
        ParamVars { vars }
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    pub fn gradients(&self, grads: &Gradients) -> Vec<Tensor> {
        self.vars.iter().map(|&v| grads.wrt(v)).collect()
    }
}

/// Outputs of one forward pass, all living on the same graph.
#[derive(Clone, Copy, Debug)]
pub struct ForwardResult {
    pub latent: Var,
    pub logits: Var,
    pub probs: Var,
}

impl Model {
    /// Scaled-uniform (Glorot) initialisation: weights in
    /// `±sqrt(6 / (fan_in + fan_out))`, zero biases.
    pub fn build(
        input_dim: usize,
        hidden: &[usize],
        latent_dim: usize,
        num_classes: usize,
        seed: u64,
    ) -> Result<Self> {
        if input_dim == 0 || latent_dim == 0 || hidden.contains(&0) {
            return Err(NdaError::contract("model dimensions must be at least 1"));
        }
        if num_classes < 2 {
            return Err(NdaError::contract(format!(
                "need at least 2 classes, got {num_classes}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut dims = vec![input_dim];
        dims.extend_from_slice(hidden);
        dims.push(latent_dim);
        dims.push(num_classes);

        let last = dims.len() - 2;
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let data = (0..fan_in * fan_out)
                    .map(|_| rng.random_range(-bound..bound))
                    .collect();
                Dense {
                    weight: Tensor::matrix(fan_in, fan_out, data).expect("sized"),
                    bias: Tensor::zeros(vec![fan_out]),
                    // hidden layers only: the latent layer and the head are affine
                    relu: i + 1 < last,
                }
            })
            .collect();
        Ok(Model { layers })
    }

    pub fn from_layers(layers: Vec<Dense>) -> Result<Self> {
        if layers.len() < 2 {
            return Err(NdaError::contract(
                "a model needs a latent layer and a logit layer",
            ));
        }
        for (i, layer) in layers.iter().enumerate() {
            if layer.weight.shape().len() != 2 || layer.weight.is_empty() {
                return Err(NdaError::contract(format!(
                    "layer {i}: weight must be a non-empty matrix"
                )));
            }
            if layer.bias.len() != layer.out_dim() {
                return Err(NdaError::Shape {
                    op: "layer bias",
                    left: layer.weight.shape().to_vec(),
                    right: layer.bias.shape().to_vec(),
                });
            }
        }
        for pair in layers.windows(2) {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(NdaError::Shape {
                    op: "layer chain",
                    left: pair[0].weight.shape().to_vec(),
                    right: pair[1].weight.shape().to_vec(),
                });
            }
        }
        if layers.last().map(Dense::out_dim).unwrap_or(0) < 2 {
            return Err(NdaError::contract(
                "logit layer must have at least 2 outputs",
            ));
        }
        Ok(Model { layers })
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Dense] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn latent_dim(&self) -> usize {
        self.layers[self.latent_index()].out_dim()
    }

    pub fn num_classes(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }

    /// Index of the layer whose output is the latent representation.
    pub fn latent_index(&self) -> usize {
        self.layers.len() - 2
    }

    pub fn parameters(&self) -> Vec<&Tensor> {
        self.layers
            .iter()
            .flat_map(|l| [&l.weight, &l.bias])
            .collect()
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    /// Registers every parameter as a trainable leaf of `graph`.
    pub fn register(&self, graph: &mut Graph) -> ParamVars {
        ParamVars {
            vars: self
                .parameters()
                .into_iter()
                .map(|p| graph.param(p.clone()))
                .collect(),
        }
    }

    /// Forward pass on already-registered parameters.
    pub fn forward_with(
        &self,
        graph: &mut Graph,
        params: &ParamVars,
        inputs: &Tensor,
    ) -> Result<ForwardResult> {
        if inputs.shape().len() != 2 || inputs.cols() != self.input_dim() {
            return Err(NdaError::Shape {
                op: "forward",
                left: inputs.shape().to_vec(),
                right: vec![self.input_dim()],
            });
        }
        let mut h = graph.constant(inputs.clone());
        let mut latent = h;
        for (i, layer) in self.layers.iter().enumerate() {
            let z = graph.matmul(h, params.vars[2 * i])?;
            h = graph.add_bias(z, params.vars[2 * i + 1])?;
            if layer.relu {
                h = graph.relu(h)?;
            }
            if i == self.latent_index() {
                latent = h;
            }
        }
        let probs = graph.softmax_rows(h)?;
        Ok(ForwardResult {
            latent,
            logits: h,
            probs,
        })
    }

    pub fn forward_batch(
        &self,
        graph: &mut Graph,
        inputs: &Tensor,
    ) -> Result<(ForwardResult, ParamVars)> {
        let params = self.register(graph);
        let out = self.forward_with(graph, &params, inputs)?;
        Ok((out, params))
    }

    /// Runs both batches through one shared set of parameter nodes, so
    /// gradients from the two branches accumulate into the same weights.
    pub fn forward_siamese(
        &self,
        graph: &mut Graph,
        inputs_a: &Tensor,
        inputs_b: &Tensor,
    ) -> Result<(ForwardResult, ForwardResult, ParamVars)> {
        let params = self.register(graph);
        let a = self.forward_with(graph, &params, inputs_a)?;
        let b = self.forward_with(graph, &params, inputs_b)?;
        Ok((a, b, params))
    }

    /// Inference without building a gradient graph: returns `(latent, probs)`.
    pub fn predict(&self, inputs: &Tensor) -> Result<(Tensor, Tensor)> {
        if inputs.shape().len() != 2 || inputs.cols() != self.input_dim() {
            return Err(NdaError::Shape {
                op: "predict",
                left: inputs.shape().to_vec(),
                right: vec![self.input_dim()],
            });
        }
        let mut h = inputs.clone();
        let mut latent = h.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            h = h.matmul(&layer.weight)?;
            let bias = layer.bias.data();
            for r in 0..h.rows() {
                for (x, b) in h.row_mut(r).iter_mut().zip(bias) {
                    *x += b;
                    if layer.relu && *x < 0.0 {
                        *x = 0.0;
                    }
                }
            }
            if i == self.latent_index() {
                latent = h.clone();
            }
        }
        for r in 0..h.rows() {
            crate::autodiff::softmax_in_place(h.row_mut(r));
        }
        if !h.is_finite() || !latent.is_finite() {
            return Err(NdaError::NonFinite { op: "predict" });
        }
        Ok((latent, h))
    }

    /// Euclidean distance between the flattened parameter vectors.
    pub fn parameter_distance(&self, other: &Model) -> f64 {
        self.parameters()
            .iter()
            .zip(other.parameters())
            .flat_map(|(a, b)| {
                a.data()
                    .iter()
                    .zip(b.data())
                    .map(|(x, y)| (x - y) * (x - y))
            })
            .sum::<f64>()
            .sqrt()
    }

    /// Text checkpoint; every value is written in shortest round-trip form.
    pub fn to_checkpoint(&self) -> String {
        let mut out = String::new();
        writeln!(out, "{CHECKPOINT_MAGIC}").unwrap();
        writeln!(out, "layers {}", self.layers.len()).unwrap();
        for layer in &self.layers {
            let act = if layer.relu { "relu" } else { "linear" };
            writeln!(out, "layer {} {} {act}", layer.in_dim(), layer.out_dim()).unwrap();
            out.push('w');
            for v in layer.weight.data() {
                write!(out, " {v:?}").unwrap();
            }
            out.push_str("\nb");
            for v in layer.bias.data() {
                write!(out, " {v:?}").unwrap();
            }
            out.push('\n');
        }
        out
    }

    pub fn from_checkpoint(text: &str) -> Result<Self> {
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.trim_end_matches('\r')));
        let mut next = |what: &str| {
            lines.next().ok_or_else(|| {
                NdaError::parse(0, format!("unexpected end of checkpoint, expected {what}"))
            })
        };

        let (n, magic) = next("header")?;
        if magic != CHECKPOINT_MAGIC {
            return Err(NdaError::parse(n, format!("expected `{CHECKPOINT_MAGIC}`")));
        }
        let (n, count_line) = next("layer count")?;
        let count: usize = count_line
            .strip_prefix("layers ")
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| NdaError::parse(n, "expected `layers <count>`"))?;

        let mut layers = Vec::new();
        for _ in 0..count {
            let (n, head) = next("layer header")?;
            let fields: Vec<&str> = head.split(' ').collect();
            let (in_dim, out_dim, relu) = match fields.as_slice() {
                ["layer", i, o, act] => {
                    let i: usize = i
                        .parse()
                        .map_err(|_| NdaError::parse(n, "bad input width"))?;
                    let o: usize = o
                        .parse()
                        .map_err(|_| NdaError::parse(n, "bad output width"))?;
                    let relu = match *act {
                        "relu" => true,
                        "linear" => false,
                        other => {
                            return Err(NdaError::parse(n, format!("unknown activation `{other}`")))
                        }
                    };
                    (i, o, relu)
                }
                _ => {
                    return Err(NdaError::parse(
                        n,
                        "expected `layer <in> <out> <relu|linear>`",
                    ))
                }
            };
            let size = in_dim
                .checked_mul(out_dim)
                .ok_or_else(|| NdaError::parse(n, "layer size overflows"))?;
            let (n, wline) = next("weights")?;
            let weight = parse_values(n, wline, "w", size)?;
            let (n, bline) = next("bias")?;
            let bias = parse_values(n, bline, "b", out_dim)?;
            layers.push(Dense {
                weight: Tensor::matrix(in_dim, out_dim, weight)?,
                bias: Tensor::vector(bias),
                relu,
            });
        }
        if let Some((n, extra)) = lines.find(|(_, l)| !l.trim().is_empty()) {
            return Err(NdaError::parse(n, format!("trailing content `{extra}`")));
        }
        Model::from_layers(layers)
    }
}

fn parse_values(line: usize, text: &str, tag: &str, expected: usize) -> Result<Vec<f64>> {
    let mut parts = text.split(' ');
    if parts.next() != Some(tag) {
        return Err(NdaError::parse(line, format!("expected `{tag}` row")));
    }
    let values = parts
        .map(|p| {
            p.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| NdaError::parse(line, format!("invalid value `{p}`")))
        })
        .collect::<Result<Vec<f64>>>()?;
    if values.len() != expected {
        return Err(NdaError::parse(
            line,
            format!("expected {expected} values, found {}", values.len()),
        ));
    }
    Ok(values)
}
