//! Architecture descriptors and the layered SB-LWTA model.

use std::fmt;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::layers::{
    self, ConvLwtaLayer, DenseLwtaLayer, DenseOutputLayer, ForwardMode, LwtaForward, LwtaNoise,
    LwtaVars, OutputVars,
};
use crate::stochastic::{self, IbpPrior};
use crate::tensor::Tensor;

/// One entry of an architecture descriptor.
#[derive(Clone, Debug, PartialEq)]
pub enum LayerSpec {
    /// `inputs`, when given, is checked against the width produced by the previous layer.
    DenseLwta {
        blocks: usize,
        competitors: usize,
        inputs: Option<usize>,
    },
    ConvLwta {
        kernels: usize,
        competitors: usize,
        size: usize,
        channels: Option<usize>,
    },
    MaxPool,
    Output {
        classes: usize,
    },
}

impl fmt::Display for LayerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LayerSpec::DenseLwta {
                blocks,
                competitors,
                inputs,
            } => {
                write!(f, "dense-lwta(K={blocks},U={competitors}")?;
                if let Some(j) = inputs {
                    write!(f, ",J={j}")?;
                }
                write!(f, ")")
            }
            LayerSpec::ConvLwta {
                kernels,
                competitors,
                size,
                channels,
            } => {
                write!(f, "conv-lwta(K={kernels},U={competitors},size={size}")?;
                if let Some(c) = channels {
                    write!(f, ",C={c}")?;
                }
                write!(f, ")")
            }
            LayerSpec::MaxPool => write!(f, "pool"),
            LayerSpec::Output { classes } => write!(f, "dense-out({classes})"),
        }
    }
}

/// Activation shape between layers (per example).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ActShape {
    Flat(usize),
    Image { h: usize, w: usize, c: usize },
}

impl ActShape {
    pub fn width(&self) -> usize {
        match *self {
            ActShape::Flat(n) => n,
            ActShape::Image { h, w, c } => h * w * c,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Architecture {
    /// Input image `[H, L, C]`.
    pub input: [usize; 3],
    pub layers: Vec<LayerSpec>,
}

pub const PRESETS: [&str; 5] = [
    "lenet300-sb2",
    "lenet300-sb4",
    "lenet5-sb2",
    "lenet5-sb4",
    "convnet-sb2",
];

fn dense(blocks: usize, competitors: usize) -> LayerSpec {
    LayerSpec::DenseLwta {
        blocks,
        competitors,
        inputs: None,
    }
}

fn conv(kernels: usize, competitors: usize) -> LayerSpec {
    LayerSpec::ConvLwta {
        kernels,
        competitors,
        size: 5,
        channels: None,
    }
}

impl Architecture {
    pub fn preset(name: &str) -> Result<Self> {
        use LayerSpec::{MaxPool, Output};
        let mnist = [28, 28, 1];
        let (input, layers) = match name {
            "lenet300-sb2" => (mnist, vec![dense(150, 2), dense(50, 2), Output { classes: 10 }]),
            "lenet300-sb4" => (mnist, vec![dense(75, 4), dense(25, 4), Output { classes: 10 }]),
            "lenet5-sb2" => (
                mnist,
                vec![conv(10, 2), MaxPool, conv(25, 2), MaxPool, dense(250, 2), Output { classes: 10 }],
            ),
            "lenet5-sb4" => (
                mnist,
                vec![conv(5, 4), MaxPool, conv(12, 4), MaxPool, dense(125, 4), Output { classes: 10 }],
            ),
            "convnet-sb2" => (
                [32, 32, 3],
                vec![
                    conv(32, 2),
                    MaxPool,
                    conv(32, 2),
                    MaxPool,
                    dense(192, 2),
                    dense(96, 2),
                    Output { classes: 10 },
                ],
            ),
            other => {
                return Err(Error::Config(format!(
                    "unknown preset `{other}` (expected one of {})",
                    PRESETS.join(", ")
                )))
            }
        };
        Ok(Architecture { input, layers })
    }

    /// Activation shapes after every layer, or a configuration error.
    pub fn validate(&self) -> Result<Vec<ActShape>> {
        let [h, w, c] = self.input;
        if h == 0 || w == 0 || c == 0 {
            return Err(Error::Config(format!("input shape {:?} has a zero extent", self.input)));
        }
        let mut cur = ActShape::Image { h, w, c };
        let mut shapes = Vec::with_capacity(self.layers.len());
        for (i, spec) in self.layers.iter().enumerate() {
            let bad = |msg: String| Error::Config(format!("layer {i} ({spec}): {msg}"));
            cur = match *spec {
                LayerSpec::DenseLwta {
                    blocks,
                    competitors,
                    inputs,
                } => {
                    if blocks == 0 || competitors == 0 {
                        return Err(bad("K and U must be positive".into()));
                    }
                    if let Some(j) = inputs {
                        if j != cur.width() {
                            return Err(bad(format!(
                                "declares J={j} but the previous layer produces width {}",
                                cur.width()
                            )));
                        }
                    }
                    ActShape::Flat(blocks * competitors)
                }
                LayerSpec::ConvLwta {
                    kernels,
                    competitors,
                    size,
                    channels,
                } => {
                    let ActShape::Image { h, w, c } = cur else {
                        return Err(bad("convolution after a flattened layer".into()));
                    };
                    if kernels == 0 || competitors == 0 || size == 0 {
                        return Err(bad("K, U and size must be positive".into()));
                    }
                    if let Some(declared) = channels {
                        if declared != c {
                            return Err(bad(format!(
                                "declares C={declared} but the previous layer produces {c} channels"
                            )));
                        }
                    }
                    ActShape::Image {
                        h,
                        w,
                        c: kernels * competitors,
                    }
                }
                LayerSpec::MaxPool => match cur {
                    ActShape::Image { h, w, c } if h >= 2 && w >= 2 => ActShape::Image {
                        h: h / 2,
                        w: w / 2,
                        c,
                    },
                    _ => return Err(bad(format!("cannot pool activation {cur:?}"))),
                },
                LayerSpec::Output { classes } => {
                    if i + 1 != self.layers.len() {
                        return Err(bad("the output layer must come last".into()));
                    }
                    if classes < 2 {
                        return Err(bad("need at least two classes".into()));
                    }
                    ActShape::Flat(classes)
                }
            };
            shapes.push(cur);
        }
        if !matches!(self.layers.last(), Some(LayerSpec::Output { .. })) {
            return Err(Error::Config("architecture must end with dense-out".into()));
        }
        Ok(shapes)
    }

    pub fn classes(&self) -> usize {
        match self.layers.last() {
            Some(LayerSpec::Output { classes }) => *classes,
            _ => 0,
        }
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.layers.iter().map(|l| l.to_string()).collect();
        write!(f, "{}", parts.join(" -> "))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    Dense(DenseLwtaLayer),
    Conv(ConvLwtaLayer),
    MaxPool,
    Output(DenseOutputLayer),
}

impl Layer {
    pub fn kind(&self) -> &'static str {
        match self {
            Layer::Dense(_) => "dense-lwta",
            Layer::Conv(_) => "conv-lwta",
            Layer::MaxPool => "pool",
            Layer::Output(_) => "dense-out",
        }
    }

    /// Parameter tensors in checkpoint and optimizer order, with their names.
    pub fn params(&self) -> Vec<(&'static str, &Tensor)> {
        match self {
            Layer::Dense(l) => lwta_params(&l.weights.mu, &l.weights.sigma_raw, &l.utility.logit, &l.sticks.log_a, &l.sticks.log_b),
            Layer::Conv(l) => lwta_params(&l.weights.mu, &l.weights.sigma_raw, &l.utility.logit, &l.sticks.log_a, &l.sticks.log_b),
            Layer::MaxPool => Vec::new(),
            Layer::Output(l) => vec![("mu", &l.weights.mu), ("sigma_raw", &l.weights.sigma_raw), ("bias", &l.bias)],
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            Layer::Dense(l) => vec![&mut l.weights.mu, &mut l.weights.sigma_raw, &mut l.utility.logit, &mut l.sticks.log_a, &mut l.sticks.log_b],
            Layer::Conv(l) => vec![&mut l.weights.mu, &mut l.weights.sigma_raw, &mut l.utility.logit, &mut l.sticks.log_a, &mut l.sticks.log_b],
            Layer::MaxPool => Vec::new(),
            Layer::Output(l) => vec![&mut l.weights.mu, &mut l.weights.sigma_raw, &mut l.bias],
        }
    }

    /// Retained-component mask, for layers that have one.
    pub fn keep(&self) -> Option<&Tensor> {
        match self {
            Layer::Dense(l) => Some(&l.keep),
            Layer::Conv(l) => Some(&l.keep),
            _ => None,
        }
    }
}

fn lwta_params<'a>(
    mu: &'a Tensor,
    sigma_raw: &'a Tensor,
    utility: &'a Tensor,
    log_a: &'a Tensor,
    log_b: &'a Tensor,
) -> Vec<(&'static str, &'a Tensor)> {
    vec![
        ("mu", mu),
        ("sigma_raw", sigma_raw),
        ("utility", utility),
        ("log_a", log_a),
        ("log_b", log_b),
    ]
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub arch: Architecture,
    pub prior: IbpPrior,
    pub layers: Vec<Layer>,
}

/// Graph leaves for one layer's parameters.
#[derive(Clone, Copy, Debug)]
pub enum LayerVars<'g> {
    Lwta(LwtaVars<'g>),
    Output(OutputVars<'g>),
    None,
}

#[derive(Clone, Debug)]
pub struct BoundModel<'g> {
    pub layers: Vec<LayerVars<'g>>,
}

impl<'g> BoundModel<'g> {
    /// All leaves, in the same order as [`Model::params`].
    pub fn params(&self) -> Vec<Var<'g>> {
        self.layers
            .iter()
            .flat_map(|l| match l {
                LayerVars::Lwta(v) => v.to_vec(),
                LayerVars::Output(v) => v.to_vec(),
                LayerVars::None => Vec::new(),
            })
            .collect()
    }
}

/// Noise for one training step, one entry per layer.
#[derive(Clone, Debug, PartialEq)]
pub enum LayerNoise {
    Lwta(LwtaNoise),
    Output(Tensor),
    None,
}

#[derive(Clone, Debug)]
pub struct ForwardPass<'g> {
    pub logits: Var<'g>,
    /// `(layer index, forward result)` for every LWTA layer.
    pub lwta: Vec<(usize, LwtaForward<'g>)>,
}

impl Model {
    pub fn new(arch: Architecture, prior: IbpPrior, rng: &mut impl Rng) -> Result<Self> {
        let shapes = arch.validate()?;
        let [h, w, c] = arch.input;
        let mut prev = ActShape::Image { h, w, c };
        let mut layers = Vec::with_capacity(arch.layers.len());
        for (spec, &out) in arch.layers.iter().zip(&shapes) {
            let layer = match *spec {
                LayerSpec::DenseLwta {
                    blocks,
                    competitors,
                    ..
                } => Layer::Dense(DenseLwtaLayer::new(prev.width(), blocks, competitors, prior, rng)),
                LayerSpec::ConvLwta {
                    kernels,
                    competitors,
                    size,
                    ..
                } => {
                    let ActShape::Image { c, .. } = prev else {
                        unreachable!("validated")
                    };
                    Layer::Conv(ConvLwtaLayer::new(size, size, c, kernels, competitors, prior, rng))
                }
                LayerSpec::MaxPool => Layer::MaxPool,
                LayerSpec::Output { classes } => {
                    Layer::Output(DenseOutputLayer::new(prev.width(), classes, rng))
                }
            };
            layers.push(layer);
            prev = out;
        }
        Ok(Model {
            arch,
            prior,
            layers,
        })
    }

    pub fn classes(&self) -> usize {
        self.arch.classes()
    }

    /// Named parameter tensors: `(layer index, name, tensor)`.
    pub fn params(&self) -> Vec<(usize, &'static str, &Tensor)> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(i, l)| l.params().into_iter().map(move |(n, t)| (i, n, t)))
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|(_, _, t)| t.len()).sum()
    }

    /// Indices of the LWTA layers, in order.
    pub fn lwta_layers(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| matches!(l, Layer::Dense(_) | Layer::Conv(_)))
            .map(|(i, _)| i)
            .collect()
    }

    pub fn bind<'g>(&self, g: &'g Graph, trainable: bool) -> BoundModel<'g> {
        BoundModel {
            layers: self
                .layers
                .iter()
                .map(|l| match l {
                    Layer::Dense(d) => LayerVars::Lwta(d.bind(g, trainable)),
                    Layer::Conv(c) => LayerVars::Lwta(c.bind(g, trainable)),
                    Layer::Output(o) => LayerVars::Output(o.bind(g, trainable)),
                    Layer::MaxPool => LayerVars::None,
                })
                .collect(),
        }
    }

    /// Draws every noise tensor needed for one training step on a batch of `batch` examples.
    pub fn sample_noise(&self, batch: usize, rng: &mut impl Rng) -> Vec<LayerNoise> {
        fn uniform(shape: &[usize], rng: &mut impl Rng) -> Tensor {
            Tensor::from_fn(shape, |_| rng.gen::<f64>())
        }
        let mut out = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let noise = match layer {
                Layer::Dense(l) => {
                    let weight_eps = Tensor::from_fn(l.weights.shape(), |_| rng.sample(StandardNormal));
                    LayerNoise::Lwta(LwtaNoise {
                        weight_eps,
                        z_uniform: uniform(&[l.inputs, l.blocks], rng),
                        stick_uniform: uniform(&[l.blocks], rng),
                        xi_gumbel: stochastic::gumbel_from_uniform(&uniform(
                            &[batch, l.blocks, l.competitors],
                            rng,
                        )),
                    })
                }
                Layer::Conv(l) => {
                    let weight_eps = Tensor::from_fn(l.weights.shape(), |_| rng.sample(StandardNormal));
                    LayerNoise::Lwta(LwtaNoise {
                        weight_eps,
                        z_uniform: uniform(&[l.kernels], rng),
                        stick_uniform: uniform(&[l.kernels], rng),
                        xi_gumbel: stochastic::gumbel_from_uniform(&uniform(
                            &[batch, l.kernels, l.competitors],
                            rng,
                        )),
                    })
                }
                Layer::Output(l) => {
                    LayerNoise::Output(Tensor::from_fn(l.weights.shape(), |_| rng.sample(StandardNormal)))
                }
                Layer::MaxPool => LayerNoise::None,
            };
            out.push(noise);
        }
        out
    }

    /// Runs the network on `x` (`[B, H, L, C]`). Train mode requires `noise`.
    pub fn forward<'g>(
        &self,
        bound: &BoundModel<'g>,
        x: Var<'g>,
        mode: ForwardMode,
        noise: Option<&[LayerNoise]>,
    ) -> Result<ForwardPass<'g>> {
        let [h, w, c] = self.arch.input;
        let xs = x.shape();
        if xs.len() != 4 || xs[1..] != [h, w, c] {
            return Err(Error::dimension("model input", &xs, &[h, w, c]));
        }
        let batch = xs[0];
        let mut act = x;
        let mut lwta = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            let layer_noise = noise.and_then(|n| n.get(i));
            let lw_noise = match layer_noise {
                Some(LayerNoise::Lwta(n)) => Some(n),
                _ => None,
            };
            match (layer, &bound.layers[i]) {
                (Layer::Dense(l), LayerVars::Lwta(v)) => {
                    if act.shape().len() != 2 {
                        act = act.reshape(&[batch, l.inputs])?;
                    }
                    let out = layers::dense_lwta_forward(act, l, v, mode, lw_noise)?;
                    act = out.output;
                    lwta.push((i, out));
                }
                (Layer::Conv(l), LayerVars::Lwta(v)) => {
                    let out = layers::conv_lwta_forward(act, l, v, mode, lw_noise)?;
                    act = out.output;
                    lwta.push((i, out));
                }
                (Layer::MaxPool, _) => act = act.max_pool_2x2()?,
                (Layer::Output(l), LayerVars::Output(v)) => {
                    if act.shape().len() != 2 {
                        act = act.reshape(&[batch, l.inputs()])?;
                    }
                    let eps = match layer_noise {
                        Some(LayerNoise::Output(e)) => Some(e),
                        _ => None,
                    };
                    act = layers::dense_output_layer(act, v, mode, eps)?;
                }
                _ => return Err(Error::Contract(format!("layer {i} is bound to the wrong parameters"))),
            }
        }
        Ok(ForwardPass { logits: act, lwta })
    }

    /// Deterministic class logits for a batch of images.
    pub fn predict_logits(&self, x: &Tensor) -> Result<Tensor> {
        let g = Graph::new();
        let bound = self.bind(&g, false);
        let pass = self.forward(&bound, g.constant(x.clone()), ForwardMode::Eval, None)?;
        let logits = pass.logits.value();
        Ok((*logits).clone())
    }

    /// Deterministic predicted labels.
    pub fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        let logits = self.predict_logits(x)?;
        let classes = self.classes();
        Ok(logits.data().chunks(classes).map(layers::argmax).collect())
    }
}
