//! Dense and convolutional LWTA layers and the Bayesian output head.
//!
//! A dense layer maps `x ∈ R^J` to `K` blocks of `U` competing linear units.
//! Each input-to-block connection `(j, k)` carries a utility gate `z_{j,k}`
//! shared by all `U` weights of that connection; within a block exactly one
//! unit (the winner) passes its activation on. The convolutional variant treats
//! each kernel as a block of `U` competing feature maps and gates whole kernels.

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::stochastic::{
    self, GaussianWeightPosterior, IbpPrior, StickPosterior, UtilityPosterior,
};
use crate::tensor::Tensor;

/// Utility posteriors start near-active so nothing is pruned before the data speaks.
pub const INITIAL_UTILITY: f64 = 0.9;

/// How a forward pass treats the latent variables.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ForwardMode {
    /// Reparameterized samples of weights, relaxed gates and relaxed winners at temperature `lambda`.
    Train { lambda: f64 },
    /// Posterior means, the retained-component mask and hard argmax winners.
    Eval,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenseLwtaLayer {
    pub inputs: usize,
    pub blocks: usize,
    pub competitors: usize,
    /// `[J, K, U]`
    pub weights: GaussianWeightPosterior,
    /// `[J, K]`
    pub utility: UtilityPosterior,
    /// `[K]`
    pub sticks: StickPosterior,
    pub prior: IbpPrior,
    /// `[J, K]`, 1 for retained connection groups and 0 for pruned ones.
    pub keep: Tensor,
}

impl DenseLwtaLayer {
    pub fn new(
        inputs: usize,
        blocks: usize,
        competitors: usize,
        prior: IbpPrior,
        rng: &mut impl Rng,
    ) -> Self {
        let init_std = 1.0 / (inputs as f64).sqrt();
        DenseLwtaLayer {
            inputs,
            blocks,
            competitors,
            weights: GaussianWeightPosterior::init(&[inputs, blocks, competitors], init_std, rng),
            utility: UtilityPosterior::new(&[inputs, blocks], INITIAL_UTILITY),
            sticks: StickPosterior::new(blocks, blocks as f64, 1.0),
            prior,
            keep: Tensor::ones(&[inputs, blocks]),
        }
    }

    pub fn output_width(&self) -> usize {
        self.blocks * self.competitors
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvLwtaLayer {
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub channels: usize,
    pub kernels: usize,
    pub competitors: usize,
    /// `[h, l, C, K, U]`: the flattened last two axes are the output channels.
    pub weights: GaussianWeightPosterior,
    /// `[K]`
    pub utility: UtilityPosterior,
    /// `[K]`
    pub sticks: StickPosterior,
    pub prior: IbpPrior,
    /// `[K]`, 1 for retained kernels and 0 for pruned ones.
    pub keep: Tensor,
}

impl ConvLwtaLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        kernel_h: usize,
        kernel_w: usize,
        channels: usize,
        kernels: usize,
        competitors: usize,
        prior: IbpPrior,
        rng: &mut impl Rng,
    ) -> Self {
        let init_std = 1.0 / ((kernel_h * kernel_w * channels) as f64).sqrt();
        ConvLwtaLayer {
            kernel_h,
            kernel_w,
            channels,
            kernels,
            competitors,
            weights: GaussianWeightPosterior::init(
                &[kernel_h, kernel_w, channels, kernels, competitors],
                init_std,
                rng,
            ),
            utility: UtilityPosterior::new(&[kernels], INITIAL_UTILITY),
            sticks: StickPosterior::new(kernels, kernels as f64, 1.0),
            prior,
            keep: Tensor::ones(&[kernels]),
        }
    }

    pub fn output_channels(&self) -> usize {
        self.kernels * self.competitors
    }
}

/// Plain Bayesian linear classifier head with a point-estimated bias.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseOutputLayer {
    /// `[D, classes]`
    pub weights: GaussianWeightPosterior,
    /// `[classes]`
    pub bias: Tensor,
}

impl DenseOutputLayer {
    pub fn new(inputs: usize, classes: usize, rng: &mut impl Rng) -> Self {
        let init_std = 1.0 / (inputs as f64).sqrt();
        DenseOutputLayer {
            weights: GaussianWeightPosterior::init(&[inputs, classes], init_std, rng),
            bias: Tensor::zeros(&[classes]),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn classes(&self) -> usize {
        self.weights.shape()[1]
    }
}

/// Graph leaves for the parameters of one LWTA layer.
#[derive(Clone, Copy, Debug)]
pub struct LwtaVars<'g> {
    pub mu: Var<'g>,
    pub sigma_raw: Var<'g>,
    pub utility: Var<'g>,
    pub log_a: Var<'g>,
    pub log_b: Var<'g>,
}

impl<'g> LwtaVars<'g> {
    fn bind(
        g: &'g Graph,
        weights: &GaussianWeightPosterior,
        utility: &UtilityPosterior,
        sticks: &StickPosterior,
        trainable: bool,
    ) -> Self {
        let leaf = |t: &Tensor| {
            if trainable {
                g.param(t.clone())
            } else {
                g.constant(t.clone())
            }
        };
        LwtaVars {
            mu: leaf(&weights.mu),
            sigma_raw: leaf(&weights.sigma_raw),
            utility: leaf(&utility.logit),
            log_a: leaf(&sticks.log_a),
            log_b: leaf(&sticks.log_b),
        }
    }

    /// Leaves in checkpoint/optimizer order.
    pub fn to_vec(&self) -> Vec<Var<'g>> {
        vec![self.mu, self.sigma_raw, self.utility, self.log_a, self.log_b]
    }
}

#[derive(Clone, Copy, Debug)]
pub struct OutputVars<'g> {
    pub mu: Var<'g>,
    pub sigma_raw: Var<'g>,
    pub bias: Var<'g>,
}

impl<'g> OutputVars<'g> {
    pub fn to_vec(&self) -> Vec<Var<'g>> {
        vec![self.mu, self.sigma_raw, self.bias]
    }
}

impl DenseLwtaLayer {
    pub fn bind<'g>(&self, g: &'g Graph, trainable: bool) -> LwtaVars<'g> {
        LwtaVars::bind(g, &self.weights, &self.utility, &self.sticks, trainable)
    }
}

impl ConvLwtaLayer {
    pub fn bind<'g>(&self, g: &'g Graph, trainable: bool) -> LwtaVars<'g> {
        LwtaVars::bind(g, &self.weights, &self.utility, &self.sticks, trainable)
    }
}

impl DenseOutputLayer {
    pub fn bind<'g>(&self, g: &'g Graph, trainable: bool) -> OutputVars<'g> {
        let leaf = |t: &Tensor| {
            if trainable {
                g.param(t.clone())
            } else {
                g.constant(t.clone())
            }
        };
        OutputVars {
            mu: leaf(&self.weights.mu),
            sigma_raw: leaf(&self.weights.sigma_raw),
            bias: leaf(&self.bias),
        }
    }
}

/// Noise for one training step of an LWTA layer, drawn outside the graph.
#[derive(Clone, Debug, PartialEq)]
pub struct LwtaNoise {
    /// Standard normal, shaped like the weights.
    pub weight_eps: Tensor,
    /// Uniform, shaped like the utility posterior; one draw per minibatch.
    pub z_uniform: Tensor,
    /// Uniform, one per stick.
    pub stick_uniform: Tensor,
    /// Gumbel `[B, K, U]`, independent per example.
    pub xi_gumbel: Tensor,
}

/// Result of an LWTA forward pass.
#[derive(Clone, Copy, Debug)]
pub struct LwtaForward<'g> {
    /// Layer output: `[B, K·U]` (dense) or `[B, H, L, K·U]` (conv).
    pub output: Var<'g>,
    /// Winner logits `[B, K, U]`; their softmax is the winner posterior.
    pub winner_logits: Var<'g>,
}

fn check_input(op: &'static str, x: &Var<'_>, expected: &[usize]) -> Result<()> {
    let shape = x.shape();
    let tail = &shape[1.min(shape.len())..];
    if shape.len() != expected.len() + 1 || tail != expected {
        return Err(Error::dimension(op, &shape, expected));
    }
    Ok(())
}

/// One-hot of the per-row argmax over the last axis (first index wins ties).
pub fn hard_winners(logits: &Tensor) -> Tensor {
    let u = *logits.shape().last().unwrap_or(&1);
    let mut out = Tensor::zeros(logits.shape());
    for (row, dst) in logits.data().chunks(u).zip(out.data_mut().chunks_mut(u)) {
        dst[argmax(row)] = 1.0;
    }
    out
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Per-block unit activations `Σ_j w_{j,k,u} z_{j,k} x_j`, shaped `[B, K, U]`.
pub fn dense_winner_logits<'g>(x: Var<'g>, w: Var<'g>, z: Var<'g>) -> Result<Var<'g>> {
    let (ws, zs, xs) = (w.shape(), z.shape(), x.shape());
    if ws.len() != 3 || zs != ws[..2] || xs.len() != 2 || xs[1] != ws[0] {
        return Err(Error::dimension("dense_winner_logits", &xs, &ws));
    }
    let (j, k, u) = (ws[0], ws[1], ws[2]);
    let gated = w.mul(z.reshape(&[j, k, 1])?)?.reshape(&[j, k * u])?;
    x.matmul(gated)?.reshape(&[xs[0], k, u])
}

/// Winner posterior of Eq.-style block competition: softmax over the `U` units of every block.
pub fn dense_winner_probs<'g>(x: Var<'g>, w: Var<'g>, z: Var<'g>) -> Result<Var<'g>> {
    Ok(dense_winner_logits(x, w, z)?.softmax())
}

/// Relaxed (train) or hard (eval) winner indicators for `logits`.
fn winners<'g>(
    logits: Var<'g>,
    mode: ForwardMode,
    gumbel: Option<&Tensor>,
) -> Result<Var<'g>> {
    match mode {
        ForwardMode::Train { lambda } => {
            let gumbel = gumbel.ok_or_else(|| Error::Contract("train mode needs noise".into()))?;
            stochastic::sample_concrete(logits, lambda, gumbel)
        }
        ForwardMode::Eval => Ok(logits.graph().constant(hard_winners(&logits.value()))),
    }
}

/// Sampled (train) or mean (eval) weights and gates.
fn weights_and_gates<'g>(
    vars: &LwtaVars<'g>,
    keep: &Tensor,
    mode: ForwardMode,
    noise: Option<&LwtaNoise>,
) -> Result<(Var<'g>, Var<'g>)> {
    let g = vars.mu.graph();
    let keep = g.constant(keep.clone());
    match mode {
        ForwardMode::Train { lambda } => {
            let noise = noise.ok_or_else(|| Error::Contract("train mode needs noise".into()))?;
            let w = stochastic::sample_gaussian(vars.mu, vars.sigma_raw, &noise.weight_eps)?;
            let z = stochastic::sample_binary_concrete(vars.utility, lambda, &noise.z_uniform)?;
            Ok((w, z.mul(keep)?))
        }
        ForwardMode::Eval => Ok((vars.mu, keep)),
    }
}

pub fn dense_lwta_forward<'g>(
    x: Var<'g>,
    layer: &DenseLwtaLayer,
    vars: &LwtaVars<'g>,
    mode: ForwardMode,
    noise: Option<&LwtaNoise>,
) -> Result<LwtaForward<'g>> {
    check_input("dense_lwta_forward", &x, &[layer.inputs])?;
    let (w, z) = weights_and_gates(vars, &layer.keep, mode, noise)?;
    let logits = dense_winner_logits(x, w, z)?;
    let xi = winners(logits, mode, noise.map(|n| &n.xi_gumbel))?;
    let batch = x.shape()[0];
    let output = xi.mul(logits)?.reshape(&[batch, layer.output_width()])?;
    Ok(LwtaForward {
        output,
        winner_logits: logits,
    })
}

/// Gated convolution outputs `[B, H, L, K·U]` and their spatial sums `[B, K, U]`.
fn conv_maps_and_logits<'g>(
    x: Var<'g>,
    layer: &ConvLwtaLayer,
    w: Var<'g>,
    z: Var<'g>,
) -> Result<(Var<'g>, Var<'g>)> {
    let xs = x.shape();
    if xs.len() != 4 || xs[3] != layer.channels {
        return Err(Error::dimension("conv_lwta", &xs, w.shape().as_slice()));
    }
    let (k, u) = (layer.kernels, layer.competitors);
    let (b, h, l) = (xs[0], xs[1], xs[2]);
    let kernel = w
        .mul(z.reshape(&[k, 1])?)?
        .reshape(&[layer.kernel_h, layer.kernel_w, layer.channels, k * u])?;
    let maps = x.conv2d(kernel)?;
    let logits = maps
        .reshape(&[b, h * l, k * u])?
        .sum_axis(1)?
        .reshape(&[b, k, u])?;
    Ok((maps, logits))
}

/// Winner posterior of each kernel from the spatially summed feature maps.
pub fn conv_winner_probs<'g>(
    x: Var<'g>,
    layer: &ConvLwtaLayer,
    w: Var<'g>,
    z: Var<'g>,
) -> Result<Var<'g>> {
    Ok(conv_maps_and_logits(x, layer, w, z)?.1.softmax())
}

pub fn conv_lwta_forward<'g>(
    x: Var<'g>,
    layer: &ConvLwtaLayer,
    vars: &LwtaVars<'g>,
    mode: ForwardMode,
    noise: Option<&LwtaNoise>,
) -> Result<LwtaForward<'g>> {
    let (w, z) = weights_and_gates(vars, &layer.keep, mode, noise)?;
    let (maps, logits) = conv_maps_and_logits(x, layer, w, z)?;
    let xi = winners(logits, mode, noise.map(|n| &n.xi_gumbel))?;
    let shape = maps.shape();
    let (b, pixels, channels) = (shape[0], shape[1] * shape[2], shape[3]);
    let gated = maps
        .reshape(&[b, pixels, channels])?
        .mul(xi.reshape(&[b, 1, channels])?)?
        .reshape(&shape)?;
    Ok(LwtaForward {
        output: gated,
        winner_logits: logits,
    })
}

/// Class logits `x · W + bias` with sampled (train) or mean (eval) weights.
pub fn dense_output_layer<'g>(
    x: Var<'g>,
    vars: &OutputVars<'g>,
    mode: ForwardMode,
    weight_eps: Option<&Tensor>,
) -> Result<Var<'g>> {
    let w = match mode {
        ForwardMode::Train { .. } => {
            let eps = weight_eps.ok_or_else(|| Error::Contract("train mode needs noise".into()))?;
            stochastic::sample_gaussian(vars.mu, vars.sigma_raw, eps)?
        }
        ForwardMode::Eval => vars.mu,
    };
    x.matmul(w)?.add(vars.bias)
}

/// KL contributions of one LWTA layer.
#[derive(Clone, Copy, Debug)]
pub struct LayerKl<'g> {
    pub weights: Var<'g>,
    pub sticks: Var<'g>,
    pub utility: Var<'g>,
    /// Summed over the examples of the batch.
    pub winners: Var<'g>,
}

/// Term-by-term KL of an LWTA layer under the mean-field posterior.
///
/// `stick_sample` is one Kumaraswamy draw per stick; the utility KL compares
/// every `π̃` against the stick-breaking weight of its block.
pub fn layer_kl<'g>(
    vars: &LwtaVars<'g>,
    prior: IbpPrior,
    stick_sample: Var<'g>,
    winner_logits: Var<'g>,
) -> Result<LayerKl<'g>> {
    let pi = stochastic::sticks_to_pi(stick_sample);
    Ok(LayerKl {
        weights: stochastic::kl_gaussian_std(vars.mu, vars.sigma_raw)?,
        sticks: stochastic::kl_kumaraswamy_beta(vars.log_a, vars.log_b, prior)?,
        utility: stochastic::kl_bernoulli_sum(vars.utility, pi)?,
        winners: stochastic::kl_categorical_uniform(winner_logits),
    })
}
