//! Negative-ELBO assembly, ADAM and the minibatch training loop.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::layers::{self, ForwardMode};
use crate::model::{BoundModel, LayerNoise, LayerVars, Model};
use crate::stochastic;
use crate::tensor::Tensor;

/// Temperature is held fixed for this many steps between updates.
pub const ANNEAL_INTERVAL: u64 = 1000;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub lambda0: f64,
    pub lambda_min: f64,
    pub anneal_rate: f64,
    /// Size `N` used to scale the per-example terms; defaults to the training set size.
    pub dataset_size: Option<usize>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 128,
            epochs: 10,
            learning_rate: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            lambda0: 1.0,
            lambda_min: 0.5,
            anneal_rate: 1e-4,
            dataset_size: None,
            seed: 0,
        }
    }
}

fn positive(x: f64) -> bool {
    x > 0.0 && x.is_finite()
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.batch_size == 0 {
            return bad("batch size must be positive");
        }
        if !positive(self.learning_rate) {
            return bad("learning rate must be positive");
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return bad("ADAM betas must lie in [0, 1)");
        }
        if !positive(self.adam_eps) {
            return bad("ADAM epsilon must be positive");
        }
        if !positive(self.lambda_min) || !positive(self.lambda0) {
            return bad("temperatures must be positive");
        }
        if self.anneal_rate.is_nan() || self.anneal_rate < 0.0 {
            return bad("anneal rate must be non-negative");
        }
        Ok(())
    }
}

/// `λ = max(λ_min, λ0 · exp(−rate · s))` where `s` is `step` rounded down to the update interval.
pub fn anneal_temperature(step: u64, config: &TrainConfig) -> f64 {
    let s = (step / ANNEAL_INTERVAL) * ANNEAL_INTERVAL;
    (config.lambda0 * (-config.anneal_rate * s as f64).exp()).max(config.lambda_min)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

impl AdamState {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor>) -> Self {
        let (m, v) = params
            .into_iter()
            .map(|p| (Tensor::zeros(p.shape()), Tensor::zeros(p.shape())))
            .unzip();
        AdamState { m, v, step: 0 }
    }

    pub fn for_model(model: &Model) -> Self {
        AdamState::new(model.params().into_iter().map(|(_, _, t)| t))
    }
}

/// One bias-corrected ADAM update.
pub fn adam_step(params: &mut [&mut Tensor], grads: &[Tensor], state: &mut AdamState, config: &TrainConfig) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Contract(format!(
            "adam_step: {} parameters, {} gradients, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (config.adam_beta1, config.adam_beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for (i, p) in params.iter_mut().enumerate() {
        let g = &grads[i];
        if g.shape() != p.shape() {
            return Err(Error::dimension("adam_step", p.shape(), g.shape()));
        }
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (((w, &gj), mj), vj) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mj = b1 * *mj + (1.0 - b1) * gj;
            *vj = b2 * *vj + (1.0 - b2) * gj * gj;
            let m_hat = *mj / c1;
            let v_hat = *vj / c2;
            *w -= config.learning_rate * m_hat / (v_hat.sqrt() + config.adam_eps);
        }
    }
    Ok(())
}

/// Values of the individual loss terms, as they enter the loss.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossTerms {
    pub loss: f64,
    /// Scaled negative log-likelihood `(N/B) Σ CE`.
    pub nll: f64,
    pub kl_w: f64,
    pub kl_sticks: f64,
    pub kl_z: f64,
    /// Scaled winner KL `(N/B) Σ KL(ξ)`.
    pub kl_xi: f64,
    /// Misclassified examples of the batch under the sampled network.
    pub errors: usize,
}

pub struct Elbo<'g> {
    pub loss: Var<'g>,
    pub logits: Var<'g>,
    pub terms: LossTerms,
}

/// Summed cross-entropy of `softmax(logits)` against integer labels.
pub fn cross_entropy<'g>(logits: Var<'g>, labels: &[usize]) -> Result<Var<'g>> {
    let shape = logits.shape();
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(Error::dimension("cross_entropy", &shape, &[labels.len()]));
    }
    let classes = shape[1];
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::Contract(format!("label {bad} out of range for {classes} classes")));
    }
    let mut onehot = Tensor::zeros(&shape);
    for (i, &l) in labels.iter().enumerate() {
        onehot.data_mut()[i * classes + l] = 1.0;
    }
    let onehot = logits.graph().constant(onehot);
    Ok(logits.log_softmax().mul(onehot)?.sum().neg())
}

/// Negative ELBO of one minibatch with one Monte Carlo sample.
///
/// Per-example terms are scaled by `N/B`; weight, stick and utility KLs enter once.
pub fn elbo_minibatch<'g>(
    model: &Model,
    bound: &BoundModel<'g>,
    x: &Tensor,
    labels: &[usize],
    dataset_size: usize,
    noise: &[LayerNoise],
    lambda: f64,
) -> Result<Elbo<'g>> {
    let batch = labels.len();
    if batch == 0 {
        return Err(Error::Contract("empty minibatch".into()));
    }
    let g = match bound.layers.iter().find_map(|l| match l {
        LayerVars::Lwta(v) => Some(v.mu.graph()),
        LayerVars::Output(v) => Some(v.mu.graph()),
        LayerVars::None => None,
    }) {
        Some(g) => g,
        None => return Err(Error::Contract("model has no parameters".into())),
    };
    let pass = model.forward(bound, g.constant(x.clone()), ForwardMode::Train { lambda }, Some(noise))?;
    let ce = cross_entropy(pass.logits, labels)?;

    let mut per_example = ce;
    let mut global = g.scalar(0.0);
    let mut terms = LossTerms::default();
    let scale = dataset_size as f64 / batch as f64;
    for &(i, ref fwd) in &pass.lwta {
        let (LayerVars::Lwta(vars), LayerNoise::Lwta(n)) = (&bound.layers[i], &noise[i]) else {
            return Err(Error::Contract(format!("layer {i} lacks LWTA parameters or noise")));
        };
        let sticks = stochastic::sample_kumaraswamy(vars.log_a, vars.log_b, &n.stick_uniform)?;
        let kl = layers::layer_kl(vars, model.prior, sticks, fwd.winner_logits)?;
        terms.kl_w += kl.weights.value().item();
        terms.kl_sticks += kl.sticks.value().item();
        terms.kl_z += kl.utility.value().item();
        terms.kl_xi += scale * kl.winners.value().item();
        per_example = per_example.add(kl.winners)?;
        global = global.add(kl.weights)?.add(kl.sticks)?.add(kl.utility)?;
    }
    for (layer, vars) in model.layers.iter().zip(&bound.layers) {
        if let (crate::model::Layer::Output(_), LayerVars::Output(v)) = (layer, vars) {
            let kl = stochastic::kl_gaussian_std(v.mu, v.sigma_raw)?;
            terms.kl_w += kl.value().item();
            global = global.add(kl)?;
        }
    }
    let loss = per_example.scale(scale).add(global)?;
    terms.nll = scale * ce.value().item();
    terms.loss = loss.value().item();
    let classes = model.classes();
    terms.errors = pass
        .logits
        .value()
        .data()
        .chunks(classes)
        .zip(labels)
        .filter(|(row, &l)| layers::argmax(row) != l)
        .count();
    Ok(Elbo {
        loss,
        logits: pass.logits,
        terms,
    })
}

/// Fraction of misclassified examples under deterministic inference.
pub fn error_rate(model: &Model, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let mut wrong = 0;
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(500) {
        let (x, y) = data.batch(chunk);
        let pred = model.predict(&x)?;
        wrong += pred.iter().zip(&y).filter(|(p, l)| p != l).count();
    }
    Ok(wrong as f64 / data.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: u64,
    pub lambda: f64,
    pub terms: LossTerms,
}

/// One row of the metrics log.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub step: u64,
    /// Means over the epoch's steps.
    pub loss: f64,
    pub kl_w: f64,
    pub kl_sticks: f64,
    pub kl_z: f64,
    pub kl_xi: f64,
    pub train_err: f64,
    /// `NaN` when no evaluation set was given.
    pub test_err: f64,
    pub lambda: f64,
    /// Mean utility probability `π̃` of every LWTA layer.
    pub mean_utility: Vec<f64>,
}

pub const METRICS_HEADER: &str = "epoch,step,loss,kl_w,kl_sticks,kl_z,kl_xi,train_err,test_err,lambda";

impl EpochMetrics {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.epoch,
            self.step,
            self.loss,
            self.kl_w,
            self.kl_sticks,
            self.kl_z,
            self.kl_xi,
            self.train_err,
            self.test_err,
            self.lambda
        )
    }
}

#[derive(Clone, Debug, Default)]
pub struct TrainLog {
    pub epochs: Vec<EpochMetrics>,
    pub steps: Vec<StepRecord>,
    /// Optimizer state after the last completed step.
    pub adam: Option<AdamState>,
}

pub fn mean_utility(model: &Model) -> Vec<f64> {
    model
        .layers
        .iter()
        .filter_map(|l| match l {
            crate::model::Layer::Dense(d) => Some(d.utility.probs()),
            crate::model::Layer::Conv(c) => Some(c.utility.probs()),
            _ => None,
        })
        .map(|p| p.sum() / p.len() as f64)
        .collect()
}

/// Runs `config.epochs` epochs of shuffled minibatch training.
///
/// Training noise and shuffling come from one ChaCha8 stream seeded with `config.seed`,
/// so equal seeds give bit-identical runs. On a non-finite loss or gradient the model is
/// left at its last finite parameters and [`Error::Diverged`] is returned.
/// `on_epoch` sees every metrics row as soon as it is produced.
pub fn train(
    model: &mut Model,
    train_set: &Dataset,
    test_set: Option<&Dataset>,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<TrainLog> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(Error::Contract("empty training set".into()));
    }
    if train_set.image_shape() != model.arch.input {
        return Err(Error::dimension("train", &train_set.image_shape(), &model.arch.input));
    }
    let n_total = config.dataset_size.unwrap_or(train_set.len());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);
    let mut adam = AdamState::for_model(model);
    let mut log = TrainLog::default();
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut step: u64 = 0;

    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut sums = LossTerms::default();
        let mut count = 0usize;
        let mut lambda = anneal_temperature(step, config);
        for chunk in order.chunks(config.batch_size) {
            lambda = anneal_temperature(step, config);
            let (x, labels) = train_set.batch(chunk);
            let noise = model.sample_noise(chunk.len(), &mut rng);
            let g = Graph::new();
            let bound = model.bind(&g, true);
            let elbo = elbo_minibatch(model, &bound, &x, &labels, n_total, &noise, lambda)?;
            let diverged = |detail: String| Error::Diverged {
                epoch,
                step: step as usize,
                detail,
            };
            if !elbo.terms.loss.is_finite() {
                return Err(diverged(format!("{:?}", elbo.terms)));
            }
            let grads = g.backward(elbo.loss)?;
            let grads: Vec<Tensor> = bound.params().into_iter().map(|v| grads.get(v)).collect();
            if let Some(i) = grads.iter().position(|t| !t.all_finite()) {
                return Err(diverged(format!("non-finite gradient for parameter {i}")));
            }
            let backup: Vec<Tensor> = model.params().iter().map(|(_, _, t)| (*t).clone()).collect();
            adam_step(&mut model.params_mut(), &grads, &mut adam, config)?;
            if model.params().iter().any(|(_, _, t)| !t.all_finite()) {
                for (dst, src) in model.params_mut().into_iter().zip(backup) {
                    *dst = src;
                }
                return Err(diverged("parameters left the finite range".into()));
            }
            step += 1;
            let t = elbo.terms;
            sums.loss += t.loss;
            sums.kl_w += t.kl_w;
            sums.kl_sticks += t.kl_sticks;
            sums.kl_z += t.kl_z;
            sums.kl_xi += t.kl_xi;
            count += 1;
            log.steps.push(StepRecord {
                epoch,
                step,
                lambda,
                terms: t,
            });
        }
        let c = count.max(1) as f64;
        let row = EpochMetrics {
            epoch,
            step,
            loss: sums.loss / c,
            kl_w: sums.kl_w / c,
            kl_sticks: sums.kl_sticks / c,
            kl_z: sums.kl_z / c,
            kl_xi: sums.kl_xi / c,
            train_err: error_rate(model, train_set)?,
            test_err: match test_set {
                Some(t) => error_rate(model, t)?,
                None => f64::NAN,
            },
            lambda,
            mean_utility: mean_utility(model),
        };
        on_epoch(&row);
        log.epochs.push(row);
    }
    log.adam = Some(adam);
    Ok(log)
}
