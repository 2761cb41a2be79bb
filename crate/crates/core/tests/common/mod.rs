#![allow(dead_code)]

pub mod props;

use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sblwta::data::{load_mnist, Dataset};
use sblwta::model::{Architecture, LayerNoise, LayerSpec, Model};
use sblwta::stochastic::IbpPrior;
use sblwta::Tensor;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Dense network on flat inputs: `J → K×U LWTA → classes`.
pub fn tiny_arch(inputs: usize, blocks: usize, competitors: usize, classes: usize) -> Architecture {
    Architecture {
        input: [inputs, 1, 1],
        layers: vec![
            LayerSpec::DenseLwta {
                blocks,
                competitors,
                inputs: None,
            },
            LayerSpec::Output { classes },
        ],
    }
}

/// Small conv → pool → dense → output network on `6×6×2` inputs.
pub fn small_conv_arch() -> Architecture {
    Architecture {
        input: [6, 6, 2],
        layers: vec![
            LayerSpec::ConvLwta {
                kernels: 3,
                competitors: 2,
                size: 3,
                channels: None,
            },
            LayerSpec::MaxPool,
            LayerSpec::DenseLwta {
                blocks: 4,
                competitors: 2,
                inputs: None,
            },
            LayerSpec::Output { classes: 3 },
        ],
    }
}

pub fn model(arch: Architecture, seed: u64) -> Model {
    Model::new(arch, IbpPrior::default(), &mut rng(seed)).unwrap()
}

/// Moves every parameter by a random amount so the model is not at its initialization.
pub fn perturb(model: &mut Model, scale: f64, rng: &mut impl Rng) {
    for t in model.params_mut() {
        for v in t.data_mut() {
            *v += rng.gen_range(-scale..scale);
        }
    }
}

/// Sets every utility logit uniformly in `[lo, hi]`.
pub fn spread_utilities(model: &mut Model, lo: f64, hi: f64, rng: &mut impl Rng) {
    for layer in &mut model.layers {
        let logit = match layer {
            sblwta::model::Layer::Dense(l) => &mut l.utility.logit,
            sblwta::model::Layer::Conv(l) => &mut l.utility.logit,
            _ => continue,
        };
        for v in logit.data_mut() {
            *v = rng.gen_range(lo..hi);
        }
    }
}

pub fn random_images(n: usize, shape: [usize; 3], rng: &mut impl Rng) -> Tensor {
    let [h, w, c] = shape;
    Tensor::from_fn(&[n, h, w, c], |_| rng.gen::<f64>())
}

/// Restricts per-example noise (the winner Gumbel draws) to the examples in `idx`.
pub fn slice_noise(noise: &[LayerNoise], idx: &[usize]) -> Vec<LayerNoise> {
    noise
        .iter()
        .map(|n| match n {
            LayerNoise::Lwta(l) => {
                let s = l.xi_gumbel.shape();
                let per = s[1] * s[2];
                let mut data = Vec::with_capacity(idx.len() * per);
                for &i in idx {
                    data.extend_from_slice(&l.xi_gumbel.data()[i * per..(i + 1) * per]);
                }
                let mut l = l.clone();
                l.xi_gumbel = Tensor::new(&[idx.len(), s[1], s[2]], data).unwrap();
                LayerNoise::Lwta(l)
            }
            other => other.clone(),
        })
        .collect()
}

pub fn mnist_dir() -> PathBuf {
    std::env::var_os("MNIST_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("/root/data/mnist"))
}

/// The MNIST split, or `None` when the files are not installed.
pub fn mnist(split: &str) -> Option<Dataset> {
    load_mnist(&mnist_dir(), split).ok()
}

/// Two Gaussian clusters in 2-D on opposite sides of `x0 + x1 = 0`, with a margin.
pub fn separable_toy(n: usize, seed: u64) -> Dataset {
    let mut r = rng(seed);
    let mut data = Vec::with_capacity(2 * n);
    let mut labels = Vec::with_capacity(n);
    while labels.len() < n {
        let (a, b): (f64, f64) = (r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0));
        let s = a + b;
        if s.abs() < 0.3 {
            continue;
        }
        data.extend([a, b]);
        labels.push(usize::from(s > 0.0));
    }
    Dataset::new(Tensor::new(&[n, 2, 1, 1], data).unwrap(), labels).unwrap()
}
