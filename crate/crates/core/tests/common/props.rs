//! Property checks shared by the proptest suite and the acceptance run.

use proptest::prelude::*;
use proptest::test_runner::{Config, TestCaseError, TestRunner};
use rand::Rng;
use sblwta::checkpoint::{from_bytes, to_bytes, Checkpoint};
use sblwta::compress::{kept_counts, overlap_matrix, prune, WinnerStats};
use sblwta::graph::Graph;
use sblwta::layers::ForwardMode;
use sblwta::model::{Layer, Model};
use sblwta::special::kumaraswamy_beta_kl;
use sblwta::stochastic;
use sblwta::Tensor;

use super::{model, perturb, random_images, rng, small_conv_arch, spread_utilities};

type Check = std::result::Result<(), TestCaseError>;

fn trained_like(seed: u64) -> Model {
    let mut r = rng(seed ^ 0x5eed);
    let mut m = model(small_conv_arch(), seed);
    perturb(&mut m, 0.2, &mut r);
    spread_utilities(&mut m, -7.0, 3.0, &mut r);
    m
}

/// Softmax winner posteriors and their Concrete samples are probability vectors.
pub fn winner_simplex(seed: u64, batch: usize, lambda: f64) -> Check {
    let m = trained_like(seed);
    let mut r = rng(seed);
    let x = random_images(batch, m.arch.input, &mut r);
    let noise = m.sample_noise(batch, &mut r);
    let g = Graph::new();
    let bound = m.bind(&g, false);
    let pass = m
        .forward(&bound, g.constant(x), ForwardMode::Train { lambda }, Some(&noise))
        .unwrap();
    for (i, fwd) in &pass.lwta {
        let sblwta::model::LayerNoise::Lwta(n) = &noise[*i] else {
            unreachable!()
        };
        let posterior = fwd.winner_logits.softmax().value();
        let sample = stochastic::sample_concrete(fwd.winner_logits, lambda, &n.xi_gumbel)
            .unwrap()
            .value();
        let u = *posterior.shape().last().unwrap();
        for t in [&posterior, &sample] {
            for row in t.data().chunks(u) {
                prop_assert!(row.iter().all(|&p| (0.0..=1.0).contains(&p)));
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12, "{row:?}");
            }
        }
    }
    Ok(())
}

/// In eval mode each block (at each pixel, for conv layers) has at most one active unit.
pub fn eval_single_winner(seed: u64, batch: usize) -> Check {
    let m = trained_like(seed);
    let x = random_images(batch, m.arch.input, &mut rng(seed));
    let g = Graph::new();
    let bound = m.bind(&g, false);
    let pass = m.forward(&bound, g.constant(x), ForwardMode::Eval, None).unwrap();
    for (i, fwd) in &pass.lwta {
        let u = match &m.layers[*i] {
            Layer::Dense(l) => l.competitors,
            Layer::Conv(l) => l.competitors,
            _ => unreachable!(),
        };
        for block in fwd.output.value().data().chunks(u) {
            prop_assert!(block.iter().filter(|&&v| v != 0.0).count() <= 1, "{block:?}");
        }
    }
    Ok(())
}

/// `π_k = Π u_i` is non-increasing and stays in `[0, 1]`.
pub fn sticks_monotone(u: &[f64]) -> Check {
    let g = Graph::new();
    let pi = stochastic::sticks_to_pi(g.constant(Tensor::new(&[u.len()], u.to_vec()).unwrap())).value();
    let pi = pi.data();
    prop_assert!(pi.iter().all(|&p| (0.0..=1.0).contains(&p)));
    prop_assert!(pi.windows(2).all(|w| w[1] <= w[0]), "{pi:?}");
    Ok(())
}

pub fn prune_idempotent_and_monotone(seed: u64, tau_a: f64, tau_b: f64) -> Check {
    let m = trained_like(seed);
    let (lo, hi) = if tau_a <= tau_b { (tau_a, tau_b) } else { (tau_b, tau_a) };
    let (once, counts_lo) = prune(&m, lo);
    let (twice, _) = prune(&once, lo);
    prop_assert_eq!(&twice, &once);
    let (_, counts_hi) = prune(&m, hi);
    for (a, b) in counts_lo.iter().zip(&counts_hi) {
        prop_assert!(b.kept <= a.kept, "tau {lo} kept {}, tau {hi} kept {}", a.kept, b.kept);
    }
    let (_, none) = prune(&m, 0.0);
    prop_assert_eq!(none, kept_counts(&m));
    Ok(())
}

/// The pruned model equals the full model with the pruned components masked out.
pub fn masking_equivalence(seed: u64, tau: f64, inputs: usize) -> Check {
    let m = trained_like(seed);
    let (pruned, _) = prune(&m, tau);
    let mut masked = m.clone();
    for (dst, src) in masked.layers.iter_mut().zip(&pruned.layers) {
        match (dst, src) {
            (Layer::Dense(d), Layer::Dense(s)) => d.keep = s.keep.clone(),
            (Layer::Conv(d), Layer::Conv(s)) => d.keep = s.keep.clone(),
            _ => {}
        }
    }
    let x = random_images(inputs, m.arch.input, &mut rng(seed + 1));
    let a = pruned.predict_logits(&x).unwrap();
    let b = masked.predict_logits(&x).unwrap();
    for (p, q) in a.data().iter().zip(b.data()) {
        prop_assert!((p - q).abs() <= 1e-12, "{p} vs {q}");
    }
    Ok(())
}

pub fn checkpoint_round_trip(seed: u64) -> Check {
    let mut r = rng(seed);
    let (pruned, _) = prune(&trained_like(seed), r.gen_range(0.0..0.5));
    let mut ckpt = Checkpoint::new(pruned, seed);
    ckpt.step = r.gen();
    let bytes = to_bytes(&ckpt);
    let back = from_bytes(std::path::Path::new("mem"), &bytes).unwrap();
    for ((_, _, a), (_, _, b)) in ckpt.model.params().iter().zip(back.model.params()) {
        prop_assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
    prop_assert_eq!(back, ckpt);
    Ok(())
}

pub fn overlap_symmetric(seed: u64, blocks: usize, units: usize) -> Check {
    let mut r = rng(seed);
    let classes = 10;
    let mut probs: Vec<f64> = (0..classes * blocks * units).map(|_| r.gen()).collect();
    for row in probs.chunks_mut(units) {
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= s);
    }
    let stats = WinnerStats {
        layer: 0,
        classes,
        blocks,
        units,
        probs,
        class_counts: vec![1; classes],
    };
    let m = overlap_matrix(&stats);
    for a in 0..classes {
        prop_assert_eq!(m[a][a], 1.0);
        for b in 0..classes {
            prop_assert_eq!(m[a][b], m[b][a]);
            prop_assert!((0.0..=1.0).contains(&m[a][b]));
        }
    }
    Ok(())
}

/// Every KL contribution of a random network and batch is ≥ −1e-6.
pub fn kl_nonnegative(seed: u64, a: f64, b: f64, alpha: f64) -> Check {
    prop_assert!(kumaraswamy_beta_kl(a, b, alpha, 1.0, 10) >= -1e-6);
    let m = trained_like(seed);
    let mut r = rng(seed);
    let x = random_images(4, m.arch.input, &mut r);
    let noise = m.sample_noise(4, &mut r);
    let g = Graph::new();
    let bound = m.bind(&g, false);
    let labels = [0, 1, 2, 0];
    let elbo = sblwta::train::elbo_minibatch(&m, &bound, &x, &labels, 4, &noise, 0.7).unwrap();
    let t = elbo.terms;
    for (name, v) in [("w", t.kl_w), ("sticks", t.kl_sticks), ("z", t.kl_z), ("xi", t.kl_xi)] {
        prop_assert!(v >= -1e-6, "kl_{name} = {v}");
    }
    let q: f64 = r.gen();
    let p: f64 = r.gen();
    prop_assert!(stochastic::kl_bernoulli(q, p) >= -1e-6);
    Ok(())
}

fn run<S: Strategy>(cases: u32, strategy: S, test: impl Fn(S::Value) -> Check) -> Result<(), String> {
    let mut runner = TestRunner::new(Config {
        cases,
        failure_persistence: None,
        ..Config::default()
    });
    runner.run(&strategy, test).map_err(|e| e.to_string())
}

/// Runs every property with `cases` cases each; returns `(name, outcome)` pairs.
pub fn run_all(cases: u32) -> Vec<(&'static str, Result<(), String>)> {
    vec![
        ("winner probabilities are simplexes", run(cases, (any::<u64>(), 1usize..5, 0.05f64..2.0), |(s, b, l)| winner_simplex(s, b, l))),
        ("at most one eval winner per block", run(cases, (any::<u64>(), 1usize..5), |(s, b)| eval_single_winner(s, b))),
        ("sticks_to_pi is monotone", run(cases, prop::collection::vec(0.0f64..=1.0, 1..20), |u| sticks_monotone(&u))),
        ("prune idempotent and tau-monotone", run(cases, (any::<u64>(), 0.0f64..1.0, 0.0f64..1.0), |(s, a, b)| prune_idempotent_and_monotone(s, a, b))),
        ("masking equivalence on 100 inputs", run(cases.min(16), (any::<u64>(), 0.0f64..0.6), |(s, t)| masking_equivalence(s, t, 100))),
        ("checkpoint bit-exact round trip", run(cases, any::<u64>(), checkpoint_round_trip)),
        ("overlap symmetric with unit diagonal", run(cases, (any::<u64>(), 1usize..30, 2usize..5), |(s, b, u)| overlap_symmetric(s, b, u))),
        ("KL terms >= -1e-6", run(cases, (any::<u64>(), 0.05f64..10.0, 0.05f64..10.0, 0.05f64..10.0), |(s, a, b, al)| kl_nonnegative(s, a, b, al))),
    ]
}
