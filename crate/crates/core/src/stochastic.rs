//! Reparameterized samplers and KL divergences used by the variational objective.
//!
//! Noise never originates here: every sampler takes its uniform, Gaussian or
//! Gumbel draws as an explicit tensor, so a training step is a pure function
//! of parameters and noise.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::graph::Var;
use crate::special::{self, softplus_inv};
use crate::tensor::Tensor;

/// Uniform draws are clamped into `[UNIFORM_EPS, 1 - UNIFORM_EPS]` before any log.
pub const UNIFORM_EPS: f64 = 1e-7;

/// Probabilities entering a Bernoulli KL are clamped to the same interval.
pub const PROB_EPS: f64 = 1e-7;

/// Truncation of the Kumaraswamy–Beta KL series.
pub const KL_SERIES_TERMS: usize = 10;

/// Initial posterior standard deviation of every weight.
pub const INITIAL_SIGMA: f64 = 0.05;

/// Factorized Gaussian posterior over a weight tensor; `σ = softplus(sigma_raw)`.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianWeightPosterior {
    pub mu: Tensor,
    pub sigma_raw: Tensor,
}

impl GaussianWeightPosterior {
    /// Means drawn from `N(0, init_std²)`, every σ at [`INITIAL_SIGMA`].
    pub fn init(shape: &[usize], init_std: f64, rng: &mut impl Rng) -> Self {
        let mu = Tensor::from_fn(shape, |_| init_std * rng.sample::<f64, _>(StandardNormal));
        Self::with_sigma(mu, INITIAL_SIGMA)
    }

    pub fn with_sigma(mu: Tensor, sigma: f64) -> Self {
        let sigma_raw = Tensor::full(mu.shape(), softplus_inv(sigma));
        GaussianWeightPosterior { mu, sigma_raw }
    }

    pub fn shape(&self) -> &[usize] {
        self.mu.shape()
    }

    pub fn sigma(&self) -> Tensor {
        self.sigma_raw.map(special::softplus)
    }

    pub fn variance(&self) -> Tensor {
        self.sigma_raw.map(|r| special::softplus(r).powi(2))
    }
}

/// Kumaraswamy posteriors over the stick variables, stored in log space.
#[derive(Clone, Debug, PartialEq)]
pub struct StickPosterior {
    pub log_a: Tensor,
    pub log_b: Tensor,
}

impl StickPosterior {
    pub fn new(count: usize, a: f64, b: f64) -> Self {
        StickPosterior {
            log_a: Tensor::full(&[count], a.ln()),
            log_b: Tensor::full(&[count], b.ln()),
        }
    }

    pub fn len(&self) -> usize {
        self.log_a.len()
    }

    pub fn is_empty(&self) -> bool {
        self.log_a.is_empty()
    }
}

/// Bernoulli inclusion posteriors, `π̃ = sigmoid(logit)`.
#[derive(Clone, Debug, PartialEq)]
pub struct UtilityPosterior {
    pub logit: Tensor,
}

impl UtilityPosterior {
    pub fn new(shape: &[usize], prob: f64) -> Self {
        UtilityPosterior {
            logit: Tensor::full(shape, special::logit(prob)),
        }
    }

    pub fn probs(&self) -> Tensor {
        self.logit.map(special::sigmoid)
    }
}

/// Stick-breaking IBP prior: `u_k ~ Beta(alpha, beta)`, with `beta` fixed at 1.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IbpPrior {
    pub alpha: f64,
    pub beta: f64,
}

impl IbpPrior {
    pub fn new(alpha: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(Error::Contract(format!("IBP alpha must be positive, got {alpha}")));
        }
        Ok(IbpPrior { alpha, beta: 1.0 })
    }
}

impl Default for IbpPrior {
    fn default() -> Self {
        IbpPrior {
            alpha: 1.0,
            beta: 1.0,
        }
    }
}

fn check_shape(op: &'static str, var: &Var<'_>, noise: &Tensor) -> Result<()> {
    let shape = var.shape();
    if shape != noise.shape() {
        return Err(Error::dimension(op, &shape, noise.shape()));
    }
    Ok(())
}

fn check_temperature(lambda: f64) -> Result<()> {
    if lambda > 0.0 && lambda.is_finite() {
        Ok(())
    } else {
        Err(Error::Contract(format!("temperature must be positive, got {lambda}")))
    }
}

pub fn clamp_uniform(u: f64) -> f64 {
    u.clamp(UNIFORM_EPS, 1.0 - UNIFORM_EPS)
}

/// `G = -log(-log U)` with `U` clamped.
pub fn gumbel_from_uniform(u: &Tensor) -> Tensor {
    u.map(|v| -(-clamp_uniform(v).ln()).ln())
}

/// `log U - log(1 - U)` with `U` clamped: the logistic noise of a binary Concrete.
pub fn logistic_from_uniform(u: &Tensor) -> Tensor {
    u.map(|v| {
        let v = clamp_uniform(v);
        v.ln() - (-v).ln_1p()
    })
}

/// `w = μ + softplus(sigma_raw) ⊙ ε`.
pub fn sample_gaussian<'g>(mu: Var<'g>, sigma_raw: Var<'g>, eps: &Tensor) -> Result<Var<'g>> {
    check_shape("sample_gaussian", &mu, eps)?;
    let eps = mu.graph().constant(eps.clone());
    mu.add(sigma_raw.softplus().mul(eps)?)
}

/// `Σ ½(σ² + μ² − 1 − ln σ²)`: KL of the weight posterior from `N(0, 1)`.
pub fn kl_gaussian_std<'g>(mu: Var<'g>, sigma_raw: Var<'g>) -> Result<Var<'g>> {
    let sigma = sigma_raw.softplus();
    let var = sigma.mul(sigma)?;
    let log_var = sigma.log().scale(2.0);
    let n = mu.value().len() as f64;
    Ok(var
        .add(mu.mul(mu)?)?
        .sub(log_var)?
        .sum()
        .add_scalar(-n)
        .scale(0.5))
}

/// `u = (1 − (1 − X)^{1/b})^{1/a}` with `a = exp(log_a)`, `b = exp(log_b)`.
pub fn sample_kumaraswamy<'g>(log_a: Var<'g>, log_b: Var<'g>, uniform: &Tensor) -> Result<Var<'g>> {
    check_shape("sample_kumaraswamy", &log_a, uniform)?;
    let g = log_a.graph();
    let log_one_minus = g.constant(uniform.map(|x| (-clamp_uniform(x)).ln_1p()));
    let inv_b = log_b.neg().exp();
    let tail = inv_b.mul(log_one_minus)?.exp();
    let inv_a = log_a.neg().exp();
    Ok(inv_a.mul(tail.rsub_scalar(1.0).log())?.exp())
}

/// Summed KL(Kumaraswamy(a, b) ‖ Beta(α, β)) over all sticks.
pub fn kl_kumaraswamy_beta<'g>(log_a: Var<'g>, log_b: Var<'g>, prior: IbpPrior) -> Result<Var<'g>> {
    log_a.kumaraswamy_beta_kl(log_b, prior.alpha, prior.beta, KL_SERIES_TERMS)
}

/// Stick-breaking weights `π_k = Π_{i ≤ k} u_i`.
pub fn sticks_to_pi(u: Var<'_>) -> Var<'_> {
    u.cumprod()
}

/// Concrete relaxation over the last axis: `softmax((log η + G) / λ)`.
pub fn sample_concrete<'g>(log_eta: Var<'g>, lambda: f64, gumbel: &Tensor) -> Result<Var<'g>> {
    check_temperature(lambda)?;
    check_shape("sample_concrete", &log_eta, gumbel)?;
    let noise = log_eta.graph().constant(gumbel.clone());
    Ok(log_eta.add(noise)?.scale(1.0 / lambda).softmax())
}

/// Binary Concrete relaxation: `sigmoid((logit + log U − log(1 − U)) / λ)`.
pub fn sample_binary_concrete<'g>(logit: Var<'g>, lambda: f64, uniform: &Tensor) -> Result<Var<'g>> {
    check_temperature(lambda)?;
    check_shape("sample_binary_concrete", &logit, uniform)?;
    let noise = logit.graph().constant(logistic_from_uniform(uniform));
    Ok(logit.add(noise)?.scale(1.0 / lambda).sigmoid())
}

/// `Σ q log(q / p)` with `0 log 0 = 0`.
pub fn kl_categorical(q: &[f64], p: &[f64]) -> Result<f64> {
    if q.len() != p.len() {
        return Err(Error::dimension("kl_categorical", &[q.len()], &[p.len()]));
    }
    for (name, v) in [("q", q), ("p", p)] {
        let total: f64 = v.iter().sum();
        if (total - 1.0).abs() > 1e-9 || v.iter().any(|&x| !(0.0..=1.0).contains(&x)) {
            return Err(Error::Contract(format!(
                "kl_categorical: {name} is not a probability vector (sum {total})"
            )));
        }
    }
    Ok(q.iter()
        .zip(p)
        .filter(|(&qi, _)| qi > 0.0)
        .map(|(&qi, &pi)| qi * (qi / pi).ln())
        .sum())
}

/// Summed KL of `softmax(logits)` rows from the uniform distribution over the last axis.
pub fn kl_categorical_uniform(logits: Var<'_>) -> Var<'_> {
    let classes = *logits.shape().last().unwrap_or(&1) as f64;
    let log_q = logits.log_softmax();
    let q = log_q.exp();
    let rows = (logits.value().len() as f64 / classes).round();
    // Σ q (log q + log U) = Σ q log q + rows · log U
    q.mul(log_q)
        .expect("same shape")
        .sum()
        .add_scalar(rows * classes.ln())
}

/// `q log(q/p) + (1 − q) log((1 − q)/(1 − p))` with both probabilities clamped.
pub fn kl_bernoulli(q: f64, p: f64) -> f64 {
    let q = q.clamp(PROB_EPS, 1.0 - PROB_EPS);
    let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
    q * (q / p).ln() + (1.0 - q) * ((1.0 - q) / (1.0 - p)).ln()
}

/// Summed Bernoulli KL of `sigmoid(q_logit)` from `p`, broadcasting `p` over `q_logit`.
pub fn kl_bernoulli_sum<'g>(q_logit: Var<'g>, p: Var<'g>) -> Result<Var<'g>> {
    let (lo, hi) = (PROB_EPS, 1.0 - PROB_EPS);
    let q = q_logit.sigmoid().clamp(lo, hi);
    let q_c = q.rsub_scalar(1.0);
    let p = p.clamp(lo, hi);
    let p_c = p.rsub_scalar(1.0);
    let on = q.mul(q.log().sub(p.log())?)?;
    let off = q_c.mul(q_c.log().sub(p_c.log())?)?;
    Ok(on.add(off)?.sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Graph;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn vec_of(t: &Tensor) -> Vec<f64> {
        t.data().to_vec()
    }

    #[test]
    fn gaussian_affine_cases() {
        let g = Graph::new();
        let mu = g.param(Tensor::new(&[2], vec![0.0, 2.0]).unwrap());
        let raw = g.param(Tensor::new(&[2], vec![softplus_inv(1.0), softplus_inv(0.5)]).unwrap());
        let w = sample_gaussian(mu, raw, &Tensor::new(&[2], vec![0.0, 1.0]).unwrap()).unwrap();
        let w = vec_of(&w.value());
        assert_eq!(w[0], 0.0);
        assert!((w[1] - 2.5).abs() < 1e-12);
    }

    #[test]
    fn gaussian_shape_mismatch() {
        let g = Graph::new();
        let mu = g.param(Tensor::zeros(&[3]));
        let raw = g.param(Tensor::zeros(&[3]));
        assert!(sample_gaussian(mu, raw, &Tensor::zeros(&[4])).is_err());
    }

    #[test]
    fn gaussian_monte_carlo_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let n = 100_000;
        let eps = Tensor::from_fn(&[n], |_| rng.sample::<f64, _>(StandardNormal));
        let g = Graph::new();
        let mu = g.constant(Tensor::full(&[n], 1.0));
        let raw = g.constant(Tensor::full(&[n], softplus_inv(2.0)));
        let w = sample_gaussian(mu, raw, &eps).unwrap().value();
        let mean = w.sum() / n as f64;
        let var = w.data().iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        assert!((mean - 1.0).abs() < 0.02, "mean {mean}");
        assert!((var - 4.0).abs() < 0.1, "var {var}");
    }

    fn kl_gauss_value(mu: f64, sigma: f64) -> f64 {
        let g = Graph::new();
        let m = g.constant(Tensor::scalar(mu));
        let r = g.constant(Tensor::scalar(softplus_inv(sigma)));
        kl_gaussian_std(m, r).unwrap().value().item()
    }

    #[test]
    fn gaussian_kl_closed_form_cases() {
        assert!(kl_gauss_value(0.0, 1.0).abs() < 1e-12);
        assert!((kl_gauss_value(1.0, 1.0) - 0.5).abs() < 1e-12);
    }

    /// Physicists' Gauss–Hermite nodes and weights by Newton iteration on H_n.
    fn gauss_hermite(n: usize) -> Vec<(f64, f64)> {
        let mut out: Vec<(f64, f64)> = Vec::with_capacity(n);
        let pim4 = std::f64::consts::PI.powf(-0.25);
        let mut z = 0.0;
        for i in 0..n.div_ceil(2) {
            z = match i {
                0 => (2.0 * n as f64 + 1.0).sqrt() - 1.85575 * (2.0 * n as f64 + 1.0).powf(-1.0 / 6.0),
                1 => z - 1.14 * (n as f64).powf(0.426) / z,
                2 => 1.86 * z - 0.86 * out[0].0,
                3 => 1.91 * z - 0.91 * out[2].0,
                _ => 2.0 * z - out[2 * (i - 2)].0,
            };
            let mut pp = 0.0;
            for _ in 0..100 {
                let (mut p1, mut p2) = (pim4, 0.0);
                for j in 0..n {
                    let p3 = p2;
                    p2 = p1;
                    p1 = z * (2.0 / (j as f64 + 1.0)).sqrt() * p2 - (j as f64 / (j as f64 + 1.0)).sqrt() * p3;
                }
                pp = (2.0 * n as f64).sqrt() * p2;
                let step = p1 / pp;
                z -= step;
                if step.abs() < 1e-15 {
                    break;
                }
            }
            let w = 2.0 / (pp * pp);
            out.push((z, w));
            out.push((-z, w));
        }
        out.truncate(n);
        out
    }

    /// E_q[log q(x) − log p(x)] with x = μ + √2 σ t.
    fn kl_gauss_quadrature(mu: f64, sigma: f64) -> f64 {
        let ln2pi = (2.0 * std::f64::consts::PI).ln();
        gauss_hermite(20)
            .into_iter()
            .map(|(t, w)| {
                let x = mu + std::f64::consts::SQRT_2 * sigma * t;
                let log_q = -0.5 * ln2pi - sigma.ln() - 0.5 * ((x - mu) / sigma).powi(2);
                let log_p = -0.5 * ln2pi - 0.5 * x * x;
                w / std::f64::consts::PI.sqrt() * (log_q - log_p)
            })
            .sum()
    }

    #[test]
    fn gauss_hermite_weights_integrate_constants() {
        let total: f64 = gauss_hermite(20).iter().map(|(_, w)| w).sum();
        assert!((total - std::f64::consts::PI.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn gaussian_kl_matches_quadrature() {
        for &mu in &[-1.5, 0.0, 0.3, 2.0] {
            for &sigma in &[0.05, 0.4, 1.0, 2.5] {
                let (a, b) = (kl_gauss_value(mu, sigma), kl_gauss_quadrature(mu, sigma));
                assert!((a - b).abs() < 1e-6, "mu={mu} sigma={sigma}: {a} vs {b}");
            }
        }
    }

    fn kumaraswamy_value(a: f64, b: f64, x: f64) -> f64 {
        let g = Graph::new();
        let la = g.constant(Tensor::scalar(a.ln()));
        let lb = g.constant(Tensor::scalar(b.ln()));
        sample_kumaraswamy(la, lb, &Tensor::scalar(x)).unwrap().value().item()
    }

    #[test]
    fn kumaraswamy_special_cases() {
        assert!((kumaraswamy_value(1.0, 1.0, 0.3) - 0.3).abs() < 1e-12);
        assert!((kumaraswamy_value(2.0, 1.0, 0.75) - 0.866_025_403_784_438_6).abs() < 1e-9);
    }

    #[test]
    fn kumaraswamy_extreme_uniforms_stay_finite() {
        for &x in &[0.0, 1.0] {
            let u = kumaraswamy_value(3.0, 0.5, x);
            assert!(u.is_finite() && (0.0..=1.0).contains(&u));
        }
    }

    #[test]
    fn sticks_to_pi_cases() {
        let g = Graph::new();
        let pi = sticks_to_pi(g.constant(Tensor::new(&[2], vec![0.5, 0.5]).unwrap()));
        assert_eq!(vec_of(&pi.value()), vec![0.5, 0.25]);

        let near_one = Tensor::full(&[6], 1.0 - 1e-7);
        let pi = sticks_to_pi(g.constant(near_one)).value();
        assert!(pi.data().windows(2).all(|w| w[1] <= w[0]));
        assert!(pi.data().iter().all(|&p| (p - 1.0).abs() < 1e-5));
    }

    #[test]
    fn sticks_to_pi_matches_left_fold() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let u: Vec<f64> = (0..8).map(|_| rng.gen_range(0.01..0.99)).collect();
        let g = Graph::new();
        let pi = sticks_to_pi(g.constant(Tensor::new(&[8], u.clone()).unwrap())).value();
        let mut acc = 1.0;
        for (k, &uk) in u.iter().enumerate() {
            acc *= uk;
            assert_eq!(pi.data()[k], acc);
        }
    }

    fn concrete(log_eta: &[f64], gumbel: &[f64], lambda: f64) -> Vec<f64> {
        let g = Graph::new();
        let n = log_eta.len();
        let le = g.constant(Tensor::new(&[n], log_eta.to_vec()).unwrap());
        let noise = Tensor::new(&[n], gumbel.to_vec()).unwrap();
        vec_of(&sample_concrete(le, lambda, &noise).unwrap().value())
    }

    #[test]
    fn concrete_cases() {
        assert_eq!(concrete(&[0.0, 0.0], &[0.0, 0.0], 1.0), vec![0.5, 0.5]);
        let x = concrete(&[1.0, 0.0], &[0.0, 0.0], 0.5);
        assert!((x[0] - 0.880_797_077_977_882_3).abs() < 1e-12);
        assert!((x[1] - 0.119_202_922_022_117_7).abs() < 1e-12);
    }

    #[test]
    fn concrete_rejects_nonpositive_temperature() {
        let g = Graph::new();
        let le = g.constant(Tensor::zeros(&[2]));
        assert!(sample_concrete(le, 0.0, &Tensor::zeros(&[2])).is_err());
    }

    #[test]
    fn concrete_argmax_follows_perturbed_logits() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..200 {
            let le: Vec<f64> = (0..4).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let gu = gumbel_from_uniform(&Tensor::from_fn(&[4], |_| rng.gen::<f64>()));
            let target = argmax(&le.iter().zip(gu.data()).map(|(a, b)| a + b).collect::<Vec<_>>());
            for &lambda in &[5.0, 1.0, 0.1, 1e-3] {
                assert_eq!(argmax(&concrete(&le, gu.data(), lambda)), target);
            }
        }
    }

    fn argmax(v: &[f64]) -> usize {
        v.iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &x)| if x > bv { (i, x) } else { (bi, bv) })
            .0
    }

    #[test]
    fn binary_concrete_cases() {
        let value = |logit: f64, u: f64, lambda: f64| {
            let g = Graph::new();
            let l = g.constant(Tensor::scalar(logit));
            sample_binary_concrete(l, lambda, &Tensor::scalar(u)).unwrap().value().item()
        };
        for &lambda in &[0.1, 1.0, 3.0] {
            assert!((value(0.0, 0.5, lambda) - 0.5).abs() < 1e-15);
        }
        assert!((value(2.0, 0.5, 1.0) - 0.880_797_077_977_882_3).abs() < 1e-12);
    }

    #[test]
    fn binary_concrete_monte_carlo() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let n = 100_000;
        let logit = 0.8;
        let u = Tensor::from_fn(&[n], |_| rng.gen::<f64>());
        let g = Graph::new();
        let l = g.constant(Tensor::full(&[n], logit));
        let s = sample_binary_concrete(l, 0.5, &u).unwrap().value();
        let frac = s.data().iter().filter(|&&v| v > 0.5).count() as f64 / n as f64;
        assert!((frac - special::sigmoid(logit)).abs() < 0.01, "{frac}");
    }

    #[test]
    fn categorical_kl_cases() {
        assert_eq!(kl_categorical(&[0.3, 0.7], &[0.3, 0.7]).unwrap(), 0.0);
        let v = kl_categorical(&[1.0, 0.0], &[0.5, 0.5]).unwrap();
        assert!((v - std::f64::consts::LN_2).abs() < 1e-12);
        assert!(matches!(
            kl_categorical(&[0.6, 0.6], &[0.5, 0.5]),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn categorical_kl_matches_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(30);
        for _ in 0..50 {
            let raw_q: Vec<f64> = (0..5).map(|_| rng.gen_range(0.01..1.0)).collect();
            let raw_p: Vec<f64> = (0..5).map(|_| rng.gen_range(0.01..1.0)).collect();
            let (sq, sp): (f64, f64) = (raw_q.iter().sum(), raw_p.iter().sum());
            let q: Vec<f64> = raw_q.iter().map(|v| v / sq).collect();
            let p: Vec<f64> = raw_p.iter().map(|v| v / sp).collect();
            let mut oracle = 0.0;
            for i in 0..5 {
                oracle += q[i] * q[i].ln() - q[i] * p[i].ln();
            }
            assert!((kl_categorical(&q, &p).unwrap() - oracle).abs() < 1e-12);
        }
    }

    #[test]
    fn categorical_kl_uniform_from_logits() {
        let g = Graph::new();
        let logits = Tensor::new(&[2, 3], vec![0.2, -1.0, 3.0, 0.0, 0.0, 0.0]).unwrap();
        let v = kl_categorical_uniform(g.constant(logits.clone())).value().item();
        let mut oracle = 0.0;
        for row in logits.data().chunks(3) {
            let z: f64 = row.iter().map(|x| x.exp()).sum();
            let q: Vec<f64> = row.iter().map(|x| x.exp() / z).collect();
            oracle += kl_categorical(&q, &[1.0 / 3.0; 3]).unwrap();
        }
        assert!((v - oracle).abs() < 1e-12);
    }

    #[test]
    fn bernoulli_kl_cases() {
        assert_eq!(kl_bernoulli(0.5, 0.5), 0.0);
        let expected = 0.5 * 2f64.ln() + 0.5 * (2.0f64 / 3.0).ln();
        assert!((kl_bernoulli(0.5, 0.25) - expected).abs() < 1e-12);
        assert!((kl_bernoulli(0.5, 0.25) - 0.14384).abs() < 1e-5);
        assert!((kl_bernoulli(0.3, 0.7) - kl_bernoulli(0.7, 0.3)).abs() < 1e-15);
    }

    #[test]
    fn bernoulli_kl_graph_matches_scalar() {
        let g = Graph::new();
        let q = Tensor::new(&[2, 3], vec![-2.0, 0.0, 1.0, 3.0, -0.5, 12.0]).unwrap();
        let p = Tensor::new(&[3], vec![0.9, 0.3, 1.0]).unwrap();
        let v = kl_bernoulli_sum(g.constant(q.clone()), g.constant(p.clone()))
            .unwrap()
            .value()
            .item();
        let mut oracle = 0.0;
        for (i, &l) in q.data().iter().enumerate() {
            oracle += kl_bernoulli(special::sigmoid(l), p.data()[i % 3]);
        }
        assert!((v - oracle).abs() < 1e-10, "{v} vs {oracle}");
    }

    #[test]
    fn ibp_prior_rejects_nonpositive_alpha() {
        assert!(IbpPrior::new(0.0).is_err());
        assert!(IbpPrior::new(-1.0).is_err());
        assert_eq!(IbpPrior::new(2.0).unwrap().beta, 1.0);
    }
}
