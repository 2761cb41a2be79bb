//! Scalar special functions and the closed-form Kumaraswamy–Beta divergence.

use statrs::function::beta::ln_beta;
use statrs::function::gamma::{digamma, ln_gamma};

pub const EULER_GAMMA: f64 = 0.577_215_664_901_532_9;

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x + (-x).exp()
    } else {
        x.exp().ln_1p()
    }
}

/// Inverse of [`softplus`] for `y > 0`.
pub fn softplus_inv(y: f64) -> f64 {
    if y > 30.0 {
        y + (-(-y).exp_m1()).ln()
    } else {
        y.exp_m1().ln()
    }
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// ψ'(x) for x > 0: recurrence up to x ≥ 10, then the asymptotic series.
pub fn trigamma(mut x: f64) -> f64 {
    let mut acc = 0.0;
    while x < 10.0 {
        acc += 1.0 / (x * x);
        x += 1.0;
    }
    let inv = 1.0 / x;
    let inv2 = inv * inv;
    acc + inv
        + inv2 / 2.0
        + inv * inv2 * (1.0 / 6.0 - inv2 * (1.0 / 30.0 - inv2 * (1.0 / 42.0 - inv2 / 30.0)))
}

fn beta_fn(x: f64, y: f64) -> f64 {
    (ln_gamma(x) + ln_gamma(y) - ln_gamma(x + y)).exp()
}

/// KL(Kumaraswamy(a, b) ‖ Beta(alpha, beta)), with the infinite series cut after `terms` terms.
///
/// The series is multiplied by `beta - 1`, so it vanishes for the `Beta(alpha, 1)` prior.
pub fn kumaraswamy_beta_kl(a: f64, b: f64, alpha: f64, beta: f64, terms: usize) -> f64 {
    kumaraswamy_beta_kl_with_grad(a, b, alpha, beta, terms).0
}

/// [`kumaraswamy_beta_kl`] together with its partial derivatives in `a` and `b`.
pub fn kumaraswamy_beta_kl_with_grad(
    a: f64,
    b: f64,
    alpha: f64,
    beta: f64,
    terms: usize,
) -> (f64, f64, f64) {
    let psi_b = digamma(b);
    let bracket = -EULER_GAMMA - psi_b - 1.0 / b;
    let ratio = 1.0 - alpha / a;

    let mut kl = ratio * bracket + (a * b).ln() + ln_beta(alpha, beta) - (b - 1.0) / b;
    let mut da = alpha / (a * a) * bracket + 1.0 / a;
    let mut db = ratio * (-trigamma(b) + 1.0 / (b * b)) + 1.0 / b - 1.0 / (b * b);

    if beta != 1.0 {
        let (mut s, mut ds_da, mut ds_db) = (0.0, 0.0, 0.0);
        for m in 1..=terms {
            let m = m as f64;
            let x = m / a;
            let denom = m + a * b;
            let bf = beta_fn(x, b);
            let psi_xb = digamma(x + b);
            s += bf / denom;
            ds_da += bf * (digamma(x) - psi_xb) * (-m / (a * a)) / denom - bf * b / (denom * denom);
            ds_db += bf * (psi_b - psi_xb) / denom - bf * a / (denom * denom);
        }
        kl += (beta - 1.0) * b * s;
        da += (beta - 1.0) * b * ds_da;
        db += (beta - 1.0) * (s + b * ds_db);
    }
    (kl, da, db)
}
