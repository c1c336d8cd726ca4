//! Small numeric helpers shared by the lifted path.

use std::f64::consts::PI;
use std::sync::OnceLock;

const LN_FACT_TABLE: usize = 4096;

fn ln_fact_table() -> &'static [f64] {
    static TABLE: OnceLock<Vec<f64>> = OnceLock::new();
    TABLE.get_or_init(|| {
        let mut t = Vec::with_capacity(LN_FACT_TABLE);
        t.push(0.0);
        for i in 1..LN_FACT_TABLE {
            let prev = t[i - 1];
            t.push(prev + (i as f64).ln());
        }
        t
    })
}

/// ln(k!)
pub fn ln_factorial(k: usize) -> f64 {
    if k < LN_FACT_TABLE {
        ln_fact_table()[k]
    } else {
        statrs::function::gamma::ln_gamma(k as f64 + 1.0)
    }
}

/// Trigamma function for x > 0 (recurrence up to 10, then the asymptotic series).
pub fn trigamma(mut x: f64) -> f64 {
    let mut acc = 0.0;
    while x < 10.0 {
        acc += 1.0 / (x * x);
        x += 1.0;
    }
    let x2 = 1.0 / (x * x);
    acc + 1.0 / x + x2 / 2.0 + x2 / x * (1.0 / 6.0 - x2 * (1.0 / 30.0 - x2 / 42.0))
}

pub fn digamma(x: f64) -> f64 {
    statrs::function::gamma::digamma(x)
}

pub fn ln_gamma(x: f64) -> f64 {
    statrs::function::gamma::ln_gamma(x)
}

/// ln C(n, k)
pub fn ln_choose(n: usize, k: usize) -> f64 {
    if k > n {
        return f64::NEG_INFINITY;
    }
    ln_factorial(n) - ln_factorial(k) - ln_factorial(n - k)
}

/// ln(n! / prod counts!)
pub fn ln_multinomial(counts: &[usize]) -> f64 {
    let n: usize = counts.iter().sum();
    ln_factorial(n) - counts.iter().map(|&c| ln_factorial(c)).sum::<f64>()
}

pub fn normal_log_pdf(x: f64, mean: f64, var: f64) -> f64 {
    let d = x - mean;
    -0.5 * (2.0 * PI * var).ln() - d * d / (2.0 * var)
}

pub fn normal_pdf(x: f64, mean: f64, var: f64) -> f64 {
    normal_log_pdf(x, mean, var).exp()
}

/// Standard normal cdf.
pub fn std_normal_cdf(z: f64) -> f64 {
    0.5 * statrs::function::erf::erfc(-z / std::f64::consts::SQRT_2)
}

pub fn normal_cdf(x: f64, mean: f64, var: f64) -> f64 {
    std_normal_cdf((x - mean) / var.sqrt())
}

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if m == f64::INFINITY {
        return f64::INFINITY;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Normalizes log weights in place into linear weights, returning the log normalizer.
pub fn normalize_log_weights(log_w: &[f64]) -> (Vec<f64>, f64) {
    let lz = log_sum_exp(log_w);
    let w = log_w.iter().map(|l| (l - lz).exp()).collect();
    (w, lz)
}

/// Product of two Gaussian densities in x: returns (log scale, mean, var) with
/// N(x; m1, v1) N(x; m2, v2) = exp(log scale) N(x; mean, var).
pub fn gaussian_product(m1: f64, v1: f64, m2: f64, v2: f64) -> (f64, f64, f64) {
    let log_scale = normal_log_pdf(m1, m2, v1 + v2);
    let var = v1 * v2 / (v1 + v2);
    let mean = (m1 * v2 + m2 * v1) / (v1 + v2);
    (log_scale, mean, var)
}

/// Splits a top-level seed into a stage seed. SplitMix64 over the seed xor an
/// FNV-1a hash of the stage label.
pub fn stage_seed(seed: u64, label: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in label.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    splitmix64(seed ^ h)
}

pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}
