//! Regularized lower incomplete gamma function, evaluated in log space.
//!
//! `P(a, x) = γ(a, x) / Γ(a)`. The power series converges quickly for
//! `x < a + 1`; above that the complement `Q = 1 - P` is taken from its
//! continued fraction (modified Lentz) and `ln P = ln(1 - Q)`.

const EPS: f64 = 1e-14;
const MAX_ITER: usize = 100_000;
const TINY: f64 = 1e-300;

pub fn ln_gamma(x: f64) -> f64 {
    libm::lgamma(x)
}

/// `ln P(a, x)` for `a > 0`. Returns `-inf` for `x <= 0`.
pub fn ln_gamma_p(a: f64, x: f64) -> f64 {
    debug_assert!(a > 0.0);
    if x <= 0.0 {
        return f64::NEG_INFINITY;
    }
    let ln_prefix = a * libm::log(x) - x - ln_gamma(a);
    if x < a + 1.0 {
        ln_prefix + libm::log(lower_series(a, x))
    } else {
        let q = libm::exp(ln_prefix) * upper_continued_fraction(a, x);
        libm::log1p(-q)
    }
}

/// `P(a, x)`.
pub fn gamma_p(a: f64, x: f64) -> f64 {
    libm::exp(ln_gamma_p(a, x))
}

/// `d/dx ln P(a, x)`, i.e. the gamma density at `x` divided by `P(a, x)`.
pub fn d_ln_gamma_p(a: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return f64::INFINITY;
    }
    libm::exp((a - 1.0) * libm::log(x) - x - ln_gamma(a) - ln_gamma_p(a, x))
}

// sum_{n>=0} x^n / (a (a+1) ... (a+n)); P = x^a e^-x / Gamma(a) * sum
fn lower_series(a: f64, x: f64) -> f64 {
    let mut ap = a;
    let mut term = 1.0 / a;
    let mut sum = term;
    for _ in 0..MAX_ITER {
        ap += 1.0;
        term *= x / ap;
        sum += term;
        if term.abs() < sum.abs() * EPS {
            break;
        }
    }
    sum
}

// Q = x^a e^-x / Gamma(a) * cf
fn upper_continued_fraction(a: f64, x: f64) -> f64 {
    let mut b = x + 1.0 - a;
    let mut c = 1.0 / TINY;
    let mut d = 1.0 / b;
    let mut h = d;
    for i in 1..MAX_ITER {
        let an = -(i as f64) * (i as f64 - a);
        b += 2.0;
        d = an * d + b;
        if d.abs() < TINY {
            d = TINY;
        }
        c = b + an / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let delta = d * c;
        h *= delta;
        if (delta - 1.0).abs() < EPS {
            break;
        }
    }
    h
}
