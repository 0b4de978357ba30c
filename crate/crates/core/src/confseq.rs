//! Confidence bounds for means of bounded streams.
//!
//! Two constructions are used by the alarms:
//!
//! - a static Hoeffding upper interval, `mean + sqrt(ln(1/alpha) / n)`, for
//!   the source risk estimated once on the calibration set;
//! - a time-uniform lower confidence sequence built from the
//!   conjugate-mixture empirical-Bernstein (CM-EB) construction, for the
//!   running test risk.
//!
//! For observations `z_i` in `[0, M]` with predictable estimates `ẑ_{i-1}`
//! (running mean of strictly earlier observations, seeded at `M/2`), the
//! centered sum `S_t = Σ (z_i - μ)` is sub-exponential with variance process
//! `V_t = Σ (z_i - ẑ_{i-1})²` and scale `c = M`. Any boundary `u(v)` that the
//! process crosses with probability at most `alpha` yields the lower
//! sequence `(Σ z_i - u(V_t)) / t`. The boundary here is the gamma-exponential
//! mixture: `u(v) = sup { s : m(s, v) < 1/alpha }` with
//!
//! ```text
//! m(s, v) = k^k / (Γ(k) P(k, k))
//!         · Γ(A) P(A, B) / B^A
//!         · exp((c s + v) / c²),
//! k = ρ/c², A = (v + ρ)/c², B = (c s + v + ρ)/c²
//! ```
//!
//! where `P` is the regularized lower incomplete gamma function and `ρ` sets
//! the intrinsic time at which the boundary is tightest.

use crate::special::{d_ln_gamma_p, ln_gamma, ln_gamma_p};
use crate::{Error, Result};

/// Absolute tolerance of the boundary inversion.
pub const BOUNDARY_TOLERANCE: f64 = 1e-9;

fn check_alpha(alpha: f64, allow_one: bool) -> Result<()> {
    let ok = alpha > 0.0 && (alpha < 1.0 || (allow_one && alpha == 1.0));
    if ok {
        Ok(())
    } else {
        Err(Error::InvalidParameter {
            name: "alpha",
            value: alpha,
        })
    }
}

/// Finite-sample width `sqrt(ln(1/alpha) / n)` of the Hoeffding interval.
pub fn hoeffding_width(n: usize, alpha: f64) -> f64 {
    libm::sqrt(libm::log(1.0 / alpha) / n as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct HoeffdingInterval {
    pub mean: f64,
    pub width: f64,
    pub alpha: f64,
    pub n: usize,
    pub range: f64,
}

impl HoeffdingInterval {
    pub fn from_samples(samples: &[f64], alpha: f64, range: f64) -> Result<Self> {
        check_alpha(alpha, true)?;
        if samples.is_empty() {
            return Err(Error::EmptyInput("samples"));
        }
        if let Some(&bad) = samples.iter().find(|z| !(0.0..=range).contains(*z)) {
            return Err(Error::OutOfRange {
                value: bad,
                bound: range,
            });
        }
        let n = samples.len();
        let mean = samples.iter().sum::<f64>() / n as f64;
        Ok(Self {
            mean,
            width: hoeffding_width(n, alpha),
            alpha,
            n,
            range,
        })
    }

    pub fn from_indicators(indicators: &[bool], alpha: f64) -> Result<Self> {
        check_alpha(alpha, true)?;
        if indicators.is_empty() {
            return Err(Error::EmptyInput("indicators"));
        }
        let n = indicators.len();
        let hits = indicators.iter().filter(|&&b| b).count();
        Ok(Self {
            mean: hits as f64 / n as f64,
            width: hoeffding_width(n, alpha),
            alpha,
            n,
            range: 1.0,
        })
    }

    pub fn upper(&self) -> f64 {
        (self.mean + self.width).clamp(0.0, self.range)
    }

    pub fn lower(&self) -> f64 {
        (self.mean - self.width).clamp(0.0, self.range)
    }
}

/// Static upper confidence bound on the mean of `samples` in `[0, range]`.
pub fn hoeffding_upper(samples: &[f64], alpha: f64, range: f64) -> Result<f64> {
    HoeffdingInterval::from_samples(samples, alpha, range).map(|h| h.upper())
}

/// [`hoeffding_upper`] for `{0, 1}` observations.
pub fn hoeffding_upper_indicator(indicators: &[bool], alpha: f64) -> Result<f64> {
    HoeffdingInterval::from_indicators(indicators, alpha).map(|h| h.upper())
}

/// Mixture precision that makes the boundary tightest near variance `v_opt`.
pub fn tuned_rho(v_opt: f64, alpha: f64) -> f64 {
    let l = libm::log(1.0 / alpha);
    v_opt / (2.0 * l + libm::log(1.0 + 2.0 * l))
}

/// Intrinsic time used when the caller does not pick one: a quarter of the
/// declared stream length at worst-case per-sample variance `M²/4`, or 1000
/// samples' worth when the length is unknown.
pub fn default_intrinsic_time(stream_len: Option<u64>, range: f64) -> f64 {
    let per_sample = range * range / 4.0;
    match stream_len {
        Some(len) if len > 0 => 0.25 * len as f64 * per_sample,
        _ => 1000.0 * per_sample,
    }
}

/// Gamma-exponential mixture boundary for a sub-exponential process.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct MixtureBoundary {
    pub rho: f64,
    pub scale: f64,
    pub alpha: f64,
    log_threshold: f64,
    log_normalizer: f64,
}

impl MixtureBoundary {
    pub fn new(rho: f64, scale: f64, alpha: f64) -> Result<Self> {
        check_alpha(alpha, false)?;
        if !(rho > 0.0 && rho.is_finite()) {
            return Err(Error::InvalidParameter {
                name: "rho",
                value: rho,
            });
        }
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::InvalidParameter {
                name: "scale",
                value: scale,
            });
        }
        let k = rho / (scale * scale);
        let log_normalizer = k * libm::log(k) - ln_gamma(k) - ln_gamma_p(k, k);
        Ok(Self {
            rho,
            scale,
            alpha,
            log_threshold: libm::log(1.0 / alpha),
            log_normalizer,
        })
    }

    /// Boundary tuned for intrinsic time `v_opt`.
    pub fn tuned(v_opt: f64, scale: f64, alpha: f64) -> Result<Self> {
        check_alpha(alpha, false)?;
        if !(v_opt > 0.0 && v_opt.is_finite()) {
            return Err(Error::InvalidParameter {
                name: "v_opt",
                value: v_opt,
            });
        }
        Self::new(tuned_rho(v_opt, alpha), scale, alpha)
    }

    /// `ln m(s, v)`.
    pub fn log_mixture(&self, s: f64, v: f64) -> f64 {
        self.log_mixture_with_slope(s, v).0
    }

    // ln m(s, v) and its derivative in s
    fn log_mixture_with_slope(&self, s: f64, v: f64) -> (f64, f64) {
        let c = self.scale;
        let c2 = c * c;
        let a = (v + self.rho) / c2;
        let b = (c * s + v + self.rho) / c2;
        let value = self.log_normalizer + ln_gamma(a) + ln_gamma_p(a, b) - a * libm::log(b)
            + (c * s + v) / c2;
        let slope = (d_ln_gamma_p(a, b) - a / b + 1.0) / c;
        (value, slope)
    }

    /// Whether the centered sum `s` at variance `v` reaches the threshold
    /// `m(s, v) >= 1/alpha`.
    pub fn crossed(&self, s: f64, v: f64) -> bool {
        self.log_mixture(s, v) >= self.log_threshold
    }

    /// `sup { s in [0, s_max] : m(s, v) < 1/alpha }`, to within
    /// [`BOUNDARY_TOLERANCE`] and never below the true value.
    ///
    /// `m` is strictly increasing in `s`, so the root is bracketed and
    /// narrowed by bisection; Newton steps are taken whenever they land
    /// inside the current bracket.
    pub fn boundary(&self, v: f64, s_max: f64) -> f64 {
        let target = self.log_threshold;
        let eval = |s: f64| {
            let (f, df) = self.log_mixture_with_slope(s, v);
            (f - target, df)
        };
        if eval(s_max).0 < 0.0 {
            return s_max;
        }
        let (mut lo, mut hi) = (0.0_f64, s_max);
        // normal-mixture approximation as a starting point
        let vr = v + self.rho;
        let guess = libm::sqrt(vr * libm::log(vr / (self.rho * self.alpha * self.alpha)));
        let mut s = if guess > lo && guess < hi {
            guess
        } else {
            0.5 * (lo + hi)
        };
        for _ in 0..500 {
            let (f, df) = eval(s);
            if f >= 0.0 {
                hi = s;
            } else {
                lo = s;
            }
            if hi - lo <= BOUNDARY_TOLERANCE {
                break;
            }
            let step = f / df;
            let newton = s - step;
            if df > 0.0 && step.abs() < 0.25 * BOUNDARY_TOLERANCE && newton > lo && newton < hi {
                // Newton has converged; straddle the root to close the bracket.
                let half = 0.5 * BOUNDARY_TOLERANCE;
                for probe in [newton - half, newton + half] {
                    if probe > lo && probe < hi {
                        if eval(probe).0 >= 0.0 {
                            hi = probe;
                        } else {
                            lo = probe;
                        }
                    }
                }
                if hi - lo <= BOUNDARY_TOLERANCE {
                    break;
                }
                s = 0.5 * (lo + hi);
                continue;
            }
            s = if df > 0.0 && newton > lo && newton < hi {
                newton
            } else {
                0.5 * (lo + hi)
            };
        }
        hi
    }
}

/// Running state of a CM-EB lower confidence sequence.
///
/// A pure function of the observation sequence: feeding the same values in
/// one batch or many gives bit-identical state.
#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalBernstein {
    boundary: MixtureBoundary,
    range: f64,
    v_opt: f64,
    n: u64,
    sum: f64,
    predicted: f64,
    variance: f64,
}

impl EmpiricalBernstein {
    pub fn new(alpha: f64, range: f64, v_opt: f64) -> Result<Self> {
        Ok(Self {
            boundary: MixtureBoundary::tuned(v_opt, range, alpha)?,
            range,
            v_opt,
            n: 0,
            sum: 0.0,
            predicted: 0.5 * range,
            variance: 0.0,
        })
    }

    /// Re-tune the mixture for intrinsic time `v_opt`. Only allowed before
    /// the first observation.
    pub fn set_intrinsic_time(&mut self, v_opt: f64) -> Result<()> {
        if self.n > 0 {
            return Err(Error::State("intrinsic time must be set before any update"));
        }
        self.boundary = MixtureBoundary::tuned(v_opt, self.range, self.boundary.alpha)?;
        self.v_opt = v_opt;
        Ok(())
    }

    /// Append a batch in order. The batch is validated up front, so a
    /// rejected batch leaves the state untouched.
    pub fn update(&mut self, batch: &[f64]) -> Result<()> {
        if let Some(&bad) = batch
            .iter()
            .find(|z| !(z.is_finite() && (0.0..=self.range).contains(*z)))
        {
            return Err(Error::OutOfRange {
                value: bad,
                bound: self.range,
            });
        }
        for &z in batch {
            let dev = z - self.predicted;
            self.variance += dev * dev;
            self.sum += z;
            self.n += 1;
            self.predicted = self.sum / self.n as f64;
        }
        Ok(())
    }

    pub fn n(&self) -> u64 {
        self.n
    }

    pub fn sum(&self) -> f64 {
        self.sum
    }

    pub fn mean(&self) -> Option<f64> {
        (self.n > 0).then(|| self.sum / self.n as f64)
    }

    /// Variance process `V_t`.
    pub fn variance_process(&self) -> f64 {
        self.variance
    }

    pub fn alpha(&self) -> f64 {
        self.boundary.alpha
    }

    pub fn range(&self) -> f64 {
        self.range
    }

    pub fn intrinsic_time(&self) -> f64 {
        self.v_opt
    }

    pub fn mixture(&self) -> &MixtureBoundary {
        &self.boundary
    }

    /// Current boundary `u(V_t)` on the centered sum.
    pub fn boundary_value(&self) -> f64 {
        self.boundary
            .boundary(self.variance, self.n as f64 * self.range)
    }

    /// Anytime-valid lower bound on the running mean, clamped to `[0, M]`.
    pub fn lower(&self) -> Result<f64> {
        if self.n == 0 {
            return Err(Error::State("lower bound needs at least one observation"));
        }
        let raw = (self.sum - self.boundary_value()) / self.n as f64;
        Ok(raw.clamp(0.0, self.range))
    }

    /// Whether `lower() > mu`, decided from the mixture directly without
    /// inverting the boundary. Valid for `mu` in `[0, M)`.
    pub fn lower_exceeds(&self, mu: f64) -> bool {
        if self.n == 0 {
            return false;
        }
        let centered = self.sum - self.n as f64 * mu;
        centered > 0.0 && self.boundary.crossed(centered, self.variance)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use alloc::vec::Vec;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    // Independent oracle: the mixture as an explicit integral over the
    // mixing variable y = 1 - c·λ in (0, 1], evaluated by composite Simpson.
    fn quadrature_log_mixture(rho: f64, c: f64, s: f64, v: f64) -> f64 {
        let k = rho / (c * c);
        let e = v / (c * c);
        let g = (c * s + v) / (c * c);
        let n = 200_000;
        let h = 1.0 / n as f64;
        // integrands share the factor y^(k-1) e^(-k y); work in logs relative
        // to the peak to avoid underflow
        let log_num = |y: f64| (k - 1.0 + e) * y.ln() - k * y + (1.0 - y) * g;
        let log_den = |y: f64| (k - 1.0) * y.ln() - k * y;
        let simpson = |f: &dyn Fn(f64) -> f64| {
            let peak = (1..=n).map(|i| f(i as f64 * h)).fold(f64::MIN, f64::max);
            let mut acc = 0.0;
            for i in 0..=n {
                let y = (i as f64 * h).max(1e-300);
                let w = if i == 0 || i == n {
                    1.0
                } else if i % 2 == 1 {
                    4.0
                } else {
                    2.0
                };
                acc += w * (f(y) - peak).exp();
            }
            peak + (acc * h / 3.0).ln()
        };
        simpson(&log_num) - simpson(&log_den)
    }

    #[test]
    fn hoeffding_examples() {
        let mut samples = vec![0.0; 1000];
        for z in samples.iter_mut().take(100) {
            *z = 1.0;
        }
        let up = hoeffding_upper(&samples, 0.025, 1.0).unwrap();
        let expected = 0.1 + (40.0f64.ln() / 1000.0).sqrt();
        assert!((up - expected).abs() < 1e-12);
        assert!((up - 0.160_736_146_190_830_5).abs() < 1e-12);

        let any = [0.2, 0.4, 0.9];
        let mean = 1.5 / 3.0;
        assert!((hoeffding_upper(&any, 1.0, 1.0).unwrap() - mean).abs() < 1e-15);

        let zeros = [0.0; 4];
        let up = hoeffding_upper(&zeros, (-1.0f64).exp(), 1.0).unwrap();
        assert!((up - 0.5).abs() < 1e-15);
    }

    #[test]
    fn hoeffding_errors() {
        assert_eq!(
            hoeffding_upper(&[], 0.1, 1.0),
            Err(Error::EmptyInput("samples"))
        );
        assert!(hoeffding_upper(&[0.5], 0.0, 1.0).is_err());
        assert!(hoeffding_upper(&[1.5], 0.1, 1.0).is_err());
    }

    #[test]
    fn hoeffding_indicator_examples() {
        let mut flags = vec![false; 100];
        for f in flags.iter_mut().take(10) {
            *f = true;
        }
        let up = hoeffding_upper_indicator(&flags, 0.0875).unwrap();
        let expected = 0.1 + ((1.0f64 / 0.0875).ln() / 100.0).sqrt();
        assert!((up - expected).abs() < 1e-15);
        assert!((up - 0.256).abs() < 1e-3);
        assert_eq!(hoeffding_upper_indicator(&[false; 7], 1.0).unwrap(), 0.0);
        assert_eq!(hoeffding_upper_indicator(&[true; 7], 0.3).unwrap(), 1.0);
    }

    #[test]
    fn hoeffding_monotone_in_alpha_and_n() {
        let base: Vec<f64> = (0..50).map(|i| (i % 5) as f64 / 5.0).collect();
        let mut prev = f64::INFINITY;
        for &alpha in &[0.01, 0.05, 0.1, 0.3, 0.9] {
            let up = hoeffding_upper(&base, alpha, 1.0).unwrap();
            assert!(up < prev);
            prev = up;
        }
        let mut prev = f64::INFINITY;
        for reps in 1..6 {
            let samples: Vec<f64> = base
                .iter()
                .cycle()
                .take(base.len() * reps)
                .copied()
                .collect();
            let up = hoeffding_upper(&samples, 0.05, 1.0).unwrap();
            assert!(up < prev);
            prev = up;
        }
    }

    #[test]
    fn closed_form_mixture_matches_quadrature() {
        for &(rho, c, s, v) in &[
            (5.0, 1.0, 3.0, 2.0),
            (50.0, 1.0, 12.0, 40.0),
            (2.0, 0.5, 0.7, 1.5),
            (120.0, 1.0, 25.0, 300.0),
        ] {
            let m = MixtureBoundary::new(rho, c, 0.1).unwrap();
            let closed = m.log_mixture(s, v);
            let quad = quadrature_log_mixture(rho, c, s, v);
            assert!(
                (closed - quad).abs() < 1e-6,
                "rho={rho} s={s} v={v}: {closed} vs {quad}"
            );
        }
        // m(0, 0) = 1
        let m = MixtureBoundary::new(7.0, 1.0, 0.1).unwrap();
        assert!(m.log_mixture(0.0, 0.0).abs() < 1e-12);
    }

    #[test]
    fn boundary_matches_bisection_on_quadrature() {
        let (rho, alpha) = (30.0, 0.05);
        let m = MixtureBoundary::new(rho, 1.0, alpha).unwrap();
        let target = (1.0 / alpha).ln();
        for &v in &[0.5, 10.0, 60.0] {
            let (mut lo, mut hi) = (0.0, 1000.0);
            for _ in 0..60 {
                let mid = 0.5 * (lo + hi);
                if quadrature_log_mixture(rho, 1.0, mid, v) >= target {
                    hi = mid;
                } else {
                    lo = mid;
                }
            }
            let b = m.boundary(v, 1000.0);
            assert!((b - hi).abs() < 1e-5, "v={v}: {b} vs {hi}");
            assert!(m.log_mixture(b, v) >= target);
            assert!(m.log_mixture(b - 2.0 * BOUNDARY_TOLERANCE, v) < target);
        }
    }

    #[test]
    fn boundary_monotone_on_grid() {
        let mut prev_alpha = 0.0;
        for &alpha in &[0.5, 0.2, 0.1, 0.05, 0.01, 0.001] {
            let m = MixtureBoundary::tuned(300.0, 1.0, alpha).unwrap();
            let mut prev_v = 0.0;
            for i in 0..40 {
                let v = i as f64 * 25.0;
                let b = m.boundary(v, 1e6);
                assert!(b >= prev_v, "alpha={alpha} v={v}");
                prev_v = b;
            }
            // fixed rho across alpha so only 1/alpha varies
            let fixed = MixtureBoundary::new(50.0, 1.0, alpha).unwrap();
            let b = fixed.boundary(200.0, 1e6);
            assert!(b >= prev_alpha);
            prev_alpha = b;
        }
    }

    #[test]
    fn update_examples() {
        let mut cs = EmpiricalBernstein::new(0.1, 1.0, 250.0).unwrap();
        cs.update(&[0.5]).unwrap();
        assert_eq!(cs.n(), 1);
        assert_eq!(cs.variance_process(), 0.0);
        cs.update(&[1.0]).unwrap();
        assert_eq!(cs.variance_process(), 0.25);

        let data = [0.1, 0.9, 0.4, 0.4, 0.7, 0.0, 1.0];
        let mut one = EmpiricalBernstein::new(0.1, 1.0, 250.0).unwrap();
        one.update(&data).unwrap();
        one.update(&data).unwrap();
        let mut split = EmpiricalBernstein::new(0.1, 1.0, 250.0).unwrap();
        for z in data.iter().chain(data.iter()) {
            split.update(&[*z]).unwrap();
        }
        assert_eq!(one, split);
    }

    #[test]
    fn update_rejects_out_of_range_atomically() {
        let mut cs = EmpiricalBernstein::new(0.1, 1.0, 250.0).unwrap();
        cs.update(&[0.3]).unwrap();
        let before = cs.clone();
        assert!(matches!(
            cs.update(&[0.2, 1.2]),
            Err(Error::OutOfRange { .. })
        ));
        assert!(cs.update(&[f64::NAN]).is_err());
        assert_eq!(cs, before);
    }

    #[test]
    fn lower_examples() {
        let cs = EmpiricalBernstein::new(0.1, 1.0, 250.0).unwrap();
        assert!(cs.lower().is_err());
        for &alpha in &[0.2, 0.175, 0.05, 0.01] {
            for &z in &[0.0, 0.3, 1.0] {
                let mut cs = EmpiricalBernstein::new(alpha, 1.0, 250.0).unwrap();
                cs.update(&[z]).unwrap();
                // the mixture stays below 1/alpha over the whole range at t = 1
                assert!(!cs.mixture().crossed(1.0, cs.variance_process()));
                assert_eq!(cs.boundary_value(), 1.0);
                assert_eq!(cs.lower().unwrap(), 0.0);
            }
        }
    }

    #[test]
    fn lower_converges_on_uniform_stream() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut cs = EmpiricalBernstein::new(0.175, 1.0, 2500.0 * 0.25).unwrap();
        let batch: Vec<f64> = (0..10_000).map(|_| rng.gen::<f64>()).collect();
        cs.update(&batch).unwrap();
        let l = cs.lower().unwrap();
        assert!((0.45..=0.5).contains(&l), "lower = {l}");
        assert!(l <= cs.mean().unwrap());
    }

    #[test]
    fn intrinsic_time_rules() {
        assert_eq!(default_intrinsic_time(Some(10_000), 1.0), 625.0);
        assert_eq!(default_intrinsic_time(None, 1.0), 250.0);
        let mut cs = EmpiricalBernstein::new(0.1, 1.0, 250.0).unwrap();
        assert!(cs.set_intrinsic_time(0.0).is_err());
        cs.set_intrinsic_time(625.0).unwrap();
        assert_eq!(cs.intrinsic_time(), 625.0);
        cs.update(&[0.2]).unwrap();
        assert_eq!(
            cs.set_intrinsic_time(100.0),
            Err(Error::State("intrinsic time must be set before any update"))
        );
    }

    #[test]
    fn exceeds_agrees_with_lower() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut cs = EmpiricalBernstein::new(0.1, 1.0, 100.0).unwrap();
        for _ in 0..400 {
            let z = if rng.gen::<f64>() < 0.8 { 1.0 } else { 0.0 };
            cs.update(&[z]).unwrap();
            let l = cs.lower().unwrap();
            for &mu in &[0.1, 0.5, 0.7] {
                // skip points within the inversion tolerance
                if (l - mu).abs() * cs.n() as f64 > 1e-6 {
                    assert_eq!(cs.lower_exceeds(mu), l > mu, "n={} l={l} mu={mu}", cs.n());
                }
            }
        }
    }

    #[test]
    fn identical_sequences_give_identical_bounds() {
        let data: Vec<f64> = (0..500).map(|i| ((i * 37) % 101) as f64 / 100.0).collect();
        let run = || {
            let mut cs = EmpiricalBernstein::new(0.05, 1.0, 100.0).unwrap();
            cs.update(&data).unwrap();
            cs.lower().unwrap().to_bits()
        };
        assert_eq!(run(), run());
    }
}
