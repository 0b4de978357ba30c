//! Loss and proxy threshold selection by F1 maximization.
//!
//! A sample is a positive when its loss exceeds `tau` and is flagged when its
//! proxy exceeds `lambda`. F1 is piecewise constant in both thresholds, so
//! searching midpoints between consecutive distinct observed values (plus
//! one proxy candidate below the minimum and one above the maximum) visits
//! every achievable F1 value. Ties prefer the smaller `tau`, then the
//! smaller `lambda`.

use alloc::format;
use alloc::vec::Vec;

use crate::{Error, Result};

/// Paired `(proxy, loss)` values of one model on the labeled calibration data.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationSet {
    proxies: Vec<f64>,
    losses: Vec<f64>,
}

impl CalibrationSet {
    pub fn new(proxies: Vec<f64>, losses: Vec<f64>, range: f64) -> Result<Self> {
        if proxies.len() != losses.len() {
            return Err(Error::DimensionMismatch {
                expected: proxies.len(),
                found: losses.len(),
            });
        }
        if proxies.len() < 2 {
            return Err(Error::EmptyInput(
                "calibration set needs at least two pairs",
            ));
        }
        if let Some(&bad) = losses.iter().find(|z| !(0.0..=range).contains(*z)) {
            return Err(Error::OutOfRange {
                value: bad,
                bound: range,
            });
        }
        if let Some(&bad) = proxies.iter().find(|u| !u.is_finite()) {
            return Err(Error::InvalidParameter {
                name: "proxy",
                value: bad,
            });
        }
        Ok(Self { proxies, losses })
    }

    pub fn len(&self) -> usize {
        self.proxies.len()
    }

    pub fn is_empty(&self) -> bool {
        self.proxies.is_empty()
    }

    pub fn proxies(&self) -> &[f64] {
        &self.proxies
    }

    pub fn losses(&self) -> &[f64] {
        &self.losses
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl Confusion {
    pub fn f1(&self) -> f64 {
        let denom = 2 * self.tp + self.fn_ + self.fp;
        if denom == 0 {
            0.0
        } else {
            (2 * self.tp) as f64 / denom as f64
        }
    }
}

pub fn confusion(lambda: f64, tau: f64, set: &CalibrationSet) -> Confusion {
    let mut c = Confusion::default();
    for (&u, &z) in set.proxies.iter().zip(&set.losses) {
        match (u > lambda, z > tau) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => {}
        }
    }
    c
}

/// `2TP / (2TP + FN + FP)`, with `0/0 := 0`.
pub fn f1_score(lambda: f64, tau: f64, set: &CalibrationSet) -> f64 {
    confusion(lambda, tau, set).f1()
}

fn sorted_distinct(values: &[f64]) -> Vec<f64> {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    v.dedup();
    v
}

fn midpoints(distinct: &[f64]) -> impl Iterator<Item = f64> + '_ {
    distinct.windows(2).map(|w| 0.5 * (w[0] + w[1]))
}

/// Loss-threshold grid: midpoints between consecutive distinct losses.
/// For `{0, 1}` losses this is the single value `1/2`.
pub fn tau_candidates(losses: &[f64]) -> Vec<f64> {
    midpoints(&sorted_distinct(losses)).collect()
}

/// Proxy-threshold grid: one value below the minimum, the midpoints, one
/// value above the maximum, in ascending order.
pub fn lambda_candidates(proxies: &[f64]) -> Vec<f64> {
    let distinct = sorted_distinct(proxies);
    let mut out = Vec::with_capacity(distinct.len() + 1);
    if let (Some(&lo), Some(&hi)) = (distinct.first(), distinct.last()) {
        out.push(lo - 1.0);
        out.extend(midpoints(&distinct));
        out.push(hi + 1.0);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SourceThresholds {
    pub lambda: f64,
    pub tau: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProxyThreshold {
    pub lambda: f64,
    pub f1: f64,
    /// No positives at this `tau`; `lambda` is the previous threshold.
    pub degenerate: bool,
}

// Proxy-sorted view used by the sweeps: group boundaries of equal proxies.
struct Sweep {
    order: Vec<usize>,
    /// `groups[g]..groups[g+1]` indexes `order` for the g-th distinct proxy
    groups: Vec<usize>,
    lambdas: Vec<f64>,
}

impl Sweep {
    fn new(set: &CalibrationSet) -> Self {
        let mut order: Vec<usize> = (0..set.len()).collect();
        order.sort_by(|&a, &b| set.proxies[a].total_cmp(&set.proxies[b]));
        let mut groups = Vec::new();
        let mut distinct = Vec::new();
        for (pos, &i) in order.iter().enumerate() {
            let u = set.proxies[i];
            if distinct.last() != Some(&u) {
                groups.push(pos);
                distinct.push(u);
            }
        }
        groups.push(order.len());
        let mut lambdas = Vec::with_capacity(distinct.len() + 1);
        lambdas.push(distinct[0] - 1.0);
        lambdas.extend(midpoints(&distinct));
        lambdas.push(distinct[distinct.len() - 1] + 1.0);
        Self {
            order,
            groups,
            lambdas,
        }
    }

    /// Best `(confusion, lambda)` at a fixed `tau`, smallest lambda on ties.
    fn best(&self, set: &CalibrationSet, tau: f64) -> (Confusion, f64) {
        let positives = set.losses.iter().filter(|&&z| z > tau).count();
        // lambda below every proxy: everything flagged
        let mut c = Confusion {
            tp: positives,
            fp: set.len() - positives,
            fn_: 0,
        };
        let mut best = (c, self.lambdas[0]);
        for g in 0..self.groups.len() - 1 {
            for &i in &self.order[self.groups[g]..self.groups[g + 1]] {
                if set.losses[i] > tau {
                    c.tp -= 1;
                    c.fn_ += 1;
                } else {
                    c.fp -= 1;
                }
            }
            if better(&c, &best.0) {
                best = (c, self.lambdas[g + 1]);
            }
        }
        best
    }
}

// exact rational comparison of F1 values
fn better(a: &Confusion, b: &Confusion) -> bool {
    let num_a = 2 * a.tp as u128;
    let den_a = (2 * a.tp + a.fn_ + a.fp) as u128;
    let num_b = 2 * b.tp as u128;
    let den_b = (2 * b.tp + b.fn_ + b.fp) as u128;
    match (den_a, den_b) {
        (0, _) => false,
        (_, 0) => num_a > 0,
        _ => num_a * den_b > num_b * den_a,
    }
}

/// Joint argmax of F1 over the `(lambda, tau)` grid for the source model.
pub fn calibrate_source(set: &CalibrationSet) -> Result<SourceThresholds> {
    let taus = tau_candidates(&set.losses);
    if taus.is_empty() {
        return Err(Error::DegenerateCalibration(format!(
            "all {} calibration losses equal {}; no loss threshold separates them",
            set.len(),
            set.losses[0]
        )));
    }
    let sweep = Sweep::new(set);
    let mut best: Option<(Confusion, f64, f64)> = None;
    for &tau in &taus {
        let (c, lambda) = sweep.best(set, tau);
        if best.as_ref().map_or(true, |(b, _, _)| better(&c, b)) {
            best = Some((c, lambda, tau));
        }
    }
    let (c, lambda, tau) = best.expect("non-empty tau grid");
    Ok(SourceThresholds {
        lambda,
        tau,
        f1: c.f1(),
    })
}

/// Argmax of F1 over proxy thresholds with `tau` held fixed. Falls back to
/// `previous` when no calibration loss exceeds `tau`.
pub fn recalibrate_proxy(set: &CalibrationSet, tau: f64, previous: f64) -> ProxyThreshold {
    let (c, lambda) = Sweep::new(set).best(set, tau);
    if c.tp == 0 {
        return ProxyThreshold {
            lambda: previous,
            f1: 0.0,
            degenerate: true,
        };
    }
    ProxyThreshold {
        lambda,
        f1: c.f1(),
        degenerate: false,
    }
}

/// Fixed loss threshold plus the proxy thresholds chosen so far.
#[derive(Debug, Clone, PartialEq)]
pub struct ThresholdState {
    tau: f64,
    lambda_source: f64,
    lambdas: Vec<f64>,
}

impl ThresholdState {
    pub fn new(source: SourceThresholds) -> Self {
        Self {
            tau: source.tau,
            lambda_source: source.lambda,
            lambdas: Vec::new(),
        }
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn lambda_source(&self) -> f64 {
        self.lambda_source
    }

    /// Thresholds for test steps `1..=t`.
    pub fn lambdas(&self) -> &[f64] {
        &self.lambdas
    }

    /// Most recent threshold, or the source threshold before any step.
    pub fn current(&self) -> f64 {
        self.lambdas.last().copied().unwrap_or(self.lambda_source)
    }

    pub fn push(&mut self, lambda: f64) {
        self.lambdas.push(lambda);
    }

    /// Recalibrate on the adapted model's calibration pairs and record the
    /// result for the next step.
    pub fn recalibrate(&mut self, set: &CalibrationSet) -> ProxyThreshold {
        let r = recalibrate_proxy(set, self.tau, self.current());
        self.lambdas.push(r.lambda);
        r
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use proptest::prelude::*;

    fn set(pairs: &[(f64, f64)]) -> CalibrationSet {
        CalibrationSet::new(
            pairs.iter().map(|p| p.0).collect(),
            pairs.iter().map(|p| p.1).collect(),
            1.0,
        )
        .unwrap()
    }

    // exhaustive oracle over the grid, independent of the sweep
    fn brute_force(s: &CalibrationSet) -> (f64, f64, f64) {
        let mut best = (f64::NEG_INFINITY, 0.0, 0.0);
        for &tau in &tau_candidates(s.losses()) {
            for &lambda in &lambda_candidates(s.proxies()) {
                let f = f1_score(lambda, tau, s);
                if f > best.0 {
                    best = (f, lambda, tau);
                }
            }
        }
        best
    }

    #[test]
    fn f1_examples() {
        let separated = set(&[(0.1, 0.0), (0.2, 0.0), (0.8, 1.0), (0.9, 1.0)]);
        assert_eq!(f1_score(0.5, 0.5, &separated), 1.0);

        let all_low = set(&[(0.1, 0.0), (0.9, 0.2)]);
        assert_eq!(f1_score(0.5, 0.5, &all_low), 0.0);
        assert_eq!(f1_score(2.0, 0.5, &all_low), 0.0);

        let s = set(&[(0.9, 1.0), (0.8, 1.0), (0.7, 0.0), (0.1, 0.0)]);
        assert_eq!(
            confusion(0.75, 0.5, &s),
            Confusion {
                tp: 2,
                fp: 0,
                fn_: 0
            }
        );
        assert_eq!(f1_score(0.75, 0.5, &s), 1.0);
    }

    #[test]
    fn calibrate_source_separated_binary() {
        let s = set(&[(0.1, 0.0), (0.2, 0.0), (0.8, 1.0), (0.9, 1.0)]);
        let t = calibrate_source(&s).unwrap();
        assert_eq!(t.tau, 0.5);
        assert_eq!(t.lambda, 0.5);
        assert_eq!(t.f1, 1.0);
    }

    #[test]
    fn calibrate_source_misranked_point() {
        let s = set(&[(0.1, 0.0), (0.85, 0.0), (0.8, 1.0), (0.9, 1.0), (0.3, 0.0)]);
        let t = calibrate_source(&s).unwrap();
        assert!(t.f1 < 1.0);
        let (f, lambda, tau) = brute_force(&s);
        assert_eq!((t.f1, t.lambda, t.tau), (f, lambda, tau));
    }

    #[test]
    fn calibrate_source_degenerate() {
        let s = set(&[(0.1, 0.0), (0.5, 0.0), (0.9, 0.0)]);
        assert!(matches!(
            calibrate_source(&s),
            Err(Error::DegenerateCalibration(_))
        ));
    }

    #[test]
    fn calibration_set_validation() {
        assert!(CalibrationSet::new(vec![0.1], vec![0.0], 1.0).is_err());
        assert!(CalibrationSet::new(vec![0.1, 0.2], vec![0.0], 1.0).is_err());
        assert!(CalibrationSet::new(vec![0.1, 0.2], vec![0.0, 1.5], 1.0).is_err());
        assert!(CalibrationSet::new(vec![0.1, f64::NAN], vec![0.0, 0.5], 1.0).is_err());
    }

    #[test]
    fn binary_tau_grid_is_half() {
        assert_eq!(tau_candidates(&[0.0, 1.0, 1.0, 0.0]), vec![0.5]);
        assert_eq!(tau_candidates(&[0.2, 0.2]), Vec::<f64>::new());
        assert_eq!(lambda_candidates(&[0.3, 0.1, 0.3]), vec![-0.9, 0.2, 1.3]);
    }

    #[test]
    fn recalibrate_identity_model() {
        let s = set(&[(0.1, 0.0), (0.35, 1.0), (0.3, 0.0), (0.8, 1.0), (0.6, 0.0)]);
        let t = calibrate_source(&s).unwrap();
        let r = recalibrate_proxy(&s, t.tau, -7.0);
        assert_eq!(r.lambda, t.lambda);
        assert!(!r.degenerate);
        // idempotent
        let again = recalibrate_proxy(&s, t.tau, r.lambda);
        assert_eq!(again, r);
    }

    #[test]
    fn recalibrate_scaled_proxies() {
        let pairs = [
            (0.05, 0.0),
            (0.12, 0.0),
            (0.2, 0.0),
            (0.4, 1.0),
            (0.3, 0.0),
            (0.5, 1.0),
            (0.7, 1.0),
            (0.45, 0.0),
        ];
        let s = set(&pairs);
        let t = calibrate_source(&s).unwrap();
        let shrunk: Vec<(f64, f64)> = pairs.iter().map(|&(u, z)| (0.5 * u, z)).collect();
        let r = recalibrate_proxy(&set(&shrunk), t.tau, t.lambda);
        assert!((r.lambda - 0.5 * t.lambda).abs() < 1e-15);
        assert_eq!(r.f1, t.f1);
    }

    #[test]
    fn recalibrate_degenerate_keeps_previous() {
        let s = set(&[(0.1, 0.0), (0.4, 0.0), (0.9, 0.0)]);
        let r = recalibrate_proxy(&s, 0.5, 0.33);
        assert_eq!(
            r,
            ProxyThreshold {
                lambda: 0.33,
                f1: 0.0,
                degenerate: true
            }
        );
    }

    #[test]
    fn threshold_state_tracks_steps() {
        let s = set(&[(0.1, 0.0), (0.2, 0.0), (0.8, 1.0), (0.9, 1.0)]);
        let mut state = ThresholdState::new(calibrate_source(&s).unwrap());
        assert_eq!(state.current(), 0.5);
        state.recalibrate(&s);
        let shifted = set(&[(0.0, 0.0), (0.1, 0.0), (0.2, 1.0), (0.3, 1.0)]);
        state.recalibrate(&shifted);
        assert_eq!(state.lambdas()[0], 0.5);
        assert!((state.lambdas()[1] - 0.15).abs() < 1e-15);
        assert_eq!(state.tau(), 0.5);
    }

    fn random_set(binary: bool) -> impl Strategy<Value = CalibrationSet> {
        prop::collection::vec((0u8..20, 0u8..6), 2..60).prop_filter_map(
            "constant losses",
            move |raw| {
                let proxies: Vec<f64> = raw.iter().map(|r| r.0 as f64 / 20.0).collect();
                let losses: Vec<f64> = raw
                    .iter()
                    .map(|r| {
                        if binary {
                            (r.1 % 2) as f64
                        } else {
                            r.1 as f64 / 5.0
                        }
                    })
                    .collect();
                let s = CalibrationSet::new(proxies, losses, 1.0).ok()?;
                (!tau_candidates(s.losses()).is_empty()).then_some(s)
            },
        )
    }

    proptest! {
        #[test]
        fn sweep_matches_brute_force(s in random_set(false)) {
            let t = calibrate_source(&s).unwrap();
            let (f, lambda, tau) = brute_force(&s);
            prop_assert_eq!((t.f1, t.lambda, t.tau), (f, lambda, tau));
        }

        #[test]
        fn sweep_matches_brute_force_binary(s in random_set(true)) {
            let t = calibrate_source(&s).unwrap();
            let (f, lambda, tau) = brute_force(&s);
            prop_assert_eq!((t.f1, t.lambda, t.tau), (f, lambda, tau));
        }

        #[test]
        fn f1_is_rank_statistic(s in random_set(false), shift in -3.0f64..3.0, power in 0.3f64..3.0) {
            // strictly increasing map applied to proxies and thresholds alike
            let map = |u: f64| (u + 1.0).powf(power) + shift;
            let mapped = CalibrationSet::new(
                s.proxies().iter().map(|&u| map(u)).collect(),
                s.losses().to_vec(),
                1.0,
            ).unwrap();
            for &tau in &tau_candidates(s.losses()) {
                for &lambda in &lambda_candidates(s.proxies())[1..] {
                    prop_assert_eq!(f1_score(lambda, tau, &s), f1_score(map(lambda), tau, &mapped));
                }
            }
        }
    }
}
