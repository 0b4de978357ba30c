//! Bounded per-sample losses and unsupervised loss proxies.
//!
//! Both losses live in `[0, 1]`, so the range bound handed to the confidence
//! machinery is `1` for either kind. Proxies carry no common range: the
//! calibration step searches thresholds over observed proxy values, so raw
//! energies work as well as uncertainties.

use alloc::vec::Vec;

use crate::{Error, Result};

/// Absolute tolerance on the simplex constraint `sum(p) == 1`.
pub const SIMPLEX_TOLERANCE: f64 = 1e-9;

/// A point on the probability simplex with at least two classes.
///
/// Construction validates; it never renormalizes.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbVector(Vec<f64>);

impl ProbVector {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.len() < 2 {
            return Err(Error::InvalidProbVector("fewer than two classes"));
        }
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::InvalidProbVector("entry outside [0, 1]"));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > SIMPLEX_TOLERANCE {
            return Err(Error::InvalidProbVector("entries do not sum to 1"));
        }
        Ok(Self(probs))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn classes(&self) -> usize {
        self.0.len()
    }

    /// Predicted class; ties go to the lowest index.
    pub fn argmax(&self) -> usize {
        argmax(&self.0)
    }

    pub fn max(&self) -> f64 {
        self.0.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

/// Index of the largest entry, lowest index on ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum LossKind {
    ZeroOne,
    Brier,
}

impl LossKind {
    /// Upper end `M` of the loss range `[0, M]`.
    pub fn bound(self) -> f64 {
        1.0
    }

    pub fn is_binary(self) -> bool {
        matches!(self, LossKind::ZeroOne)
    }

    pub fn evaluate(self, p: &ProbVector, label: usize) -> Result<LossValue> {
        match self {
            LossKind::ZeroOne => zero_one_loss(p, label),
            LossKind::Brier => brier_loss(p, label),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum ProxyKind {
    Uncertainty,
    Energy,
    PrototypeDistance,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossValue {
    pub value: f64,
    pub kind: LossKind,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProxyValue {
    pub value: f64,
    pub kind: ProxyKind,
}

fn check_label(p: &ProbVector, label: usize) -> Result<()> {
    if label >= p.classes() {
        return Err(Error::LabelOutOfRange {
            label,
            classes: p.classes(),
        });
    }
    Ok(())
}

pub fn zero_one_loss(p: &ProbVector, label: usize) -> Result<LossValue> {
    check_label(p, label)?;
    let value = if p.argmax() == label { 0.0 } else { 1.0 };
    Ok(LossValue {
        value,
        kind: LossKind::ZeroOne,
    })
}

/// Half the squared distance between `p` and the one-hot label vector.
pub fn brier_loss(p: &ProbVector, label: usize) -> Result<LossValue> {
    check_label(p, label)?;
    let sq: f64 = p
        .as_slice()
        .iter()
        .enumerate()
        .map(|(c, &pc)| {
            let target = if c == label { 1.0 } else { 0.0 };
            (pc - target) * (pc - target)
        })
        .sum();
    Ok(LossValue {
        value: (0.5 * sq).clamp(0.0, 1.0),
        kind: LossKind::Brier,
    })
}

/// One minus the maximum class probability.
pub fn uncertainty_proxy(p: &ProbVector) -> ProxyValue {
    ProxyValue {
        value: 1.0 - p.max(),
        kind: ProxyKind::Uncertainty,
    }
}

/// Negative log-sum-exp of the logits.
pub fn energy_proxy(logits: &[f64]) -> Result<ProxyValue> {
    if logits.is_empty() {
        return Err(Error::EmptyInput("logits"));
    }
    Ok(ProxyValue {
        value: -log_sum_exp(logits),
        kind: ProxyKind::Energy,
    })
}

/// Stable `log(sum(exp(x)))`.
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    let sum: f64 = values.iter().map(|&v| libm::exp(v - max)).sum();
    max + libm::log(sum)
}

/// Squared Euclidean distance from `feature` to the closest prototype row.
pub fn prototype_distance_proxy<R: AsRef<[f64]>>(
    feature: &[f64],
    prototypes: &[R],
) -> Result<ProxyValue> {
    if prototypes.is_empty() {
        return Err(Error::EmptyInput("prototypes"));
    }
    let mut best = f64::INFINITY;
    for row in prototypes {
        let row = row.as_ref();
        if row.len() != feature.len() {
            return Err(Error::DimensionMismatch {
                expected: feature.len(),
                found: row.len(),
            });
        }
        let d: f64 = row
            .iter()
            .zip(feature)
            .map(|(w, f)| (f - w) * (f - w))
            .sum();
        best = best.min(d);
    }
    Ok(ProxyValue {
        value: best,
        kind: ProxyKind::PrototypeDistance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use proptest::prelude::*;

    fn pv(p: &[f64]) -> ProbVector {
        ProbVector::new(p.to_vec()).unwrap()
    }

    #[test]
    fn zero_one_examples() {
        assert_eq!(zero_one_loss(&pv(&[0.7, 0.3]), 0).unwrap().value, 0.0);
        assert_eq!(zero_one_loss(&pv(&[0.2, 0.8]), 0).unwrap().value, 1.0);
        // tie resolves to class 0
        assert_eq!(zero_one_loss(&pv(&[0.5, 0.5]), 1).unwrap().value, 1.0);
        assert_eq!(zero_one_loss(&pv(&[0.5, 0.5]), 0).unwrap().value, 0.0);
    }

    #[test]
    fn label_out_of_range() {
        let p = pv(&[0.5, 0.5]);
        assert_eq!(
            zero_one_loss(&p, 2),
            Err(Error::LabelOutOfRange {
                label: 2,
                classes: 2
            })
        );
        assert!(brier_loss(&p, 7).is_err());
    }

    #[test]
    fn brier_examples() {
        assert_eq!(brier_loss(&pv(&[1.0, 0.0]), 0).unwrap().value, 0.0);
        assert_eq!(brier_loss(&pv(&[0.5, 0.5]), 0).unwrap().value, 0.25);
        assert_eq!(brier_loss(&pv(&[0.5, 0.5]), 1).unwrap().value, 0.25);
        assert!((brier_loss(&pv(&[0.8, 0.2]), 1).unwrap().value - 0.64).abs() < 1e-15);
    }

    #[test]
    fn uncertainty_examples() {
        assert_eq!(uncertainty_proxy(&pv(&[1.0, 0.0])).value, 0.0);
        assert!((uncertainty_proxy(&pv(&[0.6, 0.4])).value - 0.4).abs() < 1e-15);
        let uniform = pv(&[0.2; 5]);
        assert!((uncertainty_proxy(&uniform).value - 0.8).abs() < 1e-15);
    }

    #[test]
    fn energy_examples() {
        let e = energy_proxy(&[0.0, 0.0]).unwrap().value;
        assert!((e + core::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(energy_proxy(&[3.5]).unwrap().value, -3.5);
        let big = energy_proxy(&[1000.0, 0.0]).unwrap().value;
        assert!((big + 1000.0).abs() < 1e-6);
        assert_eq!(energy_proxy(&[]), Err(Error::EmptyInput("logits")));
    }

    #[test]
    fn prototype_examples() {
        let protos = vec![vec![1.0, 0.0], vec![0.0, 2.0]];
        assert_eq!(
            prototype_distance_proxy(&[0.0, 0.0], &protos)
                .unwrap()
                .value,
            1.0
        );
        assert_eq!(
            prototype_distance_proxy(&[0.0, 2.0], &protos)
                .unwrap()
                .value,
            0.0
        );
        let single = [[3.0, 4.0]];
        assert_eq!(
            prototype_distance_proxy(&[0.0, 0.0], &single)
                .unwrap()
                .value,
            25.0
        );
        assert!(matches!(
            prototype_distance_proxy(&[0.0], &protos),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn simplex_validation() {
        assert!(ProbVector::new(vec![1.0]).is_err());
        assert!(ProbVector::new(vec![0.6, 0.6]).is_err());
        assert!(ProbVector::new(vec![1.2, -0.2]).is_err());
        assert!(ProbVector::new(vec![0.5, 0.5 + 5e-10]).is_ok());
        assert!(ProbVector::new(vec![0.5, 0.5 + 5e-9]).is_err());
    }

    fn simplex(max_classes: usize) -> impl Strategy<Value = ProbVector> {
        prop::collection::vec(0.0f64..1.0, 2..=max_classes).prop_filter_map(
            "degenerate weights",
            |w| {
                let total: f64 = w.iter().sum();
                if total <= 1e-6 {
                    return None;
                }
                let mut p: Vec<f64> = w.iter().map(|x| x / total).collect();
                let drift: f64 = 1.0 - p.iter().sum::<f64>();
                p[0] = (p[0] + drift).clamp(0.0, 1.0);
                ProbVector::new(p).ok()
            },
        )
    }

    proptest! {
        #[test]
        fn losses_stay_in_range(p in simplex(6), label in 0usize..6) {
            let label = label % p.classes();
            let b = brier_loss(&p, label).unwrap().value;
            let z = zero_one_loss(&p, label).unwrap().value;
            prop_assert!((0.0..=1.0).contains(&b));
            prop_assert!(z == 0.0 || z == 1.0);
            if z == 0.0 {
                prop_assert!(b <= 0.5 + 1e-12);
            }
        }

        #[test]
        fn brier_zero_only_at_one_hot(p in simplex(5), label in 0usize..5) {
            let label = label % p.classes();
            let b = brier_loss(&p, label).unwrap().value;
            let one_hot = p.as_slice()[label] == 1.0;
            prop_assert_eq!(b == 0.0, one_hot);
        }

        #[test]
        fn uncertainty_permutation_invariant(p in simplex(6), rot in 0usize..6) {
            let mut q = p.clone().into_inner();
            let k = rot % q.len();
            q.rotate_left(k);
            q.reverse();
            let q = ProbVector::new(q).unwrap();
            prop_assert_eq!(uncertainty_proxy(&p).value, uncertainty_proxy(&q).value);
        }

        #[test]
        fn energy_shift_identity(
            logits in prop::collection::vec(-50.0f64..50.0, 1..8),
            shift in -100.0f64..100.0,
        ) {
            let shifted: Vec<f64> = logits.iter().map(|l| l + shift).collect();
            let a = energy_proxy(&logits).unwrap().value;
            let b = energy_proxy(&shifted).unwrap().value;
            prop_assert!((b - (a - shift)).abs() < 1e-9);
        }

        #[test]
        fn appending_prototype_never_increases_distance(
            feature in prop::collection::vec(-5.0f64..5.0, 3),
            rows in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 3), 1..5),
            extra in prop::collection::vec(-5.0f64..5.0, 3),
        ) {
            let before = prototype_distance_proxy(&feature, &rows).unwrap().value;
            let mut more = rows.clone();
            more.push(extra);
            let after = prototype_distance_proxy(&feature, &more).unwrap().value;
            prop_assert!(after <= before);
        }
    }
}
