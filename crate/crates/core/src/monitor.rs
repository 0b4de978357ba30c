//! Sequential tests and alarms over a stream of test batches.
//!
//! Every alarm compares a lower confidence sequence on the running test risk
//! with the static upper bound `U` on the source risk plus a tolerance:
//!
//! - supervised oracle (`Φ^a`): CM-EB lower bound on the adapted model's
//!   test losses; needs labels.
//! - unsupervised (`Φ^b`): CM-EB lower bound on the proxy exceedance rate
//!   `1[u > λ_k]`, minus a Hoeffding upper bound on the source
//!   false-positive rate `P(u_0 > λ_0, z_0 ≤ τ)`, scaled by `τ` for general
//!   losses. For the 0-1 loss the scaling is dropped, which is still a valid
//!   lower bound and strictly tighter.
//! - quantile (`Φ^τ`): the same bound without the `τ` scaling, tested against
//!   an upper bound on the source probability of high loss `P(z_0 > τ)` with
//!   tolerance `ε/τ`.
//! - naive plugin (`Φ^c`): proxies fed to the CM-EB bound as if they were
//!   losses. No validity claim; kept as a baseline.
//!
//! The `alpha_test` budget is split between the exceedance sequence
//! (`alpha_test_1`) and the false-positive term (`alpha_test_2`). Once an
//! alarm fires its report is latched and returned unchanged afterwards.

use crate::calibration::{CalibrationSet, SourceThresholds};
use crate::confseq::{default_intrinsic_time, EmpiricalBernstein, HoeffdingInterval};
use crate::losses::{LossKind, ProxyKind};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct MonitorConfig {
    pub loss: LossKind,
    #[cfg_attr(feature = "serde", serde(default = "default_proxy"))]
    pub proxy: ProxyKind,
    /// Tolerance on the risk scale. Defaults to 0.05 for 0-1, 0.01 for Brier.
    #[cfg_attr(feature = "serde", serde(default))]
    pub epsilon_tol: Option<f64>,
    #[cfg_attr(feature = "serde", serde(default = "default_alpha_source"))]
    pub alpha_source: f64,
    #[cfg_attr(feature = "serde", serde(default = "default_alpha_test"))]
    pub alpha_test: f64,
    /// Part of `alpha_test` spent on the exceedance sequence; half if unset.
    #[cfg_attr(feature = "serde", serde(default))]
    pub alpha_test_1: Option<f64>,
    /// Total number of test samples, when known in advance.
    #[cfg_attr(feature = "serde", serde(default))]
    pub stream_length: Option<u64>,
    pub batch_size: usize,
    #[cfg_attr(feature = "serde", serde(default = "default_period"))]
    pub recalibration_period: usize,
    /// Overrides the variance-process value the sequences are tuned for.
    #[cfg_attr(feature = "serde", serde(default))]
    pub intrinsic_time: Option<f64>,
}

#[cfg(feature = "serde")]
fn default_proxy() -> ProxyKind {
    ProxyKind::Uncertainty
}
#[cfg(feature = "serde")]
fn default_alpha_source() -> f64 {
    0.025
}
#[cfg(feature = "serde")]
fn default_alpha_test() -> f64 {
    0.175
}
#[cfg(feature = "serde")]
fn default_period() -> usize {
    1
}

impl MonitorConfig {
    pub fn new(loss: LossKind, batch_size: usize) -> Self {
        Self {
            loss,
            proxy: ProxyKind::Uncertainty,
            epsilon_tol: None,
            alpha_source: 0.025,
            alpha_test: 0.175,
            alpha_test_1: None,
            stream_length: None,
            batch_size,
            recalibration_period: 1,
            intrinsic_time: None,
        }
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon_tol.unwrap_or(match self.loss {
            LossKind::ZeroOne => 0.05,
            LossKind::Brier => 0.01,
        })
    }

    /// `(alpha_test_1, alpha_test_2)`.
    pub fn alpha_split(&self) -> (f64, f64) {
        let a1 = self.alpha_test_1.unwrap_or(0.5 * self.alpha_test);
        (a1, self.alpha_test - a1)
    }

    pub fn total_alpha(&self) -> f64 {
        self.alpha_source + self.alpha_test
    }

    pub fn range(&self) -> f64 {
        self.loss.bound()
    }

    pub fn intrinsic_time(&self) -> f64 {
        self.intrinsic_time
            .unwrap_or_else(|| default_intrinsic_time(self.stream_length, self.range()))
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |name, value: f64| {
            if value > 0.0 && value < 1.0 {
                Ok(())
            } else {
                Err(Error::InvalidParameter { name, value })
            }
        };
        unit("alpha_source", self.alpha_source)?;
        unit("alpha_test", self.alpha_test)?;
        unit("alpha_source + alpha_test", self.total_alpha())?;
        let (a1, a2) = self.alpha_split();
        unit("alpha_test_1", a1)?;
        unit("alpha_test_2", a2)?;
        let eps = self.epsilon();
        if !(eps >= 0.0 && eps.is_finite()) {
            return Err(Error::InvalidParameter {
                name: "epsilon_tol",
                value: eps,
            });
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidParameter {
                name: "batch_size",
                value: 0.0,
            });
        }
        if self.recalibration_period == 0 {
            return Err(Error::InvalidParameter {
                name: "recalibration_period",
                value: 0.0,
            });
        }
        let v = self.intrinsic_time();
        if !(v > 0.0 && v.is_finite()) {
            return Err(Error::InvalidParameter {
                name: "intrinsic_time",
                value: v,
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum AlarmKind {
    SupervisedOracle,
    Unsupervised,
    Quantile,
    NaivePlugin,
}

impl AlarmKind {
    pub const ALL: [AlarmKind; 4] = [
        AlarmKind::SupervisedOracle,
        AlarmKind::Unsupervised,
        AlarmKind::Quantile,
        AlarmKind::NaivePlugin,
    ];

    /// Short name of the alarm: `Phi^a`, `Phi^b`, `Phi^tau` or `Phi^c`.
    pub fn symbol(self) -> &'static str {
        match self {
            AlarmKind::SupervisedOracle => "Phi^a",
            AlarmKind::Unsupervised => "Phi^b",
            AlarmKind::Quantile => "Phi^tau",
            AlarmKind::NaivePlugin => "Phi^c",
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

/// One alarm evaluation: the tested bound, the level it must exceed and
/// whether it has fired (at step `t_min`).
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct BoundReport {
    pub step: u64,
    pub bound: f64,
    pub threshold: f64,
    pub fired: bool,
    pub t_min: Option<u64>,
}

#[derive(Debug, Clone, PartialEq)]
struct Latch {
    threshold: f64,
    fired: Option<BoundReport>,
}

impl Latch {
    fn new(threshold: f64) -> Self {
        Self {
            threshold,
            fired: None,
        }
    }

    fn evaluate(&mut self, step: u64, bound: f64) -> BoundReport {
        if let Some(r) = self.fired {
            return r;
        }
        let fired = bound > self.threshold;
        let report = BoundReport {
            step,
            bound,
            threshold: self.threshold,
            fired,
            t_min: fired.then_some(step),
        };
        if fired {
            self.fired = Some(report);
        }
        report
    }

    // current bound, latched status
    fn observe(&mut self, step: u64, bound: f64) -> BoundReport {
        match self.fired {
            Some(r) => BoundReport {
                step,
                bound,
                threshold: self.threshold,
                fired: true,
                t_min: r.t_min,
            },
            None => self.evaluate(step, bound),
        }
    }
}

/// Everything estimated once from the source model on the calibration set.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SourceBounds {
    pub tau: f64,
    pub lambda: f64,
    /// Source risk, `alpha_source`.
    pub risk: HoeffdingInterval,
    /// `P(u_0 > λ_0, z_0 ≤ τ)`, `alpha_test_2`.
    pub false_positive: HoeffdingInterval,
    /// `P(z_0 > τ)`, `alpha_source`.
    pub high_loss: HoeffdingInterval,
}

impl SourceBounds {
    /// `U`.
    pub fn risk_upper(&self) -> f64 {
        self.risk.upper()
    }

    pub fn false_positive_upper(&self) -> f64 {
        self.false_positive.upper()
    }

    /// `U^b`, an upper bound on `τ · P(z_0 > τ)`.
    pub fn high_loss_upper(&self) -> f64 {
        self.tau * self.high_loss.upper()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UnsupervisedStep {
    pub step: u64,
    /// CM-EB lower bound on the running exceedance rate.
    pub exceedance_lower: f64,
    pub false_positive_upper: f64,
    /// `τ · max(0, exceedance_lower - false_positive_upper)`.
    pub scaled_bound: f64,
    /// `max(0, exceedance_lower - false_positive_upper)`: the 0-1 loss
    /// bound and the quantity tested by the quantile alarm.
    pub unscaled_bound: f64,
    /// `Φ^b`; its bound is `unscaled_bound` for 0-1 loss, `scaled_bound`
    /// otherwise.
    pub unsupervised: BoundReport,
    /// `Φ^τ`, tested on `unscaled_bound`.
    pub quantile: BoundReport,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PluginStep {
    pub report: BoundReport,
    /// Some proxy fell outside the loss range and was clamped.
    pub clamped: bool,
}

/// Assumption diagnostic on a label-revealing stream.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct DiagnosticsRecord {
    pub step: u64,
    /// Batch rate of `u > λ_k, z ≤ τ`.
    pub pfp: f64,
    /// Batch rate of `u ≤ λ_k, z > τ`.
    pub pfn: f64,
    /// `PFP_0 + mean_k (PFN_k - PFP_k)`; non-negative when the proxy
    /// assumption holds empirically.
    pub delta_hat: f64,
    /// Running mean of the test losses.
    pub empirical_risk: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
struct Diagnostics {
    steps: u64,
    slack_sum: f64,
    loss_sum: f64,
    samples: u64,
}

/// Per-stream monitoring state. Single writer; clone for snapshots.
#[derive(Debug, Clone, PartialEq)]
pub struct Monitor {
    config: MonitorConfig,
    source: SourceBounds,
    oracle: EmpiricalBernstein,
    exceedance: EmpiricalBernstein,
    plugin: EmpiricalBernstein,
    steps: [u64; 3],
    latches: [Latch; 4],
    diagnostics: Diagnostics,
}

const ORACLE: usize = 0;
const EXCEEDANCE: usize = 1;
const PLUGIN: usize = 2;

impl Monitor {
    /// Source-side bounds from the source model's calibration losses and
    /// proxies, plus fresh test-side sequences.
    pub fn init_source(
        calibration: &CalibrationSet,
        thresholds: SourceThresholds,
        config: MonitorConfig,
    ) -> Result<Self> {
        config.validate()?;
        let range = config.range();
        let (alpha_1, alpha_2) = config.alpha_split();
        let (tau, lambda) = (thresholds.tau, thresholds.lambda);
        if !(tau > 0.0 && tau < range) {
            return Err(Error::InvalidParameter {
                name: "tau",
                value: tau,
            });
        }
        let losses = calibration.losses();
        let proxies = calibration.proxies();
        let risk = HoeffdingInterval::from_samples(losses, config.alpha_source, range)?;
        let fp_flags: alloc::vec::Vec<bool> = proxies
            .iter()
            .zip(losses)
            .map(|(&u, &z)| u > lambda && z <= tau)
            .collect();
        let false_positive = HoeffdingInterval::from_indicators(&fp_flags, alpha_2)?;
        let high_flags: alloc::vec::Vec<bool> = losses.iter().map(|&z| z > tau).collect();
        let high_loss = HoeffdingInterval::from_indicators(&high_flags, config.alpha_source)?;
        let source = SourceBounds {
            tau,
            lambda,
            risk,
            false_positive,
            high_loss,
        };

        let v_opt = config.intrinsic_time();
        let oracle = EmpiricalBernstein::new(config.alpha_test, range, v_opt)?;
        let exceedance = EmpiricalBernstein::new(alpha_1, 1.0, v_opt / (range * range))?;
        let plugin = EmpiricalBernstein::new(config.alpha_test, range, v_opt)?;

        let eps = config.epsilon();
        let u = source.risk_upper();
        let latches = [
            Latch::new(u + eps),
            Latch::new(u + eps),
            Latch::new(source.high_loss.upper() + eps / tau),
            Latch::new(u + eps),
        ];
        Ok(Self {
            config,
            source,
            oracle,
            exceedance,
            plugin,
            steps: [0; 3],
            latches,
            diagnostics: Diagnostics::default(),
        })
    }

    pub fn config(&self) -> &MonitorConfig {
        &self.config
    }

    pub fn source(&self) -> &SourceBounds {
        &self.source
    }

    pub fn tau(&self) -> f64 {
        self.source.tau
    }

    pub fn threshold(&self, kind: AlarmKind) -> f64 {
        self.latches[kind.index()].threshold
    }

    /// The report frozen at the firing step, if the alarm has fired.
    pub fn latched(&self, kind: AlarmKind) -> Option<BoundReport> {
        self.latches[kind.index()].fired
    }

    pub fn fired(&self, kind: AlarmKind) -> bool {
        self.latched(kind).is_some()
    }

    fn check_batch(&self, len: usize) -> Result<()> {
        if len != self.config.batch_size {
            return Err(Error::DimensionMismatch {
                expected: self.config.batch_size,
                found: len,
            });
        }
        Ok(())
    }

    /// Feed the exceedance indicators `1[u > λ_k]` of one unlabeled batch
    /// and evaluate `Φ^b` and `Φ^τ`.
    ///
    /// Errors with [`Error::MonitorStopped`] once both alarms have fired.
    pub fn step_unsupervised(
        &mut self,
        proxies: &[f64],
        lambda_k: f64,
    ) -> Result<UnsupervisedStep> {
        if self.fired(AlarmKind::Unsupervised) && self.fired(AlarmKind::Quantile) {
            return Err(Error::MonitorStopped);
        }
        self.unsupervised(proxies, lambda_k, true)
    }

    /// [`Monitor::step_unsupervised`] that keeps tracking after the alarms
    /// latch. Reports carry the current bound with the latched status.
    pub fn observe_unsupervised(
        &mut self,
        proxies: &[f64],
        lambda_k: f64,
    ) -> Result<UnsupervisedStep> {
        self.unsupervised(proxies, lambda_k, false)
    }

    fn unsupervised(
        &mut self,
        proxies: &[f64],
        lambda_k: f64,
        frozen: bool,
    ) -> Result<UnsupervisedStep> {
        self.check_batch(proxies.len())?;
        let flags: alloc::vec::Vec<f64> = proxies
            .iter()
            .map(|&u| if u > lambda_k { 1.0 } else { 0.0 })
            .collect();
        self.exceedance.update(&flags)?;
        self.steps[EXCEEDANCE] += 1;
        let step = self.steps[EXCEEDANCE];

        let exceedance_lower = self.exceedance.lower()?;
        let false_positive_upper = self.source.false_positive_upper();
        let unscaled_bound = (exceedance_lower - false_positive_upper).max(0.0);
        let scaled_bound = self.source.tau * unscaled_bound;
        let tested = if self.config.loss.is_binary() {
            unscaled_bound
        } else {
            scaled_bound
        };
        let unsupervised = self.report(AlarmKind::Unsupervised, step, tested, frozen);
        let quantile = self.report(AlarmKind::Quantile, step, unscaled_bound, frozen);
        Ok(UnsupervisedStep {
            step,
            exceedance_lower,
            false_positive_upper,
            scaled_bound,
            unscaled_bound,
            unsupervised,
            quantile,
        })
    }

    fn report(&mut self, kind: AlarmKind, step: u64, bound: f64, frozen: bool) -> BoundReport {
        let latch = &mut self.latches[kind.index()];
        if frozen {
            latch.evaluate(step, bound)
        } else {
            latch.observe(step, bound)
        }
    }

    /// Feed one batch of the adapted model's test losses and evaluate `Φ^a`.
    pub fn step_supervised_oracle(&mut self, losses: &[f64]) -> Result<BoundReport> {
        if self.fired(AlarmKind::SupervisedOracle) {
            return Err(Error::MonitorStopped);
        }
        self.observe_supervised_oracle(losses)
    }

    /// [`Monitor::step_supervised_oracle`] that keeps tracking after `Φ^a`
    /// latches.
    pub fn observe_supervised_oracle(&mut self, losses: &[f64]) -> Result<BoundReport> {
        self.check_batch(losses.len())?;
        self.oracle.update(losses)?;
        self.steps[ORACLE] += 1;
        let bound = self.oracle.lower()?;
        Ok(self.report(
            AlarmKind::SupervisedOracle,
            self.steps[ORACLE],
            bound,
            false,
        ))
    }

    /// Feed proxies as if they were losses and evaluate `Φ^c`. Values outside
    /// the loss range are clamped and flagged.
    pub fn step_naive_plugin(&mut self, proxies: &[f64]) -> Result<PluginStep> {
        if self.fired(AlarmKind::NaivePlugin) {
            return Err(Error::MonitorStopped);
        }
        self.observe_naive_plugin(proxies)
    }

    /// [`Monitor::step_naive_plugin`] that keeps tracking after `Φ^c`
    /// latches.
    pub fn observe_naive_plugin(&mut self, proxies: &[f64]) -> Result<PluginStep> {
        self.check_batch(proxies.len())?;
        let range = self.config.range();
        let mut clamped = false;
        let values: alloc::vec::Vec<f64> = proxies
            .iter()
            .map(|&u| {
                let c = if u.is_nan() { 0.0 } else { u.clamp(0.0, range) };
                clamped |= c != u;
                c
            })
            .collect();
        self.plugin.update(&values)?;
        self.steps[PLUGIN] += 1;
        let bound = self.plugin.lower()?;
        let report = self.report(AlarmKind::NaivePlugin, self.steps[PLUGIN], bound, false);
        Ok(PluginStep { report, clamped })
    }

    /// Update the running assumption diagnostic with one labeled batch.
    /// Never touches any alarm state.
    pub fn diagnostics_delta(
        &mut self,
        losses: &[f64],
        proxies: &[f64],
        lambda_k: f64,
    ) -> Result<DiagnosticsRecord> {
        if losses.len() != proxies.len() {
            return Err(Error::DimensionMismatch {
                expected: proxies.len(),
                found: losses.len(),
            });
        }
        if losses.is_empty() {
            return Err(Error::EmptyInput("diagnostic batch"));
        }
        let tau = self.source.tau;
        let n = losses.len() as f64;
        let (mut fp, mut fn_) = (0usize, 0usize);
        for (&z, &u) in losses.iter().zip(proxies) {
            match (u > lambda_k, z > tau) {
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                _ => {}
            }
        }
        let pfp = fp as f64 / n;
        let pfn = fn_ as f64 / n;
        let d = &mut self.diagnostics;
        d.steps += 1;
        d.slack_sum += pfn - pfp;
        d.loss_sum += losses.iter().sum::<f64>();
        d.samples += losses.len() as u64;
        Ok(DiagnosticsRecord {
            step: d.steps,
            pfp,
            pfn,
            delta_hat: self.source.false_positive.mean + d.slack_sum / d.steps as f64,
            empirical_risk: d.loss_sum / d.samples as f64,
        })
    }
}
