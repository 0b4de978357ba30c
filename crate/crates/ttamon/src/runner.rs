//! The monitoring loop: calibrate the source model once, then per step
//! adapt, recalibrate the proxy threshold, update the bounds and evaluate
//! the alarms.
//!
//! The unsupervised path sees only [`FeatureBatch`]es. Labels flow into the
//! oracle alarm, the diagnostic and the reported empirical risk.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use ttamon_core::calibration::{calibrate_source, CalibrationSet, ThresholdState};
use ttamon_core::monitor::{AlarmKind, Monitor};

use crate::config::{ConfigError, ExperimentConfig};
use crate::output::{csv_path, summary_path, verify_hashes, write_summary, CsvSink};
use crate::simulator::{
    calibration_sample, dominant_fraction, emit_batch, train_source, FeatureBatch, Forward,
    Statistics, StreamBatch, ToyModel, TrainedSource,
};
use crate::SimError;

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error("config error: {0}")]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Core(#[from] ttamon_core::Error),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("config hash mismatch in {file}: expected {expected}, found {found}")]
    HashMismatch {
        file: String,
        expected: String,
        found: String,
    },
    #[error("ordering violated at rep {rep}, step {step}: L_b = {l_b} > L_a = {l_a} with delta_hat = {delta_hat}")]
    Ordering {
        rep: usize,
        step: usize,
        l_b: f64,
        l_a: f64,
        delta_hat: f64,
    },
}

/// One CSV row. `None` marks a disabled alarm or diagnostic.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRow {
    pub step: usize,
    pub severity: f64,
    pub empirical_risk: f64,
    #[serde(rename = "U_hat")]
    pub u_hat: f64,
    #[serde(rename = "L_a")]
    pub l_a: Option<f64>,
    #[serde(rename = "L_b")]
    pub l_b: Option<f64>,
    #[serde(rename = "L_c")]
    pub l_c: Option<f64>,
    pub quantile_bound: Option<f64>,
    pub delta_hat: Option<f64>,
    pub phi_a: Option<bool>,
    pub phi_b: Option<bool>,
    pub phi_tau: Option<bool>,
    pub phi_c: Option<bool>,
    pub lambda_k: f64,
    pub tau: f64,
    pub collapsed_fraction: f64,
    /// `τ`-scaled unsupervised bound (not written to CSV).
    #[serde(skip)]
    pub l_b_scaled: Option<f64>,
    /// Unscaled unsupervised bound (not written to CSV).
    #[serde(skip)]
    pub l_b_unscaled: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlarmSummary {
    pub alarm: AlarmKind,
    pub fired: bool,
    pub t_min: Option<u64>,
    pub threshold: f64,
    pub final_bound: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceSummary {
    pub u_hat: f64,
    pub source_risk: f64,
    pub tau: f64,
    pub lambda_0: f64,
    pub f1: f64,
    pub false_positive_upper: f64,
    pub high_loss_upper: f64,
}

/// Running empirical risk trajectory in brief.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskDigest {
    pub last: f64,
    pub max: f64,
    /// SHA-256 over the little-endian bytes of every step's value.
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepSummary {
    pub rep: usize,
    pub seed: u64,
    pub steps: usize,
    pub source: SourceSummary,
    pub alarms: Vec<AlarmSummary>,
    pub final_delta_hat: Option<f64>,
    pub risk: RiskDigest,
    pub max_collapsed_fraction: f64,
    pub skipped_updates: u64,
    pub config_hash: String,
}

impl RepSummary {
    pub fn alarm(&self, kind: AlarmKind) -> Option<&AlarmSummary> {
        self.alarms.iter().find(|a| a.alarm == kind)
    }

    pub fn t_min(&self, kind: AlarmKind) -> Option<u64> {
        self.alarm(kind).and_then(|a| a.t_min)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub name: String,
    pub config_hash: String,
    pub source_not_converged: bool,
    pub repetitions: Vec<RepSummary>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RepOutcome {
    pub rows: Vec<StepRow>,
    pub summary: RepSummary,
}

/// A validated config with its trained source model, shared by every
/// repetition.
#[derive(Debug, Clone)]
pub struct Experiment {
    config: ExperimentConfig,
    source: TrainedSource,
    hash: String,
}

impl Experiment {
    pub fn new(config: ExperimentConfig) -> Result<Self, RunError> {
        config.validate()?;
        let mut source = train_source(&config.source)?;
        source.model.learning_rate = config.adaptation.learning_rate;
        source.model.momentum = config.adaptation.momentum;
        source.model.regime = config.adaptation.regime;
        let hash = config.hash();
        Ok(Self {
            config,
            source,
            hash,
        })
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.config
    }

    pub fn source(&self) -> &TrainedSource {
        &self.source
    }

    pub fn hash(&self) -> &str {
        &self.hash
    }

    pub fn rep_seed(&self, rep: usize) -> u64 {
        self.config.seed.wrapping_add(rep as u64)
    }

    pub fn run_rep(&self, rep: usize) -> Result<RepOutcome, RunError> {
        let mut rows = Vec::new();
        let summary = self.run_rep_with(
            rep,
            |b| b,
            |r| {
                rows.push(r.clone());
                Ok(())
            },
        )?;
        Ok(RepOutcome { rows, summary })
    }

    /// Every repetition in memory, in parallel, returned in order.
    pub fn run_all(&self) -> Result<Vec<RepOutcome>, RunError> {
        (0..self.config.repetitions)
            .into_par_iter()
            .map(|rep| self.run_rep(rep))
            .collect()
    }

    /// Run every repetition, streaming `<name>_rep<k>.csv` into `dir`, then
    /// write `<name>_summary.json`. With `check_ordering` a row with
    /// `L_b > L_a` while `delta_hat >= 0` aborts its repetition.
    pub fn run_to_dir(&self, dir: &Path, check_ordering: bool) -> Result<RunSummary, RunError> {
        std::fs::create_dir_all(dir)?;
        let name = &self.config.name;
        let reps: Vec<RepSummary> = (0..self.config.repetitions)
            .into_par_iter()
            .map(|rep| {
                let mut sink = CsvSink::create(&csv_path(dir, name, rep), &self.hash)?;
                let summary = self.run_rep_with(
                    rep,
                    |b| b,
                    |row| {
                        sink.write(row)?;
                        if check_ordering {
                            check_row_ordering(rep, row)?;
                        }
                        Ok(())
                    },
                )?;
                sink.finish()?;
                Ok(summary)
            })
            .collect::<Result<_, RunError>>()?;
        let summary = RunSummary {
            name: name.clone(),
            config_hash: self.hash.clone(),
            source_not_converged: self.source.not_converged,
            repetitions: reps,
        };
        write_summary(&summary_path(dir, name), &summary)?;
        verify_hashes(dir, &summary)?;
        Ok(summary)
    }

    /// Run one repetition, passing each emitted batch through `map` and
    /// each finished row to `sink`.
    pub fn run_rep_with(
        &self,
        rep: usize,
        mut map: impl FnMut(StreamBatch) -> StreamBatch,
        mut sink: impl FnMut(&StepRow) -> Result<(), RunError>,
    ) -> Result<RepSummary, RunError> {
        let cfg = &self.config;
        let seed = self.rep_seed(rep);
        let loss = cfg.monitor.loss;
        let proxy = cfg.monitor.proxy;
        let monitor_config = cfg.monitor_config();
        let period = monitor_config.recalibration_period;
        let adapt = cfg.adaptation.enabled;
        let unsupervised_on = cfg.enabled(AlarmKind::Unsupervised);
        let quantile_on = cfg.enabled(AlarmKind::Quantile);
        let oracle_on = cfg.enabled(AlarmKind::SupervisedOracle);
        let plugin_on = cfg.enabled(AlarmKind::NaivePlugin);

        let mut model = self.source.model.clone();
        let cal = calibration_sample(&cfg.source, seed, cfg.calibration_size);
        let source_set = calibration_set(&model, cal.features(), cal.labels(), cfg)?;
        let thresholds = calibrate_source(&source_set)?;
        let mut state = ThresholdState::new(thresholds);
        let mut monitor = Monitor::init_source(&source_set, thresholds, monitor_config)?;
        let u_hat = monitor.source().risk_upper();

        let mut loss_sum = 0.0;
        let mut samples = 0usize;
        let mut risk_hash = Sha256::new();
        let mut risk_max = f64::NEG_INFINITY;
        let mut max_collapse: f64 = 0.0;
        let mut last: Option<StepRow> = None;
        let mut final_bounds = [f64::NAN; 4];

        for k in 1..=cfg.schedule.steps {
            let batch = map(emit_batch(&cfg.source, &cfg.schedule, seed, k)?);
            if adapt {
                model.tta_update(batch.features());
            }
            let lambda_k = if adapt && (k - 1) % period == 0 {
                let set = calibration_set(&model, cal.features(), cal.labels(), cfg)?;
                state.recalibrate(&set).lambda
            } else {
                let l = state.current();
                state.push(l);
                l
            };

            // unsupervised path: features only
            let fwd = model.forward(batch.features(), Statistics::Running);
            let proxies = model.proxies(&fwd, proxy);
            let unsup = if unsupervised_on || quantile_on {
                Some(monitor.observe_unsupervised(&proxies, lambda_k)?)
            } else {
                None
            };
            let plugin = if plugin_on {
                Some(monitor.observe_naive_plugin(&proxies)?)
            } else {
                None
            };

            // labeled path
            let losses = fwd.losses(loss, batch.labels())?;
            let oracle = if oracle_on {
                Some(monitor.observe_supervised_oracle(&losses)?)
            } else {
                None
            };
            let diag = if cfg.diagnostics {
                Some(monitor.diagnostics_delta(&losses, &proxies, lambda_k)?)
            } else {
                None
            };
            loss_sum += losses.iter().sum::<f64>();
            samples += losses.len();
            let risk = loss_sum / samples as f64;
            risk_hash.update(risk.to_le_bytes());
            risk_max = risk_max.max(risk);
            let collapse = collapsed_fraction(&fwd, model.classes());
            max_collapse = max_collapse.max(collapse);

            let row = StepRow {
                step: k,
                severity: batch.severity,
                empirical_risk: risk,
                u_hat,
                l_a: oracle.map(|r| r.bound),
                l_b: unsup
                    .filter(|_| unsupervised_on)
                    .map(|s| s.unsupervised.bound),
                l_c: plugin.map(|p| p.report.bound),
                quantile_bound: unsup.filter(|_| quantile_on).map(|s| s.quantile.bound),
                delta_hat: diag.map(|d| d.delta_hat),
                phi_a: oracle.map(|r| r.fired),
                phi_b: unsup
                    .filter(|_| unsupervised_on)
                    .map(|s| s.unsupervised.fired),
                phi_tau: unsup.filter(|_| quantile_on).map(|s| s.quantile.fired),
                phi_c: plugin.map(|p| p.report.fired),
                lambda_k,
                tau: monitor.tau(),
                collapsed_fraction: collapse,
                l_b_scaled: unsup.map(|s| s.scaled_bound),
                l_b_unscaled: unsup.map(|s| s.unscaled_bound),
            };
            for (slot, v) in
                final_bounds
                    .iter_mut()
                    .zip([row.l_a, row.l_b, row.quantile_bound, row.l_c])
            {
                if let Some(v) = v {
                    *slot = v;
                }
            }
            sink(&row)?;
            last = Some(row);
            if cfg.terminate_on_alarm && unsupervised_on && monitor.fired(AlarmKind::Unsupervised) {
                break;
            }
        }

        let last = last.expect("at least one step");
        let alarms = AlarmKind::ALL
            .iter()
            .enumerate()
            .filter(|(_, k)| cfg.enabled(**k))
            .map(|(i, &kind)| {
                let latched = monitor.latched(kind);
                AlarmSummary {
                    alarm: kind,
                    fired: latched.is_some(),
                    t_min: latched.and_then(|r| r.t_min),
                    threshold: monitor.threshold(kind),
                    final_bound: final_bounds[i],
                }
            })
            .collect();
        let src = monitor.source();
        Ok(RepSummary {
            rep,
            seed,
            steps: last.step,
            source: SourceSummary {
                u_hat,
                source_risk: src.risk.mean,
                tau: src.tau,
                lambda_0: src.lambda,
                f1: thresholds.f1,
                false_positive_upper: src.false_positive_upper(),
                high_loss_upper: src.high_loss_upper(),
            },
            alarms,
            final_delta_hat: last.delta_hat,
            risk: RiskDigest {
                last: last.empirical_risk,
                max: risk_max,
                sha256: hex::encode(risk_hash.finalize()),
            },
            max_collapsed_fraction: max_collapse,
            skipped_updates: model.skipped_updates(),
            config_hash: self.hash.clone(),
        })
    }
}

/// Losses and proxies of `model` on the labeled calibration data, with the
/// calibration set normalized by its own (source) statistics.
fn calibration_set(
    model: &ToyModel,
    features: &FeatureBatch,
    labels: &[usize],
    cfg: &ExperimentConfig,
) -> Result<CalibrationSet, RunError> {
    let fwd = model.forward(features, Statistics::Source);
    let proxies = model.proxies(&fwd, cfg.monitor.proxy);
    let losses = fwd.losses(cfg.monitor.loss, labels)?;
    Ok(CalibrationSet::new(
        proxies,
        losses,
        cfg.monitor.loss.bound(),
    )?)
}

fn collapsed_fraction(fwd: &Forward, classes: usize) -> f64 {
    let mut counts = vec![0; classes];
    for c in fwd.predictions() {
        counts[c] += 1;
    }
    dominant_fraction(&counts)
}

/// `L_b <= L_a` wherever `delta_hat >= 0`; rows missing either bound pass.
pub fn check_row_ordering(rep: usize, row: &StepRow) -> Result<(), RunError> {
    if let (Some(l_a), Some(l_b), Some(delta_hat)) = (row.l_a, row.l_b, row.delta_hat) {
        if delta_hat >= 0.0 && l_b > l_a {
            return Err(RunError::Ordering {
                rep,
                step: row.step,
                l_b,
                l_a,
                delta_hat,
            });
        }
    }
    Ok(())
}

/// Outcome of [`compare_alarms`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareReport {
    pub summary: RunSummary,
    /// Rows where `delta_hat >= 0`, i.e. where the ordering was asserted.
    pub rows_checked: usize,
    pub rows_total: usize,
    /// Repetitions where `Φ^b` fired strictly before `Φ^a`.
    pub detection_order_violations: Vec<usize>,
}

/// Run the config with all bound columns and assert `L_b <= L_a` wherever
/// `delta_hat >= 0`. The ordering failure is a hard error.
pub fn compare_alarms(config: &ExperimentConfig, dir: &Path) -> Result<CompareReport, RunError> {
    let missing = |what: &str| {
        RunError::Config(ConfigError {
            path: what.into(),
            message: "compare needs the oracle, the unsupervised alarm and diagnostics".into(),
        })
    };
    if !config.diagnostics {
        return Err(missing("diagnostics"));
    }
    for kind in [AlarmKind::SupervisedOracle, AlarmKind::Unsupervised] {
        if !config.enabled(kind) {
            return Err(missing("alarms"));
        }
    }
    let exp = Experiment::new(config.clone())?;
    let summary = exp.run_to_dir(dir, true)?;
    let (mut rows_checked, mut rows_total) = (0, 0);
    for rep in &summary.repetitions {
        let rows = crate::output::read_rows(&csv_path(dir, &summary.name, rep.rep))?;
        rows_total += rows.len();
        rows_checked += rows
            .iter()
            .filter(|r| r.delta_hat.is_some_and(|d| d >= 0.0))
            .count();
    }
    let detection_order_violations = summary
        .repetitions
        .iter()
        .filter(|r| {
            match (
                r.t_min(AlarmKind::SupervisedOracle),
                r.t_min(AlarmKind::Unsupervised),
            ) {
                (a, Some(b)) => a.map_or(true, |a| a > b),
                _ => false,
            }
        })
        .map(|r| r.rep)
        .collect();
    Ok(CompareReport {
        summary,
        rows_checked,
        rows_total,
        detection_order_violations,
    })
}
