//! Monte Carlo acceptance suite, shared by the `acceptance` test target and
//! `ttamon selftest`.

use std::fmt;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ttamon_core::calibration::{calibrate_source, recalibrate_proxy, CalibrationSet};
use ttamon_core::confseq::{default_intrinsic_time, hoeffding_width, EmpiricalBernstein};
use ttamon_core::losses::LossKind;
use ttamon_core::monitor::AlarmKind;

use crate::config::{AdaptationConfig, ExperimentConfig};
use crate::output::rows_to_csv;
use crate::presets;
use crate::runner::{check_row_ordering, Experiment, RepOutcome, RunError};
use crate::simulator::{emit_batch, Statistics};

/// Repetition counts for every criterion.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Scale {
    pub pfa_runs: usize,
    pub cs_streams: usize,
    pub cs_length: usize,
    pub calibration_sets: usize,
    pub ramp_runs: usize,
    pub sudden_runs: usize,
    pub collapse_runs: usize,
    pub paired_runs: usize,
}

impl Scale {
    pub const FULL: Scale = Scale {
        pfa_runs: 500,
        cs_streams: 1000,
        cs_length: 5000,
        calibration_sets: 200,
        ramp_runs: 50,
        sudden_runs: 100,
        collapse_runs: 100,
        paired_runs: 50,
    };

    pub const REDUCED: Scale = Scale {
        pfa_runs: 100,
        cs_streams: 200,
        cs_length: 5000,
        calibration_sets: 50,
        ramp_runs: 10,
        sudden_runs: 20,
        collapse_runs: 20,
        paired_runs: 10,
    };
}

#[derive(Debug, Clone, PartialEq)]
pub struct Verdict {
    pub id: u8,
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let status = if self.passed { "PASS" } else { "FAIL" };
        write!(
            f,
            "{status} [{:>2}] {}: {}",
            self.id, self.name, self.detail
        )
    }
}

fn verdict(id: u8, name: &'static str, passed: bool, detail: String) -> Verdict {
    Verdict {
        id,
        name,
        passed,
        detail,
    }
}

/// `p + 3 sqrt(p (1 - p) / n)`.
pub fn binomial_limit(p: f64, n: usize) -> f64 {
    p + 3.0 * (p * (1.0 - p) / n as f64).sqrt()
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    match n {
        0 => f64::NAN,
        _ if n % 2 == 1 => values[n / 2],
        _ => 0.5 * (values[n / 2 - 1] + values[n / 2]),
    }
}

/// Runs the criteria and tallies the 0-1 tightening check over every 0-1
/// repetition it executes.
pub struct Suite {
    scale: Scale,
    zero_one_rows: usize,
    tightening_violations: usize,
}

impl Suite {
    pub fn new(scale: Scale) -> Self {
        Self {
            scale,
            zero_one_rows: 0,
            tightening_violations: 0,
        }
    }

    /// All ten criteria in order. `report` sees each verdict as it lands.
    pub fn run_all(&mut self, mut report: impl FnMut(&Verdict)) -> Result<Vec<Verdict>, RunError> {
        let mut out = Vec::with_capacity(10);
        let mut push = |v: Verdict, out: &mut Vec<Verdict>| {
            report(&v);
            out.push(v);
        };
        push(self.false_alarms()?, &mut out);
        push(self.coverage()?, &mut out);
        push(self.hoeffding(), &mut out);
        push(self.calibration_oracle()?, &mut out);
        push(self.ordering()?, &mut out);
        let detection = self.detection()?;
        let collapse = self.collapse()?;
        let benefit = self.adaptation_benefit()?;
        let determinism = self.determinism()?;
        push(self.tightening(), &mut out);
        for v in [detection, collapse, benefit, determinism] {
            push(v, &mut out);
        }
        Ok(out)
    }

    fn reps(
        &mut self,
        mut config: ExperimentConfig,
        reps: usize,
    ) -> Result<Vec<RepOutcome>, RunError> {
        config.repetitions = reps;
        let outcomes = Experiment::new(config.clone())?.run_all()?;
        if config.monitor.loss == LossKind::ZeroOne {
            for row in outcomes.iter().flat_map(|o| &o.rows) {
                if let (Some(unscaled), Some(scaled)) = (row.l_b_unscaled, row.l_b_scaled) {
                    self.zero_one_rows += 1;
                    if unscaled < scaled {
                        self.tightening_violations += 1;
                    }
                }
            }
        }
        Ok(outcomes)
    }

    /// 1: ever-fired rate of `Φ^a`, `Φ^b`, `Φ^τ` without shift.
    pub fn false_alarms(&mut self) -> Result<Verdict, RunError> {
        let n = self.scale.pfa_runs;
        let limit = binomial_limit(0.2, n);
        let start = Instant::now();
        let mut passed = true;
        let mut parts = Vec::new();
        for loss in [LossKind::ZeroOne, LossKind::Brier] {
            let mut config = presets::no_shift(loss);
            config.terminate_on_alarm = false;
            let outcomes = self.reps(config, n)?;
            for kind in [
                AlarmKind::SupervisedOracle,
                AlarmKind::Unsupervised,
                AlarmKind::Quantile,
            ] {
                let fired = outcomes
                    .iter()
                    .filter(|o| o.summary.t_min(kind).is_some())
                    .count();
                let rate = fired as f64 / n as f64;
                passed &= rate <= limit;
                parts.push(format!("{loss:?}/{}={rate:.3}", kind.symbol()));
            }
        }
        let secs = start.elapsed().as_secs_f64();
        passed &= secs < 600.0;
        Ok(verdict(
            1,
            "false alarm rate",
            passed,
            format!(
                "{} runs per loss, limit {limit:.3}: {}; {secs:.1}s",
                n,
                parts.join(" ")
            ),
        ))
    }

    /// 2: time-uniform coverage of the CM-EB lower bound on Bernoulli(1/2).
    pub fn coverage(&self) -> Result<Verdict, RunError> {
        let (n, len) = (self.scale.cs_streams, self.scale.cs_length);
        let alpha = 0.175;
        let v_opt = default_intrinsic_time(Some(len as u64), 1.0);
        let mut misses = 0;
        let mut above_mean = 0usize;
        for stream in 0..n {
            let mut rng = ChaCha8Rng::seed_from_u64(stream as u64);
            let mut cs = EmpiricalBernstein::new(alpha, 1.0, v_opt)?;
            let mut missed = false;
            for _ in 0..len {
                let z = if rng.gen_bool(0.5) { 1.0 } else { 0.0 };
                cs.update(&[z])?;
                let lower = cs.lower()?;
                if lower > cs.mean().expect("observed") {
                    above_mean += 1;
                }
                missed |= lower > 0.5;
            }
            misses += usize::from(missed);
        }
        let rate = misses as f64 / n as f64;
        let limit = binomial_limit(alpha, n);
        Ok(verdict(
            2,
            "confidence sequence coverage",
            rate <= limit && above_mean == 0,
            format!("{n} streams x {len}: miscoverage {rate:.3} (limit {limit:.3}), lower > mean at {above_mean} steps"),
        ))
    }

    /// 3: source Hoeffding width for `alpha = 0.025`, `N = 1000`.
    pub fn hoeffding(&self) -> Verdict {
        let reference = 0.060_736_146_190_830_516_f64;
        let w = hoeffding_width(1000, 0.025);
        let err = (w - reference).abs();
        verdict(
            3,
            "Hoeffding width",
            err < 1e-12,
            format!("w0 = {w:.16}, |w0 - sqrt(ln 40 / 1000)| = {err:.1e}"),
        )
    }

    /// 4: both calibrations against an exhaustive grid search.
    pub fn calibration_oracle(&self) -> Result<Verdict, RunError> {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut mismatches = Vec::new();
        for i in 0..self.scale.calibration_sets {
            let set = random_set(&mut rng);
            let oracle = brute_force_source(&set);
            match (calibrate_source(&set), oracle) {
                (Ok(got), Some((f1, tau, lambda))) => {
                    if got.f1 != f1 || got.tau != tau || got.lambda != lambda {
                        mismatches.push(format!("source #{i}"));
                    }
                }
                (Err(_), None) => {}
                _ => mismatches.push(format!("source #{i} degeneracy")),
            }
            let tau = rng.gen_range(-0.1..1.0);
            let previous = rng.gen::<f64>();
            let got = recalibrate_proxy(&set, tau, previous);
            let (f1, lambda) = brute_force_proxy(&set, tau).unwrap_or((0.0, previous));
            if got.f1 != f1 || got.lambda != lambda {
                mismatches.push(format!("proxy #{i}"));
            }
        }
        Ok(verdict(
            4,
            "calibration oracle",
            mismatches.is_empty(),
            format!(
                "{} random sets, mismatches: {}",
                self.scale.calibration_sets,
                if mismatches.is_empty() {
                    "none".into()
                } else {
                    mismatches.join(", ")
                }
            ),
        ))
    }

    /// 5: `L_b <= L_a` wherever `delta_hat >= 0` on severity ramps.
    pub fn ordering(&mut self) -> Result<Verdict, RunError> {
        let n = self.scale.ramp_runs;
        let (mut checked, mut violations) = (0, 0);
        for adaptation in [AdaptationConfig::default(), AdaptationConfig::frozen()] {
            let mut config = presets::severity_ramp(LossKind::ZeroOne);
            config.adaptation = adaptation;
            config.terminate_on_alarm = false;
            for o in self.reps(config, n)? {
                for row in &o.rows {
                    checked += usize::from(row.delta_hat.is_some_and(|d| d >= 0.0));
                    violations += usize::from(check_row_ordering(o.summary.rep, row).is_err());
                }
            }
        }
        Ok(verdict(
            5,
            "bound ordering",
            violations == 0,
            format!("{n} adapted + {n} frozen ramp runs, {checked} rows with delta_hat >= 0, {violations} violations"),
        ))
    }

    /// 6: for 0-1 loss the unscaled bound dominates the `τ`-scaled one.
    pub fn tightening(&self) -> Verdict {
        verdict(
            6,
            "0-1 tightening",
            self.zero_one_rows > 0 && self.tightening_violations == 0,
            format!(
                "{} rows over every 0-1 run of the suite, {} violations",
                self.zero_one_rows, self.tightening_violations
            ),
        )
    }

    /// 7: sudden severe shift on the frozen model.
    pub fn detection(&mut self) -> Result<Verdict, RunError> {
        let n = self.scale.sudden_runs;
        let mut config = presets::sudden_severe(LossKind::ZeroOne);
        config.adaptation = AdaptationConfig::frozen();
        config.terminate_on_alarm = false;
        let steps = config.schedule.steps as f64;
        let risk = frozen_risk_at_step_one(&config)?;
        let outcomes = self.reps(config.clone(), n)?;
        let threshold = median(
            &mut outcomes
                .iter()
                .filter_map(|o| {
                    o.summary
                        .alarm(AlarmKind::Unsupervised)
                        .map(|a| a.threshold)
                })
                .collect::<Vec<_>>(),
        );
        let margin = risk - threshold;
        let fired = outcomes
            .iter()
            .filter(|o| o.summary.t_min(AlarmKind::Unsupervised).is_some())
            .count();
        let t = |o: &RepOutcome, k| o.summary.t_min(k).map_or(steps + 1.0, |t| t as f64);
        let mut t_a: Vec<f64> = outcomes
            .iter()
            .map(|o| t(o, AlarmKind::SupervisedOracle))
            .collect();
        let mut t_b: Vec<f64> = outcomes
            .iter()
            .map(|o| t(o, AlarmKind::Unsupervised))
            .collect();
        let mut lag: Vec<f64> = t_b.iter().zip(&t_a).map(|(b, a)| b - a).collect();
        let (med_a, med_b, med_lag) = (median(&mut t_a), median(&mut t_b), median(&mut lag));
        let passed = margin >= 0.2 && fired as f64 >= 0.95 * n as f64 && med_lag <= 3.0 * med_a;
        Ok(verdict(
            7,
            "detection under violation",
            passed,
            format!(
                "frozen risk {risk:.3} exceeds U+eps {threshold:.3} by {margin:.3}; Phi^b fired {fired}/{n}; \
                 median t_min Phi^a {med_a}, Phi^b {med_b}, median lag {med_lag} (limit {})",
                3.0 * med_a
            ),
        ))
    }

    /// 8: Φ^b fires once all-weights adaptation collapses the model.
    pub fn collapse(&mut self) -> Result<Verdict, RunError> {
        let n = self.scale.collapse_runs;
        let outcomes = self.reps(presets::collapse(), n)?;
        let (mut detected, mut after, mut within_50) = (0, 0, 0);
        let mut onset = Vec::new();
        for o in &outcomes {
            let collapsed = o
                .rows
                .iter()
                .find(|r| r.collapsed_fraction >= 0.95)
                .map(|r| r.step as u64);
            let fired = o.summary.t_min(AlarmKind::Unsupervised);
            if let Some(c) = collapsed {
                onset.push(c as f64);
                within_50 += usize::from(c <= 50);
                if let Some(b) = fired {
                    detected += 1;
                    after += usize::from(b >= c);
                }
            }
        }
        Ok(verdict(
            8,
            "collapse detection",
            detected as f64 >= 0.95 * n as f64,
            format!(
                "{n} runs: collapsed (>= 95% one class) and Phi^b fired in {detected}, collapse within 50 steps in {within_50}, \
                 median onset step {}, first alarm at or after onset in {after}",
                median(&mut onset)
            ),
        ))
    }

    /// 9: adaptation postpones the unsupervised alarm on severity ramps.
    pub fn adaptation_benefit(&mut self) -> Result<Verdict, RunError> {
        let n = self.scale.paired_runs;
        let mut medians = Vec::new();
        let mut fired = Vec::new();
        for adaptation in [AdaptationConfig::frozen(), AdaptationConfig::default()] {
            let mut config = presets::severity_ramp(LossKind::ZeroOne);
            config.adaptation = adaptation;
            let steps = config.schedule.steps as f64;
            let outcomes = self.reps(config, n)?;
            let mut t: Vec<f64> = outcomes
                .iter()
                .map(|o| {
                    o.summary
                        .t_min(AlarmKind::Unsupervised)
                        .map_or(steps + 1.0, |t| t as f64)
                })
                .collect();
            fired.push(t.iter().filter(|&&t| t <= steps).count());
            medians.push(median(&mut t));
        }
        Ok(verdict(
            9,
            "adaptation benefit",
            medians[1] > medians[0],
            format!(
                "{n} paired seeds, median t_min Phi^b frozen {} vs adapted {} (fired {}/{n} vs {}/{n}; never fired counts as T+1)",
                medians[0], medians[1], fired[0], fired[1]
            ),
        ))
    }

    /// 10: two executions of each shipped config give identical CSV bytes.
    pub fn determinism(&mut self) -> Result<Verdict, RunError> {
        let mut differing = Vec::new();
        for name in presets::NAMES {
            let mut config = presets::by_name(name).expect("known preset");
            config.seed = 11;
            let csv = |c: &ExperimentConfig| -> Result<Vec<u8>, RunError> {
                let exp = Experiment::new(c.clone())?;
                rows_to_csv(&exp.run_rep(0)?.rows, exp.hash())
            };
            if csv(&config)? != csv(&config)? {
                differing.push(name);
            }
        }
        Ok(verdict(
            10,
            "determinism",
            differing.is_empty(),
            format!(
                "{} configs, differing: {:?}",
                presets::NAMES.len(),
                differing
            ),
        ))
    }
}

/// Monte Carlo 0-1 risk of the frozen source model on 10,000 samples from
/// the first step's distribution.
fn frozen_risk_at_step_one(config: &ExperimentConfig) -> Result<f64, RunError> {
    let exp = Experiment::new(config.clone())?;
    let mut schedule = config.schedule.clone();
    schedule.batch_size = 10_000;
    let batch = emit_batch(&config.source, &schedule, u64::MAX / 2, 1)?;
    let model = &exp.source().model;
    let fwd = model.forward(batch.features(), Statistics::Running);
    let losses = fwd.losses(LossKind::ZeroOne, batch.labels())?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

fn random_set(rng: &mut ChaCha8Rng) -> CalibrationSet {
    let n = rng.gen_range(2..=200);
    let proxy_levels = rng.gen_range(2..=40);
    let discrete = rng.gen_bool(0.5);
    let binary = rng.gen_bool(0.5);
    let proxies = (0..n)
        .map(|_| {
            if discrete {
                rng.gen_range(0..proxy_levels) as f64 / proxy_levels as f64
            } else {
                rng.gen()
            }
        })
        .collect();
    let losses = (0..n)
        .map(|_| {
            if binary {
                f64::from(u8::from(rng.gen_bool(0.3)))
            } else {
                (rng.gen::<f64>() * 20.0).floor() / 20.0
            }
        })
        .collect();
    CalibrationSet::new(proxies, losses, 1.0).expect("values in [0, 1]")
}

fn distinct(values: &[f64]) -> Vec<f64> {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    v.dedup();
    v
}

fn lambda_grid(proxies: &[f64]) -> Vec<f64> {
    let d = distinct(proxies);
    let mut grid = vec![d[0] - 1.0];
    grid.extend(d.windows(2).map(|w| 0.5 * (w[0] + w[1])));
    grid.push(d[d.len() - 1] + 1.0);
    grid
}

fn f1_by_counting(set: &CalibrationSet, lambda: f64, tau: f64) -> f64 {
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for (&u, &z) in set.proxies().iter().zip(set.losses()) {
        match (u > lambda, z > tau) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
    }
    let den = 2 * tp + fp + fn_;
    if den == 0 {
        0.0
    } else {
        (2 * tp) as f64 / den as f64
    }
}

/// `(f1, tau, lambda)`, smallest `tau` then smallest `lambda` on ties.
fn brute_force_source(set: &CalibrationSet) -> Option<(f64, f64, f64)> {
    let losses = distinct(set.losses());
    let taus: Vec<f64> = losses.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect();
    let lambdas = lambda_grid(set.proxies());
    let mut best: Option<(f64, f64, f64)> = None;
    for &tau in &taus {
        for &lambda in &lambdas {
            let f1 = f1_by_counting(set, lambda, tau);
            if best.map_or(true, |b| f1 > b.0) {
                best = Some((f1, tau, lambda));
            }
        }
    }
    best
}

/// `(f1, lambda)` at fixed `tau`, or `None` when no loss exceeds `tau`.
fn brute_force_proxy(set: &CalibrationSet, tau: f64) -> Option<(f64, f64)> {
    if !set.losses().iter().any(|&z| z > tau) {
        return None;
    }
    let mut best: Option<(f64, f64)> = None;
    for lambda in lambda_grid(set.proxies()) {
        let f1 = f1_by_counting(set, lambda, tau);
        if best.map_or(true, |b| f1 > b.0) {
            best = Some((f1, lambda));
        }
    }
    best
}
