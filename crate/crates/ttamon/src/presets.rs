//! The experiment configs shipped in `configs/`.

use ttamon_core::losses::LossKind;

use crate::config::{AdaptationConfig, ExperimentConfig};
use crate::simulator::{AdaptRegime, ShiftKind, ShiftSchedule};

/// Learning rate of the collapse preset.
pub const COLLAPSE_LEARNING_RATE: f64 = 200.0;

/// Risk tolerance of the collapse preset.
pub const COLLAPSE_EPSILON: f64 = 0.1;

pub const NAMES: [&str; 6] = [
    "no_shift",
    "severity_ramp",
    "severity_ramp_brier",
    "sudden_severe",
    "gradual_drift",
    "collapse",
];

pub fn by_name(name: &str) -> Option<ExperimentConfig> {
    Some(match name {
        "no_shift" => no_shift(LossKind::ZeroOne),
        "severity_ramp" => severity_ramp(LossKind::ZeroOne),
        "severity_ramp_brier" => severity_ramp(LossKind::Brier),
        "sudden_severe" => sudden_severe(LossKind::ZeroOne),
        "gradual_drift" => gradual_drift(LossKind::ZeroOne),
        "collapse" => collapse(),
        _ => return None,
    })
}

fn named(name: &str, loss: LossKind, schedule: ShiftSchedule) -> ExperimentConfig {
    let name = match loss {
        LossKind::ZeroOne => name.to_owned(),
        LossKind::Brier => format!("{name}_brier"),
    };
    ExperimentConfig::new(&name, schedule, loss)
}

pub fn no_shift(loss: LossKind) -> ExperimentConfig {
    named("no_shift", loss, ShiftSchedule::new(ShiftKind::None))
}

pub fn severity_ramp(loss: LossKind) -> ExperimentConfig {
    named(
        "severity_ramp",
        loss,
        ShiftSchedule::new(ShiftKind::SeverityRamp),
    )
}

pub fn sudden_severe(loss: LossKind) -> ExperimentConfig {
    named(
        "sudden_severe",
        loss,
        ShiftSchedule::new(ShiftKind::SuddenSevere),
    )
}

pub fn gradual_drift(loss: LossKind) -> ExperimentConfig {
    let mut schedule = ShiftSchedule::new(ShiftKind::GradualDrift);
    schedule.translation = vec![0.6, 0.0];
    named("gradual_drift", loss, schedule)
}

/// All-weights adaptation at a high learning rate under a mild shift.
pub fn collapse() -> ExperimentConfig {
    let mut schedule = ShiftSchedule::new(ShiftKind::SuddenSevere);
    schedule.max_severity = 1.0;
    let mut config = named("collapse", LossKind::ZeroOne, schedule);
    config.adaptation = AdaptationConfig {
        regime: AdaptRegime::AllWeights,
        learning_rate: COLLAPSE_LEARNING_RATE,
        ..AdaptationConfig::default()
    };
    config.monitor.epsilon_tol = Some(COLLAPSE_EPSILON);
    config.terminate_on_alarm = false;
    config
}
