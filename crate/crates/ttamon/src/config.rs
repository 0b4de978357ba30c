//! JSON experiment configuration.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use ttamon_core::losses::{LossKind, ProxyKind};
use ttamon_core::monitor::{AlarmKind, MonitorConfig};

use crate::simulator::{AdaptRegime, ShiftSchedule, SourceSpec};
use crate::SimError;

/// Invalid configuration, located by a dotted field path.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("{path}: {message}")]
pub struct ConfigError {
    pub path: String,
    pub message: String,
}

impl ConfigError {
    fn new(path: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            path: path.into(),
            message: message.into(),
        }
    }
}

/// Monitor options. Batch size and stream length come from the schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MonitorSection {
    pub loss: LossKind,
    #[serde(default = "default_proxy")]
    pub proxy: ProxyKind,
    #[serde(default)]
    pub epsilon_tol: Option<f64>,
    #[serde(default = "default_alpha_source")]
    pub alpha_source: f64,
    #[serde(default = "default_alpha_test")]
    pub alpha_test: f64,
    #[serde(default)]
    pub alpha_test_1: Option<f64>,
    #[serde(default = "one")]
    pub recalibration_period: usize,
    #[serde(default)]
    pub intrinsic_time: Option<f64>,
}

fn default_proxy() -> ProxyKind {
    ProxyKind::Uncertainty
}
fn default_alpha_source() -> f64 {
    0.025
}
fn default_alpha_test() -> f64 {
    0.175
}
fn one() -> usize {
    1
}
fn yes() -> bool {
    true
}

impl MonitorSection {
    pub fn new(loss: LossKind) -> Self {
        Self {
            loss,
            proxy: default_proxy(),
            epsilon_tol: None,
            alpha_source: default_alpha_source(),
            alpha_test: default_alpha_test(),
            alpha_test_1: None,
            recalibration_period: 1,
            intrinsic_time: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdaptationConfig {
    /// `false` runs the frozen source model.
    #[serde(default = "yes")]
    pub enabled: bool,
    #[serde(default)]
    pub regime: AdaptRegime,
    #[serde(default = "default_learning_rate")]
    pub learning_rate: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
}

fn default_learning_rate() -> f64 {
    1e-2
}
fn default_momentum() -> f64 {
    0.1
}

impl Default for AdaptationConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            regime: AdaptRegime::TemperatureBias,
            learning_rate: default_learning_rate(),
            momentum: default_momentum(),
        }
    }
}

impl AdaptationConfig {
    pub fn frozen() -> Self {
        Self {
            enabled: false,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    /// Output directory; overridden by `TTAMON_OUT_DIR` and `--out`.
    #[serde(default)]
    pub dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_name")]
    pub name: String,
    #[serde(default)]
    pub source: SourceSpec,
    pub schedule: ShiftSchedule,
    pub monitor: MonitorSection,
    #[serde(default)]
    pub adaptation: AdaptationConfig,
    #[serde(default = "all_alarms")]
    pub alarms: Vec<AlarmKind>,
    /// Track the assumption diagnostic on held-back labels.
    #[serde(default = "yes")]
    pub diagnostics: bool,
    #[serde(default = "default_calibration_size")]
    pub calibration_size: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "one")]
    pub repetitions: usize,
    /// Stop the stream once `Φ^b` fires.
    #[serde(default = "yes")]
    pub terminate_on_alarm: bool,
    #[serde(default)]
    pub output: OutputConfig,
}

fn sim_error(section: &str, e: SimError) -> ConfigError {
    match e {
        SimError::Invalid { field, message } => {
            ConfigError::new(format!("{section}.{field}"), message)
        }
        e => ConfigError::new(section, e.to_string()),
    }
}

fn default_name() -> String {
    "experiment".into()
}
fn all_alarms() -> Vec<AlarmKind> {
    AlarmKind::ALL.to_vec()
}
fn default_calibration_size() -> usize {
    1000
}

impl ExperimentConfig {
    pub fn new(name: &str, schedule: ShiftSchedule, loss: LossKind) -> Self {
        Self {
            name: name.into(),
            source: SourceSpec::default(),
            schedule,
            monitor: MonitorSection::new(loss),
            adaptation: AdaptationConfig::default(),
            alarms: all_alarms(),
            diagnostics: true,
            calibration_size: default_calibration_size(),
            seed: 0,
            repetitions: 1,
            terminate_on_alarm: true,
            output: OutputConfig::default(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let config: Self = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            ConfigError::new(
                if path == "." { "<root>".into() } else { path },
                e.into_inner().to_string(),
            )
        })?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::new(path.display().to_string(), e.to_string()))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(canonical))
    }

    pub fn monitor_config(&self) -> MonitorConfig {
        let m = &self.monitor;
        MonitorConfig {
            loss: m.loss,
            proxy: m.proxy,
            epsilon_tol: m.epsilon_tol,
            alpha_source: m.alpha_source,
            alpha_test: m.alpha_test,
            alpha_test_1: m.alpha_test_1,
            stream_length: Some((self.schedule.steps * self.schedule.batch_size) as u64),
            batch_size: self.schedule.batch_size,
            recalibration_period: m.recalibration_period,
            intrinsic_time: m.intrinsic_time,
        }
    }

    pub fn enabled(&self, kind: AlarmKind) -> bool {
        self.alarms.contains(&kind)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.source.validate().map_err(|e| sim_error("source", e))?;
        self.schedule
            .validate(&self.source)
            .map_err(|e| sim_error("schedule", e))?;
        self.monitor_config()
            .validate()
            .map_err(|e| ConfigError::new("monitor", e.to_string()))?;
        if self.alarms.is_empty() {
            return Err(ConfigError::new(
                "alarms",
                "at least one alarm must be enabled",
            ));
        }
        if self.repetitions == 0 {
            return Err(ConfigError::new("repetitions", "must be at least 1"));
        }
        if self.calibration_size < 2 {
            return Err(ConfigError::new("calibration_size", "must be at least 2"));
        }
        let a = &self.adaptation;
        if !(a.learning_rate >= 0.0 && a.learning_rate.is_finite()) {
            return Err(ConfigError::new(
                "adaptation.learning_rate",
                "must be finite and non-negative",
            ));
        }
        if !(a.momentum > 0.0 && a.momentum <= 1.0) {
            return Err(ConfigError::new(
                "adaptation.momentum",
                "must lie in (0, 1]",
            ));
        }
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return Err(ConfigError::new("name", "must be a non-empty file stem"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::presets;

    fn error_path(text: &str) -> String {
        ExperimentConfig::from_json(text).unwrap_err().path
    }

    #[test]
    fn presets_round_trip_through_json() {
        for name in presets::NAMES {
            let config = presets::by_name(name).unwrap();
            let back = ExperimentConfig::from_json(&config.to_json()).unwrap();
            assert_eq!(back, config);
            assert_eq!(back.hash(), config.hash());
        }
    }

    #[test]
    fn minimal_config_fills_defaults() {
        let c = ExperimentConfig::from_json(
            r#"{"schedule": {"kind": "severity_ramp"}, "monitor": {"loss": "zero_one"}}"#,
        )
        .unwrap();
        assert_eq!(
            c.schedule,
            ShiftSchedule::new(crate::simulator::ShiftKind::SeverityRamp)
        );
        assert_eq!(c.source, SourceSpec::default());
        assert_eq!(c.monitor.alpha_source, 0.025);
        assert_eq!(c.repetitions, 1);
        assert_eq!(c.alarms, AlarmKind::ALL.to_vec());
    }

    #[test]
    fn errors_name_the_offending_field() {
        let base = r#""monitor": {"loss": "zero_one"}"#;
        assert_eq!(
            error_path(&format!(
                r#"{{"schedule": {{"kind": "severity_ramp", "steps": 0}}, {base}}}"#
            )),
            "schedule.steps"
        );
        assert_eq!(
            error_path(&format!(
                r#"{{"schedule": {{"kind": "sideways"}}, {base}}}"#
            )),
            "schedule.kind"
        );
        assert_eq!(
            error_path(&format!(
                r#"{{"schedule": {{"kind": "none", "bogus": 1}}, {base}}}"#
            )),
            "schedule.bogus"
        );
        assert_eq!(
            error_path(&format!(
                r#"{{"schedule": {{"kind": "none"}}, "source": {{"classes": 1}}, {base}}}"#
            )),
            "source.classes"
        );
        assert_eq!(
            error_path(&format!(
                r#"{{"schedule": {{"kind": "none"}}, "repetitions": 0, {base}}}"#
            )),
            "repetitions"
        );
        assert_eq!(
            error_path(
                r#"{"schedule": {"kind": "none"}, "monitor": {"loss": "zero_one", "alpha_test": 2.0}}"#
            ),
            "monitor"
        );
        assert_eq!(error_path(r#"{"schedule": {"kind": "none"}}"#), "<root>");
        assert_eq!(error_path("not json"), "<root>");
    }

    #[test]
    fn hash_tracks_content() {
        let a = presets::severity_ramp(LossKind::ZeroOne);
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.seed += 1;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }
}
