//! Gaussian class-conditional streams, a linear softmax classifier and an
//! entropy-minimizing online adaptation rule.
//!
//! Severity `s` acts on a source draw `x = μ_y + σ ε` as
//!
//! ```text
//! x'_j = g_j(s) ((1 - κ s) μ_{y,j} + sqrt(σ² + (ν s)²) ε_j) + s δ_j,
//! g_j(s) = 1 / (1 + a_j s)
//! ```
//!
//! with per-dimension scaling `a`, contraction `κ`, noise `ν` and
//! translation `δ` taken from the schedule. Refreshing normalization
//! statistics undoes the scaling and the translation; contraction and noise
//! are irreducible.

use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use ttamon_core::losses::{argmax, log_sum_exp, LossKind, ProbVector, ProxyKind};

use crate::SimError;

const VARIANCE_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceSpec {
    #[serde(default = "default_classes")]
    pub classes: usize,
    #[serde(default = "default_dim")]
    pub dim: usize,
    /// Explicit class means. When absent, means sit evenly on a circle of
    /// `radius` in the first two feature dimensions.
    #[serde(default)]
    pub means: Option<Vec<Vec<f64>>>,
    #[serde(default = "default_radius")]
    pub radius: f64,
    #[serde(default = "default_variance")]
    pub variance: f64,
    #[serde(default)]
    pub prior: Option<Vec<f64>>,
    #[serde(default = "default_train_size")]
    pub train_size: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_classes() -> usize {
    4
}
fn default_dim() -> usize {
    2
}
fn default_radius() -> f64 {
    2.5
}
fn default_variance() -> f64 {
    1.0
}
fn default_train_size() -> usize {
    5000
}

impl Default for SourceSpec {
    fn default() -> Self {
        Self {
            classes: default_classes(),
            dim: default_dim(),
            means: None,
            radius: default_radius(),
            variance: default_variance(),
            prior: None,
            train_size: default_train_size(),
            seed: 0,
        }
    }
}

impl SourceSpec {
    pub fn means(&self) -> Vec<Vec<f64>> {
        if let Some(m) = &self.means {
            return m.clone();
        }
        (0..self.classes)
            .map(|c| {
                let angle = std::f64::consts::TAU * c as f64 / self.classes as f64;
                let mut mu = vec![0.0; self.dim];
                mu[0] = self.radius * angle.cos();
                if self.dim > 1 {
                    mu[1] = self.radius * angle.sin();
                }
                mu
            })
            .collect()
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if self.classes < 2 {
            return Err(SimError::invalid("classes", "must be at least 2"));
        }
        if self.dim == 0 {
            return Err(SimError::invalid("dim", "must be positive"));
        }
        if !(self.variance > 0.0 && self.variance.is_finite()) {
            return Err(SimError::invalid(
                "variance",
                format!("must be positive, got {}", self.variance),
            ));
        }
        if self.train_size < self.classes {
            return Err(SimError::invalid(
                "train_size",
                "smaller than the number of classes",
            ));
        }
        let means = self.means();
        if means.len() != self.classes || means.iter().any(|m| m.len() != self.dim) {
            return Err(SimError::invalid("means", "must be classes x dim"));
        }
        for i in 0..means.len() {
            for j in 0..i {
                if means[i] == means[j] {
                    return Err(SimError::invalid(
                        "means",
                        format!("class means {j} and {i} coincide"),
                    ));
                }
            }
        }
        match &self.prior {
            Some(p) => check_prior(p, self.classes),
            None => Ok(()),
        }
    }
}

fn check_prior(p: &[f64], classes: usize) -> Result<(), SimError> {
    if p.len() != classes
        || p.iter().any(|w| !(*w >= 0.0 && w.is_finite()))
        || p.iter().sum::<f64>() <= 0.0
    {
        return Err(SimError::invalid(
            "prior",
            "must be non-negative with one weight per class",
        ));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShiftKind {
    None,
    SeverityRamp,
    SuddenSevere,
    GradualDrift,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShiftSchedule {
    pub kind: ShiftKind,
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_max_severity")]
    pub max_severity: f64,
    /// Plateaus of a severity ramp, from 0 up to `max_severity`.
    #[serde(default = "default_levels")]
    pub levels: usize,
    /// Per-dimension feature scaling rate `a_j`.
    #[serde(default = "default_scaling")]
    pub scaling: Vec<f64>,
    /// Mean translation per unit severity.
    #[serde(default)]
    pub translation: Vec<f64>,
    /// Fractional shrinkage of class means per unit severity.
    #[serde(default = "default_contraction")]
    pub contraction: f64,
    /// Extra noise standard deviation per unit severity.
    #[serde(default)]
    pub noise: f64,
    /// Class prior of the test stream; the source prior when absent.
    #[serde(default)]
    pub prior: Option<Vec<f64>>,
}

fn default_steps() -> usize {
    300
}
fn default_batch() -> usize {
    64
}
fn default_max_severity() -> f64 {
    5.0
}
fn default_levels() -> usize {
    6
}
fn default_scaling() -> Vec<f64> {
    vec![0.8, 0.0]
}
fn default_contraction() -> f64 {
    0.14
}

impl ShiftSchedule {
    pub fn new(kind: ShiftKind) -> Self {
        Self {
            kind,
            steps: default_steps(),
            batch_size: default_batch(),
            max_severity: default_max_severity(),
            levels: default_levels(),
            scaling: default_scaling(),
            translation: Vec::new(),
            contraction: default_contraction(),
            noise: 0.0,
            prior: None,
        }
    }

    pub fn validate(&self, spec: &SourceSpec) -> Result<(), SimError> {
        let dim = spec.dim;
        if self.steps == 0 {
            return Err(SimError::invalid("steps", "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(SimError::invalid("batch_size", "must be positive"));
        }
        if !(self.max_severity >= 0.0 && self.max_severity.is_finite()) {
            return Err(SimError::invalid(
                "max_severity",
                "must be finite and non-negative",
            ));
        }
        if self.kind == ShiftKind::SeverityRamp && self.levels < 2 {
            return Err(SimError::invalid(
                "levels",
                "a severity ramp needs at least 2 levels",
            ));
        }
        if self.translation.len() > dim {
            return Err(SimError::invalid(
                "translation",
                "longer than the feature dimension",
            ));
        }
        if self.scaling.len() > dim {
            return Err(SimError::invalid(
                "scaling",
                "longer than the feature dimension",
            ));
        }
        if self.scaling.iter().any(|a| !(*a >= 0.0 && a.is_finite())) {
            return Err(SimError::invalid(
                "scaling",
                "rates must be finite and non-negative",
            ));
        }
        if !(self.contraction >= 0.0 && self.contraction * self.max_severity < 1.0) {
            return Err(SimError::invalid(
                "contraction",
                "contraction * max_severity must lie in [0, 1)",
            ));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(SimError::invalid(
                "noise",
                "must be finite and non-negative",
            ));
        }
        match &self.prior {
            Some(p) => check_prior(p, spec.classes),
            None => Ok(()),
        }
    }

    /// Severity at step `k` in `1..=steps`.
    pub fn severity(&self, k: usize) -> f64 {
        let t = self.steps;
        match self.kind {
            ShiftKind::None => 0.0,
            ShiftKind::SuddenSevere => self.max_severity,
            ShiftKind::SeverityRamp => {
                let level = ((k - 1) * self.levels / t).min(self.levels - 1);
                (self.max_severity * level as f64 / (self.levels - 1) as f64).min(self.max_severity)
            }
            ShiftKind::GradualDrift => {
                if t == 1 {
                    self.max_severity
                } else {
                    (self.max_severity * (k - 1) as f64 / (t - 1) as f64).min(self.max_severity)
                }
            }
        }
    }

    /// Drift only translates; the other kinds use every component.
    fn transform(&self, s: f64, dim: usize) -> Transform {
        let drift = self.kind == ShiftKind::GradualDrift;
        let mut gain = vec![1.0; dim];
        let mut offset = vec![0.0; dim];
        if !drift {
            for (g, a) in gain.iter_mut().zip(&self.scaling) {
                *g = 1.0 / (1.0 + a * s);
            }
        }
        for (o, d) in offset.iter_mut().zip(&self.translation) {
            *o = s * d;
        }
        Transform {
            gain,
            offset,
            contraction: if drift {
                1.0
            } else {
                1.0 - self.contraction * s
            },
            noise: if drift { 0.0 } else { self.noise * s },
        }
    }
}

struct Transform {
    gain: Vec<f64>,
    offset: Vec<f64>,
    contraction: f64,
    noise: f64,
}

impl Transform {
    fn identity(dim: usize) -> Self {
        Self {
            gain: vec![1.0; dim],
            offset: vec![0.0; dim],
            contraction: 1.0,
            noise: 0.0,
        }
    }
}

/// Row-major `n x dim` features without labels. Everything on the
/// unsupervised path takes this type only.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBatch {
    dim: usize,
    data: Vec<f64>,
}

impl FeatureBatch {
    pub fn new(dim: usize, data: Vec<f64>) -> Self {
        assert!(dim > 0 && data.len() % dim == 0);
        Self { dim, data }
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn rows(&self) -> std::slice::ChunksExact<'_, f64> {
        self.data.chunks_exact(self.dim)
    }
}

/// Labeled sample set: a stream batch or the calibration set.
#[derive(Debug, Clone, PartialEq)]
pub struct StreamBatch {
    pub step: usize,
    pub severity: f64,
    features: FeatureBatch,
    labels: Vec<usize>,
}

impl StreamBatch {
    pub fn features(&self) -> &FeatureBatch {
        &self.features
    }

    /// Ground truth, for oracle and diagnostic consumers only.
    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Replace the labels, keeping the features.
    pub fn with_labels(mut self, labels: Vec<usize>) -> Self {
        assert_eq!(labels.len(), self.labels.len());
        self.labels = labels;
        self
    }
}

/// Seeded generator for one stream. Stream `0` is reserved for the
/// calibration set, stream `k` for batch `k`.
fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

const TRAIN_STREAM: u64 = u64::MAX;

fn sample(
    spec: &SourceSpec,
    shift: Option<(&ShiftSchedule, f64)>,
    n: usize,
    rng: &mut ChaCha8Rng,
) -> (Vec<f64>, Vec<usize>) {
    let means = spec.means();
    let weights = shift
        .and_then(|(schedule, _)| schedule.prior.clone())
        .or_else(|| spec.prior.clone())
        .unwrap_or_else(|| vec![1.0; spec.classes]);
    let classes = WeightedIndex::new(&weights).expect("validated prior");
    let t = match shift {
        Some((schedule, s)) => schedule.transform(s, spec.dim),
        None => Transform::identity(spec.dim),
    };
    let sd = (spec.variance + t.noise * t.noise).sqrt();
    let mut data = Vec::with_capacity(n * spec.dim);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let y = classes.sample(rng);
        for ((m, g), o) in means[y].iter().zip(&t.gain).zip(&t.offset) {
            let e: f64 = rng.sample(StandardNormal);
            data.push(g * (t.contraction * m + sd * e) + o);
        }
        labels.push(y);
    }
    (data, labels)
}

/// Batch `k` of the shifted stream; a pure function of its arguments.
pub fn emit_batch(
    spec: &SourceSpec,
    schedule: &ShiftSchedule,
    seed: u64,
    k: usize,
) -> Result<StreamBatch, SimError> {
    if k == 0 || k > schedule.steps {
        return Err(SimError::StepOutOfRange {
            step: k,
            steps: schedule.steps,
        });
    }
    let s = schedule.severity(k);
    let mut rng = rng_for(seed, k as u64);
    let (data, labels) = sample(spec, Some((schedule, s)), schedule.batch_size, &mut rng);
    Ok(StreamBatch {
        step: k,
        severity: s,
        features: FeatureBatch::new(spec.dim, data),
        labels,
    })
}

/// Unshifted labeled sample drawn from stream `0` of `seed`.
pub fn calibration_sample(spec: &SourceSpec, seed: u64, n: usize) -> StreamBatch {
    let mut rng = rng_for(seed, 0);
    let (data, labels) = sample(spec, None, n, &mut rng);
    StreamBatch {
        step: 0,
        severity: 0.0,
        features: FeatureBatch::new(spec.dim, data),
        labels,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AdaptRegime {
    /// Temperature and bias only.
    #[default]
    TemperatureBias,
    /// Bias and every weight row; row norms and the temperature stay fixed.
    AllWeights,
}

/// Which normalization statistics a forward pass uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Statistics {
    /// Statistics recorded on the source training sample.
    Source,
    /// Running statistics refreshed by adaptation.
    Running,
}

/// Softmax linear classifier on normalized features.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    classes: usize,
    dim: usize,
    /// `classes x dim`, row-major
    weights: Vec<f64>,
    bias: Vec<f64>,
    log_temperature: f64,
    source_mean: Vec<f64>,
    source_var: Vec<f64>,
    running_mean: Vec<f64>,
    running_var: Vec<f64>,
    pub learning_rate: f64,
    pub momentum: f64,
    pub regime: AdaptRegime,
    skipped_updates: u64,
}

/// Outcome of one adaptation step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdaptStep {
    /// Mean predictive entropy before the gradient step.
    pub entropy: f64,
    /// Non-finite gradient; parameters left as they were.
    pub skipped: bool,
}

impl ToyModel {
    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn temperature(&self) -> f64 {
        self.log_temperature.exp()
    }

    pub fn running_mean(&self) -> &[f64] {
        &self.running_mean
    }

    pub fn running_var(&self) -> &[f64] {
        &self.running_var
    }

    pub fn skipped_updates(&self) -> u64 {
        self.skipped_updates
    }

    fn stats(&self, which: Statistics) -> (&[f64], &[f64]) {
        match which {
            Statistics::Source => (&self.source_mean, &self.source_var),
            Statistics::Running => (&self.running_mean, &self.running_var),
        }
    }

    fn normalize_into(&self, x: &[f64], which: Statistics, out: &mut [f64]) {
        let (mean, var) = self.stats(which);
        for j in 0..self.dim {
            out[j] = (x[j] - mean[j]) / var[j].sqrt();
        }
    }

    // temperature-scaled logits of a normalized feature vector
    fn logits_into(&self, xn: &[f64], out: &mut [f64]) {
        let inv_t = (-self.log_temperature).exp();
        for ((o, w), b) in out
            .iter_mut()
            .zip(self.weights.chunks_exact(self.dim))
            .zip(&self.bias)
        {
            *o = (w.iter().zip(xn).map(|(a, x)| a * x).sum::<f64>() + b) * inv_t;
        }
    }

    /// Normalized features, logits and probabilities for every row.
    pub fn forward(&self, batch: &FeatureBatch, which: Statistics) -> Forward {
        let n = batch.len();
        let mut normalized = vec![0.0; n * self.dim];
        let mut logits = vec![0.0; n * self.classes];
        let mut probs = vec![0.0; n * self.classes];
        for (i, x) in batch.rows().enumerate() {
            let xn = &mut normalized[i * self.dim..(i + 1) * self.dim];
            self.normalize_into(x, which, xn);
            let l = &mut logits[i * self.classes..(i + 1) * self.classes];
            self.logits_into(xn, l);
            softmax_into(l, &mut probs[i * self.classes..(i + 1) * self.classes]);
        }
        Forward {
            classes: self.classes,
            dim: self.dim,
            normalized,
            logits,
            probs,
        }
    }

    /// Per-sample proxies of a forward pass.
    pub fn proxies(&self, fwd: &Forward, kind: ProxyKind) -> Vec<f64> {
        (0..fwd.len())
            .map(|i| match kind {
                ProxyKind::Uncertainty => 1.0 - fwd.prob(i).iter().copied().fold(0.0, f64::max),
                ProxyKind::Energy => -log_sum_exp(fwd.logit(i)),
                ProxyKind::PrototypeDistance => {
                    let f = fwd.feature(i);
                    self.weights
                        .chunks_exact(self.dim)
                        .map(|w| w.iter().zip(f).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
                        .fold(f64::INFINITY, f64::min)
                }
            })
            .collect()
    }

    /// One TENT-like step: refresh running statistics from the batch, then
    /// take one gradient step on the mean predictive entropy.
    pub fn tta_update(&mut self, batch: &FeatureBatch) -> AdaptStep {
        self.refresh_statistics(batch);
        let fwd = self.forward(batch, Statistics::Running);
        let n = fwd.len() as f64;
        let mut g_bias = vec![0.0; self.classes];
        let mut g_weights = vec![0.0; self.classes * self.dim];
        let mut g_log_t = 0.0;
        let mut entropy = 0.0;
        let inv_t = (-self.log_temperature).exp();
        for i in 0..fwd.len() {
            let p = fwd.prob(i);
            let l = fwd.logit(i);
            let h: f64 = -p
                .iter()
                .filter(|&&q| q > 0.0)
                .map(|&q| q * q.ln())
                .sum::<f64>();
            entropy += h;
            for c in 0..self.classes {
                // dH/dl_c for l = z / T
                let g = if p[c] > 0.0 {
                    -p[c] * (p[c].ln() + h)
                } else {
                    0.0
                };
                g_bias[c] += g * inv_t;
                g_log_t -= g * l[c];
                if self.regime == AdaptRegime::AllWeights {
                    let xn = fwd.feature(i);
                    for j in 0..self.dim {
                        g_weights[c * self.dim + j] += g * inv_t * xn[j];
                    }
                }
            }
        }
        let finite = g_log_t.is_finite()
            && g_bias.iter().all(|g| g.is_finite())
            && g_weights.iter().all(|g| g.is_finite());
        if !finite {
            self.skipped_updates += 1;
            return AdaptStep {
                entropy: entropy / n,
                skipped: true,
            };
        }
        let eta = self.learning_rate / n;
        for (b, g) in self.bias.iter_mut().zip(&g_bias) {
            *b -= eta * g;
        }
        match self.regime {
            AdaptRegime::TemperatureBias => self.log_temperature -= eta * g_log_t,
            AdaptRegime::AllWeights => {
                for (row, grow) in self
                    .weights
                    .chunks_exact_mut(self.dim)
                    .zip(g_weights.chunks_exact(self.dim))
                {
                    let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                    for (w, g) in row.iter_mut().zip(grow) {
                        *w -= eta * g;
                    }
                    let after = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                    if after > 0.0 {
                        row.iter_mut().for_each(|w| *w *= norm / after);
                    }
                }
            }
        }
        AdaptStep {
            entropy: entropy / n,
            skipped: false,
        }
    }

    fn refresh_statistics(&mut self, batch: &FeatureBatch) {
        let n = batch.len();
        if n == 0 {
            return;
        }
        let m = self.momentum;
        for j in 0..self.dim {
            let mean = batch.rows().map(|x| x[j]).sum::<f64>() / n as f64;
            let var = batch.rows().map(|x| (x[j] - mean).powi(2)).sum::<f64>() / n as f64;
            self.running_mean[j] = (1.0 - m) * self.running_mean[j] + m * mean;
            self.running_var[j] = ((1.0 - m) * self.running_var[j] + m * var).max(VARIANCE_FLOOR);
        }
    }
}

/// Output of [`ToyModel::forward`].
#[derive(Debug, Clone, PartialEq)]
pub struct Forward {
    classes: usize,
    dim: usize,
    normalized: Vec<f64>,
    logits: Vec<f64>,
    probs: Vec<f64>,
}

impl Forward {
    pub fn len(&self) -> usize {
        self.probs.len() / self.classes
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn prob(&self, i: usize) -> &[f64] {
        &self.probs[i * self.classes..(i + 1) * self.classes]
    }

    pub fn logit(&self, i: usize) -> &[f64] {
        &self.logits[i * self.classes..(i + 1) * self.classes]
    }

    pub fn feature(&self, i: usize) -> &[f64] {
        &self.normalized[i * self.dim..(i + 1) * self.dim]
    }

    pub fn predictions(&self) -> Vec<usize> {
        (0..self.len()).map(|i| argmax(self.prob(i))).collect()
    }

    /// Per-sample losses against `labels`.
    pub fn losses(&self, kind: LossKind, labels: &[usize]) -> Result<Vec<f64>, SimError> {
        labels
            .iter()
            .enumerate()
            .map(|(i, &y)| {
                let p = ProbVector::new(self.prob(i).to_vec())?;
                Ok(kind.evaluate(&p, y)?.value)
            })
            .collect()
    }
}

fn softmax_into(logits: &[f64], out: &mut [f64]) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, &l) in out.iter_mut().zip(logits) {
        *o = (l - max).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

/// Counts of predicted classes; sums to the batch size.
pub fn predicted_class_histogram(model: &ToyModel, batch: &FeatureBatch) -> Vec<usize> {
    let mut counts = vec![0; model.classes];
    for c in model.forward(batch, Statistics::Running).predictions() {
        counts[c] += 1;
    }
    counts
}

/// Share of the most frequent class in a histogram.
pub fn dominant_fraction(counts: &[usize]) -> f64 {
    let total: usize = counts.iter().sum();
    if total == 0 {
        return 0.0;
    }
    *counts.iter().max().unwrap() as f64 / total as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedSource {
    pub model: ToyModel,
    pub iterations: usize,
    pub gradient_norm: f64,
    /// Gradient norm stayed above the tolerance after the iteration cap.
    pub not_converged: bool,
}

pub const TRAIN_TOLERANCE: f64 = 1e-6;
pub const TRAIN_MAX_ITER: usize = 10_000;
const TRAIN_LEARNING_RATE: f64 = 4.0;

/// Fit the source classifier by full-batch gradient descent on the
/// cross-entropy of a fresh labeled source sample.
pub fn train_source(spec: &SourceSpec) -> Result<TrainedSource, SimError> {
    spec.validate()?;
    let mut rng = rng_for(spec.seed, TRAIN_STREAM);
    let (data, labels) = sample(spec, None, spec.train_size, &mut rng);
    let batch = FeatureBatch::new(spec.dim, data);
    let (c, h) = (spec.classes, spec.dim);
    let n = batch.len() as f64;
    let mut mean = vec![0.0; h];
    let mut var = vec![0.0; h];
    for j in 0..h {
        mean[j] = batch.rows().map(|x| x[j]).sum::<f64>() / n;
        var[j] =
            (batch.rows().map(|x| (x[j] - mean[j]).powi(2)).sum::<f64>() / n).max(VARIANCE_FLOOR);
    }
    let mut model = ToyModel {
        classes: c,
        dim: h,
        weights: vec![0.0; c * h],
        bias: vec![0.0; c],
        log_temperature: 0.0,
        source_mean: mean.clone(),
        source_var: var.clone(),
        running_mean: mean,
        running_var: var,
        learning_rate: 0.0,
        momentum: 0.1,
        regime: AdaptRegime::TemperatureBias,
        skipped_updates: 0,
    };
    let normalized: Vec<f64> = batch
        .rows()
        .flat_map(|x| {
            let mut out = vec![0.0; h];
            model.normalize_into(x, Statistics::Source, &mut out);
            out
        })
        .collect();

    let mut probs = vec![0.0; c];
    let mut logits = vec![0.0; c];
    let mut iterations = 0;
    let mut gradient_norm = f64::INFINITY;
    while iterations < TRAIN_MAX_ITER {
        let mut gw = vec![0.0; c * h];
        let mut gb = vec![0.0; c];
        for (xn, &y) in normalized.chunks_exact(h).zip(&labels) {
            model.logits_into(xn, &mut logits);
            softmax_into(&logits, &mut probs);
            for k in 0..c {
                let r = probs[k] - if k == y { 1.0 } else { 0.0 };
                gb[k] += r;
                for j in 0..h {
                    gw[k * h + j] += r * xn[j];
                }
            }
        }
        gradient_norm = (gw.iter().chain(&gb).map(|g| g * g).sum::<f64>()).sqrt() / n;
        if gradient_norm < TRAIN_TOLERANCE {
            break;
        }
        let step = TRAIN_LEARNING_RATE / n;
        for (w, g) in model.weights.iter_mut().zip(&gw) {
            *w -= step * g;
        }
        for (b, g) in model.bias.iter_mut().zip(&gb) {
            *b -= step * g;
        }
        iterations += 1;
    }
    Ok(TrainedSource {
        model,
        iterations,
        gradient_norm,
        not_converged: gradient_norm >= TRAIN_TOLERANCE,
    })
}
