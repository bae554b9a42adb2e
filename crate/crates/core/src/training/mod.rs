//! Adversarial training: losses, the reversal-coefficient schedule, balanced
//! batching, the per-step updates for every method, probe retraining and
//! the early-stopped training loop.

mod fit;
mod probe;
mod state;

pub use fit::{fit, is_cycle_epoch, CycleSelector, EpochRecord, FitOutcome, ProbeRecord, TrainingLog};
pub use probe::{
    fit_binary, fit_binary_standardized, retrain_probe, swap_probe, BinaryFitOptions, ProbeResult, Standardizer,
};
pub use state::{latents, LossBundle, TrainState};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::models::{ArchitectureConfig, ModelCheckpoint};
use crate::nn::{Matrix, Real, Tensor4};
use crate::{Error, Result};

/// Probabilities are clipped to `[EPS, 1 - EPS]` before taking logs.
pub const PROB_EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Baseline,
    NaiveAdv,
    Rdal,
    RdalM,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Baseline, Method::NaiveAdv, Method::Rdal, Method::RdalM];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Baseline => "baseline",
            Method::NaiveAdv => "naive_adv",
            Method::Rdal => "rdal",
            Method::RdalM => "rdal_m",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown method '{s}'")))
    }

    /// Whether the discriminator path and reversal layer are present.
    pub fn adversarial(self) -> bool {
        self != Method::Baseline
    }

    /// Whether probes replace the in-loop discriminator.
    pub fn swaps_probe(self) -> bool {
        matches!(self, Method::Rdal | Method::RdalM)
    }

    /// Whether inputs go through the frozen masking network.
    pub fn masked(self) -> bool {
        self == Method::RdalM
    }
}

/// Validation loss monitored by the naive variant at each cycle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NaiveSelection {
    /// Its own discriminator, the only one it trains.
    #[default]
    InLoop,
    /// A probe trained on frozen latents, as the swapping methods use.
    FreshProbe,
}

/// Hyperparameters of one training run. Defaults are the full-scale values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub method: Method,
    /// Number of event classes.
    pub classes: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub warmup_epochs: usize,
    pub max_epochs: usize,
    /// Steepness of the reversal ramp.
    pub gamma: f64,
    /// Epochs between probe cycles.
    pub tau: usize,
    /// Probe cycles without improvement before stopping.
    pub patience: usize,
    pub probe_patience: usize,
    pub probe_max_epochs: usize,
    /// Re-randomize the probe every cycle instead of continuing the last one.
    pub fresh_probe: bool,
    /// Train fresh probes on latents standardized with training-split
    /// statistics (folded back into the probe before it is swapped in).
    pub standardize_probe: bool,
    /// What the naive variant's model selection monitors.
    pub naive_selection: NaiveSelection,
    /// A cycle is selectable only if its validation SED accuracy is within
    /// this margin of the best one seen so far in the run.
    pub selection_sed_guard: f64,
    pub seed: u64,
    pub architecture: ArchitectureConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            method: Method::Rdal,
            classes: 12,
            batch_size: 64,
            learning_rate: 0.01,
            momentum: 0.9,
            warmup_epochs: 30,
            max_epochs: 5000,
            gamma: 100.0,
            tau: 50,
            patience: 10,
            probe_patience: 10,
            probe_max_epochs: 200,
            fresh_probe: true,
            standardize_probe: false,
            naive_selection: NaiveSelection::InLoop,
            selection_sed_guard: 0.02,
            seed: 0,
            architecture: ArchitectureConfig::default(),
        }
    }
}

impl ExperimentConfig {
    /// Scaled-down setting for the four-class synthetic corpus on a CPU.
    pub fn desk(method: Method, seed: u64) -> Self {
        ExperimentConfig {
            method,
            classes: 4,
            warmup_epochs: 10,
            max_epochs: 300,
            tau: 10,
            architecture: ArchitectureConfig {
                conv_widths: vec![4, 8, 16, 16],
                mask_channels: vec![4, 8, 16],
                ..Default::default()
            },
            seed,
            ..Default::default()
        }
    }

    /// The configuration recorded in a training checkpoint, if any.
    pub fn from_checkpoint(ck: &ModelCheckpoint) -> Result<Option<Self>> {
        ck.metadata
            .get("config")
            .map(|c| serde_json::from_value(c.clone()).map_err(Error::from))
            .transpose()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.tau == 0 {
            return bad("tau must be positive".into());
        }
        if self.batch_size < 2 || self.batch_size % 2 != 0 {
            return bad(format!(
                "batch_size must be even and at least 2, got {}",
                self.batch_size
            ));
        }
        if self.classes < 2 {
            return bad("at least two event classes are required".into());
        }
        if !(self.learning_rate > 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return bad("learning_rate must be positive and momentum in [0, 1)".into());
        }
        if self.max_epochs == 0 || self.warmup_epochs >= self.max_epochs {
            return bad("warmup_epochs must be smaller than max_epochs".into());
        }
        if !(0.0..=1.0).contains(&self.selection_sed_guard) {
            return bad("selection_sed_guard must lie in [0, 1]".into());
        }
        if !(self.gamma > 0.0) {
            return bad("gamma must be positive".into());
        }
        if self.patience == 0 || self.probe_patience == 0 || self.probe_max_epochs == 0 {
            return bad("patience values and probe_max_epochs must be positive".into());
        }
        self.architecture.validate()
    }
}

/// Mean categorical cross-entropy of row-wise probability vectors.
pub fn loss_cls<T: Real>(probs: &Matrix<T>, labels: &[usize]) -> Result<f64> {
    if probs.rows != labels.len() || probs.rows == 0 {
        return Err(Error::shape(probs.rows, labels.len()));
    }
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        if y >= probs.cols {
            return Err(Error::InvalidArgument(format!(
                "label {y} out of range for {} classes",
                probs.cols
            )));
        }
        let p = probs.row(i)[y].to_f();
        // f64::max would silently drop a NaN
        total -= if p.is_nan() { p } else { p.max(PROB_EPS) }.ln();
    }
    Ok(total / labels.len() as f64)
}

/// Mean binary cross-entropy with probabilities clipped away from 0 and 1.
pub fn loss_adv<T: Real>(probs: &[T], labels: &[bool]) -> f64 {
    assert_eq!(probs.len(), labels.len(), "loss_adv lengths");
    let total: f64 = probs
        .iter()
        .zip(labels)
        .map(|(&p, &s)| {
            let p = p.to_f().clamp(PROB_EPS, 1.0 - PROB_EPS);
            if s {
                -p.ln()
            } else {
                -(1.0 - p).ln()
            }
        })
        .sum();
    total / probs.len() as f64
}

/// Fraction of thresholded probabilities that match the labels.
pub fn binary_accuracy<T: Real>(probs: &[T], labels: &[bool]) -> f64 {
    let hits = probs
        .iter()
        .zip(labels)
        .filter(|(&p, &s)| (p.to_f() >= 0.5) == s)
        .count();
    hits as f64 / probs.len().max(1) as f64
}

/// Fraction of rows whose arg-max equals the label.
pub fn class_accuracy<T: Real>(probs: &Matrix<T>, labels: &[usize]) -> f64 {
    let hits = (0..probs.rows)
        .filter(|&i| {
            let row = probs.row(i);
            let arg = (0..row.len()).fold(0, |b, j| if row[j] > row[b] { j } else { b });
            arg == labels[i]
        })
        .count();
    hits as f64 / probs.rows.max(1) as f64
}

/// Reversal coefficient for epoch `epoch`: zero during warm-up, then
/// `2 / (1 + exp(-gamma * beta)) - 1` with `beta` rising linearly to 1 at
/// `max_epochs`.
pub fn lambda_schedule(epoch: usize, config: &ExperimentConfig) -> f64 {
    if epoch < config.warmup_epochs {
        return 0.0;
    }
    let span = (config.max_epochs - config.warmup_epochs) as f64;
    let beta = ((epoch - config.warmup_epochs) as f64 / span).clamp(0.0, 1.0);
    lambda_at(beta, config.gamma)
}

pub fn lambda_at(beta: f64, gamma: f64) -> f64 {
    (2.0 / (1.0 + (-gamma * beta).exp()) - 1.0).clamp(0.0, 1.0)
}

/// Log-mel inputs with the labels training may see. Gender is deliberately
/// absent.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    pub bands: usize,
    pub frames: usize,
    /// `n x bands x frames`, row-major.
    pub data: Vec<f32>,
    pub classes: Vec<usize>,
    pub speech: Vec<bool>,
}

impl FeatureSet {
    pub fn new(bands: usize, frames: usize) -> Self {
        FeatureSet {
            bands,
            frames,
            data: Vec::new(),
            classes: Vec::new(),
            speech: Vec::new(),
        }
    }

    pub fn push(&mut self, feature: &[f32], class: usize, speech: bool) {
        assert_eq!(feature.len(), self.bands * self.frames, "feature size");
        self.data.extend_from_slice(feature);
        self.classes.push(class);
        self.speech.push(speech);
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn feature(&self, i: usize) -> &[f32] {
        let n = self.bands * self.frames;
        &self.data[i * n..(i + 1) * n]
    }

    pub fn batch<T: Real>(&self, idx: &[usize]) -> Tensor4<T> {
        let mut data = Vec::with_capacity(idx.len() * self.bands * self.frames);
        for &i in idx {
            data.extend(self.feature(i).iter().map(|&v| T::from_f(v as f64)));
        }
        Tensor4::from_vec(idx.len(), 1, self.bands, self.frames, data)
    }

    pub fn select<V: Copy>(values: &[V], idx: &[usize]) -> Vec<V> {
        idx.iter().map(|&i| values[i]).collect()
    }
}

/// Batches with exactly half speech-containing examples.
#[derive(Debug, Clone)]
pub struct BalancedSampler {
    speech: Vec<usize>,
    other: Vec<usize>,
    half: usize,
}

impl BalancedSampler {
    pub fn new(speech: &[bool], batch_size: usize) -> Result<Self> {
        assert!(batch_size % 2 == 0 && batch_size > 0, "batch size must be even");
        let half = batch_size / 2;
        let (s, o): (Vec<usize>, Vec<usize>) = (0..speech.len()).partition(|&i| speech[i]);
        if s.len() < half || o.len() < half {
            return Err(Error::InvalidArgument(format!(
                "corpus too small for one balanced batch of {batch_size}: {} speech, {} non-speech",
                s.len(),
                o.len()
            )));
        }
        Ok(BalancedSampler {
            speech: s,
            other: o,
            half,
        })
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.speech.len().min(self.other.len()) / self.half
    }

    /// One epoch of batches; each batch lists its speech half first.
    pub fn epoch<R: Rng>(&self, rng: &mut R) -> Vec<Vec<usize>> {
        let mut s = self.speech.clone();
        let mut o = self.other.clone();
        s.shuffle(rng);
        o.shuffle(rng);
        (0..self.batches_per_epoch())
            .map(|b| {
                let mut batch = s[b * self.half..(b + 1) * self.half].to_vec();
                batch.extend_from_slice(&o[b * self.half..(b + 1) * self.half]);
                batch
            })
            .collect()
    }
}
