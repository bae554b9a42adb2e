//! Post-hoc attacker evaluation of frozen representations.
//!
//! A checkpoint's extractor is frozen, latents are extracted for every
//! example, and fresh classifiers are trained to recover speech presence
//! (SAD) and speaker gender (GD). Success means the representation leaks.

mod metrics;
mod projection;

pub use metrics::{auc, density_overlap, kde, probability_density, roc_curve, trapezoid, DensityCurve, DENSITY_GRID};
pub use projection::{project_2d, Projection};

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Gender, Split};
use crate::models::{ArchitectureConfig, EventClassifier, FeatureExtractor, ModelCheckpoint, SpeechClassifier};
use crate::nn::Matrix;
use crate::training::{
    binary_accuracy, class_accuracy, fit_binary, fit_binary_standardized, latents, BinaryFitOptions, FeatureSet,
    ProbeResult,
};
use crate::{Error, Result};

/// Features of every example with the evaluation-only metadata.
#[derive(Debug, Clone)]
pub struct EvalCorpus {
    pub features: FeatureSet,
    pub gender: Vec<Option<Gender>>,
    pub split: Vec<Split>,
}

impl EvalCorpus {
    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.split.len()).filter(|&i| self.split[i] == split).collect()
    }

    /// The training view of one split: features, classes and speech flags.
    pub fn split_set(&self, split: Split) -> FeatureSet {
        let f = &self.features;
        let mut out = FeatureSet::new(f.bands, f.frames);
        for i in self.indices(split) {
            out.push(f.feature(i), f.classes[i], f.speech[i]);
        }
        out
    }
}

/// One latent vector per example plus its labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentDataset {
    pub z: Matrix<f32>,
    pub classes: Vec<usize>,
    pub speech: Vec<bool>,
    pub gender: Vec<Option<Gender>>,
    pub split: Vec<Split>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttackTarget {
    Speech,
    Gender,
}

impl LatentDataset {
    pub fn len(&self) -> usize {
        self.z.rows
    }

    pub fn is_empty(&self) -> bool {
        self.z.rows == 0
    }

    /// Rows and binary labels for an attack. Gender attacks only see
    /// speech-containing examples; the label is `true` for female.
    pub fn attack_view(&self, target: AttackTarget, split: Split) -> (Matrix<f32>, Vec<bool>) {
        let idx: Vec<usize> = (0..self.len())
            .filter(|&i| self.split[i] == split)
            .filter(|&i| target == AttackTarget::Speech || self.gender[i].is_some())
            .collect();
        let labels = idx
            .iter()
            .map(|&i| match target {
                AttackTarget::Speech => self.speech[i],
                AttackTarget::Gender => self.gender[i] == Some(Gender::Female),
            })
            .collect();
        (self.z.select_rows(&idx), labels)
    }

    /// Tab-separated export: labels followed by the latent values. Values use
    /// the shortest representation that parses back to the same `f32`.
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("split\tclass\tspeech\tgender");
        for d in 0..self.z.cols {
            let _ = write!(s, "\tz{d}");
        }
        s.push('\n');
        for i in 0..self.len() {
            let g = match self.gender[i] {
                Some(Gender::Male) => "male",
                Some(Gender::Female) => "female",
                None => "",
            };
            let _ = write!(
                s,
                "{}\t{}\t{}\t{g}",
                self.split[i].as_str(),
                self.classes[i],
                self.speech[i] as u8
            );
            for v in self.z.row(i) {
                let _ = write!(s, "\t{v}");
            }
            s.push('\n');
        }
        s
    }

    pub fn from_tsv(text: &str) -> Result<Self> {
        let bad = |m: String| Error::InvalidArgument(format!("latent table: {m}"));
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| bad("empty".into()))?;
        let dim = header
            .split('\t')
            .count()
            .checked_sub(4)
            .ok_or_else(|| bad("short header".into()))?;
        let mut out = LatentDataset {
            z: Matrix::zeros(0, dim),
            classes: Vec::new(),
            speech: Vec::new(),
            gender: Vec::new(),
            split: Vec::new(),
        };
        for (n, line) in lines.enumerate() {
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != dim + 4 {
                return Err(bad(format!("row {n} has {} fields", f.len())));
            }
            out.split.push(match f[0] {
                "train" => Split::Train,
                "validation" => Split::Validation,
                "test" => Split::Test,
                other => return Err(bad(format!("unknown split '{other}'"))),
            });
            out.classes
                .push(f[1].parse().map_err(|_| bad(format!("row {n} class")))?);
            out.speech.push(f[2] == "1");
            out.gender.push(if f[3].is_empty() {
                None
            } else {
                Some(Gender::parse(f[3])?)
            });
            for v in &f[4..] {
                out.z
                    .data
                    .push(v.parse().map_err(|_| bad(format!("row {n} value '{v}'")))?);
            }
            out.z.rows += 1;
        }
        Ok(out)
    }
}

/// Latents of every example under the checkpoint's frozen extractor.
pub fn extract_latents(ck: &ModelCheckpoint, arch: &ArchitectureConfig, corpus: &EvalCorpus) -> Result<LatentDataset> {
    let extractor = load_extractor(ck, arch)?;
    Ok(LatentDataset {
        z: latents(&extractor, &corpus.features)?,
        classes: corpus.features.classes.clone(),
        speech: corpus.features.speech.clone(),
        gender: corpus.gender.clone(),
        split: corpus.split.clone(),
    })
}

fn load_extractor(ck: &ModelCheckpoint, arch: &ArchitectureConfig) -> Result<FeatureExtractor<f32>> {
    if !ck.has_prefix("extractor") {
        return Err(Error::Checkpoint("checkpoint holds no extractor".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut f = FeatureExtractor::new(arch, &mut rng);
    ck.load_module("extractor", &mut f)?;
    Ok(f)
}

/// Attacker capacity and optimization. Defaults mirror the in-loop
/// discriminator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackerConfig {
    pub hidden: Vec<usize>,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub patience: usize,
    pub max_epochs: usize,
    /// Standardize latents with training-split statistics. Off by default so
    /// the attacker matches the in-loop probe.
    pub standardize: bool,
}

impl Default for AttackerConfig {
    fn default() -> Self {
        AttackerConfig {
            hidden: vec![48, 32, 16],
            batch_size: 64,
            learning_rate: 0.01,
            momentum: 0.9,
            patience: 10,
            max_epochs: 200,
            standardize: false,
        }
    }
}

/// A trained attacker; `net` takes raw latents.
#[derive(Debug, Clone)]
pub struct Attacker {
    pub net: SpeechClassifier<f32>,
    pub validation: ProbeResult,
}

impl Attacker {
    /// Attack probabilities in `[0, 1]`.
    pub fn scores(&self, z: &Matrix<f32>) -> Vec<f64> {
        self.net.predict(z).into_iter().map(|p| p as f64).collect()
    }
}

/// Trains a fresh attacker on the training split, selected on validation.
pub fn train_attacker(data: &LatentDataset, target: AttackTarget, cfg: &AttackerConfig, seed: u64) -> Result<Attacker> {
    let (z_train, y_train) = data.attack_view(target, Split::Train);
    let (z_val, y_val) = data.attack_view(target, Split::Validation);
    if !(y_val.contains(&true) && y_val.contains(&false)) {
        return Err(Error::DegenerateInput(format!(
            "{target:?} attack: validation split needs both classes"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let net = SpeechClassifier::new(data.z.cols, &cfg.hidden, &mut rng);
    let opts = BinaryFitOptions {
        batch_size: cfg.batch_size,
        learning_rate: cfg.learning_rate,
        momentum: cfg.momentum,
        patience: cfg.patience,
        max_epochs: cfg.max_epochs,
    };
    let (tr, va) = ((&z_train, &y_train[..]), (&z_val, &y_val[..]));
    let (net, validation) = if cfg.standardize {
        fit_binary_standardized(net, tr, va, &opts, &mut rng)?
    } else {
        fit_binary(net, tr, va, &opts, &mut rng)?
    };
    Ok(Attacker { net, validation })
}

/// Test-split metrics of one attacker run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub run_seed: u64,
    pub sed_accuracy: f64,
    pub sad_accuracy: f64,
    pub sad_auc: f64,
    pub gd_accuracy: f64,
    pub gd_auc: f64,
    /// Overlap of the speech / non-speech attacker-probability densities.
    pub sad_overlap: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub mean: f64,
    pub std: f64,
}

impl MetricSummary {
    /// Mean and sample standard deviation.
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        if values.windows(2).all(|w| w[0] == w[1]) {
            return MetricSummary {
                mean: values.first().copied().unwrap_or(f64::NAN),
                std: 0.0,
            };
        }
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        MetricSummary { mean, std }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub label: String,
    pub runs: usize,
    pub sed_accuracy: MetricSummary,
    pub sad_accuracy: MetricSummary,
    pub sad_auc: MetricSummary,
    pub gd_accuracy: MetricSummary,
    pub gd_auc: MetricSummary,
    pub sad_overlap: MetricSummary,
}

impl AggregateReport {
    pub fn from_records(label: &str, records: &[MetricsRecord]) -> Self {
        let s = |f: fn(&MetricsRecord) -> f64| MetricSummary::of(&records.iter().map(f).collect::<Vec<_>>());
        AggregateReport {
            label: label.to_string(),
            runs: records.len(),
            sed_accuracy: s(|r| r.sed_accuracy),
            sad_accuracy: s(|r| r.sad_accuracy),
            sad_auc: s(|r| r.sad_auc),
            gd_accuracy: s(|r| r.gd_accuracy),
            gd_auc: s(|r| r.gd_auc),
            sad_overlap: s(|r| r.sad_overlap),
        }
    }
}

/// Plain-text results table, one row per report.
pub fn format_table(reports: &[AggregateReport]) -> String {
    let cell = |m: &MetricSummary| format!("{:.2}±{:.2}", m.mean, m.std);
    let mut s = format!(
        "{:<16} {:>11} {:>11} {:>11} {:>11} {:>11} {:>5}\n",
        "method", "SED acc", "SAD acc", "SAD AUC", "GD acc", "GD AUC", "runs"
    );
    for r in reports {
        let _ = writeln!(
            s,
            "{:<16} {:>11} {:>11} {:>11} {:>11} {:>11} {:>5}",
            r.label,
            cell(&r.sed_accuracy),
            cell(&r.sad_accuracy),
            cell(&r.sad_auc),
            cell(&r.gd_accuracy),
            cell(&r.gd_auc),
            r.runs
        );
    }
    s
}

/// One tab-separated record per run.
pub fn metrics_tsv(records: &[MetricsRecord]) -> String {
    let mut s = String::from("run_seed\tsed_accuracy\tsad_accuracy\tsad_auc\tgd_accuracy\tgd_auc\tsad_overlap\n");
    for r in records {
        let _ = writeln!(
            s,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}",
            r.run_seed, r.sed_accuracy, r.sad_accuracy, r.sad_auc, r.gd_accuracy, r.gd_auc, r.sad_overlap
        );
    }
    s
}

/// Everything `evaluate` produces: per-run records, the aggregate, and plot
/// data from the first run.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub records: Vec<MetricsRecord>,
    pub report: AggregateReport,
    pub sad_roc: Vec<(f64, f64)>,
    pub gd_roc: Vec<(f64, f64)>,
    pub sad_density: (DensityCurve, DensityCurve),
    pub projection: Projection,
    pub latents: LatentDataset,
}

impl Evaluation {
    /// Writes plot data as tab-separated text plus the aggregate as JSON.
    pub fn write_artifacts(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let put = |name: &str, text: String| {
            let path = dir.join(name);
            fs::write(&path, text).map_err(|e| Error::io(&path, e))
        };
        let roc = |curve: &[(f64, f64)]| {
            let mut s = String::from("fpr\ttpr\n");
            curve.iter().for_each(|(x, y)| {
                let _ = writeln!(s, "{x}\t{y}");
            });
            s
        };
        put("roc_sad.tsv", roc(&self.sad_roc))?;
        put("roc_gd.tsv", roc(&self.gd_roc))?;
        let (speech, other) = &self.sad_density;
        let mut s = String::from("probability\tspeech\tnon_speech\n");
        for i in 0..speech.grid.len() {
            let _ = writeln!(s, "{}\t{}\t{}", speech.grid[i], speech.density[i], other.density[i]);
        }
        put("density_sad.tsv", s)?;
        let test: Vec<usize> = (0..self.latents.len())
            .filter(|&i| self.latents.split[i] == Split::Test)
            .collect();
        let mut s = String::from("pc1\tpc2\tclass\tspeech\tgender\n");
        for (p, &i) in self.projection.points.iter().zip(&test) {
            let g = self.latents.gender[i].map_or("", |g| if g == Gender::Male { "male" } else { "female" });
            let _ = writeln!(
                s,
                "{}\t{}\t{}\t{}\t{g}",
                p[0], p[1], self.latents.classes[i], self.latents.speech[i] as u8
            );
        }
        put("projection.tsv", s)?;
        put("latents.tsv", self.latents.to_tsv())?;
        put("report.json", serde_json::to_string_pretty(&self.report)?)
    }
}

/// Freezes the checkpoint, extracts latents once and trains one SAD and one
/// GD attacker per seed.
pub fn evaluate(
    ck: &ModelCheckpoint,
    arch: &ArchitectureConfig,
    corpus: &EvalCorpus,
    seeds: &[u64],
    cfg: &AttackerConfig,
    label: &str,
) -> Result<Evaluation> {
    if seeds.is_empty() {
        return Err(Error::InvalidArgument(
            "evaluation needs at least one attacker seed".into(),
        ));
    }
    let data = extract_latents(ck, arch, corpus)?;
    let classes = corpus.features.classes.iter().max().map_or(0, |m| m + 1);
    let outputs = ck
        .tensors
        .get("classifier.bias")
        .map(|t| t.data.len())
        .ok_or_else(|| Error::Checkpoint("checkpoint holds no event classifier".into()))?;
    let mut classifier = EventClassifier::<f32>::new(arch.latent_dim, outputs, &mut ChaCha8Rng::seed_from_u64(0));
    ck.load_module("classifier", &mut classifier)?;
    if classifier.classes() < classes {
        return Err(Error::Checkpoint(format!(
            "classifier has {} outputs but the corpus has {classes} classes",
            classifier.classes()
        )));
    }
    let test = corpus.indices(Split::Test);
    let sed_accuracy = class_accuracy(
        &classifier.predict(&data.z.select_rows(&test)),
        &FeatureSet::select(&data.classes, &test),
    );
    let (z_sad, y_sad) = data.attack_view(AttackTarget::Speech, Split::Test);
    let (z_gd, y_gd) = data.attack_view(AttackTarget::Gender, Split::Test);

    let mut records = Vec::new();
    let mut plots = None;
    for &seed in seeds {
        let sad = train_attacker(&data, AttackTarget::Speech, cfg, seed)?;
        let gd = train_attacker(&data, AttackTarget::Gender, cfg, seed ^ 0x5eed_6e0d)?;
        let sad_scores = sad.scores(&z_sad);
        let gd_scores = gd.scores(&z_gd);
        let density = probability_density(&sad_scores, &y_sad)?;
        records.push(MetricsRecord {
            run_seed: seed,
            sed_accuracy,
            sad_accuracy: binary_accuracy(&sad_scores, &y_sad),
            sad_auc: auc(&sad_scores, &y_sad)?,
            gd_accuracy: binary_accuracy(&gd_scores, &y_gd),
            gd_auc: auc(&gd_scores, &y_gd)?,
            sad_overlap: density_overlap(&density.0, &density.1),
        });
        if plots.is_none() {
            plots = Some((roc_curve(&sad_scores, &y_sad)?, roc_curve(&gd_scores, &y_gd)?, density));
        }
    }
    let (sad_roc, gd_roc, sad_density) = plots.expect("at least one run");
    Ok(Evaluation {
        report: AggregateReport::from_records(label, &records),
        records,
        sad_roc,
        gd_roc,
        sad_density,
        projection: project_2d(&data.z.select_rows(&test))?,
        latents: data,
    })
}
