use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::probe::retrain_probe;
use super::state::{SEED_BATCHES, SEED_PROBE};
use super::{
    binary_accuracy, class_accuracy, lambda_schedule, loss_adv, loss_cls, swap_probe, BalancedSampler,
    ExperimentConfig, FeatureSet, Method, NaiveSelection, TrainState,
};
use crate::corpus::derive_seed;
use crate::models::{ModelCheckpoint, SpeechClassifier};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lambda: f64,
    /// Mean training losses over the epoch's batches.
    pub l_cls: f64,
    pub l_adv: Option<f64>,
    pub val_cls: f64,
    pub val_sed_accuracy: f64,
    /// In-loop discriminator on validation latents.
    pub d_val_loss: Option<f64>,
    pub d_val_accuracy: Option<f64>,
}

/// One model-selection checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeRecord {
    pub epoch: usize,
    pub cycle: usize,
    /// Converged probe validation loss; absent for the baseline.
    pub l_sp: Option<f64>,
    pub probe_accuracy: Option<f64>,
    pub probe_epochs: Option<usize>,
    pub val_cls: f64,
    pub val_sed_accuracy: f64,
    pub improved: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub epochs: Vec<EpochRecord>,
    pub cycles: Vec<ProbeRecord>,
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

impl TrainingLog {
    pub fn epochs_tsv(&self) -> String {
        let mut s = String::from("epoch\tlambda\tl_cls\tl_adv\tval_cls\tval_sed_acc\td_val_loss\td_val_acc\n");
        for r in &self.epochs {
            s += &format!(
                "{}\t{:.6}\t{:.6}\t{}\t{:.6}\t{:.4}\t{}\t{}\n",
                r.epoch,
                r.lambda,
                r.l_cls,
                opt(r.l_adv),
                r.val_cls,
                r.val_sed_accuracy,
                opt(r.d_val_loss),
                opt(r.d_val_accuracy)
            );
        }
        s
    }

    pub fn cycles_tsv(&self) -> String {
        let mut s = String::from("epoch\tcycle\tl_sp\tprobe_acc\tprobe_epochs\tval_cls\tval_sed_acc\timproved\n");
        for r in &self.cycles {
            s += &format!(
                "{}\t{}\t{}\t{}\t{}\t{:.6}\t{:.4}\t{}\n",
                r.epoch,
                r.cycle,
                opt(r.l_sp),
                opt(r.probe_accuracy),
                r.probe_epochs.map(|e| e.to_string()).unwrap_or_default(),
                r.val_cls,
                r.val_sed_accuracy,
                r.improved as u8
            );
        }
        s
    }

    /// Lowest in-loop discriminator validation accuracy after warm-up.
    pub fn min_discriminator_accuracy(&self, warmup: usize) -> Option<f64> {
        self.epochs
            .iter()
            .filter(|r| r.epoch >= warmup)
            .filter_map(|r| r.d_val_accuracy)
            .reduce(f64::min)
    }
}

#[derive(Debug, Clone)]
pub struct FitOutcome {
    /// Parameters at the selected cycle.
    pub best: ModelCheckpoint,
    pub best_epoch: usize,
    /// Selection score of `best`: probe loss, or validation L_cls for the baseline.
    pub best_score: f64,
    pub stopped_epoch: usize,
    pub log: TrainingLog,
}

/// Whether epoch `m` (zero-based, just completed) ends with a probe cycle.
pub fn is_cycle_epoch(m: usize, config: &ExperimentConfig) -> bool {
    m >= config.warmup_epochs && (m - config.warmup_epochs) % config.tau == 0
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Running model selection: the highest score among cycles whose SED
/// accuracy is within `guard` of the best accuracy seen so far. When a new
/// accuracy record pushes the selected cycle out of the guard, the record
/// holder becomes the selection.
#[derive(Debug, Clone)]
pub struct CycleSelector {
    guard: f64,
    top_sed: f64,
    /// Score and SED accuracy of the current selection.
    selected: Option<(f64, f64)>,
}

impl CycleSelector {
    pub fn new(guard: f64) -> Self {
        CycleSelector {
            guard,
            top_sed: f64::NEG_INFINITY,
            selected: None,
        }
    }

    /// Offers a cycle; returns whether it becomes the selection.
    pub fn offer(&mut self, score: f64, sed_accuracy: f64) -> bool {
        self.top_sed = self.top_sed.max(sed_accuracy);
        let floor = self.top_sed - self.guard;
        if self.selected.is_some_and(|(_, sed)| sed < floor) {
            self.selected = None;
        }
        let better = self.selected.is_none_or(|(best, _)| score > best);
        if sed_accuracy >= floor && better {
            self.selected = Some((score, sed_accuracy));
            return true;
        }
        false
    }
}

/// Full training run with periodic model-selection cycles.
///
/// Each cycle trains a probe on frozen latents. RDAL variants swap it into
/// the loop; the naive variant only uses it for selection. The best cycle is
/// the one with the highest probe loss (in-loop discriminator loss for the
/// naive variant by default, lowest validation L_cls for the baseline) among
/// cycles whose validation SED accuracy is within `selection_sed_guard` of
/// the best so far. Training stops after `patience` cycles without a strict
/// improvement or at `max_epochs`.
pub fn fit(
    config: &ExperimentConfig,
    train: &FeatureSet,
    val: &FeatureSet,
    out_dir: Option<&Path>,
) -> Result<FitOutcome> {
    config.validate()?;
    let sampler = BalancedSampler::new(&train.speech, config.batch_size)?;
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut state = TrainState::<f32>::new(config);
    let mut batch_rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &[SEED_BATCHES]));
    let mut log = TrainingLog::default();
    let mut best: Option<(ModelCheckpoint, usize, f64)> = None;
    let mut selector = CycleSelector::new(config.selection_sed_guard);
    let mut stale = 0;
    let mut last_probe: Option<SpeechClassifier<f32>> = None;
    let mut stopped = 0;

    for m in 0..config.max_epochs {
        state.epoch = m;
        state.lambda = if config.method.adversarial() {
            lambda_schedule(m, config)
        } else {
            0.0
        };
        let mut sums = (0.0, 0.0);
        let batches = sampler.epoch(&mut batch_rng);
        for idx in &batches {
            let l = state.train_batch(train, idx)?;
            sums.0 += l.cls;
            sums.1 += l.adv.unwrap_or(0.0);
        }
        let nb = batches.len() as f64;

        let z_val = state.latents(val)?;
        let p_val = state.classifier.predict(&z_val);
        let val_cls = loss_cls(&p_val, &val.classes)?;
        let val_sed_accuracy = class_accuracy(&p_val, &val.classes);
        let (d_val_loss, d_val_accuracy) = if config.method.adversarial() {
            let p = state.discriminator.predict(&z_val);
            (Some(loss_adv(&p, &val.speech)), Some(binary_accuracy(&p, &val.speech)))
        } else {
            (None, None)
        };
        log.epochs.push(EpochRecord {
            epoch: m,
            lambda: state.lambda,
            l_cls: sums.0 / nb,
            l_adv: config.method.adversarial().then_some(sums.1 / nb),
            val_cls,
            val_sed_accuracy,
            d_val_loss,
            d_val_accuracy,
        });
        stopped = m;

        if !is_cycle_epoch(m, config) {
            continue;
        }
        let cycle = log.cycles.len();
        let (score, l_sp, probe_accuracy, probe_epochs) = if config.method == Method::Baseline {
            (-val_cls, None, None, None)
        } else {
            let init = if config.fresh_probe { None } else { last_probe.as_ref() };
            let seed = derive_seed(config.seed, &[SEED_PROBE, cycle as u64]);
            let (probe, r) = retrain_probe(&state.extractor, train, val, config, init, seed)?;
            if config.method.swaps_probe() {
                swap_probe(&mut state, &probe);
            }
            last_probe = Some(probe);
            let score = match (config.method, d_val_loss) {
                (Method::NaiveAdv, Some(d)) if config.naive_selection == NaiveSelection::InLoop => d,
                _ => r.val_loss,
            };
            (score, Some(r.val_loss), Some(r.val_accuracy), Some(r.epochs))
        };
        let improved = selector.offer(score, val_sed_accuracy);
        let meta = serde_json::json!({
            "method": config.method.as_str(),
            "epoch": m,
            "lambda": state.lambda,
            "cycle": cycle,
            "score": score,
            "config": config,
        });
        let ck = state.to_checkpoint(meta);
        if let Some(dir) = out_dir {
            ck.save(&dir.join("last.ckpt"))?;
        }
        log::info!(
            "{} epoch {m} cycle {cycle}: lambda {:.4} val_cls {val_cls:.4} sed {val_sed_accuracy:.3} l_sp {} probe_acc {}{}",
            config.method.as_str(),
            state.lambda,
            opt(l_sp),
            opt(probe_accuracy),
            if improved { " *" } else { "" }
        );
        log.cycles.push(ProbeRecord {
            epoch: m,
            cycle,
            l_sp,
            probe_accuracy,
            probe_epochs,
            val_cls,
            val_sed_accuracy,
            improved,
        });
        if improved {
            if let Some(dir) = out_dir {
                ck.save(&dir.join("best.ckpt"))?;
            }
            best = Some((ck, m, score));
            stale = 0;
        } else {
            stale += 1;
            if stale >= config.patience {
                break;
            }
        }
    }

    if let Some(dir) = out_dir {
        write(&dir.join("epochs.tsv"), &log.epochs_tsv())?;
        write(&dir.join("cycles.tsv"), &log.cycles_tsv())?;
    }
    let (best, best_epoch, best_score) = match best {
        Some(b) => b,
        None => {
            // no cycle reached: fall back to the final parameters
            let meta = serde_json::json!({"method": config.method.as_str(), "epoch": stopped, "lambda": state.lambda, "config": config});
            (state.to_checkpoint(meta), stopped, f64::NAN)
        }
    };
    Ok(FitOutcome {
        best,
        best_epoch,
        best_score,
        stopped_epoch: stopped,
        log,
    })
}
