use std::path::Path;

use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::ledger::file_sha256;
use crate::corpus::{render_example, CorpusManifest, Split};
use crate::features::{MagnitudeSpectrogram, Stft};
use crate::models::{MaskNet, ModelCheckpoint};
use crate::nn::{Module, Sgd, Tensor4};
use crate::{Error, Result};

/// Optimization settings of the mask pre-training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaskTrainingConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub max_epochs: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub seed: u64,
}

impl Default for MaskTrainingConfig {
    fn default() -> Self {
        MaskTrainingConfig {
            batch_size: 8,
            learning_rate: 0.05,
            momentum: 0.9,
            max_epochs: 30,
            patience: 5,
            seed: 0,
        }
    }
}

/// Mixture magnitudes with their event-only targets.
#[derive(Debug, Clone)]
pub struct MaskPair {
    pub mixture: MagnitudeSpectrogram,
    pub target: MagnitudeSpectrogram,
}

/// Renders the mask training pairs of one split.
pub fn mask_pairs(manifest: &CorpusManifest, split: Split) -> Result<Vec<MaskPair>> {
    let stft = Stft::new();
    manifest
        .split(split)
        .map(|entry| {
            let ex = render_example(entry).map_err(|e| {
                Error::MissingData(format!(
                    "mask pre-training needs the event-only target of entry {} ({e}); \
                     the masked method requires simulated mixtures",
                    entry.id
                ))
            })?;
            Ok(MaskPair {
                mixture: stft.magnitude(&ex.mixture)?,
                target: stft.magnitude(&ex.event_only)?,
            })
        })
        .collect()
}

fn stack(pairs: &[&MaskPair]) -> (Tensor4<f32>, Vec<f32>, Vec<f32>) {
    let (bins, frames) = (pairs[0].mixture.bins, pairs[0].mixture.frames);
    let mut x = Tensor4::zeros(pairs.len(), 1, bins, frames);
    let mut mix = Vec::with_capacity(pairs.len() * bins * frames);
    let mut target = Vec::with_capacity(mix.capacity());
    for (i, p) in pairs.iter().enumerate() {
        x.sample_mut(i)
            .copy_from_slice(&MaskNet::<f32>::prepare(&p.mixture).data);
        mix.extend_from_slice(&p.mixture.values);
        target.extend_from_slice(&p.target.values);
    }
    (x, mix, target)
}

/// Mean squared error between the masked mixture and the event-only target.
pub fn mask_mse(net: &MaskNet<f32>, pairs: &[MaskPair]) -> f64 {
    let mut sum = 0.0;
    let mut count = 0usize;
    for p in pairs {
        let masked = net.apply(&p.mixture);
        sum += masked
            .values
            .iter()
            .zip(&p.target.values)
            .map(|(&a, &b)| (a as f64 - b as f64).powi(2))
            .sum::<f64>();
        count += masked.values.len();
    }
    sum / count.max(1) as f64
}

/// Result of [`pretrain_masknet`].
#[derive(Debug, Clone)]
pub struct MaskOutcome {
    pub net: MaskNet<f32>,
    pub val_mse: f64,
    /// Validation MSE of the all-ones mask, for reference.
    pub identity_val_mse: f64,
    pub epochs: usize,
}

/// Trains the mask network to map mixtures onto their event-only
/// magnitudes, keeping the parameters with the lowest validation MSE.
pub fn pretrain_masknet(
    manifest: &CorpusManifest,
    channels: &[usize],
    cfg: &MaskTrainingConfig,
) -> Result<MaskOutcome> {
    let train = mask_pairs(manifest, Split::Train)?;
    let val = mask_pairs(manifest, Split::Validation)?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::DegenerateInput(
            "mask pre-training needs train and validation examples".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut net = MaskNet::new(channels, &mut rng);
    let identity = MaskNet::identity(channels, &mut ChaCha8Rng::seed_from_u64(cfg.seed));
    let identity_val_mse = mask_mse(&identity, &val);
    // Loss is scaled by the target energy so the step size does not depend
    // on the signal level; selection uses the unscaled validation MSE.
    let scale = train
        .iter()
        .flat_map(|p| &p.target.values)
        .map(|&v| (v as f64).powi(2))
        .sum::<f64>()
        / (train.len() * train[0].target.values.len()) as f64;
    let mut opt = Sgd::new(cfg.learning_rate, cfg.momentum);
    let mut best = (net.clone(), mask_mse(&net, &val), 0);
    let mut stale = 0;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut epochs = 0;
    for epoch in 1..=cfg.max_epochs {
        epochs = epoch;
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let batch: Vec<&MaskPair> = chunk.iter().map(|&i| &train[i]).collect();
            let (x, mix, target) = stack(&batch);
            net.zero_grad();
            let mask = net.forward(&x);
            let k = (2.0 / (mask.data.len() as f64 * scale)) as f32;
            let mut grad = mask.clone();
            for ((g, &m), (&a, &e)) in grad.data.iter_mut().zip(&mask.data).zip(mix.iter().zip(&target)) {
                *g = k * (m * a - e) * a;
            }
            net.backward(&grad);
            opt.step(&mut net);
        }
        let mse = mask_mse(&net, &val);
        if !mse.is_finite() {
            return Err(Error::NonFinite {
                epoch,
                detail: "mask validation MSE".into(),
            });
        }
        info!("mask epoch {epoch}: val MSE {mse:.4} (identity {identity_val_mse:.4})");
        if mse < best.1 {
            best = (net.clone(), mse, epoch);
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                break;
            }
        }
    }
    Ok(MaskOutcome {
        net: best.0,
        val_mse: best.1,
        identity_val_mse,
        epochs,
    })
}

/// Writes the mask parameters with their training summary.
pub fn save_mask(outcome: &MaskOutcome, cfg: &MaskTrainingConfig, path: &Path) -> Result<()> {
    let mut ck = ModelCheckpoint::new(serde_json::json!({
        "val_mse": outcome.val_mse,
        "identity_val_mse": outcome.identity_val_mse,
        "epochs": outcome.epochs,
        "config": cfg,
    }));
    ck.insert_module("mask", &outcome.net);
    ck.save(path)
}

/// Loads a saved mask. The returned tag (a checksum prefix of the file)
/// names the masked features in the cache.
pub fn load_mask(path: &Path, channels: &[usize]) -> Result<(MaskNet<f32>, String)> {
    let mut net = MaskNet::new(channels, &mut ChaCha8Rng::seed_from_u64(0));
    ModelCheckpoint::load(path)?.load_module("mask", &mut net)?;
    Ok((net, file_sha256(path)?[..16].to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn constant(bins: usize, frames: usize, v: f32) -> MagnitudeSpectrogram {
        MagnitudeSpectrogram {
            bins,
            frames,
            values: vec![v; bins * frames],
        }
    }

    #[test]
    fn identity_mask_is_exact_without_speech() {
        let p = MaskPair {
            mixture: constant(8, 8, 2.0),
            target: constant(8, 8, 2.0),
        };
        let id = MaskNet::identity(&[2, 2, 2], &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(mask_mse(&id, &[p]), 0.0);
    }
}
