use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::state::latents;
use super::{binary_accuracy, loss_adv, BalancedSampler, ExperimentConfig, FeatureSet, TrainState};
use crate::models::{FeatureExtractor, SpeechClassifier};
use crate::nn::{sigmoid, Matrix, Module, Real, Sgd};
use crate::{Error, Result};

/// Converged validation performance of a binary classifier on latents.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    /// Validation binary cross-entropy of the selected parameters.
    pub val_loss: f64,
    pub val_accuracy: f64,
    /// Epochs run before the patience criterion fired.
    pub epochs: usize,
}

/// Optimization settings for a binary classifier trained on frozen latents.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BinaryFitOptions {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub patience: usize,
    pub max_epochs: usize,
}

impl BinaryFitOptions {
    pub fn from_config(config: &ExperimentConfig) -> Self {
        BinaryFitOptions {
            batch_size: config.batch_size,
            learning_rate: config.learning_rate,
            momentum: config.momentum,
            patience: config.probe_patience,
            max_epochs: config.probe_max_epochs,
        }
    }
}

/// Per-column mean and population standard deviation of a latent matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Standardizer {
    /// Statistics of `z`; columns with (near) zero spread get unit scale.
    pub fn fit<T: Real>(z: &Matrix<T>) -> Self {
        let n = z.rows.max(1) as f64;
        let mut mean = vec![0.0; z.cols];
        let mut var = vec![0.0; z.cols];
        for r in 0..z.rows {
            z.row(r).iter().zip(&mut mean).for_each(|(v, m)| *m += v.to_f() / n);
        }
        for r in 0..z.rows {
            z.row(r)
                .iter()
                .zip(&mean)
                .zip(&mut var)
                .for_each(|((v, m), s)| *s += (v.to_f() - m).powi(2) / n);
        }
        let scale = var
            .iter()
            .map(|&v| if v.sqrt() > 1e-8 { v.sqrt() } else { 1.0 })
            .collect();
        Standardizer { mean, scale }
    }

    pub fn apply<T: Real>(&self, z: &Matrix<T>) -> Matrix<T> {
        let mut out = z.clone();
        for row in out.data.chunks_mut(z.cols) {
            for ((v, m), s) in row.iter_mut().zip(&self.mean).zip(&self.scale) {
                *v = T::from_f((v.to_f() - m) / s);
            }
        }
        out
    }
}

/// Trains `net` on standardized latents and folds the standardization into
/// its first layer, so the returned network takes raw latents.
pub fn fit_binary_standardized<T: Real, R: Rng>(
    net: SpeechClassifier<T>,
    train: (&Matrix<T>, &[bool]),
    val: (&Matrix<T>, &[bool]),
    opts: &BinaryFitOptions,
    rng: &mut R,
) -> Result<(SpeechClassifier<T>, ProbeResult)> {
    let st = Standardizer::fit(train.0);
    let (mut net, result) = fit_binary(net, (&st.apply(train.0), train.1), (&st.apply(val.0), val.1), opts, rng)?;
    net.fold_input_affine(&st.mean, &st.scale);
    Ok((net, result))
}

fn bce_grad<T: Real>(logits: &[T], labels: &[bool]) -> Vec<T> {
    let inv_n = T::from_f(1.0 / labels.len() as f64);
    logits
        .iter()
        .zip(labels)
        .map(|(&l, &s)| (sigmoid(l) - if s { T::one() } else { T::zero() }) * inv_n)
        .collect()
}

/// Trains `net` with balanced mini-batches and keeps the parameters with the
/// lowest validation loss; stops after `patience` epochs without improvement.
pub fn fit_binary<T: Real, R: Rng>(
    mut net: SpeechClassifier<T>,
    train: (&Matrix<T>, &[bool]),
    val: (&Matrix<T>, &[bool]),
    opts: &BinaryFitOptions,
    rng: &mut R,
) -> Result<(SpeechClassifier<T>, ProbeResult)> {
    let (z_train, s_train) = train;
    let (z_val, s_val) = val;
    let positives = s_train.iter().filter(|&&s| s).count();
    let smaller = positives.min(s_train.len() - positives);
    if smaller == 0 {
        return Err(Error::DegenerateInput(
            "binary training split contains a single class".into(),
        ));
    }
    let sampler = BalancedSampler::new(s_train, (2 * smaller).min(opts.batch_size))?;
    let mut opt = Sgd::new(opts.learning_rate, opts.momentum);
    let evaluate = |net: &SpeechClassifier<T>| {
        let p = net.predict(z_val);
        (loss_adv(&p, s_val), binary_accuracy(&p, s_val))
    };
    let (loss, acc) = evaluate(&net);
    let mut best = (
        net.clone(),
        ProbeResult {
            val_loss: loss,
            val_accuracy: acc,
            epochs: 0,
        },
    );
    let mut stale = 0;
    for epoch in 1..=opts.max_epochs {
        for batch in sampler.epoch(rng) {
            let z = z_train.select_rows(&batch);
            let s = FeatureSet::select(s_train, &batch);
            net.zero_grad();
            let logits = net.forward(&z);
            net.backward(&bce_grad(&logits, &s));
            opt.step(&mut net);
        }
        let (loss, acc) = evaluate(&net);
        if !loss.is_finite() {
            return Err(Error::NonFinite {
                epoch,
                detail: "probe validation loss".into(),
            });
        }
        if loss < best.1.val_loss {
            best = (
                net.clone(),
                ProbeResult {
                    val_loss: loss,
                    val_accuracy: acc,
                    epochs: epoch,
                },
            );
            stale = 0;
        } else {
            stale += 1;
            if stale >= opts.patience {
                best.1.epochs = epoch;
                return Ok(best);
            }
        }
        best.1.epochs = epoch;
    }
    Ok(best)
}

/// Trains a speech probe on the frozen extractor's latents. `init` continues
/// from existing parameters on raw latents; otherwise the probe starts from a
/// fresh random draw of `seed`, standardized when the config asks for it.
pub fn retrain_probe<T: Real>(
    extractor: &FeatureExtractor<T>,
    train: &FeatureSet,
    val: &FeatureSet,
    config: &ExperimentConfig,
    init: Option<&SpeechClassifier<T>>,
    seed: u64,
) -> Result<(SpeechClassifier<T>, ProbeResult)> {
    let z_train = latents(extractor, train)?;
    let z_val = latents(extractor, val)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let opts = BinaryFitOptions::from_config(config);
    let (tr, va) = ((&z_train, &train.speech[..]), (&z_val, &val.speech[..]));
    match init {
        Some(p) => fit_binary(p.clone(), tr, va, &opts, &mut rng),
        None => {
            let net = SpeechClassifier::new(extractor.latent_dim(), &config.architecture.speech_hidden, &mut rng);
            if config.standardize_probe {
                fit_binary_standardized(net, tr, va, &opts, &mut rng)
            } else {
                fit_binary(net, tr, va, &opts, &mut rng)
            }
        }
    }
}

/// Replaces the in-loop discriminator by the probe and clears its momentum.
pub fn swap_probe<T: Real>(state: &mut TrainState<T>, probe: &SpeechClassifier<T>) {
    state.discriminator.copy_from(probe);
    state.opt_discriminator.reset();
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::training::Method;
    use rand_distr::{Distribution, Normal};

    fn gaussian_latents(n: usize, shift: f32, seed: u64) -> (Matrix<f32>, Vec<bool>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0f32, 1.0).unwrap();
        let labels: Vec<bool> = (0..n).map(|i| i % 2 == 0).collect();
        let mut data = Vec::with_capacity(n * 16);
        for &s in &labels {
            for d in 0..16 {
                let mean = if s && d < 4 { shift } else { 0.0 };
                data.push(mean + normal.sample(&mut rng));
            }
        }
        (Matrix::from_vec(n, 16, data), labels)
    }

    fn opts() -> BinaryFitOptions {
        BinaryFitOptions {
            batch_size: 64,
            learning_rate: 0.01,
            momentum: 0.9,
            patience: 10,
            max_epochs: 200,
        }
    }

    fn run(shift: f32, seed: u64) -> ProbeResult {
        let (zt, st) = gaussian_latents(600, shift, seed);
        let (zv, sv) = gaussian_latents(400, shift, seed + 1);
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 2);
        let net = SpeechClassifier::new(16, &[48, 32, 16], &mut rng);
        fit_binary(net, (&zt, &st), (&zv, &sv), &opts(), &mut rng).unwrap().1
    }

    #[test]
    fn probe_on_identical_distributions_is_at_chance() {
        let r = run(0.0, 10);
        assert!((r.val_accuracy - 0.5).abs() <= 0.05, "{r:?}");
    }

    #[test]
    fn probe_on_separable_latents_is_accurate() {
        let r = run(2.0, 20);
        assert!(r.val_accuracy >= 0.9, "{r:?}");
    }

    #[test]
    fn probe_is_deterministic() {
        assert_eq!(run(1.0, 30), run(1.0, 30));
    }

    #[test]
    fn folded_standardization_matches_explicit_one() {
        let (z, _) = gaussian_latents(50, 1.0, 40);
        let z = Matrix::from_vec(
            50,
            16,
            z.data
                .iter()
                .enumerate()
                .map(|(i, v)| v * (1 + i % 7) as f32 + 3.0)
                .collect(),
        );
        let st = Standardizer::fit(&z);
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let net = SpeechClassifier::<f32>::new(16, &[8, 4], &mut rng);
        let mut folded = net.clone();
        folded.fold_input_affine(&st.mean, &st.scale);
        for (a, b) in net.logits(&st.apply(&z)).iter().zip(folded.logits(&z)) {
            assert!((a - b).abs() <= 1e-4 * (1.0 + a.abs()), "{a} vs {b}");
        }
    }

    #[test]
    fn single_class_split_is_rejected() {
        let (zt, _) = gaussian_latents(10, 0.0, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let net = SpeechClassifier::<f32>::new(16, &[4], &mut rng);
        let labels = vec![true; 10];
        assert!(fit_binary(net, (&zt, &labels), (&zt, &labels), &opts(), &mut rng).is_err());
    }

    #[test]
    fn swap_copies_probe_and_leaves_other_networks() {
        let cfg = ExperimentConfig::desk(Method::Rdal, 3);
        let mut st = TrainState::<f32>::new(&cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let probe = SpeechClassifier::new(64, &[48, 32, 16], &mut rng);
        let (f, c) = (st.extractor.flat_params(), st.classifier.flat_params());
        swap_probe(&mut st, &probe);
        let (z, _) = gaussian_latents(100, 0.0, 5);
        let z = Matrix::from_vec(100, 64, z.data.iter().cycle().take(6400).copied().collect());
        assert_eq!(st.discriminator.predict(&z), probe.predict(&z));
        assert_eq!((st.extractor.flat_params(), st.classifier.flat_params()), (f, c));
        let once = st.discriminator.flat_params();
        swap_probe(&mut st, &probe);
        assert_eq!(st.discriminator.flat_params(), once);
    }
}
