use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{loss_adv, loss_cls, ExperimentConfig, FeatureSet, Method};
use crate::corpus::derive_seed;
use crate::models::{grl_backward, grl_forward, EventClassifier, FeatureExtractor, ModelCheckpoint, SpeechClassifier};
use crate::nn::{sigmoid, Matrix, Module, Real, Sgd, Tensor4};
use crate::{Error, Result};

/// Seed-path tags for the independently initialized components.
pub(crate) const SEED_EXTRACTOR: u64 = 1;
pub(crate) const SEED_CLASSIFIER: u64 = 2;
pub(crate) const SEED_DISCRIMINATOR: u64 = 3;
pub(crate) const SEED_BATCHES: u64 = 4;
pub(crate) const SEED_PROBE: u64 = 5;

/// Batch-mean losses of one step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossBundle {
    pub cls: f64,
    /// Absent for the baseline.
    pub adv: Option<f64>,
}

/// Networks, optimizers and schedule position of a run.
#[derive(Debug, Clone)]
pub struct TrainState<T> {
    pub method: Method,
    pub extractor: FeatureExtractor<T>,
    pub classifier: EventClassifier<T>,
    pub discriminator: SpeechClassifier<T>,
    pub opt_extractor: Sgd<T>,
    pub opt_classifier: Sgd<T>,
    pub opt_discriminator: Sgd<T>,
    pub epoch: usize,
    pub lambda: f64,
}

impl<T: Real> TrainState<T> {
    /// Every component draws from its own derived seed, so all methods start
    /// from identical parameters for the same seed.
    pub fn new(config: &ExperimentConfig) -> Self {
        let arch = &config.architecture;
        let rng = |tag| ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &[tag]));
        let extractor = FeatureExtractor::new(arch, &mut rng(SEED_EXTRACTOR));
        let classifier = EventClassifier::new(arch.latent_dim, config.classes, &mut rng(SEED_CLASSIFIER));
        let discriminator = SpeechClassifier::new(arch.latent_dim, &arch.speech_hidden, &mut rng(SEED_DISCRIMINATOR));
        let opt = || Sgd::new(config.learning_rate, config.momentum);
        TrainState {
            method: config.method,
            extractor,
            classifier,
            discriminator,
            opt_extractor: opt(),
            opt_classifier: opt(),
            opt_discriminator: opt(),
            epoch: 0,
            lambda: 0.0,
        }
    }

    /// Clears gradients, runs the forward and backward passes of one batch
    /// and leaves the accumulated gradients in place.
    ///
    /// The extractor receives `dL_cls/dz - lambda * dL_adv/dz`; the
    /// discriminator receives `dL_adv/dtheta_D` unscaled.
    pub fn accumulate_gradients(&mut self, x: &Tensor4<T>, classes: &[usize], speech: &[bool]) -> Result<LossBundle> {
        let n = classes.len();
        let inv_n = T::from_f(1.0 / n as f64);
        self.extractor.zero_grad();
        self.classifier.zero_grad();
        self.discriminator.zero_grad();

        let z = self.extractor.forward(x)?;
        let probs = self.classifier.forward(&z);
        let cls = loss_cls(&probs, classes)?;
        let mut dlogits = probs.clone();
        for (i, &y) in classes.iter().enumerate() {
            dlogits.row_mut(i)[y] -= T::one();
        }
        dlogits.data.iter_mut().for_each(|g| *g *= inv_n);
        let mut dz = self.classifier.backward(&dlogits);

        let adv = if self.method.adversarial() {
            let logits = self.discriminator.forward(&grl_forward(&z));
            let p: Vec<T> = logits.iter().map(|&l| sigmoid(l)).collect();
            let adv = loss_adv(&p, speech);
            let dl: Vec<T> = p
                .iter()
                .zip(speech)
                .map(|(&p, &s)| (p - if s { T::one() } else { T::zero() }) * inv_n)
                .collect();
            let dz_adv = grl_backward(&self.discriminator.backward(&dl), self.lambda);
            dz.data.iter_mut().zip(&dz_adv.data).for_each(|(a, &b)| *a += b);
            Some(adv)
        } else {
            None
        };
        self.extractor.backward(&dz);
        Ok(LossBundle { cls, adv })
    }

    /// One SGD update of every network present for the method.
    pub fn train_step(&mut self, x: &Tensor4<T>, classes: &[usize], speech: &[bool]) -> Result<LossBundle> {
        let losses = self.accumulate_gradients(x, classes, speech)?;
        if !losses.cls.is_finite() || losses.adv.is_some_and(|a| !a.is_finite()) {
            return Err(Error::NonFinite {
                epoch: self.epoch,
                detail: format!(
                    "L_cls = {}, L_adv = {:?}, lambda = {}",
                    losses.cls, losses.adv, self.lambda
                ),
            });
        }
        self.opt_classifier.step(&mut self.classifier);
        if self.method.adversarial() {
            self.opt_discriminator.step(&mut self.discriminator);
        }
        self.opt_extractor.step(&mut self.extractor);
        Ok(losses)
    }

    pub fn train_batch(&mut self, data: &FeatureSet, idx: &[usize]) -> Result<LossBundle> {
        let x = data.batch::<T>(idx);
        self.train_step(
            &x,
            &FeatureSet::select(&data.classes, idx),
            &FeatureSet::select(&data.speech, idx),
        )
    }

    /// Inference-mode latents, computed in chunks.
    pub fn latents(&self, data: &FeatureSet) -> Result<Matrix<T>> {
        latents(&self.extractor, data)
    }

    pub fn to_checkpoint(&self, metadata: serde_json::Value) -> ModelCheckpoint {
        let mut ck = ModelCheckpoint::new(metadata);
        ck.insert_module("extractor", &self.extractor);
        ck.insert_module("classifier", &self.classifier);
        ck.insert_module("discriminator", &self.discriminator);
        ck.insert_optimizer("opt.extractor", &self.opt_extractor);
        ck.insert_optimizer("opt.classifier", &self.opt_classifier);
        ck.insert_optimizer("opt.discriminator", &self.opt_discriminator);
        ck
    }

    /// Restores parameters and optimizer state; the schedule position comes
    /// from the `epoch` and `lambda` metadata fields when present.
    pub fn load_checkpoint(&mut self, ck: &ModelCheckpoint) -> Result<()> {
        ck.load_module("extractor", &mut self.extractor)?;
        ck.load_module("classifier", &mut self.classifier)?;
        ck.load_module("discriminator", &mut self.discriminator)?;
        ck.load_optimizer("opt.extractor", &mut self.opt_extractor);
        ck.load_optimizer("opt.classifier", &mut self.opt_classifier);
        ck.load_optimizer("opt.discriminator", &mut self.opt_discriminator);
        if let Some(e) = ck.metadata.get("epoch").and_then(|v| v.as_u64()) {
            self.epoch = e as usize;
        }
        if let Some(l) = ck.metadata.get("lambda").and_then(|v| v.as_f64()) {
            self.lambda = l;
        }
        Ok(())
    }
}

const INFER_CHUNK: usize = 64;

pub fn latents<T: Real>(extractor: &FeatureExtractor<T>, data: &FeatureSet) -> Result<Matrix<T>> {
    let mut out = Matrix::zeros(0, extractor.latent_dim());
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(INFER_CHUNK) {
        let z = extractor.infer(&data.batch(chunk))?;
        out.data.extend_from_slice(&z.data);
        out.rows += z.rows;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::ArchitectureConfig;
    use rand::Rng;

    fn toy_config(method: Method) -> ExperimentConfig {
        ExperimentConfig {
            method,
            classes: 3,
            batch_size: 4,
            architecture: ArchitectureConfig {
                conv_widths: vec![1, 1, 1, 1],
                latent_dim: 4,
                speech_hidden: vec![3],
                input_bands: 8,
                input_frames: 8,
                ..Default::default()
            },
            seed: 11,
            ..Default::default()
        }
    }

    fn toy_batch() -> (Tensor4<f64>, Vec<usize>, Vec<bool>) {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor4::from_vec(4, 1, 8, 8, (0..256).map(|_| rng.gen_range(-1.0..1.0)).collect());
        (x, vec![0, 2, 1, 0], vec![true, true, false, false])
    }

    /// `L_cls - lambda * L_adv` evaluated in training mode.
    fn objective(st: &mut TrainState<f64>, x: &Tensor4<f64>, y: &[usize], s: &[bool], lambda: f64) -> f64 {
        let z = st.extractor.forward(x).unwrap();
        let cls = loss_cls(&st.classifier.forward(&z), y).unwrap();
        let p: Vec<f64> = st.discriminator.forward(&z).iter().map(|&l| sigmoid(l)).collect();
        cls - lambda * loss_adv(&p, s)
    }

    #[test]
    fn reversed_gradient_matches_decomposition_and_finite_differences() {
        let lambda = 0.37;
        let (x, y, s) = toy_batch();
        let mut st = TrainState::<f64>::new(&toy_config(Method::Rdal));
        let total = st.extractor.num_trainable() + st.classifier.num_trainable() + st.discriminator.num_trainable();
        assert!(total <= 500, "{total} parameters");

        st.lambda = lambda;
        st.accumulate_gradients(&x, &y, &s).unwrap();
        let through_grl = st.extractor.flat_grads();

        let mut base = st.clone();
        base.method = Method::Baseline;
        base.accumulate_gradients(&x, &y, &s).unwrap();
        let d_cls = base.extractor.flat_grads();
        let mut unit = st.clone();
        unit.lambda = 1.0;
        unit.accumulate_gradients(&x, &y, &s).unwrap();
        // with lambda = 1 the extractor sees dL_cls - dL_adv
        let d_adv: Vec<f64> = d_cls
            .iter()
            .zip(unit.extractor.flat_grads())
            .map(|(c, u)| c - u)
            .collect();

        let params = st.extractor.flat_params();
        let eps = 1e-6;
        for i in 0..params.len() {
            let expected = d_cls[i] - lambda * d_adv[i];
            let scale = expected.abs().max(through_grl[i].abs()).max(1e-8);
            assert!((expected - through_grl[i]).abs() / scale < 1e-6, "param {i}");

            let mut probe = st.clone();
            let mut p = params.clone();
            p[i] += eps;
            probe.extractor.set_flat_params(&p);
            let up = objective(&mut probe, &x, &y, &s, lambda);
            p[i] -= 2.0 * eps;
            probe.extractor.set_flat_params(&p);
            let down = objective(&mut probe, &x, &y, &s, lambda);
            let numeric = (up - down) / (2.0 * eps);
            let scale = numeric.abs().max(through_grl[i].abs()).max(1e-5);
            assert!(
                (numeric - through_grl[i]).abs() / scale < 1e-4,
                "param {i}: {numeric} vs {}",
                through_grl[i]
            );
        }
    }

    #[test]
    fn zero_lambda_matches_baseline_bitwise() {
        let (x, y, s) = toy_batch();
        let mut rdal = TrainState::<f64>::new(&toy_config(Method::Rdal));
        let mut naive = TrainState::<f64>::new(&toy_config(Method::NaiveAdv));
        let mut base = TrainState::<f64>::new(&toy_config(Method::Baseline));
        for _ in 0..5 {
            rdal.train_step(&x, &y, &s).unwrap();
            naive.train_step(&x, &y, &s).unwrap();
            base.train_step(&x, &y, &s).unwrap();
        }
        assert_eq!(rdal.extractor.flat_params(), base.extractor.flat_params());
        assert_eq!(naive.extractor.flat_params(), base.extractor.flat_params());
        assert_eq!(rdal.classifier.flat_params(), base.classifier.flat_params());
    }

    #[test]
    fn small_step_reduces_classification_loss() {
        let (x, y, s) = toy_batch();
        let mut cfg = toy_config(Method::Baseline);
        cfg.learning_rate = 0.001;
        let mut st = TrainState::<f64>::new(&cfg);
        let before = st.accumulate_gradients(&x, &y, &s).unwrap().cls;
        st.train_step(&x, &y, &s).unwrap();
        let after = st.accumulate_gradients(&x, &y, &s).unwrap().cls;
        assert!(after < before, "{after} !< {before}");
    }

    #[test]
    fn reversed_update_raises_discriminator_loss() {
        let (x, y, s) = toy_batch();
        let mut cfg = toy_config(Method::Rdal);
        cfg.architecture.conv_widths = vec![2, 2, 2, 2];
        cfg.architecture.speech_hidden = vec![8];
        let mut st = TrainState::<f64>::new(&cfg);
        for _ in 0..500 {
            st.lambda = 0.0;
            st.accumulate_gradients(&x, &y, &s).unwrap();
            st.opt_discriminator.step(&mut st.discriminator);
        }
        let l = adv_loss(&mut st.clone(), &x, &s);
        assert!(l < 0.2, "discriminator should be near-perfect: {l}");
        st.lambda = 1.0;
        st.accumulate_gradients(&x, &y, &s).unwrap();
        let step: Vec<f64> = st.extractor.flat_grads().iter().map(|g| -g).collect();

        let params = st.extractor.flat_params();
        let eps = 1e-6;
        let d_adv: Vec<f64> = (0..params.len())
            .map(|i| {
                let mut probe = st.clone();
                let mut p = params.clone();
                p[i] += eps;
                probe.extractor.set_flat_params(&p);
                let up = adv_loss(&mut probe, &x, &s);
                p[i] -= 2.0 * eps;
                probe.extractor.set_flat_params(&p);
                (up - adv_loss(&mut probe, &x, &s)) / (2.0 * eps)
            })
            .collect();
        let inner: f64 = step.iter().zip(&d_adv).map(|(a, b)| a * b).sum();
        assert!(inner > 0.0, "inner product {inner}");
    }

    fn adv_loss(st: &mut TrainState<f64>, x: &Tensor4<f64>, s: &[bool]) -> f64 {
        let z = st.extractor.forward(x).unwrap();
        let p: Vec<f64> = st.discriminator.forward(&z).iter().map(|&l| sigmoid(l)).collect();
        loss_adv(&p, s)
    }

    #[test]
    fn non_finite_loss_aborts() {
        let (mut x, y, s) = toy_batch();
        x.data[0] = f64::NAN;
        let mut st = TrainState::<f64>::new(&toy_config(Method::Rdal));
        let r = st.train_step(&x, &y, &s);
        assert!(matches!(r, Err(Error::NonFinite { .. })), "{r:?}");
    }

    #[test]
    fn checkpoint_restores_state() {
        let (x, y, s) = toy_batch();
        let mut st = TrainState::<f32>::new(&toy_config(Method::Rdal));
        let xf = Tensor4::from_vec(4, 1, 8, 8, x.data.iter().map(|&v| v as f32).collect());
        st.train_step(&xf, &y, &s).unwrap();
        st.epoch = 7;
        st.lambda = 0.25;
        let ck = st.to_checkpoint(serde_json::json!({"epoch": 7, "lambda": 0.25}));
        let mut other = TrainState::<f32>::new(&ExperimentConfig {
            seed: 99,
            ..toy_config(Method::Rdal)
        });
        other.load_checkpoint(&ck).unwrap();
        assert_eq!(other.extractor.flat_params(), st.extractor.flat_params());
        assert_eq!(other.opt_extractor, st.opt_extractor);
        assert_eq!((other.epoch, other.lambda), (7, 0.25));
        let mut a = st.clone();
        let mut b = other.clone();
        a.train_step(&xf, &y, &s).unwrap();
        b.train_step(&xf, &y, &s).unwrap();
        assert_eq!(a.extractor.flat_params(), b.extractor.flat_params());
    }
}
