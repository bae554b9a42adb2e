//! Networks: the convolutional feature extractor, the event classifier, the
//! speech discriminator (also used for probes and attackers), the gradient
//! reversal layer, and the spectrogram masking network.

mod checkpoint;
mod masknet;

pub use checkpoint::{ModelCheckpoint, TensorRecord};
pub use masknet::MaskNet;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::features::{FRAMES, MEL_BANDS};
use crate::nn::{
    softmax_rows, BatchNorm2d, Conv2d, GlobalMaxPool, LeakyRelu, Linear, Matrix, MaxPool2d, Module, Param, Real, Relu,
    Tensor4,
};
use crate::{Error, Result};

/// Layer sizes of every network. Defaults are the full-size architecture.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchitectureConfig {
    /// Output channels of the four convolution blocks.
    pub conv_widths: Vec<usize>,
    pub latent_dim: usize,
    /// Hidden widths of the speech discriminator.
    pub speech_hidden: Vec<usize>,
    /// Channels of the three mask-network levels.
    pub mask_channels: Vec<usize>,
    pub input_bands: usize,
    pub input_frames: usize,
}

impl Default for ArchitectureConfig {
    fn default() -> Self {
        ArchitectureConfig {
            conv_widths: vec![64, 128, 256, 512],
            latent_dim: 64,
            speech_hidden: vec![48, 32, 16],
            mask_channels: vec![16, 32, 64],
            input_bands: MEL_BANDS,
            input_frames: FRAMES,
        }
    }
}

impl ArchitectureConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.conv_widths.len() != 4 || self.conv_widths.contains(&0) {
            return bad("conv_widths must list four positive widths");
        }
        if self.latent_dim == 0 {
            return bad("latent_dim must be positive");
        }
        if self.speech_hidden.contains(&0) {
            return bad("speech_hidden widths must be positive");
        }
        if self.mask_channels.len() != 3 || self.mask_channels.contains(&0) {
            return bad("mask_channels must list three positive widths");
        }
        if self.input_bands < 8 || self.input_frames < 8 {
            return bad("input must be at least 8x8 to survive three 2x2 poolings");
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct ConvBlock<T> {
    conv: Conv2d<T>,
    bn: BatchNorm2d<T>,
    relu: Relu,
}

impl<T: Real> ConvBlock<T> {
    fn new<R: Rng>(cin: usize, cout: usize, rng: &mut R) -> Self {
        ConvBlock {
            conv: Conv2d::new(cin, cout, 3, 1, rng),
            bn: BatchNorm2d::new(cout),
            relu: Relu::default(),
        }
    }

    fn infer(&self, x: &Tensor4<T>) -> Tensor4<T> {
        let mut y = self.bn.infer(&self.conv.infer(x));
        Relu::infer(&mut y.data);
        y
    }

    fn forward(&mut self, x: &Tensor4<T>) -> Tensor4<T> {
        let mut y = self.bn.forward(&self.conv.forward(x));
        self.relu.forward(&mut y.data);
        y
    }

    fn backward(&mut self, mut dy: Tensor4<T>) -> Option<Tensor4<T>> {
        self.relu.backward(&mut dy.data);
        let d = self.bn.backward(&dy);
        self.conv.backward(&d)
    }

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.conv.visit(&format!("{prefix}.conv"), f);
        self.bn.visit(&format!("{prefix}.bn"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.conv.visit_mut(&format!("{prefix}.conv"), f);
        self.bn.visit_mut(&format!("{prefix}.bn"), f);
    }
}

/// Four conv blocks, global max pooling and a linear projection to the latent.
#[derive(Debug, Clone)]
pub struct FeatureExtractor<T> {
    blocks: Vec<ConvBlock<T>>,
    pools: Vec<MaxPool2d>,
    global: GlobalMaxPool,
    head: Linear<T>,
    pub input_bands: usize,
    pub input_frames: usize,
}

impl<T: Real> FeatureExtractor<T> {
    pub fn new<R: Rng>(arch: &ArchitectureConfig, rng: &mut R) -> Self {
        let mut cin = 1;
        let mut blocks = Vec::new();
        for &w in &arch.conv_widths {
            blocks.push(ConvBlock::new(cin, w, rng));
            cin = w;
        }
        blocks[0].conv.input_grad = false;
        FeatureExtractor {
            blocks,
            pools: (0..3).map(|_| MaxPool2d::new(2)).collect(),
            global: GlobalMaxPool::default(),
            head: Linear::new(cin, arch.latent_dim, rng),
            input_bands: arch.input_bands,
            input_frames: arch.input_frames,
        }
    }

    pub fn latent_dim(&self) -> usize {
        self.head.out_features
    }

    pub fn check_input(&self, x: &Tensor4<T>) -> Result<()> {
        if x.c != 1 || x.h != self.input_bands || x.w != self.input_frames {
            return Err(Error::shape(
                format!("n x 1 x {} x {}", self.input_bands, self.input_frames),
                format!("{} x {} x {} x {}", x.n, x.c, x.h, x.w),
            ));
        }
        Ok(())
    }

    /// Inference mode: batch-norm running statistics, no caching.
    pub fn infer(&self, x: &Tensor4<T>) -> Result<Matrix<T>> {
        self.check_input(x)?;
        let mut h = x.clone();
        for (i, block) in self.blocks.iter().enumerate() {
            h = block.infer(&h);
            if i < 3 {
                h = self.pools[i].infer(&h);
            }
        }
        Ok(self.head.infer(&GlobalMaxPool::infer(&h)))
    }

    /// Training mode: batch statistics, caches activations for `backward`.
    pub fn forward(&mut self, x: &Tensor4<T>) -> Result<Matrix<T>> {
        self.check_input(x)?;
        let mut h = x.clone();
        for i in 0..self.blocks.len() {
            h = self.blocks[i].forward(&h);
            if i < 3 {
                h = self.pools[i].forward(&h);
            }
        }
        let pooled = self.global.forward(&h);
        Ok(self.head.forward(&pooled))
    }

    /// Accumulates parameter gradients given the latent gradient.
    pub fn backward(&mut self, dz: &Matrix<T>) {
        let dp = self.head.backward(dz);
        let mut d = self.global.backward(&dp);
        for i in (0..self.blocks.len()).rev() {
            if i < 3 {
                d = self.pools[i].backward(&d);
            }
            match self.blocks[i].backward(d) {
                Some(next) => d = next,
                None => return,
            }
        }
    }
}

impl<T: Real> Module<T> for FeatureExtractor<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&crate::nn::join(prefix, &format!("block{i}")), f);
        }
        self.head.visit(&crate::nn::join(prefix, "head"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&crate::nn::join(prefix, &format!("block{i}")), f);
        }
        self.head.visit_mut(&crate::nn::join(prefix, "head"), f);
    }
}

/// Single linear layer with softmax output.
#[derive(Debug, Clone)]
pub struct EventClassifier<T> {
    pub linear: Linear<T>,
}

impl<T: Real> EventClassifier<T> {
    pub fn new<R: Rng>(latent_dim: usize, classes: usize, rng: &mut R) -> Self {
        EventClassifier {
            linear: Linear::new(latent_dim, classes, rng),
        }
    }

    pub fn classes(&self) -> usize {
        self.linear.out_features
    }

    pub fn predict(&self, z: &Matrix<T>) -> Matrix<T> {
        let logits = self.linear.infer(z);
        Matrix::from_vec(z.rows, self.classes(), softmax_rows(&logits.data, self.classes()))
    }

    /// Softmax probabilities, caching the input for `backward`.
    pub fn forward(&mut self, z: &Matrix<T>) -> Matrix<T> {
        let logits = self.linear.forward(z);
        Matrix::from_vec(z.rows, self.classes(), softmax_rows(&logits.data, self.classes()))
    }

    /// Takes the logit gradient and returns the latent gradient.
    pub fn backward(&mut self, dlogits: &Matrix<T>) -> Matrix<T> {
        self.linear.backward(dlogits)
    }
}

impl<T: Real> Module<T> for EventClassifier<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.linear.visit(prefix, f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.linear.visit_mut(prefix, f);
    }
}

/// MLP with LeakyReLU hidden layers and a single sigmoid output.
#[derive(Debug, Clone)]
pub struct SpeechClassifier<T> {
    layers: Vec<Linear<T>>,
    acts: Vec<LeakyRelu>,
}

impl<T: Real> SpeechClassifier<T> {
    pub fn new<R: Rng>(latent_dim: usize, hidden: &[usize], rng: &mut R) -> Self {
        let mut layers = Vec::new();
        let mut cin = latent_dim;
        for &h in hidden.iter().chain(std::iter::once(&1)) {
            layers.push(Linear::new(cin, h, rng));
            cin = h;
        }
        SpeechClassifier {
            acts: vec![LeakyRelu::default(); hidden.len()],
            layers,
        }
    }

    /// All weights zero: outputs 0.5 everywhere.
    pub fn zeroed(latent_dim: usize, hidden: &[usize]) -> Self {
        let mut layers = Vec::new();
        let mut cin = latent_dim;
        for &h in hidden.iter().chain(std::iter::once(&1)) {
            layers.push(Linear::zeroed(cin, h));
            cin = h;
        }
        SpeechClassifier {
            acts: vec![LeakyRelu::default(); hidden.len()],
            layers,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_features
    }

    /// Pre-sigmoid scores, one per row.
    pub fn logits(&self, z: &Matrix<T>) -> Vec<T> {
        let mut h = z.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.infer(&h);
            if let Some(act) = self.acts.get(i) {
                act.infer(&mut h.data);
            }
        }
        h.data
    }

    pub fn predict(&self, z: &Matrix<T>) -> Vec<T> {
        self.logits(z).into_iter().map(crate::nn::sigmoid).collect()
    }

    /// Training-mode logits with activations cached.
    pub fn forward(&mut self, z: &Matrix<T>) -> Vec<T> {
        let mut h = z.clone();
        for i in 0..self.layers.len() {
            h = self.layers[i].forward(&h);
            if let Some(act) = self.acts.get_mut(i) {
                act.forward(&mut h.data);
            }
        }
        h.data
    }

    /// Takes the logit gradient and returns the latent gradient.
    pub fn backward(&mut self, dlogits: &[T]) -> Matrix<T> {
        let mut d = Matrix::from_vec(dlogits.len(), 1, dlogits.to_vec());
        for i in (0..self.layers.len()).rev() {
            if let Some(act) = self.acts.get(i) {
                act.backward(&mut d.data);
            }
            d = self.layers[i].backward(&d);
        }
        d
    }

    /// Rewrites the first layer so that the network applied to `z` equals
    /// the original network applied to `(z - mean) / scale`.
    pub fn fold_input_affine(&mut self, mean: &[f64], scale: &[f64]) {
        let first = &mut self.layers[0];
        let cin = first.in_features;
        assert!(mean.len() == cin && scale.len() == cin, "affine width");
        for o in 0..first.out_features {
            let row = &mut first.weight.value[o * cin..(o + 1) * cin];
            let mut shift = 0.0;
            for ((w, &m), &s) in row.iter_mut().zip(mean).zip(scale) {
                let folded = w.to_f() / s;
                shift += folded * m;
                *w = T::from_f(folded);
            }
            first.bias.value[o] = T::from_f(first.bias.value[o].to_f() - shift);
        }
    }

    /// Parameter copy from a network of identical shape.
    pub fn copy_from(&mut self, other: &SpeechClassifier<T>) {
        assert_eq!(self.layers.len(), other.layers.len(), "speech classifier depth");
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            assert_eq!(a.weight.shape, b.weight.shape, "speech classifier layer shape");
            a.weight.value.copy_from_slice(&b.weight.value);
            a.bias.value.copy_from_slice(&b.bias.value);
        }
    }
}

impl<T: Real> Module<T> for SpeechClassifier<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        for (i, l) in self.layers.iter().enumerate() {
            l.visit(&crate::nn::join(prefix, &format!("fc{i}")), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.visit_mut(&crate::nn::join(prefix, &format!("fc{i}")), f);
        }
    }
}

/// Identity forward, `-lambda * grad` backward.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradientReversal {
    pub lambda: f64,
}

impl GradientReversal {
    pub fn new(lambda: f64) -> Self {
        assert!(lambda >= 0.0, "reversal coefficient must be non-negative");
        GradientReversal { lambda }
    }

    pub fn forward<T: Real>(&self, z: &Matrix<T>) -> Matrix<T> {
        grl_forward(z)
    }

    pub fn backward<T: Real>(&self, grad: &Matrix<T>) -> Matrix<T> {
        grl_backward(grad, self.lambda)
    }
}

pub fn grl_forward<T: Real>(z: &Matrix<T>) -> Matrix<T> {
    z.clone()
}

pub fn grl_backward<T: Real>(grad: &Matrix<T>, lambda: f64) -> Matrix<T> {
    let k = T::from_f(-lambda);
    Matrix {
        rows: grad.rows,
        cols: grad.cols,
        data: grad.data.iter().map(|&g| g * k).collect(),
    }
}

/// Packs `64 x 101` feature matrices into an `n x 1 x h x w` batch.
pub fn stack_features<T: Real>(features: &[&[f32]], bands: usize, frames: usize) -> Tensor4<T> {
    let mut data = Vec::with_capacity(features.len() * bands * frames);
    for f in features {
        assert_eq!(f.len(), bands * frames, "feature size");
        data.extend(f.iter().map(|&v| T::from_f(v as f64)));
    }
    Tensor4::from_vec(features.len(), 1, bands, frames, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{any, prop_assert, proptest};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_arch() -> ArchitectureConfig {
        ArchitectureConfig {
            conv_widths: vec![2, 3, 4, 4],
            mask_channels: vec![2, 3, 4],
            ..Default::default()
        }
    }

    fn random_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix<f32> {
        Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-2.0..2.0)).collect())
    }

    #[test]
    fn extractor_maps_logmel_to_latent() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut f = FeatureExtractor::<f32>::new(&small_arch(), &mut rng);
        let x = Tensor4::from_vec(
            3,
            1,
            64,
            101,
            (0..3 * 64 * 101).map(|_| rng.gen_range(-20.0..5.0)).collect(),
        );
        let z = f.forward(&x).unwrap();
        assert_eq!((z.rows, z.cols), (3, 64));
        assert!(z.data.iter().all(|v| v.is_finite()));
        let zi = f.infer(&x).unwrap();
        assert_eq!((zi.rows, zi.cols), (3, 64));
        assert!(f.infer(&Tensor4::zeros(1, 1, 64, 100)).is_err());
    }

    #[test]
    fn paper_extractor_has_expected_widths() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let f = FeatureExtractor::<f32>::new(&ArchitectureConfig::default(), &mut rng);
        let mut shapes = Vec::new();
        f.visit("", &mut |n, p| {
            if n.ends_with("conv.weight") {
                shapes.push(p.shape.clone())
            }
        });
        let outs: Vec<usize> = shapes.iter().map(|s| s[0]).collect();
        assert_eq!(outs, vec![64, 128, 256, 512]);
        assert_eq!(f.latent_dim(), 64);
    }

    #[test]
    fn zero_classifier_is_uniform() {
        let c = EventClassifier {
            linear: Linear::<f64>::zeroed(64, 12),
        };
        let p = c.predict(&Matrix::from_vec(1, 64, vec![0.3; 64]));
        assert!(p.data.iter().all(|&v| (v - 1.0 / 12.0).abs() < 1e-15));
        let d = SpeechClassifier::<f64>::zeroed(64, &[48, 32, 16]);
        assert_eq!(d.predict(&Matrix::from_vec(2, 64, vec![1.0; 128])), vec![0.5, 0.5]);
    }

    #[test]
    fn grl_examples() {
        let g = Matrix::from_vec(1, 2, vec![0.5f64, -0.25]);
        assert_eq!(grl_backward(&g, 1.0).data, vec![-0.5, 0.25]);
        assert!(grl_backward(&g, 0.0).data.iter().all(|&v| v == 0.0));
        let s = grl_backward(&Matrix::from_vec(1, 1, vec![2.0f64]), 0.46212);
        assert!((s.data[0] + 0.92424).abs() < 1e-12);
        let z = Matrix::from_vec(1, 2, vec![0.5f32, -1.0]);
        assert_eq!(GradientReversal::new(0.3).forward(&z), z);
    }

    #[test]
    fn swap_makes_outputs_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut d = SpeechClassifier::<f32>::new(64, &[48, 32, 16], &mut rng);
        let probe = SpeechClassifier::<f32>::new(64, &[48, 32, 16], &mut rng);
        let z = random_matrix(100, 64, &mut rng);
        assert_ne!(d.predict(&z), probe.predict(&z));
        d.copy_from(&probe);
        assert_eq!(d.predict(&z), probe.predict(&z));
        assert_eq!(d.flat_params(), probe.flat_params());
    }

    #[test]
    fn discriminator_learns_toy_problem() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut d = SpeechClassifier::<f32>::new(4, &[8, 4], &mut rng);
        let mut opt = crate::nn::Sgd::new(0.05, 0.9);
        let n = 64;
        let labels: Vec<bool> = (0..n).map(|i| i % 2 == 0).collect();
        let z = Matrix::from_vec(
            n,
            4,
            labels
                .iter()
                .flat_map(|&s| {
                    let shift = if s { 1.0 } else { -1.0 };
                    (0..4).map(|_| shift + rng.gen_range(-0.5f32..0.5)).collect::<Vec<_>>()
                })
                .collect(),
        );
        for _ in 0..100 {
            d.zero_grad();
            let logits = d.forward(&z);
            let g: Vec<f32> = logits
                .iter()
                .zip(&labels)
                .map(|(&l, &s)| (crate::nn::sigmoid(l) - s as u8 as f32) / n as f32)
                .collect();
            d.backward(&g);
            opt.step(&mut d);
        }
        let p = d.predict(&z);
        let mean = |want: bool| {
            let v: Vec<f32> = p
                .iter()
                .zip(&labels)
                .filter(|(_, &s)| s == want)
                .map(|(&p, _)| p)
                .collect();
            v.iter().sum::<f32>() / v.len() as f32
        };
        assert!(mean(true) > mean(false) + 0.5);
    }

    proptest! {
        #[test]
        fn softmax_rows_sum_to_one(seed in any::<u64>(), scale in 0.1f32..50.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let c = EventClassifier::<f32>::new(64, 12, &mut rng);
            let z = random_matrix(4, 64, &mut rng);
            let z = Matrix { data: z.data.iter().map(|v| v * scale).collect(), ..z };
            let p = c.predict(&z);
            for r in 0..4 {
                let row = p.row(r);
                prop_assert!(row.iter().all(|&v| v >= 0.0));
                prop_assert!((row.iter().map(|&v| v as f64).sum::<f64>() - 1.0).abs() < 1e-6);
            }
        }

        #[test]
        fn speech_output_in_unit_interval(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let d = SpeechClassifier::<f64>::new(64, &[48, 32, 16], &mut rng);
            let z = Matrix::from_vec(8, 64, (0..8 * 64).map(|_| rng.gen_range(-3.0..3.0)).collect());
            for p in d.predict(&z) {
                prop_assert!(p > 0.0 && p < 1.0);
            }
        }
    }
}
