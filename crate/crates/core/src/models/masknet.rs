use rand::Rng;

use super::ConvBlock;
use crate::features::MagnitudeSpectrogram;
use crate::nn::{join, sigmoid, Conv2d, MaxPool2d, Module, Param, Real, Tensor4, UpsampleNearest};

/// Head bias that makes the sigmoid round to exactly 1.0 in `f32`.
const IDENTITY_BIAS: f64 = 20.0;

/// Three-level U-shaped encoder/decoder with skip connections producing a
/// `[0, 1]` mask over a magnitude spectrogram. Input is `ln(1 + |X|)`.
#[derive(Debug, Clone)]
pub struct MaskNet<T> {
    enc1: ConvBlock<T>,
    enc2: ConvBlock<T>,
    bottom: ConvBlock<T>,
    dec2: ConvBlock<T>,
    dec1: ConvBlock<T>,
    head: Conv2d<T>,
    pool1: MaxPool2d,
    pool2: MaxPool2d,
    up2: UpsampleNearest,
    up1: UpsampleNearest,
    cache: Option<Cache>,
}

#[derive(Debug, Clone)]
struct Cache {
    c2: usize,
    c3: usize,
    mask: Vec<f64>,
}

fn concat<T: Real>(a: &Tensor4<T>, b: &Tensor4<T>) -> Tensor4<T> {
    assert_eq!((a.n, a.h, a.w), (b.n, b.h, b.w), "concat shapes");
    let mut out = Tensor4::zeros(a.n, a.c + b.c, a.h, a.w);
    for i in 0..a.n {
        let dst = out.sample_mut(i);
        let na = a.sample(i).len();
        dst[..na].copy_from_slice(a.sample(i));
        dst[na..].copy_from_slice(b.sample(i));
    }
    out
}

fn split<T: Real>(x: &Tensor4<T>, ca: usize) -> (Tensor4<T>, Tensor4<T>) {
    let cb = x.c - ca;
    let mut a = Tensor4::zeros(x.n, ca, x.h, x.w);
    let mut b = Tensor4::zeros(x.n, cb, x.h, x.w);
    for i in 0..x.n {
        let src = x.sample(i);
        let na = ca * x.h * x.w;
        a.sample_mut(i).copy_from_slice(&src[..na]);
        b.sample_mut(i).copy_from_slice(&src[na..]);
    }
    (a, b)
}

fn add_into<T: Real>(dst: &mut Tensor4<T>, src: &Tensor4<T>) {
    dst.data.iter_mut().zip(&src.data).for_each(|(d, &s)| *d += s);
}

impl<T: Real> MaskNet<T> {
    pub fn new<R: Rng>(channels: &[usize], rng: &mut R) -> Self {
        let (c1, c2, c3) = (channels[0], channels[1], channels[2]);
        let mut enc1 = ConvBlock::new(1, c1, rng);
        enc1.conv.input_grad = false;
        MaskNet {
            enc1,
            enc2: ConvBlock::new(c1, c2, rng),
            bottom: ConvBlock::new(c2, c3, rng),
            dec2: ConvBlock::new(c3 + c2, c2, rng),
            dec1: ConvBlock::new(c2 + c1, c1, rng),
            head: Conv2d::new(c1, 1, 1, 0, rng),
            pool1: MaxPool2d::new(2),
            pool2: MaxPool2d::new(2),
            up2: UpsampleNearest::default(),
            up1: UpsampleNearest::default(),
            cache: None,
        }
    }

    /// A network whose mask is exactly one everywhere.
    pub fn identity<R: Rng>(channels: &[usize], rng: &mut R) -> Self {
        let mut net = Self::new(channels, rng);
        net.head.weight.value.iter_mut().for_each(|w| *w = T::zero());
        net.head.bias.value[0] = T::from_f(IDENTITY_BIAS);
        net
    }

    fn channels(&self) -> (usize, usize, usize) {
        (
            self.enc1.conv.out_channels,
            self.enc2.conv.out_channels,
            self.bottom.conv.out_channels,
        )
    }

    /// Network input from magnitudes.
    pub fn prepare(spec: &MagnitudeSpectrogram) -> Tensor4<T> {
        let data = spec.values.iter().map(|&v| T::from_f((v as f64).ln_1p())).collect();
        Tensor4::from_vec(1, 1, spec.bins, spec.frames, data)
    }

    fn mask_from_logits(logits: &Tensor4<T>) -> Tensor4<T> {
        let mut m = logits.clone();
        m.data.iter_mut().for_each(|v| *v = sigmoid(*v));
        m
    }

    /// Mask in inference mode.
    pub fn infer(&self, x: &Tensor4<T>) -> Tensor4<T> {
        let e1 = self.enc1.infer(x);
        let e2 = self.enc2.infer(&self.pool1.infer(&e1));
        let b = self.bottom.infer(&self.pool2.infer(&e2));
        let d2 = self.dec2.infer(&concat(&UpsampleNearest::infer(&b, e2.h, e2.w), &e2));
        let d1 = self.dec1.infer(&concat(&UpsampleNearest::infer(&d2, e1.h, e1.w), &e1));
        Self::mask_from_logits(&self.head.infer(&d1))
    }

    /// Mask in training mode, caching activations.
    pub fn forward(&mut self, x: &Tensor4<T>) -> Tensor4<T> {
        let e1 = self.enc1.forward(x);
        let p1 = self.pool1.forward(&e1);
        let e2 = self.enc2.forward(&p1);
        let p2 = self.pool2.forward(&e2);
        let b = self.bottom.forward(&p2);
        let u2 = self.up2.forward(&b, e2.h, e2.w);
        let d2 = self.dec2.forward(&concat(&u2, &e2));
        let u1 = self.up1.forward(&d2, e1.h, e1.w);
        let d1 = self.dec1.forward(&concat(&u1, &e1));
        let mask = Self::mask_from_logits(&self.head.forward(&d1));
        let (_, c2, c3) = self.channels();
        self.cache = Some(Cache {
            c2,
            c3,
            mask: mask.data.iter().map(|v| v.to_f()).collect(),
        });
        mask
    }

    /// Accumulates parameter gradients from the mask gradient.
    pub fn backward(&mut self, dmask: &Tensor4<T>) {
        let cache = self.cache.take().expect("MaskNet::backward before forward");
        let mut dlogits = dmask.clone();
        for (g, &m) in dlogits.data.iter_mut().zip(&cache.mask) {
            *g *= T::from_f(m * (1.0 - m));
        }
        let dd1 = self.head.backward(&dlogits).expect("head input gradient");
        let dcat1 = self.dec1.backward(dd1).expect("decoder input gradient");
        let (du1, mut de1) = split(&dcat1, cache.c2);
        let dd2 = self.up1.backward(&du1);
        let dcat2 = self.dec2.backward(dd2).expect("decoder input gradient");
        let (du2, mut de2) = split(&dcat2, cache.c3);
        let db = self.up2.backward(&du2);
        let dp2 = self.bottom.backward(db).expect("bottleneck input gradient");
        add_into(&mut de2, &self.pool2.backward(&dp2));
        let dp1 = self.enc2.backward(de2).expect("encoder input gradient");
        add_into(&mut de1, &self.pool1.backward(&dp1));
        let _ = self.enc1.backward(de1);
    }

    /// `mask ⊙ spec` for one spectrogram.
    pub fn apply(&self, spec: &MagnitudeSpectrogram) -> MagnitudeSpectrogram {
        let mask = self.infer(&Self::prepare(spec));
        let values = spec
            .values
            .iter()
            .zip(&mask.data)
            .map(|(&v, m)| (v as f64 * m.to_f()) as f32)
            .collect();
        MagnitudeSpectrogram {
            bins: spec.bins,
            frames: spec.frames,
            values,
        }
    }
}

impl<T: Real> Module<T> for MaskNet<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.enc1.visit(&join(prefix, "enc1"), f);
        self.enc2.visit(&join(prefix, "enc2"), f);
        self.bottom.visit(&join(prefix, "bottom"), f);
        self.dec2.visit(&join(prefix, "dec2"), f);
        self.dec1.visit(&join(prefix, "dec1"), f);
        self.head.visit(&join(prefix, "head"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.enc1.visit_mut(&join(prefix, "enc1"), f);
        self.enc2.visit_mut(&join(prefix, "enc2"), f);
        self.bottom.visit_mut(&join(prefix, "bottom"), f);
        self.dec2.visit_mut(&join(prefix, "dec2"), f);
        self.dec1.visit_mut(&join(prefix, "dec1"), f);
        self.head.visit_mut(&join(prefix, "head"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn spec(seed: u64, bins: usize, frames: usize) -> MagnitudeSpectrogram {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        MagnitudeSpectrogram {
            bins,
            frames,
            values: (0..bins * frames).map(|_| rng.gen_range(0.0..30.0)).collect(),
        }
    }

    #[test]
    fn identity_mask_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let net = MaskNet::<f32>::identity(&[2, 3, 4], &mut rng);
        let s = spec(1, 706, 101);
        assert_eq!(net.apply(&s), s);
    }

    #[test]
    fn masked_output_never_exceeds_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let net = MaskNet::<f32>::new(&[2, 3, 4], &mut rng);
        let s = spec(3, 35, 21);
        let out = net.apply(&s);
        assert!(out.values.iter().zip(&s.values).all(|(o, i)| *o >= 0.0 && o <= i));
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut net = MaskNet::<f64>::new(&[2, 2, 3], &mut rng);
        let x = Tensor4::from_vec(2, 1, 9, 7, (0..126).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let w: Vec<f64> = (0..126).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let loss = |net: &mut MaskNet<f64>| -> f64 {
            let m = net.forward(&x);
            m.data.iter().zip(&w).map(|(a, b)| a * b).sum()
        };
        net.zero_grad();
        loss(&mut net);
        net.backward(&Tensor4::from_vec(2, 1, 9, 7, w.clone()));
        let analytic = net.flat_grads();
        let base = net.flat_params();
        let eps = 1e-6;
        for i in (0..base.len()).step_by(3) {
            let mut p = base.clone();
            p[i] += eps;
            net.set_flat_params(&p);
            let up = loss(&mut net);
            p[i] -= 2.0 * eps;
            net.set_flat_params(&p);
            let down = loss(&mut net);
            let numeric = (up - down) / (2.0 * eps);
            let err = (numeric - analytic[i]).abs() / numeric.abs().max(analytic[i].abs()).max(1e-4);
            assert!(err < 1e-4, "param {i}: numeric {numeric} analytic {}", analytic[i]);
        }
    }
}
