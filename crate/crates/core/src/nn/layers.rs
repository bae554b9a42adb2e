use rand::Rng;

use super::{join, Matrix, Module, Param, Real, Tensor4};

/// Fully connected layer `y = x W^T + b`, weight stored `[out, in]`.
#[derive(Debug, Clone)]
pub struct Linear<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    pub in_features: usize,
    pub out_features: usize,
    input: Option<Matrix<T>>,
}

impl<T: Real> Linear<T> {
    pub fn new<R: Rng>(in_features: usize, out_features: usize, rng: &mut R) -> Self {
        Linear {
            weight: Param::kaiming_uniform(vec![out_features, in_features], in_features, rng),
            bias: Param::fan_in_uniform(vec![out_features], in_features, rng),
            in_features,
            out_features,
            input: None,
        }
    }

    /// Zero weights and bias.
    pub fn zeroed(in_features: usize, out_features: usize) -> Self {
        Linear {
            weight: Param::new(
                vec![T::zero(); in_features * out_features],
                vec![out_features, in_features],
            ),
            bias: Param::new(vec![T::zero(); out_features], vec![out_features]),
            in_features,
            out_features,
            input: None,
        }
    }

    pub fn infer(&self, x: &Matrix<T>) -> Matrix<T> {
        assert_eq!(x.cols, self.in_features, "linear input width");
        let mut y = Matrix::zeros(x.rows, self.out_features);
        for row in y.data.chunks_mut(self.out_features) {
            row.copy_from_slice(&self.bias.value);
        }
        T::gemm(
            x.rows,
            self.in_features,
            self.out_features,
            T::one(),
            &x.data,
            false,
            &self.weight.value,
            true,
            T::one(),
            &mut y.data,
        );
        y
    }

    pub fn forward(&mut self, x: &Matrix<T>) -> Matrix<T> {
        let y = self.infer(x);
        self.input = Some(x.clone());
        y
    }

    pub fn backward(&mut self, dy: &Matrix<T>) -> Matrix<T> {
        let x = self.input.as_ref().expect("Linear::backward before forward");
        assert_eq!(dy.rows, x.rows);
        T::gemm(
            self.out_features,
            x.rows,
            self.in_features,
            T::one(),
            &dy.data,
            true,
            &x.data,
            false,
            T::one(),
            &mut self.weight.grad,
        );
        for row in dy.data.chunks(self.out_features) {
            for (g, &d) in self.bias.grad.iter_mut().zip(row) {
                *g += d;
            }
        }
        let mut dx = Matrix::zeros(x.rows, self.in_features);
        T::gemm(
            x.rows,
            self.out_features,
            self.in_features,
            T::one(),
            &dy.data,
            false,
            &self.weight.value,
            false,
            T::zero(),
            &mut dx.data,
        );
        dx
    }
}

impl<T: Real> Module<T> for Linear<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        f(&join(prefix, "weight"), &self.weight);
        f(&join(prefix, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

/// Dot product with eight independent accumulators so the loop vectorizes.
fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let tail: T = ca.remainder().iter().zip(cb.remainder()).map(|(&x, &y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for j in 0..8 {
            acc[j] += x[j] * y[j];
        }
    }
    acc.iter().copied().sum::<T>() + tail
}

/// Sum of `f` over `a` with eight independent accumulators.
fn sum_map<T: Real>(a: &[T], f: impl Fn(T) -> T) -> T {
    let mut acc = [T::zero(); 8];
    let chunks = a.chunks_exact(8);
    let tail: T = chunks.remainder().iter().map(|&x| f(x)).sum();
    for x in chunks {
        for j in 0..8 {
            acc[j] += f(x[j]);
        }
    }
    acc.iter().copied().sum::<T>() + tail
}

/// Layers with at most this many input-output channel pairs use the direct
/// convolution path.
const DIRECT_CONV_MAX_CHANNEL_PRODUCT: usize = 64;

/// Square-kernel, stride-1 convolution with symmetric zero padding.
#[derive(Debug, Clone)]
pub struct Conv2d<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub padding: usize,
    /// The first layer of a network has no use for its input gradient.
    pub input_grad: bool,
    input: Option<Tensor4<T>>,
}

impl<T: Real> Conv2d<T> {
    pub fn new<R: Rng>(in_channels: usize, out_channels: usize, kernel: usize, padding: usize, rng: &mut R) -> Self {
        let fan_in = in_channels * kernel * kernel;
        Conv2d {
            weight: Param::kaiming_uniform(vec![out_channels, in_channels, kernel, kernel], fan_in, rng),
            bias: Param::fan_in_uniform(vec![out_channels], fan_in, rng),
            in_channels,
            out_channels,
            kernel,
            padding,
            input_grad: true,
            input: None,
        }
    }

    fn out_dims(&self, h: usize, w: usize) -> (usize, usize) {
        (
            h + 2 * self.padding + 1 - self.kernel,
            w + 2 * self.padding + 1 - self.kernel,
        )
    }

    /// Output columns `[lo, hi)` whose input column `x + shift` is inside the plane.
    fn valid_span(ow: usize, w: usize, shift: isize) -> (usize, usize) {
        let lo = (-shift).clamp(0, ow as isize) as usize;
        let hi = (w as isize - shift).clamp(lo as isize, ow as isize) as usize;
        (lo, hi)
    }

    fn im2col(&self, x: &[T], h: usize, w: usize, col: &mut [T]) {
        let (oh, ow) = self.out_dims(h, w);
        let k = self.kernel;
        let pad = self.padding as isize;
        let mut r = 0;
        for c in 0..self.in_channels {
            let plane = &x[c * h * w..(c + 1) * h * w];
            for ki in 0..k {
                for kj in 0..k {
                    let dst = &mut col[r * oh * ow..(r + 1) * oh * ow];
                    let shift = kj as isize - pad;
                    let (lo, hi) = Self::valid_span(ow, w, shift);
                    for y in 0..oh {
                        let iy = y as isize + ki as isize - pad;
                        let out_row = &mut dst[y * ow..(y + 1) * ow];
                        if iy < 0 || iy >= h as isize {
                            out_row.fill(T::zero());
                            continue;
                        }
                        let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                        out_row[..lo].fill(T::zero());
                        out_row[hi..].fill(T::zero());
                        let start = (lo as isize + shift) as usize;
                        out_row[lo..hi].copy_from_slice(&src[start..start + hi - lo]);
                    }
                    r += 1;
                }
            }
        }
    }

    fn col2im_add(&self, col: &[T], h: usize, w: usize, dx: &mut [T]) {
        let (oh, ow) = self.out_dims(h, w);
        let k = self.kernel;
        let pad = self.padding as isize;
        let mut r = 0;
        for c in 0..self.in_channels {
            let plane = &mut dx[c * h * w..(c + 1) * h * w];
            for ki in 0..k {
                for kj in 0..k {
                    let src = &col[r * oh * ow..(r + 1) * oh * ow];
                    let shift = kj as isize - pad;
                    let (lo, hi) = Self::valid_span(ow, w, shift);
                    for y in 0..oh {
                        let iy = y as isize + ki as isize - pad;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                        let start = (lo as isize + shift) as usize;
                        for (d, &v) in dst[start..start + hi - lo]
                            .iter_mut()
                            .zip(&src[y * ow + lo..y * ow + hi])
                        {
                            *d += v;
                        }
                    }
                    r += 1;
                }
            }
        }
    }

    /// Small layers run a row-blocked direct convolution; wide ones go
    /// through im2col and GEMM.
    fn direct(&self) -> bool {
        self.in_channels * self.out_channels <= DIRECT_CONV_MAX_CHANNEL_PRODUCT
    }

    pub fn infer(&self, x: &Tensor4<T>) -> Tensor4<T> {
        assert_eq!(x.c, self.in_channels, "conv input channels");
        if self.direct() {
            self.infer_direct(x)
        } else {
            self.infer_gemm(x)
        }
    }

    pub fn forward(&mut self, x: &Tensor4<T>) -> Tensor4<T> {
        let y = self.infer(x);
        self.input = Some(x.clone());
        y
    }

    /// Returns the input gradient, or `None` when `input_grad` is off.
    pub fn backward(&mut self, dy: &Tensor4<T>) -> Option<Tensor4<T>> {
        let x = self.input.take().expect("Conv2d::backward before forward");
        let dx = if self.direct() {
            self.backward_direct(&x, dy)
        } else {
            self.backward_gemm(&x, dy)
        };
        self.input = Some(x);
        dx
    }

    fn infer_direct(&self, x: &Tensor4<T>) -> Tensor4<T> {
        let (h, w) = (x.h, x.w);
        let (oh, ow) = self.out_dims(h, w);
        let (k, pad, ci) = (self.kernel, self.padding as isize, self.in_channels);
        let wv = &self.weight.value;
        let mut y = Tensor4::zeros(x.n, self.out_channels, oh, ow);
        let mut rows = vec![T::zero(); self.out_channels * ow];
        for i in 0..x.n {
            let xs = x.sample(i);
            let ys = y.sample_mut(i);
            for oy in 0..oh {
                for (o, row) in rows.chunks_mut(ow).enumerate() {
                    row.fill(self.bias.value[o]);
                }
                for c in 0..ci {
                    for ki in 0..k {
                        let iy = oy as isize + ki as isize - pad;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src = &xs[(c * h + iy as usize) * w..(c * h + iy as usize + 1) * w];
                        for kj in 0..k {
                            let shift = kj as isize - pad;
                            let (lo, hi) = Self::valid_span(ow, w, shift);
                            let seg = &src[(lo as isize + shift) as usize..(hi as isize + shift) as usize];
                            for (o, row) in rows.chunks_mut(ow).enumerate() {
                                let wk = wv[((o * ci + c) * k + ki) * k + kj];
                                for (d, &s) in row[lo..hi].iter_mut().zip(seg) {
                                    *d += wk * s;
                                }
                            }
                        }
                    }
                }
                for (o, row) in rows.chunks(ow).enumerate() {
                    ys[(o * oh + oy) * ow..(o * oh + oy + 1) * ow].copy_from_slice(row);
                }
            }
        }
        y
    }

    fn backward_direct(&mut self, x: &Tensor4<T>, dy: &Tensor4<T>) -> Option<Tensor4<T>> {
        let (h, w) = (x.h, x.w);
        let (oh, ow) = self.out_dims(h, w);
        let (k, pad, ci, co) = (self.kernel, self.padding as isize, self.in_channels, self.out_channels);
        let mut dx = self.input_grad.then(|| Tensor4::zeros(x.n, x.c, x.h, x.w));
        for i in 0..x.n {
            let xs = x.sample(i);
            let g = dy.sample(i);
            for (o, chunk) in g.chunks(oh * ow).enumerate() {
                self.bias.grad[o] += sum_map(chunk, |v| v);
            }
            for oy in 0..oh {
                for c in 0..ci {
                    for ki in 0..k {
                        let iy = oy as isize + ki as isize - pad;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src_at = (c * h + iy as usize) * w;
                        for kj in 0..k {
                            let shift = kj as isize - pad;
                            let (lo, hi) = Self::valid_span(ow, w, shift);
                            let (s0, s1) = (
                                src_at + (lo as isize + shift) as usize,
                                src_at + (hi as isize + shift) as usize,
                            );
                            for o in 0..co {
                                let grow = &g[(o * oh + oy) * ow + lo..(o * oh + oy) * ow + hi];
                                let widx = ((o * ci + c) * k + ki) * k + kj;
                                self.weight.grad[widx] += dot(grow, &xs[s0..s1]);
                                if let Some(dx) = dx.as_mut() {
                                    let wk = self.weight.value[widx];
                                    for (d, &gv) in dx.sample_mut(i)[s0..s1].iter_mut().zip(grow) {
                                        *d += wk * gv;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        dx
    }

    fn infer_gemm(&self, x: &Tensor4<T>) -> Tensor4<T> {
        let (oh, ow) = self.out_dims(x.h, x.w);
        let rows = self.in_channels * self.kernel * self.kernel;
        let mut col = vec![T::zero(); rows * oh * ow];
        let mut y = Tensor4::zeros(x.n, self.out_channels, oh, ow);
        for i in 0..x.n {
            self.im2col(x.sample(i), x.h, x.w, &mut col);
            let out = y.sample_mut(i);
            for (o, chunk) in out.chunks_mut(oh * ow).enumerate() {
                chunk.iter_mut().for_each(|v| *v = self.bias.value[o]);
            }
            T::gemm(
                self.out_channels,
                rows,
                oh * ow,
                T::one(),
                &self.weight.value,
                false,
                &col,
                false,
                T::one(),
                out,
            );
        }
        y
    }

    fn backward_gemm(&mut self, x: &Tensor4<T>, dy: &Tensor4<T>) -> Option<Tensor4<T>> {
        let (oh, ow) = self.out_dims(x.h, x.w);
        let rows = self.in_channels * self.kernel * self.kernel;
        let mut col = vec![T::zero(); rows * oh * ow];
        let mut dcol = vec![T::zero(); rows * oh * ow];
        let mut dx = self.input_grad.then(|| Tensor4::zeros(x.n, x.c, x.h, x.w));
        for i in 0..x.n {
            let g = dy.sample(i);
            self.im2col(x.sample(i), x.h, x.w, &mut col);
            T::gemm(
                self.out_channels,
                oh * ow,
                rows,
                T::one(),
                g,
                false,
                &col,
                true,
                T::one(),
                &mut self.weight.grad,
            );
            for (o, chunk) in g.chunks(oh * ow).enumerate() {
                self.bias.grad[o] += chunk.iter().copied().sum::<T>();
            }
            if let Some(dx) = dx.as_mut() {
                T::gemm(
                    rows,
                    self.out_channels,
                    oh * ow,
                    T::one(),
                    &self.weight.value,
                    true,
                    g,
                    false,
                    T::zero(),
                    &mut dcol,
                );
                self.col2im_add(&dcol, x.h, x.w, dx.sample_mut(i));
            }
        }
        dx
    }
}

impl<T: Real> Module<T> for Conv2d<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        f(&join(prefix, "weight"), &self.weight);
        f(&join(prefix, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

/// Per-channel batch normalization over `(n, h, w)`.
#[derive(Debug, Clone)]
pub struct BatchNorm2d<T> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Param<T>,
    pub running_var: Param<T>,
    pub momentum: f64,
    pub eps: f64,
    cache: Option<(Vec<T>, Vec<T>, [usize; 4])>,
}

impl<T: Real> BatchNorm2d<T> {
    pub fn new(channels: usize) -> Self {
        BatchNorm2d {
            gamma: Param::new(vec![T::one(); channels], vec![channels]),
            beta: Param::new(vec![T::zero(); channels], vec![channels]),
            running_mean: Param::buffer(vec![T::zero(); channels], vec![channels]),
            running_var: Param::buffer(vec![T::one(); channels], vec![channels]),
            momentum: 0.1,
            eps: 1e-5,
            cache: None,
        }
    }

    /// Uses running statistics; no state change.
    pub fn infer(&self, x: &Tensor4<T>) -> Tensor4<T> {
        let mut y = x.clone();
        let plane = x.plane();
        let eps = T::from_f(self.eps);
        for i in 0..x.n {
            for (c, chunk) in y.sample_mut(i).chunks_mut(plane).enumerate() {
                let scale = self.gamma.value[c] / (self.running_var.value[c] + eps).sqrt();
                let shift = self.beta.value[c] - self.running_mean.value[c] * scale;
                chunk.iter_mut().for_each(|v| *v = *v * scale + shift);
            }
        }
        y
    }

    /// Uses batch statistics and updates the running averages.
    pub fn forward(&mut self, x: &Tensor4<T>) -> Tensor4<T> {
        let plane = x.plane();
        let count = x.n * plane;
        let cn = T::from_f(count as f64);
        let eps = T::from_f(self.eps);
        let mut mean = vec![T::zero(); x.c];
        let mut var = vec![T::zero(); x.c];
        for i in 0..x.n {
            for (c, chunk) in x.sample(i).chunks(plane).enumerate() {
                mean[c] += sum_map(chunk, |v| v);
            }
        }
        mean.iter_mut().for_each(|m| *m /= cn);
        for i in 0..x.n {
            for (c, chunk) in x.sample(i).chunks(plane).enumerate() {
                let m = mean[c];
                var[c] += sum_map(chunk, |v| (v - m) * (v - m));
            }
        }
        var.iter_mut().for_each(|v| *v /= cn);
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();

        let mut xhat = x.data.clone();
        let mut y = x.clone();
        for i in 0..x.n {
            let off = i * x.c * plane;
            for c in 0..x.c {
                let range = off + c * plane..off + (c + 1) * plane;
                let (m, s) = (mean[c], inv_std[c]);
                let (g, b) = (self.gamma.value[c], self.beta.value[c]);
                for (xh, yv) in xhat[range.clone()].iter_mut().zip(&mut y.data[range]) {
                    *xh = (*xh - m) * s;
                    *yv = *xh * g + b;
                }
            }
        }

        let mom = T::from_f(self.momentum);
        let unbias = if count > 1 {
            T::from_f(count as f64 / (count - 1) as f64)
        } else {
            T::one()
        };
        for c in 0..x.c {
            self.running_mean.value[c] = (T::one() - mom) * self.running_mean.value[c] + mom * mean[c];
            self.running_var.value[c] = (T::one() - mom) * self.running_var.value[c] + mom * var[c] * unbias;
        }
        self.cache = Some((xhat, inv_std, x.shape()));
        y
    }

    pub fn backward(&mut self, dy: &Tensor4<T>) -> Tensor4<T> {
        let (xhat, inv_std, shape) = self.cache.as_ref().expect("BatchNorm2d::backward before forward");
        let [n, ch, h, w] = *shape;
        let plane = h * w;
        let cn = T::from_f((n * plane) as f64);
        let mut sum_dy = vec![T::zero(); ch];
        let mut sum_dy_xhat = vec![T::zero(); ch];
        for i in 0..n {
            let off = i * ch * plane;
            for c in 0..ch {
                let range = off + c * plane..off + (c + 1) * plane;
                sum_dy[c] += sum_map(&dy.data[range.clone()], |g| g);
                sum_dy_xhat[c] += dot(&dy.data[range.clone()], &xhat[range]);
            }
        }
        let mut dx = Tensor4::zeros(n, ch, h, w);
        for i in 0..n {
            let off = i * ch * plane;
            for c in 0..ch {
                let k = self.gamma.value[c] * inv_std[c] / cn;
                let range = off + c * plane..off + (c + 1) * plane;
                for ((d, &g), &xh) in dx.data[range.clone()]
                    .iter_mut()
                    .zip(&dy.data[range.clone()])
                    .zip(&xhat[range])
                {
                    *d = k * (cn * g - sum_dy[c] - xh * sum_dy_xhat[c]);
                }
            }
        }
        for c in 0..ch {
            self.gamma.grad[c] += sum_dy_xhat[c];
            self.beta.grad[c] += sum_dy[c];
        }
        dx
    }
}

impl<T: Real> Module<T> for BatchNorm2d<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        f(&join(prefix, "gamma"), &self.gamma);
        f(&join(prefix, "beta"), &self.beta);
        f(&join(prefix, "running_mean"), &self.running_mean);
        f(&join(prefix, "running_var"), &self.running_var);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&join(prefix, "gamma"), &mut self.gamma);
        f(&join(prefix, "beta"), &mut self.beta);
        f(&join(prefix, "running_mean"), &mut self.running_mean);
        f(&join(prefix, "running_var"), &mut self.running_var);
    }
}

/// In-place ReLU over any flat buffer.
#[derive(Debug, Clone, Default)]
pub struct Relu {
    mask: Vec<bool>,
}

impl Relu {
    pub fn infer<T: Real>(data: &mut [T]) {
        data.iter_mut().for_each(|v| {
            if *v < T::zero() {
                *v = T::zero()
            }
        });
    }

    pub fn forward<T: Real>(&mut self, data: &mut [T]) {
        self.mask.clear();
        self.mask.extend(data.iter().map(|&v| v > T::zero()));
        Self::infer(data);
    }

    pub fn backward<T: Real>(&self, grad: &mut [T]) {
        for (g, &m) in grad.iter_mut().zip(&self.mask) {
            if !m {
                *g = T::zero();
            }
        }
    }
}

/// In-place leaky ReLU.
#[derive(Debug, Clone)]
pub struct LeakyRelu {
    pub slope: f64,
    mask: Vec<bool>,
}

impl Default for LeakyRelu {
    fn default() -> Self {
        LeakyRelu {
            slope: 0.01,
            mask: Vec::new(),
        }
    }
}

impl LeakyRelu {
    pub fn infer<T: Real>(&self, data: &mut [T]) {
        let s = T::from_f(self.slope);
        data.iter_mut().for_each(|v| {
            if *v < T::zero() {
                *v = *v * s
            }
        });
    }

    pub fn forward<T: Real>(&mut self, data: &mut [T]) {
        self.mask.clear();
        self.mask.extend(data.iter().map(|&v| v >= T::zero()));
        self.infer(data);
    }

    pub fn backward<T: Real>(&self, grad: &mut [T]) {
        let s = T::from_f(self.slope);
        for (g, &m) in grad.iter_mut().zip(&self.mask) {
            if !m {
                *g = *g * s;
            }
        }
    }
}

/// `k x k` max pooling with stride `k`; trailing rows/columns are dropped.
#[derive(Debug, Clone)]
pub struct MaxPool2d {
    pub kernel: usize,
    argmax: Vec<usize>,
    in_shape: [usize; 4],
}

impl MaxPool2d {
    pub fn new(kernel: usize) -> Self {
        MaxPool2d {
            kernel,
            argmax: Vec::new(),
            in_shape: [0; 4],
        }
    }

    fn run<T: Real>(&self, x: &Tensor4<T>, mut record: Option<&mut Vec<usize>>) -> Tensor4<T> {
        let k = self.kernel;
        let (oh, ow) = (x.h / k, x.w / k);
        let mut y = Tensor4::zeros(x.n, x.c, oh, ow);
        let mut out = 0;
        for nc in 0..x.n * x.c {
            let base = nc * x.h * x.w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = T::neg_infinity();
                    let mut best_idx = base + oy * k * x.w + ox * k;
                    for dy in 0..k {
                        let row = base + (oy * k + dy) * x.w + ox * k;
                        for dx in 0..k {
                            let v = x.data[row + dx];
                            if v > best || v.is_nan() {
                                best = v;
                                best_idx = row + dx;
                            }
                        }
                    }
                    y.data[out] = best;
                    if let Some(rec) = record.as_deref_mut() {
                        rec.push(best_idx);
                    }
                    out += 1;
                }
            }
        }
        y
    }

    pub fn infer<T: Real>(&self, x: &Tensor4<T>) -> Tensor4<T> {
        self.run(x, None)
    }

    pub fn forward<T: Real>(&mut self, x: &Tensor4<T>) -> Tensor4<T> {
        let mut argmax = std::mem::take(&mut self.argmax);
        argmax.clear();
        let y = self.run(x, Some(&mut argmax));
        self.argmax = argmax;
        self.in_shape = x.shape();
        y
    }

    pub fn backward<T: Real>(&self, dy: &Tensor4<T>) -> Tensor4<T> {
        let [n, c, h, w] = self.in_shape;
        let mut dx = Tensor4::zeros(n, c, h, w);
        for (&idx, &g) in self.argmax.iter().zip(&dy.data) {
            dx.data[idx] += g;
        }
        dx
    }
}

/// Max over the spatial plane of every channel: `n x c x h x w -> n x c`.
#[derive(Debug, Clone, Default)]
pub struct GlobalMaxPool {
    argmax: Vec<usize>,
    in_shape: [usize; 4],
}

impl GlobalMaxPool {
    fn run<T: Real>(x: &Tensor4<T>, mut record: Option<&mut Vec<usize>>) -> Matrix<T> {
        let plane = x.plane();
        let mut y = Matrix::zeros(x.n, x.c);
        for (nc, chunk) in x.data.chunks(plane).enumerate() {
            let (idx, best) = chunk
                .iter()
                .copied()
                .enumerate()
                .fold((0, T::neg_infinity()), |acc, (i, v)| {
                    if v > acc.1 || v.is_nan() {
                        (i, v)
                    } else {
                        acc
                    }
                });
            y.data[nc] = best;
            if let Some(rec) = record.as_deref_mut() {
                rec.push(nc * plane + idx);
            }
        }
        y
    }

    pub fn infer<T: Real>(x: &Tensor4<T>) -> Matrix<T> {
        Self::run(x, None)
    }

    pub fn forward<T: Real>(&mut self, x: &Tensor4<T>) -> Matrix<T> {
        let mut argmax = std::mem::take(&mut self.argmax);
        argmax.clear();
        let y = Self::run(x, Some(&mut argmax));
        self.argmax = argmax;
        self.in_shape = x.shape();
        y
    }

    pub fn backward<T: Real>(&self, dy: &Matrix<T>) -> Tensor4<T> {
        let [n, c, h, w] = self.in_shape;
        let mut dx = Tensor4::zeros(n, c, h, w);
        for (&idx, &g) in self.argmax.iter().zip(&dy.data) {
            dx.data[idx] += g;
        }
        dx
    }
}

/// Nearest-neighbour resize to an explicit target size, so odd skip
/// connections line up exactly.
#[derive(Debug, Clone, Default)]
pub struct UpsampleNearest {
    in_shape: [usize; 4],
}

impl UpsampleNearest {
    fn src_index(out: usize, in_len: usize, out_len: usize) -> usize {
        (out * in_len / out_len).min(in_len - 1)
    }

    pub fn infer<T: Real>(x: &Tensor4<T>, h: usize, w: usize) -> Tensor4<T> {
        let mut y = Tensor4::zeros(x.n, x.c, h, w);
        for nc in 0..x.n * x.c {
            let src = &x.data[nc * x.h * x.w..(nc + 1) * x.h * x.w];
            let dst = &mut y.data[nc * h * w..(nc + 1) * h * w];
            for oy in 0..h {
                let sy = Self::src_index(oy, x.h, h);
                for ox in 0..w {
                    dst[oy * w + ox] = src[sy * x.w + Self::src_index(ox, x.w, w)];
                }
            }
        }
        y
    }

    pub fn forward<T: Real>(&mut self, x: &Tensor4<T>, h: usize, w: usize) -> Tensor4<T> {
        self.in_shape = x.shape();
        Self::infer(x, h, w)
    }

    pub fn backward<T: Real>(&self, dy: &Tensor4<T>) -> Tensor4<T> {
        let [n, c, ih, iw] = self.in_shape;
        let (h, w) = (dy.h, dy.w);
        let mut dx = Tensor4::zeros(n, c, ih, iw);
        for nc in 0..n * c {
            let src = &dy.data[nc * h * w..(nc + 1) * h * w];
            let dst = &mut dx.data[nc * ih * iw..(nc + 1) * ih * iw];
            for oy in 0..h {
                let sy = Self::src_index(oy, ih, h);
                for ox in 0..w {
                    dst[sy * iw + Self::src_index(ox, iw, w)] += src[oy * w + ox];
                }
            }
        }
        dx
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, n: usize, c: usize, h: usize, w: usize) -> Tensor4<f64> {
        let data = (0..n * c * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor4::from_vec(n, c, h, w, data)
    }

    /// Scalar objective `sum(y * r)` for a fixed random projection `r`.
    fn project(y: &[f64], r: &[f64]) -> f64 {
        y.iter().zip(r).map(|(a, b)| a * b).sum()
    }

    #[test]
    fn conv_matches_direct_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let conv = Conv2d::<f64>::new(2, 3, 3, 1, &mut rng);
        let x = rand_tensor(&mut rng, 2, 2, 5, 4);
        let y = conv.infer(&x);
        assert_eq!(y.shape(), [2, 3, 5, 4]);
        for n in 0..2 {
            for o in 0..3 {
                for i in 0..5 {
                    for j in 0..4 {
                        let mut acc = conv.bias.value[o];
                        for c in 0..2 {
                            for ki in 0..3 {
                                for kj in 0..3 {
                                    let (yi, xj) = (i as isize + ki as isize - 1, j as isize + kj as isize - 1);
                                    if yi < 0 || yi >= 5 || xj < 0 || xj >= 4 {
                                        continue;
                                    }
                                    let wv = conv.weight.value[((o * 2 + c) * 3 + ki) * 3 + kj];
                                    acc += wv * x.data[((n * 2 + c) * 5 + yi as usize) * 4 + xj as usize];
                                }
                            }
                        }
                        let got = y.data[((n * 3 + o) * 5 + i) * 4 + j];
                        assert!((got - acc).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn direct_and_gemm_convolutions_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for (ci, co, k, pad) in [(1, 4, 3, 1), (3, 2, 3, 1), (2, 3, 1, 0), (2, 2, 3, 0)] {
            let mut conv = Conv2d::<f64>::new(ci, co, k, pad, &mut rng);
            let x = rand_tensor(&mut rng, 2, ci, 6, 5);
            let (y1, y2) = (conv.infer_direct(&x), conv.infer_gemm(&x));
            assert_eq!(y1.shape(), y2.shape());
            assert!(y1.data.iter().zip(&y2.data).all(|(a, b)| (a - b).abs() < 1e-12));
            let dy = rand_tensor(&mut rng, 2, co, y1.h, y1.w);
            let dx1 = conv.backward_direct(&x, &dy).unwrap();
            let (gw, gb) = (conv.weight.grad.clone(), conv.bias.grad.clone());
            conv.zero_grad();
            let dx2 = conv.backward_gemm(&x, &dy).unwrap();
            let close = |a: &[f64], b: &[f64]| a.iter().zip(b).all(|(p, q)| (p - q).abs() < 1e-12);
            assert!(close(&dx1.data, &dx2.data) && close(&gw, &conv.weight.grad) && close(&gb, &conv.bias.grad));
        }
    }

    #[test]
    fn conv_and_batchnorm_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut conv = Conv2d::<f64>::new(2, 3, 3, 1, &mut rng);
        let mut bn = BatchNorm2d::<f64>::new(3);
        bn.gamma.value = vec![1.3, 0.7, -0.4];
        bn.beta.value = vec![0.1, -0.2, 0.3];
        let x = rand_tensor(&mut rng, 3, 2, 4, 5);
        let r: Vec<f64> = (0..3 * 3 * 4 * 5).map(|_| rng.gen_range(-1.0..1.0)).collect();

        let y = bn.forward(&conv.forward(&x));
        let _ = project(&y.data, &r);
        let dy = Tensor4::from_vec(3, 3, 4, 5, r.clone());
        let dx = conv.backward(&bn.backward(&dy)).unwrap();

        let eval = |conv: &Conv2d<f64>, x: &Tensor4<f64>| {
            let mut bn2 = BatchNorm2d::<f64>::new(3);
            bn2.gamma.value = vec![1.3, 0.7, -0.4];
            bn2.beta.value = vec![0.1, -0.2, 0.3];
            project(&bn2.forward(&conv.infer(x)).data, &r)
        };
        let h = 1e-6;
        for idx in [0, 5, 17, 30, 53] {
            let mut cp = conv.clone();
            cp.weight.value[idx] += h;
            let up = eval(&cp, &x);
            cp.weight.value[idx] -= 2.0 * h;
            let down = eval(&cp, &x);
            let fd = (up - down) / (2.0 * h);
            assert!(
                (fd - conv.weight.grad[idx]).abs() < 1e-6,
                "w[{idx}] {fd} vs {}",
                conv.weight.grad[idx]
            );
        }
        for idx in [0, 7, 19, 44, 119] {
            let mut xp = x.clone();
            xp.data[idx] += h;
            let up = eval(&conv, &xp);
            xp.data[idx] -= 2.0 * h;
            let down = eval(&conv, &xp);
            let fd = (up - down) / (2.0 * h);
            assert!((fd - dx.data[idx]).abs() < 1e-6, "x[{idx}] {fd} vs {}", dx.data[idx]);
        }
    }

    #[test]
    fn pooling_routes_gradient_to_argmax() {
        let x = Tensor4::from_vec(1, 1, 2, 3, vec![1.0, 5.0, 2.0, 3.0, 4.0, 9.0]);
        let mut pool = MaxPool2d::new(2);
        let y = pool.forward(&x);
        assert_eq!(y.data, vec![5.0]);
        let dx = pool.backward(&Tensor4::from_vec(1, 1, 1, 1, vec![2.0]));
        assert_eq!(dx.data, vec![0.0, 2.0, 0.0, 0.0, 0.0, 0.0]);

        let mut gmp = GlobalMaxPool::default();
        let z = gmp.forward(&x);
        assert_eq!(z.data, vec![9.0]);
        let dx = gmp.backward(&Matrix::from_vec(1, 1, vec![1.5]));
        assert_eq!(dx.data[5], 1.5);
    }

    #[test]
    fn upsample_backward_is_adjoint_of_forward() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_tensor(&mut rng, 1, 2, 3, 5);
        let mut up = UpsampleNearest::default();
        let y = up.forward(&x, 7, 11);
        let g = rand_tensor(&mut rng, 1, 2, 7, 11);
        let lhs = project(&y.data, &g.data);
        let rhs = project(&x.data, &up.backward(&g).data);
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
