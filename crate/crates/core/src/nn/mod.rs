//! Minimal dense/convolutional network engine with explicit backward passes.
//!
//! Everything is generic over [`Real`] so the same layer code runs in `f32`
//! for training and in `f64` for gradient verification. Layers cache what
//! they need during `forward` and accumulate parameter gradients during
//! `backward`; gradients are cleared explicitly with [`Module::zero_grad`].

mod layers;
mod optim;
mod tensor;

pub use layers::{BatchNorm2d, Conv2d, GlobalMaxPool, LeakyRelu, Linear, MaxPool2d, Relu, UpsampleNearest};
pub use optim::Sgd;
pub use tensor::{Matrix, Tensor4};

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::Float;
use rand::Rng;

/// Scalar type the engine is generic over.
pub trait Real:
    Float + Default + Debug + Send + Sync + Sum + AddAssign + SubAssign + MulAssign + DivAssign + 'static
{
    /// `c = alpha * op(a) * op(b) + beta * c` with row-major storage.
    ///
    /// `a` is `m x k` (or `k x m` when `trans_a`), `b` is `k x n`
    /// (or `n x k` when `trans_b`), `c` is `m x n`.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        trans_a: bool,
        b: &[Self],
        trans_b: bool,
        beta: Self,
        c: &mut [Self],
    );

    fn from_f(v: f64) -> Self;
    fn to_f(self) -> f64;
}

macro_rules! impl_real {
    ($t:ty, $gemm:path) => {
        impl Real for $t {
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                trans_a: bool,
                b: &[Self],
                trans_b: bool,
                beta: Self,
                c: &mut [Self],
            ) {
                assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
                let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
                let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
                // SAFETY: bounds checked above; strides describe the row-major
                // layouts of the three buffers.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        n as isize,
                        1,
                    );
                }
            }

            fn from_f(v: f64) -> Self {
                v as $t
            }

            fn to_f(self) -> f64 {
                self as f64
            }
        }
    };
}

impl_real!(f32, matrixmultiply::sgemm);
impl_real!(f64, matrixmultiply::dgemm);

/// A named tensor owned by a layer. Non-trainable parameters (batch-norm
/// running statistics) are skipped by the optimizer but saved in checkpoints.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub value: Vec<T>,
    pub grad: Vec<T>,
    pub shape: Vec<usize>,
    pub trainable: bool,
}

impl<T: Real> Param<T> {
    pub fn new(value: Vec<T>, shape: Vec<usize>) -> Self {
        debug_assert_eq!(value.len(), shape.iter().product::<usize>());
        let grad = vec![T::zero(); value.len()];
        Param {
            value,
            grad,
            shape,
            trainable: true,
        }
    }

    pub fn buffer(value: Vec<T>, shape: Vec<usize>) -> Self {
        Param {
            trainable: false,
            ..Param::new(value, shape)
        }
    }

    /// Kaiming-uniform: `U(-b, b)` with `b = sqrt(6 / fan_in)`.
    pub fn kaiming_uniform<R: Rng>(shape: Vec<usize>, fan_in: usize, rng: &mut R) -> Self {
        let bound = (6.0 / fan_in as f64).sqrt();
        let n = shape.iter().product();
        let value = (0..n).map(|_| T::from_f(rng.gen_range(-bound..bound))).collect();
        Param::new(value, shape)
    }

    /// Bias init used by common frameworks: `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    pub fn fan_in_uniform<R: Rng>(shape: Vec<usize>, fan_in: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let n = shape.iter().product();
        let value = (0..n).map(|_| T::from_f(rng.gen_range(-bound..bound))).collect();
        Param::new(value, shape)
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = T::zero());
    }
}

/// Anything that owns named parameters.
pub trait Module<T: Real> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>));

    fn zero_grad(&mut self) {
        self.visit_mut("", &mut |_, p| p.zero_grad());
    }

    fn num_trainable(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, p| {
            if p.trainable {
                n += p.value.len()
            }
        });
        n
    }

    /// Trainable parameters flattened in visit order.
    fn flat_params(&self) -> Vec<T> {
        let mut out = Vec::new();
        self.visit("", &mut |_, p| {
            if p.trainable {
                out.extend_from_slice(&p.value)
            }
        });
        out
    }

    /// Gradients of trainable parameters flattened in visit order.
    fn flat_grads(&self) -> Vec<T> {
        let mut out = Vec::new();
        self.visit("", &mut |_, p| {
            if p.trainable {
                out.extend_from_slice(&p.grad)
            }
        });
        out
    }

    fn set_flat_params(&mut self, flat: &[T]) {
        let mut offset = 0;
        self.visit_mut("", &mut |_, p| {
            if p.trainable {
                let n = p.value.len();
                p.value.copy_from_slice(&flat[offset..offset + n]);
                offset += n;
            }
        });
        assert_eq!(offset, flat.len(), "flat parameter length mismatch");
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Numerically stable logistic function.
pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Row-wise softmax of a `rows x cols` buffer.
pub fn softmax_rows<T: Real>(logits: &[T], cols: usize) -> Vec<T> {
    let mut out = logits.to_vec();
    for row in out.chunks_mut(cols) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}
