use std::collections::BTreeMap;

use super::{Module, Real};

/// SGD with classical momentum: `v <- m*v + g; p <- p - lr*v`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sgd<T> {
    pub lr: f64,
    pub momentum: f64,
    /// Velocity per parameter name; created lazily on the first step.
    pub velocity: BTreeMap<String, Vec<T>>,
}

impl<T: Real> Sgd<T> {
    pub fn new(lr: f64, momentum: f64) -> Self {
        Sgd {
            lr,
            momentum,
            velocity: BTreeMap::new(),
        }
    }

    /// Applies one update to every trainable parameter of `module` using the
    /// gradients currently accumulated there.
    pub fn step<M: Module<T> + ?Sized>(&mut self, module: &mut M) {
        let lr = T::from_f(self.lr);
        let mom = T::from_f(self.momentum);
        let velocity = &mut self.velocity;
        module.visit_mut("", &mut |name, p| {
            if !p.trainable {
                return;
            }
            let v = velocity
                .entry(name.to_string())
                .or_insert_with(|| vec![T::zero(); p.value.len()]);
            for ((w, g), vel) in p.value.iter_mut().zip(&p.grad).zip(v.iter_mut()) {
                *vel = mom * *vel + *g;
                *w -= lr * *vel;
            }
        });
    }

    pub fn reset(&mut self) {
        self.velocity.clear();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Linear;

    #[test]
    fn momentum_accumulates_velocity() {
        let mut lin = Linear::<f64>::zeroed(1, 1);
        let mut opt = Sgd::new(0.1, 0.9);
        lin.weight.grad = vec![1.0];
        opt.step(&mut lin);
        assert!((lin.weight.value[0] + 0.1).abs() < 1e-15);
        opt.step(&mut lin);
        // v = 0.9 * 1 + 1 = 1.9
        assert!((lin.weight.value[0] + 0.1 + 0.19).abs() < 1e-15);
    }
}
