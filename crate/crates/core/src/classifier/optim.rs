//! Adam with L2 penalty and Adam with decoupled weight decay (AdamW), plus
//! a reduce-on-plateau learning-rate schedule.

use super::mlp::{c, Real};
use ndarray::{ArrayD, ArrayViewD, ArrayViewMutD, Zip};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-5,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Decay {
    /// `g += wd * p` before the moment updates.
    L2,
    /// `p *= 1 - lr * wd` before the update.
    Decoupled,
}

#[derive(Clone, Debug)]
struct AdamState<F> {
    params: AdamParams,
    decay: Decay,
    t: i32,
    m: Vec<ArrayD<F>>,
    v: Vec<ArrayD<F>>,
}

impl<F: Real> AdamState<F> {
    fn new(params: AdamParams, decay: Decay) -> Self {
        Self {
            params,
            decay,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    fn step(&mut self, params: Vec<ArrayViewMutD<F>>, grads: Vec<ArrayViewD<F>>) {
        assert_eq!(params.len(), grads.len(), "parameter/gradient count mismatch");
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| ArrayD::zeros(g.raw_dim())).collect();
            self.v = grads.iter().map(|g| ArrayD::zeros(g.raw_dim())).collect();
        }
        self.t += 1;
        let p = self.params;
        let lr: F = c(p.lr);
        let wd: F = c(p.weight_decay);
        let b1: F = c(p.beta1);
        let b2: F = c(p.beta2);
        let eps: F = c(p.eps);
        let bc1 = F::one() - b1.powi(self.t);
        let bc2 = F::one() - b2.powi(self.t);
        let decoupled = F::one() - lr * wd;
        for (((mut w, g), m), v) in params.into_iter().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            Zip::from(&mut w).and(&g).and(m).and(v).for_each(|w, &g, m, v| {
                let g = match self.decay {
                    Decay::L2 => g + wd * *w,
                    Decay::Decoupled => {
                        *w = *w * decoupled;
                        g
                    }
                };
                *m = b1 * *m + (F::one() - b1) * g;
                *v = b2 * *v + (F::one() - b2) * g * g;
                let mhat = *m / bc1;
                let vhat = *v / bc2;
                *w = *w - lr * mhat / (vhat.sqrt() + eps);
            });
        }
    }
}

/// Adam; `weight_decay` acts as an L2 penalty added to the gradient.
#[derive(Clone, Debug)]
pub struct Adam<F>(AdamState<F>);

/// Adam with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW<F>(AdamState<F>);

pub trait Optimizer<F> {
    fn step(&mut self, params: Vec<ArrayViewMutD<F>>, grads: Vec<ArrayViewD<F>>);
    fn lr(&self) -> f64;
    fn set_lr(&mut self, lr: f64);
}

macro_rules! adam_variant {
    ($name:ident, $decay:expr) => {
        impl<F: Real> $name<F> {
            pub fn new(params: AdamParams) -> Self {
                Self(AdamState::new(params, $decay))
            }
        }

        impl<F: Real> Optimizer<F> for $name<F> {
            fn step(&mut self, params: Vec<ArrayViewMutD<F>>, grads: Vec<ArrayViewD<F>>) {
                self.0.step(params, grads)
            }

            fn lr(&self) -> f64 {
                self.0.params.lr
            }

            fn set_lr(&mut self, lr: f64) {
                self.0.params.lr = lr;
            }
        }
    };
}

adam_variant!(Adam, Decay::L2);
adam_variant!(AdamW, Decay::Decoupled);

/// Multiplies the learning rate by `factor` once the monitored loss has
/// failed to improve on its best value by more than `threshold` for
/// `patience` consecutive epochs; the counter then restarts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReduceOnPlateau {
    pub factor: f64,
    pub patience: usize,
    pub threshold: f64,
    best: f64,
    bad_epochs: usize,
}

impl ReduceOnPlateau {
    pub fn new(factor: f64, patience: usize, threshold: f64) -> Self {
        Self {
            factor,
            patience,
            threshold,
            best: f64::INFINITY,
            bad_epochs: 0,
        }
    }

    /// Records one epoch's loss; returns the learning rate to use next.
    pub fn step(&mut self, loss: f64, lr: f64) -> f64 {
        if loss < self.best - self.threshold {
            self.best = loss;
            self.bad_epochs = 0;
            return lr;
        }
        self.bad_epochs += 1;
        if self.bad_epochs >= self.patience {
            self.bad_epochs = 0;
            lr * self.factor
        } else {
            lr
        }
    }
}

#[cfg(test)]
mod tests {
    use super::super::mlp::{bce_with_logits, Mlp};
    use super::*;
    use ndarray::{Array1, Array2};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn train_steps<O: Optimizer<f32>>(opt: &mut O, seed: u64) -> Mlp<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut net = Mlp::<f32>::new(6, &[8, 8, 4], 0.5, &mut rng);
        for _ in 0..25 {
            let x = Array2::from_shape_fn((16, 6), |_| rng.gen_range(-1.0f32..1.0));
            let y = Array1::from_shape_fn(16, |_| if rng.gen_bool(0.3) { 1.0f32 } else { 0.0 });
            let masks = net.sample_masks(16, &mut rng);
            let (logits, cache) = net.forward_train(x.view(), &masks);
            let (_, dl) = bce_with_logits(logits.view(), y.view());
            let grads = net.backward(&cache, dl.view());
            net.update_running(16, &cache.batch_stats);
            opt.step(net.params_mut(), grads.tensors());
        }
        net
    }

    #[test]
    fn adamw_without_decay_is_adam_bit_for_bit() {
        let p = AdamParams {
            weight_decay: 0.0,
            ..AdamParams::default()
        };
        let a = train_steps(&mut Adam::new(p), 5);
        let b = train_steps(&mut AdamW::new(p), 5);
        for (x, y) in a.params().iter().zip(b.params()) {
            assert!(x.iter().zip(y.iter()).all(|(u, v)| u.to_bits() == v.to_bits()));
        }
    }

    #[test]
    fn decay_variants_differ_when_enabled() {
        let p = AdamParams {
            weight_decay: 0.1,
            ..AdamParams::default()
        };
        let a = train_steps(&mut Adam::new(p), 5);
        let b = train_steps(&mut AdamW::new(p), 5);
        assert_ne!(a, b);
    }

    #[test]
    fn plateau_fires_after_three_flat_epochs() {
        let mut s = ReduceOnPlateau::new(0.1, 3, 1e-4);
        let mut lr = 1e-3;
        let mut lrs = Vec::new();
        for loss in [1.0, 0.9, 0.9, 0.9, 0.9, 0.8, 0.85, 0.85, 0.85] {
            lr = s.step(loss, lr);
            lrs.push(lr);
        }
        let fired: Vec<usize> = lrs.windows(2).enumerate().filter(|(_, w)| w[1] < w[0]).map(|(i, _)| i + 1).collect();
        // Epochs 2,3,4 fail to improve on 0.9; epochs 6,7,8 fail on 0.8.
        assert_eq!(fired, [4, 8]);
        assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn improvement_needs_threshold() {
        let mut s = ReduceOnPlateau::new(0.5, 1, 1e-4);
        assert_eq!(s.step(1.0, 1.0), 1.0);
        assert_eq!(s.step(1.0 - 5e-5, 1.0), 0.5);
    }
}
