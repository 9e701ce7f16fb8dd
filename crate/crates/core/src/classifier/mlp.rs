//! Multilayer perceptron: `[Linear → BatchNorm → ReLU → Dropout] × n → Linear`
//! producing one logit, with hand-written backward pass.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, ArrayViewD, ArrayViewMutD, Axis, LinalgScalar, ScalarOperand, Zip};
use num_traits::{Float, FromPrimitive};
use rand::Rng;
use std::fmt::Debug;
use thiserror::Error;

/// Floating-point types the network runs in: `f32` for training, `f64` for
/// gradient checks.
pub trait Real: Float + FromPrimitive + LinalgScalar + ScalarOperand + Debug + Send + Sync + 'static {}
impl Real for f32 {}
impl Real for f64 {}

pub(crate) fn c<F: Real>(v: f64) -> F {
    F::from_f64(v).expect("representable constant")
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MlpError {
    #[error("non-finite value after layer {layer}")]
    Numeric { layer: String },
    #[error("input has {got} features, network expects {expected}")]
    InputDim { expected: usize, got: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm<F> {
    pub gamma: Array1<F>,
    pub beta: Array1<F>,
    pub running_mean: Array1<F>,
    pub running_var: Array1<F>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer<F> {
    /// Shape `(in, out)`.
    pub w: Array2<F>,
    pub b: Array1<F>,
    /// Present on hidden layers only.
    pub bn: Option<BatchNorm<F>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mlp<F> {
    pub layers: Vec<Layer<F>>,
    pub dropout: f64,
    pub bn_momentum: f64,
    pub bn_eps: f64,
}

/// Gradients, laid out like the parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerGrad<F> {
    pub w: Array2<F>,
    pub b: Array1<F>,
    pub gamma: Option<Array1<F>>,
    pub beta: Option<Array1<F>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Grads<F> {
    pub layers: Vec<LayerGrad<F>>,
}

impl<F: Real> Grads<F> {
    pub fn tensors(&self) -> Vec<ArrayViewD<'_, F>> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.push(l.w.view().into_dyn());
            out.push(l.b.view().into_dyn());
            if let (Some(g), Some(b)) = (&l.gamma, &l.beta) {
                out.push(g.view().into_dyn());
                out.push(b.view().into_dyn());
            }
        }
        out
    }
}

/// Everything the backward pass needs from a training-mode forward pass.
pub struct Cache<F> {
    inputs: Vec<Array2<F>>,
    xhat: Vec<Array2<F>>,
    inv_std: Vec<Array1<F>>,
    /// ReLU output before dropout, per hidden layer.
    relu: Vec<Array2<F>>,
    masks: Vec<Array2<F>>,
    /// Batch mean and biased variance per hidden layer.
    pub batch_stats: Vec<(Array1<F>, Array1<F>)>,
}

impl<F: Real> Mlp<F> {
    /// Uniform `±1/sqrt(fan_in)` weights and biases; batch-norm scale 1,
    /// shift 0, running mean 0, running variance 1.
    pub fn new<R: Rng>(input_dim: usize, hidden: &[usize], dropout: f64, rng: &mut R) -> Self {
        let mut layers = Vec::new();
        let mut fan_in = input_dim;
        let dims: Vec<usize> = hidden.iter().copied().chain(std::iter::once(1)).collect();
        for (i, &out) in dims.iter().enumerate() {
            let bound = 1.0 / (fan_in as f64).sqrt();
            let w = Array2::from_shape_fn((fan_in, out), |_| c(rng.gen_range(-bound..bound)));
            let b = Array1::from_shape_fn(out, |_| c(rng.gen_range(-bound..bound)));
            let bn = (i + 1 < dims.len()).then(|| BatchNorm {
                gamma: Array1::from_elem(out, F::one()),
                beta: Array1::zeros(out),
                running_mean: Array1::zeros(out),
                running_var: Array1::from_elem(out, F::one()),
            });
            layers.push(Layer { w, b, bn });
            fan_in = out;
        }
        Self {
            layers,
            dropout,
            bn_momentum: 0.1,
            bn_eps: 1e-5,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].w.nrows()
    }

    pub fn hidden_dims(&self) -> Vec<usize> {
        self.layers[..self.layers.len() - 1].iter().map(|l| l.w.ncols()).collect()
    }

    /// Parameters in a fixed order: per layer `w, b[, gamma, beta]`.
    pub fn params_mut(&mut self) -> Vec<ArrayViewMutD<'_, F>> {
        let mut out = Vec::new();
        for l in &mut self.layers {
            let Layer { w, b, bn } = l;
            out.push(w.view_mut().into_dyn());
            out.push(b.view_mut().into_dyn());
            if let Some(bn) = bn {
                out.push(bn.gamma.view_mut().into_dyn());
                out.push(bn.beta.view_mut().into_dyn());
            }
        }
        out
    }

    pub fn params(&self) -> Vec<ArrayViewD<'_, F>> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.push(l.w.view().into_dyn());
            out.push(l.b.view().into_dyn());
            if let Some(bn) = &l.bn {
                out.push(bn.gamma.view().into_dyn());
                out.push(bn.beta.view().into_dyn());
            }
        }
        out
    }

    /// Inverted-dropout masks (entries 0 or `1/(1-p)`) for a batch.
    pub fn sample_masks<R: Rng>(&self, batch: usize, rng: &mut R) -> Vec<Array2<F>> {
        let keep = 1.0 - self.dropout;
        let scale: F = if keep > 0.0 { c(1.0 / keep) } else { F::zero() };
        self.hidden_dims()
            .into_iter()
            .map(|h| Array2::from_shape_fn((batch, h), |_| if rng.gen::<f64>() < keep { scale } else { F::zero() }))
            .collect()
    }

    /// Masks that keep every unit (dropout disabled).
    pub fn unit_masks(&self, batch: usize) -> Vec<Array2<F>> {
        self.hidden_dims()
            .into_iter()
            .map(|h| Array2::from_elem((batch, h), F::one()))
            .collect()
    }

    /// Training-mode forward pass: batch statistics and the given dropout
    /// masks. Running statistics are not touched; see [`Mlp::update_running`].
    pub fn forward_train(&self, x: ArrayView2<F>, masks: &[Array2<F>]) -> (Array1<F>, Cache<F>) {
        let n: F = c(x.nrows() as f64);
        let eps: F = c(self.bn_eps);
        let mut cache = Cache {
            inputs: Vec::new(),
            xhat: Vec::new(),
            inv_std: Vec::new(),
            relu: Vec::new(),
            masks: masks.to_vec(),
            batch_stats: Vec::new(),
        };
        let mut h = x.to_owned();
        for (i, layer) in self.layers.iter().enumerate() {
            let z = h.dot(&layer.w) + &layer.b;
            cache.inputs.push(h);
            match &layer.bn {
                Some(bn) => {
                    let mean = z.sum_axis(Axis(0)) / n;
                    let centered = &z - &mean;
                    let var = centered.mapv(|v| v * v).sum_axis(Axis(0)) / n;
                    let inv_std = var.mapv(|v| F::one() / (v + eps).sqrt());
                    let xhat = &centered * &inv_std;
                    let y = &xhat * &bn.gamma + &bn.beta;
                    let r = y.mapv(|v| v.max(F::zero()));
                    h = &r * &masks[i];
                    cache.xhat.push(xhat);
                    cache.inv_std.push(inv_std);
                    cache.relu.push(r);
                    cache.batch_stats.push((mean, var));
                }
                None => {
                    return (z.column(0).to_owned(), cache);
                }
            }
        }
        unreachable!("network ends with a plain linear layer")
    }

    /// Moves running statistics toward the batch statistics of a training
    /// step (unbiased variance, momentum `bn_momentum`).
    pub fn update_running(&mut self, batch: usize, stats: &[(Array1<F>, Array1<F>)]) {
        let m: F = c(self.bn_momentum);
        let unbias: F = if batch > 1 { c(batch as f64 / (batch - 1) as f64) } else { F::one() };
        for (layer, (mean, var)) in self.layers.iter_mut().zip(stats) {
            let bn = layer.bn.as_mut().expect("stats only for batch-norm layers");
            Zip::from(&mut bn.running_mean).and(mean).for_each(|r, &v| *r = (F::one() - m) * *r + m * v);
            Zip::from(&mut bn.running_var)
                .and(var)
                .for_each(|r, &v| *r = (F::one() - m) * *r + m * v * unbias);
        }
    }

    /// Gradients of a scalar loss given `dlogits = dL/dlogit` per row.
    pub fn backward(&self, cache: &Cache<F>, dlogits: ArrayView1<F>) -> Grads<F> {
        let n: F = c(dlogits.len() as f64);
        let mut grads: Vec<LayerGrad<F>> = Vec::with_capacity(self.layers.len());
        let last = self.layers.len() - 1;
        // Output layer.
        let dz = dlogits.to_owned().insert_axis(Axis(1));
        let input = &cache.inputs[last];
        grads.push(LayerGrad {
            w: input.t().dot(&dz),
            b: dz.sum_axis(Axis(0)),
            gamma: None,
            beta: None,
        });
        let mut dh = dz.dot(&self.layers[last].w.t());
        for i in (0..last).rev() {
            let bn = self.layers[i].bn.as_ref().expect("hidden layer has batch norm");
            // Dropout, then ReLU.
            let mut dy = &dh * &cache.masks[i];
            Zip::from(&mut dy).and(&cache.relu[i]).for_each(|d, &r| {
                if r <= F::zero() {
                    *d = F::zero();
                }
            });
            let xhat = &cache.xhat[i];
            let dgamma = (&dy * xhat).sum_axis(Axis(0));
            let dbeta = dy.sum_axis(Axis(0));
            let dxhat = &dy * &bn.gamma;
            let sum_dxhat = dxhat.sum_axis(Axis(0));
            let sum_dxhat_xhat = (&dxhat * xhat).sum_axis(Axis(0));
            let dz = (&dxhat * n - &sum_dxhat - &(xhat * &sum_dxhat_xhat)) * &(&cache.inv_std[i] / n);
            let input = &cache.inputs[i];
            let gw = input.t().dot(&dz);
            let gb = dz.sum_axis(Axis(0));
            dh = dz.dot(&self.layers[i].w.t());
            grads.push(LayerGrad {
                w: gw,
                b: gb,
                gamma: Some(dgamma),
                beta: Some(dbeta),
            });
        }
        grads.reverse();
        Grads { layers: grads }
    }

    /// Evaluation-mode logits: running statistics, no dropout. Fails on
    /// the first layer producing a non-finite value.
    pub fn forward_eval(&self, x: ArrayView2<F>) -> Result<Array1<F>, MlpError> {
        if x.ncols() != self.input_dim() {
            return Err(MlpError::InputDim {
                expected: self.input_dim(),
                got: x.ncols(),
            });
        }
        let eps: F = c(self.bn_eps);
        let mut h = x.to_owned();
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = h.dot(&layer.w) + &layer.b;
            let name = |part: &str| format!("{part} {}", i + 1);
            if z.iter().any(|v| !v.is_finite()) {
                return Err(MlpError::Numeric { layer: name("linear") });
            }
            match &layer.bn {
                Some(bn) => {
                    let scale = Zip::from(&bn.gamma)
                        .and(&bn.running_var)
                        .map_collect(|&g, &v| g / (v + eps).sqrt());
                    let shift = Zip::from(&bn.beta)
                        .and(&bn.running_mean)
                        .and(&scale)
                        .map_collect(|&b, &m, &s| b - m * s);
                    z = z * &scale + &shift;
                    if z.iter().any(|v| !v.is_finite()) {
                        return Err(MlpError::Numeric { layer: name("batchnorm") });
                    }
                    h = z.mapv(|v| v.max(F::zero()));
                }
                None => return Ok(z.column(0).to_owned()),
            }
        }
        unreachable!("network ends with a plain linear layer")
    }

    /// Converts between float types (e.g. an `f32` model to `f64`).
    pub fn cast<G: Real>(&self) -> Mlp<G> {
        let cv = |a: &Array1<F>| a.mapv(|v| c::<G>(v.to_f64().unwrap()));
        Mlp {
            layers: self
                .layers
                .iter()
                .map(|l| Layer {
                    w: l.w.mapv(|v| c::<G>(v.to_f64().unwrap())),
                    b: cv(&l.b),
                    bn: l.bn.as_ref().map(|bn| BatchNorm {
                        gamma: cv(&bn.gamma),
                        beta: cv(&bn.beta),
                        running_mean: cv(&bn.running_mean),
                        running_var: cv(&bn.running_var),
                    }),
                })
                .collect(),
            dropout: self.dropout,
            bn_momentum: self.bn_momentum,
            bn_eps: self.bn_eps,
        }
    }
}

/// Mean binary cross-entropy on logits and its gradient per logit.
pub fn bce_with_logits<F: Real>(logits: ArrayView1<F>, targets: ArrayView1<F>) -> (F, Array1<F>) {
    let n: F = c(logits.len() as f64);
    let mut loss = F::zero();
    let mut grad = Array1::zeros(logits.len());
    Zip::from(&mut grad).and(logits).and(targets).for_each(|g, &z, &y| {
        let e = (-z.abs()).exp();
        loss = loss + z.max(F::zero()) - z * y + e.ln_1p();
        let p = if z >= F::zero() { F::one() / (F::one() + e) } else { e / (F::one() + e) };
        *g = (p - y) / n;
    });
    (loss / n, grad)
}

pub fn sigmoid<F: Real>(z: F) -> F {
    if z >= F::zero() {
        F::one() / (F::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (F::one() + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn loss_at(net: &Mlp<f64>, x: &Array2<f64>, y: &Array1<f64>, masks: &[Array2<f64>]) -> f64 {
        let (logits, _) = net.forward_train(x.view(), masks);
        bce_with_logits(logits.view(), y.view()).0
    }

    /// Central-difference check of every parameter of a small network in
    /// training mode with fixed dropout masks.
    pub(crate) fn gradient_check(seed: u64) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut net = Mlp::<f64>::new(8, &[6, 5, 4], 0.5, &mut rng);
        for l in &mut net.layers {
            if let Some(bn) = &mut l.bn {
                bn.gamma.mapv_inplace(|_| rng.gen_range(0.5..1.5));
                bn.beta.mapv_inplace(|_| rng.gen_range(-0.5..0.5));
            }
        }
        let n = 7;
        let x = Array::from_shape_fn((n, 8), |_| rng.gen_range(-2.0..2.0));
        let y = Array::from_shape_fn(n, |_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 });
        let masks = net.sample_masks(n, &mut rng);
        let (logits, cache) = net.forward_train(x.view(), &masks);
        let (_, dl) = bce_with_logits(logits.view(), y.view());
        let grads = net.backward(&cache, dl.view());
        let analytic: Vec<f64> = grads.tensors().iter().flat_map(|t| t.iter().copied().collect::<Vec<_>>()).collect();

        let h = 1e-4;
        let count = analytic.len();
        let mut numeric = Vec::with_capacity(count);
        for k in 0..count {
            let nudge = |net: &mut Mlp<f64>, d: f64| {
                let mut seen = 0;
                for mut p in net.params_mut() {
                    if k < seen + p.len() {
                        let v = p.iter_mut().nth(k - seen).unwrap();
                        *v += d;
                        return;
                    }
                    seen += p.len();
                }
            };
            nudge(&mut net, h);
            let up = loss_at(&net, &x, &y, &masks);
            nudge(&mut net, -2.0 * h);
            let dn = loss_at(&net, &x, &y, &masks);
            nudge(&mut net, h);
            numeric.push((up - dn) / (2.0 * h));
        }
        let diff: f64 = analytic.iter().zip(&numeric).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let scale = analytic.iter().map(|a| a * a).sum::<f64>().sqrt().max(numeric.iter().map(|a| a * a).sum::<f64>().sqrt());
        diff / scale.max(1e-12)
    }

    #[test]
    fn gradients_match_finite_differences() {
        for seed in 0..10 {
            let rel = gradient_check(seed);
            assert!(rel < 1e-3, "seed {seed}: relative error {rel}");
        }
    }

    #[test]
    fn zero_network_gives_half() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut net = Mlp::<f32>::new(8, &[16, 8, 4], 0.5, &mut rng);
        for mut p in net.params_mut() {
            p.fill(0.0);
        }
        let x = Array2::from_shape_fn((3, 8), |(i, j)| (i * 8 + j) as f32);
        let z = net.forward_eval(x.view()).unwrap();
        assert!(z.iter().all(|&v| v == 0.0));
        assert_eq!(sigmoid(z[0]), 0.5);
    }

    #[test]
    fn eval_forward_is_pure() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = Mlp::<f32>::new(8, &[16, 8, 4], 0.5, &mut rng);
        let x = Array2::from_shape_fn((5, 8), |_| rng.gen_range(-1.0..1.0));
        assert_eq!(net.forward_eval(x.view()).unwrap(), net.forward_eval(x.view()).unwrap());
    }

    #[test]
    fn nan_reports_layer() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut net = Mlp::<f32>::new(4, &[4, 4, 4], 0.5, &mut rng);
        net.layers[1].w[[0, 0]] = f32::NAN;
        let x = Array2::from_elem((2, 4), 1.0f32);
        assert_eq!(
            net.forward_eval(x.view()),
            Err(MlpError::Numeric { layer: "linear 2".into() })
        );
        assert!(matches!(net.forward_eval(Array2::zeros((1, 3)).view()), Err(MlpError::InputDim { .. })));
    }

    #[test]
    fn running_stats_track_batches() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut net = Mlp::<f64>::new(2, &[3, 3, 3], 0.0, &mut rng);
        let x = Array2::from_shape_fn((4, 2), |(i, j)| (i + j) as f64);
        let (_, cache) = net.forward_train(x.view(), &net.unit_masks(4));
        net.update_running(4, &cache.batch_stats);
        let bn = net.layers[0].bn.as_ref().unwrap();
        let (mean, var) = &cache.batch_stats[0];
        for j in 0..3 {
            assert!((bn.running_mean[j] - 0.1 * mean[j]).abs() < 1e-12);
            assert!((bn.running_var[j] - (0.9 + 0.1 * var[j] * 4.0 / 3.0)).abs() < 1e-12);
        }
    }
}
