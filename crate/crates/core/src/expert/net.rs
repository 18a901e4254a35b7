//! Residual denoising CNN: conv+ReLU, then `middle_layers` × (conv + batch
//! norm + ReLU), then a single-channel conv that predicts the noise.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::conv::{Conv2d, Real};
use crate::error::{Error, Result};

pub const BN_EPS: f64 = 1e-5;
/// Weight of the old running statistic: `running = 0.9·running + 0.1·batch`.
pub const BN_MOMENTUM: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NetConfig {
    pub channels: usize,
    pub middle_layers: usize,
    pub kernel: usize,
}

impl NetConfig {
    /// Full-size DnCNN: 64 channels, 15 conv+BN+ReLU layers.
    pub const DNCNN: NetConfig = NetConfig {
        channels: 64,
        middle_layers: 15,
        kernel: 3,
    };

    /// CPU-sized default: 32 channels, 6 middle layers.
    pub const DESK: NetConfig = NetConfig {
        channels: 32,
        middle_layers: 6,
        kernel: 3,
    };

    pub fn padding(&self) -> usize {
        (self.kernel - 1) / 2
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel == 0 || self.kernel.is_multiple_of(2) {
            return Err(Error::InvalidConfig(format!(
                "kernel must be odd, got {}",
                self.kernel
            )));
        }
        if self.channels == 0 {
            return Err(Error::InvalidConfig("channels must be positive".into()));
        }
        Ok(())
    }

    /// Number of conv layers including the first and last.
    pub fn depth(&self) -> usize {
        self.middle_layers + 2
    }
}

impl Default for NetConfig {
    fn default() -> Self {
        Self::DESK
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm<T> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub momentum: T,
    pub eps: T,
}

impl<T: Real> BatchNorm<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: vec![T::one(); channels],
            beta: vec![T::zero(); channels],
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            momentum: T::from_f64(BN_MOMENTUM),
            eps: T::from_f64(BN_EPS),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer<T> {
    pub conv: Conv2d<T>,
    pub bn: Option<BatchNorm<T>>,
    pub relu: bool,
    pub trainable: bool,
}

impl<T: Real> Layer<T> {
    pub fn param_count(&self) -> usize {
        self.conv.param_count() + self.bn.as_ref().map_or(0, |b| 2 * b.gamma.len())
    }

    fn all_finite(&self) -> bool {
        let fin = |v: &[T]| v.iter().all(|x| x.is_finite());
        fin(&self.conv.weight)
            && fin(&self.conv.bias)
            && self.bn.as_ref().is_none_or(|b| {
                fin(&b.gamma)
                    && fin(&b.beta)
                    && fin(&b.running_mean)
                    && fin(&b.running_var)
                    && b.running_var.iter().all(|v| *v >= T::zero())
            })
    }
}

/// An expert denoiser. Maps a noisy single-channel patch to its noise estimate.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertNet<T = f32> {
    pub config: NetConfig,
    pub layers: Vec<Layer<T>>,
    pub mode: Mode,
}

/// Per-layer parameter gradients, shaped like the layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrads<T> {
    pub weight: Vec<T>,
    pub bias: Vec<T>,
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
}

impl<T: Real> LayerGrads<T> {
    fn zeros_like(layer: &Layer<T>) -> Self {
        let c = layer.bn.as_ref().map_or(0, |b| b.gamma.len());
        Self {
            weight: vec![T::zero(); layer.conv.weight.len()],
            bias: vec![T::zero(); layer.conv.bias.len()],
            gamma: vec![T::zero(); c],
            beta: vec![T::zero(); c],
        }
    }

    pub fn norm_sq(&self) -> f64 {
        [&self.weight, &self.bias, &self.gamma, &self.beta]
            .iter()
            .flat_map(|v| v.iter())
            .map(|v| v.as_f64() * v.as_f64())
            .sum()
    }
}

/// Batch statistics measured by a training forward pass.
#[derive(Debug, Clone)]
pub(crate) struct BatchStats {
    pub layer: usize,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Intermediates kept for backpropagation.
pub(crate) struct Trace<T> {
    /// Input activation of each layer, `n × c_in × h × w`.
    inputs: Vec<Vec<T>>,
    /// Normalized pre-activations of BN layers and the `1/sqrt(var+eps)` used.
    normalized: Vec<Option<(Vec<T>, Vec<T>)>>,
    /// Whether the layer normalized with batch statistics.
    batch_norm_used: Vec<bool>,
}

pub(crate) struct Pass<T> {
    pub output: Vec<T>,
    pub trace: Trace<T>,
    pub stats: Vec<BatchStats>,
}

impl ExpertNet<f32> {
    /// He-normal initialization (`std = sqrt(2 / fan_in)`) from `seed`;
    /// zero biases; identity batch norm.
    pub fn build(config: NetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = config.channels;
        let k = config.kernel;
        let mut layers = Vec::with_capacity(config.depth());
        let mut push = |cin: usize, cout: usize, bn: bool, relu: bool| {
            let mut conv = Conv2d::<f32>::zeros(cin, cout, k);
            let std = (2.0 / conv.fan_in() as f64).sqrt();
            let normal = Normal::new(0.0, std).unwrap();
            conv.weight
                .iter_mut()
                .for_each(|w| *w = normal.sample(&mut rng) as f32);
            layers.push(Layer {
                conv,
                bn: bn.then(|| BatchNorm::new(cout)),
                relu,
                trainable: true,
            });
        };
        push(1, c, false, true);
        for _ in 0..config.middle_layers {
            push(c, c, true, true);
        }
        push(c, 1, false, false);
        Ok(Self {
            config,
            layers,
            mode: Mode::Eval,
        })
    }

    /// Widen to `f64` for gradient checking.
    pub fn to_f64(&self) -> ExpertNet<f64> {
        self.cast()
    }
}

impl<T: Real> ExpertNet<T> {
    pub fn cast<U: Real>(&self) -> ExpertNet<U> {
        let v = |x: &[T]| {
            x.iter()
                .map(|a| U::from_f64(a.as_f64()))
                .collect::<Vec<U>>()
        };
        ExpertNet {
            config: self.config,
            mode: self.mode,
            layers: self
                .layers
                .iter()
                .map(|l| Layer {
                    conv: Conv2d {
                        in_channels: l.conv.in_channels,
                        out_channels: l.conv.out_channels,
                        kernel: l.conv.kernel,
                        weight: v(&l.conv.weight),
                        bias: v(&l.conv.bias),
                    },
                    bn: l.bn.as_ref().map(|b| BatchNorm {
                        gamma: v(&b.gamma),
                        beta: v(&b.beta),
                        running_mean: v(&b.running_mean),
                        running_var: v(&b.running_var),
                        momentum: U::from_f64(b.momentum.as_f64()),
                        eps: U::from_f64(b.eps.as_f64()),
                    }),
                    relu: l.relu,
                    trainable: l.trainable,
                })
                .collect(),
        }
    }

    /// Trainable parameter count (weights, biases, BN gamma/beta).
    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Layer::param_count).sum()
    }

    /// Running mean/variance entries (not trained by gradient descent).
    pub fn running_stat_count(&self) -> usize {
        self.layers
            .iter()
            .filter_map(|l| l.bn.as_ref())
            .map(|b| 2 * b.running_mean.len())
            .sum()
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    /// Freeze every layer except the final convolution.
    pub fn freeze_all_but_last(&mut self) {
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.trainable = i == last;
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        if self.layers.len() != self.config.depth() {
            return Err(Error::InvalidConfig(format!(
                "network has {} layers, config implies {}",
                self.layers.len(),
                self.config.depth()
            )));
        }
        for (i, l) in self.layers.iter().enumerate() {
            let (cin, cout) = match i {
                0 => (1, self.config.channels),
                _ if i + 1 == self.layers.len() => (self.config.channels, 1),
                _ => (self.config.channels, self.config.channels),
            };
            let middle = i > 0 && i + 1 < self.layers.len();
            let c = &l.conv;
            if c.in_channels != cin
                || c.out_channels != cout
                || c.kernel != self.config.kernel
                || c.weight.len() != cout * cin * c.kernel * c.kernel
                || c.bias.len() != cout
                || l.bn.is_some() != middle
                || l.relu == (i + 1 == self.layers.len())
                || l.bn.as_ref().is_some_and(|b| {
                    [&b.gamma, &b.beta, &b.running_mean, &b.running_var]
                        .iter()
                        .any(|v| v.len() != cout)
                })
            {
                return Err(Error::InvalidConfig(format!(
                    "layer {i} has inconsistent shape"
                )));
            }
            if !l.all_finite() {
                return Err(Error::InvalidConfig(format!(
                    "layer {i} has invalid parameters"
                )));
            }
        }
        Ok(())
    }

    fn uses_batch_stats(&self, layer: usize) -> bool {
        self.mode == Mode::Train && self.layers[layer].trainable && self.layers[layer].bn.is_some()
    }

    pub(crate) fn needs_batch(&self) -> bool {
        (0..self.layers.len()).any(|i| self.uses_batch_stats(i))
    }

    /// Run `n` samples of `h × w` through the network. Trainable BN layers in
    /// Train mode normalize with batch statistics; everything else uses the
    /// running statistics.
    pub(crate) fn pass(
        &self,
        input: &[T],
        n: usize,
        h: usize,
        w: usize,
        keep: bool,
    ) -> Result<Pass<T>> {
        let hw = h * w;
        if input.len() != n * hw || n == 0 {
            return Err(Error::dims(n * hw, input.len()));
        }
        let mut act = input.to_vec();
        let mut trace = Trace {
            inputs: Vec::new(),
            normalized: Vec::new(),
            batch_norm_used: Vec::new(),
        };
        let mut stats = Vec::new();
        for (li, layer) in self.layers.iter().enumerate() {
            let cin = layer.conv.in_channels;
            let cout = layer.conv.out_channels;
            let per_in = cin * hw;
            let per_out = cout * hw;
            let samples: Vec<Vec<T>> = crate::par::map_range(n, |s| {
                layer.conv.forward(&act[s * per_in..(s + 1) * per_in], h, w)
            });
            let mut z: Vec<T> = samples.concat();

            let mut norm_record = None;
            let batch = self.uses_batch_stats(li);
            if let Some(bn) = &layer.bn {
                let (mean, var) = if batch {
                    let m = (n * hw) as f64;
                    let mut mean = vec![0.0f64; cout];
                    let mut var = vec![0.0f64; cout];
                    for s in 0..n {
                        for c in 0..cout {
                            let base = s * per_out + c * hw;
                            mean[c] += z[base..base + hw].iter().map(|v| v.as_f64()).sum::<f64>();
                        }
                    }
                    mean.iter_mut().for_each(|v| *v /= m);
                    for s in 0..n {
                        for c in 0..cout {
                            let base = s * per_out + c * hw;
                            var[c] += z[base..base + hw]
                                .iter()
                                .map(|v| (v.as_f64() - mean[c]).powi(2))
                                .sum::<f64>();
                        }
                    }
                    var.iter_mut().for_each(|v| *v /= m);
                    stats.push(BatchStats {
                        layer: li,
                        mean: mean.clone(),
                        var: var.clone(),
                    });
                    (mean, var)
                } else {
                    (
                        bn.running_mean.iter().map(|v| v.as_f64()).collect(),
                        bn.running_var.iter().map(|v| v.as_f64()).collect(),
                    )
                };
                let inv_std: Vec<T> = var
                    .iter()
                    .map(|&v| T::from_f64(1.0 / (v + bn.eps.as_f64()).sqrt()))
                    .collect();
                let mean_t: Vec<T> = mean.iter().map(|&v| T::from_f64(v)).collect();
                let mut xhat = if keep {
                    vec![T::zero(); z.len()]
                } else {
                    Vec::new()
                };
                for s in 0..n {
                    for c in 0..cout {
                        let base = s * per_out + c * hw;
                        let (mu, is, g, b) = (mean_t[c], inv_std[c], bn.gamma[c], bn.beta[c]);
                        for i in base..base + hw {
                            let xh = (z[i] - mu) * is;
                            if keep {
                                xhat[i] = xh;
                            }
                            z[i] = g * xh + b;
                        }
                    }
                }
                if keep {
                    norm_record = Some((xhat, inv_std));
                }
            }
            if layer.relu {
                z.iter_mut().for_each(|v| {
                    if !(*v > T::zero()) && !v.is_nan() {
                        *v = T::zero()
                    }
                });
            }
            if let Some(bad) = z.iter().position(|v| !v.is_finite()) {
                return Err(Error::NumericFault {
                    layer: li,
                    message: format!("non-finite activation at flat index {bad}"),
                });
            }
            if keep {
                trace.inputs.push(std::mem::replace(&mut act, z));
                trace.normalized.push(norm_record);
                trace.batch_norm_used.push(batch);
            } else {
                act = z;
            }
        }
        Ok(Pass {
            output: act,
            trace,
            stats,
        })
    }

    /// Backpropagate `dout` (gradient w.r.t. the network output) down to
    /// layer `stop`, returning gradients for layers `stop..`.
    pub(crate) fn backward(
        &self,
        pass: &Pass<T>,
        dout: Vec<T>,
        n: usize,
        h: usize,
        w: usize,
        stop: usize,
    ) -> Vec<LayerGrads<T>> {
        let hw = h * w;
        let last = self.layers.len() - 1;
        let mut grads: Vec<LayerGrads<T>> = self.layers[stop..]
            .iter()
            .map(LayerGrads::zeros_like)
            .collect();
        let mut dy = dout;
        for li in (stop..=last).rev() {
            let layer = &self.layers[li];
            let g = &mut grads[li - stop];
            let cin = layer.conv.in_channels;
            let cout = layer.conv.out_channels;
            let per_out = cout * hw;
            let per_in = cin * hw;

            if layer.relu {
                // the next layer's input is this layer's rectified output
                let out = &pass.trace.inputs[li + 1];
                dy.iter_mut().zip(out).for_each(|(d, &a)| {
                    if !(a > T::zero()) {
                        *d = T::zero()
                    }
                });
            }
            if let (Some(bn), Some((xhat, inv_std))) = (&layer.bn, &pass.trace.normalized[li]) {
                let mut sum_dy = vec![0.0f64; cout];
                let mut sum_dy_xhat = vec![0.0f64; cout];
                for s in 0..n {
                    for c in 0..cout {
                        let base = s * per_out + c * hw;
                        for i in base..base + hw {
                            sum_dy[c] += dy[i].as_f64();
                            sum_dy_xhat[c] += dy[i].as_f64() * xhat[i].as_f64();
                        }
                    }
                }
                for c in 0..cout {
                    g.gamma[c] = T::from_f64(sum_dy_xhat[c]);
                    g.beta[c] = T::from_f64(sum_dy[c]);
                }
                let m = (n * hw) as f64;
                let batch = pass.trace.batch_norm_used[li];
                for s in 0..n {
                    for c in 0..cout {
                        let base = s * per_out + c * hw;
                        let scale = bn.gamma[c] * inv_std[c];
                        if batch {
                            let mean_dy = T::from_f64(sum_dy[c] / m);
                            let mean_dyx = T::from_f64(sum_dy_xhat[c] / m);
                            for i in base..base + hw {
                                dy[i] = scale * (dy[i] - mean_dy - xhat[i] * mean_dyx);
                            }
                        } else {
                            for i in base..base + hw {
                                dy[i] = scale * dy[i];
                            }
                        }
                    }
                }
            }

            let want_input = li > stop;
            let input = &pass.trace.inputs[li];
            let per_sample: Vec<(Vec<T>, Vec<T>, Option<Vec<T>>)> = crate::par::map_range(n, |s| {
                let mut dw = vec![T::zero(); layer.conv.weight.len()];
                let mut db = vec![T::zero(); cout];
                let dx = layer.conv.backward(
                    &input[s * per_in..(s + 1) * per_in],
                    &dy[s * per_out..(s + 1) * per_out],
                    h,
                    w,
                    &mut dw,
                    &mut db,
                    want_input,
                );
                (dw, db, dx)
            });
            let mut next = if want_input {
                Vec::with_capacity(n * per_in)
            } else {
                Vec::new()
            };
            for (dw, db, dx) in per_sample {
                g.weight.iter_mut().zip(&dw).for_each(|(a, &b)| *a = *a + b);
                g.bias.iter_mut().zip(&db).for_each(|(a, &b)| *a = *a + b);
                if let Some(dx) = dx {
                    next.extend_from_slice(&dx);
                }
            }
            dy = next;
        }
        grads
    }

    /// Which rectified units are active, layer by layer, for the given batch.
    pub(crate) fn activation_pattern(
        &self,
        input: &[T],
        n: usize,
        h: usize,
        w: usize,
    ) -> Result<Vec<bool>> {
        let pass = self.pass(input, n, h, w, true)?;
        Ok(self
            .layers
            .iter()
            .enumerate()
            .filter(|(_, l)| l.relu)
            .flat_map(|(i, _)| pass.trace.inputs[i + 1].iter().map(|&v| v > T::zero()))
            .collect())
    }

    /// Fold measured batch statistics into the running estimates.
    pub(crate) fn update_running_stats(&mut self, stats: &[BatchStats], count: usize) {
        for st in stats {
            let bn = self.layers[st.layer]
                .bn
                .as_mut()
                .expect("stats only for BN layers");
            let mom = bn.momentum.as_f64();
            let unbias = if count > 1 {
                count as f64 / (count - 1) as f64
            } else {
                1.0
            };
            for c in 0..st.mean.len() {
                let rm = bn.running_mean[c].as_f64();
                let rv = bn.running_var[c].as_f64();
                bn.running_mean[c] = T::from_f64(mom * rm + (1.0 - mom) * st.mean[c]);
                bn.running_var[c] = T::from_f64(mom * rv + (1.0 - mom) * st.var[c] * unbias);
            }
        }
    }

    /// Predict the noise of `n` stacked `h × w` patches.
    pub fn forward_batch(&self, input: &[T], n: usize, h: usize, w: usize) -> Result<Vec<T>> {
        if self.mode == Mode::Train && self.needs_batch() && n < 2 {
            return Err(Error::InvalidConfig(
                "train-mode batch normalization needs at least 2 samples".into(),
            ));
        }
        Ok(self.pass(input, n, h, w, false)?.output)
    }

    /// Predict the noise of a single `h × w` patch with running statistics.
    pub fn predict(&self, input: &[T], h: usize, w: usize) -> Result<Vec<T>> {
        let mut eval = self.mode;
        if eval == Mode::Train {
            eval = Mode::Eval;
        }
        if eval == self.mode {
            self.forward_batch(input, 1, h, w)
        } else {
            let mut net = self.clone();
            net.mode = eval;
            net.forward_batch(input, 1, h, w)
        }
    }

    /// Indices of layers that may be updated.
    pub fn trainable_layers(&self) -> impl Iterator<Item = usize> + '_ {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| l.trainable)
            .map(|(i, _)| i)
    }
}
