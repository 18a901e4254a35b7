//! Masked-MSE residual training with Adam, and last-layer fine-tuning.

use log::{debug, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::conv::Real;
use super::net::{ExpertNet, LayerGrads, Mode, Pass};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            batch_size: 16,
            epochs: 8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || self.batch_size == 0 {
            return Err(Error::InvalidConfig(format!(
                "need lr > 0 and batch >= 1, got lr {} batch {}",
                self.learning_rate, self.batch_size
            )));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::InvalidConfig("Adam betas must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// One training example: a noisy patch, its true noise, and the pixels that
/// count towards the loss.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSample {
    pub width: usize,
    pub height: usize,
    pub input: Vec<f32>,
    pub target: Vec<f32>,
    pub support: Vec<bool>,
}

impl TrainSample {
    pub fn dense(width: usize, height: usize, input: Vec<f32>, target: Vec<f32>) -> Self {
        let n = width * height;
        Self {
            width,
            height,
            input,
            target,
            support: vec![true; n],
        }
    }
}

/// Adam moments for every parameter of a network.
#[derive(Debug, Clone)]
pub struct Adam {
    step: u64,
    first: Vec<LayerGrads<f32>>,
    second: Vec<LayerGrads<f32>>,
}

impl Adam {
    pub fn new(net: &ExpertNet<f32>) -> Self {
        let make = || {
            net.layers
                .iter()
                .map(|l| LayerGrads {
                    weight: vec![0.0; l.conv.weight.len()],
                    bias: vec![0.0; l.conv.bias.len()],
                    gamma: vec![0.0; l.bn.as_ref().map_or(0, |b| b.gamma.len())],
                    beta: vec![0.0; l.bn.as_ref().map_or(0, |b| b.beta.len())],
                })
                .collect::<Vec<_>>()
        };
        Self {
            step: 0,
            first: make(),
            second: make(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    fn apply(
        &mut self,
        net: &mut ExpertNet<f32>,
        grads: &[LayerGrads<f32>],
        stop: usize,
        cfg: &TrainConfig,
    ) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        for (gi, g) in grads.iter().enumerate() {
            let li = stop + gi;
            let layer = &mut net.layers[li];
            if !layer.trainable {
                continue;
            }
            let m = &mut self.first[li];
            let v = &mut self.second[li];
            let update = |p: &mut [f32], g: &[f32], m: &mut [f32], v: &mut [f32]| {
                for i in 0..p.len() {
                    let gi = g[i] as f64;
                    let mi = cfg.beta1 * m[i] as f64 + (1.0 - cfg.beta1) * gi;
                    let vi = cfg.beta2 * v[i] as f64 + (1.0 - cfg.beta2) * gi * gi;
                    m[i] = mi as f32;
                    v[i] = vi as f32;
                    let step = cfg.learning_rate * (mi / bc1) / ((vi / bc2).sqrt() + cfg.epsilon);
                    p[i] = (p[i] as f64 - step) as f32;
                }
            };
            update(
                &mut layer.conv.weight,
                &g.weight,
                &mut m.weight,
                &mut v.weight,
            );
            update(&mut layer.conv.bias, &g.bias, &mut m.bias, &mut v.bias);
            if let Some(bn) = layer.bn.as_mut() {
                update(&mut bn.gamma, &g.gamma, &mut m.gamma, &mut v.gamma);
                update(&mut bn.beta, &g.beta, &mut m.beta, &mut v.beta);
            }
        }
    }
}

/// Stack a batch into flat input/target/weight buffers.
fn stack<T: Real>(batch: &[&TrainSample]) -> Result<(usize, usize, Vec<T>, Vec<T>, Vec<T>)> {
    let first = batch
        .first()
        .ok_or_else(|| Error::InvalidConfig("empty batch".into()))?;
    let (w, h) = (first.width, first.height);
    let hw = w * h;
    let mut input = Vec::with_capacity(batch.len() * hw);
    let mut target = Vec::with_capacity(batch.len() * hw);
    let mut weight = Vec::with_capacity(batch.len() * hw);
    for s in batch {
        if s.width != w
            || s.height != h
            || s.input.len() != hw
            || s.target.len() != hw
            || s.support.len() != hw
        {
            return Err(Error::dims(
                format!("{w}x{h} samples"),
                format!("{}x{}", s.width, s.height),
            ));
        }
        input.extend(s.input.iter().map(|&v| T::from_f64(v as f64)));
        target.extend(s.target.iter().map(|&v| T::from_f64(v as f64)));
        weight.extend(
            s.support
                .iter()
                .map(|&b| if b { T::one() } else { T::zero() }),
        );
    }
    Ok((w, h, input, target, weight))
}

/// `scale · Σ support·(pred − target)² / Σ support` and its gradient w.r.t. `pred`.
pub(crate) fn masked_mse<T: Real>(
    pred: &[T],
    target: &[T],
    weight: &[T],
    scale: f64,
) -> (f64, Vec<T>) {
    let count: f64 = weight.iter().map(|w| w.as_f64()).sum();
    if count == 0.0 {
        return (0.0, vec![T::zero(); pred.len()]);
    }
    let mut loss = 0.0f64;
    let mut grad = Vec::with_capacity(pred.len());
    for ((&p, &t), &wt) in pred.iter().zip(target).zip(weight) {
        let d = (p - t).as_f64() * wt.as_f64();
        loss += d * d;
        grad.push(T::from_f64(2.0 * scale * d / count));
    }
    (scale * loss / count, grad)
}

/// Loss and parameter gradients of `scale × masked MSE` without touching the net.
/// Gradients are returned for layers `stop..`, where `stop` is the first
/// trainable layer.
pub fn loss_and_gradients<T: Real>(
    net: &ExpertNet<T>,
    batch: &[&TrainSample],
    scale: f64,
) -> Result<(f64, usize, Vec<LayerGrads<T>>)> {
    let (w, h, input, target, weight) = stack::<T>(batch)?;
    let n = batch.len();
    let pass: Pass<T> = net.pass(&input, n, h, w, true)?;
    let (loss, dout) = masked_mse(&pass.output, &target, &weight, scale);
    let stop = net
        .trainable_layers()
        .next()
        .unwrap_or(net.layers.len() - 1);
    let grads = net.backward(&pass, dout, n, h, w, stop);
    Ok((loss, stop, grads))
}

/// One optimizer step. Returns the loss before the update.
///
/// Frozen layers keep their parameters and running statistics; trainable
/// BN layers normalize with batch statistics and update their running
/// estimates.
pub fn train_step(
    net: &mut ExpertNet<f32>,
    adam: &mut Adam,
    batch: &[&TrainSample],
    cfg: &TrainConfig,
) -> Result<f64> {
    if net.mode != Mode::Train {
        return Err(Error::InvalidConfig(
            "train_step requires Train mode".into(),
        ));
    }
    if net.needs_batch() && batch.len() < 2 {
        return Err(Error::InvalidConfig(
            "batch normalization with batch statistics needs at least 2 samples".into(),
        ));
    }
    let (w, h, input, target, weight) = stack::<f32>(batch)?;
    let n = batch.len();
    let pass = net.pass(&input, n, h, w, true)?;
    let (loss, dout) = masked_mse(&pass.output, &target, &weight, 1.0);
    if !loss.is_finite() {
        return Err(Error::NumericFault {
            layer: net.layers.len() - 1,
            message: format!("loss is {loss}"),
        });
    }
    let stop = match net.trainable_layers().next() {
        Some(s) => s,
        None => return Ok(loss),
    };
    let grads = net.backward(&pass, dout, n, h, w, stop);
    net.update_running_stats(&pass.stats, n * h * w);
    adam.apply(net, &grads, stop, cfg);
    Ok(loss)
}

/// Minibatch training for `cfg.epochs` epochs over `samples`, shuffled by
/// `cfg.seed`. Returns the mean loss of each epoch.
pub fn train_epochs(
    net: &mut ExpertNet<f32>,
    samples: &[TrainSample],
    cfg: &TrainConfig,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    let usable: Vec<&TrainSample> = samples
        .iter()
        .filter(|s| s.support.iter().any(|&b| b))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(net);
    let prev_mode = net.mode;
    net.set_mode(Mode::Train);
    let min_batch = if net.needs_batch() { 2 } else { 1 };
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..usable.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            if chunk.len() < min_batch {
                continue;
            }
            let batch: Vec<&TrainSample> = chunk.iter().map(|&i| usable[i]).collect();
            total += train_step(net, &mut adam, &batch, cfg)?;
            batches += 1;
        }
        let mean = if batches > 0 {
            total / batches as f64
        } else {
            0.0
        };
        debug!("epoch {epoch}: mean loss {mean:.6e} over {batches} batches");
        history.push(mean);
    }
    net.set_mode(prev_mode);
    Ok(history)
}

/// Outcome of fine-tuning one expert.
#[derive(Debug, Clone)]
pub struct FineTuned {
    pub net: ExpertNet<f32>,
    /// Set when there was nothing to train on and the base net was returned.
    pub empty_cluster: bool,
    pub loss_history: Vec<f64>,
}

/// Copy `base`, freeze everything but the final convolution, and train the
/// copy on `samples`. The copy is returned in Eval mode.
pub fn fine_tune(
    base: &ExpertNet<f32>,
    samples: &[TrainSample],
    cfg: &TrainConfig,
) -> Result<FineTuned> {
    let mut net = base.clone();
    net.freeze_all_but_last();
    net.set_mode(Mode::Eval);
    if !samples.iter().any(|s| s.support.iter().any(|&b| b)) {
        warn!("fine-tuning set is empty; keeping the base network");
        return Ok(FineTuned {
            net,
            empty_cluster: true,
            loss_history: Vec::new(),
        });
    }
    let loss_history = train_epochs(&mut net, samples, cfg)?;
    net.set_mode(Mode::Eval);
    Ok(FineTuned {
        net,
        empty_cluster: false,
        loss_history,
    })
}
