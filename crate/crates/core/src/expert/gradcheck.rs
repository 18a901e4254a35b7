//! Finite-difference verification of the backward pass.

use super::net::{ExpertNet, Mode};
use super::train::{loss_and_gradients, TrainSample};
use crate::error::Result;

/// Relative perturbation: each parameter moves by `STEP * (|θ| + 1)`.
pub const STEP: f64 = 1e-3;
/// A step whose `±h` probes flip any ReLU is divided by 10, at most this often.
pub const MAX_REFINEMENTS: usize = 6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// `max |g_analytic − g_fd| / (|g_fd| + 1e−8)` over all parameters.
    pub max_relative_error: f64,
    /// `(layer, parameter name, index)` of the worst parameter.
    pub worst: (usize, &'static str, usize),
    pub parameters: usize,
    /// Number of times a step was shrunk because it crossed a ReLU kink.
    pub refined: usize,
}

/// Compare analytic gradients of the MSE loss with central differences.
///
/// The network is widened to `f64` and evaluated with running batch-norm
/// statistics so the loss is a deterministic function of the parameters.
/// The loss is piecewise quadratic in any single parameter, so a central
/// difference is exact unless the probe straddles a ReLU kink; such steps
/// are shrunk until the activation pattern at `θ ± h` matches the one at `θ`.
/// Intended for tiny networks: every parameter costs two forward passes.
pub fn gradient_check(
    net: &ExpertNet<f32>,
    input: &[f32],
    target: &[f32],
    height: usize,
    width: usize,
) -> Result<GradCheckReport> {
    let mut wide = net.to_f64();
    wide.set_mode(Mode::Eval);
    for l in wide.layers.iter_mut() {
        l.trainable = true;
    }
    let sample = TrainSample::dense(width, height, input.to_vec(), target.to_vec());
    let batch = [&sample];
    let (_, stop, grads) = loss_and_gradients(&wide, &batch, 1.0)?;
    debug_assert_eq!(stop, 0);

    let loss_at =
        |net: &ExpertNet<f64>| -> Result<f64> { Ok(loss_and_gradients(net, &batch, 1.0)?.0) };

    let wide_input: Vec<f64> = input.iter().map(|&v| v as f64).collect();
    let base_pattern = wide.activation_pattern(&wide_input, 1, height, width)?;
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst: (0, "weight", 0),
        parameters: 0,
        refined: 0,
    };
    for (li, layer_grads) in grads.iter().enumerate() {
        for (name, analytic) in [
            ("weight", &layer_grads.weight),
            ("bias", &layer_grads.bias),
            ("gamma", &layer_grads.gamma),
            ("beta", &layer_grads.beta),
        ] {
            for (i, &g) in analytic.iter().enumerate() {
                let theta = *slot(&mut wide, li, name, i);
                let mut h = STEP * (theta.abs() + 1.0);
                for _ in 0..MAX_REFINEMENTS {
                    let mut crossed = false;
                    for offset in [h, -h] {
                        *slot(&mut wide, li, name, i) = theta + offset;
                        crossed |=
                            wide.activation_pattern(&wide_input, 1, height, width)? != base_pattern;
                    }
                    if !crossed {
                        break;
                    }
                    h *= 0.1;
                    report.refined += 1;
                }
                *slot(&mut wide, li, name, i) = theta + h;
                let plus = loss_at(&wide)?;
                *slot(&mut wide, li, name, i) = theta - h;
                let minus = loss_at(&wide)?;
                *slot(&mut wide, li, name, i) = theta;
                let fd = (plus - minus) / (2.0 * h);
                let rel = (g - fd).abs() / (fd.abs() + 1e-8);
                report.parameters += 1;
                if rel > report.max_relative_error {
                    report.max_relative_error = rel;
                    report.worst = (li, name, i);
                }
            }
        }
    }
    Ok(report)
}

fn slot<'a>(net: &'a mut ExpertNet<f64>, layer: usize, name: &str, i: usize) -> &'a mut f64 {
    let l = &mut net.layers[layer];
    match name {
        "weight" => &mut l.conv.weight[i],
        "bias" => &mut l.conv.bias[i],
        "gamma" => &mut l.bn.as_mut().expect("BN layer").gamma[i],
        _ => &mut l.bn.as_mut().expect("BN layer").beta[i],
    }
}

/// A randomly initialized network with non-trivial biases and batch-norm
/// state, for exercising [`gradient_check`].
pub fn random_tiny_net(config: super::net::NetConfig, seed: u64) -> Result<ExpertNet<f32>> {
    use rand::{Rng, SeedableRng};
    let mut net = ExpertNet::build(config, seed)?;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    for l in net.layers.iter_mut() {
        l.conv
            .bias
            .iter_mut()
            .for_each(|b| *b = rng.random_range(-0.1..0.1));
        if let Some(bn) = l.bn.as_mut() {
            bn.gamma
                .iter_mut()
                .for_each(|g| *g = rng.random_range(0.5..1.5));
            bn.beta
                .iter_mut()
                .for_each(|b| *b = rng.random_range(-0.2..0.2));
            bn.running_mean
                .iter_mut()
                .for_each(|m| *m = rng.random_range(-0.2..0.2));
            bn.running_var
                .iter_mut()
                .for_each(|v| *v = rng.random_range(0.5..2.0));
        }
    }
    Ok(net)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expert::net::NetConfig;
    use rand::{Rng, SeedableRng};

    fn tiny() -> NetConfig {
        NetConfig {
            channels: 8,
            middle_layers: 1,
            kernel: 3,
        }
    }

    fn random_io(seed: u64) -> (Vec<f32>, Vec<f32>) {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let input = (0..64).map(|_| rng.random_range(0.0..1.0)).collect();
        let target = (0..64).map(|_| rng.random_range(-0.1..0.1)).collect();
        (input, target)
    }

    #[test]
    fn zero_network_has_zero_error() {
        let mut net = ExpertNet::build(tiny(), 0).unwrap();
        for l in net.layers.iter_mut() {
            l.conv.weight.fill(0.0);
            l.conv.bias.fill(0.0);
        }
        let r = gradient_check(&net, &[0.0; 64], &[0.0; 64], 8, 8).unwrap();
        assert_eq!(r.max_relative_error, 0.0);
    }

    #[test]
    fn random_tiny_nets_pass() {
        for seed in 0..10 {
            let net = random_tiny_net(tiny(), seed).unwrap();
            let (x, t) = random_io(seed + 100);
            let r = gradient_check(&net, &x, &t, 8, 8).unwrap();
            assert!(r.max_relative_error < 1e-4, "seed {seed}: {r:?}");
        }
    }

    #[test]
    fn doubling_the_loss_doubles_gradients() {
        let net = random_tiny_net(tiny(), 3).unwrap().to_f64();
        let (x, t) = random_io(4);
        let s = TrainSample::dense(8, 8, x, t);
        let (_, _, g1) = loss_and_gradients(&net, &[&s], 1.0).unwrap();
        let (_, _, g2) = loss_and_gradients(&net, &[&s], 2.0).unwrap();
        for (a, b) in g1.iter().zip(&g2) {
            for (u, v) in a
                .weight
                .iter()
                .zip(&b.weight)
                .chain(a.gamma.iter().zip(&b.gamma))
            {
                assert!((2.0 * u - v).abs() <= 1e-12 * (1.0 + v.abs()));
            }
        }
    }
}
