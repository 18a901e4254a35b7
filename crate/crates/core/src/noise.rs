//! Seeded Rician and Gaussian noise synthesis.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::image::Image;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NoiseModel {
    /// Magnitude of a complex signal with i.i.d. Gaussian noise on both channels.
    Rician,
    Gaussian,
}

impl std::str::FromStr for NoiseModel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "rician" => Ok(NoiseModel::Rician),
            "gaussian" => Ok(NoiseModel::Gaussian),
            other => Err(Error::InvalidConfig(format!(
                "unknown noise model `{other}`"
            ))),
        }
    }
}

impl std::fmt::Display for NoiseModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            NoiseModel::Rician => "rician",
            NoiseModel::Gaussian => "gaussian",
        })
    }
}

/// Noise parameters. `sigma` is a fraction of the unit intensity range, so
/// "5% noise" is `sigma = 0.05`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseSpec {
    pub model: NoiseModel,
    pub sigma: f32,
    pub seed: u64,
}

impl NoiseSpec {
    pub fn rician(sigma: f32, seed: u64) -> Self {
        Self {
            model: NoiseModel::Rician,
            sigma,
            seed,
        }
    }

    pub fn gaussian(sigma: f32, seed: u64) -> Self {
        Self {
            model: NoiseModel::Gaussian,
            sigma,
            seed,
        }
    }
}

/// Corrupt `img` with noise. The output is not clamped.
///
/// Row `r` draws its normals from ChaCha stream `r` of the seeded generator,
/// pixel by pixel left to right, so the result depends only on the seed and
/// the image geometry, never on scheduling.
pub fn add_noise(img: &Image, spec: &NoiseSpec) -> Result<Image> {
    if !(spec.sigma >= 0.0) || !spec.sigma.is_finite() {
        return Err(Error::InvalidConfig(format!(
            "noise sigma must be finite and non-negative, got {}",
            spec.sigma
        )));
    }
    let w = img.width();
    let sigma = spec.sigma as f64;
    let mut out = img.data().to_vec();
    crate::par::for_each_chunk_mut(&mut out, w, |row, px| {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(row as u64);
        for v in px.iter_mut() {
            let x = *v as f64;
            *v = match spec.model {
                NoiseModel::Gaussian => {
                    let g: f64 = rng.sample(StandardNormal);
                    (x + sigma * g) as f32
                }
                NoiseModel::Rician => {
                    let g1: f64 = rng.sample(StandardNormal);
                    let g2: f64 = rng.sample(StandardNormal);
                    (x + sigma * g1).hypot(sigma * g2) as f32
                }
            };
        }
    });
    Image::new(w, img.height(), out)
}

/// `noisy - clean`, the residual an expert is trained to predict.
pub fn residual(noisy: &Image, clean: &Image) -> Result<Image> {
    noisy.check_same_dims(clean)?;
    let data = noisy
        .data()
        .iter()
        .zip(clean.data())
        .map(|(y, x)| y - x)
        .collect();
    Image::new(noisy.width(), noisy.height(), data)
}
