//! PSNR, SSIM, error maps, and aggregate evaluation reports.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::image::Image;
use crate::pipeline::{dataset_hash, denoise_with, GatingOverride, ImagePair, SMoEModel};

/// SSIM window side length.
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

pub fn mse(reference: &Image, test: &Image) -> Result<f64> {
    reference.check_same_dims(test)?;
    let sum: f64 = reference
        .data()
        .iter()
        .zip(test.data())
        .map(|(&a, &b)| (a as f64 - b as f64).powi(2))
        .sum();
    Ok(sum / reference.data().len() as f64)
}

/// `10·log10(max² / mse)`; `+∞` when `mse` is zero.
pub fn psnr_from_mse(mse: f64, max_val: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (max_val * max_val / mse).log10()
    }
}

pub fn psnr(reference: &Image, test: &Image, max_val: f64) -> Result<f64> {
    Ok(psnr_from_mse(mse(reference, test)?, max_val))
}

fn gaussian_taps() -> [f64; SSIM_WINDOW] {
    let mut taps = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, t) in taps.iter_mut().enumerate() {
        let d = i as f64 - c;
        *t = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= s);
    taps
}

/// Weighted window sums over all valid positions, separably.
fn filter_valid(data: &[f64], w: usize, h: usize, taps: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let ow = w - SSIM_WINDOW + 1;
    let oh = h - SSIM_WINDOW + 1;
    let mut horiz = vec![0.0; ow * h];
    for y in 0..h {
        let row = &data[y * w..(y + 1) * w];
        for x in 0..ow {
            horiz[y * ow + x] = taps
                .iter()
                .zip(&row[x..x + SSIM_WINDOW])
                .map(|(t, v)| t * v)
                .sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = taps
                .iter()
                .enumerate()
                .map(|(k, t)| t * horiz[(y + k) * ow + x])
                .sum();
        }
    }
    out
}

/// Mean SSIM over every fully contained 11×11 Gaussian window
/// (σ = 1.5, K1 = 0.01, K2 = 0.03, dynamic range 1).
pub fn ssim(reference: &Image, test: &Image) -> Result<f64> {
    reference.check_same_dims(test)?;
    let (w, h) = (reference.width(), reference.height());
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(Error::InvalidConfig(format!(
            "SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {w}x{h}"
        )));
    }
    let taps = gaussian_taps();
    let x: Vec<f64> = reference.data().iter().map(|&v| v as f64).collect();
    let y: Vec<f64> = test.data().iter().map(|&v| v as f64).collect();
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(&y).map(|(a, b)| a * b).collect();
    let [mx, my, exx, eyy, exy] = [&x, &y, &xx, &yy, &xy].map(|d| filter_valid(d, w, h, &taps));
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let mut total = 0.0;
    for i in 0..mx.len() {
        let (ux, uy) = (mx[i], my[i]);
        let vx = exx[i] - ux * ux;
        let vy = eyy[i] - uy * uy;
        let cov = exy[i] - ux * uy;
        let num = (2.0 * ux * uy + c1) * (2.0 * cov + c2);
        let den = (ux * ux + uy * uy + c1) * (vx + vy + c2);
        total += num / den;
    }
    Ok(total / mx.len() as f64)
}

/// Per-pixel `|reference − test|`.
pub fn error_map(reference: &Image, test: &Image) -> Result<Image> {
    reference.check_same_dims(test)?;
    let data = reference
        .data()
        .iter()
        .zip(test.data())
        .map(|(a, b)| (a - b).abs())
        .collect();
    Image::new(reference.width(), reference.height(), data)
}

/// Min-max stretch to `[0, 1]` for 8-bit display. Constant maps become zero.
pub fn normalize_for_display(map: &Image) -> Image {
    let (lo, hi) = map
        .data()
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(l, h), &v| {
            (l.min(v), h.max(v))
        });
    let span = hi - lo;
    let data = map
        .data()
        .iter()
        .map(|&v| if span > 0.0 { (v - lo) / span } else { 0.0 })
        .collect();
    Image::new(map.width(), map.height(), data).expect("same shape")
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageMetrics {
    pub name: String,
    pub psnr: f64,
    pub ssim: f64,
    pub noisy_psnr: f64,
    pub noisy_ssim: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
}

impl Summary {
    /// Population mean and standard deviation.
    pub fn of(values: impl Iterator<Item = f64> + Clone) -> Summary {
        let n = values.clone().count();
        if n == 0 {
            return Summary {
                mean: f64::NAN,
                std: f64::NAN,
            };
        }
        let mean = values.clone().sum::<f64>() / n as f64;
        let std = if mean.is_finite() {
            (values.map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64).sqrt()
        } else {
            0.0
        };
        Summary { mean, std }
    }
}

/// Metrics for a set of denoised images plus the noisy baseline.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub images: Vec<ImageMetrics>,
    /// Routing used to produce the images, e.g. `predicted` or `fixed:2`.
    pub cluster_mode: String,
    pub metadata: Vec<(String, String)>,
}

fn fmt_value(v: f64) -> String {
    if v == f64::INFINITY {
        "inf".into()
    } else if v == f64::NEG_INFINITY {
        "-inf".into()
    } else {
        format!("{v:.6}")
    }
}

impl MetricReport {
    pub fn psnr(&self) -> Summary {
        Summary::of(self.images.iter().map(|m| m.psnr))
    }

    pub fn ssim(&self) -> Summary {
        Summary::of(self.images.iter().map(|m| m.ssim))
    }

    pub fn noisy_psnr(&self) -> Summary {
        Summary::of(self.images.iter().map(|m| m.noisy_psnr))
    }

    pub fn noisy_ssim(&self) -> Summary {
        Summary::of(self.images.iter().map(|m| m.noisy_ssim))
    }

    /// CSV with header `image,psnr_db,ssim,cluster_mode`, one row per image,
    /// then `# key=value` aggregate lines.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("image,psnr_db,ssim,cluster_mode\n");
        for m in &self.images {
            let _ = writeln!(
                out,
                "{},{},{},{}",
                m.name,
                fmt_value(m.psnr),
                fmt_value(m.ssim),
                self.cluster_mode
            );
        }
        let (p, s) = (self.psnr(), self.ssim());
        let (np, ns) = (self.noisy_psnr(), self.noisy_ssim());
        for (k, v) in [
            ("mean_psnr", p.mean),
            ("std_psnr", p.std),
            ("mean_ssim", s.mean),
            ("std_ssim", s.std),
            ("noisy_mean_psnr", np.mean),
            ("noisy_mean_ssim", ns.mean),
            ("delta_psnr", p.mean - np.mean),
            ("delta_ssim", s.mean - ns.mean),
        ] {
            let _ = writeln!(out, "# {k}={}", fmt_value(v));
        }
        for (k, v) in &self.metadata {
            let _ = writeln!(out, "# {k}={v}");
        }
        out
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// Denoise every pair's noisy image and score it, and the noisy input,
/// against the clean image. Rows keep the order of `pairs`.
pub fn evaluate(
    model: &SMoEModel,
    pairs: &[ImagePair],
    over: GatingOverride,
) -> Result<MetricReport> {
    if pairs.is_empty() {
        return Err(Error::NotEnoughSamples { needed: 1, got: 0 });
    }
    let images = crate::par::map(pairs, |p| {
        let (out, _) = denoise_with(model, &p.noisy, over, &p.aux)?;
        Ok(ImageMetrics {
            name: p.name.clone(),
            psnr: psnr(&p.clean, &out, 1.0)?,
            ssim: ssim(&p.clean, &out)?,
            noisy_psnr: psnr(&p.clean, &p.noisy, 1.0)?,
            noisy_ssim: ssim(&p.clean, &p.noisy)?,
        })
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let mut metadata = vec![
        ("images".to_string(), pairs.len().to_string()),
        ("eval_dataset_sha256".to_string(), dataset_hash(pairs)),
    ];
    if let Some(h) = model.meta_value("dataset_sha256") {
        metadata.push(("model_dataset_sha256".into(), h.into()));
    }
    Ok(MetricReport {
        images,
        cluster_mode: over.to_string(),
        metadata,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::{gen_phantom, PhantomSpec};
    use crate::noise::{add_noise, NoiseSpec};

    #[test]
    fn psnr_examples() {
        let x = Image::filled(16, 16, 0.3).unwrap();
        assert_eq!(psnr(&x, &x, 1.0).unwrap(), f64::INFINITY);
        assert!((psnr_from_mse(0.01, 1.0) - 20.0).abs() < 1e-9);
        assert!((psnr_from_mse(1e-4, 1.0) - 40.0).abs() < 1e-9);
        let y = Image::filled(16, 16, 0.4).unwrap();
        let want = 10.0 * (1.0 / (0.4f32 as f64 - 0.3f32 as f64).powi(2)).log10();
        assert!((psnr(&x, &y, 1.0).unwrap() - want).abs() < 1e-9);
        assert!(psnr(&x, &Image::zeros(4, 4).unwrap(), 1.0).is_err());
    }

    #[test]
    fn psnr_falls_as_noise_grows() {
        let img = gen_phantom(&PhantomSpec::shepp_logan(64, 64)).unwrap();
        let vals: Vec<f64> = [0.01, 0.05, 0.1]
            .iter()
            .map(|&s| {
                psnr(
                    &img,
                    &add_noise(&img, &NoiseSpec::gaussian(s, 3)).unwrap(),
                    1.0,
                )
                .unwrap()
            })
            .collect();
        assert!(vals[0] > vals[1] && vals[1] > vals[2], "{vals:?}");
    }

    #[test]
    fn ssim_identity_and_constants() {
        let img = gen_phantom(&PhantomSpec::random(40, 30, 2)).unwrap();
        assert_eq!(ssim(&img, &img).unwrap(), 1.0);
        let a = Image::zeros(20, 20).unwrap();
        let b = Image::filled(20, 20, 1.0).unwrap();
        let c1 = 1e-4;
        let want = c1 / (1.0 + c1);
        assert!((ssim(&a, &b).unwrap() - want).abs() < 1e-7);
        assert!(ssim(
            &Image::zeros(10, 30).unwrap(),
            &Image::zeros(10, 30).unwrap()
        )
        .is_err());
    }

    #[test]
    fn ssim_symmetric_and_bounded() {
        let img = gen_phantom(&PhantomSpec::random(48, 48, 5)).unwrap();
        let noisy = add_noise(&img, &NoiseSpec::rician(0.1, 1)).unwrap();
        let inverted = Image::new(48, 48, img.data().iter().map(|v| 1.0 - v).collect()).unwrap();
        for other in [&noisy, &inverted] {
            let ab = ssim(&img, other).unwrap();
            let ba = ssim(other, &img).unwrap();
            assert!((ab - ba).abs() < 1e-7);
            assert!((-1.0..=1.0).contains(&ab));
        }
        assert!(ssim(&img, &noisy).unwrap() < 1.0);
    }

    /// Direct 2-D windowed SSIM at a single position.
    #[test]
    fn ssim_matches_direct_window_sum() {
        let a = gen_phantom(&PhantomSpec::random(11, 11, 7)).unwrap();
        let b = add_noise(&a, &NoiseSpec::gaussian(0.05, 2)).unwrap();
        let g: Vec<f64> = (0..11)
            .map(|i| (-((i as f64 - 5.0).powi(2)) / 4.5).exp())
            .collect();
        let s: f64 = g.iter().sum::<f64>().powi(2);
        let (mut mx, mut my, mut xx, mut yy, mut xy) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for y in 0..11 {
            for x in 0..11 {
                let w = g[x] * g[y] / s;
                let (p, q) = (a.get(x, y) as f64, b.get(x, y) as f64);
                mx += w * p;
                my += w * q;
                xx += w * p * p;
                yy += w * q * q;
                xy += w * p * q;
            }
        }
        let (c1, c2) = (1e-4, 9e-4);
        let want = (2.0 * mx * my + c1) * (2.0 * (xy - mx * my) + c2)
            / ((mx * mx + my * my + c1) * (xx - mx * mx + yy - my * my + c2));
        assert!((ssim(&a, &b).unwrap() - want).abs() < 1e-10);
    }

    #[test]
    fn error_map_examples() {
        let a = gen_phantom(&PhantomSpec::shepp_logan(32, 32)).unwrap();
        assert!(error_map(&a, &a).unwrap().data().iter().all(|&v| v == 0.0));
        let shifted = Image::new(32, 32, a.data().iter().map(|v| v + 0.1).collect()).unwrap();
        let m = error_map(&a, &shifted).unwrap();
        assert!(m.data().iter().all(|&v| (v - 0.1).abs() < 1e-6));
        assert_eq!(m, error_map(&shifted, &a).unwrap());
        let max = m.data().iter().cloned().fold(0.0f32, f32::max);
        let dev = a
            .data()
            .iter()
            .zip(shifted.data())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0f32, f32::max);
        assert_eq!(max, dev);
    }

    #[test]
    fn csv_layout() {
        let report = MetricReport {
            images: vec![
                ImageMetrics {
                    name: "a".into(),
                    psnr: 30.0,
                    ssim: 0.9,
                    noisy_psnr: 25.0,
                    noisy_ssim: 0.7,
                },
                ImageMetrics {
                    name: "b".into(),
                    psnr: f64::INFINITY,
                    ssim: 1.0,
                    noisy_psnr: 26.0,
                    noisy_ssim: 0.8,
                },
            ],
            cluster_mode: "predicted".into(),
            metadata: vec![("model".into(), "m1".into())],
        };
        let csv = report.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "image,psnr_db,ssim,cluster_mode");
        assert_eq!(lines[1], "a,30.000000,0.900000,predicted");
        assert_eq!(lines[2], "b,inf,1.000000,predicted");
        assert!(lines[3].starts_with("# mean_psnr=inf"));
        assert!(csv.contains("# mean_ssim=0.950000"));
        assert!(csv.contains("# noisy_mean_psnr=25.500000"));
        assert!(csv.contains("# model=m1"));
    }

    #[test]
    fn evaluate_means_and_clean_inputs() {
        use crate::pipeline::tests::{pairs, tiny_settings};
        use crate::pipeline::train_smoe;
        let data = pairs(3, 32);
        let mut model = train_smoe(&data, &tiny_settings(2)).unwrap();
        let report = evaluate(&model, &data, GatingOverride::Predicted).unwrap();
        assert_eq!(report.images.len(), 3);
        let mean = report.images.iter().map(|m| m.psnr).sum::<f64>() / 3.0;
        assert!((report.psnr().mean - mean).abs() < 1e-12);
        let fixed = evaluate(&model, &data, GatingOverride::Fixed(1)).unwrap();
        assert_eq!(fixed.cluster_mode, "fixed:1");
        assert_eq!(fixed.noisy_psnr(), report.noisy_psnr());

        for e in &mut model.experts {
            let last = e.layers.last_mut().unwrap();
            last.conv.weight.iter_mut().for_each(|w| *w = 0.0);
            last.conv.bias.iter_mut().for_each(|w| *w = 0.0);
        }
        let clean: Vec<ImagePair> = data
            .iter()
            .map(|p| ImagePair::new(p.name.clone(), p.clean.clone(), p.clean.clone()))
            .collect();
        let r = evaluate(&model, &clean, GatingOverride::Predicted).unwrap();
        assert_eq!(r.ssim().mean, 1.0);
        assert_eq!(r.psnr().mean, f64::INFINITY);
        assert!(evaluate(&model, &[], GatingOverride::Predicted).is_err());
    }
}
