//! Overlapping patch decomposition, mask/inverse-mask splitting, and
//! support-weighted merging.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::image::{load_image, Image};

/// A located sub-image. Pixels outside `support` are stored as zero.
#[derive(Debug, Clone, PartialEq)]
pub struct Region {
    /// `(x, y)` offset of the top-left corner in the parent image.
    pub origin: (usize, usize),
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
    pub support: Vec<bool>,
    /// Index of the patch this region was cut from.
    pub patch_index: usize,
    pub cluster: Option<usize>,
}

impl Region {
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn support_count(&self) -> usize {
        self.support.iter().filter(|&&s| s).count()
    }

    /// Same geometry and support with new pixel values; off-support pixels are zeroed.
    pub fn with_data(&self, data: Vec<f32>) -> Result<Region> {
        if data.len() != self.data.len() {
            return Err(Error::dims(self.data.len(), data.len()));
        }
        let data = data
            .into_iter()
            .zip(&self.support)
            .map(|(v, &s)| if s { v } else { 0.0 })
            .collect();
        Ok(Region {
            data,
            cluster: self.cluster,
            support: self.support.clone(),
            ..*self
        })
    }

    /// Pixels of `img` under this region's footprint and support.
    pub fn crop_from(&self, img: &Image) -> Vec<f32> {
        let (ox, oy) = self.origin;
        let mut out = Vec::with_capacity(self.len());
        for y in 0..self.height {
            for x in 0..self.width {
                let s = self.support[y * self.width + x];
                out.push(if s { img.get(ox + x, oy + y) } else { 0.0 });
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecompMode {
    Patch,
    Segment,
}

impl std::str::FromStr for DecompMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "patch" => Ok(DecompMode::Patch),
            "segment" => Ok(DecompMode::Segment),
            other => Err(Error::InvalidConfig(format!(
                "unknown decomposition mode `{other}`"
            ))),
        }
    }
}

impl std::fmt::Display for DecompMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            DecompMode::Patch => "patch",
            DecompMode::Segment => "segment",
        })
    }
}

/// Where segment-mode masks come from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum MaskSource {
    /// Otsu threshold of each patch.
    Threshold,
    /// Externally produced masks: `<dir>/mask_{patch}_{mask}.pgm`, nonzero = inside.
    Files(PathBuf),
}

impl MaskSource {
    fn mask_for(&self, patch_index: usize, region: &Region) -> Result<Vec<bool>> {
        match self {
            MaskSource::Threshold => Ok(threshold_mask(&region.data)),
            MaskSource::Files(dir) => {
                let path = mask_file_path(dir, patch_index, 0);
                let img = load_image(&path)?;
                if img.width() != region.width || img.height() != region.height {
                    return Err(Error::dims(
                        format!("{}x{} mask", region.width, region.height),
                        format!("{}x{} in {}", img.width(), img.height(), path.display()),
                    ));
                }
                Ok(img.data().iter().map(|&v| v > 0.0).collect())
            }
        }
    }
}

pub fn mask_file_path(dir: &Path, patch_index: usize, mask_index: usize) -> PathBuf {
    dir.join(format!("mask_{patch_index}_{mask_index}.pgm"))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DecompConfig {
    pub patch: usize,
    pub stride: usize,
    pub mode: DecompMode,
    pub mask_source: MaskSource,
}

impl Default for DecompConfig {
    fn default() -> Self {
        Self {
            patch: 48,
            stride: 20,
            mode: DecompMode::Patch,
            mask_source: MaskSource::Threshold,
        }
    }
}

impl DecompConfig {
    pub fn validate_for(&self, width: usize, height: usize) -> Result<()> {
        if self.stride == 0 || self.stride > self.patch {
            return Err(Error::InvalidConfig(format!(
                "stride must satisfy 1 <= stride <= patch, got stride {} patch {}",
                self.stride, self.patch
            )));
        }
        if self.patch > width.min(height) {
            return Err(Error::InvalidConfig(format!(
                "patch {} larger than image {width}x{height}",
                self.patch
            )));
        }
        Ok(())
    }
}

/// Patch offsets along one axis: multiples of `stride` up to `extent - patch`,
/// plus a final patch flush with the far edge.
pub fn patch_positions(extent: usize, patch: usize, stride: usize) -> Result<Vec<usize>> {
    if patch == 0 || stride == 0 {
        return Err(Error::InvalidConfig(
            "patch and stride must be positive".into(),
        ));
    }
    if patch > extent {
        return Err(Error::InvalidConfig(format!(
            "patch {patch} larger than extent {extent}"
        )));
    }
    let last = extent - patch;
    let mut out: Vec<usize> = (0..=last).step_by(stride).collect();
    if *out.last().unwrap() != last {
        out.push(last);
    }
    Ok(out)
}

/// Tile `img` into `patch × patch` regions, row-major by `(y, x)` origin.
pub fn decompose_patches(img: &Image, cfg: &DecompConfig) -> Result<Vec<Region>> {
    cfg.validate_for(img.width(), img.height())?;
    let xs = patch_positions(img.width(), cfg.patch, cfg.stride)?;
    let ys = patch_positions(img.height(), cfg.patch, cfg.stride)?;
    let p = cfg.patch;
    let mut out = Vec::with_capacity(xs.len() * ys.len());
    for &oy in &ys {
        for &ox in &xs {
            let mut data = Vec::with_capacity(p * p);
            for y in oy..oy + p {
                let row = y * img.width();
                data.extend_from_slice(&img.data()[row + ox..row + ox + p]);
            }
            out.push(Region {
                origin: (ox, oy),
                width: p,
                height: p,
                data,
                support: vec![true; p * p],
                patch_index: out.len(),
                cluster: None,
            });
        }
    }
    Ok(out)
}

/// Decompose according to `cfg.mode`. Segment mode yields, for each patch in
/// order, the masked region followed by its inverse.
pub fn decompose(img: &Image, cfg: &DecompConfig) -> Result<Vec<Region>> {
    let patches = decompose_patches(img, cfg)?;
    match cfg.mode {
        DecompMode::Patch => Ok(patches),
        DecompMode::Segment => {
            let masks = crate::par::map(&patches, |r| cfg.mask_source.mask_for(r.patch_index, r));
            let mut out = Vec::with_capacity(2 * patches.len());
            for (region, mask) in patches.iter().zip(masks) {
                let (inside, outside) = split_by_mask(region, &mask?)?;
                out.push(inside);
                out.push(outside);
            }
            Ok(out)
        }
    }
}

/// Otsu's threshold over a 256-bin histogram spanning the data's own range.
/// Pixels in bins at or above the threshold are selected. Constant input
/// selects everything.
pub fn threshold_mask(data: &[f32]) -> Vec<bool> {
    let (lo, hi) = data
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    if data.is_empty() || !(hi > lo) {
        return vec![true; data.len()];
    }
    let bins = histogram_bins(data, lo, hi);
    let threshold = otsu_threshold(&bins);
    bins.iter().map(|&b| b >= threshold).collect()
}

pub(crate) fn histogram_bins(data: &[f32], lo: f32, hi: f32) -> Vec<usize> {
    let span = (hi - lo) as f64;
    data.iter()
        .map(|&v| (((v - lo) as f64 / span * 256.0).floor() as usize).min(255))
        .collect()
}

/// Bin index `t` in `1..256` maximizing the between-class variance of
/// `{b < t}` vs `{b >= t}`; the lowest such `t` wins ties.
fn otsu_threshold(bins: &[usize]) -> usize {
    let mut hist = [0u64; 256];
    for &b in bins {
        hist[b] += 1;
    }
    let total = bins.len() as f64;
    let sum_all: f64 = hist
        .iter()
        .enumerate()
        .map(|(i, &c)| i as f64 * c as f64)
        .sum();
    let (mut w0, mut sum0) = (0.0f64, 0.0f64);
    let (mut best_t, mut best) = (1usize, f64::NEG_INFINITY);
    for t in 1..256 {
        w0 += hist[t - 1] as f64;
        sum0 += (t - 1) as f64 * hist[t - 1] as f64;
        let w1 = total - w0;
        if w0 == 0.0 || w1 == 0.0 {
            continue;
        }
        let m0 = sum0 / w0;
        let m1 = (sum_all - sum0) / w1;
        let between = w0 * w1 * (m0 - m1) * (m0 - m1);
        if between > best {
            best = between;
            best_t = t;
        }
    }
    best_t
}

/// Split a region into the part under `mask` and its complement, both zero-filled.
pub fn split_by_mask(region: &Region, mask: &[bool]) -> Result<(Region, Region)> {
    if mask.len() != region.len() {
        return Err(Error::dims(region.len(), mask.len()));
    }
    let part = |keep: bool| {
        let support: Vec<bool> = region
            .support
            .iter()
            .zip(mask)
            .map(|(&s, &m)| s && (m == keep))
            .collect();
        let data = region
            .data
            .iter()
            .zip(&support)
            .map(|(&v, &s)| if s { v } else { 0.0 })
            .collect();
        Region {
            data,
            support,
            cluster: None,
            ..*region
        }
    };
    Ok((part(true), part(false)))
}

/// Support-weighted average of overlapping regions. Pixels no region
/// supports are copied from `fallback`.
///
/// Each output row is reduced over the regions in list order with `f64`
/// accumulators, so the result is independent of thread count.
pub fn merge(regions: &[Region], width: usize, height: usize, fallback: &Image) -> Result<Image> {
    if fallback.width() != width || fallback.height() != height {
        return Err(Error::dims(
            format!("{width}x{height} fallback"),
            format!("{}x{}", fallback.width(), fallback.height()),
        ));
    }
    for r in regions {
        if r.origin.0 + r.width > width || r.origin.1 + r.height > height {
            return Err(Error::InvalidConfig(format!(
                "region at {:?} of size {}x{} exceeds {width}x{height}",
                r.origin, r.width, r.height
            )));
        }
        if r.data.len() != r.width * r.height || r.support.len() != r.data.len() {
            return Err(Error::dims(r.width * r.height, r.data.len()));
        }
    }
    let mut out = fallback.data().to_vec();
    crate::par::for_each_chunk_mut(&mut out, width, |y, row| {
        let mut sum = vec![0.0f64; width];
        let mut count = vec![0u32; width];
        for r in regions {
            let (ox, oy) = r.origin;
            if y < oy || y >= oy + r.height {
                continue;
            }
            let base = (y - oy) * r.width;
            for x in 0..r.width {
                if r.support[base + x] {
                    sum[ox + x] += r.data[base + x] as f64;
                    count[ox + x] += 1;
                }
            }
        }
        for x in 0..width {
            if count[x] > 0 {
                row[x] = (sum[x] / count[x] as f64) as f32;
            }
        }
    });
    Image::new(width, height, out)
}
