//! Grayscale images, file I/O and synthetic phantoms.
//!
//! Two on-disk formats are supported:
//!
//! * `IMGF32`: the magic `SMIF`, `u32` LE width, `u32` LE height, then
//!   `width * height` `f32` LE samples, row-major from the top-left corner.
//! * binary PGM (`P5`) with maxval 255 or 65535 (16-bit samples big-endian).

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const IMGF32_MAGIC: &[u8; 4] = b"SMIF";

/// Row-major single-precision grayscale image.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidConfig(format!(
                "image dimensions must be positive, got {width}x{height}"
            )));
        }
        let len = width
            .checked_mul(height)
            .ok_or_else(|| Error::InvalidConfig(format!("image {width}x{height} overflows")))?;
        if data.len() != len {
            return Err(Error::dims(len, data.len()));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, value: f32) -> Result<Self> {
        let len = width.checked_mul(height).unwrap_or(0);
        Self::new(width, height, vec![value; len])
    }

    pub fn zeros(width: usize, height: usize) -> Result<Self> {
        Self::filled(width, height, 0.0)
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.width + x]
    }

    pub fn same_dims(&self, other: &Image) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub(crate) fn check_same_dims(&self, other: &Image) -> Result<()> {
        if self.same_dims(other) {
            Ok(())
        } else {
            Err(Error::dims(
                format!("{}x{}", self.width, self.height),
                format!("{}x{}", other.width, other.height),
            ))
        }
    }

    /// Copy with every intensity clamped to `[0, 1]`.
    pub fn clamped(&self) -> Image {
        Image {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|v| v.clamp(0.0, 1.0)).collect(),
        }
    }
}

/// On-disk image encodings.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ImageFormat {
    Imgf32,
    Pgm8,
    Pgm16,
}

impl ImageFormat {
    /// Guess an output format from a file extension; `.pgm` means 8-bit.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(e) if e.eq_ignore_ascii_case("pgm") => ImageFormat::Pgm8,
            _ => ImageFormat::Imgf32,
        }
    }
}

impl std::str::FromStr for ImageFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "imgf32" | "f32" => Ok(ImageFormat::Imgf32),
            "pgm8" | "pgm" => Ok(ImageFormat::Pgm8),
            "pgm16" => Ok(ImageFormat::Pgm16),
            other => Err(Error::InvalidConfig(format!(
                "unknown image format `{other}`"
            ))),
        }
    }
}

pub fn load_image(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_image(&bytes)
}

/// Decode either supported format, dispatching on the magic bytes.
pub fn decode_image(bytes: &[u8]) -> Result<Image> {
    if bytes.starts_with(IMGF32_MAGIC) {
        decode_imgf32(bytes)
    } else if bytes.starts_with(b"P5") {
        decode_pgm(bytes)
    } else {
        Err(Error::format(0, "unrecognized magic (expected SMIF or P5)"))
    }
}

fn decode_imgf32(bytes: &[u8]) -> Result<Image> {
    if bytes.len() < 12 {
        return Err(Error::format(bytes.len() as u64, "truncated IMGF32 header"));
    }
    let width = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let height = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    if width == 0 || height == 0 {
        return Err(Error::format(4, format!("zero dimension {width}x{height}")));
    }
    let n = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| Error::format(4, "dimension overflow"))?;
    let payload = &bytes[12..];
    if payload.len() != n {
        return Err(Error::format(
            12 + payload.len().min(n) as u64,
            format!("payload is {} bytes, expected {n}", payload.len()),
        ));
    }
    let mut data = Vec::with_capacity(n / 4);
    for (i, chunk) in payload.chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(chunk.try_into().unwrap());
        if !v.is_finite() {
            return Err(Error::format(
                12 + 4 * i as u64,
                format!("non-finite sample {v}"),
            ));
        }
        data.push(v);
    }
    Image::new(width, height, data)
}

/// Minimal PGM header tokenizer: whitespace separated, `#` comments to end of line.
fn pgm_header_token(bytes: &[u8], pos: &mut usize) -> Result<usize> {
    loop {
        match bytes.get(*pos) {
            Some(b'#') => {
                while let Some(&c) = bytes.get(*pos) {
                    *pos += 1;
                    if c == b'\n' {
                        break;
                    }
                }
            }
            Some(c) if c.is_ascii_whitespace() => *pos += 1,
            Some(_) => break,
            None => return Err(Error::format(*pos as u64, "truncated PGM header")),
        }
    }
    let start = *pos;
    while bytes.get(*pos).is_some_and(|c| c.is_ascii_digit()) {
        *pos += 1;
    }
    if start == *pos {
        return Err(Error::format(
            start as u64,
            "expected a number in PGM header",
        ));
    }
    std::str::from_utf8(&bytes[start..*pos])
        .unwrap()
        .parse::<usize>()
        .map_err(|_| Error::format(start as u64, "PGM header value overflows"))
}

fn decode_pgm(bytes: &[u8]) -> Result<Image> {
    let mut pos = 2;
    let width = pgm_header_token(bytes, &mut pos)?;
    let height = pgm_header_token(bytes, &mut pos)?;
    let maxval = pgm_header_token(bytes, &mut pos)?;
    if width == 0 || height == 0 {
        return Err(Error::format(2, format!("zero dimension {width}x{height}")));
    }
    if maxval == 0 || maxval > 65535 {
        return Err(Error::format(
            pos as u64,
            format!("invalid maxval {maxval}"),
        ));
    }
    // exactly one whitespace byte separates the header from the raster
    if !bytes.get(pos).is_some_and(|c| c.is_ascii_whitespace()) {
        return Err(Error::format(pos as u64, "missing whitespace after maxval"));
    }
    pos += 1;
    let sample_bytes = if maxval < 256 { 1 } else { 2 };
    let n = width
        .checked_mul(height)
        .ok_or_else(|| Error::format(2, "dimension overflow"))?;
    let need = n
        .checked_mul(sample_bytes)
        .ok_or_else(|| Error::format(2, "dimension overflow"))?;
    let raster = &bytes[pos..];
    if raster.len() < need {
        return Err(Error::format(
            bytes.len() as u64,
            format!("raster is {} bytes, expected {need}", raster.len()),
        ));
    }
    let scale = maxval as f32;
    let data = if sample_bytes == 1 {
        raster[..n].iter().map(|&b| b as f32 / scale).collect()
    } else {
        raster[..need]
            .chunks_exact(2)
            .map(|c| u16::from_be_bytes([c[0], c[1]]) as f32 / scale)
            .collect()
    };
    Image::new(width, height, data)
}

/// Encode `img` in the requested format. PGM output is clamped and rounded half-up.
pub fn encode_image(img: &Image, format: ImageFormat) -> Vec<u8> {
    match format {
        ImageFormat::Imgf32 => {
            let mut out = Vec::with_capacity(12 + 4 * img.data.len());
            out.extend_from_slice(IMGF32_MAGIC);
            out.extend_from_slice(&(img.width as u32).to_le_bytes());
            out.extend_from_slice(&(img.height as u32).to_le_bytes());
            for v in &img.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
            out
        }
        ImageFormat::Pgm8 | ImageFormat::Pgm16 => {
            let maxval: u32 = if format == ImageFormat::Pgm8 {
                255
            } else {
                65535
            };
            let mut out = format!("P5\n{} {}\n{}\n", img.width, img.height, maxval).into_bytes();
            for &v in &img.data {
                let q = quantize(v, maxval);
                if format == ImageFormat::Pgm8 {
                    out.push(q as u8);
                } else {
                    out.extend_from_slice(&(q as u16).to_be_bytes());
                }
            }
            out
        }
    }
}

/// `floor(clamp(v, 0, 1) * maxval + 0.5)`, computed in double precision.
pub fn quantize(v: f32, maxval: u32) -> u32 {
    let c = if v.is_nan() {
        0.0
    } else {
        v.clamp(0.0, 1.0) as f64
    };
    ((c * maxval as f64 + 0.5).floor() as u32).min(maxval)
}

pub fn save_image(img: &Image, path: impl AsRef<Path>, format: ImageFormat) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_image(img, format);
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

/// One additive ellipse of a phantom. Positions and semi-axes are fractions
/// of the image side (x relative to width, y relative to height).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ellipse {
    pub center_x: f64,
    pub center_y: f64,
    pub semi_x: f64,
    pub semi_y: f64,
    /// Radians, counter-clockwise.
    pub rotation: f64,
    pub intensity: f64,
}

impl Ellipse {
    #[inline]
    fn contains(&self, fx: f64, fy: f64) -> bool {
        let dx = fx - self.center_x;
        let dy = fy - self.center_y;
        let (s, c) = self.rotation.sin_cos();
        let u = dx * c + dy * s;
        let v = -dx * s + dy * c;
        (u / self.semi_x).powi(2) + (v / self.semi_y).powi(2) <= 1.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomSpec {
    pub width: usize,
    pub height: usize,
    pub background: f64,
    pub ellipses: Vec<Ellipse>,
}

/// Modified Shepp-Logan table: (intensity, a, b, x0, y0, phi in degrees) on [-1, 1]².
const SHEPP_LOGAN: [(f64, f64, f64, f64, f64, f64); 10] = [
    (1.0, 0.69, 0.92, 0.0, 0.0, 0.0),
    (-0.8, 0.6624, 0.874, 0.0, -0.0184, 0.0),
    (-0.2, 0.11, 0.31, 0.22, 0.0, -18.0),
    (-0.2, 0.16, 0.41, -0.22, 0.0, 18.0),
    (0.1, 0.21, 0.25, 0.0, 0.35, 0.0),
    (0.1, 0.046, 0.046, 0.0, 0.1, 0.0),
    (0.1, 0.046, 0.046, 0.0, -0.1, 0.0),
    (0.1, 0.046, 0.023, -0.08, -0.605, 0.0),
    (0.1, 0.023, 0.023, 0.0, -0.606, 0.0),
    (0.1, 0.023, 0.046, 0.06, -0.605, 0.0),
];

impl PhantomSpec {
    /// The modified Shepp-Logan head phantom.
    pub fn shepp_logan(width: usize, height: usize) -> Self {
        let ellipses = SHEPP_LOGAN
            .iter()
            .map(|&(a, sx, sy, x0, y0, phi)| Ellipse {
                center_x: (x0 + 1.0) / 2.0,
                // table y axis points up, image rows point down
                center_y: (1.0 - y0) / 2.0,
                semi_x: sx / 2.0,
                semi_y: sy / 2.0,
                rotation: -phi.to_radians(),
                intensity: a,
            })
            .collect();
        Self {
            width,
            height,
            background: 0.0,
            ellipses,
        }
    }

    /// A seeded anatomical variation of the Shepp-Logan phantom: every ellipse
    /// is jittered in position, size, rotation and contrast, and a few random
    /// small features are added inside the head.
    pub fn random(width: usize, height: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut spec = Self::shepp_logan(width, height);
        let scale = rng.random_range(0.85..1.1);
        for (i, e) in spec.ellipses.iter_mut().enumerate() {
            e.center_x = 0.5 + (e.center_x - 0.5) * scale + rng.random_range(-0.02..0.02);
            e.center_y = 0.5 + (e.center_y - 0.5) * scale + rng.random_range(-0.02..0.02);
            e.semi_x *= scale * rng.random_range(0.9..1.1);
            e.semi_y *= scale * rng.random_range(0.9..1.1);
            e.rotation += rng.random_range(-0.2..0.2);
            if i >= 2 {
                e.intensity *= rng.random_range(0.5..2.0);
            }
        }
        let extra = rng.random_range(2..6);
        for _ in 0..extra {
            spec.ellipses.push(Ellipse {
                center_x: rng.random_range(0.35..0.65),
                center_y: rng.random_range(0.3..0.7),
                semi_x: rng.random_range(0.02..0.08),
                semi_y: rng.random_range(0.02..0.08),
                rotation: rng.random_range(0.0..std::f64::consts::PI),
                intensity: rng.random_range(-0.15..0.3),
            });
        }
        spec
    }
}

/// Rasterize a phantom, testing containment at pixel centers.
pub fn gen_phantom(spec: &PhantomSpec) -> Result<Image> {
    if spec.width == 0 || spec.height == 0 {
        return Err(Error::InvalidConfig(format!(
            "phantom dimensions must be positive, got {}x{}",
            spec.width, spec.height
        )));
    }
    let (w, h) = (spec.width, spec.height);
    let mut data = vec![0.0f32; w * h];
    crate::par::for_each_chunk_mut(&mut data, w, |y, row| {
        let fy = (y as f64 + 0.5) / h as f64;
        for (x, px) in row.iter_mut().enumerate() {
            let fx = (x as f64 + 0.5) / w as f64;
            let v = spec
                .ellipses
                .iter()
                .filter(|e| e.contains(fx, fy))
                .fold(spec.background, |acc, e| acc + e.intensity);
            *px = v.clamp(0.0, 1.0) as f32;
        }
    });
    Image::new(w, h, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pgm8(w: usize, h: usize, px: &[u8]) -> Vec<u8> {
        let mut b = format!("P5\n{w} {h}\n255\n").into_bytes();
        b.extend_from_slice(px);
        b
    }

    #[test]
    fn pgm8_decodes_to_unit_range() {
        let img = decode_image(&pgm8(2, 2, &[0, 255, 128, 64])).unwrap();
        let want = [0.0, 1.0, 128.0 / 255.0, 64.0 / 255.0];
        for (a, b) in img.data().iter().zip(want) {
            assert!((a - b).abs() < 1e-6);
        }
        assert!((img.data()[2] - 0.50196).abs() < 1e-5);
        assert!((img.data()[3] - 0.25098).abs() < 1e-5);
    }

    #[test]
    fn pgm_header_comments_are_skipped() {
        let mut b = b"P5\n# made by hand\n1 1\n255\n".to_vec();
        b.push(51);
        let img = decode_image(&b).unwrap();
        assert_eq!(img.data(), &[0.2]);
    }

    #[test]
    fn imgf32_single_pixel() {
        let mut b = IMGF32_MAGIC.to_vec();
        b.extend_from_slice(&1u32.to_le_bytes());
        b.extend_from_slice(&1u32.to_le_bytes());
        b.extend_from_slice(&0.5f32.to_le_bytes());
        assert_eq!(decode_image(&b).unwrap().data(), &[0.5]);
    }

    #[test]
    fn imgf32_rejects_nan_with_offset() {
        let mut b = IMGF32_MAGIC.to_vec();
        b.extend_from_slice(&2u32.to_le_bytes());
        b.extend_from_slice(&1u32.to_le_bytes());
        b.extend_from_slice(&0.5f32.to_le_bytes());
        b.extend_from_slice(&f32::NAN.to_le_bytes());
        match decode_image(&b) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 16),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn bad_magic_and_truncation() {
        assert!(matches!(
            decode_image(b"XXXX"),
            Err(Error::Format { offset: 0, .. })
        ));
        let mut b = IMGF32_MAGIC.to_vec();
        b.extend_from_slice(&4u32.to_le_bytes());
        b.extend_from_slice(&4u32.to_le_bytes());
        assert!(matches!(decode_image(&b), Err(Error::Format { .. })));
        assert!(matches!(
            decode_image(b"P5\n4 4\n255\n\x00"),
            Err(Error::Format { .. })
        ));
        let mut huge = IMGF32_MAGIC.to_vec();
        huge.extend_from_slice(&u32::MAX.to_le_bytes());
        huge.extend_from_slice(&u32::MAX.to_le_bytes());
        assert!(decode_image(&huge).is_err());
    }

    #[test]
    fn pgm_quantization() {
        let one = |v: f32, f| encode_image(&Image::new(1, 1, vec![v]).unwrap(), f);
        assert_eq!(*one(0.5, ImageFormat::Pgm8).last().unwrap(), 128);
        assert_eq!(*one(-0.2, ImageFormat::Pgm8).last().unwrap(), 0);
        assert_eq!(*one(3.0, ImageFormat::Pgm8).last().unwrap(), 255);
        let b = one(1.0, ImageFormat::Pgm16);
        assert_eq!(&b[b.len() - 2..], &[0xff, 0xff]);
    }

    #[test]
    fn constant_phantom() {
        let spec = PhantomSpec {
            width: 7,
            height: 5,
            background: 0.1,
            ellipses: vec![],
        };
        let img = gen_phantom(&spec).unwrap();
        assert!(img.data().iter().all(|&v| v == 0.1f64 as f32));
    }

    #[test]
    fn centered_ellipse_area_matches_analytic() {
        let e = Ellipse {
            center_x: 0.5,
            center_y: 0.5,
            semi_x: 0.25,
            semi_y: 0.25,
            rotation: 0.0,
            intensity: 0.5,
        };
        let spec = PhantomSpec {
            width: 256,
            height: 256,
            background: 0.0,
            ellipses: vec![e],
        };
        let img = gen_phantom(&spec).unwrap();
        assert_eq!(img.get(128, 128), 0.5);
        assert_eq!(img.get(0, 0), 0.0);
        let inside = img.data().iter().filter(|&&v| v > 0.0).count() as f64;
        let frac = inside / (256.0 * 256.0);
        let analytic = std::f64::consts::PI * 0.25 * 0.25;
        assert!(
            (frac - analytic).abs() / analytic < 0.02,
            "{frac} vs {analytic}"
        );
    }

    #[test]
    fn zero_size_phantom_is_rejected() {
        let spec = PhantomSpec {
            width: 0,
            height: 4,
            background: 0.0,
            ellipses: vec![],
        };
        assert!(gen_phantom(&spec).is_err());
    }

    #[test]
    fn phantoms_are_clamped_and_deterministic() {
        let a = gen_phantom(&PhantomSpec::random(64, 80, 3)).unwrap();
        let b = gen_phantom(&PhantomSpec::random(64, 80, 3)).unwrap();
        assert_eq!(a, b);
        assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
        let sl = gen_phantom(&PhantomSpec::shepp_logan(64, 64)).unwrap();
        assert!(sl.data().iter().any(|&v| v > 0.9));
    }
}
