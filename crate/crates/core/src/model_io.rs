//! Binary container for [`SMoEModel`].
//!
//! Layout: `SMOE`, u32 version, then u32-length-prefixed sections in order:
//! decomposition, gating, base net, one section per expert, metadata.
//! Every number is little-endian `u32` or `f32`.

use std::io::{Cursor, Read};
use std::path::Path;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};

use crate::decompose::{DecompConfig, DecompMode, MaskSource};
use crate::error::{Error, Result};
use crate::expert::{BatchNorm, Conv2d, ExpertNet, Layer, Mode, NetConfig};
use crate::gating::{FeatureExtractor, GatingModel, PcaModel};
use crate::pipeline::SMoEModel;

pub const MODEL_MAGIC: &[u8; 4] = b"SMOE";
pub const MODEL_VERSION: u32 = 1;

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: usize) {
        self.0.write_u32::<LE>(v as u32).unwrap();
    }

    fn f32s(&mut self, v: &[f32]) {
        self.u32(v.len());
        for &x in v {
            self.0.write_f32::<LE>(x).unwrap();
        }
    }

    fn bytes(&mut self, b: &[u8]) {
        self.u32(b.len());
        self.0.extend_from_slice(b);
    }
}

fn section(out: &mut Writer, f: impl FnOnce(&mut Writer)) {
    let mut w = Writer(Vec::new());
    f(&mut w);
    out.bytes(&w.0);
}

fn write_decomp(w: &mut Writer, d: &DecompConfig) {
    w.u32(d.patch);
    w.u32(d.stride);
    w.u32(match d.mode {
        DecompMode::Patch => 0,
        DecompMode::Segment => 1,
    });
    match &d.mask_source {
        MaskSource::Threshold => w.u32(0),
        MaskSource::Files(dir) => {
            w.u32(1);
            w.bytes(dir.to_string_lossy().as_bytes());
        }
    }
}

fn write_gating(w: &mut Writer, g: &GatingModel) {
    match g.extractor {
        FeatureExtractor::RawPixels => {
            w.u32(0);
            w.u32(0);
        }
        FeatureExtractor::ExternalEmbeddings { dim } => {
            w.u32(1);
            w.u32(dim);
        }
    }
    w.u32(g.pca.in_dim);
    w.u32(g.pca.out_dim);
    w.u32(g.k);
    w.f32s(&g.pca.mean);
    w.f32s(&g.pca.components);
    w.f32s(&g.pca.explained_variance);
    w.f32s(&g.centroids);
}

fn write_net(w: &mut Writer, net: &ExpertNet) {
    w.u32(net.config.channels);
    w.u32(net.config.middle_layers);
    w.u32(net.config.kernel);
    w.u32(match net.mode {
        Mode::Train => 0,
        Mode::Eval => 1,
    });
    w.u32(net.layers.len());
    for l in &net.layers {
        w.u32(l.conv.in_channels);
        w.u32(l.conv.out_channels);
        w.u32(l.relu as usize);
        w.u32(l.trainable as usize);
        w.f32s(&l.conv.weight);
        w.f32s(&l.conv.bias);
        match &l.bn {
            None => w.u32(0),
            Some(b) => {
                w.u32(1);
                w.f32s(&b.gamma);
                w.f32s(&b.beta);
                w.f32s(&b.running_mean);
                w.f32s(&b.running_var);
                w.f32s(&[b.momentum, b.eps]);
            }
        }
    }
}

/// Serialize a model. Validates it first.
pub fn encode_model(model: &SMoEModel) -> Result<Vec<u8>> {
    model.validate()?;
    let mut w = Writer(MODEL_MAGIC.to_vec());
    w.u32(MODEL_VERSION as usize);
    section(&mut w, |s| write_decomp(s, &model.decomp));
    section(&mut w, |s| write_gating(s, &model.gating));
    section(&mut w, |s| write_net(s, &model.base_net));
    for e in &model.experts {
        section(&mut w, |s| write_net(s, e));
    }
    let meta: String = model
        .meta
        .iter()
        .map(|(k, v)| format!("{k}={v}\n"))
        .collect();
    section(&mut w, |s| s.0.extend_from_slice(meta.as_bytes()));
    Ok(w.0)
}

pub fn save_model(model: &SMoEModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_model(model)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    cur: Cursor<&'a [u8]>,
    /// Offset of this reader's slice within the whole file.
    base: u64,
}

impl<'a> Reader<'a> {
    fn offset(&self) -> u64 {
        self.base + self.cur.position()
    }

    fn fail(&self, msg: impl Into<String>) -> Error {
        Error::format(self.offset(), msg)
    }

    fn u32(&mut self) -> Result<usize> {
        let at = self.offset();
        self.cur
            .read_u32::<LE>()
            .map(|v| v as usize)
            .map_err(|_| Error::format(at, "truncated u32"))
    }

    fn remaining(&self) -> usize {
        self.cur.get_ref().len() - self.cur.position() as usize
    }

    fn f32s(&mut self) -> Result<Vec<f32>> {
        let n = self.u32()?;
        if n.saturating_mul(4) > self.remaining() {
            return Err(self.fail(format!("array of {n} floats overruns section")));
        }
        let mut v = vec![0.0f32; n];
        self.cur.read_f32_into::<LE>(&mut v).unwrap();
        Ok(v)
    }

    fn f32s_len(&mut self, n: usize, what: &str) -> Result<Vec<f32>> {
        let at = self.offset();
        let v = self.f32s()?;
        if v.len() != n {
            return Err(Error::format(
                at,
                format!("{what}: {} values, expected {n}", v.len()),
            ));
        }
        Ok(v)
    }

    fn bytes(&mut self) -> Result<&'a [u8]> {
        let n = self.u32()?;
        if n > self.remaining() {
            return Err(self.fail(format!("{n}-byte block overruns data")));
        }
        let start = self.cur.position() as usize;
        let slice = &self.cur.get_ref()[start..start + n];
        self.cur.set_position((start + n) as u64);
        Ok(slice)
    }

    fn section(&mut self) -> Result<Reader<'a>> {
        let base = self.offset() + 4;
        let data = self.bytes()?;
        Ok(Reader {
            cur: Cursor::new(data),
            base,
        })
    }

    fn finish(&self, what: &str) -> Result<()> {
        if self.remaining() != 0 {
            return Err(self.fail(format!("{} trailing bytes after {what}", self.remaining())));
        }
        Ok(())
    }

    fn flag(&mut self, what: &str) -> Result<bool> {
        match self.u32()? {
            0 => Ok(false),
            1 => Ok(true),
            v => Err(self.fail(format!("{what}: expected 0 or 1, got {v}"))),
        }
    }
}

fn read_decomp(r: &mut Reader) -> Result<DecompConfig> {
    let patch = r.u32()?;
    let stride = r.u32()?;
    let mode = if r.flag("decomposition mode")? {
        DecompMode::Segment
    } else {
        DecompMode::Patch
    };
    let mask_source = if r.flag("mask source")? {
        let raw = r.bytes()?;
        let s = std::str::from_utf8(raw).map_err(|_| r.fail("mask directory is not UTF-8"))?;
        MaskSource::Files(s.into())
    } else {
        MaskSource::Threshold
    };
    if patch == 0 || stride == 0 || stride > patch {
        return Err(r.fail(format!("invalid patch {patch} / stride {stride}")));
    }
    Ok(DecompConfig {
        patch,
        stride,
        mode,
        mask_source,
    })
}

fn read_gating(r: &mut Reader) -> Result<GatingModel> {
    let extractor = match (r.u32()?, r.u32()?) {
        (0, 0) => FeatureExtractor::RawPixels,
        (1, dim) if dim > 0 => FeatureExtractor::ExternalEmbeddings { dim },
        (t, d) => return Err(r.fail(format!("unknown feature extractor {t}/{d}"))),
    };
    let in_dim = r.u32()?;
    let out_dim = r.u32()?;
    let k = r.u32()?;
    if out_dim == 0 || out_dim > in_dim || k == 0 {
        return Err(r.fail(format!("bad gating shape in {in_dim} out {out_dim} k {k}")));
    }
    let mean = r.f32s_len(in_dim, "PCA mean")?;
    let components = r.f32s_len(in_dim * out_dim, "PCA components")?;
    let explained_variance = r.f32s_len(out_dim, "PCA variances")?;
    let centroids = r.f32s_len(k * out_dim, "centroids")?;
    Ok(GatingModel {
        extractor,
        pca: PcaModel {
            mean,
            components,
            explained_variance,
            in_dim,
            out_dim,
        },
        centroids,
        k,
    })
}

fn read_net(r: &mut Reader) -> Result<ExpertNet> {
    let config = NetConfig {
        channels: r.u32()?,
        middle_layers: r.u32()?,
        kernel: r.u32()?,
    };
    config.validate().map_err(|e| r.fail(e.to_string()))?;
    let mode = if r.flag("mode")? {
        Mode::Eval
    } else {
        Mode::Train
    };
    let n = r.u32()?;
    if n != config.depth() {
        return Err(r.fail(format!("{n} layers, config implies {}", config.depth())));
    }
    let k2 = config.kernel * config.kernel;
    let mut layers = Vec::with_capacity(n);
    for _ in 0..n {
        let cin = r.u32()?;
        let cout = r.u32()?;
        if cin > config.channels.max(1) || cout > config.channels.max(1) {
            return Err(r.fail(format!(
                "layer shape {cin}->{cout} exceeds {} channels",
                config.channels
            )));
        }
        let relu = r.flag("relu")?;
        let trainable = r.flag("trainable")?;
        let weight = r.f32s_len(cout * cin * k2, "conv weight")?;
        let bias = r.f32s_len(cout, "conv bias")?;
        let bn = if r.flag("batch norm")? {
            let gamma = r.f32s_len(cout, "BN gamma")?;
            let beta = r.f32s_len(cout, "BN beta")?;
            let running_mean = r.f32s_len(cout, "BN running mean")?;
            let running_var = r.f32s_len(cout, "BN running variance")?;
            let me = r.f32s_len(2, "BN momentum/eps")?;
            Some(BatchNorm {
                gamma,
                beta,
                running_mean,
                running_var,
                momentum: me[0],
                eps: me[1],
            })
        } else {
            None
        };
        layers.push(Layer {
            conv: Conv2d {
                in_channels: cin,
                out_channels: cout,
                kernel: config.kernel,
                weight,
                bias,
            },
            bn,
            relu,
            trainable,
        });
    }
    let net = ExpertNet {
        config,
        layers,
        mode,
    };
    net.validate().map_err(|e| r.fail(e.to_string()))?;
    Ok(net)
}

/// Parse a container, checking magic, version, section bounds and model
/// invariants. Nothing is returned unless the whole file is valid.
pub fn decode_model(bytes: &[u8]) -> Result<SMoEModel> {
    if bytes.len() < 8 || &bytes[..4] != MODEL_MAGIC {
        return Err(Error::format(0, "not a model file (bad magic)"));
    }
    let mut r = Reader {
        cur: Cursor::new(bytes),
        base: 0,
    };
    r.cur.set_position(4);
    let version = r.u32()?;
    if version as u32 != MODEL_VERSION {
        return Err(Error::format(
            4,
            format!("unsupported model version {version}"),
        ));
    }
    let mut s = r.section()?;
    let decomp = read_decomp(&mut s)?;
    s.finish("decomposition")?;
    let mut s = r.section()?;
    let gating = read_gating(&mut s)?;
    s.finish("gating")?;
    let mut s = r.section()?;
    let base_net = read_net(&mut s)?;
    s.finish("base net")?;
    let mut experts = Vec::with_capacity(gating.k);
    for _ in 0..gating.k {
        let mut s = r.section()?;
        experts.push(read_net(&mut s)?);
        s.finish("expert")?;
    }
    let s = r.section()?;
    let text = std::str::from_utf8(s.cur.get_ref()).map_err(|_| s.fail("metadata is not UTF-8"))?;
    let meta = text
        .lines()
        .map(|l| {
            l.split_once('=')
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .ok_or_else(|| s.fail(format!("metadata line `{l}` lacks `=`")))
        })
        .collect::<Result<Vec<_>>>()?;
    r.finish("metadata")?;
    let model = SMoEModel {
        decomp,
        gating,
        experts,
        base_net,
        meta,
    };
    model.validate()?;
    Ok(model)
}

pub fn load_model(path: impl AsRef<Path>) -> Result<SMoEModel> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    decode_model(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decompose::DecompMode;
    use crate::pipeline::tests::{pairs, tiny_settings};
    use crate::pipeline::{denoise, train_smoe, GatingOverride};

    fn model() -> SMoEModel {
        let mut s = tiny_settings(2);
        s.decomp.mode = DecompMode::Segment;
        train_smoe(&pairs(2, 32), &s).unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        let m = model();
        let bytes = encode_model(&m).unwrap();
        let back = decode_model(&bytes).unwrap();
        assert_eq!(back, m);
        assert_eq!(encode_model(&back).unwrap(), bytes);
        let y = &pairs(3, 32)[2].noisy;
        assert_eq!(
            denoise(&back, y, GatingOverride::Predicted).unwrap(),
            denoise(&m, y, GatingOverride::Predicted).unwrap()
        );
    }

    #[test]
    fn file_round_trip_with_mask_dir() {
        let mut m = model();
        m.decomp.mask_source = MaskSource::Files("masks/dir".into());
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.smoe");
        save_model(&m, &p).unwrap();
        assert_eq!(load_model(&p).unwrap(), m);
    }

    #[test]
    fn rejects_corruption() {
        let bytes = encode_model(&model()).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            decode_model(&bad),
            Err(Error::Format { offset: 0, .. })
        ));
        let mut bad = bytes.clone();
        bad[4] = 2;
        assert!(matches!(
            decode_model(&bad),
            Err(Error::Format { offset: 4, .. })
        ));
        for cut in [3, 8, 20, bytes.len() / 2, bytes.len() - 1] {
            assert!(decode_model(&bytes[..cut]).is_err(), "cut at {cut}");
        }
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(decode_model(&extra).is_err());
    }

    #[test]
    fn rejects_inconsistent_model() {
        let mut m = model();
        m.experts.pop();
        assert!(encode_model(&m).is_err());
    }
}
