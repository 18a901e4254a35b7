//! Training and inference for the full mixture: decompose, gate, run one
//! expert per region, merge.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use log::info;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::decompose::{decompose, merge, DecompConfig, MaskSource, Region};
use crate::error::{Error, Result};
use crate::expert::{
    fine_tune, train_epochs, ExpertNet, Mode, NetConfig, TrainConfig, TrainSample,
};
use crate::gating::{extract_features, FeatureExtractor, GatingModel};
use crate::image::Image;

/// A trained mixture of experts.
#[derive(Debug, Clone, PartialEq)]
pub struct SMoEModel {
    pub decomp: DecompConfig,
    pub gating: GatingModel,
    /// One expert per cluster, all in Eval mode.
    pub experts: Vec<ExpertNet>,
    pub base_net: ExpertNet,
    /// Ordered `key=value` provenance.
    pub meta: Vec<(String, String)>,
}

impl SMoEModel {
    pub fn k(&self) -> usize {
        self.gating.k
    }

    pub fn meta_value(&self, key: &str) -> Option<&str> {
        self.meta
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn validate(&self) -> Result<()> {
        self.gating.validate()?;
        if self.experts.len() != self.gating.k {
            return Err(Error::Unfitted(format!(
                "{} experts for {} clusters",
                self.experts.len(),
                self.gating.k
            )));
        }
        self.base_net.validate()?;
        for (i, e) in self.experts.iter().enumerate() {
            e.validate()?;
            if e.config != self.base_net.config {
                return Err(Error::InvalidConfig(format!(
                    "expert {i} has config {:?}, base has {:?}",
                    e.config, self.base_net.config
                )));
            }
        }
        let in_dim = match self.gating.extractor {
            FeatureExtractor::RawPixels => self.decomp.patch * self.decomp.patch,
            FeatureExtractor::ExternalEmbeddings { dim } => dim,
        };
        if self.gating.pca.in_dim != in_dim {
            return Err(Error::dims(in_dim, self.gating.pca.in_dim));
        }
        Ok(())
    }
}

/// How regions are routed at inference time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GatingOverride {
    #[default]
    Predicted,
    Fixed(usize),
    /// Uniform draw per region from a generator seeded with this value.
    Random(u64),
}

impl FromStr for GatingOverride {
    type Err = Error;

    /// `predicted`, `fixed:ID`, or `random:SEED`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || {
            Error::InvalidConfig(format!(
                "bad gating `{s}`, want predicted|fixed:ID|random:SEED"
            ))
        };
        match s.split_once(':') {
            None if s == "predicted" => Ok(GatingOverride::Predicted),
            Some(("fixed", id)) => id.parse().map(GatingOverride::Fixed).map_err(|_| bad()),
            Some(("random", seed)) => seed.parse().map(GatingOverride::Random).map_err(|_| bad()),
            _ => Err(bad()),
        }
    }
}

impl fmt::Display for GatingOverride {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GatingOverride::Predicted => f.write_str("predicted"),
            GatingOverride::Fixed(c) => write!(f, "fixed:{c}"),
            GatingOverride::Random(s) => write!(f, "random:{s}"),
        }
    }
}

/// Per-image side inputs: a mask directory for segment mode with mask
/// files, and an embedding directory for external features.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AuxPaths {
    pub masks: Option<PathBuf>,
    pub embeddings: Option<PathBuf>,
}

/// A clean image with its noisy observation.
#[derive(Debug, Clone, PartialEq)]
pub struct ImagePair {
    pub name: String,
    pub clean: Image,
    pub noisy: Image,
    pub aux: AuxPaths,
}

impl ImagePair {
    pub fn new(name: impl Into<String>, clean: Image, noisy: Image) -> Self {
        Self {
            name: name.into(),
            clean,
            noisy,
            aux: AuxPaths::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSettings {
    pub decomp: DecompConfig,
    pub net: NetConfig,
    pub extractor: FeatureExtractor,
    /// Pooled training of the base net. Its `seed` is replaced by one
    /// derived from `seed` below.
    pub pretrain: TrainConfig,
    /// Per-cluster last-layer training. Seeds are derived per cluster.
    pub finetune: TrainConfig,
    pub k: usize,
    pub seed: u64,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self {
            decomp: DecompConfig::default(),
            net: NetConfig::DESK,
            extractor: FeatureExtractor::RawPixels,
            pretrain: TrainConfig::default(),
            finetune: TrainConfig {
                epochs: 4,
                ..TrainConfig::default()
            },
            k: 4,
            seed: 0,
        }
    }
}

/// Independent sub-seed for a named stage.
pub fn derive_seed(seed: u64, stage: u64) -> u64 {
    let mut z = seed ^ stage.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const STAGE_INIT: u64 = 1 << 32;
const STAGE_PRETRAIN: u64 = (1 << 32) + 1;
const STAGE_GATING: u64 = (1 << 32) + 2;

fn decomp_for(decomp: &DecompConfig, aux: &AuxPaths) -> DecompConfig {
    match (&decomp.mask_source, &aux.masks) {
        (MaskSource::Files(_), Some(dir)) => DecompConfig {
            mask_source: MaskSource::Files(dir.clone()),
            ..decomp.clone()
        },
        _ => decomp.clone(),
    }
}

/// Decomposed training data shared by the pretraining and expert stages.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub samples: Vec<TrainSample>,
    pub features: Vec<Vec<f32>>,
    pub dataset_hash: String,
}

/// SHA-256 over the dimensions and pixel bits of every pair, in order.
pub fn dataset_hash(pairs: &[ImagePair]) -> String {
    let mut h = Sha256::new();
    for p in pairs {
        for img in [&p.clean, &p.noisy] {
            h.update((img.width() as u64).to_le_bytes());
            h.update((img.height() as u64).to_le_bytes());
            for v in img.data() {
                h.update(v.to_le_bytes());
            }
        }
    }
    hex::encode(h.finalize())
}

/// Decompose every noisy image and pair each region with the true noise
/// under the same support.
pub fn prepare(pairs: &[ImagePair], settings: &TrainSettings) -> Result<Prepared> {
    if pairs.is_empty() {
        return Err(Error::NotEnoughSamples { needed: 1, got: 0 });
    }
    let mut samples = Vec::new();
    let mut features = Vec::new();
    for p in pairs {
        p.clean.check_same_dims(&p.noisy)?;
        let cfg = decomp_for(&settings.decomp, &p.aux);
        let regions = decompose(&p.noisy, &cfg)?;
        for (i, r) in regions.iter().enumerate() {
            features.push(extract_features(
                r,
                i,
                settings.extractor,
                p.aux.embeddings.as_deref(),
            )?);
            let clean = r.crop_from(&p.clean);
            let target = r.data.iter().zip(&clean).map(|(y, x)| y - x).collect();
            samples.push(TrainSample {
                width: r.width,
                height: r.height,
                input: r.data.clone(),
                target,
                support: r.support.clone(),
            });
        }
    }
    Ok(Prepared {
        samples,
        features,
        dataset_hash: dataset_hash(pairs),
    })
}

/// Build and train the shared base net on every region. Independent of `k`.
pub fn pretrain_base(prepared: &Prepared, settings: &TrainSettings) -> Result<ExpertNet> {
    let mut net = ExpertNet::build(settings.net, derive_seed(settings.seed, STAGE_INIT))?;
    let cfg = TrainConfig {
        seed: derive_seed(settings.seed, STAGE_PRETRAIN),
        ..settings.pretrain
    };
    let losses = train_epochs(&mut net, &prepared.samples, &cfg)?;
    info!("pretrained base net: epoch losses {losses:?}");
    net.set_mode(Mode::Eval);
    Ok(net)
}

/// Fit the gate and one fine-tuned expert per cluster on top of `base`.
pub fn build_model(
    prepared: &Prepared,
    settings: &TrainSettings,
    base: &ExpertNet,
) -> Result<SMoEModel> {
    if settings.k > prepared.samples.len() {
        return Err(Error::NotEnoughSamples {
            needed: settings.k,
            got: prepared.samples.len(),
        });
    }
    let (gating, fit) = GatingModel::fit(
        &prepared.features,
        settings.extractor,
        settings.k,
        derive_seed(settings.seed, STAGE_GATING),
    )?;
    info!(
        "gating: k = {}, pca dim {}, {} k-means iterations",
        settings.k, gating.pca.out_dim, fit.iterations
    );
    let clusters: Vec<usize> = prepared
        .features
        .iter()
        .map(|f| gating.gate_features(f).map(|g| g.cluster))
        .collect::<Result<_>>()?;
    let experts = crate::par::map_range(settings.k, |c| {
        let subset: Vec<TrainSample> = prepared
            .samples
            .iter()
            .zip(&clusters)
            .filter(|(_, &a)| a == c)
            .map(|(s, _)| s.clone())
            .collect();
        let cfg = TrainConfig {
            seed: derive_seed(settings.seed, c as u64),
            ..settings.finetune
        };
        info!("fine-tuning expert {c} on {} regions", subset.len());
        fine_tune(base, &subset, &cfg).map(|f| f.net)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let model = SMoEModel {
        decomp: settings.decomp.clone(),
        gating,
        experts,
        base_net: base.clone(),
        meta: training_meta(prepared, settings),
    };
    model.validate()?;
    Ok(model)
}

fn training_meta(prepared: &Prepared, s: &TrainSettings) -> Vec<(String, String)> {
    let t = |c: &TrainConfig| {
        format!(
            "lr={} beta1={} beta2={} eps={} batch={} epochs={}",
            c.learning_rate, c.beta1, c.beta2, c.epsilon, c.batch_size, c.epochs
        )
    };
    vec![
        ("seed".into(), s.seed.to_string()),
        ("k".into(), s.k.to_string()),
        ("dataset_sha256".into(), prepared.dataset_hash.clone()),
        ("regions".into(), prepared.samples.len().to_string()),
        (
            "net".into(),
            format!(
                "channels={} middle={} kernel={}",
                s.net.channels, s.net.middle_layers, s.net.kernel
            ),
        ),
        ("pretrain".into(), t(&s.pretrain)),
        ("finetune".into(), t(&s.finetune)),
    ]
}

/// Full training: decompose, pretrain, fit gate, fine-tune each expert.
/// Deterministic given `settings`.
pub fn train_smoe(pairs: &[ImagePair], settings: &TrainSettings) -> Result<SMoEModel> {
    let prepared = prepare(pairs, settings)?;
    let base = pretrain_base(&prepared, settings)?;
    build_model(&prepared, settings, &base)
}

/// Routing of one region during inference.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RegionRoute {
    pub origin: (usize, usize),
    /// Cluster chosen by the gate.
    pub cluster: usize,
    /// Expert actually applied (differs from `cluster` under an override).
    pub expert: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct RegionReport {
    pub routes: Vec<RegionRoute>,
}

fn route(
    model: &SMoEModel,
    regions: &[Region],
    over: GatingOverride,
    embeddings: Option<&Path>,
) -> Result<Vec<RegionRoute>> {
    let k = model.k();
    if let GatingOverride::Fixed(c) = over {
        if c >= k {
            return Err(Error::InvalidConfig(format!(
                "fixed expert {c} but k = {k}"
            )));
        }
    }
    let gated: Vec<usize> = crate::par::map_range(regions.len(), |i| {
        model
            .gating
            .gate(&regions[i], i, embeddings)
            .map(|g| g.cluster)
    })
    .into_iter()
    .collect::<Result<_>>()?;
    let mut rng = match over {
        GatingOverride::Random(seed) => Some(ChaCha8Rng::seed_from_u64(seed)),
        _ => None,
    };
    Ok(regions
        .iter()
        .zip(gated)
        .map(|(r, cluster)| {
            let expert = match over {
                GatingOverride::Predicted => cluster,
                GatingOverride::Fixed(c) => c,
                GatingOverride::Random(_) => rng.as_mut().unwrap().random_range(0..k),
            };
            RegionRoute {
                origin: r.origin,
                cluster,
                expert,
            }
        })
        .collect())
}

/// Denoise with default side inputs.
pub fn denoise(
    model: &SMoEModel,
    noisy: &Image,
    over: GatingOverride,
) -> Result<(Image, RegionReport)> {
    denoise_with(model, noisy, over, &AuxPaths::default())
}

/// Each region `y` is replaced by `y − f(y)` on its support using the
/// routed expert; the pieces are then merged with `noisy` as fallback.
pub fn denoise_with(
    model: &SMoEModel,
    noisy: &Image,
    over: GatingOverride,
    aux: &AuxPaths,
) -> Result<(Image, RegionReport)> {
    model.validate()?;
    let cfg = decomp_for(&model.decomp, aux);
    let regions = decompose(noisy, &cfg)?;
    let routes = route(model, &regions, over, aux.embeddings.as_deref())?;
    let cleaned: Vec<Region> = crate::par::map_range(regions.len(), |i| {
        let r = &regions[i];
        let v = model.experts[routes[i].expert].predict(&r.data, r.height, r.width)?;
        let x: Vec<f32> = r.data.iter().zip(&v).map(|(y, n)| y - n).collect();
        let mut out = r.with_data(x)?;
        out.cluster = Some(routes[i].expert);
        Ok(out)
    })
    .into_iter()
    .collect::<Result<_>>()?;
    let img = merge(&cleaned, noisy.width(), noisy.height(), noisy)?;
    Ok((img, RegionReport { routes }))
}

/// Cluster labels painted on a non-overlapping tiling (stride = patch).
/// Gray level is `cluster / (k − 1)`, or 0 when `k = 1`; later regions
/// overwrite earlier ones where the clamped edge tiles overlap.
pub fn clustermap(model: &SMoEModel, img: &Image, aux: &AuxPaths) -> Result<Image> {
    model.validate()?;
    let cfg = DecompConfig {
        stride: model.decomp.patch,
        ..decomp_for(&model.decomp, aux)
    };
    let regions = decompose(img, &cfg)?;
    let routes = route(
        model,
        &regions,
        GatingOverride::Predicted,
        aux.embeddings.as_deref(),
    )?;
    let k = model.k();
    let mut out = Image::zeros(img.width(), img.height())?;
    let w = img.width();
    for (r, rt) in regions.iter().zip(&routes) {
        let level = if k > 1 {
            rt.cluster as f32 / (k - 1) as f32
        } else {
            0.0
        };
        let (ox, oy) = r.origin;
        for y in 0..r.height {
            for x in 0..r.width {
                if r.support[y * r.width + x] {
                    out.data_mut()[(oy + y) * w + ox + x] = level;
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::decompose::DecompMode;
    use crate::image::{gen_phantom, PhantomSpec};
    use crate::noise::{add_noise, NoiseSpec};

    pub(crate) fn tiny_settings(k: usize) -> TrainSettings {
        TrainSettings {
            decomp: DecompConfig {
                patch: 16,
                stride: 8,
                ..DecompConfig::default()
            },
            net: NetConfig {
                channels: 4,
                middle_layers: 1,
                kernel: 3,
            },
            pretrain: TrainConfig {
                epochs: 1,
                batch_size: 8,
                ..TrainConfig::default()
            },
            finetune: TrainConfig {
                epochs: 1,
                batch_size: 8,
                ..TrainConfig::default()
            },
            k,
            seed: 5,
            extractor: FeatureExtractor::RawPixels,
        }
    }

    pub(crate) fn pairs(n: usize, side: usize) -> Vec<ImagePair> {
        (0..n)
            .map(|i| {
                let clean = gen_phantom(&PhantomSpec::random(side, side, i as u64)).unwrap();
                let noisy = add_noise(&clean, &NoiseSpec::rician(0.05, 100 + i as u64)).unwrap();
                ImagePair::new(format!("p{i}"), clean, noisy)
            })
            .collect()
    }

    /// Replace every expert's last layer with zeros so it predicts no noise.
    fn zero_experts(model: &mut SMoEModel) {
        for e in &mut model.experts {
            let last = e.layers.last_mut().unwrap();
            last.conv.weight.iter_mut().for_each(|w| *w = 0.0);
            last.conv.bias.iter_mut().for_each(|w| *w = 0.0);
        }
    }

    #[test]
    fn override_parsing() {
        assert_eq!(
            "predicted".parse::<GatingOverride>().unwrap(),
            GatingOverride::Predicted
        );
        assert_eq!(
            "fixed:3".parse::<GatingOverride>().unwrap(),
            GatingOverride::Fixed(3)
        );
        assert_eq!(
            "random:42".parse::<GatingOverride>().unwrap(),
            GatingOverride::Random(42)
        );
        for bad in ["", "fixed", "fixed:x", "random:-1", "cluster:1"] {
            assert!(bad.parse::<GatingOverride>().is_err(), "{bad}");
        }
        for o in [
            GatingOverride::Predicted,
            GatingOverride::Fixed(2),
            GatingOverride::Random(9),
        ] {
            assert_eq!(o.to_string().parse::<GatingOverride>().unwrap(), o);
        }
    }

    #[test]
    fn training_is_deterministic_and_valid() {
        let data = pairs(3, 32);
        let a = train_smoe(&data, &tiny_settings(3)).unwrap();
        let b = train_smoe(&data, &tiny_settings(3)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.experts.len(), 3);
        assert!(a.experts.iter().all(|e| e.mode == Mode::Eval));
        assert_eq!(a.meta_value("k"), Some("3"));
        assert_eq!(a.meta_value("dataset_sha256").unwrap().len(), 64);
    }

    #[test]
    fn training_errors() {
        let data = pairs(1, 32);
        // 32x32 with patch 16 stride 8 gives 9 regions.
        assert!(matches!(
            train_smoe(&data, &tiny_settings(10)),
            Err(Error::NotEnoughSamples { .. })
        ));
        let small = pairs(1, 12);
        assert!(train_smoe(&small, &tiny_settings(1)).is_err());
        assert!(train_smoe(&[], &tiny_settings(1)).is_err());
    }

    #[test]
    fn identical_content_gets_identical_clusters() {
        let mut data = pairs(1, 32);
        data.push(data[0].clone());
        let model = train_smoe(&data, &tiny_settings(2)).unwrap();
        let (_, a) = denoise(&model, &data[0].noisy, GatingOverride::Predicted).unwrap();
        let (_, b) = denoise(&model, &data[1].noisy, GatingOverride::Predicted).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_residual_experts_return_input() {
        let data = pairs(2, 32);
        let mut model = train_smoe(&data, &tiny_settings(2)).unwrap();
        zero_experts(&mut model);
        for mode in [DecompMode::Patch, DecompMode::Segment] {
            model.decomp.mode = mode;
            let (out, _) = denoise(&model, &data[0].noisy, GatingOverride::Predicted).unwrap();
            assert_eq!(out, data[0].noisy);
        }
    }

    #[test]
    fn overrides_route_as_requested() {
        let data = pairs(2, 40);
        let model = train_smoe(&data, &tiny_settings(3)).unwrap();
        let y = &data[1].noisy;
        let (_, fixed) = denoise(&model, y, GatingOverride::Fixed(2)).unwrap();
        assert!(fixed.routes.iter().all(|r| r.expert == 2));
        let (ra, rep_a) = denoise(&model, y, GatingOverride::Random(7)).unwrap();
        let (rb, rep_b) = denoise(&model, y, GatingOverride::Random(7)).unwrap();
        assert_eq!(ra, rb);
        assert_eq!(rep_a, rep_b);
        let (_, pred) = denoise(&model, y, GatingOverride::Predicted).unwrap();
        assert!(pred.routes.iter().all(|r| r.expert == r.cluster));
        assert!(denoise(&model, y, GatingOverride::Fixed(3)).is_err());
    }

    #[test]
    fn single_expert_ignores_overrides() {
        let data = pairs(2, 32);
        let model = train_smoe(&data, &tiny_settings(1)).unwrap();
        let y = &data[0].noisy;
        let (p, _) = denoise(&model, y, GatingOverride::Predicted).unwrap();
        for o in [GatingOverride::Fixed(0), GatingOverride::Random(3)] {
            assert_eq!(denoise(&model, y, o).unwrap().0, p);
        }
    }

    #[test]
    fn output_shape_and_finiteness() {
        let data = pairs(2, 37);
        let model = train_smoe(&data, &tiny_settings(2)).unwrap();
        let y = gen_phantom(&PhantomSpec::random(45, 29, 9)).unwrap();
        let (out, rep) = denoise(&model, &y, GatingOverride::Predicted).unwrap();
        assert!(out.same_dims(&y));
        assert!(out.data().iter().all(|v| v.is_finite()));
        assert!(!rep.routes.is_empty());
    }

    #[test]
    fn clustermap_levels() {
        let data = pairs(2, 40);
        let model = train_smoe(&data, &tiny_settings(3)).unwrap();
        let map = clustermap(&model, &data[0].noisy, &AuxPaths::default()).unwrap();
        let mut levels: Vec<u32> = map.data().iter().map(|v| v.to_bits()).collect();
        levels.sort();
        levels.dedup();
        assert!(levels.len() <= 3);
        assert!(map.data().iter().all(|&v| [0.0, 0.5, 1.0].contains(&v)));
        assert_eq!(
            map,
            clustermap(&model, &data[0].noisy, &AuxPaths::default()).unwrap()
        );
        let one = train_smoe(&data, &tiny_settings(1)).unwrap();
        let flat = clustermap(&one, &data[0].noisy, &AuxPaths::default()).unwrap();
        assert!(flat.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn pretraining_is_shared_across_k() {
        let data = pairs(2, 32);
        let prepared = prepare(&data, &tiny_settings(1)).unwrap();
        let base = pretrain_base(&prepared, &tiny_settings(1)).unwrap();
        let k2 = build_model(&prepared, &tiny_settings(2), &base).unwrap();
        assert_eq!(k2, train_smoe(&data, &tiny_settings(2)).unwrap());
    }
}
