//! Dataset loading: a `clean/` + `noisy/` directory pair, or generated phantoms.

use std::path::Path;

use log::info;
use smoe_core::image::{gen_phantom, load_image, PhantomSpec};
use smoe_core::noise::{add_noise, NoiseModel, NoiseSpec};
use smoe_core::pipeline::{derive_seed, AuxPaths, ImagePair};

use crate::config::{ConfigFile, List};
use crate::error::{CliError, CliResult};
use crate::DataArgs;

/// Per-command defaults for synthetic data.
pub struct DataDefaults {
    pub seed: u64,
    pub sigmas: &'static str,
}

pub const TRAIN_DEFAULTS: DataDefaults = DataDefaults {
    seed: 0,
    sigmas: "0.01,0.03,0.05",
};

/// Held-out data defaults to a different seed than training.
pub const EVAL_DEFAULTS: DataDefaults = DataDefaults {
    seed: 1,
    sigmas: "0.05",
};

pub struct Dataset {
    pub pairs: Vec<ImagePair>,
    pub description: String,
}

pub fn load(args: &DataArgs, cfg: &ConfigFile, defaults: &DataDefaults) -> CliResult<Dataset> {
    // Flags first; the config file is only consulted when neither is given.
    let (dir, synthetic) = if args.data.is_some() || args.synthetic.is_some() {
        (args.data.clone(), args.synthetic)
    } else {
        (
            cfg.get::<String>("data", "dir")?.map(Into::into),
            cfg.get("data", "synthetic")?,
        )
    };
    match (dir, synthetic) {
        (Some(_), Some(_)) => Err(CliError::Usage(
            "give either a data directory or a synthetic count, not both".into(),
        )),
        (Some(d), None) => from_dir(&d),
        (None, Some(n)) => synthesize(n, args, cfg, defaults),
        (None, None) => Err(CliError::Usage(
            "no dataset: pass --data DIR or --synthetic N".into(),
        )),
    }
}

fn from_dir(dir: &Path) -> CliResult<Dataset> {
    let clean_dir = dir.join("clean");
    let noisy_dir = dir.join("noisy");
    let read = |d: &Path| {
        std::fs::read_dir(d).map_err(|e| {
            CliError::Core(smoe_core::Error::Io {
                path: d.to_path_buf(),
                source: e,
            })
        })
    };
    let mut names: Vec<String> = read(&clean_dir)?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_file())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .collect();
    names.sort();
    if names.is_empty() {
        return Err(CliError::Core(smoe_core::Error::NotEnoughSamples {
            needed: 1,
            got: 0,
        }));
    }
    let mut pairs = Vec::with_capacity(names.len());
    for name in names {
        let clean = load_image(clean_dir.join(&name))?;
        let noisy = load_image(noisy_dir.join(&name))?;
        let stem = Path::new(&name)
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| name.clone());
        let existing = |sub: &str| Some(dir.join(sub).join(&stem)).filter(|p| p.is_dir());
        pairs.push(ImagePair {
            name: stem.clone(),
            clean,
            noisy,
            aux: AuxPaths {
                masks: existing("masks"),
                embeddings: existing("embeddings"),
            },
        });
    }
    info!("loaded {} image pairs from {}", pairs.len(), dir.display());
    Ok(Dataset {
        description: format!("dir:{}", dir.display()),
        pairs,
    })
}

fn synthesize(
    n: usize,
    args: &DataArgs,
    cfg: &ConfigFile,
    defaults: &DataDefaults,
) -> CliResult<Dataset> {
    let width = cfg.pick(args.width, "data", "width", 128)?;
    let height = cfg.pick(args.height, "data", "height", 128)?;
    let seed = cfg.pick(args.data_seed, "data", "seed", defaults.seed)?;
    let model: NoiseModel = cfg.pick(
        args.noise_model.as_deref().map(str::parse).transpose()?,
        "noise",
        "model",
        NoiseModel::Rician,
    )?;
    let sigmas: List<f32> = match &args.sigmas {
        Some(s) => s.parse().map_err(CliError::Usage)?,
        None => cfg
            .get("noise", "sigmas")?
            .unwrap_or_else(|| defaults.sigmas.parse().unwrap()),
    };
    if n == 0 {
        return Err(CliError::Usage("--synthetic must be at least 1".into()));
    }
    let pairs = (0..n)
        .map(|i| {
            let clean = gen_phantom(&PhantomSpec::random(
                width,
                height,
                derive_seed(seed, i as u64),
            ))?;
            let spec = NoiseSpec {
                model,
                sigma: sigmas.0[i % sigmas.0.len()],
                seed: derive_seed(seed, (1 << 40) + i as u64),
            };
            let noisy = add_noise(&clean, &spec)?;
            Ok(ImagePair::new(format!("phantom{i:03}"), clean, noisy))
        })
        .collect::<Result<Vec<_>, smoe_core::Error>>()?;
    let levels: Vec<String> = sigmas.0.iter().map(|s| s.to_string()).collect();
    Ok(Dataset {
        description: format!(
            "synthetic:n={n},size={width}x{height},seed={seed},noise={model},sigmas={}",
            levels.join("/")
        ),
        pairs,
    })
}
