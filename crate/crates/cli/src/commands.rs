use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use log::info;
use smoe_core::decompose::{DecompConfig, DecompMode, MaskSource};
use smoe_core::expert::gradcheck::random_tiny_net;
use smoe_core::expert::{gradient_check, NetConfig, TrainConfig};
use smoe_core::gating::FeatureExtractor;
use smoe_core::image::{
    gen_phantom as render, load_image, save_image, Image, ImageFormat, PhantomSpec,
};
use smoe_core::metrics::{error_map, evaluate, normalize_for_display, MetricReport};
use smoe_core::model_io::{load_model, save_model};
use smoe_core::noise::{add_noise as corrupt, residual, NoiseModel, NoiseSpec};
use smoe_core::pipeline::{self, AuxPaths, GatingOverride, TrainSettings};

use crate::config::ConfigFile;
use crate::data::{self, EVAL_DEFAULTS, TRAIN_DEFAULTS};
use crate::error::{CliError, CliResult};
use crate::{
    AblateArgs, AddNoiseArgs, AuxArgs, ClustermapArgs, DenoiseArgs, ErrormapArgs, EvalArgs,
    GenPhantomArgs, GradcheckArgs, TrainArgs,
};

fn save(img: &Image, path: &Path) -> CliResult<()> {
    save_image(img, path, ImageFormat::from_path(path))?;
    info!("wrote {}", path.display());
    Ok(())
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    std::fs::write(path, text).map_err(|e| smoe_core::Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    info!("wrote {}", path.display());
    Ok(())
}

fn aux(a: &AuxArgs) -> AuxPaths {
    AuxPaths {
        masks: a.mask_dir.clone(),
        embeddings: a.embedding_dir.clone(),
    }
}

pub fn gen_phantom(a: &GenPhantomArgs) -> CliResult<()> {
    let spec = if a.shepp_logan {
        PhantomSpec::shepp_logan(a.width, a.height)
    } else {
        PhantomSpec::random(a.width, a.height, a.seed)
    };
    save(&render(&spec)?, &a.out)
}

pub fn add_noise(a: &AddNoiseArgs) -> CliResult<()> {
    let model: NoiseModel = a.model.parse()?;
    let img = load_image(&a.input)?;
    let spec = NoiseSpec {
        model,
        sigma: a.sigma,
        seed: a.seed,
    };
    save(&corrupt(&img, &spec)?, &a.out)
}

fn train_config(
    cfg: &ConfigFile,
    section: &str,
    a: &TrainArgs,
    epochs_flag: Option<usize>,
    epochs: usize,
) -> CliResult<TrainConfig> {
    let d = TrainConfig::default();
    Ok(TrainConfig {
        learning_rate: cfg.pick(a.learning_rate, section, "learning_rate", d.learning_rate)?,
        batch_size: cfg.pick(a.batch_size, section, "batch_size", d.batch_size)?,
        epochs: cfg.pick(epochs_flag, section, "epochs", epochs)?,
        ..d
    })
}

fn settings(a: &TrainArgs, cfg: &ConfigFile) -> CliResult<TrainSettings> {
    let d = TrainSettings::default();
    let mode: DecompMode = cfg.pick(
        a.mode.as_deref().map(str::parse).transpose()?,
        "decomp",
        "mode",
        d.decomp.mode,
    )?;
    let masks: String = cfg.pick(a.masks.clone(), "decomp", "masks", "threshold".into())?;
    let mask_source = match masks.as_str() {
        "threshold" => MaskSource::Threshold,
        // Each image supplies its own directory at run time.
        "files" => MaskSource::Files(PathBuf::from("masks")),
        other => {
            return Err(CliError::Usage(format!(
                "unknown mask source `{other}`, want threshold|files"
            )))
        }
    };
    let features: String = cfg.pick(a.features.clone(), "gating", "features", "raw".into())?;
    let extractor = match features.as_str() {
        "raw" => FeatureExtractor::RawPixels,
        "embeddings" => {
            let dim: Option<usize> = match a.embedding_dim {
                Some(v) => Some(v),
                None => cfg.get("gating", "embedding_dim")?,
            };
            let dim = dim
                .ok_or_else(|| CliError::Usage("embedding features need --embedding-dim".into()))?;
            FeatureExtractor::ExternalEmbeddings { dim }
        }
        other => {
            return Err(CliError::Usage(format!(
                "unknown features `{other}`, want raw|embeddings"
            )))
        }
    };
    Ok(TrainSettings {
        decomp: DecompConfig {
            patch: cfg.pick(a.patch, "decomp", "patch", d.decomp.patch)?,
            stride: cfg.pick(a.stride, "decomp", "stride", d.decomp.stride)?,
            mode,
            mask_source,
        },
        net: NetConfig {
            channels: cfg.pick(a.channels, "net", "channels", d.net.channels)?,
            middle_layers: cfg.pick(
                a.middle_layers,
                "net",
                "middle_layers",
                d.net.middle_layers,
            )?,
            kernel: cfg.pick(a.kernel, "net", "kernel", d.net.kernel)?,
        },
        extractor,
        pretrain: train_config(cfg, "pretrain", a, a.pretrain_epochs, d.pretrain.epochs)?,
        finetune: train_config(cfg, "finetune", a, a.finetune_epochs, d.finetune.epochs)?,
        k: cfg.pick(a.k, "experiment", "k", d.k)?,
        seed: cfg.pick(a.seed, "experiment", "seed", d.seed)?,
    })
}

pub fn train(a: &TrainArgs, cfg: &ConfigFile) -> CliResult<()> {
    let s = settings(a, cfg)?;
    s.net.validate()?;
    s.pretrain.validate()?;
    s.finetune.validate()?;
    let ds = data::load(&a.data, cfg, &TRAIN_DEFAULTS)?;
    info!(
        "training k = {} on {} images ({})",
        s.k,
        ds.pairs.len(),
        ds.description
    );
    let mut model = pipeline::train_smoe(&ds.pairs, &s)?;
    model.meta.push(("data".into(), ds.description));
    model.meta.push((
        "decomp".into(),
        format!(
            "mode={} patch={} stride={}",
            s.decomp.mode, s.decomp.patch, s.decomp.stride
        ),
    ));
    save_model(&model, &a.out)?;
    info!("wrote {}", a.out.display());
    Ok(())
}

pub fn denoise(a: &DenoiseArgs) -> CliResult<()> {
    let over: GatingOverride = a.gating.parse()?;
    let model = load_model(&a.model)?;
    let noisy = load_image(&a.input)?;
    let (out, report) = pipeline::denoise_with(&model, &noisy, over, &aux(&a.aux))?;
    save(&out, &a.out)?;
    if let Some(path) = &a.routes {
        let mut csv = String::from("x,y,cluster,expert\n");
        for r in &report.routes {
            let _ = writeln!(
                csv,
                "{},{},{},{}",
                r.origin.0, r.origin.1, r.cluster, r.expert
            );
        }
        write_text(path, &csv)?;
    }
    Ok(())
}

fn annotate(report: &mut MetricReport, model: &Path, description: &str) {
    report
        .metadata
        .push(("model".into(), model.display().to_string()));
    report
        .metadata
        .push(("data".into(), description.to_string()));
}

pub fn eval(a: &EvalArgs, cfg: &ConfigFile) -> CliResult<()> {
    let over: GatingOverride = a.gating.parse()?;
    let model = load_model(&a.model)?;
    let ds = data::load(&a.data, cfg, &EVAL_DEFAULTS)?;
    let mut report = evaluate(&model, &ds.pairs, over)?;
    annotate(&mut report, &a.model, &ds.description);
    report.write_csv(&a.out)?;
    println!(
        "{}: psnr {:.3} dB (noisy {:.3}), ssim {:.4} (noisy {:.4})",
        report.cluster_mode,
        report.psnr().mean,
        report.noisy_psnr().mean,
        report.ssim().mean,
        report.noisy_ssim().mean
    );
    Ok(())
}

pub fn ablate(a: &AblateArgs, cfg: &ConfigFile) -> CliResult<()> {
    let model = load_model(&a.model)?;
    let overrides: Vec<GatingOverride> = match &a.gating {
        Some(g) => vec![g.parse()?],
        None => (0..model.k())
            .map(GatingOverride::Fixed)
            .chain([
                GatingOverride::Random(a.random_seed),
                GatingOverride::Predicted,
            ])
            .collect(),
    };
    let ds = data::load(&a.data, cfg, &EVAL_DEFAULTS)?;
    let mut rows = String::from("image,psnr_db,ssim,cluster_mode\n");
    let mut tail = String::new();
    println!("{:<14} {:>10} {:>8}", "gating", "psnr_db", "ssim");
    for over in overrides {
        let mut report = evaluate(&model, &ds.pairs, over)?;
        annotate(&mut report, &a.model, &ds.description);
        for line in report.to_csv().lines().skip(1) {
            match line.strip_prefix("# ") {
                Some(agg) => {
                    let _ = writeln!(tail, "# {over}.{agg}");
                }
                None => {
                    rows.push_str(line);
                    rows.push('\n');
                }
            }
        }
        println!(
            "{:<14} {:>10.3} {:>8.4}",
            over.to_string(),
            report.psnr().mean,
            report.ssim().mean
        );
    }
    rows.push_str(&tail);
    write_text(&a.out, &rows)
}

pub fn clustermap(a: &ClustermapArgs) -> CliResult<()> {
    let model = load_model(&a.model)?;
    let img = load_image(&a.input)?;
    save(&pipeline::clustermap(&model, &img, &aux(&a.aux))?, &a.out)
}

pub fn errormap(a: &ErrormapArgs) -> CliResult<()> {
    let reference = load_image(&a.reference)?;
    let test = load_image(&a.test)?;
    let map = error_map(&reference, &test)?;
    match ImageFormat::from_path(&a.out) {
        ImageFormat::Imgf32 => save(&map, &a.out),
        _ => save(&normalize_for_display(&map), &a.out),
    }
}

pub fn gradcheck(a: &GradcheckArgs) -> CliResult<()> {
    let cfg = NetConfig {
        channels: a.channels,
        middle_layers: a.middle_layers,
        kernel: 3,
    };
    let mut worst = 0.0f64;
    for i in 0..a.nets {
        let seed = a.seed.wrapping_add(i);
        let net = random_tiny_net(cfg, seed)?;
        let clean = render(&PhantomSpec::random(a.size, a.size, seed))?;
        let noisy = corrupt(&clean, &NoiseSpec::gaussian(0.1, seed))?;
        let target = residual(&noisy, &clean)?;
        let r = gradient_check(&net, noisy.data(), target.data(), a.size, a.size)?;
        println!(
            "net {seed}: {} parameters, max relative error {:.3e} (layer {} {} [{}])",
            r.parameters, r.max_relative_error, r.worst.0, r.worst.1, r.worst.2
        );
        worst = worst.max(r.max_relative_error);
    }
    println!("max relative error {worst:.3e}");
    if worst >= a.tolerance {
        return Err(CliError::GradCheck(worst, a.tolerance));
    }
    Ok(())
}
