use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use smoe_core::image::load_image;
use smoe_core::metrics::psnr;
use smoe_core::model_io::load_model;

fn smoe(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_smoe"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> Output {
    let out = smoe(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn p(dir: &Path, name: &str) -> String {
    dir.join(name).to_string_lossy().into_owned()
}

const SMALL: &[&str] = &[
    "--width",
    "40",
    "--height",
    "40",
    "--patch",
    "16",
    "--stride",
    "8",
    "--channels",
    "4",
    "--middle-layers",
    "1",
    "--pretrain-epochs",
    "1",
    "--finetune-epochs",
    "1",
    "--batch-size",
    "8",
];

fn train_small(dir: &Path, name: &str, extra: &[&str]) -> PathBuf {
    let model = dir.join(name);
    let mut args = vec![
        "train",
        "--synthetic",
        "3",
        "--k",
        "2",
        "--out",
        model.to_str().unwrap(),
    ];
    args.extend_from_slice(SMALL);
    args.extend_from_slice(extra);
    ok(&args);
    model
}

#[test]
fn help_and_usage_errors() {
    assert_eq!(smoe(&["--help"]).status.code(), Some(0));
    assert_eq!(smoe(&["train", "--help"]).status.code(), Some(0));
    let bad = smoe(&["gen-phantom", "--out", "x.img", "--bogus", "1"]);
    assert_eq!(bad.status.code(), Some(1));
    assert!(!bad.stderr.is_empty());
    assert_eq!(smoe(&["no-such-command"]).status.code(), Some(1));
    assert_eq!(
        smoe(&[
            "denoise",
            "--model",
            "m",
            "--in",
            "a",
            "--out",
            "b",
            "--gating",
            "sometimes"
        ])
        .status
        .code(),
        Some(1)
    );
}

#[test]
fn data_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let missing = p(dir.path(), "missing.img");
    let out = p(dir.path(), "o.img");
    let r = smoe(&[
        "add-noise",
        "--in",
        &missing,
        "--out",
        &out,
        "--sigma",
        "0.1",
    ]);
    assert_eq!(r.status.code(), Some(2));
    std::fs::write(dir.path().join("junk.img"), b"nope").unwrap();
    let r = smoe(&[
        "add-noise",
        "--in",
        &p(dir.path(), "junk.img"),
        "--out",
        &out,
        "--sigma",
        "0.1",
    ]);
    assert_eq!(r.status.code(), Some(2));
}

#[test]
fn gen_phantom_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (p(dir.path(), "a.img"), p(dir.path(), "b.img"));
    for out in [&a, &b] {
        ok(&[
            "gen-phantom",
            "--out",
            out,
            "--width",
            "128",
            "--height",
            "128",
            "--seed",
            "7",
        ]);
    }
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    ok(&[
        "gen-phantom",
        "--out",
        &p(dir.path(), "sl.pgm"),
        "--shepp-logan",
    ]);
    assert!(std::fs::read(dir.path().join("sl.pgm"))
        .unwrap()
        .starts_with(b"P5"));
}

#[test]
fn add_noise_changes_pixels_without_touching_input() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (p(dir.path(), "a.img"), p(dir.path(), "b.img"));
    ok(&["gen-phantom", "--out", &a, "--seed", "3"]);
    let before = std::fs::read(&a).unwrap();
    ok(&[
        "add-noise",
        "--in",
        &a,
        "--out",
        &b,
        "--model",
        "rician",
        "--sigma",
        "0.05",
        "--seed",
        "1",
    ]);
    assert_eq!(std::fs::read(&a).unwrap(), before);
    let v = psnr(&load_image(&a).unwrap(), &load_image(&b).unwrap(), 1.0).unwrap();
    assert!(v.is_finite() && v > 10.0, "{v}");
}

#[test]
fn train_eval_ablate_denoise_and_maps() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let model = train_small(d, "m.smoe", &["--seed", "4"]);
    let m = model.to_str().unwrap();
    assert_eq!(load_model(&model).unwrap().k(), 2);

    let csv = p(d, "eval.csv");
    let mut args = vec![
        "eval",
        "--model",
        m,
        "--synthetic",
        "4",
        "--out",
        &csv,
        "--width",
        "40",
        "--height",
        "40",
    ];
    ok(&args);
    let text = std::fs::read_to_string(&csv).unwrap();
    let rows: Vec<&str> = text.lines().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(rows[0], "image,psnr_db,ssim,cluster_mode");
    assert_eq!(rows.len(), 1 + 4);
    assert!(text.contains("# mean_psnr="));

    let ab = p(d, "ablate.csv");
    args[0] = "ablate";
    args[6] = &ab;
    ok(&args);
    let text = std::fs::read_to_string(&ab).unwrap();
    for mode in ["fixed:0", "fixed:1", "random:0", "predicted"] {
        assert_eq!(
            text.lines()
                .filter(|l| l.ends_with(&format!(",{mode}")))
                .count(),
            4,
            "{mode}"
        );
        assert!(text.contains(&format!("# {mode}.mean_psnr=")));
    }

    let img = p(d, "in.img");
    ok(&[
        "gen-phantom",
        "--out",
        &img,
        "--width",
        "40",
        "--height",
        "40",
        "--seed",
        "99",
    ]);
    let (o1, o2, routes) = (p(d, "o1.img"), p(d, "o2.img"), p(d, "routes.csv"));
    ok(&[
        "denoise", "--model", m, "--in", &img, "--out", &o1, "--gating", "random:5", "--routes",
        &routes,
    ]);
    ok(&[
        "denoise", "--model", m, "--in", &img, "--out", &o2, "--gating", "random:5",
    ]);
    assert_eq!(std::fs::read(&o1).unwrap(), std::fs::read(&o2).unwrap());
    assert_eq!(
        std::fs::read_to_string(&routes).unwrap().lines().count(),
        1 + 16
    );
    let r = smoe(&[
        "denoise", "--model", m, "--in", &img, "--out", &o2, "--gating", "fixed:2",
    ]);
    assert_eq!(r.status.code(), Some(1));

    let map = p(d, "clusters.pgm");
    ok(&["clustermap", "--model", m, "--in", &img, "--out", &map]);
    let cm = load_image(&map).unwrap();
    assert!(cm.data().iter().all(|&v| v == 0.0 || v == 1.0));

    let (raw, shown) = (p(d, "err.img"), p(d, "err.pgm"));
    ok(&[
        "errormap",
        "--reference",
        &img,
        "--test",
        &o1,
        "--out",
        &raw,
    ]);
    ok(&[
        "errormap",
        "--reference",
        &img,
        "--test",
        &o1,
        "--out",
        &shown,
    ]);
    let raw_map = load_image(&raw).unwrap();
    assert!(raw_map.data().iter().all(|&v| v >= 0.0));
    let shown_map = load_image(&shown).unwrap();
    assert!(shown_map.data().iter().cloned().fold(0.0f32, f32::max) == 1.0);
}

#[test]
fn training_is_reproducible_across_thread_counts() {
    let dir = tempfile::tempdir().unwrap();
    let a = train_small(dir.path(), "a.smoe", &["--threads", "1"]);
    let b = train_small(dir.path(), "b.smoe", &["--threads", "2"]);
    assert_eq!(std::fs::read(a).unwrap(), std::fs::read(b).unwrap());
}

#[test]
fn config_file_with_flag_override() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("exp.ini");
    std::fs::write(
        &cfg,
        "# small run\n[experiment]\nk = 3\nseed = 8\n\n[noise]\nsigmas = 0.02, 0.04\n",
    )
    .unwrap();
    let c = cfg.to_str().unwrap();
    let from_file = train_small(dir.path(), "f.smoe", &["--config", c]);
    let m = load_model(&from_file).unwrap();
    // `--k 2` from the shared flags wins over the file's k = 3.
    assert_eq!(m.k(), 2);
    assert_eq!(m.meta_value("seed"), Some("8"));
    assert!(m.meta_value("data").unwrap().contains("sigmas=0.02/0.04"));

    std::fs::write(&cfg, "[experiment]\nkk = 3\n").unwrap();
    let r = smoe(&[
        "train",
        "--config",
        c,
        "--synthetic",
        "1",
        "--out",
        &p(dir.path(), "x.smoe"),
    ]);
    assert_eq!(r.status.code(), Some(1));
}

#[test]
fn dataset_directory_layout() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    for sub in ["clean", "noisy"] {
        std::fs::create_dir(d.join(sub)).unwrap();
    }
    for i in 0..2 {
        let clean = p(&d.join("clean"), &format!("img{i}.img"));
        ok(&[
            "gen-phantom",
            "--out",
            &clean,
            "--width",
            "40",
            "--height",
            "40",
            "--seed",
            &i.to_string(),
        ]);
        let noisy = p(&d.join("noisy"), &format!("img{i}.img"));
        ok(&[
            "add-noise",
            "--in",
            &clean,
            "--out",
            &noisy,
            "--sigma",
            "0.05",
            "--seed",
            &i.to_string(),
        ]);
    }
    let model = p(d, "m.smoe");
    let mut args = vec![
        "train",
        "--data",
        d.to_str().unwrap(),
        "--k",
        "2",
        "--out",
        &model,
    ];
    args.extend_from_slice(&SMALL[4..]);
    ok(&args);
    let csv = p(d, "e.csv");
    ok(&[
        "eval",
        "--model",
        &model,
        "--data",
        d.to_str().unwrap(),
        "--out",
        &csv,
    ]);
    let text = std::fs::read_to_string(&csv).unwrap();
    assert!(text.contains("\nimg0,") && text.contains("\nimg1,"));
}

#[test]
fn gradcheck_reports_success() {
    let out = ok(&["gradcheck", "--nets", "2", "--seed", "3"]);
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("max relative error"));
}
