//! End-to-end checks of the `sprout` binary: exit codes, error format, and
//! byte-identical artifacts across repeated invocations.

use std::path::Path;
use std::process::{Command, Output};

use sprout_core::formats::parse_sprf;
use sprout_core::synth::{two_texture_corpus, write_images, write_labeled};

fn sprout(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sprout"))
        .args(args)
        .output()
        .expect("spawn sprout")
}

fn write_micro_config(path: &Path, steps: u64) {
    let text = format!(
        "model = custom\n\
         in_channels = 3\n\
         down_factor = 4\n\
         stem_channels = 8,16\n\
         trunk_depth = 2\n\
         trunk_width = 32\n\
         heads = 4\n\
         time_embed_dim = 16\n\
         feature_tap_layer = 1\n\
         head_zero_init = true\n\
         schedule = linear-interp\n\
         param = epsilon\n\
         batch_size = 4\n\
         lr = 0.001\n\
         total_steps = {steps}\n\
         checkpoint_interval = 0\n\
         image_size = 16\n"
    );
    std::fs::write(path, text).unwrap();
}

#[test]
fn estimate_budget_prints_the_doubled_budget() {
    let out = sprout(&["estimate-budget", "--n-ref", "1000", "--s-ref", "100", "--n-target", "4000"]);
    assert!(out.status.success());
    assert_eq!(String::from_utf8_lossy(&out.stdout), "200\n");
}

#[test]
fn usage_errors_exit_2_runtime_errors_exit_1() {
    // unknown flag: usage error on stderr, exit code 2
    let out = sprout(&["estimate-budget", "--n-ref", "1", "--s-ref", "1", "--bogus", "3"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!out.stderr.is_empty());

    // runtime failure: single-line machine-parseable error, exit code 1
    let out = sprout(&["estimate-budget", "--n-ref", "0", "--s-ref", "1", "--n-target", "1"]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.starts_with("error: argument: "), "stderr = {err}");
    assert_eq!(err.lines().count(), 1);

    // missing subcommand is a usage error
    let out = sprout(&[]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn pipeline_end_to_end_and_referentially_transparent() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();

    // corpus on disk
    let samples = two_texture_corpus(12, 16, 11);
    let data = root.join("data");
    write_images(&data, &samples).unwrap();

    // pretrain a micro model for a few steps
    let cfg = root.join("train.cfg");
    write_micro_config(&cfg, 3);
    let ckpt = root.join("model.spck");
    let out = sprout(&[
        "pretrain",
        "--config",
        cfg.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--out",
        ckpt.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(ckpt.exists());
    let log = root.join("model.spck.log");
    assert_eq!(std::fs::read_to_string(&log).unwrap().lines().count(), 3);

    // select-timestep with a one-point grid: t_star is that point
    let report = root.join("erank.txt");
    let out = sprout(&[
        "select-timestep",
        "--ckpt",
        ckpt.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--grid",
        "0.5:0.5:1",
        "--report",
        report.to_str().unwrap(),
        "--size",
        "16",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(&report).unwrap();
    assert!(text.starts_with("erank-report v1\n"), "{text}");
    assert!(text.contains("t_star 0.5"), "{text}");

    // extract features twice: SPRF parses and bytes are identical
    let sprf1 = root.join("f1.sprf");
    let sprf2 = root.join("f2.sprf");
    for out_path in [&sprf1, &sprf2] {
        let out = sprout(&[
            "extract",
            "--ckpt",
            ckpt.to_str().unwrap(),
            "--data",
            data.to_str().unwrap(),
            "--t",
            "0.25",
            "--out",
            out_path.to_str().unwrap(),
            "--size",
            "16",
        ]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    let b1 = std::fs::read(&sprf1).unwrap();
    let b2 = std::fs::read(&sprf2).unwrap();
    assert_eq!(b1, b2, "repeated extraction must be byte-identical");
    let matrix = parse_sprf(&b1).unwrap();
    assert_eq!(matrix.dim(), (12, 32));
    assert_eq!(b1.len(), 16 + 4 * 12 * 32);

    // probe: train and validate on labeled splits, report written
    let train_dir = root.join("seg-train");
    let val_dir = root.join("seg-val");
    write_labeled(&train_dir, &two_texture_corpus(4, 16, 21)).unwrap();
    write_labeled(&val_dir, &two_texture_corpus(3, 16, 22)).unwrap();
    let iou = root.join("iou.txt");
    let out = sprout(&[
        "probe",
        "--ckpt",
        ckpt.to_str().unwrap(),
        "--train",
        train_dir.to_str().unwrap(),
        "--val",
        val_dir.to_str().unwrap(),
        "--classes",
        "2",
        "--report",
        iou.to_str().unwrap(),
        "--epochs",
        "2",
        "--erank-report",
        report.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(&iou).unwrap();
    assert!(text.starts_with("iou-report v1\n"), "{text}");
    assert!(text.contains("miou "), "{text}");

    // visualize: PNG with the token-grid size
    let png = root.join("viz.png");
    let image_path = data.join("tex00000.png");
    let out = sprout(&[
        "visualize",
        "--ckpt",
        ckpt.to_str().unwrap(),
        "--image",
        image_path.to_str().unwrap(),
        "--t",
        "0.25",
        "--out",
        png.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let viz = image::open(&png).unwrap();
    assert_eq!((viz.width(), viz.height()), (4, 4)); // 16 / down_factor 4

    // corrupt checkpoint: format error, exit 1
    let mut bytes = std::fs::read(&ckpt).unwrap();
    bytes[0] = b'X';
    let bad = root.join("bad.spck");
    std::fs::write(&bad, &bytes).unwrap();
    let out = sprout(&[
        "extract",
        "--ckpt",
        bad.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--t",
        "0.5",
        "--out",
        root.join("x.sprf").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error: format: "));
}

#[test]
fn curate_writes_a_deterministic_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let data = root.join("imgs");
    std::fs::create_dir_all(&data).unwrap();
    // content-rich keeper, its exact duplicate, an all-black reject
    let keeper = sprout_core::synth::collage_image(32, 33, 0);
    sprout_core::data::to_rgb8(&keeper).save(data.join("a.png")).unwrap();
    sprout_core::data::to_rgb8(&keeper).save(data.join("b.png")).unwrap();
    image::RgbImage::from_pixel(32, 32, image::Rgb([0, 0, 0]))
        .save(data.join("c.png"))
        .unwrap();

    let m1 = root.join("m1.tsv");
    let m2 = root.join("m2.tsv");
    for m in [&m1, &m2] {
        let out = sprout(&[
            "curate",
            "--in",
            data.to_str().unwrap(),
            "--out",
            m.to_str().unwrap(),
        ]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    let t1 = std::fs::read(&m1).unwrap();
    assert_eq!(t1, std::fs::read(&m2).unwrap());
    let text = String::from_utf8(t1).unwrap();
    assert!(text.starts_with("# curation-manifest v1\n"));
    assert!(text.contains("# summary kept=1 removed=2 errored=0"), "{text}");
    assert!(text.contains("b.png\tremoved\tfeature\tnear-duplicate"), "{text}");
    assert!(text.contains("c.png\tremoved\tquality\tunderexposed"), "{text}");
    let manifest = sprout_core::curation::CurationManifest::parse(&text).unwrap();
    assert_eq!(manifest.verdicts.len(), 3);
}
