//! Writes minimal valid corpus seeds for the fuzz targets. (Dev utility.)

use std::path::PathBuf;

use sprout_core::erank::{ErankEntry, ErankReport};
use sprout_core::model::{build_model, UDiTConfig};
use sprout_core::train::{Checkpoint, ModelSpec, TrainConfig};

fn main() {
    let root = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "fuzz/corpus".into()));
    let put = |target: &str, name: &str, bytes: &[u8]| {
        let dir = root.join(target);
        std::fs::create_dir_all(&dir).unwrap();
        std::fs::write(dir.join(name), bytes).unwrap();
        println!("{target}/{name}: {} bytes", bytes.len());
    };

    // SPCK: a micro-model checkpoint
    let cfg = TrainConfig {
        model: ModelSpec::Custom(UDiTConfig {
            in_channels: 3,
            down_factor: 2,
            stem_channels: vec![4],
            trunk_depth: 1,
            trunk_width: 8,
            heads: 2,
            time_embed_dim: 4,
            feature_tap_layer: 0,
            head_zero_init: true,
        }),
        image_size: 8,
        ..TrainConfig::default()
    };
    let model = build_model::<f32>(&cfg.model.resolve().unwrap(), 0).unwrap();
    let ck = Checkpoint::capture(&model, &cfg, 3, None, None);
    put("fuzz_spck_checkpoint", "micro.spck", &ck.to_bytes());
    // a checkpoint with EMA and optimizer tables present
    {
        let mut ema = sprout_core::train::Ema::<f32>::new(0.999);
        ema.update_model(&model);
        let mut opt = sprout_core::train::AdamW::<f32>::new(1e-4, 0.9, 0.95, 0.01);
        let mut grads = sprout_core::nn::Gradients::new();
        model.for_each_param(&mut |name, view| {
            grads.add(name, ndarray::ArrayD::ones(view.raw_dim()));
        });
        let mut model = model.clone();
        opt.update(&mut model, &grads);
        let (opt_step, tensors) = opt.state_tensors();
        let full = Checkpoint::capture(
            &model,
            &cfg,
            7,
            Some(ema.tensors()),
            Some(sprout_core::train::OptimizerState {
                step: opt_step,
                tensors,
            }),
        );
        put("fuzz_spck_checkpoint", "full_tables.spck", &full.to_bytes());
    }

    // SPRF: a tiny feature matrix
    let m = ndarray::arr2(&[[1.0f32, -0.5, 0.25], [0.0, 2.0, -1.5]]);
    put(
        "fuzz_sprf_features",
        "tiny.sprf",
        &sprout_core::formats::write_sprf(&m),
    );

    // training configs
    put(
        "fuzz_train_config",
        "default.cfg",
        TrainConfig::default().to_text().as_bytes(),
    );
    put("fuzz_train_config", "custom.cfg", cfg.to_text().as_bytes());

    // grid specs
    put("fuzz_grid_spec", "standard.txt", b"0.0:1.0:11");
    put("fuzz_grid_spec", "single.txt", b"0.5:0.5:1");

    // erank report
    let report = ErankReport {
        entries: vec![
            ErankEntry { t: 0.0, erank: 1.5, spectrum: None },
            ErankEntry { t: 0.5, erank: 7.25, spectrum: None },
            ErankEntry { t: 1.0, erank: 3.0, spectrum: None },
        ],
        t_star: 0.5,
    };
    put(
        "fuzz_erank_report",
        "small.txt",
        sprout_core::erank::write_report(&report).as_bytes(),
    );

    // curation manifest
    let manifest = "\
# curation-manifest v1
a.png\tkept\tnone\tkept\t1\t-
b.png\tremoved\tfeature\tnear-duplicate\t0.993\ta.png
c.png\tremoved\tquality\tunderexposed\t1\t-
d.png\terror\tquality\t-\t-\t-
# summary kept=1 removed=2 errored=1
";
    put("fuzz_curation_manifest", "small.tsv", manifest.as_bytes());
}
