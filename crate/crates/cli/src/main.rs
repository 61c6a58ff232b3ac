//! `sprout`: pre-train, curate, select timesteps, extract features, probe,
//! and visualize — all file-based and reproducible given `--seed`.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use ndarray::{Array1, Array2, Array3};

use sprout_core::curation::{embedder_by_name, AcceptAll, CurationConfig};
use sprout_core::data::{load_image, load_image_dir, load_label};
use sprout_core::diffusion::make_schedule;
use sprout_core::erank::{
    collect_features, parse_report, select_timestep, write_report, FeatureSource, Pooling,
};
use sprout_core::formats::{atomic_write, parse_grid, save_sprf};
use sprout_core::model::{HeadFeatures, UDiT};
use sprout_core::probe::{compute_miou, fit_probe, sliding_window_infer, SegSample};
use sprout_core::train::{estimate_steps, parse_config, train_loop, Checkpoint, TrainConfig};
use sprout_core::{Error, Result};

#[derive(Parser)]
#[command(
    name = "sprout",
    about = "Pixel-space diffusion pre-training and frozen-feature evaluation",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pre-train a denoiser on an image directory.
    Pretrain {
        /// Training configuration file (key = value lines).
        #[arg(long)]
        config: PathBuf,
        /// Directory of training images.
        #[arg(long)]
        data: PathBuf,
        /// Output checkpoint path (SPCK).
        #[arg(long)]
        out: PathBuf,
        /// Resume from an interval checkpoint of the same run.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Override the seed from the config file.
        #[arg(long)]
        seed: Option<u64>,
        /// Warn when the dataset exceeds this diversity budget.
        #[arg(long)]
        warn_saturation: Option<usize>,
        /// Loss log path (default: OUT.log).
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Run the three-stage curation pipeline over a directory.
    Curate {
        #[arg(long = "in")]
        input: PathBuf,
        /// Output manifest path.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 25.0)]
        blur_threshold: f64,
        #[arg(long, default_value_t = 0.95)]
        dedup_threshold: f64,
        #[arg(long, default_value_t = 1e-3)]
        variance_threshold: f64,
        #[arg(long, default_value_t = 0.02)]
        exposure_low: f64,
        #[arg(long, default_value_t = 0.98)]
        exposure_high: f64,
        #[arg(long, default_value_t = 0.60)]
        exposure_max_fraction: f64,
        /// Embedding provider name.
        #[arg(long, default_value = "builtin-v1")]
        embedder: String,
    },
    /// Select the effective-rank-maximizing timestep over a grid.
    SelectTimestep {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Candidate grid A:B:N (N points, both ends included).
        #[arg(long, default_value = "0.0:1.0:11")]
        grid: String,
        /// Output report path.
        #[arg(long)]
        report: PathBuf,
        #[arg(long, value_enum, default_value_t = PoolingArg::ImageMean)]
        pooling: PoolingArg,
        /// Resize images to this edge length (must suit the model).
        #[arg(long, default_value_t = 64)]
        size: usize,
        /// Cap the number of images used (default 256).
        #[arg(long, default_value_t = 256)]
        limit: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Use the EMA weights from the checkpoint.
        #[arg(long)]
        ema: bool,
    },
    /// Extract a feature matrix at one timestep into an SPRF file.
    Extract {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Extraction timestep in [0, 1].
        #[arg(long)]
        t: f64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = PoolingArg::ImageMean)]
        pooling: PoolingArg,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 256)]
        limit: usize,
        /// Trunk tap layer override.
        #[arg(long)]
        tap: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        ema: bool,
    },
    /// Fit a frozen-feature probe and score mIoU on a validation set.
    Probe {
        #[arg(long)]
        ckpt: PathBuf,
        /// Training set directory (images/ and labels/ subdirectories).
        #[arg(long)]
        train: PathBuf,
        /// Validation set directory (images/ and labels/ subdirectories).
        #[arg(long)]
        val: PathBuf,
        /// Number of classes.
        #[arg(long)]
        classes: usize,
        /// Output IoU report path.
        #[arg(long)]
        report: PathBuf,
        /// Extraction timestep; defaults to t_star from --erank-report, else 0.25.
        #[arg(long)]
        t: Option<f64>,
        /// Read the probing timestep from an erank report.
        #[arg(long)]
        erank_report: Option<PathBuf>,
        #[arg(long, default_value_t = 100)]
        epochs: usize,
        #[arg(long, default_value_t = 0.02)]
        lr: f64,
        /// Which features the probe consumes.
        #[arg(long, value_enum, default_value_t = TapArg::Trunk)]
        tap: TapArg,
        /// Update all backbone parameters jointly with the head instead of
        /// probing frozen features (trunk tap only).
        #[arg(long)]
        finetune: bool,
        /// Sliding-window size; shrinks to the image when smaller.
        #[arg(long, default_value_t = 256)]
        window: usize,
        #[arg(long, default_value_t = 128)]
        stride: usize,
        /// Write predicted class maps (8-bit PNG) into this directory.
        #[arg(long)]
        pred_dir: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        ema: bool,
    },
    /// PCA-project features of one image into an RGB PNG.
    Visualize {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        t: f64,
        #[arg(long)]
        out: PathBuf,
        /// Resize the input to this edge length first.
        #[arg(long)]
        size: Option<usize>,
        #[arg(long)]
        tap: Option<usize>,
        /// Nearest-neighbor upscale factor for the output raster.
        #[arg(long, default_value_t = 1)]
        scale: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        ema: bool,
    },
    /// Estimate the step budget for a larger dataset (sqrt scaling rule).
    EstimateBudget {
        #[arg(long)]
        n_ref: u64,
        #[arg(long)]
        s_ref: u64,
        #[arg(long)]
        n_target: u64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum PoolingArg {
    ImageMean,
    Token,
}

impl From<PoolingArg> for Pooling {
    fn from(p: PoolingArg) -> Pooling {
        match p {
            PoolingArg::ImageMean => Pooling::ImageMean,
            PoolingArg::Token => Pooling::Token,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum TapArg {
    /// Mid-trunk token features (default).
    Trunk,
    /// Post-head pixel features (the literal "final output" reading).
    Head,
}

fn main() -> ExitCode {
    if let Ok(threads) = std::env::var("SPROUT_THREADS") {
        if let Ok(n) = threads.parse::<usize>() {
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
        }
    }
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn load_model(path: &Path, ema: bool) -> Result<(UDiT<f32>, TrainConfig)> {
    Checkpoint::load(path)?.build_model_f32(ema)
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Pretrain {
            config,
            data,
            out,
            resume,
            seed,
            warn_saturation,
            log,
        } => {
            let text = std::fs::read_to_string(&config)?;
            let mut cfg = parse_config(&text)?;
            if let Some(seed) = seed {
                cfg.seed = seed;
            }
            if let Some(budget) = warn_saturation {
                let count = sprout_core::data::list_images(&data)?.len();
                if count > budget {
                    eprintln!(
                        "warning: dataset has {count} images, above the diversity budget of \
                         {budget}; more homogeneous data may yield diminishing returns"
                    );
                }
            }
            let outcome = train_loop(&data, &cfg, &out, resume.as_deref(), None)?;
            let log_path = log.unwrap_or_else(|| {
                let mut p = out.as_os_str().to_owned();
                p.push(".log");
                PathBuf::from(p)
            });
            atomic_write(
                &log_path,
                sprout_core::train::format_loss_log(&outcome.loss_log).as_bytes(),
            )?;
            Ok(())
        }
        Command::Curate {
            input,
            out,
            blur_threshold,
            dedup_threshold,
            variance_threshold,
            exposure_low,
            exposure_high,
            exposure_max_fraction,
            embedder,
        } => {
            let cfg = CurationConfig {
                exposure_low,
                exposure_high,
                exposure_max_fraction,
                blur_threshold,
                dedup_threshold,
                variance_threshold,
                embedder,
            };
            let provider = embedder_by_name(&cfg.embedder)?;
            let manifest = sprout_core::curation::run_pipeline(
                &input,
                &cfg,
                provider.as_ref(),
                &AcceptAll,
            )?;
            atomic_write(&out, manifest.to_text().as_bytes())
        }
        Command::SelectTimestep {
            ckpt,
            data,
            grid,
            report,
            pooling,
            size,
            limit,
            seed,
            ema,
        } => {
            let (model, train_cfg) = load_model(&ckpt, ema)?;
            let grid = parse_grid(&grid)?;
            let images = load_images_capped(&data, size, limit)?;
            let sched = make_schedule(train_cfg.schedule);
            let result = select_timestep(
                &model,
                &images,
                &grid,
                &sched,
                pooling.into(),
                seed,
                false,
            )?;
            atomic_write(&report, write_report(&result).as_bytes())
        }
        Command::Extract {
            ckpt,
            data,
            t,
            out,
            pooling,
            size,
            limit,
            tap,
            seed,
            ema,
        } => {
            let (model, train_cfg) = load_model(&ckpt, ema)?;
            let images = load_images_capped(&data, size, limit)?;
            let sched = make_schedule(train_cfg.schedule);
            let matrix = if let Some(tap) = tap {
                let tapped = TappedModel { model: &model, tap };
                collect_features(&tapped, &images, t, &sched, pooling.into(), seed)?
            } else {
                collect_features(&model, &images, t, &sched, pooling.into(), seed)?
            };
            let data32 = matrix.data.mapv(|v| v as f32);
            save_sprf(&out, &data32)
        }
        Command::Probe {
            ckpt,
            train,
            val,
            classes,
            report,
            t,
            erank_report,
            epochs,
            lr,
            tap,
            finetune,
            window,
            stride,
            pred_dir,
            seed,
            ema,
        } => {
            let (mut model, train_cfg) = load_model(&ckpt, ema)?;
            let sched = make_schedule(train_cfg.schedule);
            let t = match (t, erank_report) {
                (Some(t), _) => t,
                (None, Some(path)) => {
                    let text = std::fs::read_to_string(&path)?;
                    parse_report(&text)?.t_star
                }
                (None, None) => 0.25,
            };
            let train_set = load_seg_dir(&train)?;
            let val_set = load_seg_dir(&val)?;
            match (tap, finetune) {
                (TapArg::Trunk, false) => run_probe(
                    &model, &train_set, &val_set, classes, t, &sched, epochs, lr, window, stride,
                    seed, &report, pred_dir.as_deref(), None,
                ),
                (TapArg::Trunk, true) => {
                    let head = sprout_core::probe::finetune_probe(
                        &mut model, &train_set, classes, t, &sched, epochs, lr, seed,
                    )?;
                    run_probe(
                        &model, &train_set, &val_set, classes, t, &sched, epochs, lr, window,
                        stride, seed, &report, pred_dir.as_deref(), Some(head),
                    )
                }
                (TapArg::Head, false) => run_probe(
                    &HeadFeatures(&model),
                    &train_set,
                    &val_set,
                    classes,
                    t,
                    &sched,
                    epochs,
                    lr,
                    window,
                    stride,
                    seed,
                    &report,
                    pred_dir.as_deref(),
                    None,
                ),
                (TapArg::Head, true) => Err(Error::Argument(
                    "--finetune requires the trunk tap".into(),
                )),
            }
        }
        Command::Visualize {
            ckpt,
            image,
            t,
            out,
            size,
            tap,
            scale,
            seed,
            ema,
        } => {
            let (model, train_cfg) = load_model(&ckpt, ema)?;
            let sched = make_schedule(train_cfg.schedule);
            let img = load_image(&image, size)?;
            let (c, h, w) = img.dim();
            let x0 = img.into_shape_with_order((1, c, h, w)).expect("reshape");
            let mut rng = sprout_core::rng::derive(seed, sprout_core::rng::Stream::Noise, 0);
            let eps = sprout_core::diffusion::sample_noise::<f32>((1, c, h, w), &mut rng);
            let noisy =
                sprout_core::diffusion::forward_diffuse(&x0, &eps, &ndarray::arr1(&[t]), &sched)?;
            let feats = model.extract_features(&noisy.xt, &ndarray::arr1(&[t]), tap)?;
            let (_, fh, fw, fd) = feats.dim();
            let grid = feats
                .into_shape_with_order((fh, fw, fd))
                .expect("single-image features");
            let pca = sprout_core::probe::pca_visualize(&grid)?;
            if pca.degenerate {
                eprintln!("warning: zero-variance features; wrote the mid-gray fallback");
            }
            save_png_rgb(&out, &pca.rgb, scale.max(1))
        }
        Command::EstimateBudget {
            n_ref,
            s_ref,
            n_target,
        } => {
            let s = estimate_steps(n_ref, s_ref, n_target)?;
            println!("{s}");
            Ok(())
        }
    }
}

/// Trunk model with a fixed tap override (for `extract --tap`).
struct TappedModel<'a> {
    model: &'a UDiT<f32>,
    tap: usize,
}

impl FeatureSource for TappedModel<'_> {
    fn feature_dim(&self) -> usize {
        self.model.feature_dim()
    }
    fn downsample_factor(&self) -> usize {
        self.model.downsample_factor()
    }
    fn extract(&self, xt: &ndarray::Array4<f32>, t: f64) -> Result<ndarray::Array4<f32>> {
        let tv = Array1::from_elem(xt.dim().0, t);
        self.model.extract_features(xt, &tv, Some(self.tap))
    }
}

fn load_images_capped(dir: &Path, size: usize, limit: usize) -> Result<Vec<Array3<f32>>> {
    if limit == 0 {
        return Err(Error::Argument("--limit must be positive".into()));
    }
    let mut images = load_image_dir(dir, Some(size))?;
    images.truncate(limit);
    Ok(images.into_iter().map(|(_, img)| img).collect())
}

/// Load the `images/` + `labels/` directory layout into segmentation samples.
fn load_seg_dir(dir: &Path) -> Result<Vec<SegSample>> {
    let images = load_image_dir(&dir.join("images"), None)?;
    let labels_dir = dir.join("labels");
    let mut out = Vec::with_capacity(images.len());
    for (path, image) in images {
        let name = path
            .file_name()
            .ok_or_else(|| Error::Argument(format!("bad image path {}", path.display())))?;
        let label_path = labels_dir.join(name);
        let label = load_label(&label_path)?;
        out.push(SegSample { image, label });
    }
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
fn run_probe<F: FeatureSource>(
    source: &F,
    train_set: &[SegSample],
    val_set: &[SegSample],
    classes: usize,
    t: f64,
    sched: &sprout_core::diffusion::NoiseSchedule,
    epochs: usize,
    lr: f64,
    window: usize,
    stride: usize,
    seed: u64,
    report: &Path,
    pred_dir: Option<&Path>,
    fitted: Option<sprout_core::probe::ProbeHead>,
) -> Result<()> {
    let head = match fitted {
        Some(head) => head,
        None => fit_probe(source, train_set, classes, t, sched, epochs, lr, seed)?,
    };
    let mut preds = Vec::new();
    let mut labels = Vec::new();
    for (i, s) in val_set.iter().enumerate() {
        let (_, h, w) = s.image.dim();
        let win = window.min(h).min(w);
        // shrink the window to the image when the image is smaller
        let win = win - (win % source.downsample_factor().max(1));
        let pred = sliding_window_infer(
            source, &head, &s.image, t, sched, win, stride.min(win), seed, i as u64,
        )?;
        if let Some(dir) = pred_dir {
            std::fs::create_dir_all(dir)?;
            save_png_gray(&dir.join(format!("pred{i:05}.png")), &pred)?;
        }
        preds.push(pred);
        labels.push(s.label.clone());
    }
    let result = compute_miou(&preds, &labels, classes)?;
    atomic_write(report, result.to_text().as_bytes())
}

fn save_png_rgb(path: &Path, rgb: &ndarray::Array3<u8>, scale: usize) -> Result<()> {
    let (h, w, _) = rgb.dim();
    let img = image::RgbImage::from_fn((w * scale) as u32, (h * scale) as u32, |x, y| {
        let (sy, sx) = (y as usize / scale, x as usize / scale);
        image::Rgb([rgb[[sy, sx, 0]], rgb[[sy, sx, 1]], rgb[[sy, sx, 2]]])
    });
    let mut buf = std::io::Cursor::new(Vec::new());
    img.write_to(&mut buf, image::ImageFormat::Png)
        .map_err(|e| Error::Io(std::io::Error::other(e)))?;
    atomic_write(path, buf.get_ref())
}

fn save_png_gray(path: &Path, map: &Array2<u8>) -> Result<()> {
    let (h, w) = map.dim();
    let img = image::GrayImage::from_fn(w as u32, h as u32, |x, y| {
        image::Luma([map[[y as usize, x as usize]]])
    });
    let mut buf = std::io::Cursor::new(Vec::new());
    img.write_to(&mut buf, image::ImageFormat::Png)
        .map_err(|e| Error::Io(std::io::Error::other(e)))?;
    atomic_write(path, buf.get_ref())
}
