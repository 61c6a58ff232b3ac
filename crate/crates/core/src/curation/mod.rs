//! Three-stage dataset filtration: visual quality, feature-based
//! dedup/variance, content classification.
//!
//! Stages run strictly in order; an image removed at one stage is never
//! evaluated by a later one. Every input receives exactly one verdict and
//! `kept + removed + errored == inputs` always holds.
//!
//! Per-image scoring is parallel (rayon); results are merged back in input
//! order and the greedy dedup scan is sequential, so the manifest is
//! byte-identical across runs and thread counts.

mod dedup;
mod embed;
mod manifest;
mod quality;

pub use dedup::{dedup, DedupRemoval};
pub use embed::{embedder_by_name, AcceptAll, BuiltinEmbedder, ContentClassifier, Embedder};
pub use manifest::{CurationManifest, CurationVerdict, Decision, Reason, Stage};
pub use quality::{exposure_fractions, variance_of_laplacian};

use std::path::Path;

use ndarray::{Array2, Array3};
use rayon::prelude::*;

use crate::data::normalize_u8;
use crate::error::{Error, Result};

/// Content-stage keep threshold: scores >= this are kept.
pub const CONTENT_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone)]
pub struct CurationConfig {
    /// Fraction of the 8-bit dynamic range below which a pixel counts as dark.
    pub exposure_low: f64,
    /// Fraction of the dynamic range above which a pixel counts as bright.
    pub exposure_high: f64,
    /// Maximum tolerated fraction of dark (or bright) pixels.
    pub exposure_max_fraction: f64,
    /// Minimum variance-of-Laplacian on 8-bit grayscale.
    pub blur_threshold: f64,
    /// Cosine similarity at which an image counts as a near-duplicate.
    pub dedup_threshold: f64,
    /// Minimum mean per-dimension variance of patch features.
    pub variance_threshold: f64,
    /// Named embedding provider.
    pub embedder: String,
}

impl Default for CurationConfig {
    fn default() -> Self {
        CurationConfig {
            exposure_low: 0.02,
            exposure_high: 0.98,
            exposure_max_fraction: 0.60,
            blur_threshold: 25.0,
            dedup_threshold: 0.95,
            variance_threshold: 1e-3,
            embedder: "builtin-v1".into(),
        }
    }
}

impl CurationConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("exposure_low", self.exposure_low),
            ("exposure_high", self.exposure_high),
            ("exposure_max_fraction", self.exposure_max_fraction),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} {v} must be in [0, 1]")));
            }
        }
        if self.exposure_low >= self.exposure_high {
            return Err(Error::Config(
                "exposure_low must be below exposure_high".into(),
            ));
        }
        if !(0.0 < self.dedup_threshold && self.dedup_threshold <= 1.0) {
            return Err(Error::Config(format!(
                "dedup_threshold {} must be in (0, 1]",
                self.dedup_threshold
            )));
        }
        if self.blur_threshold < 0.0 || self.variance_threshold < 0.0 {
            return Err(Error::Config("thresholds must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Stage-1 decision for one image; `None` means pass-through.
pub fn quality_filter(gray: &Array2<u8>, cfg: &CurationConfig) -> Option<(Reason, f64)> {
    let (dark, bright) = exposure_fractions(gray, cfg.exposure_low, cfg.exposure_high);
    if bright > cfg.exposure_max_fraction {
        return Some((Reason::Overexposed, bright));
    }
    if dark > cfg.exposure_max_fraction {
        return Some((Reason::Underexposed, dark));
    }
    let sharpness = variance_of_laplacian(gray);
    if sharpness < cfg.blur_threshold {
        return Some((Reason::Blurred, sharpness));
    }
    None
}

/// Mean over dimensions of the per-dimension variance across patch rows.
pub fn semantic_variance(patches: &Array2<f64>) -> f64 {
    let (p, e) = patches.dim();
    if p == 0 || e == 0 {
        return 0.0;
    }
    let pf = p as f64;
    let mut total = 0.0;
    for col in patches.columns() {
        let mean = col.sum() / pf;
        let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / pf;
        total += var;
    }
    total / e as f64
}

/// Stage-2b decision: low patch-feature variance means low semantic content.
pub fn semantic_variance_filter(
    img: &Array3<f32>,
    embedder: &dyn Embedder,
    threshold: f64,
) -> Result<Option<(Reason, f64)>> {
    let patches = embedder.embed_patches(img)?;
    let var = semantic_variance(&patches);
    Ok((var < threshold).then_some((Reason::LowSemanticContent, var)))
}

/// Stage-3 decision: classifier score below the threshold is out-of-domain.
pub fn content_filter(
    img: &Array3<f32>,
    classifier: &dyn ContentClassifier,
    threshold: f64,
) -> Result<Option<(Reason, f64)>> {
    let score = classifier.score(img)?;
    Ok((score < threshold).then_some((Reason::NonBiological, score)))
}

struct LoadedImage {
    id: String,
    gray: Array2<u8>,
    rgb: Array3<f32>,
}

fn decode(path: &Path) -> Result<(Array2<u8>, Array3<f32>)> {
    let img = image::open(path)
        .map_err(|e| Error::Ingest(format!("{}: {e}", path.display())))?
        .into_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    if w == 0 || h == 0 {
        return Err(Error::Ingest(format!("{}: empty image", path.display())));
    }
    let mut gray = Array2::<u8>::zeros((h, w));
    let mut rgb = Array3::<f32>::zeros((3, h, w));
    for (x, y, px) in img.enumerate_pixels() {
        let [r, g, b] = px.0;
        // integer BT.601 luma, same rounding as image's into_luma8
        let luma = (2126 * r as u32 + 7152 * g as u32 + 722 * b as u32) / 10000;
        gray[[y as usize, x as usize]] = luma as u8;
        for (c, v) in [r, g, b].into_iter().enumerate() {
            rgb[[c, y as usize, x as usize]] = normalize_u8(v);
        }
    }
    Ok((gray, rgb))
}

/// Run the full three-stage pipeline over a directory.
pub fn run_pipeline(
    dir: &Path,
    cfg: &CurationConfig,
    embedder: &dyn Embedder,
    classifier: &dyn ContentClassifier,
) -> Result<CurationManifest> {
    cfg.validate()?;
    let mut paths = crate::data::list_images(dir)?;
    if paths.is_empty() {
        return Err(Error::Argument(format!(
            "no images found in {}",
            dir.display()
        )));
    }
    paths.sort();

    // verdict slots in input order; later stages fill the survivors
    let mut verdicts: Vec<Option<CurationVerdict>> = vec![None; paths.len()];
    let ids: Vec<String> = paths
        .iter()
        .map(|p| {
            p.file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_else(|| p.display().to_string())
        })
        .collect();

    // stage 1: decode + quality (parallel, deterministic order)
    let decoded: Vec<Result<(Array2<u8>, Array3<f32>)>> =
        paths.par_iter().map(|p| decode(p)).collect();
    let mut survivors: Vec<LoadedImage> = Vec::new();
    for (i, result) in decoded.into_iter().enumerate() {
        match result {
            Err(_) => {
                verdicts[i] = Some(CurationVerdict {
                    image_id: ids[i].clone(),
                    decision: Decision::Error,
                    stage: Stage::Quality,
                    reason: None,
                    score: None,
                    duplicate_of: None,
                });
            }
            Ok((gray, rgb)) => match quality_filter(&gray, cfg) {
                Some((reason, score)) => {
                    verdicts[i] = Some(CurationVerdict {
                        image_id: ids[i].clone(),
                        decision: Decision::Removed,
                        stage: Stage::Quality,
                        reason: Some(reason),
                        score: Some(score),
                        duplicate_of: None,
                    });
                }
                None => survivors.push(LoadedImage {
                    id: ids[i].clone(),
                    gray,
                    rgb,
                }),
            },
        }
    }
    let _ = &survivors.iter().map(|s| &s.gray); // gray no longer needed past stage 1

    let slot = |ids: &[String], id: &str| -> usize {
        ids.iter().position(|x| x == id).expect("id is from ids")
    };

    // stage 2a: global embeddings + greedy dedup
    let globals: Vec<Result<ndarray::Array1<f64>>> = survivors
        .par_iter()
        .map(|s| embedder.embed_global(&s.rgb))
        .collect();
    let mut embeddings = Vec::new();
    let mut embeddable: Vec<LoadedImage> = Vec::new();
    for (s, g) in survivors.into_iter().zip(globals) {
        match g {
            Err(_) => {
                let i = slot(&ids, &s.id);
                verdicts[i] = Some(CurationVerdict {
                    image_id: s.id.clone(),
                    decision: Decision::Error,
                    stage: Stage::Feature,
                    reason: None,
                    score: None,
                    duplicate_of: None,
                });
            }
            Ok(v) => {
                embeddings.push((s.id.clone(), v));
                embeddable.push(s);
            }
        }
    }
    let removals = dedup(&embeddings, cfg.dedup_threshold)?;
    for r in &removals {
        let i = slot(&ids, &r.id);
        verdicts[i] = Some(CurationVerdict {
            image_id: r.id.clone(),
            decision: Decision::Removed,
            stage: Stage::Feature,
            reason: Some(Reason::NearDuplicate),
            score: Some(r.similarity),
            duplicate_of: Some(r.duplicate_of.clone()),
        });
    }
    let removed_ids: std::collections::BTreeSet<&str> =
        removals.iter().map(|r| r.id.as_str()).collect();
    let after_dedup: Vec<LoadedImage> = embeddable
        .into_iter()
        .filter(|s| !removed_ids.contains(s.id.as_str()))
        .collect();

    // stage 2b: patch-feature variance
    let variances: Vec<Result<Option<(Reason, f64)>>> = after_dedup
        .par_iter()
        .map(|s| semantic_variance_filter(&s.rgb, embedder, cfg.variance_threshold))
        .collect();
    let mut after_variance: Vec<LoadedImage> = Vec::new();
    for (s, v) in after_dedup.into_iter().zip(variances) {
        let i = slot(&ids, &s.id);
        match v {
            Err(_) => {
                verdicts[i] = Some(CurationVerdict {
                    image_id: s.id.clone(),
                    decision: Decision::Error,
                    stage: Stage::Feature,
                    reason: None,
                    score: None,
                    duplicate_of: None,
                });
            }
            Ok(Some((reason, score))) => {
                verdicts[i] = Some(CurationVerdict {
                    image_id: s.id.clone(),
                    decision: Decision::Removed,
                    stage: Stage::Feature,
                    reason: Some(reason),
                    score: Some(score),
                    duplicate_of: None,
                });
            }
            Ok(None) => after_variance.push(s),
        }
    }

    // stage 3: content classification
    let scores: Vec<Result<f64>> = after_variance
        .par_iter()
        .map(|s| classifier.score(&s.rgb))
        .collect();
    for (s, score) in after_variance.into_iter().zip(scores) {
        let i = slot(&ids, &s.id);
        verdicts[i] = Some(match score {
            Err(_) => CurationVerdict {
                image_id: s.id.clone(),
                decision: Decision::Error,
                stage: Stage::Content,
                reason: None,
                score: None,
                duplicate_of: None,
            },
            Ok(score) if score < CONTENT_THRESHOLD => CurationVerdict {
                image_id: s.id.clone(),
                decision: Decision::Removed,
                stage: Stage::Content,
                reason: Some(Reason::NonBiological),
                score: Some(score),
                duplicate_of: None,
            },
            Ok(score) => CurationVerdict {
                image_id: s.id.clone(),
                decision: Decision::Kept,
                stage: Stage::None,
                reason: Some(Reason::Kept),
                score: Some(score),
                duplicate_of: None,
            },
        });
    }

    let verdicts: Vec<CurationVerdict> = verdicts
        .into_iter()
        .map(|v| v.expect("every image received a verdict"))
        .collect();
    for v in &verdicts {
        v.validate()?;
    }
    Ok(CurationManifest { verdicts })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicUsize, Ordering};

    /// Embedder that counts calls (stage-precedence instrumentation) and
    /// hashes pixels so identical images collide.
    struct CountingEmbedder {
        global_calls: AtomicUsize,
        patch_calls: AtomicUsize,
    }

    impl CountingEmbedder {
        fn new() -> Self {
            CountingEmbedder {
                global_calls: AtomicUsize::new(0),
                patch_calls: AtomicUsize::new(0),
            }
        }
    }

    impl Embedder for CountingEmbedder {
        fn name(&self) -> &str {
            "counting-stub"
        }
        fn embed_global(&self, img: &Array3<f32>) -> Result<ndarray::Array1<f64>> {
            self.global_calls.fetch_add(1, Ordering::SeqCst);
            BuiltinEmbedder.embed_global(img)
        }
        fn embed_patches(&self, img: &Array3<f32>) -> Result<Array2<f64>> {
            self.patch_calls.fetch_add(1, Ordering::SeqCst);
            BuiltinEmbedder.embed_patches(img)
        }
    }

    fn textured_image(seed: u32) -> image::RgbImage {
        image::RgbImage::from_fn(32, 32, |x, y| {
            let v = ((x * 7 + y * 13 + seed * 29) % 200 + 30) as u8;
            let w = ((x * 3 + y * 5 + seed * 11) % 180 + 40) as u8;
            image::Rgb([v, w, ((v as u16 + w as u16) / 2) as u8])
        })
    }

    #[test]
    fn stage_precedence_skips_removed_images() {
        let dir = tempfile::tempdir().unwrap();
        // black image fails quality; textured pair dedups; distinct survivor
        image::RgbImage::from_pixel(32, 32, image::Rgb([0, 0, 0]))
            .save(dir.path().join("a_black.png"))
            .unwrap();
        textured_image(1).save(dir.path().join("b_tex.png")).unwrap();
        textured_image(1).save(dir.path().join("c_dup.png")).unwrap();
        textured_image(9).save(dir.path().join("d_other.png")).unwrap();

        let embedder = CountingEmbedder::new();
        let manifest = run_pipeline(
            dir.path(),
            &CurationConfig::default(),
            &embedder,
            &AcceptAll,
        )
        .unwrap();

        // quality-removed image never reached the embedder
        assert_eq!(embedder.global_calls.load(Ordering::SeqCst), 3);
        // dedup-removed image never reached the patch stage
        assert_eq!(embedder.patch_calls.load(Ordering::SeqCst), 2);

        let by_id = |id: &str| {
            manifest
                .verdicts
                .iter()
                .find(|v| v.image_id == id)
                .unwrap()
                .clone()
        };
        assert_eq!(by_id("a_black.png").reason, Some(Reason::Underexposed));
        let dup = by_id("c_dup.png");
        assert_eq!(dup.reason, Some(Reason::NearDuplicate));
        assert_eq!(dup.duplicate_of.as_deref(), Some("b_tex.png"));
        assert_eq!(by_id("b_tex.png").decision, Decision::Kept);
        assert_eq!(by_id("d_other.png").decision, Decision::Kept);
        assert_eq!(
            manifest.kept() + manifest.removed() + manifest.errored(),
            manifest.verdicts.len()
        );
    }

    #[test]
    fn pipeline_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        for i in 0..6 {
            textured_image(i).save(dir.path().join(format!("i{i}.png"))).unwrap();
        }
        image::RgbImage::from_pixel(32, 32, image::Rgb([128, 128, 128]))
            .save(dir.path().join("flat.png"))
            .unwrap();
        let cfg = CurationConfig::default();
        let m1 = run_pipeline(dir.path(), &cfg, &BuiltinEmbedder, &AcceptAll).unwrap();
        let m2 = run_pipeline(dir.path(), &cfg, &BuiltinEmbedder, &AcceptAll).unwrap();
        assert_eq!(m1.to_text(), m2.to_text());
        // the flat image dies in stage 1 (zero Laplacian variance)
        let flat = m1.verdicts.iter().find(|v| v.image_id == "flat.png").unwrap();
        assert_eq!(flat.reason, Some(Reason::Blurred));
    }

    #[test]
    fn undecodable_file_is_an_error_verdict() {
        let dir = tempfile::tempdir().unwrap();
        textured_image(0).save(dir.path().join("good.png")).unwrap();
        std::fs::write(dir.path().join("bad.png"), b"junk").unwrap();
        let manifest =
            run_pipeline(dir.path(), &CurationConfig::default(), &BuiltinEmbedder, &AcceptAll)
                .unwrap();
        let bad = manifest.verdicts.iter().find(|v| v.image_id == "bad.png").unwrap();
        assert_eq!(bad.decision, Decision::Error);
        assert_eq!(bad.stage, Stage::Quality);
        assert_eq!(bad.reason, None);
        assert_eq!(manifest.errored(), 1);
        assert_eq!(manifest.kept(), 1);
    }

    #[test]
    fn content_stage_boundary() {
        struct FixedScore(f64);
        impl ContentClassifier for FixedScore {
            fn name(&self) -> &str {
                "fixed"
            }
            fn score(&self, _: &Array3<f32>) -> Result<f64> {
                Ok(self.0)
            }
        }
        let dir = tempfile::tempdir().unwrap();
        textured_image(3).save(dir.path().join("x.png")).unwrap();
        let cfg = CurationConfig::default();
        // score exactly at the threshold is kept
        let m = run_pipeline(dir.path(), &cfg, &BuiltinEmbedder, &FixedScore(0.5)).unwrap();
        assert_eq!(m.verdicts[0].decision, Decision::Kept);
        let m = run_pipeline(dir.path(), &cfg, &BuiltinEmbedder, &FixedScore(0.49)).unwrap();
        assert_eq!(m.verdicts[0].decision, Decision::Removed);
        assert_eq!(m.verdicts[0].reason, Some(Reason::NonBiological));
        let m = run_pipeline(dir.path(), &cfg, &BuiltinEmbedder, &FixedScore(1.0)).unwrap();
        assert_eq!(m.verdicts[0].decision, Decision::Kept);
        let m = run_pipeline(dir.path(), &cfg, &BuiltinEmbedder, &FixedScore(0.0)).unwrap();
        assert_eq!(m.verdicts[0].decision, Decision::Removed);
    }

    #[test]
    fn empty_directory_is_an_argument_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            run_pipeline(dir.path(), &CurationConfig::default(), &BuiltinEmbedder, &AcceptAll),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn semantic_variance_statistics() {
        // i.i.d. unit-variance patch rows at P = 64: mean variance ~ 1
        let mut rng = crate::rng::derive(55, crate::rng::Stream::Noise, 0);
        let patches = Array2::from_shape_fn((64, 16), |_| {
            rand::Rng::sample::<f64, _>(&mut rng, rand_distr::StandardNormal)
        });
        let var = semantic_variance(&patches);
        assert!((var - 1.0).abs() < 0.35, "sample variance {var}");
        assert!(var > CurationConfig::default().variance_threshold * 100.0);

        // single patch row: variance is exactly zero (degenerate case)
        let single = Array2::from_shape_fn((1, 16), |(_, k)| k as f64);
        assert_eq!(semantic_variance(&single), 0.0);
    }
}
