//! Training-free timestep selection by effective-rank maximization.
//!
//! Features are extracted from a frozen denoiser at candidate timesteps; the
//! timestep whose feature matrix has the highest effective rank — the
//! exponential of the entropy of the normalized singular-value spectrum — is
//! selected. No labels, no extra training.

use ndarray::{Array1, Array2, Array3, Array4};

use crate::diffusion::{forward_diffuse, sample_noise, NoiseSchedule};
use crate::error::{Error, Result};
use crate::rng::{derive, Stream};

pub use crate::linalg::singular_values;

/// How feature rows are formed from per-token activations.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pooling {
    /// Average all tokens of an image into one row (one row per image).
    ImageMean,
    /// Emit one row per token.
    Token,
}

impl Pooling {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "image-mean" => Ok(Pooling::ImageMean),
            "token" => Ok(Pooling::Token),
            other => Err(Error::Config(format!("unknown pooling `{other}`"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Pooling::ImageMean => "image-mean",
            Pooling::Token => "token",
        }
    }
}

/// An N x D matrix of feature rows extracted at one timestep.
#[derive(Debug, Clone)]
pub struct FeatureMatrix {
    pub data: Array2<f64>,
    pub pooling: Pooling,
    pub source_t: f64,
}

impl FeatureMatrix {
    pub fn new(data: Array2<f64>, pooling: Pooling, source_t: f64) -> Result<Self> {
        let (n, d) = data.dim();
        if n < 2 || d < 2 {
            return Err(Error::Argument(format!(
                "feature matrix must be at least 2x2, got {n}x{d}"
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("feature matrix has non-finite entries".into()));
        }
        Ok(FeatureMatrix {
            data,
            pooling,
            source_t,
        })
    }
}

/// Anything that can map a noisy batch at timestep t to a token feature grid
/// of shape `B x (H/f) x (W/f) x D`.
pub trait FeatureSource {
    fn feature_dim(&self) -> usize;
    /// Spatial reduction factor between pixels and the token grid.
    fn downsample_factor(&self) -> usize;
    fn extract(&self, xt: &Array4<f32>, t: f64) -> Result<Array4<f32>>;
}

/// Effective rank of a feature matrix: exp of the Shannon entropy of the
/// normalized singular-value spectrum, with the convention 0 ln 0 = 0.
///
/// Always in `[1, min(N, D)]`; an all-zero matrix is a degenerate input.
pub fn effective_rank(f: &FeatureMatrix) -> Result<f64> {
    effective_rank_of(&f.data)
}

/// [`effective_rank`] on a raw matrix; also used on retained spectra.
pub fn effective_rank_of(data: &Array2<f64>) -> Result<f64> {
    let svals = singular_values(data)?;
    erank_from_spectrum(svals.as_slice().unwrap())
}

/// Effective rank from an already-computed singular-value spectrum.
pub fn erank_from_spectrum(svals: &[f64]) -> Result<f64> {
    let total: f64 = svals.iter().sum();
    if total <= 0.0 {
        return Err(Error::Degenerate(
            "singular-value spectrum sums to zero (all-zero matrix)".into(),
        ));
    }
    // Zeroing tolerance sits just above the sqrt(eps) noise floor of the
    // Gram-matrix route, so exact-rank inputs report exact eranks.
    let cutoff = 1e-8 * svals.iter().cloned().fold(0.0, f64::max);
    let mut entropy = 0.0;
    for &s in svals {
        if s > cutoff {
            let p = s / total;
            entropy -= p * p.ln();
        }
    }
    Ok(entropy.exp())
}

/// Extract a feature matrix from an image set at one timestep.
///
/// Each image is noised by [`forward_diffuse`] with noise derived from
/// `(seed, image index)` — the timestep does not enter the derivation, so
/// every candidate timestep sees the same underlying noise draw.
pub fn collect_features<F: FeatureSource>(
    source: &F,
    images: &[Array3<f32>],
    t: f64,
    sched: &NoiseSchedule,
    pooling: Pooling,
    seed: u64,
) -> Result<FeatureMatrix> {
    if images.is_empty() {
        return Err(Error::Argument("empty image set".into()));
    }
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Argument(format!("timestep {t} outside [0, 1]")));
    }
    let d = source.feature_dim();
    let mut rows: Vec<Array1<f64>> = Vec::new();
    for (idx, img) in images.iter().enumerate() {
        let (c, h, w) = img.dim();
        let x0 = img
            .to_owned()
            .into_shape_with_order((1, c, h, w))
            .expect("image reshape");
        let mut rng = derive(seed, Stream::Noise, idx as u64);
        let eps = sample_noise::<f32>((1, c, h, w), &mut rng);
        let nb = forward_diffuse(&x0, &eps, &ndarray::arr1(&[t]), sched)?;
        let feats = source.extract(&nb.xt, t)?;
        let (_, fh, fw, fd) = feats.dim();
        if fd != d {
            return Err(Error::Shape(format!(
                "feature source returned dim {fd}, declared {d}"
            )));
        }
        match pooling {
            Pooling::ImageMean => {
                let mut row = Array1::<f64>::zeros(d);
                for y in 0..fh {
                    for x in 0..fw {
                        for k in 0..d {
                            row[k] += feats[[0, y, x, k]] as f64;
                        }
                    }
                }
                let count = (fh * fw) as f64;
                row.mapv_inplace(|v| v / count);
                rows.push(row);
            }
            Pooling::Token => {
                for y in 0..fh {
                    for x in 0..fw {
                        rows.push(Array1::from_iter(
                            (0..d).map(|k| feats[[0, y, x, k]] as f64),
                        ));
                    }
                }
            }
        }
    }
    let n = rows.len();
    let mut data = Array2::<f64>::zeros((n, d));
    for (i, row) in rows.into_iter().enumerate() {
        data.row_mut(i).assign(&row);
    }
    FeatureMatrix::new(data, pooling, t)
}

/// One grid point of an [`ErankReport`].
#[derive(Debug, Clone)]
pub struct ErankEntry {
    pub t: f64,
    pub erank: f64,
    /// Retained singular-value spectrum, if requested.
    pub spectrum: Option<Vec<f64>>,
}

/// Per-timestep effective ranks with the selected maximizer.
#[derive(Debug, Clone)]
pub struct ErankReport {
    pub entries: Vec<ErankEntry>,
    pub t_star: f64,
}

/// Evaluate the erank over a timestep grid and select the argmax.
///
/// Ties break toward the smaller timestep. A degenerate feature matrix is
/// reported with the offending timestep attached.
pub fn select_timestep<F: FeatureSource + Sync>(
    source: &F,
    images: &[Array3<f32>],
    grid: &[f64],
    sched: &NoiseSchedule,
    pooling: Pooling,
    seed: u64,
    retain_spectra: bool,
) -> Result<ErankReport> {
    if grid.is_empty() {
        return Err(Error::Argument("empty timestep grid".into()));
    }
    for &t in grid {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::Argument(format!("grid timestep {t} outside [0, 1]")));
        }
    }
    let mut entries = Vec::with_capacity(grid.len());
    for &t in grid {
        let fm = collect_features(source, images, t, sched, pooling, seed)?;
        let svals = singular_values(&fm.data)?;
        let erank = erank_from_spectrum(svals.as_slice().unwrap())
            .map_err(|e| Error::Degenerate(format!("at t = {t}: {e}")))?;
        entries.push(ErankEntry {
            t,
            erank,
            spectrum: retain_spectra.then(|| svals.to_vec()),
        });
    }
    let mut best = 0usize;
    for (i, e) in entries.iter().enumerate() {
        // strictly-greater keeps the smaller t on ties
        if e.erank > entries[best].erank {
            best = i;
        }
    }
    Ok(ErankReport {
        t_star: entries[best].t,
        entries,
    })
}

/// Serialize a report in the line-oriented `erank-report v1` format.
pub fn write_report(report: &ErankReport) -> String {
    let mut out = String::from("erank-report v1\n");
    for e in &report.entries {
        out.push_str(&format!("t {} erank {}\n", e.t, e.erank));
    }
    out.push_str(&format!("t_star {}\n", report.t_star));
    out
}

/// Parse the `erank-report v1` text format.
pub fn parse_report(text: &str) -> Result<ErankReport> {
    let mut lines = text.lines();
    match lines.next() {
        Some("erank-report v1") => {}
        _ => return Err(Error::Format("missing `erank-report v1` header".into())),
    }
    let mut entries = Vec::new();
    let mut t_star: Option<f64> = None;
    for line in lines {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        match fields.as_slice() {
            ["t", tv, "erank", ev] => {
                if t_star.is_some() {
                    return Err(Error::Format("entry after t_star line".into()));
                }
                let t: f64 = tv
                    .parse()
                    .map_err(|_| Error::Format(format!("bad t value `{tv}`")))?;
                let erank: f64 = ev
                    .parse()
                    .map_err(|_| Error::Format(format!("bad erank value `{ev}`")))?;
                if !t.is_finite() || !erank.is_finite() {
                    return Err(Error::Format("non-finite report values".into()));
                }
                entries.push(ErankEntry {
                    t,
                    erank,
                    spectrum: None,
                });
            }
            ["t_star", tv] => {
                if t_star.is_some() {
                    return Err(Error::Format("duplicate t_star line".into()));
                }
                let t: f64 = tv
                    .parse()
                    .map_err(|_| Error::Format(format!("bad t_star value `{tv}`")))?;
                if !t.is_finite() {
                    return Err(Error::Format("non-finite t_star".into()));
                }
                t_star = Some(t);
            }
            _ => return Err(Error::Format(format!("unrecognized report line `{line}`"))),
        }
    }
    let t_star = t_star.ok_or_else(|| Error::Format("missing t_star line".into()))?;
    if entries.is_empty() {
        return Err(Error::Format("report has no grid entries".into()));
    }
    if !entries.iter().any(|e| e.t == t_star) {
        return Err(Error::Format("t_star is not on the report grid".into()));
    }
    Ok(ErankReport { entries, t_star })
}

/// Image-mean rows over a raw token grid (helper shared with the CLI).
pub fn pool_tokens(feats: &Array4<f32>, pooling: Pooling) -> Array2<f64> {
    let (b, h, w, d) = feats.dim();
    match pooling {
        Pooling::ImageMean => {
            let mut out = Array2::<f64>::zeros((b, d));
            for i in 0..b {
                for y in 0..h {
                    for x in 0..w {
                        for k in 0..d {
                            out[[i, k]] += feats[[i, y, x, k]] as f64;
                        }
                    }
                }
            }
            out / (h * w) as f64
        }
        Pooling::Token => {
            let mut out = Array2::<f64>::zeros((b * h * w, d));
            let mut row = 0;
            for i in 0..b {
                for y in 0..h {
                    for x in 0..w {
                        for k in 0..d {
                            out[[row, k]] = feats[[i, y, x, k]] as f64;
                        }
                        row += 1;
                    }
                }
            }
            out
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::{make_schedule, ScheduleKind};
    use ndarray::{arr2, Array2, Axis};
    use rand::Rng;

    fn fm(data: Array2<f64>) -> FeatureMatrix {
        FeatureMatrix::new(data, Pooling::ImageMean, 0.5).unwrap()
    }

    #[test]
    fn identity_has_full_erank() {
        let e = effective_rank(&fm(Array2::eye(4))).unwrap();
        assert!((e - 4.0).abs() < 1e-12);
    }

    #[test]
    fn rank_one_has_erank_one() {
        let u = [1.0, -2.0, 0.5];
        let v = [3.0, 1.0];
        let mut m = Array2::<f64>::zeros((3, 2));
        for i in 0..3 {
            for j in 0..2 {
                m[[i, j]] = u[i] * v[j];
            }
        }
        let e = effective_rank(&fm(m)).unwrap();
        assert!((e - 1.0).abs() < 1e-9, "erank = {e}");
    }

    #[test]
    fn known_spectrum_value() {
        // spectrum (3, 1): p = (0.75, 0.25), erank = exp(0.562335...) ~ 1.75477
        let e = erank_from_spectrum(&[3.0, 1.0]).unwrap();
        let oracle = (-(0.75f64 * 0.75f64.ln() + 0.25 * 0.25f64.ln())).exp();
        assert!((e - oracle).abs() < 1e-12);
        assert!((e - 1.75477).abs() < 1e-4, "e = {e}");
    }

    #[test]
    fn zero_matrix_is_degenerate() {
        let m = Array2::<f64>::zeros((3, 3));
        assert!(matches!(
            effective_rank_of(&m),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn scale_invariance_is_exact() {
        let m = arr2(&[[1.0, 2.0, 0.0], [0.5, -1.0, 3.0], [2.0, 2.0, 2.0]]);
        let base = effective_rank_of(&m).unwrap();
        for alpha in [0.001, 0.5, 3.0, 1e6] {
            let scaled = effective_rank_of(&(m.clone() * alpha)).unwrap();
            assert!((scaled - base).abs() < 1e-12);
        }
    }

    #[test]
    fn duplicated_rows_preserve_erank() {
        let m = arr2(&[[1.0, 2.0, 0.0], [0.5, -1.0, 3.0]]);
        let doubled = ndarray::concatenate(Axis(0), &[m.view(), m.view()]).unwrap();
        let a = effective_rank_of(&m).unwrap();
        let b = effective_rank_of(&doubled).unwrap();
        assert!((a - b).abs() < 1e-6);
    }

    #[test]
    fn report_round_trip() {
        let report = ErankReport {
            entries: vec![
                ErankEntry { t: 0.0, erank: 1.5, spectrum: None },
                ErankEntry { t: 0.5, erank: 7.25, spectrum: None },
                ErankEntry { t: 1.0, erank: 3.0, spectrum: None },
            ],
            t_star: 0.5,
        };
        let text = write_report(&report);
        assert!(text.starts_with("erank-report v1\n"));
        let parsed = parse_report(&text).unwrap();
        assert_eq!(parsed.t_star, 0.5);
        assert_eq!(parsed.entries.len(), 3);
        assert_eq!(parsed.entries[1].erank, 7.25);
    }

    #[test]
    fn report_parse_rejects_garbage() {
        assert!(parse_report("").is_err());
        assert!(parse_report("erank-report v2\nt_star 0.5\n").is_err());
        assert!(parse_report("erank-report v1\nt 0.5 erank nope\nt_star 0.5\n").is_err());
        assert!(parse_report("erank-report v1\nt 0.5 erank 2.0\n").is_err());
        // t_star off the grid
        assert!(parse_report("erank-report v1\nt 0.5 erank 2.0\nt_star 0.25\n").is_err());
    }

    #[test]
    fn collection_shapes_for_both_poolings() {
        let cfg = crate::model::UDiTConfig {
            in_channels: 3,
            down_factor: 4,
            stem_channels: vec![4, 8],
            trunk_depth: 2,
            trunk_width: 16,
            heads: 2,
            time_embed_dim: 8,
            feature_tap_layer: 1,
            head_zero_init: true,
        };
        let model = crate::model::build_model::<f32>(&cfg, 3).unwrap();
        let sched = make_schedule(ScheduleKind::LinearInterp);
        let images: Vec<Array3<f32>> = (0..2)
            .map(|i| Array3::from_elem((3, 16, 16), i as f32 * 0.2 - 0.1))
            .collect();
        // image-mean: one row per image
        let fm = collect_features(&model, &images, 0.3, &sched, Pooling::ImageMean, 0).unwrap();
        assert_eq!(fm.data.dim(), (2, 16));
        // token pooling: one row per token (2 images x 4x4 tokens)
        let fm = collect_features(&model, &images, 0.3, &sched, Pooling::Token, 0).unwrap();
        assert_eq!(fm.data.dim(), (2 * 4 * 4, 16));
        // same seed twice: bitwise identical
        let again = collect_features(&model, &images, 0.3, &sched, Pooling::Token, 0).unwrap();
        assert_eq!(fm.data, again.data);
        // empty set is an argument error
        assert!(matches!(
            collect_features(&model, &[], 0.3, &sched, Pooling::Token, 0),
            Err(Error::Argument(_))
        ));
    }

    /// Stub source: full-rank Gaussian features at t = 0.5, rank-1 elsewhere.
    struct RankStub {
        dim: usize,
    }

    impl FeatureSource for RankStub {
        fn feature_dim(&self) -> usize {
            self.dim
        }
        fn downsample_factor(&self) -> usize {
            1
        }
        fn extract(&self, xt: &Array4<f32>, t: f64) -> Result<Array4<f32>> {
            let b = xt.dim().0;
            let mut out = Array4::<f32>::zeros((b, 1, 1, self.dim));
            for i in 0..b {
                // hash the image content so rows differ per image
                let key = xt
                    .index_axis(Axis(0), i)
                    .iter()
                    .fold(0u64, |acc, v| acc.wrapping_mul(31).wrapping_add(v.to_bits() as u64));
                let mut rng = crate::rng::derive(key, Stream::Noise, 0);
                if (t - 0.5).abs() < 1e-9 {
                    for k in 0..self.dim {
                        out[[i, 0, 0, k]] = rng.sample::<f64, _>(rand_distr::StandardNormal) as f32;
                    }
                } else {
                    let scale: f64 = rng.random::<f64>() + 0.5;
                    for k in 0..self.dim {
                        out[[i, 0, 0, k]] = (scale * (k as f64 + 1.0)) as f32;
                    }
                }
            }
            Ok(out)
        }
    }

    #[test]
    fn stub_model_selects_half() {
        let sched = make_schedule(ScheduleKind::LinearInterp);
        let images: Vec<Array3<f32>> = (0..24)
            .map(|i| {
                let mut rng = crate::rng::derive(100 + i, Stream::Noise, 0);
                let mut img = Array3::<f32>::zeros((1, 2, 2));
                for v in img.iter_mut() {
                    *v = rng.random::<f32>() * 2.0 - 1.0;
                }
                img
            })
            .collect();
        let grid: Vec<f64> = (0..=10).map(|i| i as f64 / 10.0).collect();
        let stub = RankStub { dim: 8 };
        let report =
            select_timestep(&stub, &images, &grid, &sched, Pooling::ImageMean, 0, false).unwrap();
        assert_eq!(report.t_star, 0.5);
        // repeated call, same seed: identical
        let again =
            select_timestep(&stub, &images, &grid, &sched, Pooling::ImageMean, 0, false).unwrap();
        assert_eq!(report.t_star, again.t_star);
        for (a, b) in report.entries.iter().zip(again.entries.iter()) {
            assert_eq!(a.erank, b.erank);
        }
    }

    #[test]
    fn one_point_grid_is_its_own_argmax() {
        let sched = make_schedule(ScheduleKind::LinearInterp);
        let images: Vec<Array3<f32>> = (0..4)
            .map(|i| Array3::from_elem((1, 2, 2), i as f32 / 4.0))
            .collect();
        let stub = RankStub { dim: 4 };
        let report =
            select_timestep(&stub, &images, &[0.7], &sched, Pooling::ImageMean, 1, false).unwrap();
        assert_eq!(report.t_star, 0.7);
    }
}
