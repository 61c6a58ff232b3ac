//! Frozen-feature evaluation: single-conv segmentation probe, sliding-window
//! inference, mIoU scoring, and PCA feature visualization.

use ndarray::{s, Array1, Array2, Array3};
use rand::Rng;

use crate::diffusion::{forward_diffuse, sample_noise, NoiseSchedule};
use crate::erank::FeatureSource;
use crate::error::{Error, Result};
use crate::linalg::sym_eigh_jacobi;
use crate::rng::{derive, Stream};

/// Class index marking pixels excluded from loss and scoring.
pub const IGNORE_INDEX: u8 = 255;

/// One segmentation sample: RGB image in [-1, 1] and a class-index mask.
#[derive(Debug, Clone)]
pub struct SegSample {
    pub image: Array3<f32>,
    pub label: Array2<u8>,
}

impl SegSample {
    pub fn validate(&self, classes: usize) -> Result<()> {
        let (_, h, w) = self.image.dim();
        if self.label.dim() != (h, w) {
            return Err(Error::Shape(format!(
                "label {:?} does not match image {h}x{w}",
                self.label.dim()
            )));
        }
        if let Some(bad) = self
            .label
            .iter()
            .find(|&&v| v != IGNORE_INDEX && v as usize >= classes)
        {
            return Err(Error::Label(format!(
                "class index {bad} out of range for {classes} classes"
            )));
        }
        Ok(())
    }
}

/// The probe: exactly one learned 1x1 projection from feature dimension D to
/// K class logits, plus (non-learned) bilinear upsampling to label resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeHead {
    pub weight: Array2<f32>, // (D, K)
    pub bias: Array1<f32>,   // (K)
}

impl ProbeHead {
    pub fn init(feature_dim: usize, classes: usize, seed: u64) -> Self {
        let mut rng = derive(seed, Stream::Probe, 0);
        let bound = 1.0 / (feature_dim as f64).sqrt();
        let mut weight = Array2::zeros((feature_dim, classes));
        for v in weight.iter_mut() {
            *v = rng.random_range(-bound..bound) as f32;
        }
        ProbeHead {
            weight,
            bias: Array1::zeros(classes),
        }
    }

    pub fn classes(&self) -> usize {
        self.bias.len()
    }

    /// Token logits for a (h, w, D) feature grid -> (h, w, K).
    pub fn logits(&self, feats: &Array3<f32>) -> Array3<f32> {
        let (h, w, d) = feats.dim();
        let flat = feats
            .view()
            .into_shape_with_order((h * w, d))
            .expect("feature reshape");
        let mut out = flat.dot(&self.weight);
        out += &self.bias;
        out.into_shape_with_order((h, w, self.classes()))
            .expect("logit reshape")
    }
}

/// Bilinear upsampling by an integer factor (align_corners = false).
pub fn upsample_bilinear(x: &Array3<f32>, factor: usize) -> Array3<f32> {
    if factor == 1 {
        return x.clone();
    }
    let (h, w, c) = x.dim();
    let (oh, ow) = (h * factor, w * factor);
    let mut out = Array3::<f32>::zeros((oh, ow, c));
    for oy in 0..oh {
        let sy = (oy as f64 + 0.5) / factor as f64 - 0.5;
        let y0 = sy.floor();
        let fy = (sy - y0) as f32;
        let y0i = (y0 as isize).clamp(0, h as isize - 1) as usize;
        let y1i = (y0 as isize + 1).clamp(0, h as isize - 1) as usize;
        for ox in 0..ow {
            let sx = (ox as f64 + 0.5) / factor as f64 - 0.5;
            let x0 = sx.floor();
            let fx = (sx - x0) as f32;
            let x0i = (x0 as isize).clamp(0, w as isize - 1) as usize;
            let x1i = (x0 as isize + 1).clamp(0, w as isize - 1) as usize;
            for ci in 0..c {
                let v00 = x[[y0i, x0i, ci]];
                let v01 = x[[y0i, x1i, ci]];
                let v10 = x[[y1i, x0i, ci]];
                let v11 = x[[y1i, x1i, ci]];
                out[[oy, ox, ci]] = v00 * (1.0 - fy) * (1.0 - fx)
                    + v01 * (1.0 - fy) * fx
                    + v10 * fy * (1.0 - fx)
                    + v11 * fy * fx;
            }
        }
    }
    out
}

/// Adjoint of [`upsample_bilinear`]: scatter output gradients back onto the
/// token grid.
pub fn upsample_bilinear_backward(dy: &Array3<f32>, h: usize, w: usize, factor: usize) -> Array3<f32> {
    if factor == 1 {
        return dy.clone();
    }
    let (oh, ow, c) = dy.dim();
    let mut dx = Array3::<f32>::zeros((h, w, c));
    for oy in 0..oh {
        let sy = (oy as f64 + 0.5) / factor as f64 - 0.5;
        let y0 = sy.floor();
        let fy = (sy - y0) as f32;
        let y0i = (y0 as isize).clamp(0, h as isize - 1) as usize;
        let y1i = (y0 as isize + 1).clamp(0, h as isize - 1) as usize;
        for ox in 0..ow {
            let sx = (ox as f64 + 0.5) / factor as f64 - 0.5;
            let x0 = sx.floor();
            let fx = (sx - x0) as f32;
            let x0i = (x0 as isize).clamp(0, w as isize - 1) as usize;
            let x1i = (x0 as isize + 1).clamp(0, w as isize - 1) as usize;
            for ci in 0..c {
                let g = dy[[oy, ox, ci]];
                dx[[y0i, x0i, ci]] += g * (1.0 - fy) * (1.0 - fx);
                dx[[y0i, x1i, ci]] += g * (1.0 - fy) * fx;
                dx[[y1i, x0i, ci]] += g * fy * (1.0 - fx);
                dx[[y1i, x1i, ci]] += g * fy * fx;
            }
        }
    }
    dx
}

/// Noise an image at timestep t with the per-index seeded draw shared by the
/// feature-collection protocol, then extract its token features.
fn noisy_features<F: FeatureSource>(
    source: &F,
    image: &Array3<f32>,
    t: f64,
    sched: &NoiseSchedule,
    seed: u64,
    index: u64,
) -> Result<Array3<f32>> {
    let (c, h, w) = image.dim();
    let x0 = image
        .to_owned()
        .into_shape_with_order((1, c, h, w))
        .expect("image reshape");
    let mut rng = derive(seed, Stream::Noise, index);
    let eps = sample_noise::<f32>((1, c, h, w), &mut rng);
    let nb = forward_diffuse(&x0, &eps, &ndarray::arr1(&[t]), sched)?;
    let feats = source.extract(&nb.xt, t)?;
    let (_, fh, fw, fd) = feats.dim();
    Ok(feats
        .into_shape_with_order((fh, fw, fd))
        .expect("single-image features"))
}

/// Pixel-level softmax cross-entropy gradient, averaged over valid pixels.
/// Returns `None` when every pixel is ignored.
fn softmax_ce_grad(
    logits_px: &Array3<f32>,
    label: &Array2<u8>,
    classes: usize,
) -> Result<Option<Array3<f32>>> {
    let (ph, pw, _) = logits_px.dim();
    if label.dim() != (ph, pw) {
        return Err(Error::Shape(format!(
            "labels {:?} vs upsampled logits {ph}x{pw}",
            label.dim()
        )));
    }
    let valid = label.iter().filter(|&&v| v != IGNORE_INDEX).count();
    if valid == 0 {
        return Ok(None);
    }
    let inv = 1.0 / valid as f32;
    let mut dlogits_px = Array3::<f32>::zeros((ph, pw, classes));
    for y in 0..ph {
        for x in 0..pw {
            let lab = label[[y, x]];
            if lab == IGNORE_INDEX {
                continue;
            }
            let row = logits_px.slice(s![y, x, ..]);
            let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            let mut denom = 0.0f32;
            for &v in row.iter() {
                denom += (v - max).exp();
            }
            for k in 0..classes {
                let p = (row[k] - max).exp() / denom;
                let target = if k == lab as usize { 1.0 } else { 0.0 };
                dlogits_px[[y, x, k]] = (p - target) * inv;
            }
        }
    }
    Ok(Some(dlogits_px))
}

/// Plain Adam over the two head tensors.
struct HeadAdam {
    mw: Array2<f64>,
    vw: Array2<f64>,
    mb: Array1<f64>,
    vb: Array1<f64>,
    step: u64,
    lr: f64,
}

impl HeadAdam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(head: &ProbeHead, lr: f64) -> Self {
        HeadAdam {
            mw: Array2::zeros(head.weight.dim()),
            vw: Array2::zeros(head.weight.dim()),
            mb: Array1::zeros(head.classes()),
            vb: Array1::zeros(head.classes()),
            step: 0,
            lr,
        }
    }

    fn update(&mut self, head: &mut ProbeHead, dw: &Array2<f32>, db: &Array1<f32>) {
        self.step += 1;
        let bias1 = 1.0 - Self::B1.powi(self.step as i32);
        let bias2 = 1.0 - Self::B2.powi(self.step as i32);
        let apply = |w: &mut f32, m: &mut f64, v: &mut f64, g: f32| {
            let g = g as f64;
            *m = Self::B1 * *m + (1.0 - Self::B1) * g;
            *v = Self::B2 * *v + (1.0 - Self::B2) * g * g;
            *w -= (self.lr * (*m / bias1) / ((*v / bias2).sqrt() + Self::EPS)) as f32;
        };
        for ((w, m), (v, g)) in head
            .weight
            .iter_mut()
            .zip(self.mw.iter_mut())
            .zip(self.vw.iter_mut().zip(dw.iter()))
        {
            apply(w, m, v, *g);
        }
        for ((w, m), (v, g)) in head
            .bias
            .iter_mut()
            .zip(self.mb.iter_mut())
            .zip(self.vb.iter_mut().zip(db.iter()))
        {
            apply(w, m, v, *g);
        }
    }
}

fn validate_probe_inputs(samples: &[SegSample], classes: usize) -> Result<()> {
    if samples.is_empty() {
        return Err(Error::Argument("no probe training samples".into()));
    }
    if classes < 2 {
        return Err(Error::Argument("need at least 2 classes".into()));
    }
    for s in samples {
        s.validate(classes)?;
    }
    Ok(())
}

/// Fit the probe on frozen features. Only the head's weight and bias are
/// updated; the feature source is never mutated (enforced by `&F`).
#[allow(clippy::too_many_arguments)]
pub fn fit_probe<F: FeatureSource>(
    source: &F,
    samples: &[SegSample],
    classes: usize,
    t: f64,
    sched: &NoiseSchedule,
    epochs: usize,
    lr: f64,
    seed: u64,
) -> Result<ProbeHead> {
    validate_probe_inputs(samples, classes)?;
    let factor = source.downsample_factor();
    let d = source.feature_dim();

    // features are frozen: extract once per sample
    let mut feats = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        feats.push(noisy_features(source, &s.image, t, sched, seed, i as u64)?);
    }

    let mut head = ProbeHead::init(d, classes, seed);
    let mut adam = HeadAdam::new(&head, lr);
    for _epoch in 0..epochs {
        for (sample, f) in samples.iter().zip(feats.iter()) {
            let (h, w, _) = f.dim();
            let logits_px = upsample_bilinear(&head.logits(f), factor);
            let Some(dlogits_px) = softmax_ce_grad(&logits_px, &sample.label, classes)? else {
                continue;
            };
            let dlogits_tok = upsample_bilinear_backward(&dlogits_px, h, w, factor);
            let flat_f = f
                .view()
                .into_shape_with_order((h * w, d))
                .expect("feature reshape");
            let flat_d = dlogits_tok
                .view()
                .into_shape_with_order((h * w, classes))
                .expect("grad reshape");
            let dw = flat_f.t().dot(&flat_d);
            let db = flat_d.sum_axis(ndarray::Axis(0));
            adam.update(&mut head, &dw, &db);
        }
    }
    Ok(head)
}

/// Full fine-tuning mode: the probe head and every backbone tensor on the
/// path to the tap are updated jointly. The frozen [`fit_probe`] is the
/// protocol the acceptance checks use; this is the opt-in alternative.
#[allow(clippy::too_many_arguments)]
pub fn finetune_probe(
    model: &mut crate::model::UDiT<f32>,
    samples: &[SegSample],
    classes: usize,
    t: f64,
    sched: &NoiseSchedule,
    epochs: usize,
    lr: f64,
    seed: u64,
) -> Result<ProbeHead> {
    validate_probe_inputs(samples, classes)?;
    let factor = model.config().down_factor;
    let d = model.config().trunk_width;

    // per-sample noise draws fixed across epochs, matching fit_probe
    let mut noisy = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let (c, h, w) = s.image.dim();
        let x0 = s
            .image
            .to_owned()
            .into_shape_with_order((1, c, h, w))
            .expect("image reshape");
        let mut rng = derive(seed, Stream::Noise, i as u64);
        let eps = sample_noise::<f32>((1, c, h, w), &mut rng);
        noisy.push(forward_diffuse(&x0, &eps, &ndarray::arr1(&[t]), sched)?.xt);
    }

    let mut head = ProbeHead::init(d, classes, seed);
    let mut head_adam = HeadAdam::new(&head, lr);
    let mut backbone_opt = crate::train::AdamW::<f32>::new(lr, 0.9, 0.999, 0.0);
    let tv = ndarray::arr1(&[t]);

    for _epoch in 0..epochs {
        for (sample, xt) in samples.iter().zip(noisy.iter()) {
            let (feats, cache) = model.extract_features_train(xt, &tv, None)?;
            let (_, h, w, _) = feats.dim();
            let grid = feats
                .view()
                .into_shape_with_order((h, w, d))
                .expect("single-image features");
            let grid = grid.to_owned();
            let logits_px = upsample_bilinear(&head.logits(&grid), factor);
            let Some(dlogits_px) = softmax_ce_grad(&logits_px, &sample.label, classes)? else {
                continue;
            };
            let dlogits_tok = upsample_bilinear_backward(&dlogits_px, h, w, factor);
            let flat_f = grid
                .view()
                .into_shape_with_order((h * w, d))
                .expect("feature reshape");
            let flat_d = dlogits_tok
                .view()
                .into_shape_with_order((h * w, classes))
                .expect("grad reshape");
            let dw = flat_f.t().dot(&flat_d);
            let db = flat_d.sum_axis(ndarray::Axis(0));
            // gradient into the features, then into the backbone
            let dfeat2 = flat_d.dot(&head.weight.t()); // (h*w, D)
            let dfeat = dfeat2
                .into_shape_with_order((1, h, w, d))
                .expect("feature grad reshape");
            let grads = model.backward_from_features(&cache, &dfeat);
            backbone_opt.update(model, &grads);
            head_adam.update(&mut head, &dw, &db);
        }
    }
    Ok(head)
}

/// Predict a full-image class map with direct (single-window) inference.
pub fn predict_map<F: FeatureSource>(
    source: &F,
    head: &ProbeHead,
    image: &Array3<f32>,
    t: f64,
    sched: &NoiseSchedule,
    seed: u64,
    index: u64,
) -> Result<Array2<u8>> {
    let feats = noisy_features(source, image, t, sched, seed, index)?;
    let logits = upsample_bilinear(&head.logits(&feats), source.downsample_factor());
    Ok(argmax_map(&logits))
}

fn argmax_map(logits: &Array3<f32>) -> Array2<u8> {
    let (h, w, k) = logits.dim();
    Array2::from_shape_fn((h, w), |(y, x)| {
        let mut best = 0usize;
        for c in 1..k {
            if logits[[y, x, c]] > logits[[y, x, best]] {
                best = c;
            }
        }
        best as u8
    })
}

/// Window origins covering `extent` with the given stride; the final window
/// is aligned to the boundary.
fn window_starts(extent: usize, window: usize, stride: usize) -> Vec<usize> {
    let mut starts = Vec::new();
    let mut pos = 0usize;
    loop {
        starts.push(pos.min(extent - window));
        if pos + window >= extent {
            break;
        }
        pos += stride;
    }
    starts.dedup();
    starts
}

/// Sliding-window inference: overlapping windows' class logits are averaged
/// before the argmax. The image is noised once at full resolution, so every
/// window sees a consistent corruption.
#[allow(clippy::too_many_arguments)]
pub fn sliding_window_infer<F: FeatureSource>(
    source: &F,
    head: &ProbeHead,
    image: &Array3<f32>,
    t: f64,
    sched: &NoiseSchedule,
    window: usize,
    stride: usize,
    seed: u64,
    index: u64,
) -> Result<Array2<u8>> {
    let (c, h, w) = image.dim();
    if h < window || w < window {
        return Err(Error::Argument(format!(
            "image {h}x{w} is smaller than the {window}-pixel window; pad the input first"
        )));
    }
    if stride == 0 {
        return Err(Error::Argument("stride must be positive".into()));
    }
    let k = head.classes();
    let factor = source.downsample_factor();
    if !window.is_multiple_of(factor) {
        return Err(Error::Argument(format!(
            "window {window} must be divisible by the feature stride {factor}"
        )));
    }

    let x0 = image
        .to_owned()
        .into_shape_with_order((1, c, h, w))
        .expect("image reshape");
    let mut rng = derive(seed, Stream::Noise, index);
    let eps = sample_noise::<f32>((1, c, h, w), &mut rng);
    let noisy = forward_diffuse(&x0, &eps, &ndarray::arr1(&[t]), sched)?;

    let mut acc = Array3::<f32>::zeros((h, w, k));
    let mut counts = Array2::<f32>::zeros((h, w));
    for &wy in &window_starts(h, window, stride) {
        for &wx in &window_starts(w, window, stride) {
            let crop = noisy
                .xt
                .slice(s![.., .., wy..wy + window, wx..wx + window])
                .to_owned();
            let feats = source.extract(&crop, t)?;
            let (_, fh, fw, fd) = feats.dim();
            let grid = feats
                .into_shape_with_order((fh, fw, fd))
                .expect("window features");
            let logits = upsample_bilinear(&head.logits(&grid), factor);
            for y in 0..window {
                for x in 0..window {
                    for ci in 0..k {
                        acc[[wy + y, wx + x, ci]] += logits[[y, x, ci]];
                    }
                    counts[[wy + y, wx + x]] += 1.0;
                }
            }
        }
    }
    debug_assert!(counts.iter().all(|&c| c >= 1.0), "full coverage");
    for y in 0..h {
        for x in 0..w {
            let n = counts[[y, x]];
            for ci in 0..k {
                acc[[y, x, ci]] /= n;
            }
        }
    }
    Ok(argmax_map(&acc))
}

/// Per-class intersection-over-union plus the mean over present classes.
#[derive(Debug, Clone, PartialEq)]
pub struct IoUResult {
    /// `None` for classes absent from both prediction and label.
    pub per_class: Vec<Option<f64>>,
    pub miou: f64,
}

impl IoUResult {
    /// Line-oriented text report (same style as the erank report).
    pub fn to_text(&self) -> String {
        let mut out = String::from("iou-report v1\n");
        for (c, iou) in self.per_class.iter().enumerate() {
            match iou {
                Some(v) => out.push_str(&format!("class {c} iou {v}\n")),
                None => out.push_str(&format!("class {c} iou absent\n")),
            }
        }
        out.push_str(&format!("miou {}\n", self.miou));
        out
    }
}

/// Dataset-level confusion accumulation: shuffling sample order cannot change
/// the result.
pub fn compute_miou(
    predictions: &[Array2<u8>],
    labels: &[Array2<u8>],
    classes: usize,
) -> Result<IoUResult> {
    if predictions.len() != labels.len() {
        return Err(Error::Argument(format!(
            "{} predictions vs {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    if classes == 0 || classes > IGNORE_INDEX as usize {
        return Err(Error::Argument(format!("bad class count {classes}")));
    }
    let mut confusion = vec![0u64; classes * classes]; // [label][pred]
    for (p, l) in predictions.iter().zip(labels.iter()) {
        if p.dim() != l.dim() {
            return Err(Error::Argument(format!(
                "prediction {:?} vs label {:?}",
                p.dim(),
                l.dim()
            )));
        }
        for (&pv, &lv) in p.iter().zip(l.iter()) {
            if lv == IGNORE_INDEX {
                continue;
            }
            if lv as usize >= classes {
                return Err(Error::Label(format!("label {lv} out of range")));
            }
            if pv as usize >= classes {
                return Err(Error::Argument(format!("prediction {pv} out of range")));
            }
            confusion[lv as usize * classes + pv as usize] += 1;
        }
    }
    let mut per_class = Vec::with_capacity(classes);
    let mut total = 0.0;
    let mut present = 0usize;
    for c in 0..classes {
        let tp = confusion[c * classes + c];
        let row: u64 = (0..classes).map(|p| confusion[c * classes + p]).sum();
        let col: u64 = (0..classes).map(|l| confusion[l * classes + c]).sum();
        let denom = row + col - tp;
        if denom == 0 {
            per_class.push(None);
            continue;
        }
        let iou = tp as f64 / denom as f64;
        per_class.push(Some(iou));
        total += iou;
        present += 1;
    }
    if present == 0 {
        return Err(Error::Argument("no classes present in the data".into()));
    }
    Ok(IoUResult {
        per_class,
        miou: total / present as f64,
    })
}

/// Outcome of [`pca_visualize`].
#[derive(Debug, Clone)]
pub struct PcaImage {
    pub rgb: Array3<u8>, // (h, w, 3)
    /// True when the features had no variance and the defined mid-gray
    /// fallback was emitted.
    pub degenerate: bool,
}

/// Project token features onto their top-3 principal components and map each
/// to an 8-bit channel.
///
/// Sign convention: each component is flipped so its largest-magnitude
/// loading is positive (first index on magnitude ties).
pub fn pca_visualize(features: &Array3<f32>) -> Result<PcaImage> {
    let (h, w, d) = features.dim();
    let n = h * w;
    if n < 3 {
        return Err(Error::Argument(format!(
            "need at least 3 tokens for PCA, got {n}"
        )));
    }
    if features.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite features".into()));
    }
    let mut x = Array2::<f64>::zeros((n, d));
    for y in 0..h {
        for xx in 0..w {
            for k in 0..d {
                x[[y * w + xx, k]] = features[[y, xx, k]] as f64;
            }
        }
    }
    let mean = x.mean_axis(ndarray::Axis(0)).unwrap();
    for mut row in x.outer_iter_mut() {
        row -= &mean;
    }
    let total_var: f64 = x.iter().map(|v| v * v).sum();
    if total_var < 1e-18 {
        return Ok(PcaImage {
            rgb: Array3::from_elem((h, w, 3), 128),
            degenerate: true,
        });
    }
    let cov = x.t().dot(&x);
    let (_vals, vecs) = sym_eigh_jacobi(&cov)?;
    let comps = 3.min(d);
    let mut rgb = Array3::<u8>::from_elem((h, w, 3), 128);
    for comp in 0..comps {
        let mut axis = vecs.column(comp).to_owned();
        // fix the sign: largest-magnitude loading positive
        let mut arg = 0usize;
        for (i, v) in axis.iter().enumerate() {
            if v.abs() > axis[arg].abs() {
                arg = i;
            }
        }
        if axis[arg] < 0.0 {
            axis.mapv_inplace(|v| -v);
        }
        let proj = x.dot(&axis);
        let min = proj.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = proj.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let range = max - min;
        for y in 0..h {
            for xx in 0..w {
                let v = proj[y * w + xx];
                let byte = if range < 1e-12 {
                    128u8
                } else {
                    ((v - min) / range * 255.0).round().clamp(0.0, 255.0) as u8
                };
                rgb[[y, xx, comp]] = byte;
            }
        }
    }
    Ok(PcaImage {
        rgb,
        degenerate: false,
    })
}
