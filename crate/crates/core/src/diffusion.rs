//! Pure-math layer: forward corruption, regression targets, loss weighting,
//! and their algebraic inverses.
//!
//! Everything here is a pure function of its inputs. Schedule coefficients
//! are evaluated in `f64` and cast to the tensor element type at application,
//! so round-trip identities hold to the same precision for every schedule.

use ndarray::{Array1, Array4};
use rand::Rng;
use rand_chacha::ChaCha12Rng;

use crate::error::{Error, Result};
use crate::nn::Real;

/// Cutoff below which inverting the forward process amplifies prediction
/// error by more than 1000x and is refused.
pub const SINGULARITY_CUTOFF: f64 = 1e-3;

const VP_TRAIN_STEPS: usize = 1000;
const VP_BETA_START: f64 = 1e-4;
const VP_BETA_END: f64 = 0.02;

/// Supported signal/noise coefficient schedules over t in [0, 1].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScheduleKind {
    /// a(t) = 1 - t, b(t) = t.
    LinearInterp,
    /// a(t) = cos(pi t / 2), b(t) = sin(pi t / 2).
    Cosine,
    /// a = sqrt(alpha_bar(t)), b = sqrt(1 - alpha_bar(t)) from the
    /// conventional 1000-step linear-beta ramp.
    VpDdpm,
}

impl ScheduleKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "linear-interp" => Ok(ScheduleKind::LinearInterp),
            "cosine" => Ok(ScheduleKind::Cosine),
            "vp-ddpm" => Ok(ScheduleKind::VpDdpm),
            other => Err(Error::Config(format!("unknown schedule kind `{other}`"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ScheduleKind::LinearInterp => "linear-interp",
            ScheduleKind::Cosine => "cosine",
            ScheduleKind::VpDdpm => "vp-ddpm",
        }
    }
}

/// Coefficient functions a(t), b(t) governing signal-to-noise over [0, 1].
#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    kind: ScheduleKind,
    /// log alpha_bar on a uniform 1001-point grid; only used by vp-ddpm.
    log_alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    /// Max time; the whole crate works in continuous time on [0, T].
    pub const T: f64 = 1.0;

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    /// Signal coefficient a(t).
    pub fn a(&self, t: f64) -> f64 {
        debug_assert!((0.0..=1.0).contains(&t));
        match self.kind {
            ScheduleKind::LinearInterp => 1.0 - t,
            ScheduleKind::Cosine => (std::f64::consts::FRAC_PI_2 * t).cos(),
            ScheduleKind::VpDdpm => (0.5 * self.interp_log_alpha_bar(t)).exp(),
        }
    }

    /// Noise coefficient b(t).
    pub fn b(&self, t: f64) -> f64 {
        debug_assert!((0.0..=1.0).contains(&t));
        match self.kind {
            ScheduleKind::LinearInterp => t,
            ScheduleKind::Cosine => (std::f64::consts::FRAC_PI_2 * t).sin(),
            ScheduleKind::VpDdpm => {
                let ab = self.interp_log_alpha_bar(t).exp();
                (1.0 - ab).max(0.0).sqrt()
            }
        }
    }

    fn interp_log_alpha_bar(&self, t: f64) -> f64 {
        let grid = &self.log_alpha_bar;
        let n = grid.len() - 1;
        let x = t.clamp(0.0, 1.0) * n as f64;
        let i = (x.floor() as usize).min(n - 1);
        let frac = x - i as f64;
        grid[i] * (1.0 - frac) + grid[i + 1] * frac
    }
}

/// Build a schedule of the requested kind.
pub fn make_schedule(kind: ScheduleKind) -> NoiseSchedule {
    let log_alpha_bar = match kind {
        ScheduleKind::VpDdpm => {
            // alpha_bar_0 = 1 (empty product); each grid step consumes one
            // beta from the linear ramp.
            let mut grid = Vec::with_capacity(VP_TRAIN_STEPS + 1);
            let mut acc = 0.0f64;
            grid.push(acc);
            for j in 0..VP_TRAIN_STEPS {
                let frac = j as f64 / (VP_TRAIN_STEPS - 1) as f64;
                let beta = VP_BETA_START + frac * (VP_BETA_END - VP_BETA_START);
                acc += (1.0 - beta).ln();
                grid.push(acc);
            }
            grid
        }
        _ => Vec::new(),
    };
    NoiseSchedule {
        kind,
        log_alpha_bar,
    }
}

/// Parse-and-build convenience used by the CLI.
pub fn make_schedule_named(name: &str) -> Result<NoiseSchedule> {
    Ok(make_schedule(ScheduleKind::parse(name)?))
}

/// Regression-target mode: which combination of data and noise the denoiser
/// regresses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Parameterization {
    /// r = eps: estimate the added noise directly.
    Epsilon,
    /// r = x0: reconstruct the clean data.
    X0,
    /// r = eps - x0.
    Velocity,
}

impl Parameterization {
    /// Target coefficients (c, d) with r = c*x0 + d*eps; constant in t.
    pub fn coefficients(&self, _t: f64) -> (f64, f64) {
        match self {
            Parameterization::Epsilon => (0.0, 1.0),
            Parameterization::X0 => (1.0, 0.0),
            Parameterization::Velocity => (-1.0, 1.0),
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "epsilon" => Ok(Parameterization::Epsilon),
            "x0" => Ok(Parameterization::X0),
            "velocity" => Ok(Parameterization::Velocity),
            other => Err(Error::Config(format!("unknown parameterization `{other}`"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Parameterization::Epsilon => "epsilon",
            Parameterization::X0 => "x0",
            Parameterization::Velocity => "velocity",
        }
    }
}

/// Per-timestep loss weight lambda(t).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossWeighting {
    /// lambda(t) = 1.
    Uniform,
    /// lambda(t) = a(t)^2 / b(t)^2, clamped above zero noise.
    Snr,
}

impl LossWeighting {
    pub fn weight(&self, t: f64, sched: &NoiseSchedule) -> f64 {
        match self {
            LossWeighting::Uniform => 1.0,
            LossWeighting::Snr => {
                let a = sched.a(t);
                let b = sched.b(t).max(1e-4);
                (a * a) / (b * b)
            }
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(LossWeighting::Uniform),
            "snr" => Ok(LossWeighting::Snr),
            other => Err(Error::Config(format!("unknown loss weighting `{other}`"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            LossWeighting::Uniform => "uniform",
            LossWeighting::Snr => "snr",
        }
    }
}

/// One corrupted batch: the clean images, the noise draw, the timesteps, and
/// the mixed result.
#[derive(Debug, Clone)]
pub struct NoisyBatch<T: Real> {
    pub x0: Array4<T>,
    pub eps: Array4<T>,
    pub t: Array1<f64>,
    pub xt: Array4<T>,
}

fn check_same_shape<T: Real>(x0: &Array4<T>, eps: &Array4<T>) -> Result<()> {
    if x0.dim() != eps.dim() {
        return Err(Error::Shape(format!(
            "x0 shape {:?} != eps shape {:?}",
            x0.dim(),
            eps.dim()
        )));
    }
    Ok(())
}

fn check_t_range(t: &Array1<f64>) -> Result<()> {
    if let Some(bad) = t.iter().find(|v| !(0.0..=1.0).contains(*v) || !v.is_finite()) {
        return Err(Error::Argument(format!("timestep {bad} outside [0, 1]")));
    }
    Ok(())
}

/// Mix clean data and noise: xt[i] = a(t[i]) x0[i] + b(t[i]) eps[i].
pub fn forward_diffuse<T: Real>(
    x0: &Array4<T>,
    eps: &Array4<T>,
    t: &Array1<f64>,
    sched: &NoiseSchedule,
) -> Result<NoisyBatch<T>> {
    check_same_shape(x0, eps)?;
    check_t_range(t)?;
    let batch = x0.dim().0;
    if t.len() != batch {
        return Err(Error::Shape(format!(
            "t has {} entries for batch of {batch}",
            t.len()
        )));
    }
    let mut xt = x0.clone();
    for (i, mut img) in xt.outer_iter_mut().enumerate() {
        let a = T::from_f64(sched.a(t[i]));
        let b = T::from_f64(sched.b(t[i]));
        img.zip_mut_with(&eps.index_axis(ndarray::Axis(0), i), |x, e| {
            *x = a * *x + b * *e;
        });
    }
    Ok(NoisyBatch {
        x0: x0.clone(),
        eps: eps.clone(),
        t: t.clone(),
        xt,
    })
}

/// Regression target r = c(t) x0 + d(t) eps for the chosen parameterization.
pub fn regression_target<T: Real>(
    x0: &Array4<T>,
    eps: &Array4<T>,
    t: &Array1<f64>,
    param: Parameterization,
) -> Result<Array4<T>> {
    check_same_shape(x0, eps)?;
    let mut r = x0.clone();
    for (i, mut img) in r.outer_iter_mut().enumerate() {
        let (c, d) = param.coefficients(t[i]);
        let (c, d) = (T::from_f64(c), T::from_f64(d));
        img.zip_mut_with(&eps.index_axis(ndarray::Axis(0), i), |x, e| {
            *x = c * *x + d * *e;
        });
    }
    Ok(r)
}

/// Invert the forward process given a prediction of the regression target.
///
/// Exact round-trip when `prediction` equals the true target. Refuses
/// timesteps where the inversion divides by less than [`SINGULARITY_CUTOFF`].
pub fn recover_x0<T: Real>(
    xt: &Array4<T>,
    prediction: &Array4<T>,
    t: &Array1<f64>,
    sched: &NoiseSchedule,
    param: Parameterization,
) -> Result<Array4<T>> {
    check_same_shape(xt, prediction)?;
    check_t_range(t)?;
    let mut out = xt.clone();
    for (i, mut img) in out.outer_iter_mut().enumerate() {
        let a = sched.a(t[i]);
        let b = sched.b(t[i]);
        let pred = prediction.index_axis(ndarray::Axis(0), i);
        match param {
            Parameterization::X0 => {
                img.assign(&pred);
            }
            Parameterization::Epsilon => {
                if a < SINGULARITY_CUTOFF {
                    return Err(Error::Singularity(format!(
                        "a(t) = {a:.3e} at t = {} is below {SINGULARITY_CUTOFF}; \
                         epsilon-mode recovery is undefined near pure noise",
                        t[i]
                    )));
                }
                let (a, b) = (T::from_f64(a), T::from_f64(b));
                img.zip_mut_with(&pred, |x, p| *x = (*x - b * *p) / a);
            }
            Parameterization::Velocity => {
                let denom = a + b;
                if denom < SINGULARITY_CUTOFF {
                    return Err(Error::Singularity(format!(
                        "a(t)+b(t) = {denom:.3e} at t = {} is below {SINGULARITY_CUTOFF}",
                        t[i]
                    )));
                }
                let (b, denom) = (T::from_f64(b), T::from_f64(denom));
                img.zip_mut_with(&pred, |x, p| *x = (*x - b * *p) / denom);
            }
        }
    }
    Ok(out)
}

/// Batch-mean of lambda(t_i) * MSE(prediction_i, target_i).
pub fn denoising_loss<T: Real>(
    prediction: &Array4<T>,
    target: &Array4<T>,
    t: &Array1<f64>,
    weighting: LossWeighting,
    sched: &NoiseSchedule,
) -> Result<f64> {
    check_same_shape(prediction, target)?;
    let (batch, c, h, w) = prediction.dim();
    if batch == 0 {
        return Err(Error::Argument("empty batch".into()));
    }
    let numel = (c * h * w) as f64;
    let mut total = 0.0f64;
    for i in 0..batch {
        let p = prediction.index_axis(ndarray::Axis(0), i);
        let r = target.index_axis(ndarray::Axis(0), i);
        let mut se = 0.0f64;
        for (pv, rv) in p.iter().zip(r.iter()) {
            let d = pv.as_f64() - rv.as_f64();
            se += d * d;
        }
        total += weighting.weight(t[i], sched) * se / numel;
    }
    let loss = total / batch as f64;
    if !loss.is_finite() {
        return Err(Error::Numeric(format!("loss is not finite ({loss})")));
    }
    Ok(loss)
}

/// i.i.d. uniform timesteps on [0, 1); deterministic given the generator.
pub fn sample_timesteps(batch_size: usize, rng: &mut ChaCha12Rng) -> Array1<f64> {
    Array1::from_iter((0..batch_size).map(|_| rng.random::<f64>()))
}

/// Standard-normal noise batch with the given shape.
pub fn sample_noise<T: Real>(shape: (usize, usize, usize, usize), rng: &mut ChaCha12Rng) -> Array4<T> {
    let mut out = Array4::zeros(shape);
    for v in out.iter_mut() {
        *v = T::from_f64(rng.sample::<f64, _>(rand_distr::StandardNormal));
    }
    out
}
