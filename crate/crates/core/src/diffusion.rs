//! Noise schedule, epsilon-prediction objective, DDIM sampling and
//! classifier-free guidance.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::model::{Architecture, Model};
use crate::params::ParamStore;
use crate::tensor::{Element, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    pub betas: Vec<f64>,
    /// Cumulative products of `1 − beta`, computed in fp64.
    pub alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    pub fn alpha_bars_as<T: Element>(&self) -> Vec<T> {
        self.alpha_bars.iter().map(|&a| T::from_f64(a)).collect()
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t >= self.steps() {
            return Err(Error::Range(format!("timestep {t} not in [0, {})", self.steps())));
        }
        Ok(())
    }
}

/// Linear beta ramp from `beta_start` to `beta_end` over `steps` steps.
pub fn make_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(Error::config("timesteps", "must be ≥ 1"));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::config(
            "beta_start",
            format!("need 0 < beta_start ≤ beta_end < 1, got {beta_start} and {beta_end}"),
        ));
    }
    let betas: Vec<f64> = (0..steps)
        .map(|i| {
            if steps == 1 {
                beta_start
            } else {
                beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
            }
        })
        .collect();
    let mut acc = 1.0;
    let alpha_bars = betas
        .iter()
        .map(|b| {
            acc *= 1.0 - b;
            acc
        })
        .collect();
    Ok(NoiseSchedule { betas, alpha_bars })
}

/// `x_t = √ᾱ_t·x0 + √(1−ᾱ_t)·eps`, with one timestep per sample.
pub fn q_sample<T: Element>(x0: &Tensor<T>, t: &[usize], eps: &Tensor<T>, schedule: &NoiseSchedule) -> Result<Tensor<T>> {
    if x0.shape() != eps.shape() {
        return Err(Error::shape(format!("x0 {:?} and noise {:?} differ", x0.shape(), eps.shape())));
    }
    let b = x0.shape().first().copied().unwrap_or(0);
    if t.len() != b {
        return Err(Error::shape(format!("{} timesteps for a batch of {b}", t.len())));
    }
    let per = x0.numel() / b.max(1);
    let mut out = Vec::with_capacity(x0.numel());
    for (i, &ti) in t.iter().enumerate() {
        schedule.check_t(ti)?;
        let ab = schedule.alpha_bar(ti);
        let (a, s) = (T::from_f64(ab.sqrt()), T::from_f64((1.0 - ab).sqrt()));
        let xs = &x0.data()[i * per..(i + 1) * per];
        let es = &eps.data()[i * per..(i + 1) * per];
        out.extend(xs.iter().zip(es).map(|(&x, &e)| a * x + s * e));
    }
    Tensor::new(x0.shape().to_vec(), out)
}

/// Anything that predicts noise from a noisy batch.
pub trait Denoiser<T: Element> {
    fn predict_eps(&self, x_t: &Tensor<T>, labels: &[usize], timesteps: &[usize]) -> Result<Tensor<T>>;
}

impl<T: Element> Denoiser<T> for Model<T> {
    fn predict_eps(&self, x_t: &Tensor<T>, labels: &[usize], timesteps: &[usize]) -> Result<Tensor<T>> {
        self.predict(x_t, labels, timesteps)
    }
}

/// One noised training batch.
#[derive(Clone, Debug)]
pub struct NoisedBatch<T> {
    pub x_t: Tensor<T>,
    pub eps: Tensor<T>,
    pub timesteps: Vec<usize>,
    pub labels: Vec<usize>,
}

/// Draws `t ~ U[0, T)`, `eps ~ N(0, I)` and replaces each label by
/// `null_class` with probability `p_null`.
pub fn noise_batch<T: Element, R: Rng + ?Sized>(
    x0: &Tensor<T>,
    labels: &[usize],
    schedule: &NoiseSchedule,
    p_null: f64,
    null_class: usize,
    rng: &mut R,
) -> Result<NoisedBatch<T>> {
    if !(0.0..1.0).contains(&p_null) {
        return Err(Error::config("p_null", format!("{p_null} not in [0, 1)")));
    }
    let b = labels.len();
    let timesteps: Vec<usize> = (0..b).map(|_| rng.gen_range(0..schedule.steps())).collect();
    let eps = Tensor::from_fn(x0.shape(), |_| T::from_f64(rng.sample::<f64, _>(StandardNormal)));
    let labels = labels
        .iter()
        .map(|&l| if p_null > 0.0 && rng.gen::<f64>() < p_null { null_class } else { l })
        .collect();
    let x_t = q_sample(x0, &timesteps, &eps, schedule)?;
    Ok(NoisedBatch {
        x_t,
        eps,
        timesteps,
        labels,
    })
}

/// `mean‖model(x_t) − eps‖²` recorded on `tape`.
pub fn loss_on_tape<T: Element>(
    arch: &Architecture,
    tape: &mut Tape<T>,
    params: &ParamStore<T>,
    batch: &NoisedBatch<T>,
) -> Result<Var> {
    let x = tape.constant(batch.x_t.clone());
    let eps = tape.constant(batch.eps.clone());
    let pred = arch.forward(tape, params, x, &batch.labels, &batch.timesteps)?;
    tape.mse(pred, eps)
}

pub fn mse<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    let d = a.sub(b)?;
    Ok(d.data().iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>() / d.numel() as f64)
}

/// Denoising loss of any [`Denoiser`] on one freshly drawn batch.
pub fn denoise_loss<T: Element, D: Denoiser<T>, R: Rng + ?Sized>(
    model: &D,
    x0: &Tensor<T>,
    labels: &[usize],
    schedule: &NoiseSchedule,
    p_null: f64,
    null_class: usize,
    rng: &mut R,
) -> Result<f64> {
    let batch = noise_batch(x0, labels, schedule, p_null, null_class, rng)?;
    let pred = model.predict_eps(&batch.x_t, &batch.labels, &batch.timesteps)?;
    mse(&pred, &batch.eps)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GuidanceSpec {
    pub scale: f64,
    pub null_class: usize,
    /// Clamp each predicted clean image to `±clip` before stepping.
    pub clip_x0: Option<f64>,
}

/// `eps_uncond + s·(eps_cond − eps_uncond)`.
pub fn cfg_combine<T: Element>(eps_cond: &Tensor<T>, eps_uncond: &Tensor<T>, s: f64) -> Result<Tensor<T>> {
    let s = T::from_f64(s);
    eps_cond.zip_map(eps_uncond, |c, u| u + s * (c - u))
}

/// Evenly spaced timesteps `T−T/n, …, 0` (descending).
pub fn ddim_timesteps(total: usize, n_steps: usize) -> Result<Vec<usize>> {
    if n_steps == 0 || n_steps > total {
        return Err(Error::config("steps", format!("{n_steps} sampling steps for a {total}-step schedule")));
    }
    Ok((0..n_steps).rev().map(|i| i * total / n_steps).collect())
}

/// One deterministic DDIM update from `abar_t` to `abar_prev`.
pub fn ddim_step<T: Element>(x_t: &Tensor<T>, eps: &Tensor<T>, abar_t: f64, abar_prev: f64) -> Result<Tensor<T>> {
    ddim_step_clipped(x_t, eps, abar_t, abar_prev, None)
}

/// [`ddim_step`] with the predicted clean image clamped to `±clip`; the noise
/// estimate is then re-derived from the clamped prediction.
pub fn ddim_step_clipped<T: Element>(
    x_t: &Tensor<T>,
    eps: &Tensor<T>,
    abar_t: f64,
    abar_prev: f64,
    clip: Option<f64>,
) -> Result<Tensor<T>> {
    let (st, nt) = (abar_t.sqrt(), (1.0 - abar_t).sqrt());
    let (sp, np) = (abar_prev.sqrt(), (1.0 - abar_prev).sqrt());
    x_t.zip_map(eps, |x, e| {
        let (x, mut e) = (x.as_f64(), e.as_f64());
        let mut x0 = (x - nt * e) / st;
        if let Some(c) = clip {
            x0 = x0.clamp(-c, c);
            if nt > 0.0 {
                e = (x - st * x0) / nt;
            }
        }
        T::from_f64(sp * x0 + np * e)
    })
}

/// Guided noise prediction; a single conditional pass when `s = 1`.
pub fn guided_eps<T: Element, D: Denoiser<T>>(
    model: &D,
    x: &Tensor<T>,
    labels: &[usize],
    t: usize,
    guidance: GuidanceSpec,
) -> Result<Tensor<T>> {
    let n = labels.len();
    if guidance.scale == 1.0 {
        return model.predict_eps(x, labels, &vec![t; n]);
    }
    let both = Tensor::stack(&[x.clone(), x.clone()])?;
    let mut shape = vec![2 * n];
    shape.extend_from_slice(&x.shape()[1..]);
    let both = both.reshape(&shape)?;
    let mut all_labels = labels.to_vec();
    all_labels.extend(std::iter::repeat(guidance.null_class).take(n));
    let eps = model.predict_eps(&both, &all_labels, &vec![t; 2 * n])?;
    let cond = eps.narrow0(0, n)?;
    let uncond = eps.narrow0(n, n)?;
    cfg_combine(&cond, &uncond, guidance.scale)
}

/// Deterministic (eta = 0) DDIM sampling of one image per label.
pub fn ddim_sample<T: Element, D: Denoiser<T>, R: Rng + ?Sized>(
    model: &D,
    labels: &[usize],
    image_shape: &[usize],
    schedule: &NoiseSchedule,
    n_steps: usize,
    guidance: GuidanceSpec,
    rng: &mut R,
) -> Result<Tensor<T>> {
    if guidance.scale < 0.0 || !guidance.scale.is_finite() {
        return Err(Error::config("guidance", format!("scale {} must be a nonnegative number", guidance.scale)));
    }
    let ts = ddim_timesteps(schedule.steps(), n_steps)?;
    let mut shape = vec![labels.len()];
    shape.extend_from_slice(image_shape);
    let mut x = Tensor::from_fn(&shape, |_| T::from_f64(rng.sample::<f64, _>(StandardNormal)));
    for (i, &t) in ts.iter().enumerate() {
        let eps = guided_eps(model, &x, labels, t, guidance)?;
        let abar_prev = ts.get(i + 1).map_or(1.0, |&p| schedule.alpha_bar(p));
        x = ddim_step_clipped(&x, &eps, schedule.alpha_bar(t), abar_prev, guidance.clip_x0)?;
    }
    if !x.all_finite() {
        return Err(Error::Numeric("sampling produced non-finite values".into()));
    }
    Ok(x)
}
