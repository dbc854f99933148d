//! Noise schedules, forward diffusion and posterior statistics.
//!
//! Steps are 1-based: `beta(t)` for `t ∈ [1, T]`, while `alpha_bar(t)` is also
//! defined at `t = 0` where it equals 1.
//!
//! Three families are provided:
//! - linear β interpolation,
//! - cosine-power: `ᾱ_t = f_s(t) / f_s(0)` with
//!   `f_s(t) = cos^s(((t/T + b) / (1 + b)) · π/2)`, β clipped at 0.999,
//! - spoon-cosine (Scos): the cosine-power β early in the chain, spliced onto
//!   the linear β for the tail so the endpoint never spikes.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::f64::consts::FRAC_PI_2;

use num_traits::Float;

use crate::error::{param_err, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const DEFAULT_STEPS: usize = 1000;
pub const DEFAULT_BETA_1: f64 = 1e-4;
pub const DEFAULT_BETA_T: f64 = 0.02;
pub const DEFAULT_OFFSET: f64 = 0.008;
pub const MAX_BETA: f64 = 0.999;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScheduleKind {
    Linear,
    CosinePower,
    Scos,
}

/// Endpoints of a linear β schedule.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LinearBetas {
    pub beta_1: f64,
    pub beta_t: f64,
}

impl Default for LinearBetas {
    fn default() -> Self {
        Self {
            beta_1: DEFAULT_BETA_1,
            beta_t: DEFAULT_BETA_T,
        }
    }
}

impl LinearBetas {
    /// Default endpoints rescaled by `1000 / steps`, so shorter chains destroy
    /// roughly the same amount of signal. Identical to the defaults at T = 1000.
    pub fn scaled_for(steps: usize) -> Self {
        let k = DEFAULT_STEPS as f64 / steps.max(1) as f64;
        Self {
            beta_1: DEFAULT_BETA_1 * k,
            beta_t: (DEFAULT_BETA_T * k).min(MAX_BETA),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    kind: ScheduleKind,
    steps: usize,
    /// `beta[t - 1]` for `t ∈ [1, T]`.
    beta: Vec<f64>,
    /// `alpha_bar[t]` for `t ∈ [0, T]`.
    alpha_bar: Vec<f64>,
    /// `posterior_var[t]` for `t ∈ [0, T]`; index 0 is unused and zero.
    posterior_var: Vec<f64>,
    splice_index: Option<usize>,
    power: Option<f64>,
    offset: Option<f64>,
}

fn linear_betas(steps: usize, lin: LinearBetas) -> Result<Vec<f64>> {
    let LinearBetas { beta_1, beta_t } = lin;
    if steps == 0 {
        return Err(param_err("schedule needs at least one step"));
    }
    if !(beta_1 > 0.0 && beta_1 <= beta_t && beta_t < 1.0) {
        return Err(param_err(format!(
            "linear schedule needs 0 < beta_1 <= beta_T < 1, got {beta_1}, {beta_t}"
        )));
    }
    if steps == 1 {
        return Ok(alloc::vec![beta_1]);
    }
    let span = (steps - 1) as f64;
    Ok((0..steps)
        .map(|i| beta_1 + (beta_t - beta_1) * i as f64 / span)
        .collect())
}

/// Unclipped `ᾱ_t = f_s(t) / f_s(0)` for `t ∈ [0, T]`.
pub fn cosine_power_alpha_bar(steps: usize, power: f64, offset: f64) -> Vec<f64> {
    let f = |t: usize| {
        let x = ((t as f64 / steps as f64 + offset) / (1.0 + offset)) * FRAC_PI_2;
        Float::powf(Float::cos(x), power)
    };
    let f0 = f(0);
    (0..=steps).map(|t| f(t) / f0).collect()
}

fn cosine_power_betas(steps: usize, power: f64, offset: f64) -> Result<Vec<f64>> {
    if steps == 0 {
        return Err(param_err("schedule needs at least one step"));
    }
    if !(power >= 1.0) {
        return Err(param_err(format!("cosine power must be >= 1, got {power}")));
    }
    if !(offset > 0.0) {
        return Err(param_err(format!("cosine offset must be > 0, got {offset}")));
    }
    let ab = cosine_power_alpha_bar(steps, power, offset);
    Ok((1..=steps).map(|t| (1.0 - ab[t] / ab[t - 1]).min(MAX_BETA)).collect())
}

impl NoiseSchedule {
    fn from_betas(
        kind: ScheduleKind,
        beta: Vec<f64>,
        splice_index: Option<usize>,
        power: Option<f64>,
        offset: Option<f64>,
    ) -> Result<Self> {
        if let Some(bad) = beta.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(param_err(format!("beta {bad} outside (0, 1)")));
        }
        let steps = beta.len();
        let mut alpha_bar = Vec::with_capacity(steps + 1);
        alpha_bar.push(1.0);
        for (i, b) in beta.iter().enumerate() {
            alpha_bar.push(alpha_bar[i] * (1.0 - b));
        }
        let mut posterior_var = alloc::vec![0.0; steps + 1];
        for t in 2..=steps {
            posterior_var[t] = (1.0 - alpha_bar[t - 1]) / (1.0 - alpha_bar[t]) * beta[t - 1];
        }
        Ok(Self {
            kind,
            steps,
            beta,
            alpha_bar,
            posterior_var,
            splice_index,
            power,
            offset,
        })
    }

    pub fn linear(steps: usize, beta_1: f64, beta_t: f64) -> Result<Self> {
        let beta = linear_betas(steps, LinearBetas { beta_1, beta_t })?;
        Self::from_betas(ScheduleKind::Linear, beta, None, None, None)
    }

    pub fn cosine_power(steps: usize, power: f64, offset: f64) -> Result<Self> {
        let beta = cosine_power_betas(steps, power, offset)?;
        Self::from_betas(ScheduleKind::CosinePower, beta, None, Some(power), Some(offset))
    }

    /// Spoon-cosine schedule.
    ///
    /// The splice index `t*` is the step after the last one where the
    /// cosine-power β lies below the linear β; from `t*` on the schedule is
    /// exactly linear. Before `t*` it follows the cosine-power β, never
    /// exceeding the linear β.
    pub fn scos(steps: usize, power: f64, offset: f64, lin: LinearBetas) -> Result<Self> {
        let cos = cosine_power_betas(steps, power, offset)?;
        let linear = linear_betas(steps, lin)?;
        let last_below = (0..steps).rev().find(|&i| cos[i] < linear[i]);
        let splice = match last_below {
            Some(i) if i + 1 < steps => i + 2,
            Some(_) => {
                return Err(param_err(format!(
                    "scos: cosine-power beta (s={power}) stays below the linear beta up to T={steps}; no crossing"
                )))
            }
            None => {
                return Err(param_err(format!(
                    "scos: cosine-power beta (s={power}) never falls below the linear beta; no crossing"
                )))
            }
        };
        let beta = (0..steps)
            .map(|i| {
                if i + 1 < splice {
                    cos[i].min(linear[i])
                } else {
                    linear[i]
                }
            })
            .collect();
        Self::from_betas(ScheduleKind::Scos, beta, Some(splice), Some(power), Some(offset))
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn splice_index(&self) -> Option<usize> {
        self.splice_index
    }

    pub fn power(&self) -> Option<f64> {
        self.power
    }

    pub fn offset(&self) -> Option<f64> {
        self.offset
    }

    /// Short label used in CSV output, e.g. `linear`, `cos2`, `scos6`.
    pub fn name(&self) -> String {
        match (self.kind, self.power) {
            (ScheduleKind::Linear, _) => "linear".into(),
            (ScheduleKind::CosinePower, Some(p)) => format!("cos{p}"),
            (ScheduleKind::Scos, Some(p)) => format!("scos{p}"),
            _ => "unknown".into(),
        }
    }

    pub fn betas(&self) -> &[f64] {
        &self.beta
    }

    /// `ᾱ_t` for `t ∈ [0, T]`.
    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        1.0 - self.beta[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    pub fn posterior_var(&self, t: usize) -> f64 {
        self.posterior_var[t]
    }

    /// Signal-to-noise ratio `ᾱ_t / (1 − ᾱ_t)`; infinite at `t = 0`.
    pub fn snr(&self, t: usize) -> f64 {
        let ab = self.alpha_bar[t];
        ab / (1.0 - ab)
    }

    fn check_step(&self, t: usize, allow_zero: bool) -> Result<()> {
        if t > self.steps || (t == 0 && !allow_zero) {
            return Err(Error::Index {
                index: t,
                len: self.steps,
            });
        }
        Ok(())
    }

    /// `x_t = √ᾱ_t · x0 + √(1 − ᾱ_t) · ε`. `t = 0` returns `x0`.
    pub fn q_sample<F: Scalar>(&self, x0: &Tensor<F>, t: usize, eps: &Tensor<F>) -> Result<Tensor<F>> {
        self.check_step(t, true)?;
        same_shape("q_sample", x0, eps)?;
        let a = F::of(self.alpha_bar[t].sqrt());
        let s = F::of((1.0 - self.alpha_bar[t]).sqrt());
        let data = x0.data().iter().zip(eps.data()).map(|(&x, &e)| a * x + s * e).collect();
        Tensor::new(x0.shape(), data)
    }

    /// Mean and variance of `q(x_{t−1} | x_t, x_0)`.
    pub fn posterior_mean_var<F: Scalar>(&self, x0: &Tensor<F>, xt: &Tensor<F>, t: usize) -> Result<(Tensor<F>, f64)> {
        self.check_step(t, false)?;
        same_shape("posterior_mean_var", x0, xt)?;
        let (c0, ct) = self.posterior_coefficients(t);
        let (c0, ct) = (F::of(c0), F::of(ct));
        let data = x0
            .data()
            .iter()
            .zip(xt.data())
            .map(|(&a, &b)| c0 * a + ct * b)
            .collect();
        Ok((Tensor::new(x0.shape(), data)?, self.posterior_var[t]))
    }

    /// Coefficients of `x0` and `x_t` in the posterior mean.
    pub fn posterior_coefficients(&self, t: usize) -> (f64, f64) {
        let ab = self.alpha_bar[t];
        let ab_prev = self.alpha_bar[t - 1];
        let beta = self.beta[t - 1];
        let alpha = 1.0 - beta;
        (
            ab_prev.sqrt() * beta / (1.0 - ab),
            alpha.sqrt() * (1.0 - ab_prev) / (1.0 - ab),
        )
    }

    /// `μ = (x_t − β_t / √(1 − ᾱ_t) · ε̂) / √α_t`.
    pub fn mu_from_eps<F: Scalar>(&self, xt: &Tensor<F>, t: usize, eps_pred: &Tensor<F>) -> Result<Tensor<F>> {
        self.check_step(t, false)?;
        same_shape("mu_from_eps", xt, eps_pred)?;
        let inv_sqrt_alpha = F::of(1.0 / self.alpha(t).sqrt());
        let k = F::of(self.beta(t) / (1.0 - self.alpha_bar[t]).sqrt());
        let data = xt
            .data()
            .iter()
            .zip(eps_pred.data())
            .map(|(&x, &e)| inv_sqrt_alpha * (x - k * e))
            .collect();
        Tensor::new(xt.shape(), data)
    }

    /// `x̂0 = (x_t − √(1 − ᾱ_t) · ε̂) / √ᾱ_t`.
    pub fn predict_x0<F: Scalar>(&self, xt: &Tensor<F>, t: usize, eps_pred: &Tensor<F>) -> Result<Tensor<F>> {
        self.check_step(t, true)?;
        same_shape("predict_x0", xt, eps_pred)?;
        let a = F::of(1.0 / self.alpha_bar[t].sqrt());
        let s = F::of((1.0 - self.alpha_bar[t]).sqrt());
        let data = xt
            .data()
            .iter()
            .zip(eps_pred.data())
            .map(|(&x, &e)| a * (x - s * e))
            .collect();
        Tensor::new(xt.shape(), data)
    }

    /// Largest `t` with `snr(t) · power ≥ threshold`, or 0 if none.
    pub fn survival_time(&self, power: f64, threshold: f64) -> usize {
        (1..=self.steps)
            .take_while(|&t| self.snr(t) * power >= threshold)
            .last()
            .unwrap_or(0)
    }
}

fn same_shape<F: Scalar>(op: &'static str, a: &Tensor<F>, b: &Tensor<F>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op,
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    Ok(())
}

/// Anneals the Scos power from `s_start` down to `s_end` in equal stages.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ProgressiveController {
    pub s_start: u32,
    pub s_end: u32,
    pub tau: usize,
    pub stage_length: usize,
}

impl ProgressiveController {
    /// Powers 6 → 2 over `tau` steps, `ceil(tau / 5)` steps per power.
    pub fn new(tau: usize) -> Self {
        let (s_start, s_end) = (6, 2);
        let stages = (s_start - s_end + 1) as usize;
        Self {
            s_start,
            s_end,
            tau,
            stage_length: tau.div_ceil(stages).max(1),
        }
    }

    pub fn with_stage_length(mut self, stage_length: usize) -> Self {
        self.stage_length = stage_length.max(1);
        self
    }

    pub fn current_power(&self, step: usize) -> u32 {
        if step >= self.tau {
            return self.s_end;
        }
        let drop = (step / self.stage_length).min((self.s_start - self.s_end) as usize) as u32;
        self.s_start - drop
    }

    pub fn powers(&self) -> impl Iterator<Item = u32> {
        (self.s_end..=self.s_start).rev()
    }
}

/// Object contrast power: mean squared deviation of the pixels inside `bbox`
/// from the per-channel mean of a `margin`-pixel ring around it.
///
/// `image` is row-major `[height × width × channels]`. When the ring is empty
/// (the box covers the whole image) the box's own mean is used.
pub fn contrast_power(
    image: &[f32],
    width: usize,
    height: usize,
    channels: usize,
    bbox: &crate::scene::BBox,
    margin: usize,
) -> Result<f64> {
    let (x, y, w, h) = (bbox.x as usize, bbox.y as usize, bbox.w as usize, bbox.h as usize);
    if w == 0 || h == 0 {
        return Err(param_err("empty box"));
    }
    if x + w > width || y + h > height {
        return Err(param_err(format!("box {bbox:?} outside a {width}×{height} image")));
    }
    if image.len() != width * height * channels {
        return Err(Error::Input(format!(
            "image has {} values, expected {}",
            image.len(),
            width * height * channels
        )));
    }
    let px = |r: usize, c: usize, ch: usize| image[(r * width + c) * channels + ch] as f64;
    let inside = |r: usize, c: usize| r >= y && r < y + h && c >= x && c < x + w;
    let (r0, r1) = (y.saturating_sub(margin), (y + h + margin).min(height));
    let (c0, c1) = (x.saturating_sub(margin), (x + w + margin).min(width));
    let mut bg = alloc::vec![0.0; channels];
    let mut ring = 0usize;
    for r in r0..r1 {
        for c in c0..c1 {
            if !inside(r, c) {
                ring += 1;
                for (ch, b) in bg.iter_mut().enumerate() {
                    *b += px(r, c, ch);
                }
            }
        }
    }
    if ring == 0 {
        for r in y..y + h {
            for c in x..x + w {
                for (ch, b) in bg.iter_mut().enumerate() {
                    *b += px(r, c, ch);
                }
            }
        }
        ring = w * h;
    }
    bg.iter_mut().for_each(|b| *b /= ring as f64);
    let mut total = 0.0;
    for r in y..y + h {
        for c in x..x + w {
            for (ch, b) in bg.iter().enumerate() {
                let d = px(r, c, ch) - b;
                total += d * d;
            }
        }
    }
    Ok(total / (w * h * channels) as f64)
}

/// Background ring width used by [`region_survival_time`].
pub const SURVIVAL_RING: usize = 2;

/// Last diffusion step at which the box's contrast still clears `threshold`
/// in signal-to-noise terms.
pub fn region_survival_time(
    image: &[f32],
    width: usize,
    height: usize,
    channels: usize,
    bbox: &crate::scene::BBox,
    sched: &NoiseSchedule,
    threshold: f64,
) -> Result<usize> {
    if !(threshold > 0.0) {
        return Err(param_err(format!("threshold must be > 0, got {threshold}")));
    }
    let p = contrast_power(image, width, height, channels, bbox, SURVIVAL_RING)?;
    Ok(sched.survival_time(p, threshold))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lin() -> NoiseSchedule {
        NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap()
    }

    #[test]
    fn linear_bounds_are_validated() {
        assert!(NoiseSchedule::linear(0, 1e-4, 0.02).is_err());
        assert!(NoiseSchedule::linear(10, 0.0, 0.02).is_err());
        assert!(NoiseSchedule::linear(10, 0.03, 0.02).is_err());
        assert!(NoiseSchedule::linear(10, 1e-4, 1.0).is_err());
        let one = NoiseSchedule::linear(1, 0.01, 0.01).unwrap();
        assert_eq!(one.betas(), &[0.01]);
    }

    #[test]
    fn posterior_variance_starts_at_zero() {
        let s = lin();
        assert_eq!(s.posterior_var(1), 0.0);
        for t in 2..=1000 {
            assert!(s.posterior_var(t) < s.beta(t));
        }
    }

    #[test]
    fn step_range_is_checked() {
        let s = lin();
        let x = Tensor::<f64>::zeros(&[2]);
        assert!(s.q_sample(&x, 1001, &x).is_err());
        assert!(s.posterior_mean_var(&x, &x, 0).is_err());
        assert!(s.mu_from_eps(&x, 1001, &x).is_err());
    }

    #[test]
    fn controller_enumerates_stages() {
        let c = ProgressiveController::new(500);
        assert_eq!(c.stage_length, 100);
        let seq: Vec<u32> = (0..500).step_by(100).map(|k| c.current_power(k)).collect();
        assert_eq!(seq, [6, 5, 4, 3, 2]);
        assert_eq!(c.current_power(99), 6);
        assert_eq!(c.current_power(100), 5);
        assert_eq!(c.current_power(10_000), 2);
        // Uneven spans still end on s_end at tau.
        let c = ProgressiveController::new(7);
        assert_eq!(c.current_power(6), 3);
        assert_eq!(c.current_power(7), 2);
    }

    #[test]
    fn empty_box_is_rejected() {
        let img = alloc::vec![0.0f32; 4 * 4 * 3];
        let b = crate::scene::BBox { x: 0, y: 0, w: 0, h: 2 };
        assert!(contrast_power(&img, 4, 4, 3, &b, 2).is_err());
        let b = crate::scene::BBox { x: 3, y: 0, w: 2, h: 2 };
        assert!(contrast_power(&img, 4, 4, 3, &b, 2).is_err());
    }
}
