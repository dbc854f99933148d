//! Ancestral DDPM sampling.

use alloc::format;
use alloc::vec::Vec;

use num_traits::Float;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::model::DiT;
use crate::scalar::Scalar;
use crate::scene::to_pixels;
use crate::schedule::NoiseSchedule;
use crate::tensor::Tensor;

/// Anything that predicts the noise in `x_t`.
pub trait EpsPredictor<F: Scalar> {
    fn horizon(&self) -> usize;

    /// ε̂ for each image at a shared step `t`, with per-image condition rows.
    fn predict(&self, xs: &[Tensor<F>], t: usize, conditions: &[usize]) -> Result<Vec<Tensor<F>>>;
}

impl<F: Scalar> EpsPredictor<F> for DiT<F> {
    fn horizon(&self) -> usize {
        self.config().steps
    }

    fn predict(&self, xs: &[Tensor<F>], t: usize, conditions: &[usize]) -> Result<Vec<Tensor<F>>> {
        let ts: Vec<usize> = alloc::vec![t; xs.len()];
        self.forward_batch(xs, &ts, conditions)
    }
}

/// Chains advanced together per forward pass.
pub const SAMPLE_CHUNK: usize = 32;

/// Runs `n` reverse chains from unit Gaussian noise and returns model-space
/// results (`[-1, 1]` nominal range, unclamped).
///
/// `x_{t−1} = μ_θ(x_t, t) + √β̃_t · z`, with `z = 0` at `t = 1`. All noise comes
/// from one stream seeded by `seed`, drawn chain by chain in order.
pub fn ddpm_sample_raw<F: Scalar, P: EpsPredictor<F>>(
    model: &P,
    sched: &NoiseSchedule,
    condition: usize,
    shape: &[usize],
    n: usize,
    seed: u64,
) -> Result<Vec<Tensor<F>>> {
    if model.horizon() != sched.steps() {
        return Err(Error::Contract(format!(
            "model horizon {} differs from schedule horizon {}",
            model.horizon(),
            sched.steps()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut gauss = |shape: &[usize]| Tensor::from_fn(shape, |_| F::of(StandardNormal.sample(&mut rng)));
    let mut xs: Vec<Tensor<F>> = (0..n).map(|_| gauss(shape)).collect();
    let conds = alloc::vec![condition; SAMPLE_CHUNK.min(n.max(1))];
    for t in (1..=sched.steps()).rev() {
        let mut eps = Vec::with_capacity(n);
        for chunk in xs.chunks(SAMPLE_CHUNK) {
            eps.extend(model.predict(chunk, t, &conds[..chunk.len()])?);
        }
        let sigma = F::of(Float::sqrt(sched.posterior_var(t)));
        for (x, e) in xs.iter_mut().zip(&eps) {
            let mu = sched.mu_from_eps(x, t, e)?;
            *x = if t > 1 {
                let z = gauss(shape);
                let data = mu.data().iter().zip(z.data()).map(|(&m, &z)| m + sigma * z).collect();
                Tensor::new(shape, data)?
            } else {
                mu
            };
        }
    }
    Ok(xs)
}

/// [`ddpm_sample_raw`] mapped to clamped `[0, 1]` pixels.
pub fn ddpm_sample<F: Scalar, P: EpsPredictor<F>>(
    model: &P,
    sched: &NoiseSchedule,
    condition: usize,
    shape: &[usize],
    n: usize,
    seed: u64,
) -> Result<Vec<Vec<f32>>> {
    Ok(ddpm_sample_raw(model, sched, condition, shape, n, seed)?
        .iter()
        .map(to_pixels)
        .collect())
}
