//! Forward noising, ancestral sampling and classifier-free guidance.
//!
//! Timesteps are 1-based: timestep `t` in `1..=T` reads coefficient index `t - 1`.

use fsc_tensor::{Scalar, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{CoreError, Result};

/// Precomputed per-step diffusion coefficients.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule<T> {
    betas: Vec<T>,
    alphas: Vec<T>,
    alpha_bars: Vec<T>,
}

impl<T: Scalar> NoiseSchedule<T> {
    /// Linear β schedule over `steps` steps, both endpoints inclusive.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(CoreError::InvalidRange("schedule needs at least one step".into()));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(CoreError::InvalidRange(format!(
                "need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
            )));
        }
        let betas = (0..steps)
            .map(|i| {
                let frac = if steps == 1 { 0.0 } else { i as f64 / (steps - 1) as f64 };
                T::from_f64c(beta_start + (beta_end - beta_start) * frac)
            })
            .collect();
        Self::from_betas(betas)
    }

    pub fn from_betas(betas: Vec<T>) -> Result<Self> {
        if betas.is_empty() {
            return Err(CoreError::InvalidRange("empty schedule".into()));
        }
        if let Some(b) = betas.iter().find(|b| !(**b > T::zero() && **b < T::one())) {
            return Err(CoreError::InvalidRange(format!("beta {b} outside (0, 1)")));
        }
        let alphas: Vec<T> = betas.iter().map(|&b| T::one() - b).collect();
        let mut alpha_bars = Vec::with_capacity(alphas.len());
        let mut acc = T::one();
        for &a in &alphas {
            acc *= a;
            alpha_bars.push(acc);
        }
        if alpha_bars.windows(2).any(|w| w[1] >= w[0]) || alpha_bars.iter().any(|&a| a <= T::zero()) {
            return Err(CoreError::InvalidRange("cumulative alphas are not strictly decreasing in (0, 1)".into()));
        }
        Ok(NoiseSchedule { betas, alphas, alpha_bars })
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[T] {
        &self.betas
    }

    pub fn alphas(&self) -> &[T] {
        &self.alphas
    }

    pub fn alpha_bars(&self) -> &[T] {
        &self.alpha_bars
    }

    fn index(&self, t: usize) -> Result<usize> {
        if t == 0 || t > self.steps() {
            return Err(CoreError::InvalidRange(format!("timestep {t} outside 1..={}", self.steps())));
        }
        Ok(t - 1)
    }

    pub fn beta(&self, t: usize) -> Result<T> {
        Ok(self.betas[self.index(t)?])
    }

    pub fn alpha(&self, t: usize) -> Result<T> {
        Ok(self.alphas[self.index(t)?])
    }

    pub fn alpha_bar(&self, t: usize) -> Result<T> {
        Ok(self.alpha_bars[self.index(t)?])
    }

    /// Schedule over a subset of timesteps (ascending `kept`), with the betas
    /// that make its cumulative products match the original at those steps.
    pub fn respaced(&self, kept: &[usize]) -> Result<Self> {
        let mut prev = T::one();
        let mut betas = Vec::with_capacity(kept.len());
        for &t in kept {
            let ab = self.alpha_bar(t)?;
            betas.push(T::one() - ab / prev);
            prev = ab;
        }
        Self::from_betas(betas)
    }
}

fn check_same(op: &str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(CoreError::Shape(format!("{op}: {a:?} vs {b:?}")));
    }
    Ok(())
}

/// Closed-form forward corruption `sqrt(ab_t) z0 + sqrt(1 - ab_t) eps`.
pub fn q_sample<T: Scalar>(z0: &Tensor<T>, eps: &Tensor<T>, t: usize, sched: &NoiseSchedule<T>) -> Result<Tensor<T>> {
    check_same("q_sample", z0.shape(), eps.shape())?;
    let ab = sched.alpha_bar(t)?;
    let (a, b) = (ab.sqrt(), (T::one() - ab).sqrt());
    Ok(z0.zip_map(eps, |x, e| a * x + b * e)?)
}

/// One DDPM posterior-mean step from `t` to `t - 1` plus `sqrt(beta_t) * noise`.
pub fn ancestral_step<T: Scalar>(
    z_t: &Tensor<T>,
    eps_hat: &Tensor<T>,
    t: usize,
    sched: &NoiseSchedule<T>,
    noise: &Tensor<T>,
) -> Result<Tensor<T>> {
    check_same("ancestral_step", z_t.shape(), eps_hat.shape())?;
    check_same("ancestral_step noise", z_t.shape(), noise.shape())?;
    let beta = sched.beta(t)?;
    if t == 1 && noise.data().iter().any(|&v| v != T::zero()) {
        return Err(CoreError::InvalidRange("noise must be zero on the final step".into()));
    }
    let inv_sqrt_alpha = T::one() / sched.alpha(t)?.sqrt();
    let coef = beta / (T::one() - sched.alpha_bar(t)?).sqrt();
    let sigma = beta.sqrt();
    let mean = z_t.zip_map(eps_hat, |z, e| inv_sqrt_alpha * (z - coef * e))?;
    Ok(mean.zip_map(noise, |m, n| m + sigma * n)?)
}

/// `eps_uncond + scale * (eps_cond - eps_uncond)`.
pub fn cfg_combine<T: Scalar>(eps_uncond: &Tensor<T>, eps_cond: &Tensor<T>, scale: f64) -> Result<Tensor<T>> {
    check_same("cfg_combine", eps_uncond.shape(), eps_cond.shape())?;
    let s = T::from_f64c(scale);
    Ok(eps_uncond.zip_map(eps_cond, |u, c| u + s * (c - u))?)
}

/// `steps` evenly spaced timesteps from `total` down to 1, largest first.
/// Fractional positions round half up, i.e. ties go to the larger timestep.
pub fn strided_timesteps(total: usize, steps: usize) -> Result<Vec<usize>> {
    if steps == 0 || steps > total {
        return Err(CoreError::InvalidRange(format!("sampling steps {steps} must be in 1..={total}")));
    }
    if steps == 1 {
        return Ok(vec![total]);
    }
    let span = (total - 1) as f64;
    Ok((0..steps)
        .map(|k| {
            let pos = total as f64 - span * k as f64 / (steps - 1) as f64;
            (pos + 0.5).floor() as usize
        })
        .collect())
}

/// Which branch of classifier-free guidance a denoiser call is for.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Guidance {
    Conditional,
    Unconditional,
}

/// Ancestral sampling from seeded Gaussian noise.
///
/// `denoise(z_t, t, branch)` receives original-schedule timesteps. When
/// `cfg_scale == 1` only the conditional branch is evaluated.
pub fn sample_loop<T, F>(
    mut denoise: F,
    shape: &[usize],
    sched: &NoiseSchedule<T>,
    steps: usize,
    cfg_scale: f64,
    seed: u64,
) -> Result<Tensor<T>>
where
    T: Scalar,
    F: FnMut(&Tensor<T>, usize, Guidance) -> Result<Tensor<T>>,
{
    let mut timesteps = strided_timesteps(sched.steps(), steps)?;
    let respaced;
    let run_sched = if steps == sched.steps() {
        sched
    } else {
        timesteps.reverse();
        respaced = sched.respaced(&timesteps)?;
        timesteps.reverse();
        &respaced
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut z = Tensor::<T>::randn(shape, 1.0, &mut rng);
    for (i, &t) in timesteps.iter().enumerate() {
        let k = steps - i;
        let eps_hat = if cfg_scale == 1.0 {
            denoise(&z, t, Guidance::Conditional)?
        } else {
            let uncond = denoise(&z, t, Guidance::Unconditional)?;
            let cond = denoise(&z, t, Guidance::Conditional)?;
            cfg_combine(&uncond, &cond, cfg_scale)?
        };
        let noise = if k > 1 { Tensor::randn(shape, 1.0, &mut rng) } else { Tensor::zeros(shape) };
        z = ancestral_step(&z, &eps_hat, k, run_sched, &noise)?;
        if !z.all_finite() {
            return Err(CoreError::Numeric(format!("non-finite sample at timestep {t}")));
        }
    }
    Ok(z)
}
