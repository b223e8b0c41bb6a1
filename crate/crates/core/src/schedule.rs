use crate::error::{Error, Result};
use crate::scalar::{s, Scalar};
use crate::tensor::Tensor;

/// Variance schedule for the forward noising process. Holds `beta_t`,
/// `alpha_t = 1 - beta_t`, and the cumulative product `alpha_bar_t`.
#[derive(Clone, Debug)]
pub struct NoiseSchedule<S> {
    betas: Vec<S>,
    alphas: Vec<S>,
    alpha_bars: Vec<S>,
}

impl<S: Scalar> NoiseSchedule<S> {
    /// Build from explicit betas, each in (0, 1).
    pub fn from_betas(betas: Vec<S>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::invalid("schedule", "empty beta sequence"));
        }
        for (i, &b) in betas.iter().enumerate() {
            if !(b > S::zero() && b < S::one()) {
                return Err(Error::invalid(
                    "schedule",
                    format!("beta[{}] = {} outside (0, 1)", i, b),
                ));
            }
        }
        let alphas: Vec<S> = betas.iter().map(|&b| S::one() - b).collect();
        let mut alpha_bars = Vec::with_capacity(betas.len());
        let mut prod = S::one();
        for &a in &alphas {
            prod = prod * a;
            alpha_bars.push(prod);
        }
        Ok(NoiseSchedule {
            betas,
            alphas,
            alpha_bars,
        })
    }

    /// Linear schedule with inclusive endpoints over `t >= 2` steps.
    pub fn linear(t: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if t < 2 {
            return Err(Error::invalid("schedule", "linear schedule needs T >= 2"));
        }
        if !(beta_start > 0.0 && beta_end < 1.0 && beta_start <= beta_end) {
            return Err(Error::invalid(
                "schedule",
                format!("bad endpoints ({}, {})", beta_start, beta_end),
            ));
        }
        let denom = (t - 1) as f64;
        let betas = (0..t)
            .map(|i| s(beta_start + (beta_end - beta_start) * i as f64 / denom))
            .collect();
        Self::from_betas(betas)
    }

    /// Number of timesteps T.
    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        false // construction requires at least one beta
    }

    pub fn beta(&self, t: usize) -> S {
        self.betas[t]
    }

    pub fn alpha(&self, t: usize) -> S {
        self.alphas[t]
    }

    pub fn alpha_bar(&self, t: usize) -> S {
        self.alpha_bars[t]
    }

    pub fn alpha_bars(&self) -> &[S] {
        &self.alpha_bars
    }

    /// `(sqrt(alpha_bar_t), sqrt(1 - alpha_bar_t))`, the mixing coefficients
    /// of the closed-form forward process.
    pub fn forward_coeffs(&self, t: usize) -> (S, S) {
        let ab = self.alpha_bars[t];
        (ab.sqrt(), (S::one() - ab).sqrt())
    }

    /// Variance of the reverse-step posterior at step `t`; zero at `t = 0`
    /// where the final step is deterministic.
    pub fn posterior_variance(&self, t: usize) -> S {
        if t == 0 {
            return S::zero();
        }
        self.betas[t] * (S::one() - self.alpha_bars[t - 1]) / (S::one() - self.alpha_bars[t])
    }
}

/// Closed-form forward noising `x_t = sqrt(ab_t) x0 + sqrt(1 - ab_t) eps`.
pub fn forward_noise<S: Scalar>(
    x0: &Tensor<S>,
    eps: &Tensor<S>,
    t: usize,
    sched: &NoiseSchedule<S>,
) -> Result<Tensor<S>> {
    if t >= sched.len() {
        return Err(Error::invalid(
            "forward_noise",
            format!("t = {} out of range for T = {}", t, sched.len()),
        ));
    }
    let (a, b) = sched.forward_coeffs(t);
    x0.scale(a).add(&eps.scale(b))
}
