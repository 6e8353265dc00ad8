//! Noise-schedule math: discrete beta / alpha-bar tables for the forward
//! noising chain and the continuous Ornstein-Uhlenbeck rate they discretize.
//!
//! The discrete chain uses the variance-preserving kernel
//! `x_k | x_0 ~ N(sqrt(abar_k) x_0, (1 - abar_k) I)` with
//! `abar_k = prod_{j<=k} (1 - beta_j)` and the convention `abar_0 = 1`
//! (no noise at the data end). The continuous rate is recovered from
//! `beta(t) = -d/dt ln abar(t)` on the grid `t = k/N`.

use std::f64::consts::PI;

use crate::error::{Error, Result};

/// How a schedule was constructed; echoed into config files.
#[derive(Debug, Clone, PartialEq)]
pub enum ScheduleKind {
    Linear { beta_1: f64, beta_n: f64 },
    Cosine,
    Custom,
}

/// Immutable table of per-step variances and their cumulative products.
#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    n_steps: usize,
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
    kind: ScheduleKind,
}

/// Offset of the squared-cosine alpha-bar profile.
pub const COSINE_OFFSET: f64 = 0.008;
/// Upper clip applied to cosine-schedule betas.
pub const COSINE_BETA_CLIP: f64 = 0.999;

impl NoiseSchedule {
    fn from_betas(betas: Vec<f64>, kind: ScheduleKind) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::config("schedule needs at least one step"));
        }
        for (i, &b) in betas.iter().enumerate() {
            if !(b > 0.0 && b < 1.0) {
                return Err(Error::config(format!(
                    "beta_{} = {b} outside (0, 1)",
                    i + 1
                )));
            }
        }
        let mut alpha_bars = Vec::with_capacity(betas.len());
        let mut prod = 1.0_f64;
        for &b in &betas {
            prod *= 1.0 - b;
            alpha_bars.push(prod);
        }
        Ok(NoiseSchedule {
            n_steps: betas.len(),
            betas,
            alpha_bars,
            kind,
        })
    }

    /// Linear interpolation of beta between the two endpoints, inclusive.
    pub fn linear(n_steps: usize, beta_1: f64, beta_n: f64) -> Result<Self> {
        if n_steps < 1 {
            return Err(Error::config("n_steps must be >= 1"));
        }
        if !(beta_1 > 0.0 && beta_1 <= beta_n && beta_n < 1.0) {
            return Err(Error::config(format!(
                "linear schedule requires 0 < beta_1 <= beta_N < 1, got ({beta_1}, {beta_n})"
            )));
        }
        let betas = if n_steps == 1 {
            vec![beta_1]
        } else {
            (0..n_steps)
                .map(|i| beta_1 + (beta_n - beta_1) * i as f64 / (n_steps - 1) as f64)
                .collect()
        };
        Self::from_betas(betas, ScheduleKind::Linear { beta_1, beta_n })
    }

    /// Squared-cosine alpha-bar profile with the standard offset; betas derived
    /// as `1 - abar_k / abar_{k-1}` and clipped to `<= 0.999`.
    pub fn cosine(n_steps: usize) -> Result<Self> {
        if n_steps < 1 {
            return Err(Error::config("n_steps must be >= 1"));
        }
        let f = |k: f64| {
            let s = COSINE_OFFSET;
            ((k / n_steps as f64 + s) / (1.0 + s) * PI / 2.0).cos().powi(2)
        };
        let f0 = f(0.0);
        let mut prev = 1.0;
        let mut betas = Vec::with_capacity(n_steps);
        for k in 1..=n_steps {
            let a = f(k as f64) / f0;
            let beta = (1.0 - a / prev).min(COSINE_BETA_CLIP);
            betas.push(beta);
            prev *= 1.0 - beta;
        }
        Self::from_betas(betas, ScheduleKind::Cosine)
    }

    /// Schedule from an explicit beta table.
    pub fn custom(betas: Vec<f64>) -> Result<Self> {
        Self::from_betas(betas, ScheduleKind::Custom)
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn kind(&self) -> &ScheduleKind {
        &self.kind
    }

    /// beta_k for k in 1..=N.
    pub fn beta(&self, k: usize) -> f64 {
        assert!(k >= 1 && k <= self.n_steps, "step {k} outside 1..={}", self.n_steps);
        self.betas[k - 1]
    }

    /// abar_k for k in 0..=N, with abar_0 = 1.
    pub fn alpha_bar(&self, k: usize) -> f64 {
        assert!(k <= self.n_steps, "step {k} outside 0..={}", self.n_steps);
        if k == 0 {
            1.0
        } else {
            self.alpha_bars[k - 1]
        }
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    /// Continuous OU rate beta(t) on t in [0, 1].
    ///
    /// Piecewise-linear interpolation of `N * (-ln(1 - beta_k))` with nodes at
    /// the interval midpoints `t_k = (k - 1/2)/N` and constant extension at the
    /// ends, so that the integral over [0,1] equals `-ln abar_N` exactly.
    pub fn continuous_beta(&self, t: f64) -> Result<f64> {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::domain(format!("continuous_beta: t = {t} outside [0, 1]")));
        }
        let n = self.n_steps as f64;
        let g = |k: usize| -> f64 { n * (-(1.0 - self.betas[k]).ln()) };
        if self.n_steps == 1 {
            return Ok(g(0));
        }
        // position in units of intervals, relative to the first midpoint
        let u = t * n - 0.5;
        if u <= 0.0 {
            return Ok(g(0));
        }
        if u >= (self.n_steps - 1) as f64 {
            return Ok(g(self.n_steps - 1));
        }
        let i = u.floor() as usize;
        let w = u - i as f64;
        Ok(g(i) * (1.0 - w) + g(i + 1) * w)
    }
}
