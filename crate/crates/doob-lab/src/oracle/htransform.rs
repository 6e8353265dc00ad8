//! Analytic h-transforms for Gaussian-mixture data.
//!
//! `h(k, x) = P(X0 in B | X_k = x)` for interval events (1-D), and
//! `h(k, x) = p(y | X_k = x)` for linear-Gaussian observations. Everything is
//! evaluated in the log domain so deep-noise steps and far-tail states survive;
//! when `h` underflows 1e-300 the linear-domain value collapses to zero and the
//! `underflow` flag tells callers to stay on the log/gradient path (the
//! sampler only ever consumes `grad ln h`, which is immune).

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};

use crate::error::{Error, Result};
use crate::linalg;
use crate::schedule::NoiseSchedule;
use crate::special::{log_gauss_mass, log_norm_pdf, log_sum_exp, softmax_from_log, LN_SQRT_2PI};

use super::prior::GaussianMixturePrior;
use super::Observation;

/// Event kind an h-transform conditions on.
#[derive(Debug, Clone)]
pub enum HKind {
    /// `X0 in (a, b)`, one-dimensional; either bound may be infinite.
    Interval { a: f64, b: f64 },
    /// `y = A(X0) + eta`; `noise_std = 0` is the hard constraint.
    LinearGaussian(Observation),
}

/// An h-transform oracle bound to its prior. The schedule is supplied per
/// call, matching how the sampler owns it.
#[derive(Debug, Clone)]
pub struct HTransform {
    kind: HKind,
    prior: GaussianMixturePrior,
}

/// Result of evaluating h at one point.
#[derive(Debug, Clone)]
pub struct HEval {
    pub log_h: f64,
    /// exp(log_h); exactly 0.0 when underflowed.
    pub h: f64,
    pub grad_log_h: Array1<f64>,
    pub underflow: bool,
}

impl HTransform {
    pub fn interval(prior: GaussianMixturePrior, a: f64, b: f64) -> Result<Self> {
        if prior.dim() != 1 {
            return Err(Error::config("interval h-transform requires a 1-D prior"));
        }
        if !(a < b) {
            return Err(Error::config(format!("interval requires a < b, got ({a}, {b})")));
        }
        Ok(HTransform { kind: HKind::Interval { a, b }, prior })
    }

    pub fn linear_gaussian(prior: GaussianMixturePrior, obs: Observation) -> Result<Self> {
        if obs.dim() != prior.dim() {
            return Err(Error::config(format!(
                "observation dimension {} does not match prior dimension {}",
                obs.dim(),
                prior.dim()
            )));
        }
        Ok(HTransform { kind: HKind::LinearGaussian(obs), prior })
    }

    pub fn kind(&self) -> &HKind {
        &self.kind
    }

    pub fn prior(&self) -> &GaussianMixturePrior {
        &self.prior
    }

    /// Evaluate h and grad ln h at a single point.
    pub fn eval(&self, sch: &NoiseSchedule, k: usize, x: ArrayView1<f64>) -> Result<HEval> {
        let xm = x.insert_axis(Axis(0));
        let (log_h, grad) = self.eval_batch(sch, k, xm)?;
        let lh = log_h[0];
        let h = lh.exp();
        Ok(HEval {
            log_h: lh,
            h,
            grad_log_h: grad.row(0).to_owned(),
            underflow: lh < (1e-300f64).ln(),
        })
    }

    /// Batched `grad ln h`; the sampler's hot path.
    pub fn grad_log_batch(
        &self,
        sch: &NoiseSchedule,
        k: usize,
        x: ArrayView2<f64>,
    ) -> Result<Array2<f64>> {
        Ok(self.eval_batch(sch, k, x)?.1)
    }

    /// Batched `(ln h, grad ln h)`.
    pub fn eval_batch(
        &self,
        sch: &NoiseSchedule,
        k: usize,
        x: ArrayView2<f64>,
    ) -> Result<(Array1<f64>, Array2<f64>)> {
        match &self.kind {
            HKind::Interval { a, b } => self.eval_interval(sch, k, x, *a, *b),
            HKind::LinearGaussian(obs) => self.eval_linear_gaussian(sch, k, x, obs),
        }
    }

    fn eval_interval(
        &self,
        sch: &NoiseSchedule,
        k: usize,
        x: ArrayView2<f64>,
        a: f64,
        b: f64,
    ) -> Result<(Array1<f64>, Array2<f64>)> {
        let abar = sch.alpha_bar(k);
        let n = x.nrows();
        let mm = self.prior.n_components();
        let mut log_h = Array1::<f64>::zeros(n);
        let mut grad = Array2::<f64>::zeros((n, 1));

        // per-component scalar constants at this step
        let mut mu_k = vec![0.0; mm];
        let mut var_k = vec![0.0; mm];
        let mut v_hat = vec![0.0; mm];
        let mut mu_off = vec![0.0; mm];
        let mut mu_slope = vec![0.0; mm];
        let mut log_w = vec![0.0; mm];
        for m in 0..mm {
            let mean = self.prior.mean_of(m)[0];
            let s2 = self.prior.cov_of(m)[[0, 0]];
            mu_k[m] = abar.sqrt() * mean;
            var_k[m] = abar * s2 + (1.0 - abar);
            v_hat[m] = s2 * (1.0 - abar) / ((1.0 - abar) + abar * s2);
            mu_off[m] = v_hat[m] * mean / s2;
            mu_slope[m] = v_hat[m] * abar.sqrt() / (1.0 - abar);
            log_w[m] = self.prior.weights()[m].ln();
        }

        let mut ell = vec![0.0; mm];
        let mut ell_h = vec![0.0; mm];
        let mut score_m = vec![0.0; mm];
        let mut dmass = vec![0.0; mm];
        let mut resp = vec![0.0; mm];
        let mut omega = vec![0.0; mm];
        for i in 0..n {
            let xi = x[[i, 0]];
            for m in 0..mm {
                let diff = xi - mu_k[m];
                ell[m] = log_w[m] - 0.5 * diff * diff / var_k[m]
                    - 0.5 * var_k[m].ln()
                    - LN_SQRT_2PI;
                score_m[m] = -diff / var_k[m];
                let mu_hat = mu_off[m] + mu_slope[m] * xi;
                let sd_hat = v_hat[m].sqrt();
                let za = if a == f64::NEG_INFINITY { f64::NEG_INFINITY } else { (a - mu_hat) / sd_hat };
                let zb = if b == f64::INFINITY { f64::INFINITY } else { (b - mu_hat) / sd_hat };
                let lmass = log_gauss_mass(za, zb);
                ell_h[m] = ell[m] + lmass;
                // d/dx ln mass = (mu_slope / sd_hat) (phi(za) - phi(zb)) / mass
                let pa = if za.is_finite() { (log_norm_pdf(za) - lmass).exp() } else { 0.0 };
                let pb = if zb.is_finite() { (log_norm_pdf(zb) - lmass).exp() } else { 0.0 };
                dmass[m] = mu_slope[m] / sd_hat * (pa - pb);
            }
            let log_p = log_sum_exp(&ell);
            log_h[i] = log_sum_exp(&ell_h) - log_p;
            softmax_from_log(&ell, &mut resp);
            softmax_from_log(&ell_h, &mut omega);
            let score_bar: f64 = resp.iter().zip(&score_m).map(|(r, s)| r * s).sum();
            let mut g = 0.0;
            for m in 0..mm {
                g += omega[m] * (score_m[m] - score_bar + dmass[m]);
            }
            grad[[i, 0]] = g;
        }
        Ok((log_h, grad))
    }

    fn eval_linear_gaussian(
        &self,
        sch: &NoiseSchedule,
        k: usize,
        x: ArrayView2<f64>,
        obs: &Observation,
    ) -> Result<(Array1<f64>, Array2<f64>)> {
        let d = self.prior.dim();
        let n = x.nrows();
        let mm = self.prior.n_components();
        let n_obs = obs.y.len();
        let moments = self.prior.posterior_moments(sch, k)?;
        let a_mat = obs.operator.as_matrix();
        let sigma2 = obs.noise_std * obs.noise_std;

        // per-component observation covariance C = A cov_hat A^T + sigma^2 I
        let mut c_chols = Vec::with_capacity(mm);
        let mut c_logdets = Vec::with_capacity(mm);
        for pm in &moments {
            let mut c = a_mat.dot(&pm.cov).dot(&a_mat.t());
            for i in 0..n_obs {
                c[[i, i]] += sigma2;
            }
            let chol = linalg::cholesky(c.view()).map_err(|_| {
                Error::numerical(format!(
                    "h-transform observation covariance singular at step {k} (hard constraint with deficient operator?)"
                ))
            })?;
            c_logdets.push(linalg::chol_log_det(chol.view()));
            c_chols.push(chol);
        }

        // marginal component log-densities and scores
        let comps = self.prior.marginal_components(sch, k)?;
        let mut ell = Array2::<f64>::zeros((n, mm));
        let mut ell_h = Array2::<f64>::zeros((n, mm));
        let mut scores = Vec::with_capacity(mm);
        let mut hgrads = Vec::with_capacity(mm);
        for m in 0..mm {
            let comp = &comps[m];
            let diff = &x - &comp.mean.view().insert_axis(Axis(0));
            let w = linalg::chol_solve_rows(comp.chol.view(), diff.view());
            for i in 0..n {
                let q: f64 = diff.row(i).dot(&w.row(i));
                ell[[i, m]] = self.prior.weights()[m].ln() - 0.5 * q - 0.5 * comp.log_det
                    - d as f64 * LN_SQRT_2PI;
            }
            scores.push(w.mapv(|t| -t));

            // posterior predictive of y given x under component m
            let pm = &moments[m];
            let mu_hat = &x.dot(&pm.slope) + &pm.offset.view().insert_axis(Axis(0));
            let res = &obs.y.view().insert_axis(Axis(0)) - &obs.operator.apply_batch(mu_hat.view());
            let cr = linalg::chol_solve_rows(c_chols[m].view(), res.view());
            for i in 0..n {
                let q: f64 = res.row(i).dot(&cr.row(i));
                ell_h[[i, m]] = ell[[i, m]] - 0.5 * q - 0.5 * c_logdets[m]
                    - n_obs as f64 * LN_SQRT_2PI;
            }
            // grad of ln N(y | A mu_hat(x), C) wrt x: slope^T A^T C^{-1} res
            let t = obs.operator.apply_t_batch(cr.view());
            hgrads.push(t.dot(&pm.slope));
        }

        let mut log_h = Array1::<f64>::zeros(n);
        let mut grad = Array2::<f64>::zeros((n, d));
        let mut resp = vec![0.0; mm];
        let mut omega = vec![0.0; mm];
        for i in 0..n {
            let lp = log_sum_exp(ell.row(i).as_slice().unwrap());
            log_h[i] = log_sum_exp(ell_h.row(i).as_slice().unwrap()) - lp;
            softmax_from_log(ell.row(i).as_slice().unwrap(), &mut resp);
            softmax_from_log(ell_h.row(i).as_slice().unwrap(), &mut omega);
            let mut score_bar = Array1::<f64>::zeros(d);
            for (m, sc) in scores.iter().enumerate() {
                for j in 0..d {
                    score_bar[j] += resp[m] * sc[[i, j]];
                }
            }
            for m in 0..mm {
                for j in 0..d {
                    grad[[i, j]] +=
                        omega[m] * (scores[m][[i, j]] - score_bar[j] + hgrads[m][[i, j]]);
                }
            }
        }
        Ok((log_h, grad))
    }
}
