//! Gaussian-mixture priors under the variance-preserving forward kernel:
//! closed-form marginals, scores, score Hessians and per-component denoising
//! posteriors.
//!
//! A mixture component N(m, S) pushed to step k has marginal
//! N(sqrt(abar_k) m, abar_k S + (1 - abar_k) I), and the denoising posterior
//! p(x0 | x_k) is Gaussian per component with moments that are affine in x_k.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::linalg;
use crate::schedule::NoiseSchedule;
use crate::special::{log_sum_exp, norm_cdf, softmax_from_log, LN_SQRT_2PI};

/// Mixture of full-covariance Gaussians.
///
/// Components may be declared with diagonal covariances (the common case for
/// toy data) or full SPD matrices; the correlated benchmarks need the latter.
#[derive(Debug, Clone)]
pub struct GaussianMixturePrior {
    weights: Vec<f64>,
    log_weights: Vec<f64>,
    means: Vec<Array1<f64>>,
    covs: Vec<Array2<f64>>,
    /// Cholesky factors of the component covariances; absent for merely
    /// positive-semidefinite components (pushforward posteriors), which can be
    /// scored at k >= 1 but not sampled directly.
    chols: Vec<Option<Array2<f64>>>,
    d: usize,
}

pub(crate) struct MarginalComponent {
    pub mean: Array1<f64>,
    pub chol: Array2<f64>,
    pub log_det: f64,
}

/// Denoising-posterior moments of one component at a fixed step:
/// `mean(x) = offset + slope * x`, `cov` constant in x.
#[derive(Debug, Clone)]
pub struct PosteriorMoments {
    pub offset: Array1<f64>,
    /// Symmetric d x d; equals `sqrt(abar)/(1-abar) * cov`.
    pub slope: Array2<f64>,
    pub cov: Array2<f64>,
}

impl GaussianMixturePrior {
    pub fn new(
        weights: Vec<f64>,
        means: Vec<Array1<f64>>,
        covs: Vec<Array2<f64>>,
    ) -> Result<Self> {
        Self::build(weights, means, covs, true)
    }

    /// Construction without the positive-definiteness requirement, for
    /// posterior pushforwards whose covariances may be singular.
    pub(crate) fn new_psd(
        weights: Vec<f64>,
        means: Vec<Array1<f64>>,
        covs: Vec<Array2<f64>>,
    ) -> Result<Self> {
        Self::build(weights, means, covs, false)
    }

    fn build(
        weights: Vec<f64>,
        means: Vec<Array1<f64>>,
        covs: Vec<Array2<f64>>,
        require_pd: bool,
    ) -> Result<Self> {
        if weights.is_empty() || weights.len() != means.len() || weights.len() != covs.len() {
            return Err(Error::config("mixture needs matching, nonempty component lists"));
        }
        let d = means[0].len();
        if d == 0 {
            return Err(Error::config("mixture dimension must be positive"));
        }
        let wsum: f64 = weights.iter().sum();
        if (wsum - 1.0).abs() > 1e-12 {
            return Err(Error::config(format!("mixture weights sum to {wsum}, not 1")));
        }
        if weights.iter().any(|&w| w <= 0.0) {
            return Err(Error::config("mixture weights must be positive"));
        }
        let mut chols = Vec::with_capacity(covs.len());
        for (m, (mean, cov)) in means.iter().zip(&covs).enumerate() {
            if mean.len() != d || cov.dim() != (d, d) {
                return Err(Error::config(format!("component {m} has inconsistent dimension")));
            }
            match linalg::cholesky(cov.view()) {
                Ok(l) => chols.push(Some(l)),
                Err(e) if require_pd => {
                    return Err(Error::config(format!("component {m} covariance: {e}")))
                }
                Err(_) => chols.push(None),
            }
        }
        let log_weights = weights.iter().map(|w| w.ln()).collect();
        Ok(GaussianMixturePrior { weights, log_weights, means, covs, chols, d })
    }

    /// Single Gaussian N(mean, cov).
    pub fn single(mean: Array1<f64>, cov: Array2<f64>) -> Result<Self> {
        Self::new(vec![1.0], vec![mean], vec![cov])
    }

    /// Mixture with diagonal component covariances.
    pub fn diagonal(
        weights: Vec<f64>,
        means: Vec<Array1<f64>>,
        variances: Vec<Array1<f64>>,
    ) -> Result<Self> {
        let covs = variances
            .into_iter()
            .map(|v| Array2::from_diag(&v))
            .collect();
        Self::new(weights, means, covs)
    }

    /// Standard normal in d dimensions.
    pub fn standard(d: usize) -> Self {
        Self::single(Array1::zeros(d), Array2::eye(d)).expect("standard prior")
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn n_components(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn mean_of(&self, m: usize) -> ArrayView1<'_, f64> {
        self.means[m].view()
    }

    pub fn cov_of(&self, m: usize) -> ArrayView2<'_, f64> {
        self.covs[m].view()
    }

    /// Mixture mean and covariance in data space.
    pub fn moments(&self) -> (Array1<f64>, Array2<f64>) {
        let mut mean = Array1::<f64>::zeros(self.d);
        for (w, m) in self.weights.iter().zip(&self.means) {
            mean = mean + m.mapv(|v| v * w);
        }
        let mut cov = Array2::<f64>::zeros((self.d, self.d));
        for ((w, m), c) in self.weights.iter().zip(&self.means).zip(&self.covs) {
            let dm = m - &mean;
            for i in 0..self.d {
                for j in 0..self.d {
                    cov[[i, j]] += w * (c[[i, j]] + dm[i] * dm[j]);
                }
            }
        }
        (mean, cov)
    }

    /// Draw n samples. Panics on pushforward priors without Cholesky factors.
    pub fn sample_batch(&self, rng: &mut ChaCha8Rng, n: usize) -> Array2<f64> {
        self.sample_batch_labelled(rng, n).0
    }

    /// Draw n samples together with the index of the component each came from.
    pub fn sample_batch_labelled(
        &self,
        rng: &mut ChaCha8Rng,
        n: usize,
    ) -> (Array2<f64>, Vec<usize>) {
        let mut out = Array2::<f64>::zeros((n, self.d));
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let u: f64 = rng.gen();
            let mut acc = 0.0;
            let mut pick = self.weights.len() - 1;
            for (m, &w) in self.weights.iter().enumerate() {
                acc += w;
                if u < acc {
                    pick = m;
                    break;
                }
            }
            let l = self.chols[pick]
                .as_ref()
                .expect("sampling requires positive-definite components");
            let z: Array1<f64> =
                Array1::from_iter((0..self.d).map(|_| rng.sample::<f64, _>(StandardNormal)));
            let x = &self.means[pick] + &l.dot(&z);
            out.row_mut(i).assign(&x);
            labels.push(pick);
        }
        (out, labels)
    }

    /// Marginal components at step k (k = 0 gives the data law; requires PD).
    pub(crate) fn marginal_components(
        &self,
        sch: &NoiseSchedule,
        k: usize,
    ) -> Result<Vec<MarginalComponent>> {
        let a = sch.alpha_bar(k);
        let mut out = Vec::with_capacity(self.n_components());
        for (mean, cov) in self.means.iter().zip(&self.covs) {
            let mut v = cov.mapv(|c| a * c);
            for i in 0..self.d {
                v[[i, i]] += 1.0 - a;
            }
            let chol = linalg::cholesky(v.view())?;
            let log_det = linalg::chol_log_det(chol.view());
            out.push(MarginalComponent { mean: mean.mapv(|m| a.sqrt() * m), chol, log_det });
        }
        Ok(out)
    }

    /// Per-row log densities of each marginal component (n x M), including
    /// component log-weights.
    fn component_log_densities(
        &self,
        comps: &[MarginalComponent],
        x: ArrayView2<f64>,
    ) -> (Array2<f64>, Vec<Array2<f64>>) {
        let n = x.nrows();
        let mm = comps.len();
        let mut logd = Array2::<f64>::zeros((n, mm));
        // g_m rows: -V_m^{-1} (x - mu_m), reused by score and Hessian products
        let mut neg_grads = Vec::with_capacity(mm);
        for (m, comp) in comps.iter().enumerate() {
            let diff = &x - &comp.mean.view().insert_axis(ndarray::Axis(0));
            let w = linalg::chol_solve_rows(comp.chol.view(), diff.view());
            for i in 0..n {
                let q: f64 = diff.row(i).dot(&w.row(i));
                logd[[i, m]] = self.log_weights[m]
                    - 0.5 * q
                    - 0.5 * comp.log_det
                    - self.d as f64 * LN_SQRT_2PI;
            }
            neg_grads.push(w);
        }
        (logd, neg_grads)
    }

    /// Marginal log-density ln p_k(x) for a batch of rows.
    pub fn marginal_log_density_batch(
        &self,
        sch: &NoiseSchedule,
        k: usize,
        x: ArrayView2<f64>,
    ) -> Result<Array1<f64>> {
        let comps = self.marginal_components(sch, k)?;
        let (logd, _) = self.component_log_densities(&comps, x);
        Ok(Array1::from_iter(
            logd.outer_iter().map(|row| log_sum_exp(row.as_slice().unwrap())),
        ))
    }

    /// Score of the marginal at step k, batched over rows, with log-sum-exp
    /// stabilized responsibilities.
    pub fn marginal_score_batch(
        &self,
        sch: &NoiseSchedule,
        k: usize,
        x: ArrayView2<f64>,
    ) -> Result<Array2<f64>> {
        let comps = self.marginal_components(sch, k)?;
        let (logd, neg_grads) = self.component_log_densities(&comps, x);
        let (n, mm) = logd.dim();
        let mut score = Array2::<f64>::zeros((n, self.d));
        let mut resp = vec![0.0; mm];
        for i in 0..n {
            softmax_from_log(logd.row(i).as_slice().unwrap(), &mut resp);
            for (m, ng) in neg_grads.iter().enumerate() {
                let r = resp[m];
                for j in 0..self.d {
                    score[[i, j]] -= r * ng[[i, j]];
                }
            }
        }
        Ok(score)
    }

    pub fn marginal_score(
        &self,
        sch: &NoiseSchedule,
        k: usize,
        x: ArrayView1<f64>,
    ) -> Result<Array1<f64>> {
        let xm = x.insert_axis(ndarray::Axis(0));
        Ok(self.marginal_score_batch(sch, k, xm)?.row(0).to_owned())
    }

    /// Hessian-vector products of ln p_k, row-wise:
    /// `H v = sum_m r_m g_m (g_m . v) - s (s . v) - sum_m r_m V_m^{-1} v`
    /// with `g_m` the component score and `s` the mixture score.
    pub fn marginal_score_hvp_batch(
        &self,
        sch: &NoiseSchedule,
        k: usize,
        x: ArrayView2<f64>,
        v: ArrayView2<f64>,
    ) -> Result<Array2<f64>> {
        let comps = self.marginal_components(sch, k)?;
        let (logd, neg_grads) = self.component_log_densities(&comps, x);
        let (n, mm) = logd.dim();
        let mut out = Array2::<f64>::zeros((n, self.d));
        let mut resp = vec![0.0; mm];
        for i in 0..n {
            softmax_from_log(logd.row(i).as_slice().unwrap(), &mut resp);
            let vi = v.row(i);
            let mut s = Array1::<f64>::zeros(self.d);
            for (m, ng) in neg_grads.iter().enumerate() {
                for j in 0..self.d {
                    s[j] -= resp[m] * ng[[i, j]];
                }
            }
            let sv = s.dot(&vi);
            for j in 0..self.d {
                out[[i, j]] -= s[j] * sv;
            }
            for (m, ng) in neg_grads.iter().enumerate() {
                let g = ng.row(i).mapv(|t| -t);
                let gv = g.dot(&vi);
                let viv = linalg::chol_solve(comps[m].chol.view(), vi);
                for j in 0..self.d {
                    out[[i, j]] += resp[m] * (g[j] * gv - viv[j]);
                }
            }
        }
        Ok(out)
    }

    /// Per-component denoising-posterior moments at step k >= 1.
    pub fn posterior_moments(
        &self,
        sch: &NoiseSchedule,
        k: usize,
    ) -> Result<Vec<PosteriorMoments>> {
        let a = sch.alpha_bar(k);
        if 1.0 - a <= 0.0 {
            return Err(Error::numerical("posterior moments undefined at abar = 1"));
        }
        let c = a / (1.0 - a);
        let mut out = Vec::with_capacity(self.n_components());
        for (mean, cov) in self.means.iter().zip(&self.covs) {
            // M = I + c Sigma; Sigma_hat = Sigma M^{-1} = (M^{-1} Sigma)^T
            let mut m_mat = cov.mapv(|s| c * s);
            for i in 0..self.d {
                m_mat[[i, i]] += 1.0;
            }
            let lm = linalg::cholesky(m_mat.view()).map_err(|e| {
                Error::numerical(format!("posterior moment factorization failed: {e}"))
            })?;
            let mut cov_hat = linalg::chol_solve_mat(lm.view(), cov.view());
            linalg::symmetrize(&mut cov_hat);
            let offset = linalg::chol_solve(lm.view(), mean.view());
            let slope = cov_hat.mapv(|s| s * a.sqrt() / (1.0 - a));
            out.push(PosteriorMoments { offset, slope, cov: cov_hat });
        }
        Ok(out)
    }

    /// Posterior responsibilities P(component | x_k), batched (n x M).
    pub fn responsibilities_batch(
        &self,
        sch: &NoiseSchedule,
        k: usize,
        x: ArrayView2<f64>,
    ) -> Result<Array2<f64>> {
        let comps = self.marginal_components(sch, k)?;
        let (logd, _) = self.component_log_densities(&comps, x);
        let mut out = logd.clone();
        let mm = logd.ncols();
        let mut resp = vec![0.0; mm];
        for (i, row) in logd.outer_iter().enumerate() {
            softmax_from_log(row.as_slice().unwrap(), &mut resp);
            for m in 0..mm {
                out[[i, m]] = resp[m];
            }
        }
        Ok(out)
    }

    /// Exact posterior mean E[X0 | X_k = x] per row.
    pub fn denoised_mean_batch(
        &self,
        sch: &NoiseSchedule,
        k: usize,
        x: ArrayView2<f64>,
    ) -> Result<Array2<f64>> {
        let resp = self.responsibilities_batch(sch, k, x)?;
        let moments = self.posterior_moments(sch, k)?;
        let n = x.nrows();
        let mut out = Array2::<f64>::zeros((n, self.d));
        for (m, pm) in moments.iter().enumerate() {
            let mu = &x.dot(&pm.slope) + &pm.offset.view().insert_axis(ndarray::Axis(0));
            for i in 0..n {
                let r = resp[[i, m]];
                for j in 0..self.d {
                    out[[i, j]] += r * mu[[i, j]];
                }
            }
        }
        Ok(out)
    }

    /// Data-space log density.
    pub fn log_density(&self, x: ArrayView1<f64>) -> f64 {
        let mut terms = Vec::with_capacity(self.n_components());
        for (m, (mean, _cov)) in self.means.iter().zip(&self.covs).enumerate() {
            let l = self.chols[m].as_ref().expect("log_density requires PD components");
            let diff = &x.to_owned() - mean;
            let w = linalg::chol_solve(l.view(), diff.view());
            let q = diff.dot(&w);
            terms.push(
                self.log_weights[m]
                    - 0.5 * q
                    - 0.5 * linalg::chol_log_det(l.view())
                    - self.d as f64 * LN_SQRT_2PI,
            );
        }
        log_sum_exp(&terms)
    }

    /// Mixture CDF for one-dimensional priors.
    pub fn cdf_1d(&self, x: f64) -> f64 {
        assert_eq!(self.d, 1, "cdf_1d needs a 1-D prior");
        self.weights
            .iter()
            .enumerate()
            .map(|(m, w)| w * norm_cdf((x - self.means[m][0]) / self.covs[m][[0, 0]].sqrt()))
            .sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{domain, substream};
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    fn sch() -> NoiseSchedule {
        NoiseSchedule::linear(1000, 1e-4, 2e-2).unwrap()
    }

    #[test]
    fn single_gaussian_score_is_linear() {
        let prior = GaussianMixturePrior::diagonal(
            vec![1.0],
            vec![array![0.4]],
            vec![array![2.25]],
        )
        .unwrap();
        let s = sch();
        for &k in &[1usize, 137, 500, 1000] {
            let a = s.alpha_bar(k);
            let x = array![0.7];
            let got = prior.marginal_score(&s, k, x.view()).unwrap();
            let want = -(x[0] - 0.4 * a.sqrt()) / (a * 2.25 + 1.0 - a);
            assert_abs_diff_eq!(got[0], want, epsilon = 1e-12);
        }
    }

    #[test]
    fn deep_noise_score_approaches_standard_normal() {
        let prior = GaussianMixturePrior::diagonal(
            vec![0.5, 0.5],
            vec![array![-1.0], array![1.5]],
            vec![array![0.5], array![1.0]],
        )
        .unwrap();
        let s = sch();
        let x = array![0.3];
        let got = prior.marginal_score(&s, 1000, x.view()).unwrap();
        // abar_N ~ 4e-5: marginal is within O(abar) of N(0,1)
        assert_abs_diff_eq!(got[0], -x[0], epsilon = 0.01);
    }

    /// Finite-difference oracle on the analytically evaluated log density.
    #[test]
    fn mixture_score_matches_log_density_differences() {
        let prior = GaussianMixturePrior::diagonal(
            vec![0.3, 0.7],
            vec![array![-1.0], array![2.0]],
            vec![array![0.49], array![1.44]],
        )
        .unwrap();
        let s = sch();
        let k = 500;
        let h = 1e-5;
        let x = array![[0.3]];
        let lp = |v: f64| {
            prior
                .marginal_log_density_batch(&s, k, array![[v]].view())
                .unwrap()[0]
        };
        let fd = (lp(0.3 + h) - lp(0.3 - h)) / (2.0 * h);
        let got = prior.marginal_score_batch(&s, k, x.view()).unwrap()[[0, 0]];
        assert_abs_diff_eq!(got, fd, epsilon = 1e-6);
    }

    #[test]
    fn hessian_product_matches_score_differences() {
        let prior = GaussianMixturePrior::new(
            vec![0.4, 0.6],
            vec![array![0.0, 0.5], array![1.0, -0.5]],
            vec![
                array![[1.0, 0.6], [0.6, 1.0]],
                array![[0.5, -0.1], [-0.1, 0.8]],
            ],
        )
        .unwrap();
        let s = sch();
        let k = 300;
        let x = array![[0.2, -0.4]];
        let v = array![[0.3, 1.1]];
        let h = 1e-6;
        let xp = &x + &v.mapv(|t| t * h);
        let xm = &x - &v.mapv(|t| t * h);
        let sp = prior.marginal_score_batch(&s, k, xp.view()).unwrap();
        let sm = prior.marginal_score_batch(&s, k, xm.view()).unwrap();
        let fd = (&sp - &sm) / (2.0 * h);
        let got = prior
            .marginal_score_hvp_batch(&s, k, x.view(), v.view())
            .unwrap();
        for j in 0..2 {
            assert_abs_diff_eq!(got[[0, j]], fd[[0, j]], epsilon = 1e-4);
        }
    }

    #[test]
    fn denoised_mean_is_tweedie_identity() {
        // E[X0|Xk] computed from posterior moments must equal the Tweedie map
        // (x + (1 - abar) score)/sqrt(abar) for mixtures.
        let prior = GaussianMixturePrior::diagonal(
            vec![0.5, 0.5],
            vec![array![-1.5], array![1.5]],
            vec![array![0.09], array![0.09]],
        )
        .unwrap();
        let s = sch();
        for &k in &[1usize, 250, 500, 900] {
            let a = s.alpha_bar(k);
            let x = array![[0.7], [-0.3], [2.0]];
            let mean = prior.denoised_mean_batch(&s, k, x.view()).unwrap();
            let score = prior.marginal_score_batch(&s, k, x.view()).unwrap();
            for i in 0..3 {
                let tweedie = (x[[i, 0]] + (1.0 - a) * score[[i, 0]]) / a.sqrt();
                assert_abs_diff_eq!(mean[[i, 0]], tweedie, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn sampling_matches_moments() {
        let prior = GaussianMixturePrior::new(
            vec![1.0],
            vec![array![1.0, -1.0]],
            vec![array![[1.0, 0.9], [0.9, 1.0]]],
        )
        .unwrap();
        let mut rng = substream(5, domain::ORACLE, 0);
        let xs = prior.sample_batch(&mut rng, 60_000);
        let n = xs.nrows() as f64;
        let mean0 = xs.column(0).sum() / n;
        let mean1 = xs.column(1).sum() / n;
        let cov01 = xs
            .outer_iter()
            .map(|r| (r[0] - mean0) * (r[1] - mean1))
            .sum::<f64>()
            / n;
        assert_abs_diff_eq!(mean0, 1.0, epsilon = 0.02);
        assert_abs_diff_eq!(mean1, -1.0, epsilon = 0.02);
        assert_abs_diff_eq!(cov01, 0.9, epsilon = 0.03);
    }

    #[test]
    fn validation_rejects_bad_mixtures() {
        assert!(GaussianMixturePrior::new(
            vec![0.5, 0.6],
            vec![array![0.0], array![0.0]],
            vec![array![[1.0]], array![[1.0]]],
        )
        .is_err());
        assert!(GaussianMixturePrior::new(
            vec![1.0],
            vec![array![0.0, 0.0]],
            vec![array![[1.0, 2.0], [2.0, 1.0]]],
        )
        .is_err());
    }
}
