//! Analytic score models and analytic h-transforms over Gaussian-mixture data,
//! plus exact ground-truth posteriors for scoring conditional samplers.

mod htransform;
mod posterior;
mod prior;

pub use htransform::{HEval, HKind, HTransform};
pub use posterior::{true_posterior, PosteriorOracle};
pub use prior::{GaussianMixturePrior, PosteriorMoments};

use ndarray::{Array1, Array2, ArrayView2, Axis};

use crate::engine::{CondData, ScoreModel, TimeInput};
use crate::error::{Error, Result};
use crate::schedule::NoiseSchedule;

/// Linear measurement operator: either a coordinate mask or a full matrix.
#[derive(Debug, Clone)]
pub enum Operator {
    /// Selects the coordinates flagged true.
    Mask(Vec<bool>),
    /// General n x d matrix.
    Matrix(Array2<f64>),
}

impl Operator {
    pub fn n_obs(&self) -> usize {
        match self {
            Operator::Mask(m) => m.iter().filter(|&&b| b).count(),
            Operator::Matrix(a) => a.nrows(),
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Operator::Mask(m) => m.len(),
            Operator::Matrix(a) => a.ncols(),
        }
    }

    /// Dense matrix form (masks become 0/1 selection rows).
    pub fn as_matrix(&self) -> Array2<f64> {
        match self {
            Operator::Matrix(a) => a.clone(),
            Operator::Mask(m) => {
                let d = m.len();
                let rows: Vec<usize> = m
                    .iter()
                    .enumerate()
                    .filter_map(|(i, &b)| b.then_some(i))
                    .collect();
                let mut a = Array2::<f64>::zeros((rows.len(), d));
                for (r, &i) in rows.iter().enumerate() {
                    a[[r, i]] = 1.0;
                }
                a
            }
        }
    }

    /// Observed coordinate indices, for mask operators.
    pub fn mask_indices(&self) -> Option<Vec<usize>> {
        match self {
            Operator::Mask(m) => Some(
                m.iter()
                    .enumerate()
                    .filter_map(|(i, &b)| b.then_some(i))
                    .collect(),
            ),
            Operator::Matrix(_) => None,
        }
    }

    /// Apply to a batch of rows: returns n x n_obs.
    pub fn apply_batch(&self, x: ArrayView2<f64>) -> Array2<f64> {
        match self {
            Operator::Mask(m) => {
                let idx: Vec<usize> = m
                    .iter()
                    .enumerate()
                    .filter_map(|(i, &b)| b.then_some(i))
                    .collect();
                let mut out = Array2::<f64>::zeros((x.nrows(), idx.len()));
                for (c, &i) in idx.iter().enumerate() {
                    out.column_mut(c).assign(&x.column(i));
                }
                out
            }
            Operator::Matrix(a) => x.dot(&a.t()),
        }
    }

    /// Apply the transpose to a batch of n x n_obs rows: returns n x d.
    pub fn apply_t_batch(&self, v: ArrayView2<f64>) -> Array2<f64> {
        match self {
            Operator::Mask(m) => {
                let idx: Vec<usize> = m
                    .iter()
                    .enumerate()
                    .filter_map(|(i, &b)| b.then_some(i))
                    .collect();
                let mut out = Array2::<f64>::zeros((v.nrows(), m.len()));
                for (c, &i) in idx.iter().enumerate() {
                    out.column_mut(i).assign(&v.column(c));
                }
                out
            }
            Operator::Matrix(a) => v.dot(a),
        }
    }
}

/// A linear observation `y = A(x0) + eta` with `eta ~ N(0, noise_std^2 I)`.
/// `noise_std = 0` encodes the hard constraint `A(x0) = y`.
#[derive(Debug, Clone)]
pub struct Observation {
    pub operator: Operator,
    pub y: Array1<f64>,
    pub noise_std: f64,
}

impl Observation {
    pub fn new(operator: Operator, y: Array1<f64>, noise_std: f64) -> Result<Self> {
        if operator.n_obs() != y.len() {
            return Err(Error::config(format!(
                "observation length {} does not match operator output size {}",
                y.len(),
                operator.n_obs()
            )));
        }
        if operator.n_obs() == 0 {
            return Err(Error::config("operator selects no coordinates"));
        }
        if !(noise_std >= 0.0) {
            return Err(Error::config("noise_std must be >= 0"));
        }
        Ok(Observation { operator, y, noise_std })
    }

    pub fn hard_mask(mask: Vec<bool>, y: Array1<f64>) -> Result<Self> {
        Self::new(Operator::Mask(mask), y, 0.0)
    }

    pub fn is_hard(&self) -> bool {
        self.noise_std == 0.0
    }

    pub fn dim(&self) -> usize {
        self.operator.dim()
    }

    /// Mask as a 0/1 vector, for mask operators.
    pub fn mask_f64(&self) -> Option<Array1<f64>> {
        match &self.operator {
            Operator::Mask(m) => Some(Array1::from_iter(
                m.iter().map(|&b| if b { 1.0 } else { 0.0 }),
            )),
            Operator::Matrix(_) => None,
        }
    }

    /// Full-dimension vector with y embedded at the observed coordinates
    /// (zero elsewhere), for mask operators.
    pub fn embed_y(&self) -> Option<Array1<f64>> {
        let idx = self.operator.mask_indices()?;
        let mut out = Array1::<f64>::zeros(self.dim());
        for (c, &i) in idx.iter().enumerate() {
            out[i] = self.y[c];
        }
        Some(out)
    }

    /// ln N(y | A x0, noise_std^2 I) per row; requires a soft constraint.
    pub fn log_likelihood_batch(&self, x0: ArrayView2<f64>) -> Result<Array1<f64>> {
        if self.is_hard() {
            return Err(Error::domain("hard constraints have no likelihood density"));
        }
        let res = &self.operator.apply_batch(x0) - &self.y.view().insert_axis(Axis(0));
        let v = self.noise_std * self.noise_std;
        let n_obs = self.y.len() as f64;
        Ok(Array1::from_iter(res.outer_iter().map(|r| {
            let q: f64 = r.iter().map(|t| t * t).sum();
            -0.5 * q / v - 0.5 * n_obs * (2.0 * std::f64::consts::PI * v).ln()
        })))
    }

    /// Gradient of the log-likelihood with respect to x0, per row.
    pub fn grad_log_likelihood_batch(&self, x0: ArrayView2<f64>) -> Result<Array2<f64>> {
        if self.is_hard() {
            return Err(Error::domain("hard constraints have no likelihood density"));
        }
        let res = &self.y.view().insert_axis(Axis(0)) - &self.operator.apply_batch(x0);
        let v = self.noise_std * self.noise_std;
        Ok(self.operator.apply_t_batch(res.view()).mapv(|t| t / v))
    }
}

/// Eps-parametrised wrapper around the analytic mixture score:
/// `eps_hat = -sqrt(1 - abar_k) * grad ln p_k`.
pub struct OracleEpsModel {
    prior: GaussianMixturePrior,
}

impl OracleEpsModel {
    pub fn new(prior: GaussianMixturePrior) -> Self {
        OracleEpsModel { prior }
    }

    pub fn prior(&self) -> &GaussianMixturePrior {
        &self.prior
    }

    fn step_of(times: &TimeInput) -> Result<usize> {
        times.uniform_step().ok_or_else(|| {
            Error::unsupported(
                "analytic score oracles take a single shared step, not per-coordinate time",
            )
        })
    }
}

impl ScoreModel for OracleEpsModel {
    fn dim(&self) -> usize {
        self.prior.dim()
    }

    fn eps_batch(
        &self,
        sch: &NoiseSchedule,
        times: &TimeInput,
        x: ArrayView2<f64>,
        _cond: &CondData,
    ) -> Result<Array2<f64>> {
        // training batches mix steps; evaluate row-wise in that case
        if let TimeInput::PerRow(ks) = times {
            if ks.len() != x.nrows() {
                return Err(Error::config("per-row time length mismatch"));
            }
            let mut out = Array2::<f64>::zeros(x.raw_dim());
            for (i, (&k, row)) in ks.iter().zip(x.outer_iter()).enumerate() {
                let c = (1.0 - sch.alpha_bar(k)).sqrt();
                let s = self.prior.marginal_score(sch, k, row)?;
                out.row_mut(i).assign(&s.mapv(|v| -c * v));
            }
            return Ok(out);
        }
        let k = Self::step_of(times)?;
        let c = (1.0 - sch.alpha_bar(k)).sqrt();
        Ok(self.prior.marginal_score_batch(sch, k, x)?.mapv(|s| -c * s))
    }

    fn eps_vjp_x(
        &self,
        sch: &NoiseSchedule,
        times: &TimeInput,
        x: ArrayView2<f64>,
        _cond: &CondData,
        cot: ArrayView2<f64>,
    ) -> Result<Array2<f64>> {
        let k = Self::step_of(times)?;
        let c = (1.0 - sch.alpha_bar(k)).sqrt();
        // Jacobian of eps is -c * Hessian(ln p), symmetric
        Ok(self
            .prior
            .marginal_score_hvp_batch(sch, k, x, cot)?
            .mapv(|h| -c * h))
    }
}

/// Tweedie denoising: `x0_hat = (x - sqrt(1 - abar_k) eps_hat) / sqrt(abar_k)`,
/// equivalently `(x + (1 - abar_k) score) / sqrt(abar_k)`.
pub fn tweedie_denoise(
    model: &dyn ScoreModel,
    sch: &NoiseSchedule,
    k: usize,
    x: ArrayView2<f64>,
    cond: &CondData,
) -> Result<Array2<f64>> {
    let a = sch.alpha_bar(k);
    if a < 1e-12 {
        return Err(Error::numerical(format!(
            "tweedie denoising degenerate: abar_{k} = {a:.3e} below 1e-12"
        )));
    }
    let eps = model.eps_batch(sch, &TimeInput::Uniform(k), x, cond)?;
    let c = (1.0 - a).sqrt();
    Ok((&x.to_owned() - &eps.mapv(|e| c * e)).mapv(|v| v / a.sqrt()))
}

/// Conditional-marginal score `grad ln p_k(x | obs)` obtained by pushing the
/// exact posterior through the forward kernel. This is the left-hand side of
/// the Bayes decomposition `score_cond = score + grad ln h`.
pub fn conditioned_marginal_score_batch(
    posterior: &PosteriorOracle,
    sch: &NoiseSchedule,
    k: usize,
    x: ArrayView2<f64>,
) -> Result<Array2<f64>> {
    posterior.pushforward_prior()?.marginal_score_batch(sch, k, x)
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
    fn tweedie_identity_and_unit_prior_shrinkage() {
        let s = sch();
        let prior = GaussianMixturePrior::standard(1);
        let model = OracleEpsModel::new(prior);
        // N(0,1) prior: x0_hat = x sqrt(abar)
        for &k in &[1usize, 400, 1000] {
            let x = array![[0.8], [-1.3]];
            let got = tweedie_denoise(&model, &s, k, x.view(), &CondData::None).unwrap();
            let a = s.alpha_bar(k);
            for i in 0..2 {
                assert_abs_diff_eq!(got[[i, 0]], x[[i, 0]] * a.sqrt(), epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn tweedie_identity_at_no_noise() {
        // abar = 1 - 1e-9: x0_hat ~ x for score ~ 0 at x near the mean
        let s = NoiseSchedule::custom(vec![1e-9]).unwrap();
        let prior = GaussianMixturePrior::standard(1);
        let model = OracleEpsModel::new(prior);
        let x = array![[0.5]];
        let got = tweedie_denoise(&model, &s, 1, x.view(), &CondData::None).unwrap();
        assert_abs_diff_eq!(got[[0, 0]], 0.5, epsilon = 1e-6);
    }

    #[test]
    fn tweedie_rejects_degenerate_alpha_bar() {
        let s = NoiseSchedule::custom(vec![1.0 - 1e-13; 3]).unwrap();
        let prior = GaussianMixturePrior::standard(1);
        let model = OracleEpsModel::new(prior);
        let x = array![[0.0]];
        assert!(tweedie_denoise(&model, &s, 3, x.view(), &CondData::None).is_err());
    }

    /// Quadrature oracle: E[X0 | Xk = x] for a 1-D mixture by trapezoid
    /// integration on a dense grid.
    #[test]
    fn tweedie_matches_quadrature_posterior_mean() {
        let s = sch();
        let prior = GaussianMixturePrior::diagonal(
            vec![0.5, 0.5],
            vec![array![-1.2], array![1.2]],
            vec![array![0.25], array![0.49]],
        )
        .unwrap();
        let model = OracleEpsModel::new(prior.clone());
        let k = 500;
        let a = s.alpha_bar(k);
        let x = 0.7;
        let n = 10_000;
        let (lo, hi) = (-8.0, 8.0);
        let mut num = 0.0;
        let mut den = 0.0;
        for i in 0..=n {
            let x0 = lo + (hi - lo) * i as f64 / n as f64;
            let w = if i == 0 || i == n { 0.5 } else { 1.0 };
            let prior_d = prior.log_density(array![x0].view()).exp();
            let lik =
                (-(x - a.sqrt() * x0).powi(2) / (2.0 * (1.0 - a))).exp();
            num += w * x0 * prior_d * lik;
            den += w * prior_d * lik;
        }
        let oracle = num / den;
        let got = tweedie_denoise(&model, &s, k, array![[x]].view(), &CondData::None).unwrap();
        assert_abs_diff_eq!(got[[0, 0]], oracle, epsilon = 1e-5);
    }

    #[test]
    fn operator_round_trips() {
        let op = Operator::Mask(vec![true, false, true]);
        assert_eq!(op.n_obs(), 2);
        let x = array![[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]];
        let ax = op.apply_batch(x.view());
        assert_eq!(ax, array![[1.0, 3.0], [4.0, 6.0]]);
        let back = op.apply_t_batch(ax.view());
        assert_eq!(back, array![[1.0, 0.0, 3.0], [4.0, 0.0, 6.0]]);
        let dense = op.as_matrix();
        assert_eq!(dense.dot(&x.row(0)), array![1.0, 3.0]);
    }

    #[test]
    fn observation_validation() {
        assert!(Observation::new(Operator::Mask(vec![true, false]), array![1.0, 2.0], 0.0).is_err());
        assert!(Observation::new(Operator::Mask(vec![false, false]), array![], 0.0).is_err());
        let obs = Observation::hard_mask(vec![true, false], array![0.5]).unwrap();
        assert!(obs.is_hard());
        assert_eq!(obs.embed_y().unwrap(), array![0.5, 0.0]);
        assert!(obs.log_likelihood_batch(array![[0.0, 0.0]].view()).is_err());
    }

    #[test]
    fn likelihood_gradient_matches_finite_differences() {
        let obs = Observation::new(
            Operator::Matrix(array![[1.0, 1.0], [0.5, -0.2]]),
            array![0.3, -0.1],
            0.7,
        )
        .unwrap();
        let x = array![[0.4, -0.9]];
        let g = obs.grad_log_likelihood_batch(x.view()).unwrap();
        let h = 1e-6;
        for j in 0..2 {
            let mut xp = x.clone();
            xp[[0, j]] += h;
            let mut xm = x.clone();
            xm[[0, j]] -= h;
            let fd = (obs.log_likelihood_batch(xp.view()).unwrap()[0]
                - obs.log_likelihood_batch(xm.view()).unwrap()[0])
                / (2.0 * h);
            assert_abs_diff_eq!(g[[0, j]], fd, epsilon = 1e-6);
        }
    }

    /// The eps VJP of the oracle model is a true vector-Jacobian product.
    #[test]
    fn oracle_vjp_matches_finite_differences() {
        let prior = GaussianMixturePrior::new(
            vec![0.5, 0.5],
            vec![array![0.0, 0.0], array![1.0, 1.0]],
            vec![
                array![[1.0, 0.4], [0.4, 1.0]],
                array![[0.6, 0.0], [0.0, 0.6]],
            ],
        )
        .unwrap();
        let s = sch();
        let model = OracleEpsModel::new(prior);
        let k = 200;
        let x = array![[0.3, -0.1]];
        let u = array![[1.0, 0.0]]; // cotangent picks out row of J^T
        let vjp = model
            .eps_vjp_x(&s, &TimeInput::Uniform(k), x.view(), &CondData::None, u.view())
            .unwrap();
        let h = 1e-6;
        for j in 0..2 {
            let mut xp = x.clone();
            xp[[0, j]] += h;
            let mut xm = x.clone();
            xm[[0, j]] -= h;
            let ep = model
                .eps_batch(&s, &TimeInput::Uniform(k), xp.view(), &CondData::None)
                .unwrap();
            let em = model
                .eps_batch(&s, &TimeInput::Uniform(k), xm.view(), &CondData::None)
                .unwrap();
            // d eps_0 / d x_j since u = e_0
            let fd = (ep[[0, 0]] - em[[0, 0]]) / (2.0 * h);
            assert_abs_diff_eq!(vjp[[0, j]], fd, epsilon = 1e-5);
        }
    }

    #[test]
    fn mc_check_forwarded_prior_sampling() {
        // smoke test that OracleEpsModel::prior is usable for data generation
        let prior = GaussianMixturePrior::standard(2);
        let model = OracleEpsModel::new(prior);
        let mut rng = substream(0, domain::ORACLE, 1);
        let xs = model.prior().sample_batch(&mut rng, 1000);
        assert_eq!(xs.dim(), (1000, 2));
    }
}
