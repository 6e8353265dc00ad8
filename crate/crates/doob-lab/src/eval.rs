//! Ground-truth comparison machinery: Wasserstein distances, moment
//! diagnostics, constraint residuals and 1-D quadrature posterior oracles.

use ndarray::{Array1, Array2, ArrayView2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::oracle::{GaussianMixturePrior, Observation};

/// W1 between two empirical distributions on the line.
///
/// Equal sample counts reduce to the sorted quantile coupling; unequal counts
/// integrate |F_a - F_b| over the merged support. Both are exact and symmetric.
pub fn wasserstein1_1d(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::domain("wasserstein1_1d: empty sample set"));
    }
    let mut sa = a.to_vec();
    let mut sb = b.to_vec();
    sa.sort_unstable_by(|x, y| x.partial_cmp(y).expect("non-NaN samples"));
    sb.sort_unstable_by(|x, y| x.partial_cmp(y).expect("non-NaN samples"));
    if sa.len() == sb.len() {
        let n = sa.len() as f64;
        return Ok(sa.iter().zip(&sb).map(|(x, y)| (x - y).abs()).sum::<f64>() / n);
    }
    // integral of |F_a - F_b| over the merged grid
    let (mut ia, mut ib) = (0usize, 0usize);
    let (na, nb) = (sa.len() as f64, sb.len() as f64);
    let mut total = 0.0;
    let mut prev = sa[0].min(sb[0]);
    while ia < sa.len() || ib < sb.len() {
        let next = match (sa.get(ia), sb.get(ib)) {
            (Some(&x), Some(&y)) => x.min(y),
            (Some(&x), None) => x,
            (None, Some(&y)) => y,
            (None, None) => break,
        };
        total += (next - prev) * ((ia as f64 / na) - (ib as f64 / nb)).abs();
        while ia < sa.len() && sa[ia] <= next {
            ia += 1;
        }
        while ib < sb.len() && sb[ib] <= next {
            ib += 1;
        }
        prev = next;
    }
    Ok(total)
}

/// Mean 1-D W1 over uniformly random unit projections.
pub fn sliced_w1(
    a: ArrayView2<f64>,
    b: ArrayView2<f64>,
    n_projections: usize,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    if a.ncols() != b.ncols() {
        return Err(Error::domain("sliced_w1: dimension mismatch"));
    }
    if a.nrows() == 0 || b.nrows() == 0 {
        return Err(Error::domain("sliced_w1: empty sample set"));
    }
    if n_projections == 0 {
        return Err(Error::domain("sliced_w1: need at least one projection"));
    }
    let d = a.ncols();
    let mut total = 0.0;
    for _ in 0..n_projections {
        let mut u = Array1::<f64>::zeros(d);
        loop {
            for v in u.iter_mut() {
                *v = rng.sample(StandardNormal);
            }
            let norm = u.dot(&u).sqrt();
            if norm > 1e-12 {
                u.mapv_inplace(|v| v / norm);
                break;
            }
        }
        let pa: Vec<f64> = a.outer_iter().map(|r| r.dot(&u)).collect();
        let pb: Vec<f64> = b.outer_iter().map(|r| r.dot(&u)).collect();
        total += wasserstein1_1d(&pa, &pb)?;
    }
    Ok(total / n_projections as f64)
}

/// W1 along a fixed (not necessarily unit) direction.
pub fn w1_along(a: ArrayView2<f64>, b: ArrayView2<f64>, direction: &Array1<f64>) -> Result<f64> {
    let pa: Vec<f64> = a.outer_iter().map(|r| r.dot(direction)).collect();
    let pb: Vec<f64> = b.outer_iter().map(|r| r.dot(direction)).collect();
    wasserstein1_1d(&pa, &pb)
}

/// Per-sample residual `||A(x) - y|| / sqrt(n_obs)`; returns the mean residual
/// and the fraction below the inlier threshold tau.
pub fn constraint_residual(
    obs: &Observation,
    samples: ArrayView2<f64>,
    tau: f64,
) -> (f64, f64) {
    let ax = obs.operator.apply_batch(samples);
    let n_obs = obs.y.len() as f64;
    let n = samples.nrows() as f64;
    let mut mean_rmse = 0.0;
    let mut inliers = 0.0;
    for row in ax.outer_iter() {
        let sq: f64 = row
            .iter()
            .zip(obs.y.iter())
            .map(|(a, y)| (a - y) * (a - y))
            .sum();
        let rmse = (sq / n_obs).sqrt();
        mean_rmse += rmse;
        if rmse <= tau {
            inliers += 1.0;
        }
    }
    (mean_rmse / n, inliers / n)
}

/// Empirical mean and covariance of sample rows.
pub fn mean_and_cov(samples: ArrayView2<f64>) -> (Array1<f64>, Array2<f64>) {
    let (n, d) = samples.dim();
    let nf = n as f64;
    let mut mean = Array1::<f64>::zeros(d);
    for row in samples.outer_iter() {
        mean = mean + &row;
    }
    mean.mapv_inplace(|v| v / nf);
    let mut cov = Array2::<f64>::zeros((d, d));
    for row in samples.outer_iter() {
        let c = &row.to_owned() - &mean;
        for i in 0..d {
            for j in 0..d {
                cov[[i, j]] += c[i] * c[j];
            }
        }
    }
    cov.mapv_inplace(|v| v / nf);
    (mean, cov)
}

/// Kolmogorov-Smirnov statistic of samples against a CDF.
pub fn ks_statistic(samples: &[f64], cdf: impl Fn(f64) -> f64) -> f64 {
    let mut s = samples.to_vec();
    s.sort_unstable_by(|x, y| x.partial_cmp(y).expect("non-NaN samples"));
    let n = s.len() as f64;
    let mut ks: f64 = 0.0;
    for (i, &x) in s.iter().enumerate() {
        let f = cdf(x);
        ks = ks.max((f - i as f64 / n).abs()).max(((i + 1) as f64 / n - f).abs());
    }
    ks
}

/// What a 1-D quadrature posterior conditions on.
#[derive(Debug, Clone)]
pub enum PosteriorTarget1d {
    /// Indicator of (a, b); either bound may be infinite.
    Interval { a: f64, b: f64 },
    /// Soft linear-Gaussian observation (1-D operator).
    Obs(Observation),
}

/// Density table plus quadrature moments for a 1-D posterior.
#[derive(Debug, Clone)]
pub struct QuadraturePosterior {
    pub grid: Vec<f64>,
    /// Trapezoid-normalized density on the grid.
    pub density: Vec<f64>,
    pub mean: f64,
    pub variance: f64,
    /// Set when the grid does not visibly cover the posterior mass.
    pub mass_warning: bool,
}

/// Brute-force posterior for a 1-D mixture prior on a uniform grid.
pub fn quadrature_posterior_1d(
    prior: &GaussianMixturePrior,
    target: &PosteriorTarget1d,
    lo: f64,
    hi: f64,
    n_points: usize,
) -> Result<QuadraturePosterior> {
    if prior.dim() != 1 {
        return Err(Error::domain("quadrature_posterior_1d needs a 1-D prior"));
    }
    if n_points < 1000 {
        return Err(Error::domain("quadrature grid needs at least 1e3 points"));
    }
    if !(lo < hi) {
        return Err(Error::domain("grid bounds must satisfy lo < hi"));
    }
    if let PosteriorTarget1d::Obs(obs) = target {
        if obs.is_hard() {
            return Err(Error::unsupported(
                "hard observations concentrate on a point in 1-D; use the interval target",
            ));
        }
        if obs.dim() != 1 {
            return Err(Error::domain("observation must be one-dimensional"));
        }
    }

    let step = (hi - lo) / (n_points - 1) as f64;
    let grid: Vec<f64> = (0..n_points).map(|i| lo + step * i as f64).collect();
    let mut density = vec![0.0; n_points];
    for (i, &x) in grid.iter().enumerate() {
        let lp = prior.log_density(ndarray::aview1(&[x]));
        let lw = match target {
            PosteriorTarget1d::Interval { a, b } => {
                // closed test: measure-equivalent, and keeps the trapezoid
                // rule exact when a truncation bound sits on the grid edge
                if x >= *a && x <= *b {
                    0.0
                } else {
                    f64::NEG_INFINITY
                }
            }
            PosteriorTarget1d::Obs(obs) => {
                obs.log_likelihood_batch(ndarray::aview2(&[[x]]))?[0]
            }
        };
        density[i] = (lp + lw).exp();
    }

    let trapz = |f: &dyn Fn(usize) -> f64| -> f64 {
        let mut acc = 0.0;
        for i in 0..n_points {
            let w = if i == 0 || i + 1 == n_points { 0.5 } else { 1.0 };
            acc += w * f(i);
        }
        acc * step
    };
    let z = trapz(&|i| density[i]);
    if !(z > 0.0) {
        return Err(Error::numerical("posterior mass vanishes on the grid"));
    }
    for v in density.iter_mut() {
        *v /= z;
    }
    let mean = trapz(&|i| grid[i] * density[i]);
    let variance = trapz(&|i| (grid[i] - mean) * (grid[i] - mean) * density[i]);

    // tail check: edge density should be negligible unless the target itself
    // truncates there
    let peak = density.iter().cloned().fold(0.0, f64::max);
    // an edge only hides mass when the support extends past it; truncation
    // bounds at or inside the grid edge carry no mass beyond
    let (mut check_lo, mut check_hi) = (true, true);
    if let PosteriorTarget1d::Interval { a, b } = target {
        check_lo = *a < lo;
        check_hi = *b > hi;
    }
    let mass_warning = (check_lo && density[0] > 1e-8 * peak)
        || (check_hi && density[n_points - 1] > 1e-8 * peak);

    Ok(QuadraturePosterior { grid, density, mean, variance, mass_warning })
}

/// Named metrics of one strategy run against ground truth.
#[derive(Debug, Clone)]
pub struct MetricReport {
    pub w1_per_dim: Vec<f64>,
    pub sliced_w1: f64,
    /// L-infinity error of the sample mean against the exact mean.
    pub mean_err: f64,
    /// L-infinity error of the sample covariance against the exact covariance.
    pub cov_err: f64,
    pub constraint_rmse: Option<f64>,
    pub inlier_fraction: Option<f64>,
    pub n_samples: usize,
    pub n_reference: usize,
    pub seed: u64,
}

impl MetricReport {
    /// Long-format CSV `metric,value` rows.
    pub fn to_csv_string(&self) -> String {
        let mut out = String::from("metric,value\n");
        for (j, v) in self.w1_per_dim.iter().enumerate() {
            out.push_str(&format!("w1_dim{j},{v}\n"));
        }
        out.push_str(&format!("sliced_w1,{}\n", self.sliced_w1));
        out.push_str(&format!("mean_err,{}\n", self.mean_err));
        out.push_str(&format!("cov_err,{}\n", self.cov_err));
        if let Some(c) = self.constraint_rmse {
            out.push_str(&format!("constraint_rmse,{c}\n"));
        }
        if let Some(f) = self.inlier_fraction {
            out.push_str(&format!("inlier_fraction,{f}\n"));
        }
        out.push_str(&format!("n_samples,{}\n", self.n_samples));
        out.push_str(&format!("n_reference,{}\n", self.n_reference));
        out.push_str(&format!("seed,{}\n", self.seed));
        out
    }

    /// Human-readable summary table.
    pub fn summary(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{:<18} {:>12}\n",
            "metric", "value"
        ));
        for (j, v) in self.w1_per_dim.iter().enumerate() {
            out.push_str(&format!("{:<18} {:>12.6}\n", format!("w1_dim{j}"), v));
        }
        out.push_str(&format!("{:<18} {:>12.6}\n", "sliced_w1", self.sliced_w1));
        out.push_str(&format!("{:<18} {:>12.6}\n", "mean_err", self.mean_err));
        out.push_str(&format!("{:<18} {:>12.6}\n", "cov_err", self.cov_err));
        if let Some(c) = self.constraint_rmse {
            out.push_str(&format!("{:<18} {:>12.6}\n", "constraint_rmse", c));
        }
        if let Some(f) = self.inlier_fraction {
            out.push_str(&format!("{:<18} {:>12.6}\n", "inlier_fraction", f));
        }
        out.push_str(&format!("{:<18} {:>12}\n", "n_samples", self.n_samples));
        out
    }
}

/// Compare samples against reference draws from the exact posterior.
pub fn compare_to_reference(
    samples: ArrayView2<f64>,
    reference: ArrayView2<f64>,
    exact_mean: &Array1<f64>,
    exact_cov: &Array2<f64>,
    obs: Option<&Observation>,
    tau: f64,
    n_projections: usize,
    proj_rng: &mut ChaCha8Rng,
    seed: u64,
) -> Result<MetricReport> {
    let d = samples.ncols();
    let mut w1_per_dim = Vec::with_capacity(d);
    for j in 0..d {
        let a: Vec<f64> = samples.column(j).to_vec();
        let b: Vec<f64> = reference.column(j).to_vec();
        w1_per_dim.push(wasserstein1_1d(&a, &b)?);
    }
    let sw1 = if d == 1 {
        w1_per_dim[0]
    } else {
        sliced_w1(samples, reference, n_projections, proj_rng)?
    };
    let (mean, cov) = mean_and_cov(samples);
    let mean_err = mean
        .iter()
        .zip(exact_mean.iter())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    let cov_err = cov
        .iter()
        .zip(exact_cov.iter())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    let (constraint_rmse, inlier_fraction) = match obs {
        Some(o) => {
            let (c, f) = constraint_residual(o, samples, tau);
            (Some(c), Some(f))
        }
        None => (None, None),
    };
    Ok(MetricReport {
        w1_per_dim,
        sliced_w1: sw1,
        mean_err,
        cov_err,
        constraint_rmse,
        inlier_fraction,
        n_samples: samples.nrows(),
        n_reference: reference.nrows(),
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::Operator;
    use crate::rng::{domain, substream};
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use proptest::prelude::*;

    #[test]
    fn w1_identity_and_point_masses() {
        let a = vec![0.3, -1.0, 2.0];
        assert_eq!(wasserstein1_1d(&a, &a).unwrap(), 0.0);
        let zeros = vec![0.0; 50];
        let ones = vec![1.0; 50];
        assert_abs_diff_eq!(wasserstein1_1d(&zeros, &ones).unwrap(), 1.0, epsilon = 1e-12);
        assert!(wasserstein1_1d(&[], &ones).is_err());
    }

    /// Closed-form oracle: W1 between equal-variance Gaussians equals the
    /// mean gap.
    #[test]
    fn w1_gaussian_shift() {
        let mut rng = substream(1, domain::ORACLE, 0);
        let n = 100_000;
        let a: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let b: Vec<f64> = (0..n)
            .map(|_| 0.5 + rng.sample::<f64, _>(StandardNormal))
            .collect();
        let w = wasserstein1_1d(&a, &b).unwrap();
        assert!((w - 0.5).abs() < 0.02, "w1 {w}");
    }

    #[test]
    fn w1_unequal_sizes_reduces_to_cdf_integral() {
        // two point masses vs one: W1(1/2 delta_0 + 1/2 delta_1, delta_0) = 1/2
        let a = vec![0.0, 1.0];
        let b = vec![0.0];
        assert_abs_diff_eq!(wasserstein1_1d(&a, &b).unwrap(), 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(
            wasserstein1_1d(&b, &a).unwrap(),
            wasserstein1_1d(&a, &b).unwrap(),
            epsilon = 1e-15
        );
    }

    #[test]
    fn sliced_identity_and_fixed_axis_reduction() {
        let a = array![[0.0, 1.0], [2.0, -1.0], [0.5, 0.5]];
        let mut rng = substream(2, domain::PROJ, 0);
        assert_abs_diff_eq!(
            sliced_w1(a.view(), a.view(), 64, &mut rng).unwrap(),
            0.0,
            epsilon = 1e-15
        );
        // single fixed axis equals the per-coordinate W1
        let b = array![[1.0, 1.0], [3.0, -1.0], [1.5, 0.5]];
        let axis = array![1.0, 0.0];
        let w = w1_along(a.view(), b.view(), &axis).unwrap();
        let wa: Vec<f64> = a.column(0).to_vec();
        let wb: Vec<f64> = b.column(0).to_vec();
        assert_abs_diff_eq!(w, wasserstein1_1d(&wa, &wb).unwrap(), epsilon = 1e-15);
    }

    /// Analytic oracle: shifting 2-D samples by (1, 0) gives sliced W1 equal
    /// to E|cos(theta)| = 2/pi.
    #[test]
    fn sliced_shift_expectation() {
        let mut rng = substream(3, domain::PROJ, 0);
        let mut data = Array2::<f64>::zeros((512, 2));
        for v in data.iter_mut() {
            *v = rng.sample(StandardNormal);
        }
        let shifted = &data + &array![[1.0, 0.0]];
        let w = sliced_w1(data.view(), shifted.view(), 1000, &mut rng).unwrap();
        assert!(
            (w - 2.0 / std::f64::consts::PI).abs() < 0.03,
            "sliced W1 {w} vs 2/pi"
        );
    }

    #[test]
    fn constraint_residual_cases() {
        let obs = Observation::hard_mask(vec![true, true, false], array![1.0, 2.0]).unwrap();
        let good = array![[1.0, 2.0, 9.0], [1.0, 2.0, -3.0]];
        let (rmse, frac) = constraint_residual(&obs, good.view(), 0.1);
        assert_eq!(rmse, 0.0);
        assert_eq!(frac, 1.0);
        // one observed coordinate off by delta: rmse = delta / sqrt(n_obs)
        let off = array![[1.0, 2.5, 0.0]];
        let (rmse, frac) = constraint_residual(&obs, off.view(), 0.1);
        assert_abs_diff_eq!(rmse, 0.5 / 2.0f64.sqrt(), epsilon = 1e-12);
        assert_eq!(frac, 0.0);
    }

    /// Closed-form half-normal oracle: quadrature must reproduce
    /// mean = sqrt(2/pi) for N(0,1) restricted to (0, inf).
    #[test]
    fn quadrature_half_normal() {
        let prior = GaussianMixturePrior::standard(1);
        let q = quadrature_posterior_1d(
            &prior,
            &PosteriorTarget1d::Interval { a: 0.0, b: f64::INFINITY },
            0.0,
            10.0,
            20_000,
        )
        .unwrap();
        assert_abs_diff_eq!(q.mean, (2.0 / std::f64::consts::PI).sqrt(), epsilon = 1e-4);
        assert!(!q.mass_warning);
    }

    #[test]
    fn quadrature_uninformative_obs_recovers_prior() {
        let prior = GaussianMixturePrior::diagonal(
            vec![1.0],
            vec![array![0.3]],
            vec![array![1.0]],
        )
        .unwrap();
        let obs = Observation::new(Operator::Mask(vec![true]), array![5.0], 1e6).unwrap();
        let q = quadrature_posterior_1d(
            &prior,
            &PosteriorTarget1d::Obs(obs),
            -8.0,
            8.0,
            20_000,
        )
        .unwrap();
        assert_abs_diff_eq!(q.mean, 0.3, epsilon = 1e-3);
        assert_abs_diff_eq!(q.variance, 1.0, epsilon = 1e-3);
    }

    /// Monte-Carlo oracle: rejection sampling of a mixture restricted to an
    /// interval, 1e7 proposals.
    #[test]
    fn quadrature_mixture_interval_matches_rejection_sampling() {
        let prior = GaussianMixturePrior::diagonal(
            vec![0.4, 0.6],
            vec![array![-1.0], array![1.2]],
            vec![array![0.25], array![0.49]],
        )
        .unwrap();
        let (a, b) = (-0.5, 1.0);
        let q = quadrature_posterior_1d(
            &prior,
            &PosteriorTarget1d::Interval { a, b },
            a,
            b,
            50_000,
        )
        .unwrap();
        let mut rng = substream(9, domain::ORACLE, 0);
        let draws = prior.sample_batch(&mut rng, 10_000_000);
        let kept: Vec<f64> = draws
            .column(0)
            .iter()
            .cloned()
            .filter(|&x| x > a && x < b)
            .collect();
        let n = kept.len() as f64;
        let mean = kept.iter().sum::<f64>() / n;
        let var = kept.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
        let se_mean = (var / n).sqrt();
        assert!((q.mean - mean).abs() < 3.0 * se_mean, "{} vs {mean}", q.mean);
        let se_var = var * (2.0f64 / n).sqrt();
        assert!((q.variance - var).abs() < 3.0 * se_var.max(1e-4));
    }

    #[test]
    fn quadrature_self_consistency_under_grid_doubling() {
        let prior = GaussianMixturePrior::diagonal(
            vec![0.5, 0.5],
            vec![array![-1.5], array![1.5]],
            vec![array![0.09], array![0.09]],
        )
        .unwrap();
        let obs = Observation::new(Operator::Mask(vec![true]), array![0.5], 0.75).unwrap();
        let t = PosteriorTarget1d::Obs(obs);
        let q1 = quadrature_posterior_1d(&prior, &t, -6.0, 6.0, 40_000).unwrap();
        let q2 = quadrature_posterior_1d(&prior, &t, -6.0, 6.0, 80_000).unwrap();
        assert!((q1.mean - q2.mean).abs() < 1e-6);
        assert!((q1.variance - q2.variance).abs() < 1e-6);
    }

    #[test]
    fn quadrature_warns_on_clipped_mass() {
        let prior = GaussianMixturePrior::standard(1);
        let q = quadrature_posterior_1d(
            &prior,
            &PosteriorTarget1d::Interval { a: f64::NEG_INFINITY, b: f64::INFINITY },
            -1.0,
            1.0,
            2000,
        )
        .unwrap();
        assert!(q.mass_warning);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        /// Metric symmetry and the triangle inequality on random triples.
        #[test]
        fn w1_symmetry_and_triangle(
            a in proptest::collection::vec(-50.0f64..50.0, 1..40),
            b in proptest::collection::vec(-50.0f64..50.0, 1..40),
            c in proptest::collection::vec(-50.0f64..50.0, 1..40),
        ) {
            let ab = wasserstein1_1d(&a, &b).unwrap();
            let ba = wasserstein1_1d(&b, &a).unwrap();
            prop_assert!((ab - ba).abs() < 1e-12);
            let ac = wasserstein1_1d(&a, &c).unwrap();
            let cb = wasserstein1_1d(&c, &b).unwrap();
            prop_assert!(ab <= ac + cb + 1e-9);
        }
    }
}
