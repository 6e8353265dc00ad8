//! Built-in benchmarks: analytic conditioning tasks with exact posteriors,
//! plus the machinery to run strategy comparisons over seed sets.

use ndarray::{Array1, Array2, ArrayView2};

use crate::conditioning::{
    AmortisedStrategy, ExactHStrategy, FinetunedHStrategy, GuidanceSchedule,
    ReconGuidanceStrategy, RenoiseIndex, RepaintStrategy, ReplacementStrategy,
    RfdiffSampleStrategy,
};
use crate::engine::{sample, Conditioner, NullStrategy, SamplerConfig, ScoreModel, SigmaRule};
use crate::error::{Error, Result};
use crate::eval::{compare_to_reference, MetricReport};
use crate::oracle::{
    true_posterior, GaussianMixturePrior, HTransform, Observation, Operator, OracleEpsModel,
};
use crate::rng::{domain, substream};
use crate::schedule::NoiseSchedule;
use crate::special::{norm_cdf, norm_pdf, norm_ppf};

/// What a benchmark conditions on.
#[derive(Debug, Clone)]
pub enum BenchTarget {
    Interval { a: f64, b: f64 },
    Obs(Observation),
}

/// A registered conditioning task.
pub struct Benchmark {
    pub name: &'static str,
    pub prior: GaussianMixturePrior,
    pub target: BenchTarget,
    pub schedule: NoiseSchedule,
    pub default_chains: usize,
    pub default_guidance: GuidanceSchedule,
    pub default_repaint_r: usize,
}

pub const BENCHMARK_NAMES: &[&str] = &[
    "truncated-1d",
    "correlated-gaussian-2d",
    "mixture-posterior-1d",
    "masked-gaussian-8d",
];

/// Reference desk-scale settings: 250 steps, 4000 chains, the carried-over
/// linear-beta constants.
fn reference_schedule() -> NoiseSchedule {
    NoiseSchedule::linear(250, 1e-4, 2e-2).expect("reference schedule")
}

impl Benchmark {
    pub fn by_name(name: &str) -> Result<Benchmark> {
        match name {
            "truncated-1d" => Ok(Benchmark {
                name: "truncated-1d",
                prior: GaussianMixturePrior::standard(1),
                target: BenchTarget::Interval { a: 0.0, b: 1.0 },
                schedule: reference_schedule(),
                default_chains: 4000,
                default_guidance: GuidanceSchedule::Constant(0.01),
                default_repaint_r: 5,
            }),
            "correlated-gaussian-2d" => {
                let prior = GaussianMixturePrior::single(
                    Array1::zeros(2),
                    ndarray::array![[1.0, 0.9], [0.9, 1.0]],
                )?;
                let obs = Observation::hard_mask(vec![true, false], ndarray::array![1.0])?;
                Ok(Benchmark {
                    name: "correlated-gaussian-2d",
                    prior,
                    target: BenchTarget::Obs(obs),
                    schedule: reference_schedule(),
                    default_chains: 4000,
                    default_guidance: GuidanceSchedule::Constant(0.03),
                    default_repaint_r: 5,
                })
            }
            "mixture-posterior-1d" => {
                let prior = GaussianMixturePrior::diagonal(
                    vec![0.5, 0.5],
                    vec![ndarray::array![-1.5], ndarray::array![1.5]],
                    vec![ndarray::array![0.09], ndarray::array![0.09]],
                )?;
                let obs = Observation::new(
                    Operator::Mask(vec![true]),
                    ndarray::array![0.5],
                    0.75,
                )?;
                Ok(Benchmark {
                    name: "mixture-posterior-1d",
                    prior,
                    target: BenchTarget::Obs(obs),
                    schedule: reference_schedule(),
                    default_chains: 4000,
                    default_guidance: GuidanceSchedule::Constant(0.01),
                    default_repaint_r: 5,
                })
            }
            "masked-gaussian-8d" => {
                let d = 8;
                let mean = Array1::from_iter((0..d).map(|i| 0.1 * i as f64 - 0.35));
                let mut cov = Array2::<f64>::zeros((d, d));
                for i in 0..d {
                    for j in 0..d {
                        cov[[i, j]] = 0.5f64.powi((i as i32 - j as i32).abs());
                    }
                }
                let prior = GaussianMixturePrior::single(mean, cov)?;
                let mut mask = vec![false; d];
                mask[0] = true;
                mask[3] = true;
                mask[5] = true;
                let obs =
                    Observation::hard_mask(mask, ndarray::array![0.5, -0.3, 0.8])?;
                Ok(Benchmark {
                    name: "masked-gaussian-8d",
                    prior,
                    target: BenchTarget::Obs(obs),
                    schedule: reference_schedule(),
                    default_chains: 4000,
                    default_guidance: GuidanceSchedule::Constant(0.03),
                    default_repaint_r: 5,
                })
            }
            other => Err(Error::config(format!(
                "unknown benchmark '{other}'; registry: {}",
                BENCHMARK_NAMES.join(", ")
            ))),
        }
    }

    pub fn d(&self) -> usize {
        self.prior.dim()
    }

    pub fn obs(&self) -> Option<&Observation> {
        match &self.target {
            BenchTarget::Obs(o) => Some(o),
            BenchTarget::Interval { .. } => None,
        }
    }

    /// The exact h-transform for this task.
    pub fn h_transform(&self) -> Result<HTransform> {
        match &self.target {
            BenchTarget::Interval { a, b } => HTransform::interval(self.prior.clone(), *a, *b),
            BenchTarget::Obs(o) => HTransform::linear_gaussian(self.prior.clone(), o.clone()),
        }
    }

    /// Exact posterior mean and covariance.
    pub fn exact_moments(&self) -> Result<(Array1<f64>, Array2<f64>)> {
        match &self.target {
            BenchTarget::Interval { a, b } => {
                let (m, v) = truncated_normal_moments(
                    self.prior.mean_of(0)[0],
                    self.prior.cov_of(0)[[0, 0]].sqrt(),
                    *a,
                    *b,
                );
                Ok((ndarray::array![m], ndarray::array![[v]]))
            }
            BenchTarget::Obs(o) => {
                let post = true_posterior(&self.prior, o)?;
                Ok(post.moments())
            }
        }
    }

    /// Exact posterior samples (ground truth for the metric reports).
    pub fn reference_samples(&self, seed: u64, n: usize) -> Result<Array2<f64>> {
        let mut rng = substream(seed, domain::ORACLE, 0xBEEF);
        match &self.target {
            BenchTarget::Interval { a, b } => {
                if self.prior.n_components() != 1 {
                    return Err(Error::unsupported(
                        "interval reference sampling is implemented for single-Gaussian priors",
                    ));
                }
                let mu = self.prior.mean_of(0)[0];
                let sd = self.prior.cov_of(0)[[0, 0]].sqrt();
                let (za, zb) = ((a - mu) / sd, (b - mu) / sd);
                let (fa, fb) = (norm_cdf(za), norm_cdf(zb));
                let mut out = Array2::<f64>::zeros((n, 1));
                for i in 0..n {
                    let u: f64 = rand::Rng::gen(&mut rng);
                    out[[i, 0]] = mu + sd * norm_ppf(fa + u * (fb - fa));
                }
                Ok(out)
            }
            BenchTarget::Obs(o) => {
                let post = true_posterior(&self.prior, o)?;
                Ok(post.sample_batch(&mut rng, n))
            }
        }
    }

    /// Score a sample set against the exact posterior.
    pub fn report(
        &self,
        samples: ArrayView2<f64>,
        seed: u64,
        n_projections: usize,
    ) -> Result<MetricReport> {
        let reference = self.reference_samples(seed, samples.nrows())?;
        let (mean, cov) = self.exact_moments()?;
        let mut proj_rng = substream(seed, domain::PROJ, 0);
        compare_to_reference(
            samples,
            reference.view(),
            &mean,
            &cov,
            self.obs(),
            0.1,
            n_projections,
            &mut proj_rng,
            seed,
        )
    }

    /// The oracle score model over this benchmark's prior.
    pub fn oracle_model(&self) -> OracleEpsModel {
        OracleEpsModel::new(self.prior.clone())
    }
}

/// Closed-form truncated-normal moments on (a, b) for N(mu, sd^2).
pub fn truncated_normal_moments(mu: f64, sd: f64, a: f64, b: f64) -> (f64, f64) {
    let za = (a - mu) / sd;
    let zb = (b - mu) / sd;
    let z = norm_cdf(zb) - norm_cdf(za);
    let (pa, pb) = (norm_pdf(za), norm_pdf(zb));
    let mean = mu + sd * (pa - pb) / z;
    let za_term = if za.is_finite() { za * pa } else { 0.0 };
    let zb_term = if zb.is_finite() { zb * pb } else { 0.0 };
    let var = sd * sd * (1.0 + (za_term - zb_term) / z - ((pa - pb) / z).powi(2));
    (mean, var)
}

/// Config-level strategy description.
#[derive(Debug, Clone)]
pub enum StrategySpec {
    Null,
    ExactH,
    ReconGuidance { gsched: GuidanceSchedule, stop_gradient: bool },
    Replacement,
    Repaint { r: usize, renoise: RenoiseIndex },
    Rfdiff,
    Amortised,
    FinetunedH,
}

impl StrategySpec {
    pub fn name(&self) -> &'static str {
        match self {
            StrategySpec::Null => "null",
            StrategySpec::ExactH => "exact_h",
            StrategySpec::ReconGuidance { .. } => "recon_guidance",
            StrategySpec::Replacement => "replacement",
            StrategySpec::Repaint { .. } => "repaint",
            StrategySpec::Rfdiff => "rfdiff",
            StrategySpec::Amortised => "amortised",
            StrategySpec::FinetunedH => "finetuned_h",
        }
    }

    /// Does this strategy need a trained (non-oracle) model?
    pub fn needs_network(&self) -> bool {
        matches!(
            self,
            StrategySpec::Rfdiff | StrategySpec::Amortised | StrategySpec::FinetunedH
        )
    }
}

/// Instantiate a strategy against a benchmark's target.
pub fn build_strategy(bench: &Benchmark, spec: &StrategySpec) -> Result<Box<dyn Conditioner>> {
    let need_obs = || -> Result<Observation> {
        bench.obs().cloned().ok_or_else(|| {
            Error::config(format!(
                "strategy '{}' needs an observation target, but benchmark '{}' conditions on an interval",
                spec.name(),
                bench.name
            ))
        })
    };
    Ok(match spec {
        StrategySpec::Null => Box::new(NullStrategy),
        StrategySpec::ExactH => Box::new(ExactHStrategy::new(bench.h_transform()?)),
        StrategySpec::ReconGuidance { gsched, stop_gradient } => Box::new(
            ReconGuidanceStrategy::new(need_obs()?, *gsched)?.with_stop_gradient(*stop_gradient),
        ),
        StrategySpec::Replacement => Box::new(ReplacementStrategy::new(need_obs()?)?),
        StrategySpec::Repaint { r, renoise } => {
            Box::new(RepaintStrategy::new(need_obs()?, *r)?.with_renoise_index(*renoise))
        }
        StrategySpec::Rfdiff => Box::new(RfdiffSampleStrategy::new(need_obs()?)?),
        StrategySpec::Amortised => Box::new(AmortisedStrategy::new(need_obs()?)?),
        StrategySpec::FinetunedH => Box::new(FinetunedHStrategy::new(need_obs()?)?),
    })
}

/// One (strategy, seed) result.
#[derive(Debug, Clone)]
pub struct BenchRow {
    pub strategy: String,
    pub seed: u64,
    pub report: MetricReport,
}

/// All rows of one benchmark run.
#[derive(Debug, Clone)]
pub struct BenchRun {
    pub benchmark: String,
    pub rows: Vec<BenchRow>,
}

/// Run strategies x seeds on one benchmark. `model_for` supplies the score
/// model per strategy (oracle for sampling-time strategies, checkpoints for
/// trained ones).
pub fn run_benchmark<'a>(
    bench: &Benchmark,
    strategies: &[StrategySpec],
    seeds: &[u64],
    n_chains: usize,
    threads: usize,
    n_projections: usize,
    model_for: impl Fn(&StrategySpec) -> Result<&'a dyn ScoreModel>,
) -> Result<BenchRun> {
    if strategies.is_empty() || seeds.is_empty() {
        return Err(Error::config("benchmark runs need at least one strategy and one seed"));
    }
    let mut rows = Vec::with_capacity(strategies.len() * seeds.len());
    for spec in strategies {
        let strat = build_strategy(bench, spec)?;
        let model = model_for(spec)?;
        for &seed in seeds {
            let mut cfg = SamplerConfig::new(n_chains, seed);
            cfg.threads = threads;
            cfg.sigma_rule = SigmaRule::SqrtBeta;
            let batch = sample(model, &bench.schedule, strat.as_ref(), &cfg)?;
            let report = bench.report(batch.finals.view(), seed, n_projections)?;
            rows.push(BenchRow { strategy: spec.name().to_string(), seed, report });
        }
    }
    Ok(BenchRun { benchmark: bench.name.to_string(), rows })
}

impl BenchRun {
    /// Long-format CSV: one row per (strategy, seed, metric).
    pub fn results_csv(&self) -> String {
        let mut out = String::from("benchmark,strategy,seed,metric,value\n");
        for row in &self.rows {
            let mut push = |metric: &str, value: f64| {
                out.push_str(&format!(
                    "{},{},{},{metric},{value}\n",
                    self.benchmark, row.strategy, row.seed
                ));
            };
            for (j, v) in row.report.w1_per_dim.iter().enumerate() {
                push(&format!("w1_dim{j}"), *v);
            }
            push("sliced_w1", row.report.sliced_w1);
            push("mean_err", row.report.mean_err);
            push("cov_err", row.report.cov_err);
            if let Some(c) = row.report.constraint_rmse {
                push("constraint_rmse", c);
            }
            if let Some(f) = row.report.inlier_fraction {
                push("inlier_fraction", f);
            }
        }
        out
    }

    /// Per-strategy mean and standard error of each metric.
    pub fn summary(&self) -> Vec<(String, String, f64, f64)> {
        let mut strategies: Vec<String> = Vec::new();
        for row in &self.rows {
            if !strategies.contains(&row.strategy) {
                strategies.push(row.strategy.clone());
            }
        }
        let metrics = ["sliced_w1", "mean_err", "cov_err", "constraint_rmse", "inlier_fraction"];
        let mut out = Vec::new();
        for s in &strategies {
            for metric in metrics {
                let vals: Vec<f64> = self
                    .rows
                    .iter()
                    .filter(|r| &r.strategy == s)
                    .filter_map(|r| match metric {
                        "sliced_w1" => Some(r.report.sliced_w1),
                        "mean_err" => Some(r.report.mean_err),
                        "cov_err" => Some(r.report.cov_err),
                        "constraint_rmse" => r.report.constraint_rmse,
                        "inlier_fraction" => r.report.inlier_fraction,
                        _ => None,
                    })
                    .collect();
                if vals.is_empty() {
                    continue;
                }
                let n = vals.len() as f64;
                let mean = vals.iter().sum::<f64>() / n;
                let ss: f64 = vals.iter().map(|v| (v - mean) * (v - mean)).sum();
                let stderr = if vals.len() > 1 { (ss / (n * (n - 1.0))).sqrt() } else { 0.0 };
                out.push((s.clone(), metric.to_string(), mean, stderr));
            }
        }
        out
    }

    pub fn summary_csv(&self) -> String {
        let mut out = String::from("benchmark,strategy,metric,mean,stderr\n");
        for (s, m, mean, se) in self.summary() {
            out.push_str(&format!("{},{s},{m},{mean},{se}\n", self.benchmark));
        }
        out
    }

    /// Mean of one metric for one strategy.
    pub fn mean_metric(&self, strategy: &str, metric: &str) -> Option<(f64, f64)> {
        self.summary()
            .into_iter()
            .find(|(s, m, _, _)| s == strategy && m == metric)
            .map(|(_, _, mean, se)| (mean, se))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn registry_builds_every_benchmark() {
        for name in BENCHMARK_NAMES {
            let b = Benchmark::by_name(name).unwrap();
            assert_eq!(&b.name, name);
            let (mean, cov) = b.exact_moments().unwrap();
            assert_eq!(mean.len(), b.d());
            assert_eq!(cov.nrows(), b.d());
            let refs = b.reference_samples(1, 64).unwrap();
            assert_eq!(refs.dim(), (64, b.d()));
        }
        assert!(Benchmark::by_name("nope").is_err());
    }

    #[test]
    fn truncated_moments_match_tables() {
        // standard normal on (0, 1)
        let (m, v) = truncated_normal_moments(0.0, 1.0, 0.0, 1.0);
        assert_abs_diff_eq!(m, 0.45986, epsilon = 1e-4);
        assert_abs_diff_eq!(v, 0.079713, epsilon = 1e-4);
        // half-normal
        let (m2, _) = truncated_normal_moments(0.0, 1.0, 0.0, f64::INFINITY);
        assert_abs_diff_eq!(m2, (2.0 / std::f64::consts::PI).sqrt(), epsilon = 1e-12);
    }

    #[test]
    fn reference_sampler_matches_moments() {
        let b = Benchmark::by_name("truncated-1d").unwrap();
        let xs = b.reference_samples(3, 40_000).unwrap();
        let n = xs.nrows() as f64;
        let mean = xs.column(0).sum() / n;
        let (em, ev) = b.exact_moments().unwrap();
        assert!((mean - em[0]).abs() < 4.0 * (ev[[0, 0]] / n).sqrt());
        assert!(xs.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn interval_benchmark_rejects_observation_strategies() {
        let b = Benchmark::by_name("truncated-1d").unwrap();
        assert!(build_strategy(&b, &StrategySpec::Replacement).is_err());
        assert!(build_strategy(&b, &StrategySpec::ExactH).is_ok());
    }
}
