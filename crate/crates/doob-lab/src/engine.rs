//! Forward noising kernel and the reverse ancestral sampler.
//!
//! The sampler runs `x_N ~ N(0, I)` followed by `N` reverse steps
//! `x_{k-1} = (1 - beta_k)^{-1/2} (x_k - beta_k (1 - abar_k)^{-1/2} eps_hat) + sigma_k z`,
//! with `z` drawn only for `k > 1`. Conditioning strategies intervene through
//! the [`Conditioner`] hook points (before the score call, between score and
//! drift, and after the noise), or by overriding the whole step.
//!
//! Chains are embarrassingly parallel: each chain owns the RNG substream
//! `(seed, CHAIN, chain_id)`, and chains are processed in fixed-size blocks so
//! results are byte-identical for any worker-thread count.

use ndarray::{Array1, Array2, Array3, ArrayView1, ArrayView2, ArrayViewMut2, ArrayViewMut3, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::rng::{domain, substream};
use crate::schedule::NoiseSchedule;

/// Chains per work block. Fixed (not tied to thread count) so that batched
/// model evaluations see identical shapes no matter how many workers run.
pub const BLOCK_CHAINS: usize = 1024;

/// Conditioning-channel layout a model consumes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CondKind {
    /// Unconditional model.
    None,
    /// Auxiliary variable of the given width plus a presence flag.
    Aux { n_aux: usize },
    /// Motif values (padded outside the mask) plus the mask itself.
    Masked,
    /// Mask channel only; the motif values live in the state itself.
    MaskOnly,
}

/// Conditioning rows fed to a model alongside the state batch.
#[derive(Debug, Clone)]
pub enum CondData {
    None,
    /// `values`: n x m auxiliary rows; `present[i]` false means the condition
    /// was dropped for row i (channels are zeroed).
    Aux { values: Array2<f64>, present: Vec<bool> },
    /// `values`: n x d motif values (only entries under the mask are
    /// meaningful); `mask`: n x d of 0/1.
    Masked { values: Array2<f64>, mask: Array2<f64> },
    MaskOnly { mask: Array2<f64> },
}

impl CondData {
    pub fn kind(&self) -> CondKind {
        match self {
            CondData::None => CondKind::None,
            CondData::Aux { values, .. } => CondKind::Aux { n_aux: values.ncols() },
            CondData::Masked { .. } => CondKind::Masked,
            CondData::MaskOnly { .. } => CondKind::MaskOnly,
        }
    }
}

/// Diffusion-time input for a model evaluation.
#[derive(Debug, Clone)]
pub enum TimeInput {
    /// Every row at step k.
    Uniform(usize),
    /// Per-row steps (training batches mix steps).
    PerRow(Vec<usize>),
    /// Per-row steps plus an n x d matrix of per-coordinate step values
    /// (motif coordinates carry 0).
    PerCoord { rows: Vec<usize>, coords: Array2<f64> },
}

impl TimeInput {
    /// The single step shared by all rows, if there is one.
    pub fn uniform_step(&self) -> Option<usize> {
        match self {
            TimeInput::Uniform(k) => Some(*k),
            _ => None,
        }
    }
}

/// Unified interface over analytic score oracles and trainable eps-networks.
///
/// The native parametrisation is the noise `eps`; score-parametrised oracles
/// wrap themselves via `eps_hat = -sqrt(1 - abar_k) * score`.
pub trait ScoreModel: Sync {
    fn dim(&self) -> usize;

    fn cond_kind(&self) -> CondKind {
        CondKind::None
    }

    fn supports_per_coord_time(&self) -> bool {
        false
    }

    /// Predict eps for a batch of states (n x d).
    fn eps_batch(
        &self,
        sch: &NoiseSchedule,
        times: &TimeInput,
        x: ArrayView2<f64>,
        cond: &CondData,
    ) -> Result<Array2<f64>>;

    /// Vector-Jacobian product of `eps_batch` with respect to `x`:
    /// returns `J_x(eps)^T cot` row-wise. Needed by reconstruction guidance.
    fn eps_vjp_x(
        &self,
        sch: &NoiseSchedule,
        times: &TimeInput,
        x: ArrayView2<f64>,
        cond: &CondData,
        cot: ArrayView2<f64>,
    ) -> Result<Array2<f64>>;
}

/// Reverse-noise scale rule. `SqrtBeta` is the variance-matched ancestral
/// choice and the default; `Beta` reproduces the literal printed rule
/// `sigma_t = beta(t)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SigmaRule {
    SqrtBeta,
    Beta,
}

/// Sampler configuration.
#[derive(Debug, Clone)]
pub struct SamplerConfig {
    pub n_chains: usize,
    pub store_trajectory: bool,
    pub seed: u64,
    pub sigma_rule: SigmaRule,
    /// Worker threads; chains are deterministic for any value.
    pub threads: usize,
}

impl SamplerConfig {
    pub fn new(n_chains: usize, seed: u64) -> Self {
        SamplerConfig {
            n_chains,
            store_trajectory: false,
            seed,
            sigma_rule: SigmaRule::SqrtBeta,
            threads: 1,
        }
    }
}

/// Final samples plus optional full trajectories.
#[derive(Debug, Clone)]
pub struct SampleBatch {
    /// n_chains x d terminal states.
    pub finals: Array2<f64>,
    /// Optional n_chains x (N+1) x d trajectories; time index 0 is the data
    /// end, so `trajectories[:, 0, :] == finals`.
    pub trajectories: Option<Array3<f64>>,
    /// RNG substream id of each chain.
    pub chain_streams: Vec<u64>,
    pub seed: u64,
}

/// Per-step conditioning hooks. All default to no-ops, which makes the null
/// strategy reproduce unconditional sampling exactly.
pub trait Conditioner: Sync {
    fn name(&self) -> &'static str;

    /// Reject incompatible strategy/model pairs before sampling starts.
    fn check_compat(&self, _model: &dyn ScoreModel, _sch: &NoiseSchedule) -> Result<()> {
        Ok(())
    }

    /// Conditioning rows fed to the model at every step of a block.
    fn cond_data(&self, _n_rows: usize) -> CondData {
        CondData::None
    }

    /// Time input for the model call at step k.
    fn time_input(&self, k: usize, _n_rows: usize) -> TimeInput {
        TimeInput::Uniform(k)
    }

    /// Runs before the score call; may rewrite the state (motif overwrite).
    fn pre_score(&self, _sch: &NoiseSchedule, _k: usize, _x: &mut ArrayViewMut2<f64>) -> Result<()> {
        Ok(())
    }

    /// Runs between the score call and the reverse drift; may rewrite the
    /// state (guidance) or the predicted noise (h-transform drift).
    fn adjust(
        &self,
        _model: &dyn ScoreModel,
        _sch: &NoiseSchedule,
        _k: usize,
        _x: &mut ArrayViewMut2<f64>,
        _eps: &mut Array2<f64>,
    ) -> Result<()> {
        Ok(())
    }

    /// Runs after the reverse noise was added (replacement-style overwrites).
    fn post_noise(
        &self,
        _sch: &NoiseSchedule,
        _k: usize,
        _x: &mut ArrayViewMut2<f64>,
        _rngs: &mut [ChaCha8Rng],
    ) -> Result<()> {
        Ok(())
    }

    /// Strategies that need full control of one outer step (inner resampling
    /// loops) return true here and implement [`Conditioner::custom_step`].
    fn overrides_step(&self) -> bool {
        false
    }

    fn custom_step(
        &self,
        _model: &dyn ScoreModel,
        _sch: &NoiseSchedule,
        _k: usize,
        _x: &mut ArrayViewMut2<f64>,
        _rngs: &mut [ChaCha8Rng],
        _cfg: &SamplerConfig,
        _cond: &CondData,
    ) -> Result<()> {
        unreachable!("custom_step called on a strategy that does not override the step")
    }
}

/// The do-nothing strategy: plain unconditional ancestral sampling.
pub struct NullStrategy;

impl Conditioner for NullStrategy {
    fn name(&self) -> &'static str {
        "null"
    }
}

/// Reverse-noise scale sigma_k under the given rule.
pub fn sigma(sch: &NoiseSchedule, k: usize, rule: SigmaRule) -> f64 {
    match rule {
        SigmaRule::SqrtBeta => sch.beta(k).sqrt(),
        SigmaRule::Beta => sch.beta(k),
    }
}

/// Forward-noise one point to step k, returning both the noised point and the
/// exact noise drawn (training losses need the pair).
pub fn forward_noise(
    sch: &NoiseSchedule,
    k: usize,
    x0: ArrayView1<f64>,
    rng: &mut ChaCha8Rng,
) -> (Array1<f64>, Array1<f64>) {
    let eps: Array1<f64> = Array1::from_iter((0..x0.len()).map(|_| rng.sample(StandardNormal)));
    let a = sch.alpha_bar(k);
    let xk = x0.mapv(|v| a.sqrt() * v) + eps.mapv(|e| (1.0 - a).sqrt() * e);
    (xk, eps)
}

/// Batched forward noising with per-row steps.
pub fn forward_noise_batch(
    sch: &NoiseSchedule,
    ks: &[usize],
    x0: ArrayView2<f64>,
    rng: &mut ChaCha8Rng,
) -> (Array2<f64>, Array2<f64>) {
    let (n, d) = x0.dim();
    assert_eq!(ks.len(), n);
    let mut xk = Array2::<f64>::zeros((n, d));
    let mut eps = Array2::<f64>::zeros((n, d));
    for i in 0..n {
        let a = sch.alpha_bar(ks[i]);
        let (sa, sn) = (a.sqrt(), (1.0 - a).sqrt());
        for j in 0..d {
            let e: f64 = rng.sample(StandardNormal);
            eps[[i, j]] = e;
            xk[[i, j]] = sa * x0[[i, j]] + sn * e;
        }
    }
    (xk, eps)
}

/// One ancestral reverse step on a single state vector.
pub fn reverse_step(
    sch: &NoiseSchedule,
    k: usize,
    x_k: ArrayView1<f64>,
    eps_hat: ArrayView1<f64>,
    rng: &mut ChaCha8Rng,
    cfg: &SamplerConfig,
) -> Array1<f64> {
    let b = sch.beta(k);
    let c1 = 1.0 / (1.0 - b).sqrt();
    let c2 = b / (1.0 - sch.alpha_bar(k)).sqrt();
    let mut out = Array1::<f64>::zeros(x_k.len());
    for i in 0..x_k.len() {
        out[i] = c1 * (x_k[i] - c2 * eps_hat[i]);
    }
    if k > 1 {
        let s = sigma(sch, k, cfg.sigma_rule);
        for v in out.iter_mut() {
            let z: f64 = rng.sample(StandardNormal);
            *v += s * z;
        }
    }
    out
}

/// In-place reverse drift on a block: `x <- (x - c2 * eps) / sqrt(1 - beta_k)`.
pub fn reverse_drift_inplace(
    sch: &NoiseSchedule,
    k: usize,
    x: &mut ArrayViewMut2<f64>,
    eps: ArrayView2<f64>,
) {
    let b = sch.beta(k);
    let c1 = 1.0 / (1.0 - b).sqrt();
    let c2 = b / (1.0 - sch.alpha_bar(k)).sqrt();
    azip_inplace(x, eps, |xv, ev| c1 * (xv - c2 * ev));
}

fn azip_inplace(x: &mut ArrayViewMut2<f64>, y: ArrayView2<f64>, f: impl Fn(f64, f64) -> f64) {
    for (xv, yv) in x.iter_mut().zip(y.iter()) {
        *xv = f(*xv, *yv);
    }
}

/// Add `sigma_k z` per chain; callers must skip this at k = 1.
pub fn add_reverse_noise(
    sch: &NoiseSchedule,
    k: usize,
    x: &mut ArrayViewMut2<f64>,
    rngs: &mut [ChaCha8Rng],
    rule: SigmaRule,
) {
    debug_assert!(k > 1);
    let s = sigma(sch, k, rule);
    for (mut row, rng) in x.outer_iter_mut().zip(rngs.iter_mut()) {
        for v in row.iter_mut() {
            let z: f64 = rng.sample(StandardNormal);
            *v += s * z;
        }
    }
}

/// One conditioned reverse step on a block of chains.
pub fn step_block(
    model: &dyn ScoreModel,
    sch: &NoiseSchedule,
    strat: &dyn Conditioner,
    k: usize,
    x: &mut ArrayViewMut2<f64>,
    rngs: &mut [ChaCha8Rng],
    cfg: &SamplerConfig,
    cond: &CondData,
) -> Result<()> {
    if strat.overrides_step() {
        return strat.custom_step(model, sch, k, x, rngs, cfg, cond);
    }
    let times = strat.time_input(k, x.nrows());
    strat.pre_score(sch, k, x)?;
    let mut eps = model.eps_batch(sch, &times, x.view(), cond)?;
    strat.adjust(model, sch, k, x, &mut eps)?;
    reverse_drift_inplace(sch, k, x, eps.view());
    if k > 1 {
        add_reverse_noise(sch, k, x, rngs, cfg.sigma_rule);
    }
    strat.post_noise(sch, k, x, rngs)?;
    Ok(())
}

fn run_block(
    model: &dyn ScoreModel,
    sch: &NoiseSchedule,
    strat: &dyn Conditioner,
    cfg: &SamplerConfig,
    x: &mut ArrayViewMut2<f64>,
    rngs: &mut [ChaCha8Rng],
    mut traj: Option<ArrayViewMut3<f64>>,
) -> Result<()> {
    let cond = strat.cond_data(x.nrows());
    for k in (1..=sch.n_steps()).rev() {
        step_block(model, sch, strat, k, x, rngs, cfg, &cond)?;
        if let Some(t) = traj.as_mut() {
            t.index_axis_mut(Axis(1), k - 1).assign(x);
        }
    }
    Ok(())
}

/// Run the full reverse sampler.
///
/// Deterministic given `(seed, config, model weights)`, including under
/// multi-threaded execution.
pub fn sample(
    model: &dyn ScoreModel,
    sch: &NoiseSchedule,
    strat: &dyn Conditioner,
    cfg: &SamplerConfig,
) -> Result<SampleBatch> {
    if cfg.n_chains < 1 {
        return Err(Error::config("n_chains must be >= 1"));
    }
    strat.check_compat(model, sch)?;

    let n = cfg.n_chains;
    let d = model.dim();
    let n_steps = sch.n_steps();

    let mut rngs: Vec<ChaCha8Rng> =
        (0..n).map(|i| substream(cfg.seed, domain::CHAIN, i as u64)).collect();
    let mut x = Array2::<f64>::zeros((n, d));
    for (mut row, rng) in x.outer_iter_mut().zip(rngs.iter_mut()) {
        for v in row.iter_mut() {
            *v = rng.sample(StandardNormal);
        }
    }

    let mut traj = if cfg.store_trajectory {
        let mut t = Array3::<f64>::zeros((n, n_steps + 1, d));
        t.index_axis_mut(Axis(1), n_steps).assign(&x);
        Some(t)
    } else {
        None
    };

    {
        let x_blocks: Vec<ArrayViewMut2<f64>> =
            x.axis_chunks_iter_mut(Axis(0), BLOCK_CHAINS).collect();
        let rng_blocks: Vec<&mut [ChaCha8Rng]> = rngs.chunks_mut(BLOCK_CHAINS).collect();
        let traj_blocks: Vec<Option<ArrayViewMut3<f64>>> = match traj.as_mut() {
            Some(t) => t
                .axis_chunks_iter_mut(Axis(0), BLOCK_CHAINS)
                .map(Some)
                .collect(),
            None => x_blocks.iter().map(|_| None).collect(),
        };
        let work: Vec<_> = x_blocks
            .into_iter()
            .zip(rng_blocks)
            .zip(traj_blocks)
            .collect();

        let run = |((mut xb, rb), tb): ((ArrayViewMut2<f64>, &mut [ChaCha8Rng]), Option<ArrayViewMut3<f64>>)| {
            run_block(model, sch, strat, cfg, &mut xb, rb, tb)
        };

        if cfg.threads > 1 {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(cfg.threads)
                .build()
                .map_err(|e| Error::config(format!("thread pool: {e}")))?;
            pool.install(|| work.into_par_iter().try_for_each(run))?;
        } else {
            for item in work {
                run(item)?;
            }
        }
    }

    if let Some((i, _)) = x
        .outer_iter()
        .enumerate()
        .find(|(_, row)| row.iter().any(|v| !v.is_finite()))
    {
        return Err(Error::numerical(format!(
            "non-finite terminal state in chain {i} (strategy {})",
            strat.name()
        )));
    }

    Ok(SampleBatch {
        finals: x,
        trajectories: traj,
        chain_streams: (0..n as u64).collect(),
        seed: cfg.seed,
    })
}

impl SampleBatch {
    pub fn n_chains(&self) -> usize {
        self.finals.nrows()
    }

    pub fn dim(&self) -> usize {
        self.finals.ncols()
    }

    /// CSV with header `x0,...,x{d-1}`, one row per chain, LF line endings.
    pub fn to_csv_string(&self) -> String {
        let d = self.dim();
        let mut out = String::new();
        for j in 0..d {
            if j > 0 {
                out.push(',');
            }
            out.push_str(&format!("x{j}"));
        }
        out.push('\n');
        for row in self.finals.outer_iter() {
            for (j, v) in row.iter().enumerate() {
                if j > 0 {
                    out.push(',');
                }
                out.push_str(&format!("{v}"));
            }
            out.push('\n');
        }
        out
    }

    /// Little-endian trajectory dump: magic, version, n_chains, N+1, d, data.
    pub fn trajectory_bytes(&self) -> Option<Vec<u8>> {
        let t = self.trajectories.as_ref()?;
        let (n, s, d) = t.dim();
        let mut buf = Vec::with_capacity(32 + n * s * d * 8);
        buf.extend_from_slice(b"DOOBTRAJ");
        buf.extend_from_slice(&1u32.to_le_bytes());
        buf.extend_from_slice(&(n as u64).to_le_bytes());
        buf.extend_from_slice(&(s as u64).to_le_bytes());
        buf.extend_from_slice(&(d as u64).to_le_bytes());
        for v in t.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        Some(buf)
    }
}

/// Parse a trajectory dump produced by [`SampleBatch::trajectory_bytes`].
pub fn read_trajectory_bytes(bytes: &[u8]) -> Result<Array3<f64>> {
    if bytes.len() < 36 || &bytes[..8] != b"DOOBTRAJ" {
        return Err(Error::format("not a trajectory file"));
    }
    let ver = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if ver != 1 {
        return Err(Error::format(format!("unsupported trajectory version {ver}")));
    }
    let n = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let s = u64::from_le_bytes(bytes[20..28].try_into().unwrap()) as usize;
    let d = u64::from_le_bytes(bytes[28..36].try_into().unwrap()) as usize;
    let need = 36 + n * s * d * 8;
    if bytes.len() != need {
        return Err(Error::format("trajectory file truncated"));
    }
    let data: Vec<f64> = bytes[36..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Array3::from_shape_vec((n, s, d), data).map_err(|e| Error::format(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    /// Exact eps model for a standard-normal prior: the marginal at every step
    /// is N(0, 1), so score = -x and eps_hat = sqrt(1 - abar_k) * x.
    struct StdNormalEps;

    impl ScoreModel for StdNormalEps {
        fn dim(&self) -> usize {
            1
        }
        fn eps_batch(
            &self,
            sch: &NoiseSchedule,
            times: &TimeInput,
            x: ArrayView2<f64>,
            _cond: &CondData,
        ) -> Result<Array2<f64>> {
            let k = times.uniform_step().expect("uniform step");
            let c = (1.0 - sch.alpha_bar(k)).sqrt();
            Ok(x.mapv(|v| c * v))
        }
        fn eps_vjp_x(
            &self,
            sch: &NoiseSchedule,
            times: &TimeInput,
            _x: ArrayView2<f64>,
            _cond: &CondData,
            cot: ArrayView2<f64>,
        ) -> Result<Array2<f64>> {
            let k = times.uniform_step().unwrap();
            let c = (1.0 - sch.alpha_bar(k)).sqrt();
            Ok(cot.mapv(|v| c * v))
        }
    }

    fn sch() -> NoiseSchedule {
        NoiseSchedule::linear(100, 1e-4, 2e-2).unwrap()
    }

    #[test]
    fn forward_noise_is_the_stated_affine_map() {
        let s = NoiseSchedule::custom(vec![0.75]).unwrap(); // abar_1 = 0.25
        let x0 = ndarray::array![2.0, -1.0];
        let mut rng = substream(1, domain::DATA, 0);
        let (xk, eps) = forward_noise(&s, 1, x0.view(), &mut rng);
        for i in 0..2 {
            assert_abs_diff_eq!(xk[i], 0.5 * x0[i] + 0.75f64.sqrt() * eps[i], epsilon = 1e-15);
        }
        // eps = 0 path: x_k = sqrt(abar) x0
        let xk0 = x0.mapv(|v| 0.25f64.sqrt() * v);
        assert_abs_diff_eq!(xk0[0], 1.0, epsilon = 1e-15);
        // x0 = 0 path: x_k = sqrt(1-abar) eps
        let zero = ndarray::Array1::zeros(2);
        let (xz, ez) = forward_noise(&s, 1, zero.view(), &mut rng);
        for i in 0..2 {
            assert_abs_diff_eq!(xz[i], 0.75f64.sqrt() * ez[i], epsilon = 1e-15);
        }
    }

    /// Monte-Carlo oracle on the forward kernel: x0 = 1, abar = 0.25 gives
    /// mean 0.5 and variance 0.75.
    #[test]
    fn forward_noise_moments() {
        let s = NoiseSchedule::custom(vec![0.75]).unwrap();
        let mut rng = substream(2, domain::DATA, 0);
        let x0 = ndarray::array![1.0];
        let n = 100_000;
        let mut sum = 0.0;
        let mut sq = 0.0;
        for _ in 0..n {
            let (xk, _) = forward_noise(&s, 1, x0.view(), &mut rng);
            sum += xk[0];
            sq += xk[0] * xk[0];
        }
        let mean = sum / n as f64;
        let var = sq / n as f64 - mean * mean;
        assert!((mean - 0.5).abs() < 0.01, "mean {mean}");
        assert!((var - 0.75).abs() < 0.02, "var {var}");
    }

    #[test]
    fn reverse_step_terminal_is_deterministic() {
        let s = sch();
        let x = ndarray::array![0.3];
        let eps = ndarray::array![0.1];
        let cfg = SamplerConfig::new(1, 0);
        let mut r1 = substream(0, domain::CHAIN, 0);
        let mut r2 = substream(99, domain::CHAIN, 7);
        let a = reverse_step(&s, 1, x.view(), eps.view(), &mut r1, &cfg);
        let b = reverse_step(&s, 1, x.view(), eps.view(), &mut r2, &cfg);
        assert_eq!(a, b); // k = 1 draws no noise
    }

    #[test]
    fn reverse_step_vanishes_with_beta() {
        let s = NoiseSchedule::custom(vec![1e-12, 1e-12]).unwrap();
        let x = ndarray::array![0.7, -0.2];
        let eps = ndarray::Array1::zeros(2);
        let cfg = SamplerConfig::new(1, 0);
        let mut rng = substream(0, domain::CHAIN, 0);
        let out = reverse_step(&s, 1, x.view(), eps.view(), &mut rng, &cfg);
        for i in 0..2 {
            assert_abs_diff_eq!(out[i], x[i], epsilon = 1e-9);
        }
    }

    /// Closed-form stationary check: the exact reverse chain of a standard
    /// normal stays standard normal.
    #[test]
    fn gaussian_reverse_chain_matches_stationary_law() {
        let s = NoiseSchedule::linear(200, 1e-4, 2e-2).unwrap();
        let cfg = SamplerConfig::new(10_000, 42);
        let batch = sample(&StdNormalEps, &s, &NullStrategy, &cfg).unwrap();
        let xs = batch.finals.column(0);
        let n = xs.len() as f64;
        let mean = xs.sum() / n;
        let var = xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        // 3 standard errors: se(mean) = 1/sqrt(n), se(var) ~ sqrt(2/n)
        assert!(mean.abs() < 3.0 / n.sqrt(), "mean {mean}");
        assert!((var - 1.0).abs() < 3.0 * (2.0 / n).sqrt(), "var {var}");
    }

    #[test]
    fn sampler_is_bitwise_deterministic_and_thread_invariant() {
        let s = sch();
        let mut cfg = SamplerConfig::new(2500, 7);
        cfg.store_trajectory = true;
        let a = sample(&StdNormalEps, &s, &NullStrategy, &cfg).unwrap();
        let b = sample(&StdNormalEps, &s, &NullStrategy, &cfg).unwrap();
        assert_eq!(a.finals, b.finals);
        assert_eq!(a.trajectories, b.trajectories);
        cfg.threads = 4;
        let c = sample(&StdNormalEps, &s, &NullStrategy, &cfg).unwrap();
        assert_eq!(a.finals, c.finals);
        assert_eq!(a.trajectories, c.trajectories);
    }

    #[test]
    fn trajectory_shape_and_final_slice() {
        let s = sch();
        let mut cfg = SamplerConfig::new(3, 1);
        cfg.store_trajectory = true;
        let batch = sample(&StdNormalEps, &s, &NullStrategy, &cfg).unwrap();
        let t = batch.trajectories.as_ref().unwrap();
        assert_eq!(t.dim(), (3, s.n_steps() + 1, 1));
        assert_eq!(t.index_axis(Axis(1), 0), batch.finals);
        let bytes = batch.trajectory_bytes().unwrap();
        let back = read_trajectory_bytes(&bytes).unwrap();
        assert_eq!(&back, t);
    }

    #[test]
    fn csv_shape() {
        let s = sch();
        let cfg = SamplerConfig::new(3, 1);
        struct Two;
        impl ScoreModel for Two {
            fn dim(&self) -> usize {
                2
            }
            fn eps_batch(
                &self,
                sch: &NoiseSchedule,
                times: &TimeInput,
                x: ArrayView2<f64>,
                _c: &CondData,
            ) -> Result<Array2<f64>> {
                let k = times.uniform_step().unwrap();
                Ok(x.mapv(|v| (1.0 - sch.alpha_bar(k)).sqrt() * v))
            }
            fn eps_vjp_x(
                &self,
                _s: &NoiseSchedule,
                _t: &TimeInput,
                _x: ArrayView2<f64>,
                _c: &CondData,
                cot: ArrayView2<f64>,
            ) -> Result<Array2<f64>> {
                Ok(cot.to_owned())
            }
        }
        let batch = sample(&Two, &s, &NullStrategy, &cfg).unwrap();
        let csv = batch.to_csv_string();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "x0,x1");
        assert_eq!(lines.len(), 4);
    }
}
