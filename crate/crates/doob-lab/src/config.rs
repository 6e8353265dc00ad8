//! Flat-key experiment configuration.
//!
//! Grammar: one `key = value` pair per line; keys are dotted lowercase paths;
//! `#` starts a comment; blank lines are ignored; later occurrences of a key
//! override earlier ones (which is how CLI overrides are appended). Vectors
//! are comma-separated; matrices separate rows with `;`.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2};

use crate::bench::StrategySpec;
use crate::conditioning::{GuidanceSchedule, RenoiseIndex};
use crate::engine::{CondKind, SamplerConfig, SigmaRule};
use crate::error::{Error, Result};
use crate::nets::{
    ControlConfig, ControlWeight, MaskSampler, NetArch, OptimizerKind, TimeMode, TrainConfig,
};
use crate::oracle::{GaussianMixturePrior, Observation, Operator};
use crate::schedule::NoiseSchedule;

/// Parsed flat-key config plus the raw text (the echo written into outputs).
#[derive(Debug, Clone)]
pub struct RawConfig {
    map: BTreeMap<String, String>,
    text: String,
}

impl RawConfig {
    pub fn parse(text: &str) -> Result<RawConfig> {
        let mut map = BTreeMap::new();
        for (ln, line) in text.lines().enumerate() {
            let line = match line.find('#') {
                Some(i) => &line[..i],
                None => line,
            };
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::config(format!("config line {}: expected 'key = value'", ln + 1))
            })?;
            let key = k.trim();
            if key.is_empty() {
                return Err(Error::config(format!("config line {}: empty key", ln + 1)));
            }
            map.insert(key.to_string(), v.trim().to_string());
        }
        Ok(RawConfig { map, text: text.to_string() })
    }

    /// Raw text, suitable for re-parsing (the config echo).
    pub fn text(&self) -> &str {
        &self.text
    }

    /// Append override lines (later keys win when re-parsed).
    pub fn with_overrides(&self, overrides: &[(String, String)]) -> Result<RawConfig> {
        let mut text = self.text.clone();
        if !text.ends_with('\n') && !text.is_empty() {
            text.push('\n');
        }
        for (k, v) in overrides {
            text.push_str(&format!("{k} = {v}\n"));
        }
        RawConfig::parse(&text)
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.map.get(key).map(|s| s.as_str())
    }

    pub fn require(&self, key: &str) -> Result<&str> {
        self.get(key)
            .ok_or_else(|| Error::config(format!("missing config key '{key}'")))
    }

    pub fn get_f64(&self, key: &str) -> Result<Option<f64>> {
        self.get(key)
            .map(|s| {
                s.parse::<f64>()
                    .map_err(|_| Error::config(format!("key '{key}': not a number: '{s}'")))
            })
            .transpose()
    }

    pub fn f64_or(&self, key: &str, default: f64) -> Result<f64> {
        Ok(self.get_f64(key)?.unwrap_or(default))
    }

    pub fn get_u64(&self, key: &str) -> Result<Option<u64>> {
        self.get(key)
            .map(|s| {
                s.parse::<u64>()
                    .map_err(|_| Error::config(format!("key '{key}': not an integer: '{s}'")))
            })
            .transpose()
    }

    pub fn usize_or(&self, key: &str, default: usize) -> Result<usize> {
        Ok(self.get_u64(key)?.map(|v| v as usize).unwrap_or(default))
    }

    pub fn bool_or(&self, key: &str, default: bool) -> Result<bool> {
        match self.get(key) {
            None => Ok(default),
            Some("true") | Some("1") => Ok(true),
            Some("false") | Some("0") => Ok(false),
            Some(s) => Err(Error::config(format!("key '{key}': not a bool: '{s}'"))),
        }
    }

    pub fn vec_f64(&self, key: &str) -> Result<Vec<f64>> {
        let s = self.require(key)?;
        s.split(',')
            .map(|t| {
                t.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::config(format!("key '{key}': bad number '{t}'")))
            })
            .collect()
    }

    pub fn vec_u64(&self, key: &str) -> Result<Vec<u64>> {
        let s = self.require(key)?;
        s.split(',')
            .map(|t| {
                t.trim()
                    .parse::<u64>()
                    .map_err(|_| Error::config(format!("key '{key}': bad integer '{t}'")))
            })
            .collect()
    }

    pub fn matrix(&self, key: &str) -> Result<Array2<f64>> {
        let s = self.require(key)?;
        let rows: Vec<Vec<f64>> = s
            .split(';')
            .map(|row| {
                row.split(',')
                    .map(|t| {
                        t.trim()
                            .parse::<f64>()
                            .map_err(|_| Error::config(format!("key '{key}': bad number '{t}'")))
                    })
                    .collect()
            })
            .collect::<Result<_>>()?;
        let ncols = rows.first().map(|r| r.len()).unwrap_or(0);
        if ncols == 0 || rows.iter().any(|r| r.len() != ncols) {
            return Err(Error::config(format!("key '{key}': ragged or empty matrix")));
        }
        let flat: Vec<f64> = rows.into_iter().flatten().collect();
        Array2::from_shape_vec((flat.len() / ncols, ncols), flat)
            .map_err(|e| Error::config(format!("key '{key}': {e}")))
    }

    /// Mandatory seed: no wall-clock defaults anywhere.
    pub fn seed(&self) -> Result<u64> {
        self.get_u64("seed")?
            .ok_or_else(|| Error::config("missing mandatory 'seed' (no wall-clock default)"))
    }
}

pub fn build_schedule(cfg: &RawConfig) -> Result<NoiseSchedule> {
    match cfg.get("schedule.kind").unwrap_or("linear") {
        "linear" => {
            let n = cfg.usize_or("schedule.n_steps", 250)?;
            let b1 = cfg.f64_or("schedule.beta_1", 1e-4)?;
            let bn = cfg.f64_or("schedule.beta_n", 2e-2)?;
            NoiseSchedule::linear(n, b1, bn)
        }
        "cosine" => NoiseSchedule::cosine(cfg.usize_or("schedule.n_steps", 250)?),
        "custom" => NoiseSchedule::custom(cfg.vec_f64("schedule.betas")?),
        other => Err(Error::config(format!("unknown schedule.kind '{other}'"))),
    }
}

pub fn build_prior(cfg: &RawConfig) -> Result<GaussianMixturePrior> {
    let d = cfg.usize_or("prior.d", 1)?;
    let weights = match cfg.get("prior.weights") {
        Some(_) => cfg.vec_f64("prior.weights")?,
        None => vec![1.0],
    };
    let mut means = Vec::with_capacity(weights.len());
    let mut covs = Vec::with_capacity(weights.len());
    for m in 0..weights.len() {
        let mean = Array1::from_vec(cfg.vec_f64(&format!("prior.mean.{m}"))?);
        if mean.len() != d {
            return Err(Error::config(format!("prior.mean.{m} has wrong dimension")));
        }
        let cov = if cfg.get(&format!("prior.cov.{m}")).is_some() {
            cfg.matrix(&format!("prior.cov.{m}"))?
        } else {
            let v = Array1::from_vec(cfg.vec_f64(&format!("prior.var.{m}"))?);
            Array2::from_diag(&v)
        };
        means.push(mean);
        covs.push(cov);
    }
    GaussianMixturePrior::new(weights, means, covs)
}

pub fn build_observation(cfg: &RawConfig) -> Result<Observation> {
    let y = Array1::from_vec(cfg.vec_f64("obs.y")?);
    let noise_std = cfg.f64_or("obs.noise_std", 0.0)?;
    let op = match cfg.get("obs.operator").unwrap_or("mask") {
        "mask" => {
            let m = cfg.vec_f64("obs.mask")?;
            Operator::Mask(m.into_iter().map(|v| v != 0.0).collect())
        }
        "matrix" => Operator::Matrix(cfg.matrix("obs.matrix")?),
        other => return Err(Error::config(format!("unknown obs.operator '{other}'"))),
    };
    Observation::new(op, y, noise_std)
}

pub fn build_guidance(cfg: &RawConfig) -> Result<GuidanceSchedule> {
    let g = match cfg.get("guidance.kind").unwrap_or("constant") {
        "constant" => GuidanceSchedule::Constant(cfg.f64_or("guidance.gamma", 0.1)?),
        "alpha_weighted" => GuidanceSchedule::AlphaWeighted,
        other => return Err(Error::config(format!("unknown guidance.kind '{other}'"))),
    };
    g.validate()?;
    Ok(g)
}

pub fn parse_strategy_spec(cfg: &RawConfig, name: &str) -> Result<StrategySpec> {
    Ok(match name {
        "null" => StrategySpec::Null,
        "exact_h" => StrategySpec::ExactH,
        "recon_guidance" => StrategySpec::ReconGuidance {
            gsched: build_guidance(cfg)?,
            stop_gradient: cfg.bool_or("guidance.stop_gradient", false)?,
        },
        "replacement" => StrategySpec::Replacement,
        "repaint" => StrategySpec::Repaint {
            r: cfg.usize_or("repaint.r", 5)?,
            renoise: match cfg.get("repaint.renoise").unwrap_or("printed") {
                "printed" => RenoiseIndex::Printed,
                "current" => RenoiseIndex::Current,
                other => return Err(Error::config(format!("unknown repaint.renoise '{other}'"))),
            },
        },
        "rfdiff" => StrategySpec::Rfdiff,
        "amortised" => StrategySpec::Amortised,
        "finetuned_h" => StrategySpec::FinetunedH,
        other => return Err(Error::config(format!("unknown strategy '{other}'"))),
    })
}

pub fn build_sampler_config(cfg: &RawConfig, threads: usize) -> Result<SamplerConfig> {
    let mut sc = SamplerConfig::new(cfg.usize_or("sampler.n_chains", 4000)?, cfg.seed()?);
    sc.store_trajectory = cfg.bool_or("sampler.store_trajectory", false)?;
    sc.sigma_rule = match cfg.get("sampler.sigma_rule").unwrap_or("sqrt_beta") {
        "sqrt_beta" => SigmaRule::SqrtBeta,
        "beta" => SigmaRule::Beta,
        other => return Err(Error::config(format!("unknown sampler.sigma_rule '{other}'"))),
    };
    sc.threads = threads;
    Ok(sc)
}

pub fn build_net_arch(cfg: &RawConfig, d: usize) -> Result<NetArch> {
    let cond = match cfg.get("net.cond").unwrap_or("none") {
        "none" => CondKind::None,
        "masked" => CondKind::Masked,
        "mask_only" => CondKind::MaskOnly,
        "aux" => CondKind::Aux { n_aux: cfg.usize_or("net.aux_dim", 1)? },
        other => return Err(Error::config(format!("unknown net.cond '{other}'"))),
    };
    let mut arch = NetArch::new(d, cond);
    if cfg.get("net.hidden").is_some() {
        arch.hidden = cfg.vec_f64("net.hidden")?.into_iter().map(|v| v as usize).collect();
    }
    arch.time_mode = match cfg.get("net.time_mode").unwrap_or("whole") {
        "whole" => TimeMode::Whole,
        "per_coord" => TimeMode::PerCoord,
        other => return Err(Error::config(format!("unknown net.time_mode '{other}'"))),
    };
    arch.pad_value = cfg.f64_or("net.pad_value", crate::nets::DEFAULT_PAD_VALUE)?;
    arch.validate()?;
    Ok(arch)
}

pub fn build_train_config(cfg: &RawConfig) -> Result<TrainConfig> {
    let mut tc = TrainConfig::new(cfg.usize_or("train.steps", 10_000)?, cfg.seed()?);
    tc.batch = cfg.usize_or("train.batch", 128)?;
    tc.lr = cfg.f64_or("train.lr", 1e-3)?;
    tc.optimizer = match cfg.get("train.optimizer").unwrap_or("adam") {
        "adam" => OptimizerKind::Adam,
        "sgd" => OptimizerKind::Sgd,
        other => return Err(Error::config(format!("unknown train.optimizer '{other}'"))),
    };
    tc.p_drop = cfg.f64_or("train.p_drop", 0.2)?;
    tc.validate()?;
    Ok(tc)
}

pub fn build_mask_sampler(cfg: &RawConfig) -> Result<MaskSampler> {
    Ok(match cfg.get("train.mask_sampler").unwrap_or("uniform_nonempty") {
        "uniform_nonempty" => MaskSampler::UniformNonempty,
        "fixed" => MaskSampler::Fixed(
            cfg.vec_f64("train.mask")?.into_iter().map(|v| v != 0.0).collect(),
        ),
        "bernoulli" => MaskSampler::Bernoulli(cfg.f64_or("train.bernoulli_p", 0.5)?),
        other => return Err(Error::config(format!("unknown train.mask_sampler '{other}'"))),
    })
}

pub fn build_control_config(cfg: &RawConfig) -> Result<ControlConfig> {
    let mut cc = ControlConfig::new(cfg.usize_or("train.steps", 500)?, cfg.seed()?);
    cc.n_chains = cfg.usize_or("control.chains", 256)?;
    cc.lr = cfg.f64_or("train.lr", 1e-3)?;
    cc.weight = match cfg.get("control.weight").unwrap_or("simple") {
        "simple" => ControlWeight::Simple,
        "exact" => ControlWeight::Exact,
        other => return Err(Error::config(format!("unknown control.weight '{other}'"))),
    };
    cc.backprop_limit = cfg.usize_or("control.backprop_limit", 100)?;
    Ok(cc)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_keys_comments_and_overrides() {
        let cfg = RawConfig::parse(
            "# experiment\nseed = 7\nschedule.kind = linear\nschedule.n_steps = 10\n\nprior.d = 2 # inline\n",
        )
        .unwrap();
        assert_eq!(cfg.seed().unwrap(), 7);
        assert_eq!(cfg.get("prior.d"), Some("2"));
        let cfg2 = cfg.with_overrides(&[("seed".into(), "9".into())]).unwrap();
        assert_eq!(cfg2.seed().unwrap(), 9);
        // echo re-parses to the same state
        let echo = RawConfig::parse(cfg2.text()).unwrap();
        assert_eq!(echo.seed().unwrap(), 9);
    }

    #[test]
    fn missing_seed_is_config_error() {
        let cfg = RawConfig::parse("schedule.n_steps = 5\n").unwrap();
        assert!(matches!(cfg.seed(), Err(Error::Config(_))));
    }

    #[test]
    fn builds_domain_objects() {
        let text = "\
seed = 1
schedule.kind = linear
schedule.n_steps = 50
prior.d = 2
prior.weights = 0.4, 0.6
prior.mean.0 = 0.0, 0.0
prior.cov.0 = 1.0, 0.9; 0.9, 1.0
prior.mean.1 = 1.0, -1.0
prior.var.1 = 0.5, 0.5
obs.operator = mask
obs.mask = 1, 0
obs.y = 1.0
obs.noise_std = 0
sampler.n_chains = 16
";
        let cfg = RawConfig::parse(text).unwrap();
        let sch = build_schedule(&cfg).unwrap();
        assert_eq!(sch.n_steps(), 50);
        let prior = build_prior(&cfg).unwrap();
        assert_eq!(prior.n_components(), 2);
        assert_eq!(prior.cov_of(0)[[0, 1]], 0.9);
        assert_eq!(prior.cov_of(1)[[0, 1]], 0.0);
        let obs = build_observation(&cfg).unwrap();
        assert!(obs.is_hard());
        let sc = build_sampler_config(&cfg, 2).unwrap();
        assert_eq!(sc.n_chains, 16);
        assert_eq!(sc.threads, 2);
    }

    #[test]
    fn bad_values_are_config_errors() {
        let cfg = RawConfig::parse("seed = x\n");
        assert!(cfg.is_ok()); // parse succeeds, typed getter fails
        assert!(cfg.unwrap().seed().is_err());
        assert!(RawConfig::parse("just a line\n").is_err());
        let cfg = RawConfig::parse("seed = 1\nprior.d = 2\nprior.weights = 1.0\nprior.mean.0 = 0, 0\nprior.cov.0 = 1, 2; 3\n").unwrap();
        assert!(build_prior(&cfg).is_err());
    }
}
