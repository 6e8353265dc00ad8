//! Experiment runner: `doob-lab {train|sample|eval|bench} --config PATH
//! [--seed U64] [--out DIR]`.
//!
//! `DOOB_LAB_THREADS` caps sampling parallelism (default 1). Exit codes:
//! 0 success, 2 configuration error, 3 training divergence, 1 otherwise.
//! All file writes are atomic (temp file + rename), and every output carries
//! the config echo, either embedded (checkpoints) or as a `.meta` sidecar
//! that is itself a valid config file.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2};

use crate::bench::{run_benchmark, BenchTarget, Benchmark, StrategySpec};
use crate::config::{
    build_control_config, build_mask_sampler, build_net_arch, build_observation, build_prior,
    build_sampler_config, build_schedule, build_train_config, parse_strategy_spec, RawConfig,
};
use crate::engine::{sample, ScoreModel};
use crate::error::{Error, Result};
use crate::eval::{quadrature_posterior_1d, PosteriorTarget1d};
use crate::nets::{
    checkpoint_bytes, checkpoint_from_bytes, finetune_control, finetune_offline, train_amortised,
    train_classifier_free, train_rfdiff_style, train_unconditional, ComponentLabelSource, EpsNet,
    FixedAuxEpsModel, NetEpsModel, ResidualEpsModel,
};
use crate::oracle::{true_posterior, OracleEpsModel};
use crate::rng::{domain, substream};
use crate::svg;

pub const VERSION_STRING: &str = concat!("doob-lab-v", env!("CARGO_PKG_VERSION"));

/// Entry point used by the binary; returns the process exit code.
pub fn run(args: &[String]) -> i32 {
    match run_inner(args) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

struct Invocation {
    cmd: String,
    config: PathBuf,
    seed: Option<u64>,
    out: Option<String>,
}

fn usage() -> String {
    "usage: doob-lab {train|sample|eval|bench} --config PATH [--seed U64] [--out DIR]".into()
}

fn parse_args(args: &[String]) -> Result<Invocation> {
    let mut it = args.iter();
    let cmd = it.next().ok_or_else(|| Error::config(usage()))?.clone();
    if !["train", "sample", "eval", "bench"].contains(&cmd.as_str()) {
        return Err(Error::config(format!("unknown subcommand '{cmd}'; {}", usage())));
    }
    let mut config = None;
    let mut seed = None;
    let mut out = None;
    while let Some(flag) = it.next() {
        match flag.as_str() {
            "--config" => {
                config = Some(PathBuf::from(
                    it.next().ok_or_else(|| Error::config("--config needs a path"))?,
                ))
            }
            "--seed" => {
                let v = it.next().ok_or_else(|| Error::config("--seed needs a value"))?;
                seed = Some(
                    v.parse::<u64>()
                        .map_err(|_| Error::config(format!("--seed: bad integer '{v}'")))?,
                );
            }
            "--out" => {
                out = Some(it.next().ok_or_else(|| Error::config("--out needs a path"))?.clone())
            }
            other => return Err(Error::config(format!("unknown flag '{other}'; {}", usage()))),
        }
    }
    Ok(Invocation {
        cmd,
        config: config.ok_or_else(|| Error::config(format!("--config is required; {}", usage())))?,
        seed,
        out,
    })
}

fn threads_from_env() -> Result<usize> {
    match std::env::var("DOOB_LAB_THREADS") {
        Ok(v) => v
            .parse::<usize>()
            .map_err(|_| Error::config(format!("DOOB_LAB_THREADS: bad value '{v}'")))
            .map(|t| t.max(1)),
        Err(_) => Ok(1),
    }
}

fn run_inner(args: &[String]) -> Result<()> {
    let inv = parse_args(args)?;
    let text = fs::read_to_string(&inv.config)
        .map_err(|e| Error::config(format!("cannot read config {}: {e}", inv.config.display())))?;
    let mut overrides = Vec::new();
    if let Some(s) = inv.seed {
        overrides.push(("seed".to_string(), s.to_string()));
    }
    if let Some(o) = &inv.out {
        overrides.push(("out".to_string(), o.clone()));
    }
    let cfg = RawConfig::parse(&text)?.with_overrides(&overrides)?;
    let out_dir = PathBuf::from(cfg.require("out")?);
    fs::create_dir_all(&out_dir)?;
    let threads = threads_from_env()?;
    match inv.cmd.as_str() {
        "train" => cmd_train(&cfg, &out_dir),
        "sample" => cmd_sample(&cfg, &out_dir, threads),
        "eval" => cmd_eval(&cfg, &out_dir),
        "bench" => cmd_bench(&cfg, &out_dir, threads),
        _ => unreachable!(),
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension(format!(
        "{}.tmp",
        path.extension().and_then(|e| e.to_str()).unwrap_or("out")
    ));
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

fn write_meta(path: &Path, cfg: &RawConfig) -> Result<()> {
    let meta = format!("# {VERSION_STRING}\n{}", cfg.text());
    write_atomic(&path.with_extension(format!(
        "{}.meta",
        path.extension().and_then(|e| e.to_str()).unwrap_or("out")
    )), meta.as_bytes())
}

fn loss_csv(losses: &[f64]) -> String {
    let mut out = String::from("step,loss\n");
    for (i, l) in losses.iter().enumerate() {
        out.push_str(&format!("{i},{l}\n"));
    }
    out
}

/// Load a checkpoint file into a network.
pub fn load_net(path: &Path) -> Result<EpsNet> {
    let bytes = fs::read(path)
        .map_err(|e| Error::config(format!("cannot read checkpoint {}: {e}", path.display())))?;
    Ok(checkpoint_from_bytes(&bytes)?.0)
}

/// Build the score model described by the `score.*` keys.
fn build_model(cfg: &RawConfig) -> Result<Box<dyn ScoreModel + Send + Sync>> {
    match cfg.get("score.kind").unwrap_or("oracle") {
        "oracle" => Ok(Box::new(OracleEpsModel::new(build_prior(cfg)?))),
        "checkpoint" => {
            let net = load_net(Path::new(cfg.require("score.checkpoint")?))?;
            if cfg.get("score.aux").is_some() {
                let aux = Array1::from_vec(cfg.vec_f64("score.aux")?);
                Ok(Box::new(FixedAuxEpsModel::new(net, aux)?))
            } else {
                Ok(Box::new(NetEpsModel::new(net)))
            }
        }
        "residual" => {
            let frozen: Box<dyn ScoreModel + Send + Sync> =
                match cfg.require("score.frozen")? {
                    "oracle" => Box::new(OracleEpsModel::new(build_prior(cfg)?)),
                    path => Box::new(NetEpsModel::new(load_net(Path::new(path))?)),
                };
            let h_net = load_net(Path::new(cfg.require("score.h_net")?))?;
            Ok(Box::new(ResidualEpsModel::new(frozen, h_net)?))
        }
        other => Err(Error::config(format!("unknown score.kind '{other}'"))),
    }
}

/// The conditioning target: `target.kind = interval` or an observation.
fn build_target(cfg: &RawConfig) -> Result<BenchTarget> {
    match cfg.get("target.kind").unwrap_or("obs") {
        "interval" => {
            let a = cfg.f64_or("target.a", f64::NEG_INFINITY)?;
            let b = cfg.f64_or("target.b", f64::INFINITY)?;
            Ok(BenchTarget::Interval { a, b })
        }
        "obs" => Ok(BenchTarget::Obs(build_observation(cfg)?)),
        other => Err(Error::config(format!("unknown target.kind '{other}'"))),
    }
}

/// A benchmark from the registry, or an ad-hoc one from explicit config keys.
fn benchmark_from_config(cfg: &RawConfig) -> Result<Benchmark> {
    if let Some(name) = cfg.get("bench.name") {
        let mut b = Benchmark::by_name(name)?;
        if cfg.get("schedule.kind").is_some() || cfg.get("schedule.n_steps").is_some() {
            b.schedule = build_schedule(cfg)?;
        }
        Ok(b)
    } else {
        Ok(Benchmark {
            name: "custom",
            prior: build_prior(cfg)?,
            target: build_target(cfg)?,
            schedule: build_schedule(cfg)?,
            default_chains: cfg.usize_or("sampler.n_chains", 4000)?,
            default_guidance: crate::conditioning::GuidanceSchedule::Constant(0.1),
            default_repaint_r: 5,
        })
    }
}

fn default_net_keys(cfg: &RawConfig, algorithm: &str) -> Result<RawConfig> {
    // each trainer has a canonical conditioning layout; fill it in when the
    // config does not pin one
    let mut extra: Vec<(String, String)> = Vec::new();
    if cfg.get("net.cond").is_none() {
        let cond = match algorithm {
            "unconditional" | "finetune_control" => "none",
            "amortised" | "finetune_offline" => "masked",
            "classifier_free" => "aux",
            "rfdiff" => "mask_only",
            _ => "none",
        };
        extra.push(("net.cond".into(), cond.into()));
    }
    if cfg.get("net.time_mode").is_none() && algorithm == "rfdiff" {
        extra.push(("net.time_mode".into(), "per_coord".into()));
    }
    cfg.with_overrides(&extra)
}

fn cmd_train(cfg: &RawConfig, out_dir: &Path) -> Result<()> {
    let algorithm = cfg.get("train.algorithm").unwrap_or("unconditional").to_string();
    let cfg = default_net_keys(cfg, &algorithm)?;
    let sch = build_schedule(&cfg)?;
    let prior = build_prior(&cfg)?;
    let seed = cfg.seed()?;
    let arch = build_net_arch(&cfg, prior.dim())?;
    let mut init_rng = substream(seed, domain::INIT, 0);
    let mut net = EpsNet::init(arch, &mut init_rng)?;

    let losses: Vec<f64> = match algorithm.as_str() {
        "unconditional" => {
            let tc = build_train_config(&cfg)?;
            train_unconditional(&mut net, &prior, &sch, &tc)?.losses
        }
        "amortised" => {
            let tc = build_train_config(&cfg)?;
            let masks = build_mask_sampler(&cfg)?;
            train_amortised(&mut net, &prior, &masks, &sch, &tc)?.losses
        }
        "classifier_free" => {
            let tc = build_train_config(&cfg)?;
            match cfg.get("train.joint").unwrap_or("component_label") {
                "component_label" => {
                    let joint = ComponentLabelSource { prior: prior.clone() };
                    train_classifier_free(&mut net, &joint, &sch, &tc)?.losses
                }
                other => {
                    return Err(Error::config(format!("unknown train.joint '{other}'")))
                }
            }
        }
        "rfdiff" => {
            let tc = build_train_config(&cfg)?;
            let masks = build_mask_sampler(&cfg)?;
            train_rfdiff_style(&mut net, &prior, &masks, &sch, &tc)?.losses
        }
        "finetune_offline" => {
            let tc = build_train_config(&cfg)?;
            let masks = build_mask_sampler(&cfg)?;
            let frozen: Box<dyn ScoreModel + Send + Sync> =
                match cfg.get("score.frozen").unwrap_or("oracle") {
                    "oracle" => Box::new(OracleEpsModel::new(prior.clone())),
                    path => Box::new(NetEpsModel::new(load_net(Path::new(path))?)),
                };
            finetune_offline(frozen.as_ref(), &mut net, &prior, &masks, &sch, &tc)?.losses
        }
        "finetune_control" => {
            let cc = build_control_config(&cfg)?;
            let obs = build_observation(&cfg)?;
            let frozen: Box<dyn ScoreModel + Send + Sync> =
                match cfg.get("score.frozen").unwrap_or("oracle") {
                    "oracle" => Box::new(OracleEpsModel::new(prior.clone())),
                    path => Box::new(NetEpsModel::new(load_net(Path::new(path))?)),
                };
            finetune_control(frozen.as_ref(), &mut net, &obs, &sch, &cc)?.objectives
        }
        other => return Err(Error::config(format!("unknown train.algorithm '{other}'"))),
    };

    write_atomic(
        &out_dir.join("checkpoint.ckpt"),
        &checkpoint_bytes(&net, cfg.text()),
    )?;
    let loss_path = out_dir.join("loss.csv");
    write_atomic(&loss_path, loss_csv(&losses).as_bytes())?;
    write_meta(&loss_path, &cfg)?;
    println!(
        "trained {algorithm}: {} steps, checkpoint {}",
        losses.len(),
        out_dir.join("checkpoint.ckpt").display()
    );
    Ok(())
}

fn cmd_sample(cfg: &RawConfig, out_dir: &Path, threads: usize) -> Result<()> {
    let sch = build_schedule(cfg)?;
    let model = build_model(cfg)?;
    let spec = parse_strategy_spec(cfg, cfg.get("strategy.kind").unwrap_or("null"))?;
    let strat = {
        // strategies that reference the task need prior/target context
        let bench = benchmark_from_config(cfg)?;
        crate::bench::build_strategy(&bench, &spec)?
    };
    let sc = build_sampler_config(cfg, threads)?;
    let batch = sample(model.as_ref(), &sch, strat.as_ref(), &sc)?;

    let csv_path = out_dir.join("samples.csv");
    write_atomic(&csv_path, batch.to_csv_string().as_bytes())?;
    write_meta(&csv_path, cfg)?;
    if let Some(bytes) = batch.trajectory_bytes() {
        write_atomic(&out_dir.join("trajectories.bin"), &bytes)?;
    }
    println!(
        "sampled {} chains of dimension {} with strategy {}",
        batch.n_chains(),
        batch.dim(),
        spec.name()
    );
    Ok(())
}

/// Parse a samples CSV written by `cmd_sample`.
pub fn read_samples_csv(path: &Path) -> Result<Array2<f64>> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::config(format!("cannot read samples {}: {e}", path.display())))?;
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::format("empty samples file"))?;
    let d = header.split(',').count();
    let mut data = Vec::new();
    let mut n = 0;
    for (i, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let row: Vec<f64> = line
            .split(',')
            .map(|t| {
                t.parse::<f64>()
                    .map_err(|_| Error::format(format!("samples line {}: bad number '{t}'", i + 2)))
            })
            .collect::<Result<_>>()?;
        if row.len() != d {
            return Err(Error::format(format!("samples line {}: wrong arity", i + 2)));
        }
        data.extend(row);
        n += 1;
    }
    Array2::from_shape_vec((n, d), data).map_err(|e| Error::format(e.to_string()))
}

fn cmd_eval(cfg: &RawConfig, out_dir: &Path) -> Result<()> {
    let bench = benchmark_from_config(cfg)?;
    let samples_path = PathBuf::from(cfg.require("eval.samples")?);
    let samples = read_samples_csv(&samples_path)?;
    if samples.ncols() != bench.d() {
        return Err(Error::config(format!(
            "samples dimension {} does not match task dimension {}",
            samples.ncols(),
            bench.d()
        )));
    }
    let n_proj = cfg.usize_or("eval.n_projections", 128)?;
    let report = bench.report(samples.view(), cfg.seed()?, n_proj)?;

    let metrics_path = out_dir.join("metrics.csv");
    write_atomic(&metrics_path, report.to_csv_string().as_bytes())?;
    write_meta(&metrics_path, cfg)?;
    write_atomic(&out_dir.join("metrics.txt"), report.summary().as_bytes())?;

    // ground-truth density table for external plotting
    let density_csv = match &bench.target {
        BenchTarget::Obs(obs) => {
            let post = true_posterior(&bench.prior, obs)?;
            let (grid, dens) = post.marginal_density_grid(-6.0, 6.0, 1201);
            let mut out = String::from("x");
            for j in 0..bench.d() {
                out.push_str(&format!(",dim{j}"));
            }
            out.push('\n');
            for (i, x) in grid.iter().enumerate() {
                out.push_str(&format!("{x}"));
                for j in 0..bench.d() {
                    out.push_str(&format!(",{}", dens[[i, j]]));
                }
                out.push('\n');
            }
            out
        }
        BenchTarget::Interval { a, b } => {
            let q = quadrature_posterior_1d(
                &bench.prior,
                &PosteriorTarget1d::Interval { a: *a, b: *b },
                a.max(-8.0),
                b.min(8.0),
                4001,
            )?;
            let mut out = String::from("x,dim0\n");
            for (x, p) in q.grid.iter().zip(&q.density) {
                out.push_str(&format!("{x},{p}\n"));
            }
            out
        }
    };
    write_atomic(&out_dir.join("posterior_density.csv"), density_csv.as_bytes())?;
    println!("{}", report.summary());
    Ok(())
}

fn cmd_bench(cfg: &RawConfig, out_dir: &Path, threads: usize) -> Result<()> {
    let bench = benchmark_from_config(cfg)?;
    let strategy_names: Vec<String> = cfg
        .require("bench.strategies")?
        .split(',')
        .map(|s| s.trim().to_string())
        .collect();
    let mut specs = Vec::new();
    for name in &strategy_names {
        let mut spec = parse_strategy_spec(cfg, name)?;
        // benchmark-calibrated default guidance when the config has none
        if let StrategySpec::ReconGuidance { gsched, .. } = &mut spec {
            if cfg.get("guidance.kind").is_none() && cfg.get("guidance.gamma").is_none() {
                *gsched = bench.default_guidance;
            }
        }
        specs.push(spec);
    }
    let seeds = match cfg.get("bench.seeds") {
        Some(_) => cfg.vec_u64("bench.seeds")?,
        None => vec![cfg.seed()?],
    };
    let n_chains = cfg.usize_or("bench.n_chains", bench.default_chains)?;
    let n_proj = cfg.usize_or("bench.n_projections", 128)?;

    // score models: the oracle for sampling-time strategies, checkpoints for
    // trained ones
    let oracle = bench.oracle_model();
    let mut net_models: Vec<(String, Box<dyn ScoreModel + Send + Sync>)> = Vec::new();
    for spec in &specs {
        if !spec.needs_network() {
            continue;
        }
        let name = spec.name().to_string();
        let model: Box<dyn ScoreModel + Send + Sync> = match spec {
            StrategySpec::FinetunedH => {
                let frozen: Box<dyn ScoreModel + Send + Sync> =
                    match cfg.get("bench.checkpoint.frozen").unwrap_or("oracle") {
                        "oracle" => Box::new(bench.oracle_model()),
                        path => Box::new(NetEpsModel::new(load_net(Path::new(path))?)),
                    };
                let key = "bench.checkpoint.finetuned_h";
                let h_net = load_net(Path::new(cfg.require(key)?))?;
                Box::new(ResidualEpsModel::new(frozen, h_net)?)
            }
            _ => {
                let key = format!("bench.checkpoint.{name}");
                let net = load_net(Path::new(cfg.require(&key)?))?;
                Box::new(NetEpsModel::new(net))
            }
        };
        net_models.push((name, model));
    }
    let model_for = |spec: &StrategySpec| -> Result<&dyn ScoreModel> {
        if spec.needs_network() {
            net_models
                .iter()
                .find(|(n, _)| n == spec.name())
                .map(|(_, m)| m.as_ref() as &dyn ScoreModel)
                .ok_or_else(|| Error::config(format!("no checkpoint for strategy {}", spec.name())))
        } else {
            Ok(&oracle as &dyn ScoreModel)
        }
    };

    let run = run_benchmark(&bench, &specs, &seeds, n_chains, threads, n_proj, model_for)?;

    let results_path = out_dir.join("bench_results.csv");
    write_atomic(&results_path, run.results_csv().as_bytes())?;
    write_meta(&results_path, cfg)?;
    write_atomic(&out_dir.join("bench_summary.csv"), run.summary_csv().as_bytes())?;

    // plots: mean sliced W1 per strategy, and per-seed scatter
    let mut labels = Vec::new();
    let mut means = Vec::new();
    let mut errs = Vec::new();
    for (s, metric, mean, se) in run.summary() {
        if metric == "sliced_w1" {
            labels.push(s);
            means.push(mean);
            errs.push(se);
        }
    }
    let bar = svg::bar_chart(
        &format!("{}: sliced W1 vs exact posterior", bench.name),
        "sliced W1",
        &labels,
        &means,
        &errs,
    );
    write_atomic(&out_dir.join("bench_w1.svg"), bar.as_bytes())?;
    let groups: Vec<(String, Vec<(f64, f64)>)> = labels
        .iter()
        .map(|s| {
            let pts: Vec<(f64, f64)> = run
                .rows
                .iter()
                .filter(|r| &r.strategy == s)
                .enumerate()
                .map(|(i, r)| (i as f64, r.report.sliced_w1))
                .collect();
            (s.clone(), pts)
        })
        .collect();
    let sc = svg::scatter(
        &format!("{}: per-seed sliced W1", bench.name),
        "sliced W1",
        &groups,
    );
    write_atomic(&out_dir.join("bench_scatter.svg"), sc.as_bytes())?;

    for (s, metric, mean, se) in run.summary() {
        if metric == "sliced_w1" {
            println!("{:<16} sliced_w1 = {mean:.5} +/- {se:.5}", s);
        }
    }
    Ok(())
}
