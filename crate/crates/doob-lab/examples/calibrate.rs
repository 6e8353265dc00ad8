//! Scratch calibration runs for benchmark defaults (guidance scales, chain
//! counts). Not part of the test suite; run with
//! `cargo run --example calibrate [section]`.

use std::time::Instant;

use doob_lab::bench::{build_strategy, BenchTarget, Benchmark, StrategySpec};
use doob_lab::conditioning::GuidanceSchedule;
use doob_lab::engine::{sample, SamplerConfig};
use doob_lab::eval::sliced_w1;
use doob_lab::oracle::{GaussianMixturePrior, Observation, Operator};
use doob_lab::rng::{domain, substream};
use doob_lab::schedule::NoiseSchedule;
use ndarray::array;

fn a2_task() -> Benchmark {
    let prior = GaussianMixturePrior::single(
        array![0.5, -0.3],
        array![[1.0, 0.4], [0.4, 0.8]],
    )
    .unwrap();
    let obs = Observation::new(Operator::Matrix(array![[1.0, 1.0]]), array![1.0], 0.5).unwrap();
    Benchmark {
        name: "a2-soft-2d",
        prior,
        target: BenchTarget::Obs(obs),
        schedule: NoiseSchedule::linear(1000, 1e-4, 2e-2).unwrap(),
        default_chains: 10_000,
        default_guidance: GuidanceSchedule::Constant(0.1),
        default_repaint_r: 5,
    }
}

fn run_strategy(bench: &Benchmark, spec: &StrategySpec, n: usize, seed: u64) -> (f64, f64) {
    let model = bench.oracle_model();
    let strat = build_strategy(bench, spec).unwrap();
    let cfg = SamplerConfig::new(n, seed);
    let t0 = Instant::now();
    let batch = sample(&model, &bench.schedule, strat.as_ref(), &cfg).unwrap();
    let secs = t0.elapsed().as_secs_f64();
    let refs = bench.reference_samples(seed, n).unwrap();
    let mut prng = substream(seed, domain::PROJ, 0);
    let w1 = sliced_w1(batch.finals.view(), refs.view(), 128, &mut prng).unwrap();
    (w1, secs)
}

fn main() {
    let section = std::env::args().nth(1).unwrap_or_else(|| "all".into());

    if section == "a2" || section == "all" {
        println!("== A2 soft 2-d conjugate task, N=1000, 10k chains ==");
        let bench = a2_task();
        let (w1, secs) = run_strategy(&bench, &StrategySpec::ExactH, 10_000, 1);
        println!("exact_h: sliced_w1 = {w1:.4}  ({secs:.1}s)");
        for gamma in [0.0005, 0.001, 0.0015, 0.002, 0.003, 0.004] {
            let spec = StrategySpec::ReconGuidance {
                gsched: GuidanceSchedule::Constant(gamma),
                stop_gradient: false,
            };
            let (w1, secs) = run_strategy(&bench, &spec, 10_000, 1);
            println!("guidance gamma={gamma}: sliced_w1 = {w1:.4}  ({secs:.1}s)");
        }
        let spec = StrategySpec::ReconGuidance {
            gsched: GuidanceSchedule::AlphaWeighted,
            stop_gradient: false,
        };
        let (w1, secs) = run_strategy(&bench, &spec, 10_000, 1);
        println!("guidance alpha-weighted: sliced_w1 = {w1:.4}  ({secs:.1}s)");
    }

    if section == "corr" || section == "all" {
        println!("== correlated-gaussian-2d, N=250, 4k chains ==");
        let bench = Benchmark::by_name("correlated-gaussian-2d").unwrap();
        for (label, spec) in [
            ("exact_h", StrategySpec::ExactH),
            ("replacement", StrategySpec::Replacement),
            (
                "repaint R=5",
                StrategySpec::Repaint {
                    r: 5,
                    renoise: doob_lab::conditioning::RenoiseIndex::Printed,
                },
            ),
        ] {
            let (w1, secs) = run_strategy(&bench, &spec, 4000, 1);
            println!("{label}: sliced_w1 = {w1:.4}  ({secs:.1}s)");
        }
        for gamma in [0.01, 0.03, 0.1, 0.3, 1.0] {
            let spec = StrategySpec::ReconGuidance {
                gsched: GuidanceSchedule::Constant(gamma),
                stop_gradient: false,
            };
            let (w1, secs) = run_strategy(&bench, &spec, 4000, 1);
            println!("guidance gamma={gamma}: sliced_w1 = {w1:.4}  ({secs:.1}s)");
        }
        let spec = StrategySpec::ReconGuidance {
            gsched: GuidanceSchedule::AlphaWeighted,
            stop_gradient: false,
        };
        let (w1, secs) = run_strategy(&bench, &spec, 4000, 1);
        println!("guidance alpha-weighted: sliced_w1 = {w1:.4}  ({secs:.1}s)");
    }

    if section == "others" || section == "all" {
        for name in ["mixture-posterior-1d", "masked-gaussian-8d"] {
            println!("== {name}, N=250, 4k chains ==");
            let bench = Benchmark::by_name(name).unwrap();
            let (w1, secs) = run_strategy(&bench, &StrategySpec::ExactH, 4000, 1);
            println!("exact_h: sliced_w1 = {w1:.4}  ({secs:.1}s)");
            for gamma in [0.01, 0.03, 0.1, 0.3] {
                let spec = StrategySpec::ReconGuidance {
                    gsched: GuidanceSchedule::Constant(gamma),
                    stop_gradient: false,
                };
                let (w1, secs) = run_strategy(&bench, &spec, 4000, 1);
                println!("guidance gamma={gamma}: sliced_w1 = {w1:.4}  ({secs:.1}s)");
            }
            if bench.obs().map(|o| o.is_hard()).unwrap_or(false) {
                for (label, spec) in [
                    ("replacement", StrategySpec::Replacement),
                    (
                        "repaint R=5",
                        StrategySpec::Repaint {
                            r: 5,
                            renoise: doob_lab::conditioning::RenoiseIndex::Printed,
                        },
                    ),
                ] {
                    let (w1, secs) = run_strategy(&bench, &spec, 4000, 1);
                    println!("{label}: sliced_w1 = {w1:.4}  ({secs:.1}s)");
                }
            }
        }
    }

    if section == "a1" || section == "all" {
        println!("== A1 truncated normal, N=1000, 10k chains ==");
        let prior = GaussianMixturePrior::standard(1);
        let bench = Benchmark {
            name: "a1",
            prior,
            target: BenchTarget::Interval { a: 0.0, b: 1.0 },
            schedule: NoiseSchedule::linear(1000, 1e-4, 2e-2).unwrap(),
            default_chains: 10_000,
            default_guidance: GuidanceSchedule::Constant(0.1),
            default_repaint_r: 5,
        };
        let model = bench.oracle_model();
        let strat = build_strategy(&bench, &StrategySpec::ExactH).unwrap();
        let cfg = SamplerConfig::new(10_000, 42);
        let t0 = Instant::now();
        let batch = sample(&model, &bench.schedule, strat.as_ref(), &cfg).unwrap();
        let secs = t0.elapsed().as_secs_f64();
        let xs = batch.finals.column(0);
        let n = xs.len() as f64;
        let mean = xs.sum() / n;
        let var = xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let inside = xs.iter().filter(|&&v| (-0.001..=1.001).contains(&v)).count();
        println!(
            "mean {mean:.5} var {var:.5} inside {}/{} time {secs:.1}s",
            inside,
            xs.len()
        );
        let (em, ev) = bench.exact_moments().unwrap();
        println!("exact mean {:.5} var {:.5}", em[0], ev[[0, 0]]);
    }
}
