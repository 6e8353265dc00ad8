//! Scratch calibration for the trained-network benchmarks: amortised,
//! motif-frozen, offline residual and control finetunes on the correlated
//! 2-d task. Run with `cargo run --release --example calibrate_train [section]`.

use std::time::Instant;

use doob_lab::bench::{build_strategy, Benchmark, StrategySpec};
use doob_lab::engine::{sample, CondKind, SamplerConfig};
use doob_lab::eval::{mean_and_cov, sliced_w1, wasserstein1_1d};
use doob_lab::nets::{
    control_objective, finetune_control, finetune_offline, train_amortised, train_rfdiff_style,
    train_unconditional, ControlConfig, ControlledEpsModel, EpsNet, MaskSampler, NetArch,
    NetControl, NetEpsModel, OracleControl, ResidualEpsModel, TrainConfig, ZeroControl,
};
use doob_lab::oracle::{
    true_posterior, GaussianMixturePrior, HTransform, Observation, Operator, OracleEpsModel,
};
use doob_lab::rng::{domain, substream};
use doob_lab::schedule::NoiseSchedule;
use ndarray::array;

fn report_conditional(bench: &Benchmark, finals: &ndarray::Array2<f64>, label: &str) {
    let n = finals.nrows();
    let (mean, cov) = mean_and_cov(finals.view());
    let refs = bench.reference_samples(1, n).unwrap();
    let mut prng = substream(1, domain::PROJ, 0);
    let w1 = sliced_w1(finals.view(), refs.view(), 128, &mut prng).unwrap();
    println!(
        "{label}: coord1 mean {:.4} (want 0.9) var {:.4} (want 0.19), coord0 mean {:.4}, sliced_w1 {:.4}",
        mean[1],
        cov[[1, 1]],
        mean[0],
        w1
    );
}

fn main() {
    let section = std::env::args().nth(1).unwrap_or_else(|| "amortised".into());
    let bench = Benchmark::by_name("correlated-gaussian-2d").unwrap();

    if section == "amortised" || section == "all" {
        for steps in [10_000usize, 20_000, 30_000] {
            let t0 = Instant::now();
            let arch = NetArch::new(2, CondKind::Masked);
            let mut rng = substream(100, domain::INIT, 0);
            let mut net = EpsNet::init(arch, &mut rng).unwrap();
            let mut tc = TrainConfig::new(steps, 100);
            tc.batch = 128;
            train_amortised(
                &mut net,
                &bench.prior,
                &MaskSampler::UniformNonempty,
                &bench.schedule,
                &tc,
            )
            .unwrap();
            let t_train = t0.elapsed().as_secs_f64();
            let model = NetEpsModel::new(net);
            let strat = build_strategy(&bench, &StrategySpec::Amortised).unwrap();
            let cfg = SamplerConfig::new(10_000, 1);
            let t1 = Instant::now();
            let batch = sample(&model, &bench.schedule, strat.as_ref(), &cfg).unwrap();
            let t_sample = t1.elapsed().as_secs_f64();
            println!("steps={steps}: train {t_train:.0}s sample {t_sample:.0}s");
            report_conditional(&bench, &batch.finals, "amortised");
        }
    }

    if section == "rfdiff" || section == "all" {
        let t0 = Instant::now();
        let arch = NetArch::new(2, CondKind::MaskOnly)
            .with_time_mode(doob_lab::nets::TimeMode::PerCoord);
        let mut rng = substream(101, domain::INIT, 0);
        let mut net = EpsNet::init(arch, &mut rng).unwrap();
        let mut tc = TrainConfig::new(20_000, 101);
        tc.batch = 128;
        train_rfdiff_style(
            &mut net,
            &bench.prior,
            &MaskSampler::UniformNonempty,
            &bench.schedule,
            &tc,
        )
        .unwrap();
        println!("rfdiff train {:.0}s", t0.elapsed().as_secs_f64());
        let model = NetEpsModel::new(net);
        let strat = build_strategy(&bench, &StrategySpec::Rfdiff).unwrap();
        let cfg = SamplerConfig::new(10_000, 1);
        let batch = sample(&model, &bench.schedule, strat.as_ref(), &cfg).unwrap();
        report_conditional(&bench, &batch.finals, "rfdiff");
    }

    if section == "offline" || section == "all" {
        let t0 = Instant::now();
        let frozen = OracleEpsModel::new(bench.prior.clone());
        let arch = NetArch::new(2, CondKind::Masked);
        let mut rng = substream(102, domain::INIT, 0);
        let mut h_net = EpsNet::init(arch, &mut rng).unwrap();
        let mut tc = TrainConfig::new(20_000, 102);
        tc.batch = 128;
        finetune_offline(
            &frozen,
            &mut h_net,
            &bench.prior,
            &MaskSampler::UniformNonempty,
            &bench.schedule,
            &tc,
        )
        .unwrap();
        println!("offline train {:.0}s", t0.elapsed().as_secs_f64());

        // residual vs -sqrt(1-abar) grad ln h on a lattice placed in the
        // +/-2 sigma body of the conditioned marginal at each step
        let h = bench.h_transform().unwrap();
        let post = true_posterior(&bench.prior, bench.obs().unwrap()).unwrap();
        let push = post.pushforward_prior().unwrap();
        let mut max_err: f64 = 0.0;
        for &k in &[10usize, 50, 125, 200] {
            let a = bench.schedule.alpha_bar(k);
            let (pm, pc) = push.moments();
            let mean_k = pm.mapv(|m| a.sqrt() * m);
            let sd0 = (a * pc[[0, 0]] + (1.0 - a)).sqrt();
            let sd1 = (a * pc[[1, 1]] + (1.0 - a)).sqrt();
            let c = (1.0 - a).sqrt();
            let half = std::env::args().nth(2).map(|v| v.parse::<f64>().unwrap()).unwrap_or(2.0);
            let mut pts = Vec::new();
            for i in 0..9 {
                for j in 0..9 {
                    pts.push([
                        mean_k[0] + sd0 * half * (-1.0 + i as f64 * 0.25),
                        mean_k[1] + sd1 * half * (-1.0 + j as f64 * 0.25),
                    ]);
                }
            }
            let x = ndarray::Array2::from_shape_vec(
                (81, 2),
                pts.iter().flatten().cloned().collect(),
            )
            .unwrap();
            let grad = h.grad_log_batch(&bench.schedule, k, x.view()).unwrap();
            let want = grad.mapv(|g| -c * g);
            let obs = bench.obs().unwrap();
            let values = obs
                .embed_y()
                .unwrap()
                .insert_axis(ndarray::Axis(0))
                .broadcast((81, 2))
                .unwrap()
                .to_owned();
            let mask = obs
                .mask_f64()
                .unwrap()
                .insert_axis(ndarray::Axis(0))
                .broadcast((81, 2))
                .unwrap()
                .to_owned();
            let cond = doob_lab::engine::CondData::Masked { values, mask };
            let got = h_net
                .predict(
                    &bench.schedule,
                    &doob_lab::engine::TimeInput::Uniform(k),
                    x.view(),
                    &cond,
                )
                .unwrap();
            let mut k_err: f64 = 0.0;
            for (a, b) in got.iter().zip(want.iter()) {
                k_err = k_err.max((a - b).abs());
            }
            println!("  k={k}: max err {k_err:.4}");
            max_err = max_err.max(k_err);
        }
        println!("offline residual max err vs -sqrt(1-abar) grad ln h: {max_err:.4}");

        let frozen_box: doob_lab::nets::DynModel = Box::new(frozen);
        let model = ResidualEpsModel::new(frozen_box, h_net).unwrap();
        let strat = build_strategy(&bench, &StrategySpec::FinetunedH).unwrap();
        let cfg = SamplerConfig::new(10_000, 1);
        let batch = sample(&model, &bench.schedule, strat.as_ref(), &cfg).unwrap();
        report_conditional(&bench, &batch.finals, "finetuned_h");
    }

    if section == "control" || section == "all" {
        // A7 task: 1-D standard normal prior, y = x + eta, sigma = 0.5, y = 1
        let prior = GaussianMixturePrior::standard(1);
        let obs = Observation::new(Operator::Mask(vec![true]), array![1.0], 0.5).unwrap();
        let sch = match std::env::args().nth(2).as_deref() { Some("lin") => NoiseSchedule::linear(50, 1e-3, 0.2).unwrap(), _ => NoiseSchedule::cosine(50).unwrap() };
        let frozen = OracleEpsModel::new(prior.clone());
        let h = HTransform::linear_gaussian(prior.clone(), obs.clone()).unwrap();

        let zero = control_objective(
            &frozen,
            &ZeroControl(1),
            &obs,
            &sch,
            doob_lab::nets::ControlWeight::Simple,
            1000,
            1,
        )
        .unwrap();
        let star = control_objective(
            &frozen,
            &OracleControl::new(h),
            &obs,
            &sch,
            doob_lab::nets::ControlWeight::Simple,
            1000,
            1,
        )
        .unwrap();
        println!("objective at zero {zero:.3}, at analytic optimum {star:.3}");

        // discretization floor: sample with the analytic control itself,
        // for several 50-step schedules
        for (label, s50) in [
            ("linear 1e-4..2e-2", NoiseSchedule::linear(50, 1e-4, 2e-2).unwrap()),
            ("linear 1e-3..0.2", NoiseSchedule::linear(50, 1e-3, 0.2).unwrap()),
            ("linear 2e-3..0.25", NoiseSchedule::linear(50, 2e-3, 0.25).unwrap()),
            ("cosine", NoiseSchedule::cosine(50).unwrap()),
        ] {
            let h2 = HTransform::linear_gaussian(prior.clone(), obs.clone()).unwrap();
            let oracle_ctl = OracleControl::new(h2);
            let model = ControlledEpsModel::new(&frozen, &oracle_ctl).unwrap();
            let cfg = SamplerConfig::new(10_000, 1);
            let batch = sample(&model, &s50, &doob_lab::engine::NullStrategy, &cfg).unwrap();
            let post = true_posterior(&prior, &obs).unwrap();
            let mut rng2 = substream(2, domain::ORACLE, 9);
            let refs = post.sample_batch(&mut rng2, 10_000);
            let w1 = wasserstein1_1d(
                batch.finals.column(0).as_slice().unwrap(),
                refs.column(0).as_slice().unwrap(),
            )
            .unwrap();
            let (m, c) = mean_and_cov(batch.finals.view());
            println!(
                "analytic control [{label}]: W1 {w1:.4}, mean {:.4} (want 0.8) var {:.4} (want 0.2), abar_N = {:.4}",
                m[0], c[[0, 0]], s50.alpha_bar(50)
            );
        }

        let weight = match std::env::args().nth(3).as_deref() {
            Some("exact") => doob_lab::nets::ControlWeight::Exact,
            _ => doob_lab::nets::ControlWeight::Simple,
        };
        for (steps, chains, lr) in [(300usize, 256usize, 3e-3), (400, 256, 3e-3)] {
            let t0 = Instant::now();
            let arch = NetArch::new(1, CondKind::None).with_hidden(vec![64, 64]);
            let mut rng = substream(103, domain::INIT, 0);
            let mut f_net = EpsNet::init(arch, &mut rng).unwrap();
            let mut cc = ControlConfig::new(steps, 103);
            cc.n_chains = chains;
            cc.lr = lr;
            cc.weight = weight;
            let res = finetune_control(&frozen, &mut f_net, &obs, &sch, &cc).unwrap();
            let t_train = t0.elapsed().as_secs_f64();
            let ctl = NetControl::new(f_net).unwrap();
            let model = ControlledEpsModel::new(&frozen, &ctl).unwrap();
            let cfg = SamplerConfig::new(10_000, 1);
            let batch = sample(
                &model,
                &sch,
                &doob_lab::engine::NullStrategy,
                &cfg,
            )
            .unwrap();
            let post = true_posterior(&prior, &obs).unwrap();
            let mut rng2 = substream(2, domain::ORACLE, 9);
            let refs = post.sample_batch(&mut rng2, 10_000);
            let w1 = wasserstein1_1d(
                batch.finals.column(0).as_slice().unwrap(),
                refs.column(0).as_slice().unwrap(),
            )
            .unwrap();
            println!(
                "control steps={steps}: {t_train:.0}s, final objective {:.3}, W1 to posterior {w1:.4}",
                res.objectives.last().unwrap()
            );
        }
    }
}
