//! Scratch diagnostics: per-step implied-score errors of trained nets, and
//! W1 noise floors for the unconditional fidelity example.

use doob_lab::bench::Benchmark;
use doob_lab::engine::{sample, CondData, CondKind, NullStrategy, SamplerConfig, TimeInput};
use doob_lab::eval::wasserstein1_1d;
use doob_lab::nets::{
    train_amortised, train_unconditional, EpsNet, MaskSampler, NetArch, TrainConfig,
};
use doob_lab::oracle::{GaussianMixturePrior, OracleEpsModel};
use doob_lab::rng::{domain, substream};
use doob_lab::schedule::NoiseSchedule;
use ndarray::{array, Array2};

fn main() {
    let section = std::env::args().nth(1).unwrap_or_else(|| "all".into());

    if section == "uncond" || section == "all" {
        let prior = GaussianMixturePrior::standard(1);
        let sch = NoiseSchedule::linear(250, 1e-4, 2e-2).unwrap();
        let arch = NetArch::new(1, CondKind::None);
        let mut rng = substream(400, domain::INIT, 0);
        let mut net = EpsNet::init(arch, &mut rng).unwrap();
        let mut tc = TrainConfig::new(20_000, 400);
        tc.batch = 128;
        train_unconditional(&mut net, &prior, &sch, &tc).unwrap();
        for k in [5usize, 10, 25, 50, 75, 125, 188, 250] {
            let c = (1.0 - sch.alpha_bar(k)).sqrt();
            let xs: Vec<f64> = (0..61).map(|i| -3.0 + i as f64 * 0.1).collect();
            let x = Array2::from_shape_vec((61, 1), xs).unwrap();
            let eps = net.predict(&sch, &TimeInput::Uniform(k), x.view(), &CondData::None).unwrap();
            let score = prior.marginal_score_batch(&sch, k, x.view()).unwrap();
            let mut err: f64 = 0.0;
            let mut eps_err: f64 = 0.0;
            for i in 0..61 {
                err = err.max((-eps[[i, 0]] / c - score[[i, 0]]).abs());
                eps_err = eps_err.max((eps[[i, 0]] - (-c * score[[i, 0]])).abs());
            }
            println!("uncond k={k}: score err {err:.4}, eps err {eps_err:.4}, 1/c = {:.1}", 1.0 / c);
        }
    }

    if section == "amort" || section == "all" {
        let bench = Benchmark::by_name("correlated-gaussian-2d").unwrap();
        let h = bench.h_transform().unwrap();
        let obs = bench.obs().unwrap();
        let post = doob_lab::oracle::true_posterior(&bench.prior, obs).unwrap();
        let push = post.pushforward_prior().unwrap();
        let (pm, pc) = push.moments();
        let arch = NetArch::new(2, CondKind::Masked);
        let mut rng = substream(700, domain::INIT, 0);
        let mut net = EpsNet::init(arch, &mut rng).unwrap();
        let mut tc = TrainConfig::new(30_000, 700);
        tc.batch = 128;
        train_amortised(&mut net, &bench.prior, &MaskSampler::UniformNonempty, &bench.schedule, &tc).unwrap();
        for k in [10usize, 25, 50, 75, 125, 200, 250] {
            let a = bench.schedule.alpha_bar(k);
            let c = (1.0 - a).sqrt();
            let mut pts = Vec::new();
            for i in 0..7 {
                for j in 0..7 {
                    pts.push(a.sqrt() * pm[0] + (a * pc[[0, 0]] + 1.0 - a).sqrt() * 1.5 * (-1.0 + i as f64 / 3.0));
                    pts.push(a.sqrt() * pm[1] + (a * pc[[1, 1]] + 1.0 - a).sqrt() * 1.5 * (-1.0 + j as f64 / 3.0));
                }
            }
            let x = Array2::from_shape_vec((49, 2), pts).unwrap();
            let n = x.nrows();
            let values = obs.embed_y().unwrap().insert_axis(ndarray::Axis(0)).broadcast((n, 2)).unwrap().to_owned();
            let mask = obs.mask_f64().unwrap().insert_axis(ndarray::Axis(0)).broadcast((n, 2)).unwrap().to_owned();
            let cond = CondData::Masked { values, mask };
            let eps = net.predict(&bench.schedule, &TimeInput::Uniform(k), x.view(), &cond).unwrap();
            let base = bench.prior.marginal_score_batch(&bench.schedule, k, x.view()).unwrap();
            let hgrad = h.grad_log_batch(&bench.schedule, k, x.view()).unwrap();
            let mut err: f64 = 0.0;
            for i in 0..n {
                for j in 0..2 {
                    err = err.max((-eps[[i, j]] / c - (base[[i, j]] + hgrad[[i, j]])).abs());
                }
            }
            println!("amortised k={k}: score err {err:.4}, 1/c = {:.1}", 1.0 / c);
        }
    }

    if section == "cf" || section == "all" {
        let prior = GaussianMixturePrior::diagonal(
            vec![0.5, 0.5],
            vec![array![-1.5], array![1.5]],
            vec![array![0.09], array![0.09]],
        )
        .unwrap();
        let sch = NoiseSchedule::linear(250, 1e-4, 2e-2).unwrap();
        let arch = NetArch::new(1, CondKind::Aux { n_aux: 1 });
        let mut rng = substream(501, domain::INIT, 0);
        let mut net = EpsNet::init(arch, &mut rng).unwrap();
        let joint = doob_lab::nets::IndependentAuxSource { prior: prior.clone(), aux_dim: 1 };
        let mut tc = TrainConfig::new(12_000, 501);
        tc.batch = 128;
        doob_lab::nets::train_classifier_free(&mut net, &joint, &sch, &tc).unwrap();
        let model = doob_lab::nets::FixedAuxEpsModel::new(net, array![0.3]).unwrap();
        use doob_lab::engine::ScoreModel as _;
        for k in [50usize, 75, 125, 188, 250] {
            let c = (1.0 - sch.alpha_bar(k)).sqrt();
            let xs: Vec<f64> = (0..41).map(|i| -2.5 + i as f64 * 0.125).collect();
            let x = Array2::from_shape_vec((41, 1), xs).unwrap();
            let eps = model.eps_batch(&sch, &TimeInput::Uniform(k), x.view(), &CondData::None).unwrap();
            let score = prior.marginal_score_batch(&sch, k, x.view()).unwrap();
            let mut err: f64 = 0.0;
            for i in 0..41 {
                err = err.max((-eps[[i, 0]] / c - score[[i, 0]]).abs());
            }
            println!("cf-independent k={k}: score err {err:.4}");
        }
    }

    if section == "w1floor" || section == "all" {
        let sch = NoiseSchedule::linear(1000, 1e-4, 2e-2).unwrap();
        for (label, prior) in [
            (
                "wide pm1.5 s=0.3",
                GaussianMixturePrior::diagonal(
                    vec![0.5, 0.5],
                    vec![array![-1.5], array![1.5]],
                    vec![array![0.09], array![0.09]],
                )
                .unwrap(),
            ),
            (
                "narrow pm0.5 s2=0.16",
                GaussianMixturePrior::diagonal(
                    vec![0.5, 0.5],
                    vec![array![-0.5], array![0.5]],
                    vec![array![0.16], array![0.16]],
                )
                .unwrap(),
            ),
        ] {
            // direct-vs-direct floor at 1e4 over several seeds
            let mut floor = 0.0;
            for s in 0..4u64 {
                let mut r1 = substream(s, domain::ORACLE, 1);
                let mut r2 = substream(s + 100, domain::ORACLE, 2);
                let a = prior.sample_batch(&mut r1, 10_000);
                let b = prior.sample_batch(&mut r2, 10_000);
                floor += wasserstein1_1d(a.column(0).as_slice().unwrap(), b.column(0).as_slice().unwrap()).unwrap() / 4.0;
            }
            // sampler-vs-direct over a few seeds
            let model = OracleEpsModel::new(prior.clone());
            let mut worst: f64 = 0.0;
            for seed in [314u64, 42, 7] {
                let cfg = SamplerConfig::new(10_000, seed);
                let batch = sample(&model, &sch, &NullStrategy, &cfg).unwrap();
                let mut rng = substream(seed + 1, domain::ORACLE, 0);
                let direct = prior.sample_batch(&mut rng, 10_000);
                let w1 = wasserstein1_1d(
                    batch.finals.column(0).as_slice().unwrap(),
                    direct.column(0).as_slice().unwrap(),
                )
                .unwrap();
                worst = worst.max(w1);
            }
            println!("{label}: direct floor {floor:.4}, sampler worst-of-3 {worst:.4}");
        }
    }
}
