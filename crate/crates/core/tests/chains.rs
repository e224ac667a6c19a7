use std::sync::Arc;

use hdsgd_core::activation::Activation;
use hdsgd_core::analysis::{ks_two_sample, normal_cdf};
use hdsgd_core::quadrature::QuadratureRule;
use hdsgd_core::rng::RandomStream;
use hdsgd_core::sgd::*;

fn purified() -> Activation {
    let rule = Arc::new(QuadratureRule::gauss_hermite(512).unwrap());
    Activation::purified_default(&rule).unwrap()
}

fn std_dev(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
}

#[test]
fn full_and_reduced_chains_agree_in_law() {
    let f = purified();
    let cfg = SimConfig {
        noise_var: 0.25,
        ..SimConfig::new(256, 1.0)
    };
    let full = run_ensemble(&cfg, &f, 400, Mode::Full, &RandomStream::new(11)).unwrap();
    let red = run_ensemble(&cfg, &f, 400, Mode::Reduced, &RandomStream::new(12)).unwrap();
    let last = full.times.len() - 1;
    assert_eq!(full.times, red.times);
    let ks_m = ks_two_sample(&full.m_at(last), &red.m_at(last)).unwrap();
    let ks_r = ks_two_sample(&full.r2_at(last), &red.r2_at(last)).unwrap();
    assert!(ks_m.p_value > 0.01, "m: {ks_m:?}");
    assert!(ks_r.p_value > 0.01, "r2: {ks_r:?}");
}

#[test]
fn coupled_chains_track_each_other() {
    let cfg = SimConfig {
        noise_var: 0.25,
        ..SimConfig::new(512, 1.0)
    };
    let dev = coupled_check(&cfg, &purified(), &mut RandomStream::new(5), 10_000).unwrap();
    assert!(dev <= 1e-8, "{dev:e}");

    let cfg = SimConfig {
        noise_var: 0.5,
        noise_law: NoiseLaw::TwoPoint,
        c_delta: 2.0,
        ..SimConfig::new(128, 1.0)
    };
    let dev = coupled_check(&cfg, &Activation::tanh(), &mut RandomStream::new(6), 10_000).unwrap();
    assert!(dev <= 1e-8, "{dev:e}");
}

#[test]
fn coupled_deviation_grows_at_most_linearly() {
    let cfg = SimConfig {
        noise_var: 0.25,
        ..SimConfig::new(256, 1.0)
    };
    let f = Activation::tanh();
    // same seed: each run is a prefix of the next, so the running max is monotone
    let dev: Vec<f64> = [1000, 2000, 4000, 8000]
        .iter()
        .map(|&k| {
            coupled_check(&cfg, &f, &mut RandomStream::new(2), k)
                .unwrap()
                .max(1e-16)
        })
        .collect();
    assert!(dev.windows(2).all(|w| w[1] >= w[0]));
    assert!(dev[3] <= 2.0 * 8.0 * dev[0], "{dev:?}");
}

/// Mean and standard error of m' after one reduced step from (m, q) = (0, 1).
fn first_step_mean(f: &Activation, cfg: &SimConfig, n: usize, seed: u64) -> (f64, f64, usize) {
    let mut s = RandomStream::new(seed);
    let dof = (cfg.n - 2) as f64;
    let ms: Vec<f64> = (0..n)
        .map(|_| {
            let d = ReducedDraws {
                a1: s.normal(),
                a2: s.normal(),
                w: s.chi_square(dof),
                eps: 0.0,
            };
            reduced_step(ReducedState { m: 0.0, q: 1.0 }, &d, cfg, f).unwrap().m
        })
        .collect();
    let mean = ms.iter().sum::<f64>() / n as f64;
    let pos = ms.iter().filter(|m| **m > 0.0).count();
    (mean, std_dev(&ms) / (n as f64).sqrt(), pos)
}

#[test]
fn first_step_from_zero_correlation() {
    let cfg = SimConfig::new(64, 1.0);
    let rule = QuadratureRule::gauss_hermite(512).unwrap();
    let n = 100_000;

    // E[m'] = 2δ a1(f) E[f'(a2 r)], so odd f with a1(f) != 0 moves m off zero
    let tanh = Activation::tanh();
    let (mean, se, pos) = first_step_mean(&tanh, &cfg, n, 9);
    let a1 = hdsgd_core::quadrature::expect_1d(|z| tanh.deriv1(z), &rule).unwrap();
    // r = 1, so E[f'(a2 r)] = a1(f)
    let want = 2.0 * cfg.delta() * a1 * a1;
    assert!((mean - want).abs() < 4.0 * se, "{mean} vs {want} (se {se})");
    let z = (pos as f64 - n as f64 / 2.0) / (n as f64 / 4.0).sqrt();
    let p = 2.0 * (1.0 - normal_cdf(0.0, 1.0)(z.abs()));
    assert!(p < 1e-6, "tanh first step should be sign-biased, p = {p}");

    // a1(f) = 0: no drift at m = 0
    let (mean, se, _) = first_step_mean(&purified(), &cfg, n, 10);
    assert!(mean.abs() < 4.0 * se, "{mean} (se {se})");
}

#[test]
fn initial_law_matches_scaled_gaussian() {
    let sigma2 = 1.7;
    let n = 512;
    let cfg = SimConfig {
        init_sigma2: sigma2,
        ..SimConfig::new(n, 0.01)
    };
    let e = run_ensemble(&cfg, &Activation::tanh(), 200, Mode::Full, &RandomStream::new(3)).unwrap();
    let m0 = e.m_at(0);
    let r0 = e.r2_at(0);
    let se_m = e.m[0].std_err(200);
    let se_r = e.r2[0].std_err(200);
    assert!(e.m[0].mean.abs() < 3.0 * se_m);
    assert!((e.r2[0].mean - sigma2 * (n - 1) as f64 / n as f64).abs() < 3.0 * se_r);
    assert!((e.r2[0].mean - sigma2).abs() < 3.0 * se_r);
    assert_eq!(m0.len(), 200);
    assert!(r0.iter().all(|r| *r >= 0.0));
}

#[test]
fn ensemble_is_schedule_independent() {
    let cfg = SimConfig {
        noise_var: 0.1,
        ..SimConfig::new(64, 1.0)
    };
    let f = Activation::tanh();
    let run = |threads| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| run_ensemble(&cfg, &f, 16, Mode::Reduced, &RandomStream::new(77)).unwrap())
    };
    assert_eq!(run(1), run(3));
}

#[test]
fn saddle_at_zero_correlation_for_exponent_three() {
    let f = purified();
    let n = 1024;
    let cfg = SimConfig {
        noise_var: 0.1,
        ..SimConfig::new(n, 5.0)
    };
    let base = RandomStream::new(21);
    let runs: Vec<SummaryTrajectory> = (0..400)
        .map(|i| run_reduced_from(&cfg, &f, ReducedState { m: 0.0, q: 1.0 }, &mut base.substream(i)).unwrap())
        .collect();
    for t in 0..runs[0].len() {
        let xs: Vec<f64> = runs.iter().map(|r| r.m_tilde[t]).collect();
        if t == 0 {
            assert!(xs.iter().all(|x| *x == 0.0));
            continue;
        }
        let mean = xs.iter().sum::<f64>() / 400.0;
        let se = std_dev(&xs) / 20.0;
        assert!(mean.abs() < 4.0 * se, "t = {}: {mean} vs se {se}", runs[0].times[t]);
        assert!(runs.iter().all(|r| r.r2[t] >= 0.0));
    }
}

#[test]
fn fluctuations_of_m_scale_like_inverse_root_n() {
    let f = purified();
    let scaled: Vec<f64> = [256usize, 1024, 4096]
        .iter()
        .map(|&n| {
            let cfg = SimConfig {
                noise_var: 0.1,
                ..SimConfig::new(n, 5.0)
            };
            let e = run_ensemble(&cfg, &f, 400, Mode::Reduced, &RandomStream::new(n as u64)).unwrap();
            let max_sd = e.m.iter().map(|p| p.var.sqrt()).fold(0.0, f64::max);
            max_sd * (n as f64).sqrt()
        })
        .collect();
    let (lo, hi) = scaled
        .iter()
        .fold((f64::MAX, 0.0f64), |(a, b), &x| (a.min(x), b.max(x)));
    assert!(hi / lo <= 2.0 && lo >= 0.5 * hi, "{scaled:?}");
}

#[test]
fn rescaled_variance_stabilizes_in_n() {
    let f = purified();
    let var_at_one = |n: usize| {
        let cfg = SimConfig {
            noise_var: 0.1,
            ..SimConfig::new(n, 1.0)
        };
        let e = run_ensemble(&cfg, &f, 400, Mode::Reduced, &RandomStream::new(40 + n as u64)).unwrap();
        e.m_tilde[e.index_near(1.0)].var
    };
    let ratio = var_at_one(1024) / var_at_one(4096);
    assert!((0.5..=2.0).contains(&ratio), "{ratio}");
}

#[test]
fn std_of_m_is_not_degenerate() {
    let cfg = SimConfig::new(64, 0.5);
    let tr = run_full(&cfg, &Activation::tanh(), &mut RandomStream::new(1)).unwrap();
    assert!(std_dev(&tr.m) > 0.0);
}
