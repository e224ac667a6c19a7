use std::sync::Arc;

use hdsgd_core::activation::Activation;
use hdsgd_core::dynamics::{ModelFunctions, DEFAULT_BRACKET};
use hdsgd_core::integrators::{em_ensemble, ou_moments, rk4};
use hdsgd_core::quadrature::QuadratureRule;
use hdsgd_core::rng::RandomStream;
use hdsgd_core::sgd::{run_ensemble, Mode, SimConfig};
use nalgebra::DMatrix;

fn purified(c: f64) -> ModelFunctions {
    let rule = Arc::new(QuadratureRule::gauss_hermite(512).unwrap());
    let f = Activation::purified_default(&rule).unwrap();
    ModelFunctions::new(f, c, rule).unwrap()
}

#[test]
fn ode_started_at_fixed_point_stays_there() {
    let mdl = purified(0.1);
    let fp = mdl.fixed_point(DEFAULT_BRACKET).unwrap();
    let tr = rk4(|u| Ok(vec![mdl.ode_rhs_m0(u[0])?]), &[fp.r2_star], 10.0, 1e-2).unwrap();
    let worst = tr.column(0).iter().map(|r| (r - fp.r2_star).abs()).fold(0.0, f64::max);
    assert!(worst < 1e-6, "{worst:e}");
}

#[test]
fn euler_maruyama_reproduces_ou_moments() {
    let mdl = purified(0.1);
    let fp = mdl.fixed_point(DEFAULT_BRACKET).unwrap();
    let ou = mdl.ou_params(&fp).unwrap();
    let m0 = 1.0;
    let times = [0.5, 1.0, 2.0, 5.0];
    let paths = 2000;
    let out = em_ensemble(
        |u| Ok(vec![-ou.theta * u[0]]),
        |_| Ok(DMatrix::from_element(1, 1, ou.vol)),
        &[m0],
        1e-3,
        &times,
        paths,
        &RandomStream::new(31),
    )
    .unwrap();
    for (t, samples) in times.iter().zip(&out) {
        let xs: Vec<f64> = samples.iter().map(|u| u[0]).collect();
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        let (m_ref, v_ref) = ou_moments(ou.theta, ou.vol, m0, *t).unwrap();
        let se_mean = (v_ref / n).sqrt();
        let se_var = v_ref * (2.0 / (n - 1.0)).sqrt();
        assert!((mean - m_ref).abs() < 3.0 * se_mean, "t={t} mean {mean} vs {m_ref}");
        assert!((var - v_ref).abs() < 3.0 * se_var, "t={t} var {var} vs {v_ref}");
    }
}

#[test]
fn reduced_chain_follows_radial_ode() {
    let mdl = purified(0.1);
    let n = 4096;
    let cfg = SimConfig {
        noise_var: 0.1,
        ..SimConfig::new(n, 2.0)
    };
    let e = run_ensemble(&cfg, mdl.activation(), 400, Mode::Reduced, &RandomStream::new(8)).unwrap();
    let r0 = (n - 1) as f64 / n as f64;
    let ode = rk4(|u| Ok(vec![mdl.ode_rhs_m0(u[0])?]), &[r0], 2.0, 1e-3).unwrap();
    let want = ode.last().unwrap().1[0];
    let k = e.index_near(2.0);
    let got = e.r2[k];
    assert!(
        (got.mean - want).abs() < 3.0 * got.std_err(400),
        "{} vs {want}",
        got.mean
    );
}
