//! Acceptance suite: one PASS/FAIL line per criterion, all tolerances pinned
//! below. Exits nonzero if any criterion fails.

use std::fs;
use std::process::{Command, ExitCode};
use std::sync::Arc;
use std::time::Instant;

use hdsgd_cli::commands::{compare, diagnose, ou_check, sde};
use hdsgd_cli::{ExperimentConfig, Kind, OutputDir, Resolved};
use hdsgd_core::activation::{hermite_coeffs, hermite_poly, Activation};
use hdsgd_core::dynamics::{Integrand, ModelFunctions, SummaryPoint};
use hdsgd_core::quadrature::{expect_1d, mc_expect, QuadratureRule};
use hdsgd_core::rng::RandomStream;
use hdsgd_core::sgd::{coupled_check, run_ensemble, Mode, SimConfig};
use tempfile::TempDir;

const QUAD_ORDER: usize = 512;
const MC_SAMPLES: usize = 1_000_000;
const MC_MAX_Z: f64 = 4.0;
const SADDLE_TOL: f64 = 1e-9;
const STEIN_DRIFT_TOL: f64 = 1e-8;
const CLOSED_FORM_TOL: f64 = 1e-7;
const BALLISTIC_TOL: f64 = 0.05;
const COUPLING_TOL: f64 = 1e-8;
const COUPLING_STEPS: usize = 10_000;
const FLUCTUATION_FACTOR: f64 = 2.0;
const OU_SE_BAND: f64 = 3.0;
const ORTHONORMAL_TOL: f64 = 1e-10;
const STEIN_TOL: f64 = 1e-8;
const DIVERGENCE_EXIT: i32 = 3;

type Check = fn() -> Result<(bool, Vec<String>), String>;

fn rule() -> Arc<QuadratureRule> {
    Arc::new(QuadratureRule::gauss_hermite(QUAD_ORDER).unwrap())
}

fn model(f: Activation, noise_var: f64) -> ModelFunctions {
    ModelFunctions::new(f, noise_var, rule()).unwrap()
}

fn purified() -> Activation {
    Activation::purified_default(&rule()).unwrap()
}

fn resolved(kind: Kind, toml: &str) -> Result<Resolved, String> {
    ExperimentConfig::from_toml(toml)
        .and_then(|c| c.resolve(kind))
        .map_err(|e| e.to_string())
}

fn scratch() -> Result<(TempDir, OutputDir), String> {
    let dir = TempDir::new().map_err(|e| e.to_string())?;
    let out = OutputDir::create(dir.path(), false).map_err(|e| e.to_string())?;
    Ok((dir, out))
}

fn quadrature_vs_monte_carlo() -> Result<(bool, Vec<String>), String> {
    let mdl = model(purified(), 0.25);
    let base = RandomStream::new(101);
    let mut worst = (0.0f64, String::new());
    let mut count = 0;
    for m in [0.0, 0.3] {
        for r2 in [0.5, 1.0, 2.0] {
            let p = SummaryPoint::new(m, r2);
            for kind in Integrand::ALL {
                let q = mdl.coefficient(kind, &p).map_err(|e| e.to_string())?;
                let g = mdl.integrand(kind, &p);
                let mc = mc_expect(|z| g(z[0], z[1]), 2, MC_SAMPLES, &mut base.substream(count))
                    .map_err(|e| e.to_string())?;
                let z = mc.z_score(q);
                if z > worst.0 {
                    worst = (z, format!("{} at ({m}, {r2})", kind.name()));
                }
                count += 1;
            }
        }
    }
    Ok((
        worst.0 < MC_MAX_Z,
        vec![format!(
            "{count} integrands, worst |z| = {:.2} ({}), limit {MC_MAX_Z}",
            worst.0, worst.1
        )],
    ))
}

fn saddle_point_identity() -> Result<(bool, Vec<String>), String> {
    let mut ok = true;
    let mut info = Vec::new();
    for f in [Activation::hermite(3).unwrap(), purified()] {
        let mdl = model(f, 0.25);
        let worst = [0.1f64, 0.5, 1.0, 2.0, 3.0]
            .iter()
            .map(|r| mdl.effective_drift(&SummaryPoint::new(0.0, r * r)).map(|d| d.0.abs()))
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| e.to_string())?
            .into_iter()
            .fold(0.0, f64::max);
        ok &= worst < SADDLE_TOL;
        info.push(format!(
            "{}: max |dm/dt| at m = 0 is {worst:.2e} (limit {SADDLE_TOL:e})",
            mdl.activation()
        ));
    }
    for f in [Activation::identity(), Activation::hermite(2).unwrap()] {
        let mdl = model(f, 0.25);
        let mut worst: f64 = 0.0;
        for r in [0.1f64, 0.5, 1.0, 2.0, 3.0] {
            let stein = mdl.stein_dm_dt_m0(r * r).map_err(|e| e.to_string())?;
            let full = mdl
                .effective_drift(&SummaryPoint::new(0.0, r * r))
                .map_err(|e| e.to_string())?
                .0;
            worst = worst.max((stein - full).abs());
        }
        ok &= worst < STEIN_DRIFT_TOL;
        info.push(format!(
            "{}: Stein-reduced vs 2-D dm/dt differ by {worst:.2e} (limit {STEIN_DRIFT_TOL:e})",
            mdl.activation()
        ));
    }
    Ok((ok, info))
}

fn closed_form_consistency() -> Result<(bool, Vec<String>), String> {
    let mdl = model(purified(), 0.25);
    let mut worst: f64 = 0.0;
    for r2 in [0.25, 1.0, 4.0] {
        let closed = mdl.ode_rhs_m0(r2).map_err(|e| e.to_string())?;
        let general = mdl
            .effective_drift(&SummaryPoint::new(0.0, r2))
            .map_err(|e| e.to_string())?
            .1;
        worst = worst.max((closed - general).abs());
    }
    Ok((
        worst < CLOSED_FORM_TOL,
        vec![format!("max difference {worst:.2e} (limit {CLOSED_FORM_TOL:e})")],
    ))
}

fn ballistic_convergence() -> Result<(bool, Vec<String>), String> {
    let res = resolved(
        Kind::Compare,
        "noise_var = 0.25\nn_list = [250, 2000]\nt_end = 5.0\nn_seeds = 400\nmode = \"reduced\"\n",
    )?;
    let (_dir, mut out) = scratch()?;
    let r = compare(&res, &mut out).map_err(|e| e.to_string())?;
    let (a, b) = (r.rows[0], r.rows[1]);
    let ok = b.sup_m < a.sup_m && b.sup_r2 < a.sup_r2 && b.sup_m < BALLISTIC_TOL && b.sup_r2 < BALLISTIC_TOL;
    Ok((
        ok,
        r.rows
            .iter()
            .map(|row| {
                format!(
                    "N = {}: sup dev m {:.3e}, r2 {:.3e} (limit {BALLISTIC_TOL} at the largest N)",
                    row.n, row.sup_m, row.sup_r2
                )
            })
            .collect(),
    ))
}

fn pathwise_coupling() -> Result<(bool, Vec<String>), String> {
    let cfg = SimConfig {
        noise_var: 0.25,
        ..SimConfig::new(512, 1.0)
    };
    let dev = coupled_check(&cfg, &purified(), &mut RandomStream::new(5), COUPLING_STEPS).map_err(|e| e.to_string())?;
    Ok((
        dev <= COUPLING_TOL,
        vec![format!(
            "max |full - reduced| over {COUPLING_STEPS} steps = {dev:.2e} (limit {COUPLING_TOL:e})"
        )],
    ))
}

fn fluctuation_scaling() -> Result<(bool, Vec<String>), String> {
    let f = purified();
    let mut scaled = Vec::new();
    for n in [256usize, 1024, 4096] {
        let cfg = SimConfig {
            noise_var: 0.25,
            ..SimConfig::new(n, 1.0)
        };
        let e = run_ensemble(&cfg, &f, 400, Mode::Reduced, &RandomStream::new(600 + n as u64))
            .map_err(|e| e.to_string())?;
        let i = e.index_near(1.0);
        scaled.push((n, e.m[i].var.sqrt() * (n as f64).sqrt()));
    }
    let lo = scaled.iter().map(|s| s.1).fold(f64::MAX, f64::min);
    let hi = scaled.iter().map(|s| s.1).fold(0.0, f64::max);
    let mut info: Vec<String> = scaled
        .iter()
        .map(|(n, s)| format!("N = {n}: sqrt(N) sd(m(1)) = {s:.4}"))
        .collect();
    info.push(format!("max/min = {:.3} (limit {FLUCTUATION_FACTOR})", hi / lo));
    Ok((hi / lo <= FLUCTUATION_FACTOR, info))
}

fn ou_law() -> Result<(bool, Vec<String>), String> {
    let res = resolved(
        Kind::OuCheck,
        "noise_var = 0.1\nn = 4096\nt_end = 5.0\nn_seeds = 400\ncheckpoints = [1.0, 2.0, 5.0]\nsigma_variant = \"direct\"\n",
    )?;
    let (_dir, mut out) = scratch()?;
    let r = ou_check(&res, &mut out).map_err(|e| e.to_string())?;
    let mut info = vec![format!(
        "r2_star = {:.6}, theta = {:.4e}, stationary_var = {:.4e}",
        r.fixed_point.r2_star, r.ou.theta, r.ou.stationary_var
    )];
    info.extend(r.rows.iter().map(|row| {
        format!(
            "t = {:.3}: D = {:.4}, p = {:.3}, var {:.4} vs predicted {:.4}",
            row.t, row.ks_d, row.p_value, row.empirical_var, row.predicted_var
        )
    }));
    info.extend(r.variants.iter().map(|v| {
        format!(
            "variant {}: stationary_var {:.4e}, relative discrepancy to direct {:+.3}",
            v.variant, v.stationary_var, v.rel_discrepancy
        )
    }));
    let ok = r.p_passes() >= 2 && r.last_var_error() <= 0.2;
    info.push(format!(
        "p > 0.01 at {}/3, last variance error {:.3} (limit 0.2)",
        r.p_passes(),
        r.last_var_error()
    ));
    Ok((ok, info))
}

fn ou_integrator_cross_check() -> Result<(bool, Vec<String>), String> {
    let res = resolved(
        Kind::Sde,
        "noise_var = 0.1\ninit_at_fixed_point = true\nm_tilde0 = 1.0\nt_end = 2.0\ndt = 1e-3\nn_seeds = 2000\ncheckpoints = [0.5, 1.0, 2.0]\n",
    )?;
    let (_dir, mut out) = scratch()?;
    let r = sde(&res, &mut out).map_err(|e| e.to_string())?;
    let (_, pred) = r.ou.as_ref().ok_or("no OU prediction")?;
    let n = r.n_paths as f64;
    let mut ok = true;
    let mut info = Vec::new();
    for (i, t) in r.times.iter().enumerate() {
        let (mean, var) = pred[i];
        let z_mean = (r.m_tilde[i].mean - mean).abs() / (var / n).sqrt();
        let z_var = (r.m_tilde[i].var - var).abs() / (var * (2.0 / (n - 1.0)).sqrt());
        ok &= z_mean < OU_SE_BAND && z_var < OU_SE_BAND;
        info.push(format!(
            "t = {t}: mean off by {z_mean:.2} SE, variance off by {z_var:.2} SE (limit {OU_SE_BAND})"
        ));
    }
    Ok((ok, info))
}

fn moment_scaling() -> Result<(bool, Vec<String>), String> {
    let res = resolved(
        Kind::Diagnose,
        "noise_var = 0.25\nn_list = [128, 256, 512]\n[diagnose]\nm = 0.0\nr2 = 1.0\nn_samples = 100000\n",
    )?;
    let (_dir, mut out) = scratch()?;
    let r = diagnose(&res, &mut out).map_err(|e| e.to_string())?;
    let info = hdsgd_cli::commands::DiagnoseReport::CHECKED
        .iter()
        .map(|&c| format!("{}: ratios {:?} (band [0.4, 2.5])", c.name(), r.ratios(c)))
        .collect();
    Ok((r.passed, info))
}

fn divergence_demonstration() -> Result<(bool, Vec<String>), String> {
    let dir = TempDir::new().map_err(|e| e.to_string())?;
    let cfg = dir.path().join("h3.toml");
    fs::write(
        &cfg,
        "noise_var = 0.0\nr2_0 = 2.0\nt_end = 5.0\n[activation]\nlabel = \"h3\"\n",
    )
    .map_err(|e| e.to_string())?;
    let o = Command::new(env!("CARGO_BIN_EXE_hdsgd"))
        .args([
            "ode",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            dir.path().join("out").to_str().unwrap(),
        ])
        .output()
        .map_err(|e| e.to_string())?;
    let code = o.status.code();
    let msg = String::from_utf8_lossy(&o.stderr).trim().to_string();
    Ok((
        code == Some(DIVERGENCE_EXIT),
        vec![format!("exit code {code:?} (want {DIVERGENCE_EXIT}): {msg}")],
    ))
}

fn hermite_stein_suite() -> Result<(bool, Vec<String>), String> {
    let rule = rule();
    let e = |g: &dyn Fn(f64) -> f64| expect_1d(g, &rule).map_err(|e| e.to_string());
    let mut worst_orth: f64 = 0.0;
    for j in 0..=10 {
        for k in 0..=10 {
            let ip = e(&|x| hermite_poly(j, x).unwrap() * hermite_poly(k, x).unwrap())?;
            let want = if j == k { 1.0 } else { 0.0 };
            worst_orth = worst_orth.max((ip - want).abs());
        }
    }
    let mut builtins: Vec<Activation> = vec![
        Activation::zero(),
        Activation::identity(),
        Activation::tanh(),
        Activation::gauss_erf(),
        purified(),
    ];
    builtins.extend((0..=10).map(|k| Activation::hermite(k).unwrap()));
    let (mut worst_stein, mut worst_a2): (f64, f64) = (0.0, 0.0);
    for f in &builtins {
        let first = e(&|x| x * f.eval(x))? - e(&|x| f.deriv1(x))?;
        let second = e(&|x| (x * x - 1.0) * f.eval(x))? - e(&|x| f.deriv2(x))?;
        worst_stein = worst_stein.max(first.abs()).max(second.abs());
        let a2 = hermite_coeffs(f, 2, &rule).map_err(|e| e.to_string())?.coefficients[2];
        worst_a2 = worst_a2.max((e(&|x| f.deriv2(x))? - 2f64.sqrt() * a2).abs());
    }
    let ok = worst_orth < ORTHONORMAL_TOL && worst_stein < STEIN_TOL && worst_a2 < STEIN_TOL;
    Ok((
        ok,
        vec![
            format!("orthonormality, j, k <= 10: max error {worst_orth:.2e} (limit {ORTHONORMAL_TOL:e})"),
            format!(
                "Stein identities over {} built-ins: max error {worst_stein:.2e} (limit {STEIN_TOL:e})",
                builtins.len()
            ),
            format!("E[f''] = sqrt(2) a2: max error {worst_a2:.2e} (limit {STEIN_TOL:e})"),
        ],
    ))
}

fn main() -> ExitCode {
    let criteria: [(&str, Check); 11] = [
        ("quadrature agrees with Monte Carlo", quadrature_vs_monte_carlo),
        ("saddle point at zero correlation", saddle_point_identity),
        ("closed-form radial ODE", closed_form_consistency),
        ("ballistic convergence to the ODE", ballistic_convergence),
        ("pathwise coupling of full and reduced chains", pathwise_coupling),
        ("fluctuations of m scale like N^-1/2", fluctuation_scaling),
        ("OU law of the rescaled correlation", ou_law),
        ("Euler-Maruyama against OU moments", ou_integrator_cross_check),
        ("gradient-noise moment scaling", moment_scaling),
        ("divergence exits with code 3", divergence_demonstration),
        ("Hermite and Stein identities", hermite_stein_suite),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let (ok, info) = match check() {
            Ok(r) => r,
            Err(e) => (false, vec![format!("error: {e}")]),
        };
        println!(
            "criterion {:>2} {}: {name} ({:.1} s)",
            i + 1,
            if ok { "PASS" } else { "FAIL" },
            start.elapsed().as_secs_f64()
        );
        for line in info {
            println!("    {line}");
        }
        failed += usize::from(!ok);
    }
    println!(
        "acceptance: {}/{} criteria passed",
        criteria.len() - failed,
        criteria.len()
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
