use std::collections::HashMap;
use std::sync::Mutex;

use hdsgd_core::activation::{hermite_coeffs, information_exponent, DEFAULT_EXPONENT_TOL};
use hdsgd_core::analysis::{
    ks_test, localizability_diagnostics, normal_cdf, sup_deviation, uniform_grid, ScalingColumn, ScalingTable,
};
use hdsgd_core::dynamics::{FixedPoint, ModelFunctions, OUParams, SigmaVariant, SummaryPoint, DEFAULT_BRACKET};
use hdsgd_core::integrators::{em_ensemble, ou_moments, rk4, Trajectory};
use hdsgd_core::rng::RandomStream;
use hdsgd_core::sgd::{run_ensemble, EnsembleStats, MomentPair};
use hdsgd_core::Error as CoreError;
use nalgebra::DMatrix;
use serde::Serialize;

use crate::config::{Kind, Resolved};
use crate::error::{CliError, CliResult};
use crate::output::{Chart, OutputDir, Series};

/// Rows kept in ODE output files.
pub const MAX_ROWS: usize = 1000;
pub const DEVIATION_GRID: usize = 201;
pub const OU_P_LEVEL: f64 = 0.01;
pub const OU_VAR_TOL: f64 = 0.2;
pub const RATIO_BAND: (f64, f64) = (0.4, 2.5);

/// Runs the resolved experiment, prints its report, and turns a failed
/// acceptance check into an error when the config asks for it.
pub fn run(res: &Resolved, out: &mut OutputDir) -> CliResult<()> {
    let (lines, passed) = match res.kind {
        Kind::Hermite => (hermite(res, out)?.lines(), None),
        Kind::Ode => (ode(res, out)?.lines(), None),
        Kind::Sde => (sde(res, out)?.lines(), None),
        Kind::Sgd => (sgd(res, out)?.lines(), None),
        Kind::Compare => {
            let r = compare(res, out)?;
            (r.lines(), r.passed)
        }
        Kind::FixedPoint => (fixed_point_report(res, out)?.lines(), None),
        Kind::OuCheck => {
            let r = ou_check(res, out)?;
            (r.lines(), Some(r.passed))
        }
        Kind::Diagnose => {
            let r = diagnose(res, out)?;
            (r.lines(), Some(r.passed))
        }
    };
    for line in lines {
        println!("{line}");
    }
    if res.config.acceptance && passed == Some(false) {
        return Err(CliError::Acceptance(format!("{} checks failed", res.kind)));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct TrajectoryRow {
    pub t: f64,
    pub m_mean: f64,
    pub m_var: f64,
    pub r2_mean: f64,
    pub r2_var: f64,
    pub mtilde_mean: f64,
    pub mtilde_var: f64,
    pub n_seeds: usize,
    #[serde(rename = "N")]
    pub n: usize,
}

pub fn trajectory_rows(e: &EnsembleStats, n: usize) -> Vec<TrajectoryRow> {
    (0..e.times.len())
        .map(|i| TrajectoryRow {
            t: e.times[i],
            m_mean: e.m[i].mean,
            m_var: e.m[i].var,
            r2_mean: e.r2[i].mean,
            r2_var: e.r2[i].var,
            mtilde_mean: e.m_tilde[i].mean,
            mtilde_var: e.m_tilde[i].var,
            n_seeds: e.n_seeds(),
            n,
        })
        .collect()
}

fn ensemble_chart(title: &str, e: &EnsembleStats) -> Chart {
    let m: Vec<f64> = e.m.iter().map(|p| p.mean).collect();
    let r2: Vec<f64> = e.r2.iter().map(|p| p.mean).collect();
    Chart::new(
        title,
        "t",
        vec![
            Series::new("m mean", &e.times, &m),
            Series::new("r2 mean", &e.times, &r2),
        ],
    )
}

fn trajectory_chart(title: &str, tr: &Trajectory) -> Chart {
    let series = tr
        .labels()
        .iter()
        .enumerate()
        .map(|(i, l)| Series::new(l.clone(), tr.times(), &tr.column(i)))
        .collect();
    Chart::new(title, "t", series)
}

/// Deterministic limit from (m0, r2_0). On the m = 0 axis with a1(f) = 0 the
/// m-equation is identically zero, so only the radial equation is integrated.
pub fn reference_ode(model: &ModelFunctions, m0: f64, r2_0: f64, t_end: f64, dt: f64) -> CliResult<Trajectory> {
    let mut tr = Trajectory::new(["m", "r2"]);
    if m0 == 0.0 && model.hermite_a1().abs() <= DEFAULT_EXPONENT_TOL {
        let radial = rk4(|u| Ok(vec![model.radial_rhs(u[0])?]), &[r2_0], t_end, dt)?;
        for (t, u) in radial.times().iter().zip(radial.states()) {
            tr.push(*t, vec![0.0, u[0]])?;
        }
    } else {
        let full = rk4(
            |u| {
                let (dm, dr2) = model.effective_drift(&SummaryPoint::new(u[0], u[1]))?;
                Ok(vec![dm, dr2])
            },
            &[m0, r2_0],
            t_end,
            dt,
        )?;
        for (t, u) in full.times().iter().zip(full.states()) {
            tr.push(*t, u.clone())?;
        }
    }
    Ok(tr)
}

fn thin_rows(tr: &Trajectory) -> Trajectory {
    tr.thin(tr.len().div_ceil(MAX_ROWS))
}

fn find_fixed_point(model: &ModelFunctions) -> CliResult<FixedPoint> {
    model.fixed_point(DEFAULT_BRACKET).map_err(|e| match e {
        CoreError::NoFixedPoint { .. } => CliError::Config(format!(
            "{e}; the radial ODE has no stable root for this activation and noise_var, \
             try a smaller noise_var (the default activation has a root for noise_var below about 0.24)"
        )),
        other => other.into(),
    })
}

// hermite

#[derive(Debug, Clone)]
pub struct HermiteReport {
    pub label: String,
    pub coefficients: Vec<f64>,
    pub tail_mass: f64,
    pub exponent: usize,
}

#[derive(Serialize)]
struct CoefficientRow {
    k: usize,
    a_k: f64,
}

pub fn hermite(res: &Resolved, out: &mut OutputDir) -> CliResult<HermiteReport> {
    let f = res.model.activation();
    let rule = res.model.rule();
    let coeffs = hermite_coeffs(f, res.config.k_max, rule)?;
    out.write_csv(
        "hermite.csv",
        coeffs
            .coefficients
            .iter()
            .enumerate()
            .map(|(k, &a_k)| CoefficientRow { k, a_k }),
    )?;
    let exponent = information_exponent(f, rule, DEFAULT_EXPONENT_TOL)?;
    Ok(HermiteReport {
        label: f.label().to_string(),
        coefficients: coeffs.coefficients,
        tail_mass: coeffs.tail_mass,
        exponent,
    })
}

impl HermiteReport {
    pub fn lines(&self) -> Vec<String> {
        let mut v = vec![format!("activation: {}", self.label)];
        v.extend(
            self.coefficients
                .iter()
                .enumerate()
                .map(|(k, a)| format!("a_{k} = {a:+.6e}")),
        );
        v.push(format!(
            "tail mass beyond k = {}: {:.3e}",
            self.coefficients.len() - 1,
            self.tail_mass
        ));
        if let Some(a1) = self.coefficients.get(1) {
            v.push(format!("|a_1| = {:.3e}", a1.abs()));
        }
        v.push(format!("information exponent: {}", self.exponent));
        v
    }
}

// ode

#[derive(Debug, Clone)]
pub struct OdeReport {
    pub trajectory: Trajectory,
}

#[derive(Serialize)]
struct OdeRow {
    t: f64,
    m: f64,
    r2: f64,
}

fn ode_rows(tr: &Trajectory) -> impl Iterator<Item = OdeRow> + '_ {
    tr.times()
        .iter()
        .zip(tr.states())
        .map(|(&t, u)| OdeRow { t, m: u[0], r2: u[1] })
}

pub fn ode(res: &Resolved, out: &mut OutputDir) -> CliResult<OdeReport> {
    let c = &res.config;
    let tr = reference_ode(&res.model, c.m0, c.r2_0, c.t_end, c.dt)?;
    let thinned = thin_rows(&tr);
    out.write_csv("ode.csv", ode_rows(&thinned))?;
    out.plot(
        "ode.svg",
        &trajectory_chart(&format!("ODE, {}", res.model.activation()), &thinned),
    )?;
    Ok(OdeReport { trajectory: tr })
}

impl OdeReport {
    pub fn lines(&self) -> Vec<String> {
        match self.trajectory.last() {
            Some((t, u)) => vec![format!(
                "ode: {} steps, t = {t}: m = {:.6e}, r2 = {:.6e}",
                self.trajectory.len() - 1,
                u[0],
                u[1]
            )],
            None => vec![],
        }
    }
}

// sde

#[derive(Debug, Clone, Copy)]
struct Coefficients {
    curvature: f64,
    rhs: f64,
    sigma: f64,
}

/// Radial coefficients keyed by the exact bits of r2. Every path shares the
/// deterministic r2 sequence, so each value is computed once per step.
struct CoefficientCache<'a> {
    model: &'a ModelFunctions,
    variant: SigmaVariant,
    table: Mutex<HashMap<u64, Coefficients>>,
}

impl<'a> CoefficientCache<'a> {
    fn new(model: &'a ModelFunctions, variant: SigmaVariant) -> Self {
        Self {
            model,
            variant,
            table: Mutex::new(HashMap::new()),
        }
    }

    fn at(&self, r2: f64) -> hdsgd_core::Result<Coefficients> {
        let key = r2.to_bits();
        if let Some(c) = self.table.lock().map_err(poisoned)?.get(&key) {
            return Ok(*c);
        }
        let moments = self.model.radial_moments(r2)?;
        let sigma = match self.variant {
            SigmaVariant::Direct => self.model.sigma11_stein_expanded(r2)?,
            other => self.model.volatility_sigma11(r2, other)?,
        };
        let c = Coefficients {
            curvature: moments.curvature(),
            rhs: self.model.radial_rhs(r2)?,
            sigma,
        };
        self.table.lock().map_err(poisoned)?.insert(key, c);
        Ok(c)
    }
}

fn poisoned<T>(_: T) -> CoreError {
    CoreError::InvariantViolation("coefficient cache lock poisoned".into())
}

#[derive(Debug, Clone)]
pub struct SdeReport {
    pub r2_start: f64,
    pub m_tilde0: f64,
    pub times: Vec<f64>,
    pub m_tilde: Vec<MomentPair>,
    pub r2: Vec<MomentPair>,
    pub n_paths: usize,
    /// OU law at the fixed point and its (mean, var) at each time.
    pub ou: Option<(OUParams, Vec<(f64, f64)>)>,
}

#[derive(Serialize)]
struct SdeRow {
    t: f64,
    mtilde_mean: f64,
    mtilde_var: f64,
    r2_mean: f64,
    r2_var: f64,
    n_paths: usize,
}

#[derive(Serialize)]
struct SdeOuRow {
    t: f64,
    mtilde_mean: f64,
    mtilde_var: f64,
    ou_mean: f64,
    ou_var: f64,
}

/// Grid time nearest to each checkpoint on the step grid ending at the last one.
fn snapped(checkpoints: &[f64], dt: f64) -> Vec<f64> {
    let t_max = checkpoints.iter().copied().fold(0.0, f64::max);
    let h = t_max / (t_max / dt).round().max(1.0);
    checkpoints.iter().map(|t| (t / h).round() * h).collect()
}

pub fn sde(res: &Resolved, out: &mut OutputDir) -> CliResult<SdeReport> {
    let c = &res.config;
    let model = &res.model;
    let variant: SigmaVariant = c.sigma_variant.into();
    let fp = if c.init_at_fixed_point {
        Some(find_fixed_point(model)?)
    } else {
        None
    };
    let r2_start = fp.map_or(c.r2_0, |f| f.r2_star);
    let checkpoints = c.checkpoints_or_default(Kind::Sde);
    let cache = CoefficientCache::new(model, variant);
    let samples = em_ensemble(
        |u| {
            let k = cache.at(u[1])?;
            Ok(vec![-2.0 * u[0] * k.curvature, k.rhs])
        },
        |u| {
            let k = cache.at(u[1])?;
            Ok(DMatrix::from_column_slice(2, 1, &[k.sigma.max(0.0).sqrt(), 0.0]))
        },
        &[c.m_tilde0, r2_start],
        c.dt,
        &checkpoints,
        c.n_seeds,
        &RandomStream::new(c.seed),
    )?;
    let times = snapped(&checkpoints, c.dt);
    let pick = |j: usize| -> Vec<MomentPair> {
        samples
            .iter()
            .map(|paths| MomentPair::of(paths.iter().map(move |u| u[j])))
            .collect()
    };
    let (m_tilde, r2) = (pick(0), pick(1));
    let ou = match fp {
        Some(fp) => {
            let theta = model.ou_params(&fp)?.theta;
            let vol = model.volatility_sigma11(fp.r2_star, variant)?.max(0.0).sqrt();
            let params = OUParams::new(theta, vol)?;
            let pred = times
                .iter()
                .map(|&t| ou_moments(theta, vol, c.m_tilde0, t))
                .collect::<hdsgd_core::Result<Vec<_>>>()?;
            Some((params, pred))
        }
        None => None,
    };

    out.write_csv(
        "sde.csv",
        (0..times.len()).map(|i| SdeRow {
            t: times[i],
            mtilde_mean: m_tilde[i].mean,
            mtilde_var: m_tilde[i].var,
            r2_mean: r2[i].mean,
            r2_var: r2[i].var,
            n_paths: c.n_seeds,
        }),
    )?;
    if let Some((_, pred)) = &ou {
        out.write_csv(
            "sde_ou.csv",
            (0..times.len()).map(|i| SdeOuRow {
                t: times[i],
                mtilde_mean: m_tilde[i].mean,
                mtilde_var: m_tilde[i].var,
                ou_mean: pred[i].0,
                ou_var: pred[i].1,
            }),
        )?;
    }
    let mean: Vec<f64> = m_tilde.iter().map(|p| p.mean).collect();
    let var: Vec<f64> = m_tilde.iter().map(|p| p.var).collect();
    out.plot(
        "sde.svg",
        &Chart::new(
            "SDE for m_tilde",
            "t",
            vec![
                Series::new("m_tilde mean", &times, &mean),
                Series::new("m_tilde var", &times, &var),
            ],
        ),
    )?;
    Ok(SdeReport {
        r2_start,
        m_tilde0: c.m_tilde0,
        times,
        m_tilde,
        r2,
        n_paths: c.n_seeds,
        ou,
    })
}

impl SdeReport {
    pub fn lines(&self) -> Vec<String> {
        let mut v = vec![format!(
            "sde: {} paths from (m_tilde, r2) = ({}, {:.6})",
            self.n_paths, self.m_tilde0, self.r2_start
        )];
        if let Some((p, _)) = &self.ou {
            v.push(format!(
                "ou: theta = {:.6e}, vol = {:.6e}, stationary_var = {:.6e}",
                p.theta, p.vol, p.stationary_var
            ));
        }
        for (i, t) in self.times.iter().enumerate() {
            let mut line = format!(
                "t = {t:.4}: m_tilde mean {:+.5e} var {:.5e}, r2 mean {:.6}",
                self.m_tilde[i].mean, self.m_tilde[i].var, self.r2[i].mean
            );
            if let Some((_, pred)) = &self.ou {
                line.push_str(&format!(", ou mean {:+.5e} var {:.5e}", pred[i].0, pred[i].1));
            }
            v.push(line);
        }
        v
    }
}

// sgd

#[derive(Debug, Clone)]
pub struct SgdReport {
    pub n: usize,
    pub ensemble: EnsembleStats,
}

pub fn sgd(res: &Resolved, out: &mut OutputDir) -> CliResult<SgdReport> {
    let c = &res.config;
    let mut sim = res.sim(c.n);
    if c.init_at_fixed_point {
        sim = sim.at_fixed_point(&find_fixed_point(&res.model)?);
    }
    let e = run_ensemble(
        &sim,
        res.model.activation(),
        c.n_seeds,
        c.mode.into(),
        &RandomStream::new(c.seed),
    )?;
    out.write_csv("trajectory.csv", trajectory_rows(&e, c.n))?;
    out.plot("trajectory.svg", &ensemble_chart(&format!("SGD, N = {}", c.n), &e))?;
    Ok(SgdReport { n: c.n, ensemble: e })
}

impl SgdReport {
    pub fn lines(&self) -> Vec<String> {
        let e = &self.ensemble;
        let i = e.times.len() - 1;
        vec![format!(
            "sgd ({}, N = {}, {} seeds): t = {:.4}: m {:+.5e} (var {:.3e}), r2 {:.6} (var {:.3e}), m_tilde var {:.5e}",
            e.mode.name(),
            self.n,
            e.n_seeds(),
            e.times[i],
            e.m[i].mean,
            e.m[i].var,
            e.r2[i].mean,
            e.r2[i].var,
            e.m_tilde[i].var
        )]
    }
}

// compare

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CompareRow {
    #[serde(rename = "N")]
    pub n: usize,
    pub n_seeds: usize,
    pub sup_m: f64,
    pub sup_r2: f64,
}

#[derive(Debug, Clone)]
pub struct CompareReport {
    pub rows: Vec<CompareRow>,
    pub tol: f64,
    /// Present when the list has a first and last N to compare.
    pub passed: Option<bool>,
}

#[derive(Serialize)]
struct DeviationRow {
    t: f64,
    dev_m: f64,
    dev_r2: f64,
}

pub fn compare(res: &Resolved, out: &mut OutputDir) -> CliResult<CompareReport> {
    let c = &res.config;
    let mut summary = out.csv_table("compare.csv", &["N", "n_seeds", "sup_m", "sup_r2"])?;

    let ode = reference_ode(&res.model, 0.0, c.init_sigma2, c.t_end, c.dt)?;
    out.write_csv("ode.csv", ode_rows(&thin_rows(&ode)))?;
    let grid = uniform_grid(c.t_end, DEVIATION_GRID);
    let mut rows = Vec::with_capacity(c.n_list.len());
    for &n in &c.n_list {
        let e = run_ensemble(
            &res.sim(n),
            res.model.activation(),
            c.n_seeds,
            c.mode.into(),
            &RandomStream::new(c.seed),
        )?;
        out.write_csv(&format!("trajectory_N{n}.csv"), trajectory_rows(&e, n))?;
        let dev = sup_deviation(&e.mean_trajectory()?, &ode, &grid)?;
        out.write_csv(
            &format!("deviation_N{n}.csv"),
            dev.grid.iter().zip(&dev.deviations).map(|(&t, d)| DeviationRow {
                t,
                dev_m: d[0],
                dev_r2: d[1],
            }),
        )?;
        out.plot(
            &format!("trajectory_N{n}.svg"),
            &ensemble_chart(&format!("SGD mean, N = {n}"), &e),
        )?;
        let row = CompareRow {
            n,
            n_seeds: e.n_seeds(),
            sup_m: dev.sup[0],
            sup_r2: dev.sup[1],
        };
        summary.serialize(row)?;
        summary.flush()?;
        rows.push(row);
    }
    out.plot("ode.svg", &trajectory_chart("ODE reference", &thin_rows(&ode)))?;
    let passed = match (rows.first(), rows.last()) {
        (Some(first), Some(last)) if rows.len() > 1 => Some(
            last.sup_m < first.sup_m
                && last.sup_r2 < first.sup_r2
                && last.sup_m < c.compare_tol
                && last.sup_r2 < c.compare_tol,
        ),
        _ => None,
    };
    Ok(CompareReport {
        rows,
        tol: c.compare_tol,
        passed,
    })
}

impl CompareReport {
    pub fn lines(&self) -> Vec<String> {
        let mut v: Vec<String> = self
            .rows
            .iter()
            .map(|r| {
                format!(
                    "N = {}: sup |m - m_ode| = {:.4e}, sup |r2 - r2_ode| = {:.4e} ({} seeds)",
                    r.n, r.sup_m, r.sup_r2, r.n_seeds
                )
            })
            .collect();
        if let Some(p) = self.passed {
            v.push(format!(
                "deviation decreases from first to last N and ends below {}: {}",
                self.tol,
                if p { "yes" } else { "no" }
            ));
        }
        v
    }
}

// fixed-point

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct VariantRow {
    pub variant: &'static str,
    pub sigma11: f64,
    pub vol: f64,
    pub stationary_var: f64,
    /// (Σ11 - Σ11_direct) / Σ11_direct.
    pub rel_discrepancy: f64,
}

fn variant_rows(model: &ModelFunctions, r2_star: f64, theta: f64) -> CliResult<Vec<VariantRow>> {
    let direct = model.volatility_sigma11(r2_star, SigmaVariant::Direct)?;
    SigmaVariant::ALL
        .iter()
        .map(|&v| {
            let sigma11 = model.volatility_sigma11(r2_star, v)?;
            Ok(VariantRow {
                variant: v.name(),
                sigma11,
                vol: sigma11.max(0.0).sqrt(),
                stationary_var: sigma11 / (2.0 * theta),
                rel_discrepancy: (sigma11 - direct) / direct,
            })
        })
        .collect()
}

fn variant_lines(rows: &[VariantRow]) -> Vec<String> {
    rows.iter()
        .map(|r| {
            format!(
                "  {:<17} Sigma11 = {:.6e}, stationary_var = {:.6e}, relative to direct {:+.3e}",
                r.variant, r.sigma11, r.stationary_var, r.rel_discrepancy
            )
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct FixedPointReport {
    pub fixed_point: FixedPoint,
    pub ou: OUParams,
    pub variants: Vec<VariantRow>,
}

#[derive(Serialize)]
struct FixedPointRow {
    r2_star: f64,
    residual: f64,
    theta: f64,
    variant: &'static str,
    sigma11: f64,
    vol: f64,
    stationary_var: f64,
    rel_discrepancy: f64,
}

pub fn fixed_point_report(res: &Resolved, out: &mut OutputDir) -> CliResult<FixedPointReport> {
    let fp = find_fixed_point(&res.model)?;
    let ou = res.model.ou_params(&fp)?;
    let variants = variant_rows(&res.model, fp.r2_star, ou.theta)?;
    out.write_csv(
        "fixed_point.csv",
        variants.iter().map(|v| FixedPointRow {
            r2_star: fp.r2_star,
            residual: fp.residual,
            theta: ou.theta,
            variant: v.variant,
            sigma11: v.sigma11,
            vol: v.vol,
            stationary_var: v.stationary_var,
            rel_discrepancy: v.rel_discrepancy,
        }),
    )?;
    Ok(FixedPointReport {
        fixed_point: fp,
        ou,
        variants,
    })
}

impl FixedPointReport {
    pub fn lines(&self) -> Vec<String> {
        let mut v = vec![
            format!(
                "r2_star = {:.10} (residual {:.2e})",
                self.fixed_point.r2_star, self.fixed_point.residual
            ),
            format!(
                "theta = {:.6e}, vol = {:.6e}, stationary_var = {:.6e}",
                self.ou.theta, self.ou.vol, self.ou.stationary_var
            ),
            "Sigma11 variants:".to_string(),
        ];
        v.extend(variant_lines(&self.variants));
        v
    }
}

// ou-check

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct OuRow {
    pub t: f64,
    pub ks_d: f64,
    pub p_value: f64,
    pub empirical_mean: f64,
    pub empirical_var: f64,
    pub predicted_mean: f64,
    pub predicted_var: f64,
}

#[derive(Debug, Clone)]
pub struct OuCheckReport {
    pub n: usize,
    pub n_seeds: usize,
    pub fixed_point: FixedPoint,
    pub ou: OUParams,
    pub variant: SigmaVariant,
    pub rows: Vec<OuRow>,
    pub variants: Vec<VariantRow>,
    pub passed: bool,
}

impl OuCheckReport {
    pub fn p_passes(&self) -> usize {
        self.rows.iter().filter(|r| r.p_value > OU_P_LEVEL).count()
    }

    /// |empirical - predicted| / predicted variance at the last checkpoint.
    pub fn last_var_error(&self) -> f64 {
        self.rows.last().map_or(f64::NAN, |r| {
            (r.empirical_var - r.predicted_var).abs() / r.predicted_var
        })
    }
}

/// m̃(0) ~ N(0, r2*), so the reference law adds the decayed initial variance
/// to the OU variance started from zero.
pub fn ou_check(res: &Resolved, out: &mut OutputDir) -> CliResult<OuCheckReport> {
    let c = &res.config;
    let model = &res.model;
    let variant: SigmaVariant = c.sigma_variant.into();
    let fp = find_fixed_point(model)?;
    let theta = model.ou_params(&fp)?.theta;
    let ou = OUParams::new(theta, model.volatility_sigma11(fp.r2_star, variant)?.max(0.0).sqrt())?;
    let variants = variant_rows(model, fp.r2_star, theta)?;
    out.write_csv("variants.csv", variants.iter().copied())?;

    let sim = res.sim(c.n).at_fixed_point(&fp);
    let e = run_ensemble(
        &sim,
        model.activation(),
        c.n_seeds,
        c.mode.into(),
        &RandomStream::new(c.seed),
    )?;
    out.write_csv("trajectory.csv", trajectory_rows(&e, c.n))?;
    let rows = c
        .checkpoints_or_default(Kind::OuCheck)
        .iter()
        .map(|&t| {
            let i = e.index_near(t);
            let t = e.times[i];
            let xs = e.m_tilde_at(i);
            let (_, ou_var) = ou_moments(ou.theta, ou.vol, 0.0, t)?;
            let predicted_var = fp.r2_star * (-2.0 * ou.theta * t).exp() + ou_var;
            let ks = ks_test(&xs, normal_cdf(0.0, predicted_var))?;
            Ok(OuRow {
                t,
                ks_d: ks.statistic,
                p_value: ks.p_value,
                empirical_mean: e.m_tilde[i].mean,
                empirical_var: e.m_tilde[i].var,
                predicted_mean: 0.0,
                predicted_var,
            })
        })
        .collect::<CliResult<Vec<_>>>()?;
    out.write_csv("ou_check.csv", rows.iter().copied())?;
    let (emp, pred): (Vec<f64>, Vec<f64>) = rows.iter().map(|r| (r.empirical_var, r.predicted_var)).unzip();
    let ts: Vec<f64> = rows.iter().map(|r| r.t).collect();
    out.plot(
        "ou_check.svg",
        &Chart::new(
            "variance of m_tilde",
            "t",
            vec![
                Series::new("empirical", &ts, &emp),
                Series::new("predicted", &ts, &pred),
            ],
        ),
    )?;

    let mut report = OuCheckReport {
        n: c.n,
        n_seeds: c.n_seeds,
        fixed_point: fp,
        ou,
        variant,
        rows,
        variants,
        passed: false,
    };
    let need = (2 * report.rows.len()).div_ceil(3);
    report.passed = report.p_passes() >= need && report.last_var_error() <= OU_VAR_TOL;
    Ok(report)
}

impl OuCheckReport {
    pub fn lines(&self) -> Vec<String> {
        let mut v = vec![
            format!(
                "r2_star = {:.8}, N = {}, {} seeds, variant {}",
                self.fixed_point.r2_star,
                self.n,
                self.n_seeds,
                self.variant.name()
            ),
            format!(
                "theta = {:.6e}, vol = {:.6e}, stationary_var = vol^2/(2 theta) = {:.6e}",
                self.ou.theta, self.ou.vol, self.ou.stationary_var
            ),
        ];
        v.extend(self.rows.iter().map(|r| {
            format!(
                "t = {:.4}: D = {:.4}, p = {:.4}, var {:.5e} vs predicted {:.5e}",
                r.t, r.ks_d, r.p_value, r.empirical_var, r.predicted_var
            )
        }));
        v.push("Sigma11 variants at r2_star:".to_string());
        v.extend(variant_lines(&self.variants));
        v.push(format!(
            "p > {OU_P_LEVEL} at {}/{} checkpoints, last variance error {:.3} (tolerance {OU_VAR_TOL}): {}",
            self.p_passes(),
            self.rows.len(),
            self.last_var_error(),
            if self.passed { "pass" } else { "fail" }
        ));
        v
    }
}

// diagnose

#[derive(Debug, Clone)]
pub struct DiagnoseReport {
    pub table: ScalingTable,
    pub passed: bool,
}

#[derive(Serialize)]
struct ScalingCsvRow {
    #[serde(rename = "N")]
    n: usize,
    column: &'static str,
    value: f64,
    std_err: f64,
}

impl DiagnoseReport {
    /// Columns whose consecutive ratios must stay in [`RATIO_BAND`].
    pub const CHECKED: [ScalingColumn; 2] = [ScalingColumn::GradNorm8, ScalingColumn::CorrelationPairing4];

    pub fn ratios(&self, col: ScalingColumn) -> Vec<f64> {
        self.table.consecutive_ratios(col)
    }

    pub fn lines(&self) -> Vec<String> {
        let t = &self.table;
        let mut v = vec![format!(
            "point (m, r2) = ({}, {}), {} samples per N",
            t.m, t.r2, t.n_samples
        )];
        for row in &t.rows {
            let cols: Vec<String> = ScalingColumn::ALL
                .iter()
                .zip(&row.columns)
                .map(|(c, e)| format!("{} = {:.4e} ± {:.1e}", c.name(), e.value, e.std_err))
                .collect();
            v.push(format!("N = {}: {}", row.n, cols.join(", ")));
        }
        for (i, col) in ScalingColumn::ALL.iter().enumerate() {
            let ratios: Vec<String> = self.ratios(*col).iter().map(|r| format!("{r:.3}")).collect();
            v.push(format!(
                "{}: ratios [{}]{}",
                col.name(),
                ratios.join(", "),
                if t.flags[i] { " (growth flagged)" } else { "" }
            ));
        }
        v.push(format!(
            "checked ratios within [{}, {}]: {}",
            RATIO_BAND.0,
            RATIO_BAND.1,
            if self.passed { "pass" } else { "fail" }
        ));
        v
    }
}

pub fn diagnose(res: &Resolved, out: &mut OutputDir) -> CliResult<DiagnoseReport> {
    let c = &res.config;
    let table = localizability_diagnostics(
        &res.model,
        c.noise_var,
        res.diagnose_point(),
        &c.n_list,
        c.diagnose.n_samples,
        &RandomStream::new(c.seed),
    )?;
    out.write_csv(
        "scaling.csv",
        table.rows.iter().flat_map(|row| {
            ScalingColumn::ALL
                .iter()
                .zip(&row.columns)
                .map(move |(col, e)| ScalingCsvRow {
                    n: row.n,
                    column: col.name(),
                    value: e.value,
                    std_err: e.std_err,
                })
        }),
    )?;
    let mut report = DiagnoseReport { table, passed: false };
    report.passed = DiagnoseReport::CHECKED.iter().all(|&col| {
        report
            .ratios(col)
            .iter()
            .all(|r| (RATIO_BAND.0..=RATIO_BAND.1).contains(r))
    });
    Ok(report)
}
