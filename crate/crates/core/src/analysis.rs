//! Deviation metrics, Kolmogorov-Smirnov tests, empirical moments and the
//! moment-scaling diagnostics for the SGD noise ∇H = ∇L - ∇Φ.

use std::f64::consts::{PI, SQRT_2};

use rayon::prelude::*;

use crate::activation::Activation;
use crate::dynamics::{ModelFunctions, SummaryPoint};
use crate::error::{Error, Result};
use crate::integrators::Trajectory;
use crate::rng::RandomStream;

pub const KS_MIN_SAMPLES: usize = 8;

/// A column whose value at some N exceeds this multiple of its value at the
/// smallest N is flagged.
pub const GROWTH_FLAG: f64 = 4.0;

#[derive(Debug, Clone, PartialEq)]
pub struct DeviationReport {
    pub grid: Vec<f64>,
    /// deviations[i][c]: |a(t_i) - b(t_i)| in coordinate c.
    pub deviations: Vec<Vec<f64>>,
    pub sup: Vec<f64>,
    pub labels: Vec<String>,
    pub n: Option<usize>,
    pub n_seeds: Option<usize>,
}

/// Linear interpolation of both trajectories onto `grid` and the
/// per-coordinate maximum absolute difference.
pub fn sup_deviation(a: &Trajectory, b: &Trajectory, grid: &[f64]) -> Result<DeviationReport> {
    if a.dim() != b.dim() {
        return Err(Error::Domain(format!("dimension mismatch: {} vs {}", a.dim(), b.dim())));
    }
    let span = |tr: &Trajectory| (tr.times().first().copied(), tr.times().last().copied());
    for (name, tr) in [("first", a), ("second", b)] {
        let (Some(lo), Some(hi)) = span(tr) else {
            return Err(Error::Domain(format!("{name} trajectory is empty")));
        };
        let tol = 1e-12 * hi.abs().max(1.0);
        if let Some(t) = grid.iter().find(|&&t| t < lo - tol || t > hi + tol) {
            return Err(Error::Domain(format!(
                "grid time {t} outside the {name} trajectory span [{lo}, {hi}]"
            )));
        }
    }
    let dim = a.dim();
    let mut sup = vec![0.0f64; dim];
    let deviations: Vec<Vec<f64>> = grid
        .iter()
        .map(|&t| {
            // both spans were checked above
            let (u, v) = (
                a.interpolate(t).unwrap_or_default(),
                b.interpolate(t).unwrap_or_default(),
            );
            let d: Vec<f64> = u.iter().zip(&v).map(|(x, y)| (x - y).abs()).collect();
            sup.iter_mut().zip(&d).for_each(|(s, x)| *s = s.max(*x));
            d
        })
        .collect();
    Ok(DeviationReport {
        grid: grid.to_vec(),
        deviations,
        sup,
        labels: a.labels().to_vec(),
        n: None,
        n_seeds: None,
    })
}

/// Uniform grid of `points` times on [0, t_end].
pub fn uniform_grid(t_end: f64, points: usize) -> Vec<f64> {
    let k = points.max(2) - 1;
    (0..=k).map(|i| t_end * i as f64 / k as f64).collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KsResult {
    pub statistic: f64,
    pub p_value: f64,
}

/// Q(λ) = 2 Σ_{k≥1} (-1)^{k-1} exp(-2k²λ²), the limiting Kolmogorov tail.
///
/// For λ < 1.18 the alternating series converges slowly, so the equivalent
/// theta-function form 1 - (√(2π)/λ) Σ_{k≥1} exp(-(2k-1)²π²/(8λ²)) is used.
pub fn kolmogorov_q(lambda: f64) -> f64 {
    if lambda <= 0.0 {
        return 1.0;
    }
    if lambda < 1.18 {
        let c = -PI * PI / (8.0 * lambda * lambda);
        let mut s = 0.0;
        for k in 1.. {
            let j = (2 * k - 1) as f64;
            let term = (c * j * j).exp();
            s += term;
            if term < 1e-16 {
                break;
            }
        }
        return (1.0 - (2.0 * PI).sqrt() / lambda * s).clamp(0.0, 1.0);
    }
    let mut s = 0.0;
    for k in 1.. {
        let kf = k as f64;
        let term = (-2.0 * kf * kf * lambda * lambda).exp();
        s += if k % 2 == 1 { term } else { -term };
        if term < 1e-12 {
            break;
        }
    }
    (2.0 * s).clamp(0.0, 1.0)
}

/// One-sample KS test of `samples` against `cdf`, asymptotic p-value with λ = √n D.
pub fn ks_test<F: Fn(f64) -> f64>(samples: &[f64], cdf: F) -> Result<KsResult> {
    let n = samples.len();
    if n < KS_MIN_SAMPLES {
        return Err(Error::SampleSize {
            got: n,
            min: KS_MIN_SAMPLES,
        });
    }
    let d = ks_statistic(samples, cdf);
    Ok(KsResult {
        statistic: d,
        p_value: kolmogorov_q((n as f64).sqrt() * d),
    })
}

/// D = max_i max(i/n - F(x_(i)), F(x_(i)) - (i-1)/n), with no sample-size precondition.
pub fn ks_statistic<F: Fn(f64) -> f64>(samples: &[f64], cdf: F) -> f64 {
    let mut xs = samples.to_vec();
    xs.sort_by(f64::total_cmp);
    let nf = xs.len() as f64;
    xs.iter()
        .enumerate()
        .map(|(i, &x)| {
            let u = cdf(x);
            ((i + 1) as f64 / nf - u).max(u - i as f64 / nf)
        })
        .fold(0.0, f64::max)
}

/// Two-sample KS test, λ = √(nm/(n+m)) D.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> Result<KsResult> {
    for s in [a, b] {
        if s.len() < KS_MIN_SAMPLES {
            return Err(Error::SampleSize {
                got: s.len(),
                min: KS_MIN_SAMPLES,
            });
        }
    }
    let mut xs = a.to_vec();
    let mut ys = b.to_vec();
    xs.sort_by(f64::total_cmp);
    ys.sort_by(f64::total_cmp);
    let (n, m) = (xs.len() as f64, ys.len() as f64);
    let (mut i, mut j, mut d) = (0usize, 0usize, 0.0f64);
    while i < xs.len() && j < ys.len() {
        let t = xs[i].min(ys[j]);
        while i < xs.len() && xs[i] <= t {
            i += 1;
        }
        while j < ys.len() && ys[j] <= t {
            j += 1;
        }
        d = d.max((i as f64 / n - j as f64 / m).abs());
    }
    Ok(KsResult {
        statistic: d,
        p_value: kolmogorov_q((n * m / (n + m)).sqrt() * d),
    })
}

/// CDF of N(mean, var); a point mass when var = 0.
pub fn normal_cdf(mean: f64, var: f64) -> impl Fn(f64) -> f64 {
    let sd = var.max(0.0).sqrt();
    move |x| {
        if sd == 0.0 {
            if x >= mean {
                1.0
            } else {
                0.0
            }
        } else {
            0.5 * libm::erfc(-(x - mean) / (sd * SQRT_2))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MomentOrder {
    Two = 2,
    Four = 4,
    Eight = 8,
}

impl MomentOrder {
    pub fn exponent(self) -> i32 {
        self as i32
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MomentEstimate {
    pub value: f64,
    pub std_err: f64,
}

/// Sample k-th raw moment with its jackknife standard error (NaN below two samples).
pub fn empirical_moments(samples: &[f64], k: MomentOrder) -> MomentEstimate {
    let powers: Vec<f64> = samples.iter().map(|x| x.powi(k.exponent())).collect();
    jackknife_mean(&powers)
}

/// Mean of `values` and the jackknife standard error of the mean.
fn jackknife_mean(values: &[f64]) -> MomentEstimate {
    let n = values.len();
    let nf = n as f64;
    let total: f64 = values.iter().sum();
    let value = total / nf;
    if n < 2 {
        return MomentEstimate {
            value,
            std_err: f64::NAN,
        };
    }
    let loo = values.iter().map(|v| (total - v) / (nf - 1.0));
    let loo_mean = loo.clone().sum::<f64>() / nf;
    let ss: f64 = loo.map(|t| (t - loo_mean).powi(2)).sum();
    MomentEstimate {
        value,
        std_err: ((nf - 1.0) / nf * ss).sqrt(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScalingColumn {
    GradNorm8,
    RadialPairing4,
    CorrelationPairing4,
}

impl ScalingColumn {
    pub const ALL: [ScalingColumn; 3] = [
        ScalingColumn::GradNorm8,
        ScalingColumn::RadialPairing4,
        ScalingColumn::CorrelationPairing4,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ScalingColumn::GradNorm8 => "grad_norm8_over_N4",
            ScalingColumn::RadialPairing4 => "pair_r2_4_over_N2",
            ScalingColumn::CorrelationPairing4 => "pair_mtilde_4_over_N2",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScalingRow {
    pub n: usize,
    /// Indexed like [`ScalingColumn::ALL`].
    pub columns: [MomentEstimate; 3],
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScalingTable {
    pub m: f64,
    pub r2: f64,
    pub n_samples: usize,
    pub rows: Vec<ScalingRow>,
    pub flags: [bool; 3],
}

impl ScalingTable {
    /// value(N_{i+1}) / value(N_i) for one column.
    pub fn consecutive_ratios(&self, col: ScalingColumn) -> Vec<f64> {
        let c = col as usize;
        self.rows
            .windows(2)
            .map(|w| w[1].columns[c].value / w[0].columns[c].value)
            .collect()
    }
}

/// Monte Carlo moments of the per-sample noise ∇H = g a - ∇Φ at a point x
/// with summary statistics (m, r2), for each N in `n_list`.
///
/// ∇Φ = ∂_mφ e1 + ∂_{r2}φ · 2(x - m e1) with the coefficients from
/// [`ModelFunctions::population_grad_coeffs`]. Samples for N are drawn from
/// `base.substream(N)`.
pub fn localizability_diagnostics(
    mdl: &ModelFunctions,
    noise_var: f64,
    point: SummaryPoint,
    n_list: &[usize],
    n_samples: usize,
    base: &RandomStream,
) -> Result<ScalingTable> {
    if let Some(&n) = n_list.iter().find(|&&n| n < 32) {
        return Err(Error::Config(format!("diagnostics need N >= 32, got {n}")));
    }
    if n_samples < 2 {
        return Err(Error::SampleSize { got: n_samples, min: 2 });
    }
    let f = mdl.activation();
    let (d_m, d_r2) = mdl.population_grad_coeffs(&point)?;
    let rows = n_list
        .par_iter()
        .map(|&n| {
            let mut stream = base.substream(n as u64);
            Ok(scaling_row(f, noise_var, point, d_m, d_r2, n, n_samples, &mut stream))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut flags = [false; 3];
    if let Some(first) = rows.first() {
        for (c, flag) in flags.iter_mut().enumerate() {
            let base_val = first.columns[c].value;
            *flag = rows.iter().any(|r| r.columns[c].value > GROWTH_FLAG * base_val);
        }
    }
    Ok(ScalingTable {
        m: point.m,
        r2: point.r2,
        n_samples,
        rows,
        flags,
    })
}

#[allow(clippy::too_many_arguments)]
fn scaling_row(
    f: &Activation,
    noise_var: f64,
    point: SummaryPoint,
    d_m: f64,
    d_r2: f64,
    n: usize,
    n_samples: usize,
    stream: &mut RandomStream,
) -> ScalingRow {
    // x = m e1 + r e2; rotational invariance makes the choice of e2 lossless
    let mut x = vec![0.0; n];
    x[0] = point.m;
    x[1] = point.r_perp();
    let mut grad_phi = vec![0.0; n];
    grad_phi[0] = d_m;
    for i in 1..n {
        grad_phi[i] = d_r2 * 2.0 * x[i];
    }
    let grad_r2: Vec<f64> = (0..n).map(|i| if i == 0 { 0.0 } else { 2.0 * x[i] }).collect();
    let nf = n as f64;
    let sd = noise_var.sqrt();

    let mut a = vec![0.0; n];
    let mut cols: [Vec<f64>; 3] = std::array::from_fn(|_| Vec::with_capacity(n_samples));
    for _ in 0..n_samples {
        stream.fill_normal(&mut a);
        let eps = sd * stream.normal();
        let p: f64 = a.iter().zip(&x).map(|(u, v)| u * v).sum();
        let j = f.jet(p);
        let g = 2.0 * (j.value - f.eval(a[0]) - eps) * j.d1;
        let (mut norm2, mut pair_r2) = (0.0, 0.0);
        for i in 0..n {
            let h = g * a[i] - grad_phi[i];
            norm2 += h * h;
            pair_r2 += h * grad_r2[i];
        }
        let d1 = g * a[0] - grad_phi[0];
        cols[0].push(norm2.powi(4) / nf.powi(4));
        cols[1].push(pair_r2.powi(4) / (nf * nf));
        // ⟨∇H, ∇m̃⟩ = √N ∂_1 H, so its fourth power over N² is (∂_1 H)⁴
        cols[2].push(d1.powi(4));
    }
    ScalingRow {
        n,
        columns: std::array::from_fn(|c| jackknife_mean(&cols[c])),
    }
}
