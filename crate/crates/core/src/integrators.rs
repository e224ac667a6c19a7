//! Fixed-step RK4 for the ballistic ODE, Euler-Maruyama for the diffusive
//! SDE, and the closed-form Ornstein-Uhlenbeck moments.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::rng::RandomStream;

pub const DEFAULT_DT: f64 = 1e-3;

/// Any coordinate above this magnitude aborts integration.
pub const DIVERGENCE_THRESHOLD: f64 = 1e8;

/// States sampled at increasing times starting at 0.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    times: Vec<f64>,
    states: Vec<Vec<f64>>,
    labels: Vec<String>,
}

impl Trajectory {
    pub fn new<S: Into<String>>(labels: impl IntoIterator<Item = S>) -> Self {
        Self {
            times: Vec::new(),
            states: Vec::new(),
            labels: labels.into_iter().map(Into::into).collect(),
        }
    }

    /// Labels `u0`, `u1`, ... for a state of dimension `dim`.
    pub fn unlabeled(dim: usize) -> Self {
        Self::new((0..dim).map(|i| format!("u{i}")))
    }

    pub fn push(&mut self, t: f64, state: Vec<f64>) -> Result<()> {
        match self.times.last() {
            None if t != 0.0 => {
                return Err(Error::InvariantViolation(format!(
                    "trajectory must start at t = 0, got {t}"
                )))
            }
            Some(&last) if t <= last => return Err(Error::InvariantViolation(format!("time {t} not after {last}"))),
            _ => {}
        }
        if state.len() != self.labels.len() {
            return Err(Error::InvariantViolation(format!(
                "state of length {} for {} labels",
                state.len(),
                self.labels.len()
            )));
        }
        self.times.push(t);
        self.states.push(state);
        Ok(())
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn states(&self) -> &[Vec<f64>] {
        &self.states
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.labels.len()
    }

    pub fn last(&self) -> Option<(f64, &[f64])> {
        Some((*self.times.last()?, self.states.last()?.as_slice()))
    }

    pub fn column(&self, i: usize) -> Vec<f64> {
        self.states.iter().map(|s| s[i]).collect()
    }

    /// Piecewise-linear interpolation, clamped to the recorded range.
    pub fn interpolate(&self, t: f64) -> Option<Vec<f64>> {
        let first = *self.times.first()?;
        let last = *self.times.last()?;
        if t <= first {
            return Some(self.states[0].clone());
        }
        if t >= last {
            return self.states.last().cloned();
        }
        let k = self.times.partition_point(|&s| s <= t);
        let (t0, t1) = (self.times[k - 1], self.times[k]);
        let w = (t - t0) / (t1 - t0);
        Some(
            self.states[k - 1]
                .iter()
                .zip(&self.states[k])
                .map(|(a, b)| a + w * (b - a))
                .collect(),
        )
    }

    /// Every `stride`-th sample, always keeping the last one.
    pub fn thin(&self, stride: usize) -> Self {
        let stride = stride.max(1);
        let n = self.len();
        let keep = (0..n).filter(|&i| i % stride == 0 || i + 1 == n);
        Self {
            times: keep.clone().map(|i| self.times[i]).collect(),
            states: keep.map(|i| self.states[i].clone()).collect(),
            labels: self.labels.clone(),
        }
    }
}

fn step_count(t_end: f64, dt: f64) -> Result<(usize, f64)> {
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(Error::Config(format!("dt must be positive, got {dt}")));
    }
    if !(t_end >= dt) || !t_end.is_finite() {
        return Err(Error::Config(format!("t_end = {t_end} must be >= dt = {dt}")));
    }
    let n = (t_end / dt).round().max(1.0) as usize;
    Ok((n, t_end / n as f64))
}

fn check_state(t: f64, u: &[f64]) -> Result<()> {
    if u.iter().any(|x| !x.is_finite() || x.abs() > DIVERGENCE_THRESHOLD) {
        return Err(Error::Divergence {
            time: t,
            state: u.to_vec(),
        });
    }
    Ok(())
}

/// A failed coefficient evaluation during integration means the state has
/// left the region where the coefficients are finite.
fn as_divergence(e: Error, t: f64, u: &[f64]) -> Error {
    match e {
        Error::Evaluation { .. } => Error::Divergence {
            time: t,
            state: u.to_vec(),
        },
        other => other,
    }
}

fn axpy(u: &[f64], h: f64, k: &[f64]) -> Vec<f64> {
    u.iter().zip(k).map(|(a, b)| a + h * b).collect()
}

/// Classical fourth-order Runge-Kutta on a uniform grid of
/// round(t_end/dt) steps ending exactly at t_end; records every step.
pub fn rk4<F>(mut rhs: F, u0: &[f64], t_end: f64, dt: f64) -> Result<Trajectory>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    let (n, h) = step_count(t_end, dt)?;
    check_state(0.0, u0)?;
    let mut traj = Trajectory::unlabeled(u0.len());
    traj.push(0.0, u0.to_vec())?;
    let mut u = u0.to_vec();
    for i in 0..n {
        let t = i as f64 * h;
        let mut eval = |x: &[f64]| -> Result<Vec<f64>> {
            check_state(t, x)?;
            let k = rhs(x).map_err(|e| as_divergence(e, t, x))?;
            check_state(t, &k).map_err(|_| Error::Divergence {
                time: t,
                state: x.to_vec(),
            })?;
            Ok(k)
        };
        let k1 = eval(&u)?;
        let k2 = eval(&axpy(&u, 0.5 * h, &k1))?;
        let k3 = eval(&axpy(&u, 0.5 * h, &k2))?;
        let k4 = eval(&axpy(&u, h, &k3))?;
        for (j, x) in u.iter_mut().enumerate() {
            *x += h / 6.0 * (k1[j] + 2.0 * k2[j] + 2.0 * k3[j] + k4[j]);
        }
        let t_next = (i + 1) as f64 * h;
        check_state(t_next, &u)?;
        traj.push(t_next, u.clone())?;
    }
    Ok(traj)
}

/// u ← u + drift(u) dt + vol(u) √dt ξ with ξ standard Gaussian of dimension
/// vol(u).ncols(). Records every step.
pub fn euler_maruyama<D, V>(
    drift: D,
    vol: V,
    u0: &[f64],
    t_end: f64,
    dt: f64,
    stream: &mut RandomStream,
) -> Result<Trajectory>
where
    D: FnMut(&[f64]) -> Result<Vec<f64>>,
    V: FnMut(&[f64]) -> Result<DMatrix<f64>>,
{
    let mut traj = Trajectory::unlabeled(u0.len());
    em_core(
        drift,
        vol,
        u0,
        t_end,
        dt,
        stream,
        |_, t, u| traj.push(t, u.to_vec()),
        |_| true,
    )?;
    Ok(traj)
}

fn em_core<D, V, R, K>(
    mut drift: D,
    mut vol: V,
    u0: &[f64],
    t_end: f64,
    dt: f64,
    stream: &mut RandomStream,
    mut record: R,
    keep: K,
) -> Result<()>
where
    D: FnMut(&[f64]) -> Result<Vec<f64>>,
    V: FnMut(&[f64]) -> Result<DMatrix<f64>>,
    R: FnMut(usize, f64, &[f64]) -> Result<()>,
    K: Fn(usize) -> bool,
{
    let (n, h) = step_count(t_end, dt)?;
    check_state(0.0, u0)?;
    if keep(0) {
        record(0, 0.0, u0)?;
    }
    let sqrt_h = h.sqrt();
    let mut u = DVector::from_column_slice(u0);
    let mut xi = Vec::new();
    for i in 0..n {
        let t = i as f64 * h;
        let a = drift(u.as_slice()).map_err(|e| as_divergence(e, t, u.as_slice()))?;
        let b = vol(u.as_slice()).map_err(|e| as_divergence(e, t, u.as_slice()))?;
        if a.len() != u.len() || b.nrows() != u.len() {
            return Err(Error::Config(format!(
                "coefficient shapes ({}, {}x{}) do not match state dimension {}",
                a.len(),
                b.nrows(),
                b.ncols(),
                u.len()
            )));
        }
        xi.resize(b.ncols(), 0.0);
        stream.fill_normal(&mut xi);
        let noise = &b * DVector::from_column_slice(&xi);
        for j in 0..u.len() {
            u[j] += a[j] * h + noise[j] * sqrt_h;
        }
        let t_next = (i + 1) as f64 * h;
        check_state(t_next, u.as_slice())?;
        if keep(i + 1) {
            record(i + 1, t_next, u.as_slice())?;
        }
    }
    Ok(())
}

/// Euler-Maruyama ensemble of `n_paths` paths, path i driven by
/// `base.substream(i)`. Returns, for each checkpoint, the state of every path
/// in path order. Checkpoints are snapped to the nearest grid time.
pub fn em_ensemble<D, V>(
    drift: D,
    vol: V,
    u0: &[f64],
    dt: f64,
    checkpoints: &[f64],
    n_paths: usize,
    base: &RandomStream,
) -> Result<Vec<Vec<Vec<f64>>>>
where
    D: Fn(&[f64]) -> Result<Vec<f64>> + Sync,
    V: Fn(&[f64]) -> Result<DMatrix<f64>> + Sync,
{
    let t_end = checkpoints.iter().copied().fold(f64::NAN, f64::max);
    let (_, h) = step_count(t_end, dt)?;
    let indices: Vec<usize> = checkpoints.iter().map(|&t| (t / h).round() as usize).collect();
    let paths: Vec<Vec<Vec<f64>>> = (0..n_paths)
        .into_par_iter()
        .map(|p| {
            let mut stream = base.substream(p as u64);
            let mut by_index: Vec<(usize, Vec<f64>)> = Vec::with_capacity(indices.len());
            em_core(
                &drift,
                &vol,
                u0,
                t_end,
                dt,
                &mut stream,
                |i, _, u| {
                    by_index.push((i, u.to_vec()));
                    Ok(())
                },
                |i| indices.contains(&i),
            )?;
            Ok(indices
                .iter()
                .map(|i| {
                    by_index
                        .iter()
                        .find(|(j, _)| j == i)
                        .map(|(_, u)| u.clone())
                        .unwrap_or_default()
                })
                .collect())
        })
        .collect::<Result<_>>()?;
    Ok((0..checkpoints.len())
        .map(|c| paths.iter().map(|p| p[c].clone()).collect())
        .collect())
}

/// Mean and variance of the OU process dm = -θ m dt + vol dB at time t from
/// m(0) = m0.
pub fn ou_moments(theta: f64, vol: f64, m0: f64, t: f64) -> Result<(f64, f64)> {
    if !(theta > 0.0) {
        return Err(Error::Domain(format!("theta must be positive, got {theta}")));
    }
    if !(t >= 0.0) {
        return Err(Error::Domain(format!("t must be nonnegative, got {t}")));
    }
    let mean = m0 * (-theta * t).exp();
    let var = vol * vol * -(-2.0 * theta * t).exp_m1() / (2.0 * theta);
    Ok((mean, var))
}
