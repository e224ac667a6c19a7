//! Online SGD on the single-index model y = f(⟨a, e1⟩) + ε with a ~ N(0, I_N)
//! and step size c_delta/N, as a full N-dimensional chain and as an exact
//! chain on (m, r⊥²).

use rayon::prelude::*;

use crate::activation::Activation;
use crate::dynamics::FixedPoint;
use crate::error::{Error, Result};
use crate::integrators::{Trajectory, DIVERGENCE_THRESHOLD};
use crate::rng::RandomStream;

pub const MIN_DIMENSION: usize = 8;

/// run_full and run_reduced refuse more than this many steps.
pub const MAX_STEPS: f64 = 1e8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NoiseLaw {
    /// ε ~ N(0, C_ε).
    Gaussian,
    /// ε = ±√C_ε with equal probability.
    TwoPoint,
}

impl NoiseLaw {
    pub fn name(self) -> &'static str {
        match self {
            NoiseLaw::Gaussian => "gaussian",
            NoiseLaw::TwoPoint => "two_point",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "gaussian" => Ok(NoiseLaw::Gaussian),
            "two_point" => Ok(NoiseLaw::TwoPoint),
            _ => Err(Error::Config(format!("unknown noise law `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub n: usize,
    pub c_delta: f64,
    pub t_end: f64,
    pub init_sigma2: f64,
    pub noise_var: f64,
    pub noise_law: NoiseLaw,
    /// Steps between records; `None` means max(1, ⌊N/100⌋).
    pub record_stride: Option<usize>,
}

impl SimConfig {
    pub fn new(n: usize, t_end: f64) -> Self {
        Self {
            n,
            c_delta: 1.0,
            t_end,
            init_sigma2: 1.0,
            noise_var: 0.0,
            noise_law: NoiseLaw::Gaussian,
            record_stride: None,
        }
    }

    /// Initialization at the radial fixed point, σ² = r⊥*².
    pub fn at_fixed_point(mut self, fp: &FixedPoint) -> Self {
        self.init_sigma2 = fp.r2_star;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < MIN_DIMENSION {
            return Err(Error::Config(format!("N = {} below minimum {MIN_DIMENSION}", self.n)));
        }
        if !(self.c_delta > 0.0) || !self.c_delta.is_finite() {
            return Err(Error::Config(format!("c_delta must be positive, got {}", self.c_delta)));
        }
        if !(self.t_end > 0.0) || !self.t_end.is_finite() {
            return Err(Error::Config(format!("t_end must be positive, got {}", self.t_end)));
        }
        if !(self.init_sigma2 >= 0.0) || !self.init_sigma2.is_finite() {
            return Err(Error::Config(format!(
                "init_sigma2 must be >= 0, got {}",
                self.init_sigma2
            )));
        }
        if !(self.noise_var >= 0.0) || !self.noise_var.is_finite() {
            return Err(Error::Config(format!("noise_var must be >= 0, got {}", self.noise_var)));
        }
        if self.record_stride == Some(0) {
            return Err(Error::Config("record_stride must be >= 1".into()));
        }
        Ok(())
    }

    pub fn delta(&self) -> f64 {
        self.c_delta / self.n as f64
    }

    /// ⌈t_end·N/c_delta⌉.
    pub fn steps(&self) -> usize {
        (self.t_end / self.delta() - 1e-9).ceil().max(1.0) as usize
    }

    pub fn stride(&self) -> usize {
        self.record_stride.unwrap_or((self.n / 100).max(1))
    }

    pub fn time_of(&self, step: usize) -> f64 {
        step as f64 * self.delta()
    }

    /// Steps at which a summary point is recorded: 0, every stride, and the last.
    pub fn record_steps(&self) -> Vec<usize> {
        let (steps, stride) = (self.steps(), self.stride());
        let mut out: Vec<usize> = (0..=steps).step_by(stride).collect();
        if out.last() != Some(&steps) {
            out.push(steps);
        }
        out
    }

    /// FNV-1a hash of a canonical rendering of every field.
    pub fn digest(&self) -> String {
        let canon = format!(
            "N={};c_delta={:e};t_end={:e};sigma2={:e};noise_var={:e};law={};stride={}",
            self.n,
            self.c_delta,
            self.t_end,
            self.init_sigma2,
            self.noise_var,
            self.noise_law.name(),
            self.stride()
        );
        let hash = canon
            .bytes()
            .fold(0xcbf29ce484222325u64, |h, b| (h ^ b as u64).wrapping_mul(0x100000001b3));
        format!("{hash:016x}")
    }

    fn draw_noise(&self, stream: &mut RandomStream) -> f64 {
        let sd = self.noise_var.sqrt();
        match self.noise_law {
            NoiseLaw::Gaussian => sd * stream.normal(),
            NoiseLaw::TwoPoint => {
                if stream.uniform() < 0.5 {
                    -sd
                } else {
                    sd
                }
            }
        }
    }
}

/// Parameter vector x; the teacher is the first basis vector e1.
#[derive(Debug, Clone, PartialEq)]
pub struct FullState {
    pub x: Vec<f64>,
}

impl FullState {
    pub fn zeros(n: usize) -> Self {
        Self { x: vec![0.0; n] }
    }

    /// x ~ N(0, σ²/N I).
    pub fn random(n: usize, sigma2: f64, stream: &mut RandomStream) -> Self {
        let mut x = vec![0.0; n];
        stream.fill_normal(&mut x);
        let sd = (sigma2 / n as f64).sqrt();
        x.iter_mut().for_each(|v| *v *= sd);
        Self { x }
    }

    /// The teacher direction, e1.
    pub fn x_star(&self) -> Vec<f64> {
        let mut e = vec![0.0; self.x.len()];
        e[0] = 1.0;
        e
    }

    pub fn m(&self) -> f64 {
        self.x[0]
    }

    pub fn r2(&self) -> f64 {
        self.x[1..].iter().map(|v| v * v).sum()
    }

    pub fn reduced(&self) -> ReducedState {
        ReducedState {
            m: self.m(),
            q: self.r2(),
        }
    }
}

/// (m, q = r⊥²).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReducedState {
    pub m: f64,
    pub q: f64,
}

impl ReducedState {
    /// m ~ N(0, σ²/N), q ~ (σ²/N) χ²_{N-1}: the law of the summary
    /// statistics of x ~ N(0, σ²/N I).
    pub fn random(n: usize, sigma2: f64, stream: &mut RandomStream) -> Self {
        let scale = sigma2 / n as f64;
        let m = scale.sqrt() * stream.normal();
        let q = scale * stream.chi_square((n - 1) as f64);
        Self { m, q }
    }
}

/// Randomness consumed by one reduced step: a1 = ⟨a, e1⟩, a2 = ⟨a, x⊥⟩/r⊥,
/// w ~ χ²_{N-2} the squared norm of the rest of a, and the label noise.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReducedDraws {
    pub a1: f64,
    pub a2: f64,
    pub w: f64,
    pub eps: f64,
}

/// ∇_x (y - f(⟨a, x⟩))² = -2 (y - f(⟨a, x⟩)) f'(⟨a, x⟩) a.
pub fn grad_loss(x: &[f64], a: &[f64], y: f64, f: &Activation) -> Vec<f64> {
    let p = dot(a, x);
    let j = f.jet(p);
    let c = -2.0 * (y - j.value) * j.d1;
    a.iter().map(|ai| c * ai).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// g = 2(f(p) - y) f'(p).
fn residual_slope(p: f64, y: f64, f: &Activation) -> f64 {
    let j = f.jet(p);
    2.0 * (j.value - y) * j.d1
}

/// One SGD step on the sample (a, ε): y = f(a1) + ε, x ← x - δ ∇ loss.
pub fn sgd_step_full(state: &mut FullState, a: &[f64], eps: f64, cfg: &SimConfig, f: &Activation) {
    let y = f.eval(a[0]) + eps;
    let g = residual_slope(dot(a, &state.x), y, f);
    if g == 0.0 {
        return;
    }
    let step = cfg.delta() * g;
    state.x.iter_mut().zip(a).for_each(|(x, ai)| *x -= step * ai);
}

/// Exact image of one SGD step on (m, r⊥²).
pub fn reduced_step(state: ReducedState, d: &ReducedDraws, cfg: &SimConfig, f: &Activation) -> Result<ReducedState> {
    if !(d.w >= 0.0) || !(state.q >= 0.0) {
        return Err(Error::Domain(format!(
            "reduced step needs w >= 0 and q >= 0, got w = {}, q = {}",
            d.w, state.q
        )));
    }
    let r = state.q.sqrt();
    let p = state.m * d.a1 + r * d.a2;
    let y = f.eval(d.a1) + d.eps;
    let g = residual_slope(p, y, f);
    if g == 0.0 {
        return Ok(state);
    }
    let step = cfg.delta() * g;
    let m = state.m - step * d.a1;
    // ‖x'‖² - m'² rearranged so that both terms are squares
    let radial = r - step * d.a2;
    let q = radial * radial + step * step * d.w;
    if q < -1e-12 {
        return Err(Error::NumericalConsistency(format!("q' = {q:e} < 0")));
    }
    Ok(ReducedState { m, q: q.max(0.0) })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryTrajectory {
    pub n: usize,
    pub times: Vec<f64>,
    pub m: Vec<f64>,
    pub r2: Vec<f64>,
    pub m_tilde: Vec<f64>,
    pub seed: u64,
    pub stream: u64,
    pub digest: String,
}

impl SummaryTrajectory {
    fn new(cfg: &SimConfig, stream: &RandomStream) -> Self {
        let cap = cfg.record_steps().len();
        Self {
            n: cfg.n,
            times: Vec::with_capacity(cap),
            m: Vec::with_capacity(cap),
            r2: Vec::with_capacity(cap),
            m_tilde: Vec::with_capacity(cap),
            seed: stream.seed(),
            stream: stream.stream_id(),
            digest: cfg.digest(),
        }
    }

    fn record(&mut self, t: f64, s: ReducedState) {
        self.times.push(t);
        self.m.push(s.m);
        self.r2.push(s.q);
        self.m_tilde.push((self.n as f64).sqrt() * s.m);
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// As a (m, r2, m_tilde) [`Trajectory`] for interpolation.
    pub fn to_trajectory(&self) -> Result<Trajectory> {
        let mut tr = Trajectory::new(["m", "r2", "m_tilde"]);
        for i in 0..self.len() {
            tr.push(self.times[i], vec![self.m[i], self.r2[i], self.m_tilde[i]])?;
        }
        Ok(tr)
    }
}

fn guard(t: f64, s: ReducedState) -> Result<()> {
    let bad = |v: f64| !v.is_finite() || v.abs() > DIVERGENCE_THRESHOLD;
    if bad(s.m) || bad(s.q) {
        return Err(Error::Divergence {
            time: t,
            state: vec![s.m, s.q],
        });
    }
    Ok(())
}

fn check_budget(cfg: &SimConfig, steps: f64) -> Result<()> {
    cfg.validate()?;
    if steps > MAX_STEPS {
        return Err(Error::Config(format!(
            "run needs {steps:e} steps, above the cap {MAX_STEPS:e}; shorten t_end or raise c_delta"
        )));
    }
    Ok(())
}

/// Full chain from x0 ~ N(0, σ²/N I), recording every stride steps.
pub fn run_full(cfg: &SimConfig, f: &Activation, stream: &mut RandomStream) -> Result<SummaryTrajectory> {
    check_budget(cfg, cfg.steps() as f64)?;
    let state = FullState::random(cfg.n, cfg.init_sigma2, stream);
    run_full_from(cfg, f, state, stream)
}

/// Full chain from a given x0.
pub fn run_full_from(
    cfg: &SimConfig,
    f: &Activation,
    mut state: FullState,
    stream: &mut RandomStream,
) -> Result<SummaryTrajectory> {
    let steps = cfg.steps();
    check_budget(cfg, steps as f64)?;
    if state.x.len() != cfg.n {
        return Err(Error::Config(format!(
            "initial state has length {}, N = {}",
            state.x.len(),
            cfg.n
        )));
    }
    let mut out = SummaryTrajectory::new(cfg, stream);
    let mut a = vec![0.0; cfg.n];
    let stride = cfg.stride();
    out.record(0.0, state.reduced());
    for k in 1..=steps {
        stream.fill_normal(&mut a);
        let eps = cfg.draw_noise(stream);
        sgd_step_full(&mut state, &a, eps, cfg, f);
        if k % stride == 0 || k == steps {
            let s = state.reduced();
            let t = cfg.time_of(k);
            guard(t, s)?;
            out.record(t, s);
        }
    }
    Ok(out)
}

/// Reduced chain with the same initial law and recording schedule as [`run_full`].
pub fn run_reduced(cfg: &SimConfig, f: &Activation, stream: &mut RandomStream) -> Result<SummaryTrajectory> {
    check_budget(cfg, cfg.steps() as f64)?;
    let state = ReducedState::random(cfg.n, cfg.init_sigma2, stream);
    run_reduced_from(cfg, f, state, stream)
}

/// Reduced chain from a given (m0, q0).
pub fn run_reduced_from(
    cfg: &SimConfig,
    f: &Activation,
    mut state: ReducedState,
    stream: &mut RandomStream,
) -> Result<SummaryTrajectory> {
    let steps = cfg.steps();
    check_budget(cfg, steps as f64)?;
    if !(state.q >= 0.0) {
        return Err(Error::Domain(format!("initial q = {} is negative", state.q)));
    }
    let mut out = SummaryTrajectory::new(cfg, stream);
    let chi = RandomStream::sampler_gamma((cfg.n - 2) as f64);
    let stride = cfg.stride();
    out.record(0.0, state);
    for k in 1..=steps {
        let a1 = stream.normal();
        let a2 = stream.normal();
        let w = chi.as_ref().map_or(0.0, |d| stream.sample(d));
        let eps = cfg.draw_noise(stream);
        state = reduced_step(state, &ReducedDraws { a1, a2, w, eps }, cfg, f)?;
        if k % stride == 0 || k == steps {
            let t = cfg.time_of(k);
            guard(t, state)?;
            out.record(t, state);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Full,
    Reduced,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Full => "full",
            Mode::Reduced => "reduced",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Mode::Full),
            "reduced" => Ok(Mode::Reduced),
            _ => Err(Error::Config(format!("unknown simulation mode `{s}`"))),
        }
    }
}

/// Mean and unbiased variance across seeds at one record time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MomentPair {
    pub mean: f64,
    pub var: f64,
}

impl MomentPair {
    pub fn of(xs: impl Iterator<Item = f64> + Clone) -> Self {
        let n = xs.clone().count() as f64;
        let mean = xs.clone().sum::<f64>() / n;
        let var = xs.map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        Self { mean, var }
    }

    /// Standard error of the mean for `n` samples.
    pub fn std_err(&self, n: usize) -> f64 {
        (self.var / n as f64).sqrt()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleStats {
    pub mode: Mode,
    pub times: Vec<f64>,
    pub m: Vec<MomentPair>,
    pub r2: Vec<MomentPair>,
    pub m_tilde: Vec<MomentPair>,
    pub runs: Vec<SummaryTrajectory>,
}

impl EnsembleStats {
    pub fn n_seeds(&self) -> usize {
        self.runs.len()
    }

    /// Per-seed values of m̃ at record index `i`.
    pub fn m_tilde_at(&self, i: usize) -> Vec<f64> {
        self.runs.iter().map(|r| r.m_tilde[i]).collect()
    }

    pub fn m_at(&self, i: usize) -> Vec<f64> {
        self.runs.iter().map(|r| r.m[i]).collect()
    }

    pub fn r2_at(&self, i: usize) -> Vec<f64> {
        self.runs.iter().map(|r| r.r2[i]).collect()
    }

    /// Record index closest to time t.
    pub fn index_near(&self, t: f64) -> usize {
        self.times
            .iter()
            .enumerate()
            .min_by(|a, b| (a.1 - t).abs().total_cmp(&(b.1 - t).abs()))
            .map_or(0, |(i, _)| i)
    }

    /// Ensemble means of (m, r2) as a [`Trajectory`].
    pub fn mean_trajectory(&self) -> Result<Trajectory> {
        let mut tr = Trajectory::new(["m", "r2"]);
        for i in 0..self.times.len() {
            tr.push(self.times[i], vec![self.m[i].mean, self.r2[i].mean])?;
        }
        Ok(tr)
    }
}

/// `n_seeds` independent runs, seed i on `base.substream(i)`. Results are
/// in seed order and do not depend on the thread pool.
pub fn run_ensemble(
    cfg: &SimConfig,
    f: &Activation,
    n_seeds: usize,
    mode: Mode,
    base: &RandomStream,
) -> Result<EnsembleStats> {
    if n_seeds < 2 {
        return Err(Error::SampleSize { got: n_seeds, min: 2 });
    }
    cfg.validate()?;
    let runs: Vec<SummaryTrajectory> = (0..n_seeds)
        .into_par_iter()
        .map(|i| {
            let mut stream = base.substream(i as u64);
            match mode {
                Mode::Full => run_full(cfg, f, &mut stream),
                Mode::Reduced => run_reduced(cfg, f, &mut stream),
            }
        })
        .collect::<Result<_>>()?;
    let times = runs[0].times.clone();
    let col = |pick: fn(&SummaryTrajectory) -> &Vec<f64>| -> Vec<MomentPair> {
        (0..times.len())
            .map(|i| MomentPair::of(runs.iter().map(move |r| pick(r)[i])))
            .collect()
    };
    Ok(EnsembleStats {
        mode,
        m: col(|r| &r.m),
        r2: col(|r| &r.r2),
        m_tilde: col(|r| &r.m_tilde),
        times,
        runs,
    })
}

/// Runs the full chain and, step by step, feeds the reduced chain the
/// (a1, a2, w, ε) extracted from the same draws. Returns the largest
/// |m_full - m_red| + |q_full - q_red| over the run.
pub fn coupled_check(cfg: &SimConfig, f: &Activation, stream: &mut RandomStream, n_steps: usize) -> Result<f64> {
    cfg.validate()?;
    if cfg.n > 4096 {
        return Err(Error::Config(format!("coupled_check needs N <= 4096, got {}", cfg.n)));
    }
    let mut full = FullState::random(cfg.n, cfg.init_sigma2, stream);
    let mut red = full.reduced();
    let mut a = vec![0.0; cfg.n];
    let mut worst: f64 = 0.0;
    for _ in 0..n_steps {
        stream.fill_normal(&mut a);
        let eps = cfg.draw_noise(stream);
        let r = full.r2().sqrt();
        let a1 = a[0];
        let a2 = if r > 0.0 { dot(&a[1..], &full.x[1..]) / r } else { 0.0 };
        let rest: f64 = a[1..].iter().map(|v| v * v).sum();
        let w = (rest - a2 * a2).max(0.0);
        red = reduced_step(red, &ReducedDraws { a1, a2, w, eps }, cfg, f)?;
        sgd_step_full(&mut full, &a, eps, cfg, f);
        let s = full.reduced();
        worst = worst.max((s.m - red.m).abs() + (s.q - red.q).abs());
    }
    Ok(worst)
}
