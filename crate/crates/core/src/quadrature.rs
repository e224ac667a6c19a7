//! Gauss-Hermite quadrature against the standard Gaussian measure, and a
//! Monte Carlo estimator used as an independent check on it.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::rng::RandomStream;

pub const MAX_ORDER: usize = 512;

/// Default order for drift, corrector and volatility evaluations.
pub const DEFAULT_ORDER: usize = 512;

/// Nodes and weights for E[g(Z)], Z ~ N(0, 1). Weights sum to one.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadratureRule {
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

impl QuadratureRule {
    /// Probabilists' Gauss-Hermite rule of the given order.
    ///
    /// The Jacobi matrix of the monic recurrence He_{k+1} = x He_k - k He_{k-1}
    /// has zero diagonal and off-diagonal sqrt(k). Its eigenvalues are the
    /// nodes, polished by Newton steps; weights come from the Christoffel
    /// function.
    pub fn gauss_hermite(order: usize) -> Result<Self> {
        if order == 0 || order > MAX_ORDER {
            return Err(Error::Config(format!(
                "quadrature order {order} outside 1..={MAX_ORDER}"
            )));
        }
        if order == 1 {
            return Ok(Self {
                nodes: vec![0.0],
                weights: vec![1.0],
            });
        }

        let mut jacobi = DMatrix::<f64>::zeros(order, order);
        for k in 1..order {
            let b = (k as f64).sqrt();
            jacobi[(k - 1, k)] = b;
            jacobi[(k, k - 1)] = b;
        }
        let mut pairs: Vec<(f64, f64)> = jacobi
            .symmetric_eigenvalues()
            .iter()
            .map(|&x| christoffel(order, x))
            .collect();
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));

        // Enforce the exact reflection symmetry of the rule.
        let mut nodes = vec![0.0; order];
        let mut weights = vec![0.0; order];
        for i in 0..order {
            let j = order - 1 - i;
            let x = 0.5 * (pairs[j].0 - pairs[i].0);
            let w = 0.5 * (pairs[i].1 + pairs[j].1);
            nodes[i] = -x;
            nodes[j] = x;
            weights[i] = w;
            weights[j] = w;
        }
        if order % 2 == 1 {
            nodes[order / 2] = 0.0;
        }
        let total: f64 = weights.iter().sum();
        for w in &mut weights {
            *w /= total;
        }
        Ok(Self { nodes, weights })
    }

    pub fn order(&self) -> usize {
        self.nodes.len()
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn iter(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.nodes.iter().copied().zip(self.weights.iter().copied())
    }
}

/// Sum of w_i g(x_i); approximates E[g(Z)].
pub fn expect_1d<G>(g: G, rule: &QuadratureRule) -> Result<f64>
where
    G: Fn(f64) -> f64,
{
    let mut acc = 0.0;
    for (x, w) in rule.iter() {
        let v = g(x);
        if !v.is_finite() {
            return Err(Error::Evaluation {
                node: format!("{x}"),
                value: v,
            });
        }
        acc += w * v;
    }
    Ok(acc)
}

/// Trapezoid rule for E[g(s Z)], Z ~ N(0, 1), on the variable x = s Z.
///
/// Gauss-Hermite nodes in Z are too sparse once g(s z) varies on a scale
/// much finer than 1, e.g. tanh(s z) for s around 5. Here the spacing is
/// min(s, 1)/8 in x over |x| <= 12 s, which resolves both the Gaussian and
/// any feature of g on the unit scale; for g analytic in a strip around the
/// real axis the error decays like exp(-2 pi d / h).
#[derive(Debug, Clone)]
pub struct ScaledRule {
    scale: f64,
    points: Vec<(f64, f64)>,
}

impl ScaledRule {
    pub fn new(scale: f64) -> Result<Self> {
        if !(scale > 0.0) || !scale.is_finite() {
            return Err(Error::Domain(format!("scale must be positive, got {scale}")));
        }
        let h = scale.min(1.0) / 8.0;
        let half = (12.0 * scale / h).ceil() as i64;
        let norm = h / (scale * (2.0 * std::f64::consts::PI).sqrt());
        let points = (-half..=half)
            .map(|k| {
                let x = k as f64 * h;
                let u = x / scale;
                (x, norm * (-0.5 * u * u).exp())
            })
            .collect();
        Ok(Self { scale, points })
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// (x, w) pairs with x = s z on the grid.
    pub fn iter(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.points.iter().copied()
    }

    pub fn expect<G>(&self, g: G) -> Result<f64>
    where
        G: Fn(f64) -> f64,
    {
        let mut acc = 0.0;
        for (x, w) in self.iter() {
            let v = g(x);
            if !v.is_finite() {
                return Err(Error::Evaluation {
                    node: format!("{x}"),
                    value: v,
                });
            }
            acc += w * v;
        }
        Ok(acc)
    }
}

/// Tensor-product rule for E[g(Z1, Z2)] with independent standard Gaussians.
pub fn expect_2d<G>(g: G, rule: &QuadratureRule) -> Result<f64>
where
    G: Fn(f64, f64) -> f64,
{
    let mut acc = 0.0;
    for (x, wx) in rule.iter() {
        let mut inner = 0.0;
        for (y, wy) in rule.iter() {
            let v = g(x, y);
            if !v.is_finite() {
                return Err(Error::Evaluation {
                    node: format!("({x}, {y})"),
                    value: v,
                });
            }
            inner += wy * v;
        }
        acc += wx * inner;
    }
    Ok(acc)
}

/// ln|h_{n-1}(x)|, and h_n(x) / h_{n-1}(x), for orthonormal Hermite
/// polynomials, with rescaling so that large |x| cannot overflow.
fn scaled_hermite(n: usize, x: f64) -> (f64, f64) {
    let (mut prev, mut cur, mut log_scale) = (0.0f64, 1.0f64, 0.0f64);
    for k in 0..n {
        let next = (x * cur - (k as f64).sqrt() * prev) / ((k + 1) as f64).sqrt();
        prev = cur;
        cur = next;
        if cur.abs() > 1e100 {
            prev *= 1e-100;
            cur *= 1e-100;
            log_scale += 100.0 * std::f64::consts::LN_10;
        }
    }
    (prev.abs().ln() + log_scale, cur / prev)
}

/// Newton-polished node and its weight 1 / (n h_{n-1}(x)^2).
///
/// Eigenvector weights carry absolute errors near machine epsilon, which swamp
/// the true weights at the outer nodes of high-order rules.
fn christoffel(n: usize, x0: f64) -> (f64, f64) {
    let mut x = x0;
    for _ in 0..3 {
        // h_n' = sqrt(n) h_{n-1}
        let (_, ratio) = scaled_hermite(n, x);
        let dx = ratio / (n as f64).sqrt();
        x -= dx;
        if dx.abs() <= 1e-15 * x.abs().max(1.0) {
            break;
        }
    }
    let (log_p, _) = scaled_hermite(n, x);
    (x, (-(n as f64).ln() - 2.0 * log_p).exp())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McEstimate {
    pub mean: f64,
    pub std_err: f64,
}

impl McEstimate {
    /// |value - mean| measured in standard errors.
    pub fn z_score(&self, value: f64) -> f64 {
        if self.std_err == 0.0 {
            if value == self.mean {
                0.0
            } else {
                f64::INFINITY
            }
        } else {
            (value - self.mean).abs() / self.std_err
        }
    }
}

/// Monte Carlo mean and standard error of g over i.i.d. standard Gaussian
/// vectors of dimension `dim` (1 or 2).
pub fn mc_expect<G>(g: G, dim: usize, n_samples: usize, stream: &mut RandomStream) -> Result<McEstimate>
where
    G: Fn(&[f64]) -> f64,
{
    if !(1..=2).contains(&dim) {
        return Err(Error::Config(format!("mc_expect dimension {dim} not in {{1, 2}}")));
    }
    if n_samples < 100 {
        return Err(Error::SampleSize {
            got: n_samples,
            min: 100,
        });
    }
    let mut z = [0.0; 2];
    // Welford
    let mut mean = 0.0;
    let mut m2 = 0.0;
    for i in 0..n_samples {
        stream.fill_normal(&mut z[..dim]);
        let v = g(&z[..dim]);
        if !v.is_finite() {
            return Err(Error::Evaluation {
                node: format!("{:?}", &z[..dim]),
                value: v,
            });
        }
        let delta = v - mean;
        mean += delta / (i + 1) as f64;
        m2 += delta * (v - mean);
    }
    let n = n_samples as f64;
    let var = m2 / (n - 1.0);
    Ok(McEstimate {
        mean,
        std_err: (var / n).sqrt(),
    })
}

/// E[Z^k] for Z ~ N(0, 1): zero for odd k, (k-1)!! for even k.
pub fn gaussian_moment(k: u32) -> f64 {
    if k % 2 == 1 {
        return 0.0;
    }
    let mut acc = 1.0;
    let mut j = k as i64 - 1;
    while j > 1 {
        acc *= j as f64;
        j -= 2;
    }
    acc
}
