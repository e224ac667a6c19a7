//! Activations with closed-form first and second derivatives, their Hermite
//! expansion in L²(γ), and the information exponent.

use std::f64::consts::{FRAC_1_SQRT_2, PI};
use std::fmt;

use crate::error::{Error, Result};
use crate::quadrature::{expect_1d, QuadratureRule};

pub const MAX_HERMITE_DEGREE: usize = 64;

/// Highest coefficient index scanned by [`information_exponent`].
pub const EXPONENT_SCAN: usize = 16;

pub const DEFAULT_EXPONENT_TOL: f64 = 1e-8;

/// Value and first two derivatives at a point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Jet {
    pub value: f64,
    pub d1: f64,
    pub d2: f64,
}

#[derive(Debug, Clone, PartialEq)]
enum Shape {
    Zero,
    Identity,
    /// Orthonormal Hermite polynomial h_k.
    Hermite(usize),
    Tanh,
    /// erf(x / sqrt 2), i.e. 2Φ(x) - 1.
    GaussErf,
    Combination(Vec<(f64, Shape)>),
}

impl Shape {
    fn jet(&self, x: f64) -> Jet {
        match self {
            Shape::Zero => Jet {
                value: 0.0,
                d1: 0.0,
                d2: 0.0,
            },
            Shape::Identity => Jet {
                value: x,
                d1: 1.0,
                d2: 0.0,
            },
            Shape::Hermite(k) => hermite_jet(*k, x),
            Shape::Tanh => {
                let t = x.tanh();
                let s = 1.0 - t * t;
                Jet {
                    value: t,
                    d1: s,
                    d2: -2.0 * t * s,
                }
            }
            Shape::GaussErf => {
                let d1 = (2.0 / PI).sqrt() * (-0.5 * x * x).exp();
                Jet {
                    value: libm::erf(x * FRAC_1_SQRT_2),
                    d1,
                    d2: -x * d1,
                }
            }
            Shape::Combination(terms) => {
                let mut out = Jet {
                    value: 0.0,
                    d1: 0.0,
                    d2: 0.0,
                };
                for (c, s) in terms {
                    let j = s.jet(x);
                    out.value += c * j.value;
                    out.d1 += c * j.d1;
                    out.d2 += c * j.d2;
                }
                out
            }
        }
    }

    fn is_odd(&self) -> bool {
        match self {
            Shape::Zero | Shape::Identity | Shape::Tanh | Shape::GaussErf => true,
            Shape::Hermite(k) => k % 2 == 1,
            Shape::Combination(terms) => terms.iter().all(|(_, s)| s.is_odd()),
        }
    }

    fn is_even(&self) -> bool {
        match self {
            Shape::Zero => true,
            Shape::Hermite(k) => k % 2 == 0,
            Shape::Combination(terms) => terms.iter().all(|(_, s)| s.is_even()),
            _ => false,
        }
    }
}

/// A twice-differentiable activation f.
#[derive(Debug, Clone, PartialEq)]
pub struct Activation {
    shape: Shape,
    label: String,
    bound: Option<f64>,
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label)
    }
}

impl Activation {
    pub fn zero() -> Self {
        Self {
            shape: Shape::Zero,
            label: "zero".into(),
            bound: Some(0.0),
        }
    }

    pub fn identity() -> Self {
        Self {
            shape: Shape::Identity,
            label: "identity".into(),
            bound: None,
        }
    }

    /// Orthonormal Hermite polynomial h_k as an activation.
    pub fn hermite(k: usize) -> Result<Self> {
        if k > MAX_HERMITE_DEGREE {
            return Err(Error::Config(format!(
                "hermite degree {k} exceeds {MAX_HERMITE_DEGREE}"
            )));
        }
        Ok(Self {
            shape: Shape::Hermite(k),
            label: format!("h{k}"),
            bound: if k == 0 { Some(1.0) } else { None },
        })
    }

    pub fn tanh() -> Self {
        Self {
            shape: Shape::Tanh,
            label: "tanh".into(),
            bound: Some(1.0),
        }
    }

    /// erf(x / sqrt 2).
    pub fn gauss_erf() -> Self {
        Self {
            shape: Shape::GaussErf,
            label: "erf".into(),
            bound: Some(1.0),
        }
    }

    /// The bounded information-exponent-3 activation tanh - c erf(·/√2).
    pub fn purified_default(rule: &QuadratureRule) -> Result<Self> {
        purify(&Self::tanh(), &Self::gauss_erf(), rule)
    }

    /// Look up a built-in by label: `zero`, `identity`, `h<k>`, `tanh`, `erf`.
    /// `purified` needs a rule and goes through [`purify`].
    pub fn builtin(label: &str) -> Result<Self> {
        match label {
            "zero" => Ok(Self::zero()),
            "identity" => Ok(Self::identity()),
            "tanh" => Ok(Self::tanh()),
            "erf" => Ok(Self::gauss_erf()),
            _ => {
                if let Some(k) = label.strip_prefix('h').and_then(|d| d.parse::<usize>().ok()) {
                    Self::hermite(k)
                } else {
                    Err(Error::Config(format!("unknown activation `{label}`")))
                }
            }
        }
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn bound(&self) -> Option<f64> {
        self.bound
    }

    pub fn is_bounded(&self) -> bool {
        self.bound.is_some()
    }

    pub fn is_odd(&self) -> bool {
        self.shape.is_odd()
    }

    pub fn is_even(&self) -> bool {
        self.shape.is_even()
    }

    #[inline]
    pub fn jet(&self, x: f64) -> Jet {
        self.shape.jet(x)
    }

    #[inline]
    pub fn eval(&self, x: f64) -> f64 {
        self.shape.jet(x).value
    }

    #[inline]
    pub fn deriv1(&self, x: f64) -> f64 {
        self.shape.jet(x).d1
    }

    #[inline]
    pub fn deriv2(&self, x: f64) -> f64 {
        self.shape.jet(x).d2
    }
}

fn hermite_jet(k: usize, x: f64) -> Jet {
    // h_k' = sqrt(k) h_{k-1}, h_k'' = sqrt(k (k-1)) h_{k-2}
    let (hk, hk1, hk2) = hermite_triple(k, x);
    let kf = k as f64;
    Jet {
        value: hk,
        d1: kf.sqrt() * hk1,
        d2: (kf * (kf - 1.0)).max(0.0).sqrt() * hk2,
    }
}

/// (h_k, h_{k-1}, h_{k-2}) with out-of-range indices set to zero.
fn hermite_triple(k: usize, x: f64) -> (f64, f64, f64) {
    let mut prev2 = 0.0;
    let mut prev = 0.0;
    let mut cur = 1.0;
    for j in 0..k {
        let next = (x * cur - (j as f64).sqrt() * prev) / ((j + 1) as f64).sqrt();
        prev2 = prev;
        prev = cur;
        cur = next;
    }
    (cur, prev, prev2)
}

/// Orthonormal probabilists' Hermite polynomial h_k(x), k <= 64.
pub fn hermite_poly(k: usize, x: f64) -> Result<f64> {
    if k > MAX_HERMITE_DEGREE {
        return Err(Error::Config(format!(
            "hermite degree {k} exceeds {MAX_HERMITE_DEGREE}"
        )));
    }
    Ok(hermite_triple(k, x).0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct HermiteCoefficients {
    pub coefficients: Vec<f64>,
    pub truncation: usize,
    /// ‖f‖² minus the captured energy Σ a_k².
    pub tail_mass: f64,
}

/// a_k(f) = E[f(Z) h_k(Z)] for k = 0..=k_max.
pub fn hermite_coeffs(f: &Activation, k_max: usize, rule: &QuadratureRule) -> Result<HermiteCoefficients> {
    if k_max > MAX_HERMITE_DEGREE {
        return Err(Error::Config(format!(
            "truncation {k_max} exceeds {MAX_HERMITE_DEGREE}"
        )));
    }
    if rule.order() < k_max + 10 {
        return Err(Error::Config(format!(
            "quadrature order {} too small for truncation {k_max} (need >= {})",
            rule.order(),
            k_max + 10
        )));
    }
    let mut coefficients = vec![0.0; k_max + 1];
    let mut norm_sq = 0.0;
    for (x, w) in rule.iter() {
        let fx = f.eval(x);
        if !fx.is_finite() {
            return Err(Error::Evaluation {
                node: format!("{x}"),
                value: fx,
            });
        }
        norm_sq += w * fx * fx;
        // walk the recurrence once per node
        let mut prev = 0.0;
        let mut cur = 1.0;
        for (j, a) in coefficients.iter_mut().enumerate() {
            *a += w * fx * cur;
            let next = (x * cur - (j as f64).sqrt() * prev) / ((j + 1) as f64).sqrt();
            prev = cur;
            cur = next;
        }
    }
    let captured: f64 = coefficients.iter().map(|a| a * a).sum();
    Ok(HermiteCoefficients {
        coefficients,
        truncation: k_max,
        tail_mass: norm_sq - captured,
    })
}

/// Smallest k >= 1 with |a_k(f)| > tol, scanning up to k = 16.
pub fn information_exponent(f: &Activation, rule: &QuadratureRule, tol: f64) -> Result<usize> {
    if !(tol > 0.0) {
        return Err(Error::Config(format!("exponent tolerance {tol} must be positive")));
    }
    let coeffs = hermite_coeffs(f, EXPONENT_SCAN, rule)?;
    coeffs
        .coefficients
        .iter()
        .enumerate()
        .skip(1)
        .find(|(_, a)| a.abs() > tol)
        .map(|(k, _)| k)
        .ok_or_else(|| Error::ExponentOutOfRange {
            label: f.label().to_string(),
            max_k: EXPONENT_SCAN,
        })
}

/// f = g1 - c g2 with c = a1(g1) / a1(g2), so that a1(f) = 0.
///
/// Both inputs must be bounded and odd; the result is then bounded, odd, and
/// has a1 = a2 = 0.
pub fn purify(g1: &Activation, g2: &Activation, rule: &QuadratureRule) -> Result<Activation> {
    for g in [g1, g2] {
        if !g.is_bounded() || !g.is_odd() {
            return Err(Error::Config(format!(
                "purifier component `{}` must be bounded and odd",
                g.label()
            )));
        }
    }
    let a1_g1 = expect_1d(|x| x * g1.eval(x), rule)?;
    let a1_g2 = expect_1d(|x| x * g2.eval(x), rule)?;
    if a1_g2.abs() < 1e-10 {
        return Err(Error::DegeneratePurifier(a1_g2.abs()));
    }
    let c = a1_g1 / a1_g2;
    let bound = g1.bound.unwrap_or(0.0) + c.abs() * g2.bound.unwrap_or(0.0);
    Ok(Activation {
        shape: Shape::Combination(vec![(1.0, g1.shape.clone()), (-c, g2.shape.clone())]),
        label: format!("purified({},{})", g1.label(), g2.label()),
        bound: Some(bound),
    })
}

/// L²(γ) functionals entering the radial ODE and the volatility.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScalarFunctionals {
    /// ‖f‖² = E[f(Z)²]
    pub norm_f_sq: f64,
    /// ‖f'‖² = E[f'(Z)²]
    pub norm_fprime_sq: f64,
    /// ⟨f, f''⟩ = E[f(Z) f''(Z)]
    pub inner_f_fpp: f64,
    /// a0 = E[f(Z)]
    pub a0: f64,
}

impl ScalarFunctionals {
    /// E[Z² f(Z)²] via the second Stein identity: ‖f‖² + 2‖f'‖² + 2⟨f, f''⟩.
    pub fn second_moment_weighted(&self) -> f64 {
        self.norm_f_sq + 2.0 * self.norm_fprime_sq + 2.0 * self.inner_f_fpp
    }
}

pub fn scalar_functionals(f: &Activation, rule: &QuadratureRule) -> Result<ScalarFunctionals> {
    let mut out = ScalarFunctionals {
        norm_f_sq: 0.0,
        norm_fprime_sq: 0.0,
        inner_f_fpp: 0.0,
        a0: 0.0,
    };
    for (x, w) in rule.iter() {
        let j = f.jet(x);
        if !(j.value.is_finite() && j.d1.is_finite() && j.d2.is_finite()) {
            return Err(Error::Evaluation {
                node: format!("{x}"),
                value: j.value,
            });
        }
        out.norm_f_sq += w * j.value * j.value;
        out.norm_fprime_sq += w * j.d1 * j.d1;
        out.inner_f_fpp += w * j.value * j.d2;
        out.a0 += w * j.value;
    }
    Ok(out)
}
