//! Effective dynamics of the summary statistics (m, r⊥²) at step size 1/N.
//!
//! With s = a1·m + a2·r⊥ for independent standard Gaussians a1, a2:
//!
//! * population drift  F_m  = 2 E[a1 f'(s)(f(s) - f(a1))]
//!                     F_r2 = 4 r⊥ E[a2 f'(s)(f(s) - f(a1))]
//! * corrector         G_m  = 0
//!                     G_r2 = 4 E[f'(s)² ((f(s) - f(a1))² + C_ε)]
//! * effective drift   H    = -F + G
//!
//! These are the limits for step size δ = 1/N. For δ = c/N on the clock
//! t = kδ the corrector and the volatility scale by c; see
//! [`ModelFunctions::with_step_scale`].
//!
//! Near m = 0 the rescaled correlation m̃ = √N m follows
//! dm̃ = -θ(r⊥²) m̃ dt + √Σ11(r⊥²) dB with θ = 2 E[f'² + f f''](a2 r⊥).

use std::sync::Arc;

use crate::activation::{scalar_functionals, Activation, Jet, ScalarFunctionals};
use crate::error::{Error, Result};
use crate::quadrature::{expect_1d, QuadratureRule, ScaledRule};

/// Tolerance on |a0(f)| below which the m = 0 closed forms apply.
pub const CENTERED_TOL: f64 = 1e-12;

pub const DEFAULT_BRACKET: (f64, f64) = (1e-4, 25.0);

const BISECTION_TOL: f64 = 1e-10;
const BISECTION_MAX_ITER: usize = 200;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SummaryPoint {
    pub m: f64,
    pub r2: f64,
    pub m_tilde: Option<f64>,
}

impl SummaryPoint {
    pub fn new(m: f64, r2: f64) -> Self {
        Self { m, r2, m_tilde: None }
    }

    pub fn r_perp(&self) -> f64 {
        self.r2.max(0.0).sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SigmaVariant {
    /// 4 E[a1² f'²(a2 r⊥)((f(a2 r⊥) - f(a1))² + C_ε)], the defining expectation.
    Direct,
    /// Four times the expression under the square root in the SDE as stated.
    TheoremStatement,
    /// 4E[f'² f²] + 4(E[f'²] + C_ε)(‖f‖² + 2‖f'‖² + 2⟨f, f''⟩).
    ProofForm,
}

impl SigmaVariant {
    pub const ALL: [SigmaVariant; 3] = [
        SigmaVariant::Direct,
        SigmaVariant::TheoremStatement,
        SigmaVariant::ProofForm,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SigmaVariant::Direct => "direct",
            SigmaVariant::TheoremStatement => "theorem_statement",
            SigmaVariant::ProofForm => "proof_form",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown sigma variant `{s}`")))
    }
}

/// Mean-reversion rate, diffusion coefficient and stationary variance of an OU process.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OUParams {
    pub theta: f64,
    pub vol: f64,
    pub stationary_var: f64,
}

impl OUParams {
    pub fn new(theta: f64, vol: f64) -> Result<Self> {
        if !(theta > 0.0) {
            return Err(Error::InvariantViolation(format!(
                "OU mean-reversion rate must be positive, got {theta}"
            )));
        }
        Ok(Self {
            theta,
            vol,
            stationary_var: vol * vol / (2.0 * theta),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FixedPoint {
    pub r2_star: f64,
    pub residual: f64,
}

/// Which expectation an [`ModelFunctions::integrand`] closure represents.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Integrand {
    DriftM,
    DriftR2,
    CorrectorR2,
    /// Σ11 direct; evaluated at m = 0 regardless of the point's m.
    Sigma11,
}

impl Integrand {
    pub const ALL: [Integrand; 4] = [
        Integrand::DriftM,
        Integrand::DriftR2,
        Integrand::CorrectorR2,
        Integrand::Sigma11,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Integrand::DriftM => "F_m",
            Integrand::DriftR2 => "F_r2",
            Integrand::CorrectorR2 => "G_r2",
            Integrand::Sigma11 => "Sigma11",
        }
    }
}

/// One-dimensional expectations of f at scale r⊥, E[·(a2 r⊥)].
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RadialMoments {
    pub fp: f64,
    pub fp2: f64,
    pub fp2_f2: f64,
    pub fp2_f: f64,
    pub f_fpp: f64,
    pub f2: f64,
}

impl RadialMoments {
    /// E[f'² + f f''](a2 r⊥); θ is twice this.
    pub fn curvature(&self) -> f64 {
        self.fp2 + self.f_fpp
    }
}

#[derive(Debug, Clone, Copy)]
struct Bivariate {
    a1_term: f64,
    a2_term: f64,
    corr_term: f64,
}

/// An activation, the label-noise variance C_ε, and the quadrature rule used
/// for every expectation.
#[derive(Debug, Clone)]
pub struct ModelFunctions {
    activation: Activation,
    noise_var: f64,
    step_scale: f64,
    rule: Arc<QuadratureRule>,
    functionals: ScalarFunctionals,
    a1: f64,
    a2: f64,
    f_at_nodes: Vec<f64>,
}

impl ModelFunctions {
    pub fn new(activation: Activation, noise_var: f64, rule: Arc<QuadratureRule>) -> Result<Self> {
        if !(noise_var >= 0.0) || !noise_var.is_finite() {
            return Err(Error::Config(format!("noise variance must be >= 0, got {noise_var}")));
        }
        let functionals = scalar_functionals(&activation, &rule)?;
        let a1 = expect_1d(|x| activation.deriv1(x), &rule)?;
        let a2 = expect_1d(|x| activation.deriv2(x), &rule)? / 2f64.sqrt();
        let f_at_nodes = rule.nodes().iter().map(|&x| activation.eval(x)).collect();
        Ok(Self {
            activation,
            noise_var,
            step_scale: 1.0,
            rule,
            functionals,
            a1,
            a2,
            f_at_nodes,
        })
    }

    pub fn activation(&self) -> &Activation {
        &self.activation
    }

    pub fn noise_var(&self) -> f64 {
        self.noise_var
    }

    pub fn rule(&self) -> &QuadratureRule {
        &self.rule
    }

    pub fn functionals(&self) -> &ScalarFunctionals {
        &self.functionals
    }

    /// Copy with a different C_ε.
    pub fn with_noise_var(&self, noise_var: f64) -> Result<Self> {
        if !(noise_var >= 0.0) || !noise_var.is_finite() {
            return Err(Error::Config(format!("noise variance must be >= 0, got {noise_var}")));
        }
        Ok(Self {
            noise_var,
            ..self.clone()
        })
    }

    /// Copy for step size δ = c/N: corrector and volatility are multiplied by c.
    pub fn with_step_scale(&self, c: f64) -> Result<Self> {
        if !(c > 0.0) || !c.is_finite() {
            return Err(Error::Config(format!("step scale must be positive, got {c}")));
        }
        Ok(Self {
            step_scale: c,
            ..self.clone()
        })
    }

    pub fn step_scale(&self) -> f64 {
        self.step_scale
    }

    /// Hermite coefficient a1(f) = E[f'(Z)].
    pub fn hermite_a1(&self) -> f64 {
        self.a1
    }

    /// Hermite coefficient a2(f) = E[f''(Z)]/√2.
    pub fn hermite_a2(&self) -> f64 {
        self.a2
    }

    pub fn is_centered(&self) -> bool {
        self.functionals.a0.abs() <= CENTERED_TOL
    }

    fn check_point(p: &SummaryPoint) -> Result<()> {
        if !(p.r2 > 0.0) || !p.r2.is_finite() || !p.m.is_finite() {
            return Err(Error::Domain(format!(
                "summary point (m = {}, r2 = {}) needs finite m and r2 > 0",
                p.m, p.r2
            )));
        }
        Ok(())
    }

    fn check_r2(r2: f64) -> Result<()> {
        Self::check_point(&SummaryPoint::new(0.0, r2))
    }

    fn jets_at_scale(&self, r: f64) -> Vec<Jet> {
        self.rule.nodes().iter().map(|&z| self.activation.jet(z * r)).collect()
    }

    /// One tensor-grid pass producing the three bivariate expectations.
    fn bivariate(&self, p: &SummaryPoint) -> Result<Bivariate> {
        Self::check_point(p)?;
        let r = p.r_perp();
        let nodes = self.rule.nodes();
        let weights = self.rule.weights();
        let c = self.noise_var;
        let scaled = if p.m == 0.0 { Some(self.jets_at_scale(r)) } else { None };

        let mut out = Bivariate {
            a1_term: 0.0,
            a2_term: 0.0,
            corr_term: 0.0,
        };
        for (i, (&a1, &w1)) in nodes.iter().zip(weights).enumerate() {
            let fa1 = self.f_at_nodes[i];
            let (mut t1, mut t2, mut t3) = (0.0, 0.0, 0.0);
            for (j, (&a2, &w2)) in nodes.iter().zip(weights).enumerate() {
                let jet = match &scaled {
                    Some(js) => js[j],
                    None => self.activation.jet(a1 * p.m + a2 * r),
                };
                let diff = jet.value - fa1;
                let core = jet.d1 * diff;
                t1 += w2 * core;
                t2 += w2 * a2 * core;
                t3 += w2 * jet.d1 * jet.d1 * (diff * diff + c);
            }
            out.a1_term += w1 * a1 * t1;
            out.a2_term += w1 * t2;
            out.corr_term += w1 * t3;
        }
        if !(out.a1_term.is_finite() && out.a2_term.is_finite() && out.corr_term.is_finite()) {
            return Err(Error::Evaluation {
                node: format!("tensor grid at (m = {}, r2 = {})", p.m, p.r2),
                value: f64::NAN,
            });
        }
        Ok(out)
    }

    /// (F_m, F_r2).
    pub fn population_drift(&self, p: &SummaryPoint) -> Result<(f64, f64)> {
        let b = self.bivariate(p)?;
        Ok((2.0 * b.a1_term, 4.0 * p.r_perp() * b.a2_term))
    }

    /// (G_m, G_r2); G_m vanishes identically.
    pub fn corrector(&self, p: &SummaryPoint) -> Result<(f64, f64)> {
        let b = self.bivariate(p)?;
        Ok((0.0, 4.0 * self.step_scale * b.corr_term))
    }

    /// (H_m, H_r2) = -F + G, the right-hand side of the ballistic ODE.
    pub fn effective_drift(&self, p: &SummaryPoint) -> Result<(f64, f64)> {
        let b = self.bivariate(p)?;
        let r = p.r_perp();
        Ok((
            -2.0 * b.a1_term,
            -4.0 * r * b.a2_term + 4.0 * self.step_scale * b.corr_term,
        ))
    }

    /// (∂_m φ, ∂_{r⊥²} φ) for the population loss φ(m, r⊥²).
    pub fn population_grad_coeffs(&self, p: &SummaryPoint) -> Result<(f64, f64)> {
        let b = self.bivariate(p)?;
        Ok((2.0 * b.a1_term, b.a2_term / p.r_perp()))
    }

    /// Evaluated with [`ScaledRule`], so accurate for large r⊥ as well.
    pub fn radial_moments(&self, r2: f64) -> Result<RadialMoments> {
        Self::check_r2(r2)?;
        let mut m = RadialMoments::default();
        for (x, w) in ScaledRule::new(r2.sqrt())?.iter() {
            let j = self.activation.jet(x);
            let fp2 = j.d1 * j.d1;
            m.fp += w * j.d1;
            m.fp2 += w * fp2;
            m.fp2_f2 += w * fp2 * j.value * j.value;
            m.fp2_f += w * fp2 * j.value;
            m.f_fpp += w * j.value * j.d2;
            m.f2 += w * j.value * j.value;
        }
        if !(m.fp2.is_finite() && m.fp2_f2.is_finite() && m.f_fpp.is_finite()) {
            return Err(Error::Evaluation {
                node: format!("radial grid at r2 = {r2}"),
                value: f64::NAN,
            });
        }
        Ok(m)
    }

    /// dm/dt at m = 0 after Stein reduction: 2 a1(f) E[f'(a2 r⊥)].
    pub fn stein_dm_dt_m0(&self, r2: f64) -> Result<f64> {
        Ok(2.0 * self.a1 * self.radial_moments(r2)?.fp)
    }

    /// Closed-form radial ODE at m = 0:
    /// 4E[f'²](C_ε + ‖f‖² - r⊥²) + 4E[f'² f²] - 4 r⊥² E[f'' f], all at a2 r⊥.
    ///
    /// Only valid for centered f (a0 = 0).
    pub fn ode_rhs_m0(&self, r2: f64) -> Result<f64> {
        if !self.is_centered() {
            return Err(Error::ClosedFormInapplicable(format!(
                "a0({}) = {:e} != 0; use effective_drift at m = 0",
                self.activation.label(),
                self.functionals.a0
            )));
        }
        let m = self.radial_moments(r2)?;
        let norm = self.functionals.norm_f_sq;
        let c = self.step_scale;
        Ok(4.0 * m.fp2 * (c * (self.noise_var + norm) - r2) + 4.0 * c * m.fp2_f2 - 4.0 * r2 * m.f_fpp)
    }

    /// dr⊥²/dt at m = 0, via the closed form when it applies.
    pub fn radial_rhs(&self, r2: f64) -> Result<f64> {
        if self.is_centered() {
            self.ode_rhs_m0(r2)
        } else {
            Ok(self.effective_drift(&SummaryPoint::new(0.0, r2))?.1)
        }
    }

    /// Drift of m̃: -2 m̃ E[f'² + f f''](a2 r⊥).
    pub fn rescaled_drift_mtilde(&self, m_tilde: f64, r2: f64) -> Result<f64> {
        Ok(-2.0 * m_tilde * self.radial_moments(r2)?.curvature())
    }

    /// Σ11(r⊥²) for the requested variant.
    pub fn volatility_sigma11(&self, r2: f64, variant: SigmaVariant) -> Result<f64> {
        Self::check_r2(r2)?;
        let base = match variant {
            SigmaVariant::Direct => self.sigma11_direct(r2),
            SigmaVariant::TheoremStatement => {
                let m = self.radial_moments(r2)?;
                let s = self.functionals.second_moment_weighted();
                Ok(4.0 * (m.fp2_f2 + m.f2 * s))
            }
            SigmaVariant::ProofForm => {
                let m = self.radial_moments(r2)?;
                let s = self.functionals.second_moment_weighted();
                Ok(4.0 * m.fp2_f2 + 4.0 * (m.fp2 + self.noise_var) * s)
            }
        }?;
        Ok(self.step_scale * base)
    }

    /// Gauss-Hermite in a1, scaled trapezoid in a2 r⊥.
    fn sigma11_direct(&self, r2: f64) -> Result<f64> {
        let radial: Vec<(Jet, f64)> = ScaledRule::new(r2.sqrt())?
            .iter()
            .map(|(x, w)| (self.activation.jet(x), w))
            .collect();
        let c = self.noise_var;
        let mut acc = 0.0;
        for (i, (a1, w1)) in self.rule.iter().enumerate() {
            let fa1 = self.f_at_nodes[i];
            let mut inner = 0.0;
            for &(jet, w2) in &radial {
                let diff = jet.value - fa1;
                inner += w2 * jet.d1 * jet.d1 * (diff * diff + c);
            }
            acc += w1 * a1 * a1 * inner;
        }
        if !acc.is_finite() {
            return Err(Error::Evaluation {
                node: format!("sigma11 grid at r2 = {r2}"),
                value: acc,
            });
        }
        Ok(4.0 * acc)
    }

    /// Σ11 direct, expanded with independence and Gaussian integration by parts:
    /// 4E[f'²f²] - 8(a0 + √2 a2) E[f'² f] + 4(‖f‖² + 2‖f'‖² + 2⟨f, f''⟩ + C_ε) E[f'²].
    /// Exact for every f; uses only one-dimensional sums.
    pub fn sigma11_stein_expanded(&self, r2: f64) -> Result<f64> {
        let m = self.radial_moments(r2)?;
        let fs = &self.functionals;
        let e_z2_f = fs.a0 + 2f64.sqrt() * self.a2;
        let base =
            4.0 * m.fp2_f2 - 8.0 * e_z2_f * m.fp2_f + 4.0 * (fs.second_moment_weighted() + self.noise_var) * m.fp2;
        Ok(self.step_scale * base)
    }

    /// Root of the radial ODE at m = 0 by bisection on `bracket`.
    pub fn fixed_point(&self, bracket: (f64, f64)) -> Result<FixedPoint> {
        let (mut lo, mut hi) = bracket;
        if !(lo > 0.0 && hi > lo) {
            return Err(Error::Config(format!("invalid bracket ({lo}, {hi})")));
        }
        let rhs_lo = self.radial_rhs(lo)?;
        let rhs_hi = self.radial_rhs(hi)?;
        if rhs_lo == 0.0 {
            return Ok(FixedPoint {
                r2_star: lo,
                residual: 0.0,
            });
        }
        if rhs_hi == 0.0 {
            return Ok(FixedPoint {
                r2_star: hi,
                residual: 0.0,
            });
        }
        if rhs_lo.signum() == rhs_hi.signum() {
            return Err(Error::NoFixedPoint { lo, hi, rhs_lo, rhs_hi });
        }
        let lo_sign = rhs_lo.signum();
        let mut best = if rhs_lo.abs() < rhs_hi.abs() {
            FixedPoint {
                r2_star: lo,
                residual: rhs_lo,
            }
        } else {
            FixedPoint {
                r2_star: hi,
                residual: rhs_hi,
            }
        };
        for _ in 0..BISECTION_MAX_ITER {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            let val = self.radial_rhs(mid)?;
            if val.abs() < best.residual.abs() {
                best = FixedPoint {
                    r2_star: mid,
                    residual: val,
                };
            }
            if val.abs() <= BISECTION_TOL {
                break;
            }
            if val.signum() == lo_sign {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Ok(best)
    }

    /// OU law of m̃ with r⊥² frozen at the fixed point; volatility from the
    /// direct Σ11.
    pub fn ou_params(&self, fp: &FixedPoint) -> Result<OUParams> {
        let m = self.radial_moments(fp.r2_star)?;
        let theta = 2.0 * m.curvature();
        let sigma = self.volatility_sigma11(fp.r2_star, SigmaVariant::Direct)?;
        OUParams::new(theta, sigma.max(0.0).sqrt())
    }

    /// The integrand whose Gaussian expectation over (a1, a2) is the named
    /// coefficient at `p`, prefactors included.
    pub fn integrand(&self, kind: Integrand, p: &SummaryPoint) -> impl Fn(f64, f64) -> f64 + '_ {
        let m = p.m;
        let r = p.r_perp();
        let c = self.noise_var;
        let scale = self.step_scale;
        let f = &self.activation;
        move |a1: f64, a2: f64| {
            let fa1 = f.eval(a1);
            match kind {
                Integrand::DriftM => {
                    let j = f.jet(a1 * m + a2 * r);
                    2.0 * a1 * j.d1 * (j.value - fa1)
                }
                Integrand::DriftR2 => {
                    let j = f.jet(a1 * m + a2 * r);
                    4.0 * r * a2 * j.d1 * (j.value - fa1)
                }
                Integrand::CorrectorR2 => {
                    let j = f.jet(a1 * m + a2 * r);
                    let d = j.value - fa1;
                    4.0 * scale * j.d1 * j.d1 * (d * d + c)
                }
                Integrand::Sigma11 => {
                    let j = f.jet(a2 * r);
                    let d = j.value - fa1;
                    4.0 * scale * a1 * a1 * j.d1 * j.d1 * (d * d + c)
                }
            }
        }
    }

    /// The coefficient named by `kind`, from the fast evaluation paths.
    pub fn coefficient(&self, kind: Integrand, p: &SummaryPoint) -> Result<f64> {
        match kind {
            Integrand::DriftM => Ok(self.population_drift(p)?.0),
            Integrand::DriftR2 => Ok(self.population_drift(p)?.1),
            Integrand::CorrectorR2 => Ok(self.corrector(p)?.1),
            Integrand::Sigma11 => self.volatility_sigma11(p.r2, SigmaVariant::Direct),
        }
    }
}
