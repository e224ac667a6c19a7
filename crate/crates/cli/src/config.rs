use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use hdsgd_core::activation::{purify, Activation, MAX_HERMITE_DEGREE};
use hdsgd_core::dynamics::{ModelFunctions, SigmaVariant, SummaryPoint};
use hdsgd_core::quadrature::{QuadratureRule, MAX_ORDER};
use hdsgd_core::sgd::{Mode, NoiseLaw, SimConfig};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

pub const ARTIFACT_NAME: &str = env!("CARGO_PKG_NAME");
pub const ARTIFACT_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Kind {
    Hermite,
    Ode,
    Sde,
    Sgd,
    Compare,
    FixedPoint,
    OuCheck,
    Diagnose,
}

impl Kind {
    pub fn name(self) -> &'static str {
        match self {
            Kind::Hermite => "hermite",
            Kind::Ode => "ode",
            Kind::Sde => "sde",
            Kind::Sgd => "sgd",
            Kind::Compare => "compare",
            Kind::FixedPoint => "fixed-point",
            Kind::OuCheck => "ou-check",
            Kind::Diagnose => "diagnose",
        }
    }
}

impl fmt::Display for Kind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Direct,
    TheoremStatement,
    ProofForm,
}

impl From<Variant> for SigmaVariant {
    fn from(v: Variant) -> Self {
        match v {
            Variant::Direct => SigmaVariant::Direct,
            Variant::TheoremStatement => SigmaVariant::TheoremStatement,
            Variant::ProofForm => SigmaVariant::ProofForm,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Law {
    Gaussian,
    TwoPoint,
}

impl From<Law> for NoiseLaw {
    fn from(l: Law) -> Self {
        match l {
            Law::Gaussian => NoiseLaw::Gaussian,
            Law::TwoPoint => NoiseLaw::TwoPoint,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChainMode {
    Full,
    Reduced,
}

impl From<ChainMode> for Mode {
    fn from(m: ChainMode) -> Self {
        match m {
            ChainMode::Full => Mode::Full,
            ChainMode::Reduced => Mode::Reduced,
        }
    }
}

/// `label` is a built-in (`identity`, `h<k>`, `tanh`, `erf`, `zero`) or
/// `purified`, which combines the built-ins `g1` and `g2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ActivationSpec {
    pub label: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub g1: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub g2: Option<String>,
}

impl Default for ActivationSpec {
    fn default() -> Self {
        Self {
            label: "purified".into(),
            g1: Some("tanh".into()),
            g2: Some("erf".into()),
        }
    }
}

impl ActivationSpec {
    pub fn build(&self, rule: &QuadratureRule) -> CliResult<Activation> {
        match self.label.as_str() {
            "purified" => {
                let g1 = Activation::builtin(self.g1.as_deref().unwrap_or("tanh"))?;
                let g2 = Activation::builtin(self.g2.as_deref().unwrap_or("erf"))?;
                Ok(purify(&g1, &g2, rule)?)
            }
            label => {
                if self.g1.is_some() || self.g2.is_some() {
                    return Err(CliError::Config(format!(
                        "activation `{label}` takes no g1/g2 components"
                    )));
                }
                Ok(Activation::builtin(label)?)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiagnoseSpec {
    pub m: f64,
    pub r2: f64,
    pub n_samples: usize,
}

impl Default for DiagnoseSpec {
    fn default() -> Self {
        Self {
            m: 0.0,
            r2: 1.0,
            n_samples: 100_000,
        }
    }
}

/// Build stamp written into every manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArtifactInfo {
    pub name: String,
    pub version: String,
    pub generator: String,
}

impl ArtifactInfo {
    pub fn current() -> Self {
        Self {
            name: ARTIFACT_NAME.into(),
            version: ARTIFACT_VERSION.into(),
            generator: hdsgd_core::rng::GENERATOR.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kind: Option<Kind>,
    pub seed: u64,
    pub out: PathBuf,
    pub noise_var: f64,
    pub noise_law: Law,
    pub n: usize,
    pub n_list: Vec<usize>,
    pub c_delta: f64,
    pub t_end: f64,
    pub dt: f64,
    pub n_seeds: usize,
    pub quadrature_order: usize,
    pub sigma_variant: Variant,
    pub mode: ChainMode,
    pub init_sigma2: f64,
    pub init_at_fixed_point: bool,
    pub m0: f64,
    pub r2_0: f64,
    pub m_tilde0: f64,
    /// Empty means a kind-specific default.
    pub checkpoints: Vec<f64>,
    pub k_max: usize,
    pub compare_tol: f64,
    pub acceptance: bool,
    pub activation: ActivationSpec,
    pub diagnose: DiagnoseSpec,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub artifact: Option<ArtifactInfo>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            kind: None,
            seed: 0,
            out: PathBuf::from("out"),
            noise_var: 0.1,
            noise_law: Law::Gaussian,
            n: 1024,
            n_list: vec![256, 1024],
            c_delta: 1.0,
            t_end: 1.0,
            dt: 1e-3,
            n_seeds: 100,
            quadrature_order: 512,
            sigma_variant: Variant::Direct,
            mode: ChainMode::Reduced,
            init_sigma2: 1.0,
            init_at_fixed_point: false,
            m0: 0.0,
            r2_0: 1.0,
            m_tilde0: 0.0,
            checkpoints: Vec::new(),
            k_max: 10,
            compare_tol: 0.05,
            acceptance: false,
            activation: ActivationSpec::default(),
            diagnose: DiagnoseSpec::default(),
            artifact: None,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> CliResult<Self> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> CliResult<String> {
        toml::to_string(self).map_err(|e| CliError::Config(e.to_string()))
    }

    /// Checkpoints, or the kind's default when none are given.
    pub fn checkpoints_or_default(&self, kind: Kind) -> Vec<f64> {
        if !self.checkpoints.is_empty() {
            return self.checkpoints.clone();
        }
        match kind {
            Kind::OuCheck => {
                let v: Vec<f64> = [1.0, 2.0, 5.0].into_iter().filter(|t| *t <= self.t_end).collect();
                if v.is_empty() {
                    vec![self.t_end]
                } else {
                    v
                }
            }
            _ => (1..=100).map(|i| self.t_end * i as f64 / 100.0).collect(),
        }
    }

    fn sim_for(&self, n: usize) -> SimConfig {
        SimConfig {
            c_delta: self.c_delta,
            init_sigma2: self.init_sigma2,
            noise_var: self.noise_var,
            noise_law: self.noise_law.into(),
            ..SimConfig::new(n, self.t_end)
        }
    }

    /// Checks every field for `kind` and builds the model, before any
    /// experiment work starts.
    pub fn resolve(mut self, kind: Kind) -> CliResult<Resolved> {
        match self.kind {
            Some(k) if k != kind => {
                return Err(CliError::Config(format!(
                    "config kind `{k}` does not match subcommand `{kind}`"
                )))
            }
            _ => self.kind = Some(kind),
        }
        if let Some(a) = &self.artifact {
            if a.version != ARTIFACT_VERSION {
                eprintln!(
                    "warning: manifest written by version {}, running {}",
                    a.version, ARTIFACT_VERSION
                );
            }
        }
        self.artifact = None;

        let bad = |what: &str, v: f64| CliError::Config(format!("{what} must be positive and finite, got {v}"));
        let positive = |v: f64| v > 0.0 && v.is_finite();
        if !(self.noise_var >= 0.0 && self.noise_var.is_finite()) {
            return Err(CliError::Config(format!(
                "noise_var must be >= 0, got {}",
                self.noise_var
            )));
        }
        for (what, v) in [
            ("c_delta", self.c_delta),
            ("t_end", self.t_end),
            ("dt", self.dt),
            ("compare_tol", self.compare_tol),
        ] {
            if !positive(v) {
                return Err(bad(what, v));
            }
        }
        if self.dt > self.t_end {
            return Err(CliError::Config(format!(
                "dt = {} exceeds t_end = {}",
                self.dt, self.t_end
            )));
        }
        if !(self.init_sigma2 >= 0.0 && self.init_sigma2.is_finite()) {
            return Err(CliError::Config(format!(
                "init_sigma2 must be >= 0, got {}",
                self.init_sigma2
            )));
        }
        if !(self.r2_0 > 0.0 && self.r2_0.is_finite()) {
            return Err(bad("r2_0", self.r2_0));
        }
        for (what, v) in [("m0", self.m0), ("m_tilde0", self.m_tilde0)] {
            if !v.is_finite() {
                return Err(CliError::Config(format!("{what} must be finite, got {v}")));
            }
        }
        if self.quadrature_order == 0 || self.quadrature_order > MAX_ORDER {
            return Err(CliError::Config(format!(
                "quadrature_order must lie in 1..={MAX_ORDER}, got {}",
                self.quadrature_order
            )));
        }
        if self.k_max > MAX_HERMITE_DEGREE {
            return Err(CliError::Config(format!(
                "k_max must be <= {MAX_HERMITE_DEGREE}, got {}",
                self.k_max
            )));
        }
        if self.quadrature_order < self.k_max.max(hdsgd_core::activation::EXPONENT_SCAN) + 10 {
            return Err(CliError::Config(format!(
                "quadrature_order {} too small for Hermite scans up to degree {}",
                self.quadrature_order,
                self.k_max.max(hdsgd_core::activation::EXPONENT_SCAN)
            )));
        }
        if matches!(kind, Kind::Sde | Kind::Sgd | Kind::Compare | Kind::OuCheck) && self.n_seeds < 2 {
            return Err(CliError::Config(format!("n_seeds must be >= 2, got {}", self.n_seeds)));
        }
        for &t in &self.checkpoints {
            if !(t > 0.0 && t <= self.t_end) {
                return Err(CliError::Config(format!(
                    "checkpoint {t} outside (0, t_end = {}]",
                    self.t_end
                )));
            }
        }
        if self.checkpoints.windows(2).any(|w| w[1] <= w[0]) {
            return Err(CliError::Config("checkpoints must be strictly increasing".into()));
        }
        match kind {
            Kind::Sgd | Kind::OuCheck => self.sim_for(self.n).validate()?,
            Kind::Compare | Kind::Diagnose => {
                if self.n_list.is_empty() {
                    return Err(CliError::Config("n_list must not be empty".into()));
                }
                for &n in &self.n_list {
                    self.sim_for(n).validate()?;
                }
            }
            _ => {}
        }
        if kind == Kind::Diagnose {
            let d = &self.diagnose;
            if !(d.r2 >= 0.0 && d.r2.is_finite() && d.m.is_finite()) {
                return Err(CliError::Config(format!("diagnose point ({}, {}) invalid", d.m, d.r2)));
            }
            if d.n_samples < 2 {
                return Err(CliError::Config(format!(
                    "diagnose.n_samples must be >= 2, got {}",
                    d.n_samples
                )));
            }
        }

        let rule = Arc::new(QuadratureRule::gauss_hermite(self.quadrature_order)?);
        let activation = self.activation.build(&rule)?;
        let model = ModelFunctions::new(activation, self.noise_var, rule)?.with_step_scale(self.c_delta)?;
        Ok(Resolved {
            kind,
            config: self,
            model,
        })
    }
}

/// A validated config with its model built.
#[derive(Debug, Clone)]
pub struct Resolved {
    pub kind: Kind,
    pub config: ExperimentConfig,
    pub model: ModelFunctions,
}

impl Resolved {
    pub fn sim(&self, n: usize) -> SimConfig {
        self.config.sim_for(n)
    }

    pub fn diagnose_point(&self) -> SummaryPoint {
        SummaryPoint::new(self.config.diagnose.m, self.config.diagnose.r2)
    }

    /// Config echo plus build stamp; loading it reproduces the run.
    pub fn manifest(&self) -> CliResult<String> {
        let mut echo = self.config.clone();
        echo.artifact = Some(ArtifactInfo::current());
        echo.to_toml()
    }
}
