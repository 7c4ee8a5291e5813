//! JSON configuration: schema, validation and the smoke-scale reduction.

use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize};
use thiserror::Error;

use crate::ald::TauLevel;
use crate::design::{
    CovariateDesign, CovariateSpace, FamilyKind, Norm, RepeatRule, ThetaFamily, DEFAULT_SUP_RESOLUTION,
};
use crate::posterior::GridPrior;
use crate::truth::{ConditionalTrueDensity, TrueDensity};

pub const SMOKE_MAX_N: usize = 200;
pub const SMOKE_MAX_REPLICATIONS: usize = 5;
const SMOKE_MAX_POINTS_1D: usize = 512;
const SMOKE_MAX_POINTS_PER_DIM: usize = 17;

#[derive(Debug, Error, Clone, PartialEq)]
#[error("{field}: {message}")]
pub struct ConfigError {
    /// Dotted path of the offending key, or `"-"` when the document itself is unreadable.
    pub field: String,
    pub message: String,
}

impl ConfigError {
    pub fn new(field: impl Into<String>, message: impl Into<String>) -> Self {
        ConfigError { field: field.into(), message: message.into() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    Iid,
    Inid,
}

impl Scenario {
    pub fn as_str(self) -> &'static str {
        match self {
            Scenario::Iid => "iid",
            Scenario::Inid => "inid",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scale {
    Smoke,
    Full,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConditionalSpec {
    /// Always `"conditional"`.
    pub kind: String,
    pub noise: TrueDensity,
    pub scale_intercept: f64,
    pub scale_slope: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(untagged)]
pub enum TrueModelSpec {
    Marginal(TrueDensity),
    Conditional(ConditionalSpec),
}

impl<'de> Deserialize<'de> for TrueModelSpec {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let v = serde_json::Value::deserialize(d)?;
        let conditional = v.get("kind").and_then(|k| k.as_str()) == Some("conditional");
        let located = |e: serde_path_to_error::Error<serde_json::Error>| {
            let path = e.path().to_string();
            if path == "." {
                D::Error::custom(e.into_inner())
            } else {
                D::Error::custom(format!("{path}: {}", e.into_inner()))
            }
        };
        if conditional {
            serde_path_to_error::deserialize(v).map(TrueModelSpec::Conditional).map_err(located)
        } else {
            serde_path_to_error::deserialize(v).map(TrueModelSpec::Marginal).map_err(located)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PriorSpec {
    Uniform { lo: f64, hi: f64, points: usize },
    TruncatedGaussian { mean: f64, sd: f64, lo: f64, hi: f64, points: usize },
    Discrete { atoms: Vec<Vec<f64>>, weights: Vec<f64> },
    PointMass { atom: Vec<f64> },
    UniformBox { bounds: Vec<(f64, f64)>, points_per_dim: Vec<usize> },
}

impl PriorSpec {
    pub fn build(&self) -> Result<GridPrior, ConfigError> {
        let p = match self {
            PriorSpec::Uniform { lo, hi, points } => GridPrior::uniform_1d(*lo, *hi, *points),
            PriorSpec::TruncatedGaussian { mean, sd, lo, hi, points } => {
                GridPrior::truncated_gaussian_1d(*mean, *sd, *lo, *hi, *points)
            }
            PriorSpec::Discrete { atoms, weights } => GridPrior::discrete(atoms.clone(), weights),
            PriorSpec::PointMass { atom } => GridPrior::point_mass(atom.clone()),
            PriorSpec::UniformBox { bounds, points_per_dim } => GridPrior::uniform_box(bounds, points_per_dim),
        };
        p.map_err(|e| ConfigError::new("prior", e.to_string()))
    }

    fn shrink(&mut self) {
        match self {
            PriorSpec::Uniform { points, .. } | PriorSpec::TruncatedGaussian { points, .. } => {
                *points = (*points).min(SMOKE_MAX_POINTS_1D)
            }
            PriorSpec::UniformBox { points_per_dim, .. } => {
                for p in points_per_dim.iter_mut() {
                    *p = (*p).min(SMOKE_MAX_POINTS_PER_DIM);
                }
            }
            PriorSpec::Discrete { .. } | PriorSpec::PointMass { .. } => {}
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpaceSpec {
    pub bounds: Vec<(f64, f64)>,
    #[serde(default)]
    pub norm: Norm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FamilySpec {
    pub kind: FamilyKind,
    pub space: SpaceSpec,
    #[serde(rename = "box")]
    pub param_box: Vec<(f64, f64)>,
    pub beta_star: Vec<f64>,
    #[serde(default = "default_sup_resolution")]
    pub sup_resolution: usize,
}

fn default_sup_resolution() -> usize {
    DEFAULT_SUP_RESOLUTION
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DesignSpec {
    CyclicGrid { points_per_dim: usize },
    Uniform { count: usize, seed: u64 },
    List { points: Vec<Vec<f64>>, repeat: RepeatRule },
    Constant { point: Vec<f64> },
}

/// Knobs for the `bounds` diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiagnosticsSpec {
    #[serde(default = "default_beta_rate")]
    pub beta_rate: f64,
    /// Point of `U^c` for the numerator diagnostic; defaults to `θ* + 2ε`.
    #[serde(default)]
    pub t1: Option<f64>,
}

fn default_beta_rate() -> f64 {
    0.01
}

impl Default for DiagnosticsSpec {
    fn default() -> Self {
        DiagnosticsSpec { beta_rate: default_beta_rate(), t1: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigDocument {
    pub scenario: Scenario,
    pub tau: f64,
    pub eps: f64,
    pub n_grid: Vec<usize>,
    pub replications: usize,
    pub seed: u64,
    pub true_model: TrueModelSpec,
    pub prior: PriorSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub family: Option<FamilySpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub design: Option<DesignSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diagnostics: Option<DiagnosticsSpec>,
}

impl ConfigDocument {
    /// Parses JSON, reporting the dotted path and line of the first problem.
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let inner = e.into_inner();
            let field = if path == "." || path == "?" { "-".to_string() } else { path };
            ConfigError::new(field, format!("{inner}"))
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Caps `n_grid` at 200, replications at 5 and prior grids at desk size.
    pub fn apply_scale(&mut self, scale: Scale) {
        if scale == Scale::Full {
            return;
        }
        let kept: Vec<usize> = self.n_grid.iter().copied().filter(|&n| n <= SMOKE_MAX_N).collect();
        self.n_grid = if kept.is_empty() { vec![SMOKE_MAX_N] } else { kept };
        self.replications = self.replications.min(SMOKE_MAX_REPLICATIONS);
        self.prior.shrink();
    }

    pub fn validate(&self) -> Result<Experiment, ConfigError> {
        let tau = TauLevel::new(self.tau).map_err(|e| ConfigError::new("tau", e.to_string()))?;
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return Err(ConfigError::new("eps", "must be positive and finite"));
        }
        if self.n_grid.is_empty() {
            return Err(ConfigError::new("n_grid", "must contain at least one sample size"));
        }
        if self.n_grid.windows(2).any(|w| w[0] >= w[1]) {
            return Err(ConfigError::new("n_grid", "must be strictly increasing"));
        }
        if self.replications == 0 {
            return Err(ConfigError::new("replications", "must be at least 1"));
        }
        let diagnostics = self.diagnostics.clone().unwrap_or_default();
        if !(diagnostics.beta_rate > 0.0) {
            return Err(ConfigError::new("diagnostics.beta_rate", "must be positive"));
        }
        let prior = self.prior.build()?;
        let model = match self.scenario {
            Scenario::Iid => {
                if self.family.is_some() {
                    return Err(ConfigError::new("family", "only allowed with scenario \"inid\""));
                }
                if self.design.is_some() {
                    return Err(ConfigError::new("design", "only allowed with scenario \"inid\""));
                }
                let truth = match &self.true_model {
                    TrueModelSpec::Marginal(d) => d.clone(),
                    TrueModelSpec::Conditional(_) => {
                        return Err(ConfigError::new("true_model.kind", "\"conditional\" needs scenario \"inid\""))
                    }
                };
                truth.validate().map_err(|e| ConfigError::new("true_model", e.to_string()))?;
                if prior.dim() != 1 {
                    return Err(ConfigError::new("prior", "i.i.d. scenario needs a one-dimensional prior"));
                }
                Model::Iid { truth }
            }
            Scenario::Inid => {
                let fs =
                    self.family.as_ref().ok_or_else(|| ConfigError::new("family", "required for scenario \"inid\""))?;
                let ds =
                    self.design.as_ref().ok_or_else(|| ConfigError::new("design", "required for scenario \"inid\""))?;
                let cs = match &self.true_model {
                    TrueModelSpec::Conditional(c) if c.kind == "conditional" => c,
                    _ => {
                        return Err(ConfigError::new("true_model.kind", "scenario \"inid\" needs kind \"conditional\""))
                    }
                };
                let space = CovariateSpace::new(fs.space.bounds.clone(), fs.space.norm)
                    .map_err(|e| ConfigError::new("family.space", e.to_string()))?;
                let family = ThetaFamily::new(fs.kind, space.clone(), fs.param_box.clone())
                    .map_err(|e| ConfigError::new("family", e.to_string()))?;
                if !family.in_box(&fs.beta_star) {
                    return Err(ConfigError::new("family.beta_star", "must lie in the parameter box"));
                }
                if fs.sup_resolution < 2 {
                    return Err(ConfigError::new("family.sup_resolution", "must be at least 2"));
                }
                let design = match ds {
                    DesignSpec::CyclicGrid { points_per_dim } => CovariateDesign::cyclic_grid(space, *points_per_dim),
                    DesignSpec::Uniform { count, seed } => CovariateDesign::uniform_draws(space, *count, *seed),
                    DesignSpec::List { points, repeat } => CovariateDesign::from_list(space, points.clone(), *repeat),
                    DesignSpec::Constant { point } => CovariateDesign::constant(space, point.clone()),
                }
                .map_err(|e| ConfigError::new("design", e.to_string()))?;
                let truth = ConditionalTrueDensity::new(
                    cs.noise.clone(),
                    tau,
                    family.clone(),
                    fs.beta_star.clone(),
                    cs.scale_intercept,
                    cs.scale_slope.clone(),
                )
                .map_err(|e| ConfigError::new("true_model", e.to_string()))?;
                if prior.dim() != family.parameter_dimension() {
                    return Err(ConfigError::new("prior", "dimension must match the family's parameter count"));
                }
                if (0..prior.len()).any(|j| !family.in_box(prior.atom(j))) {
                    return Err(ConfigError::new("prior", "atoms must lie in the family's parameter box"));
                }
                Model::Inid {
                    truth,
                    family,
                    design,
                    beta_star: fs.beta_star.clone(),
                    sup_resolution: fs.sup_resolution,
                }
            }
        };
        Ok(Experiment {
            scenario: self.scenario,
            tau,
            eps: self.eps,
            n_grid: self.n_grid.clone(),
            replications: self.replications,
            seed: self.seed,
            prior,
            model,
            diagnostics,
        })
    }
}

#[derive(Debug, Clone)]
pub enum Model {
    Iid {
        truth: TrueDensity,
    },
    Inid {
        truth: ConditionalTrueDensity,
        family: ThetaFamily,
        design: CovariateDesign,
        beta_star: Vec<f64>,
        sup_resolution: usize,
    },
}

/// A validated configuration with every object built.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub scenario: Scenario,
    pub tau: TauLevel,
    pub eps: f64,
    pub n_grid: Vec<usize>,
    pub replications: usize,
    pub seed: u64,
    pub prior: GridPrior,
    pub model: Model,
    pub diagnostics: DiagnosticsSpec,
}
