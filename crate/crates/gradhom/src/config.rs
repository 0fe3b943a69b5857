//! Run configuration: a single JSON document describing what to solve.
//!
//! Field names carry their units (`edge_mm`, `load_n`) and unknown fields
//! are rejected, so a typo fails loudly instead of silently falling back to
//! a default.  Emission is canonical: parsing an emitted document and
//! emitting it again reproduces the bytes.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::macroscale::{Constitutive, MacroConfig};
use crate::material::{FiberReinforced, Material, MooneyRivlin};
use crate::multigrid::{LevelStep, Schedule};
use crate::rve::{BcKind, MacroDrive, MaterialLayout, RveConfig};

#[derive(Debug, Error)]
pub enum ConfigError {
    /// Syntax or type error from the JSON parser.
    #[error("config parse: {0}")]
    Parse(#[from] serde_json::Error),
    /// Semantic error, pointing at the offending field.
    #[error("config field `{path}`: {message}")]
    Invalid { path: String, message: String },
}

fn invalid(path: &str, message: impl Into<String>) -> ConfigError {
    ConfigError::Invalid { path: path.into(), message: message.into() }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    /// Solve one cell problem (optionally sweeping first-gradient
    /// scalings) and report homogenized quantities.
    Rve,
    /// Solve the Cook's membrane with nested cell problems.
    TwoScale,
    /// Run the invariant checks on the configured cell and print a
    /// pass/fail matrix.
    Verify,
}

impl std::fmt::Display for Command {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Command::Rve => "rve",
            Command::TwoScale => "two-scale",
            Command::Verify => "verify",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaterialName {
    MooneyRivlin,
    Fiber,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BcName {
    Dirichlet,
    Periodic,
}

impl From<BcName> for BcKind {
    fn from(b: BcName) -> BcKind {
        match b {
            BcName::Dirichlet => BcKind::Dirichlet,
            BcName::Periodic => BcKind::Periodic,
        }
    }
}

fn default_degree() -> usize {
    2
}
fn default_quad() -> usize {
    3
}
fn default_void_scale() -> f64 {
    1e-8
}
fn default_scalings() -> Vec<f64> {
    vec![1.0]
}

/// The cell: geometry, discretization, material and boundary conditions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RveBlock {
    /// Cell edge length in mm; the cell is centred at the origin.
    pub edge_mm: f64,
    /// Elements per direction.
    pub elements: usize,
    #[serde(default = "default_degree")]
    pub degree: usize,
    /// Gauss points per direction and element.
    #[serde(default = "default_quad")]
    pub quad: usize,
    pub material: MaterialName,
    pub bc: BcName,
    /// Replace a cross-shaped region by near-void material.
    #[serde(default)]
    pub void_cross: bool,
    /// Stiffness scale of the void region relative to the bulk.
    #[serde(default = "default_void_scale")]
    pub void_scale: f64,
    /// Factors applied to the first-gradient moduli of the fiber material;
    /// more than one entry sweeps them in a single run.
    #[serde(default = "default_scalings")]
    pub first_gradient_scalings: Vec<f64>,
}

/// The macroscopic drive `(F, G)` in row-major component order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DriveBlock {
    /// Deformation gradient, 9 components, row-major.
    pub f: [f64; 9],
    /// Gradient of F in 1/mm, 27 components, row-major.
    pub g: Vec<f64>,
}

fn default_load() -> f64 {
    100.0
}
fn default_steps() -> usize {
    5
}
fn default_schedule() -> Vec<LevelStep> {
    vec![LevelStep::Start]
}

/// The Cook's membrane run: mesh, load and solution schedule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MacroBlock {
    /// Elements per parametric direction.
    pub elements: [usize; 3],
    #[serde(default = "default_degree")]
    pub degree: usize,
    #[serde(default = "default_quad")]
    pub quad: usize,
    /// Dead-load resultant on the loaded face in N, applied along +y.
    #[serde(default = "default_load")]
    pub load_n: f64,
    /// Initial number of equal load increments on the entry level.
    #[serde(default = "default_steps")]
    pub steps: usize,
    /// Refinement schedule; the first entry must be `start`.
    #[serde(default = "default_schedule")]
    pub schedule: Vec<LevelStep>,
}

fn default_rve_atol() -> f64 {
    1e-10
}
fn default_rve_max_iter() -> usize {
    30
}
fn default_macro_atol() -> f64 {
    1e-7
}
fn default_macro_max_iter() -> usize {
    25
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToleranceBlock {
    /// Cell Newton: absolute residual tolerance (N).
    pub rve_atol_n: f64,
    pub rve_max_iter: usize,
    /// Macro Newton: absolute residual tolerance (N).
    pub macro_atol_n: f64,
    pub macro_max_iter: usize,
}

impl Default for ToleranceBlock {
    fn default() -> Self {
        ToleranceBlock {
            rve_atol_n: default_rve_atol(),
            rve_max_iter: default_rve_max_iter(),
            macro_atol_n: default_macro_atol(),
            macro_max_iter: default_macro_max_iter(),
        }
    }
}

fn default_samples() -> usize {
    2
}
fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputBlock {
    /// Write `fields_*.vtk` next to the CSV reports.
    pub fields: bool,
    /// Sample lattice per element and direction in the field export.
    pub samples_per_element: usize,
}

impl Default for OutputBlock {
    fn default() -> Self {
        OutputBlock { fields: default_true(), samples_per_element: default_samples() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub command: Command,
    pub rve: RveBlock,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub drive: Option<DriveBlock>,
    #[serde(rename = "macro", default, skip_serializing_if = "Option::is_none")]
    pub macroscale: Option<MacroBlock>,
    #[serde(default)]
    pub tolerances: ToleranceBlock,
    #[serde(default)]
    pub output: OutputBlock,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let config: RunConfig = serde_json::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    /// Canonical emission; parsing the output and emitting again is
    /// byte-identical.
    pub fn to_canonical_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let r = &self.rve;
        if !(r.edge_mm > 0.0) {
            return Err(invalid("rve.edge_mm", "must be positive"));
        }
        if r.elements < 2 {
            return Err(invalid("rve.elements", "need at least 2 elements per direction"));
        }
        if r.degree < 2 {
            return Err(invalid("rve.degree", "second gradients need degree at least 2"));
        }
        if r.quad < r.degree + 1 {
            return Err(invalid("rve.quad", "need at least degree + 1 Gauss points"));
        }
        if r.void_cross && !(r.void_scale > 0.0 && r.void_scale <= 1.0) {
            return Err(invalid("rve.void_scale", "must lie in (0, 1]"));
        }
        if r.first_gradient_scalings.is_empty() {
            return Err(invalid("rve.first_gradient_scalings", "must not be empty"));
        }
        if r.first_gradient_scalings.iter().any(|&s| !(s > 0.0 && s <= 1.0)) {
            return Err(invalid("rve.first_gradient_scalings", "entries must lie in (0, 1]"));
        }
        if r.material == MaterialName::MooneyRivlin && r.first_gradient_scalings != vec![1.0] {
            return Err(invalid(
                "rve.first_gradient_scalings",
                "only the fiber material has first-gradient moduli to scale",
            ));
        }
        if let Some(d) = &self.drive {
            if d.g.len() != 27 {
                return Err(invalid("drive.g", format!("expected 27 components, got {}", d.g.len())));
            }
            if d.f.iter().chain(d.g.iter()).any(|v| !v.is_finite()) {
                return Err(invalid("drive", "components must be finite"));
            }
        }
        match self.command {
            Command::Rve | Command::Verify => {
                if self.drive.is_none() {
                    return Err(invalid("drive", "required for rve and verify runs"));
                }
            }
            Command::TwoScale => {
                let Some(m) = &self.macroscale else {
                    return Err(invalid("macro", "required for two-scale runs"));
                };
                if self.drive.is_some() {
                    return Err(invalid(
                        "drive",
                        "two-scale runs derive the drive from the deformation state; remove it",
                    ));
                }
                if m.elements.iter().any(|&n| n == 0) {
                    return Err(invalid("macro.elements", "element counts must be positive"));
                }
                if m.degree < 2 {
                    return Err(invalid("macro.degree", "second gradients need degree at least 2"));
                }
                if m.quad < m.degree + 1 {
                    return Err(invalid("macro.quad", "need at least degree + 1 Gauss points"));
                }
                if !(m.load_n.is_finite()) {
                    return Err(invalid("macro.load_n", "must be finite"));
                }
                if m.steps == 0 {
                    return Err(invalid("macro.steps", "need at least one load step"));
                }
                if r.first_gradient_scalings.len() != 1 {
                    return Err(invalid(
                        "rve.first_gradient_scalings",
                        "two-scale runs use a single scaling",
                    ));
                }
                let schedule = Schedule { steps: m.schedule.clone() };
                let probe = self.macro_config().map_err(|e| match e {
                    e @ ConfigError::Invalid { .. } => e,
                    other => other,
                })?;
                schedule
                    .validate(&probe)
                    .map_err(|e| invalid("macro.schedule", e.to_string()))?;
            }
        }
        let t = &self.tolerances;
        if !(t.rve_atol_n > 0.0 && t.macro_atol_n > 0.0) {
            return Err(invalid("tolerances", "tolerances must be positive"));
        }
        if t.rve_max_iter == 0 || t.macro_max_iter == 0 {
            return Err(invalid("tolerances", "iteration caps must be positive"));
        }
        if self.output.samples_per_element == 0 {
            return Err(invalid("output.samples_per_element", "need at least one sample"));
        }
        Ok(())
    }

    /// Concrete material for one entry of the scaling sweep.
    pub fn material(&self, scaling: f64) -> Material {
        match self.rve.material {
            MaterialName::MooneyRivlin => Material::MooneyRivlin(MooneyRivlin::benchmark()),
            MaterialName::Fiber => Material::Fiber(
                FiberReinforced::benchmark().with_first_gradient_scaling(scaling),
            ),
        }
    }

    /// Cell problem configuration for one entry of the scaling sweep.
    pub fn rve_config(&self, scaling: f64) -> RveConfig {
        let bulk = self.material(scaling);
        let layout = if self.rve.void_cross {
            MaterialLayout::VoidCross { bulk, void_scale: self.rve.void_scale }
        } else {
            MaterialLayout::Uniform(bulk)
        };
        RveConfig {
            elements: self.rve.elements,
            degree: self.rve.degree,
            edge_mm: self.rve.edge_mm,
            bc: self.rve.bc.into(),
            layout,
            quad: self.rve.quad,
        }
    }

    pub fn drive(&self) -> MacroDrive {
        match &self.drive {
            Some(d) => {
                let mut coeffs = [0.0; 36];
                coeffs[..9].copy_from_slice(&d.f);
                coeffs[9..].copy_from_slice(&d.g);
                MacroDrive::from_coeffs(&coeffs)
            }
            None => MacroDrive::identity(),
        }
    }

    /// Macro problem configuration; requires the `macro` block.
    pub fn macro_config(&self) -> Result<MacroConfig, ConfigError> {
        let m = self
            .macroscale
            .as_ref()
            .ok_or_else(|| invalid("macro", "required for two-scale runs"))?;
        let scaling = self.rve.first_gradient_scalings[0];
        let mut config = MacroConfig::cooks(
            m.elements,
            Constitutive::TwoScale(self.rve_config(scaling)),
        );
        config.degree = m.degree;
        config.quad = m.quad;
        config.load_n = m.load_n;
        config.steps = m.steps;
        config.atol_n = self.tolerances.macro_atol_n;
        config.max_iter = self.tolerances.macro_max_iter;
        config.rve_newton.atol = self.tolerances.rve_atol_n;
        config.rve_newton.max_iter = self.tolerances.rve_max_iter;
        Ok(config)
    }

    pub fn schedule(&self) -> Schedule {
        match &self.macroscale {
            Some(m) => Schedule { steps: m.schedule.clone() },
            None => Schedule::one_level(),
        }
    }
}
