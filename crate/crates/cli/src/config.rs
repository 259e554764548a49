//! Run configuration (TOML).
//!
//! Every section is optional and falls back to the published defaults.
//! Unknown keys are rejected. Relative paths are resolved against the
//! directory holding the config file.

use std::fmt;
use std::path::{Path, PathBuf};

use pilltop::fem::{MassMatrix, SolverSettings, StructuredMesh};
use pilltop::geometry::{BoundsBox, ShapePreset, SupershapeParams, PARAM_COUNT};
use pilltop::materials::{ExcipientLibrary, PhysicsConstants};
use pilltop::matfield::{NetworkConfig, PretrainSettings};
use pilltop::optimize::OptConfig;
use serde::{Deserialize, Serialize};

pub const CONFIG_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Simulate,
    Optimize,
    Gradcheck,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Simulate => "simulate",
            Mode::Optimize => "optimize",
            Mode::Gradcheck => "gradcheck",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub format_version: u32,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mode: Option<Mode>,
    pub output_dir: PathBuf,
    /// Start from saved network weights instead of a pretrained initialization.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub initial_weights: Option<PathBuf>,
    pub mesh: MeshConfig,
    pub constants: PhysicsConstants,
    pub library: ExcipientLibrary,
    pub solver: SolverConfig,
    pub shape: ShapeConfig,
    pub network: NetworkConfig,
    pub pretrain: PretrainSettings,
    pub optimizer: OptConfig,
    pub target: TargetConfig,
    pub output: OutputConfig,
    pub gradcheck: GradcheckConfig,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            format_version: CONFIG_FORMAT_VERSION,
            mode: None,
            output_dir: PathBuf::from("pilltop_out"),
            initial_weights: None,
            mesh: MeshConfig::default(),
            constants: PhysicsConstants::default(),
            library: ExcipientLibrary::standard(),
            solver: SolverConfig::default(),
            shape: ShapeConfig::default(),
            network: NetworkConfig::default(),
            pretrain: PretrainSettings::default(),
            optimizer: OptConfig::default(),
            target: TargetConfig::default(),
            output: OutputConfig::default(),
            gradcheck: GradcheckConfig::default(),
            base_dir: PathBuf::from("."),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MeshConfig {
    pub nx: usize,
    pub ny: usize,
    pub lx: f64,
    pub ly: f64,
}

impl Default for MeshConfig {
    fn default() -> Self {
        Self {
            nx: 75,
            ny: 75,
            lx: 1.0,
            ly: 1.0,
        }
    }
}

/// Solver settings plus the adjoint checkpoint spacing.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverConfig {
    pub dt: f64,
    pub n_steps: usize,
    pub newton_tol: f64,
    pub newton_abs_tol: f64,
    pub newton_max: usize,
    pub max_halvings: usize,
    pub mass_matrix: MassMatrix,
    /// Omitted: `ceil(sqrt(n_steps))`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint_spacing: Option<usize>,
}

impl Default for SolverConfig {
    fn default() -> Self {
        let s = SolverSettings::default();
        Self {
            dt: s.dt,
            n_steps: s.n_steps,
            newton_tol: s.newton_tol,
            newton_abs_tol: s.newton_abs_tol,
            newton_max: s.newton_max,
            max_halvings: s.max_halvings,
            mass_matrix: s.mass_matrix,
            checkpoint_spacing: None,
        }
    }
}

impl SolverConfig {
    pub fn settings(&self) -> SolverSettings {
        SolverSettings {
            dt: self.dt,
            n_steps: self.n_steps,
            newton_tol: self.newton_tol,
            newton_abs_tol: self.newton_abs_tol,
            newton_max: self.newton_max,
            max_halvings: self.max_halvings,
            mass_matrix: self.mass_matrix,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Spike,
    Circle,
    Sunflower,
    Custom,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ShapeConfig {
    pub preset: ShapeKind,
    /// Required with `preset = "custom"`, rejected otherwise.
    /// Order: cx, cy, theta, a, b, n, m.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lower: Option<[f64; PARAM_COUNT]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub upper: Option<[f64; PARAM_COUNT]>,
    /// Starting shape; must lie strictly inside the bounds. Omitted: box midpoint.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub initial: Option<SupershapeParams>,
}

impl Default for ShapeConfig {
    fn default() -> Self {
        Self {
            preset: ShapeKind::Circle,
            lower: None,
            upper: None,
            initial: None,
        }
    }
}

impl ShapeConfig {
    pub fn bounds(&self, domain: [f64; 2]) -> Option<BoundsBox> {
        let preset = match self.preset {
            ShapeKind::Spike => ShapePreset::Spike,
            ShapeKind::Circle => ShapePreset::Circle,
            ShapeKind::Sunflower => ShapePreset::Sunflower,
            ShapeKind::Custom => {
                return Some(BoundsBox {
                    lower: self.lower?,
                    upper: self.upper?,
                })
            }
        };
        Some(BoundsBox::preset(preset, domain))
    }
}

/// Where the target release profile comes from. At most one source.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TargetConfig {
    /// CSV with header `t,mdot`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub file: Option<PathBuf>,
    /// One value per time step.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub values: Option<Vec<f64>>,
    /// Generated by a forward run of a fixed reference design.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reference: Option<ReferenceDesign>,
}

impl TargetConfig {
    pub fn is_set(&self) -> bool {
        self.file.is_some() || self.values.is_some() || self.reference.is_some()
    }
}

/// A fixed shape with radially layered rate constants: an element whose
/// centre lies within `radius` of the shape centre takes the `k` of the
/// smallest such layer, otherwise the outer `k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReferenceDesign {
    pub shape: SupershapeParams,
    pub k: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub layers: Vec<Layer>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Layer {
    pub radius: f64,
    pub k: f64,
}

impl ReferenceDesign {
    pub fn k_field(&self, centers: &[[f64; 2]]) -> Vec<f64> {
        let mut layers = self.layers.clone();
        layers.sort_by(|a, b| a.radius.total_cmp(&b.radius));
        centers
            .iter()
            .map(|p| {
                let r = (p[0] - self.shape.cx).hypot(p[1] - self.shape.cy);
                layers
                    .iter()
                    .find(|l| r <= l.radius)
                    .map_or(self.k, |l| l.k)
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    /// Write a field snapshot every `field_stride` steps; 0 disables.
    pub field_stride: usize,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self { field_stride: 10 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradcheckConfig {
    pub weight_samples: usize,
    pub step: f64,
    pub tolerance: f64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            weight_samples: 5,
            step: 1e-5,
            tolerance: 1e-3,
        }
    }
}

/// Every problem found in a config, reported together.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigErrors(pub Vec<String>);

impl fmt::Display for ConfigErrors {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, p) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str("\n")?;
            }
            write!(f, "  - {p}")?;
        }
        Ok(())
    }
}

impl std::error::Error for ConfigErrors {}

fn split(err: pilltop::Error, out: &mut Vec<String>) {
    match err {
        pilltop::Error::Config(msg) => out.extend(msg.split("; ").map(str::to_string)),
        other => out.push(other.to_string()),
    }
}

/// Parse a config document. `base_dir` anchors relative paths.
pub fn parse_config(text: &str, base_dir: &Path) -> Result<RunConfig, ConfigErrors> {
    let mut cfg: RunConfig = toml::from_str(text).map_err(|e| ConfigErrors(vec![e.to_string()]))?;
    cfg.base_dir = base_dir.to_path_buf();
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<RunConfig, ConfigErrors> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| ConfigErrors(vec![format!("cannot read config {}: {e}", path.display())]))?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    parse_config(&text, &base)
}

impl RunConfig {
    pub fn resolve(&self, p: &Path) -> PathBuf {
        let joined = if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        };
        std::path::absolute(&joined).unwrap_or(joined)
    }

    pub fn domain(&self) -> [f64; 2] {
        [self.mesh.lx, self.mesh.ly]
    }

    pub fn build_mesh(&self) -> pilltop::Result<StructuredMesh> {
        StructuredMesh::new(self.mesh.nx, self.mesh.ny, self.mesh.lx, self.mesh.ly)
    }

    /// Check the whole config for `mode`, collecting every problem.
    pub fn validate(&self, mode: Mode) -> Result<(), ConfigErrors> {
        let mut p = Vec::new();
        if self.format_version != CONFIG_FORMAT_VERSION {
            p.push(format!(
                "format_version {} is not supported (expected {CONFIG_FORMAT_VERSION})",
                self.format_version
            ));
        }
        if let Some(m) = self.mode {
            if m != mode {
                p.push(format!(
                    "config sets mode = \"{m}\" but the command requested {mode}"
                ));
            }
        }
        let m = &self.mesh;
        if m.nx < 2 || m.ny < 2 {
            p.push(format!(
                "mesh.nx and mesh.ny must be at least 2 (got {} x {})",
                m.nx, m.ny
            ));
        }
        if !(m.lx.is_finite() && m.lx > 0.0 && m.ly.is_finite() && m.ly > 0.0) {
            p.push(format!(
                "mesh.lx and mesh.ly must be positive (got {} x {})",
                m.lx, m.ly
            ));
        }
        if let Err(e) = self.constants.validate() {
            split(e, &mut p);
        }
        if let Err(e) = self.library.validate() {
            split(e, &mut p);
        }
        let mut names: Vec<&str> = Vec::new();
        for ex in &self.library.materials {
            let n = ex.name.as_str();
            if n.is_empty() || n.chars().any(char::is_whitespace) {
                p.push(format!(
                    "library material name '{n}' must be non-empty without whitespace"
                ));
            } else if ["phi", "C", "k_field", "k_element"].contains(&n) {
                p.push(format!(
                    "library material name '{n}' clashes with a field array name"
                ));
            } else if names.contains(&n) {
                p.push(format!("library material name '{n}' is used twice"));
            }
            names.push(n);
        }
        if let Err(e) = self.solver.settings().validate() {
            split(e, &mut p);
        }
        if self.solver.checkpoint_spacing == Some(0) {
            p.push("solver.checkpoint_spacing must be at least 1".into());
        }
        match (
            self.shape.preset,
            self.shape.lower.is_some(),
            self.shape.upper.is_some(),
        ) {
            (ShapeKind::Custom, true, true) => {}
            (ShapeKind::Custom, _, _) => {
                p.push("shape.preset = \"custom\" needs shape.lower and shape.upper".into())
            }
            (_, false, false) => {}
            _ => p.push(
                "shape.lower/shape.upper are only allowed with shape.preset = \"custom\"".into(),
            ),
        }
        if let Some(bounds) = self.shape.bounds(self.domain()) {
            match bounds.validate() {
                Err(e) => split(e, &mut p),
                Ok(()) => {
                    if let Some(init) = &self.shape.initial {
                        if !bounds.contains_strictly(init) {
                            p.push(
                                "shape.initial must lie strictly inside the shape bounds".into(),
                            );
                        }
                    }
                }
            }
        }
        if let Err(e) = self.network.validate() {
            split(e, &mut p);
        }
        let pt = &self.pretrain;
        if !(pt.lr.is_finite() && pt.lr > 0.0) {
            p.push(format!("pretrain.lr must be positive (got {})", pt.lr));
        }
        if !(pt.tol.is_finite() && pt.tol >= 0.0) {
            p.push(format!(
                "pretrain.tol must be non-negative (got {})",
                pt.tol
            ));
        }
        if let Err(e) = self.optimizer.validate(self.library.len()) {
            split(e, &mut p);
        }
        let t = &self.target;
        let sources = [t.file.is_some(), t.values.is_some(), t.reference.is_some()]
            .iter()
            .filter(|x| **x)
            .count();
        if sources > 1 {
            p.push("target: give only one of file, values, reference".into());
        }
        if sources == 0 && mode == Mode::Optimize {
            p.push(
                "target profile required (target.file, target.values or target.reference)".into(),
            );
        }
        if let Some(v) = &t.values {
            if v.len() != self.solver.n_steps {
                p.push(format!(
                    "target.values has {} entries but solver.n_steps is {}",
                    v.len(),
                    self.solver.n_steps
                ));
            }
            if v.iter().any(|x| !x.is_finite()) {
                p.push("target.values must be finite".into());
            }
        }
        if let Some(r) = &t.reference {
            if let Err(e) = pilltop::geometry::gielis_radius(&r.shape, 0.0) {
                p.push(format!("target.reference.shape: {e}"));
            }
            let ks = std::iter::once(r.k).chain(r.layers.iter().map(|l| l.k));
            if ks.into_iter().any(|k| !(k.is_finite() && k >= 0.0)) {
                p.push("target.reference rate constants must be finite and non-negative".into());
            }
            if r.layers
                .iter()
                .any(|l| !(l.radius.is_finite() && l.radius > 0.0))
            {
                p.push("target.reference.layers radii must be positive".into());
            }
        }
        let g = &self.gradcheck;
        if !(g.step.is_finite() && g.step > 0.0) {
            p.push(format!("gradcheck.step must be positive (got {})", g.step));
        }
        if !(g.tolerance.is_finite() && g.tolerance > 0.0) {
            p.push(format!(
                "gradcheck.tolerance must be positive (got {})",
                g.tolerance
            ));
        }
        if p.is_empty() {
            Ok(())
        } else {
            Err(ConfigErrors(p))
        }
    }

    /// The config as TOML, with paths absolute so it can be rerun from anywhere.
    pub fn resolved_toml(&self, mode: Mode) -> String {
        let mut echo = self.clone();
        echo.mode = Some(mode);
        echo.output_dir = self.resolve(&self.output_dir);
        echo.initial_weights = self.initial_weights.as_ref().map(|p| self.resolve(p));
        echo.target.file = self.target.file.as_ref().map(|p| self.resolve(p));
        toml::to_string(&echo).expect("config serializes")
    }
}
