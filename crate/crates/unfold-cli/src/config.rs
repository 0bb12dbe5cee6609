//! TOML run configuration: one file fully determines a run.
//!
//! Every section maps onto a constructor of the core library; all validation
//! failures surface as [`ConfigError`] so the binary can distinguish bad
//! configuration (exit 2) from a failed computation (exit 1).

use std::fmt;
use std::path::Path;
use std::sync::Arc;

use serde::Deserialize;
use unfold_core::corrector::QuadraticIntegrand;
use unfold_core::eris::{ErisOptions, GradientPlasticity, LoadFn};
use unfold_core::graph::LatticeGraph;
use unfold_core::lattice::QuadratureRule;
use unfold_core::probability::{ProbabilitySpace, RandomVariable};
use unfold_core::solver::CgOptions;

/// A problem with the configuration file (parse or validation); maps to
/// exit code 2 in the binary.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "configuration error: {}", self.0)
    }
}

impl std::error::Error for ConfigError {}

fn bad<T>(msg: impl Into<String>) -> Result<T, ConfigError> {
    Err(ConfigError(msg.into()))
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub seed: Option<u64>,
    pub space: Option<SpaceConfig>,
    pub graph: Option<GraphConfig>,
    pub coefficient: Option<CoefficientConfig>,
    pub load: Option<LoadConfig>,
    pub study: Option<StudySection>,
    pub evolution: Option<EvolutionSection>,
    pub korn: Option<KornSection>,
    pub verify: Option<VerifySection>,
    pub corrector: Option<CorrectorSection>,
    pub solver: Option<SolverSection>,
}

impl FileConfig {
    pub fn from_path(path: &Path) -> Result<FileConfig, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError(format!("cannot read {}: {e}", path.display())))?;
        FileConfig::from_str(&text)
    }

    pub fn from_str(text: &str) -> Result<FileConfig, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError(format!("TOML parse: {e}")))
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SpaceConfig {
    /// One-sample deterministic space.
    Singleton { dim: usize },
    /// Uniform discrete torus with the addition action.
    Torus { periods: Vec<usize> },
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum GraphConfig {
    /// All `{0,1}`-direction combinations (`{e1, e2, e1+e2}` in the plane).
    Standard { dim: usize },
    /// Coordinate directions only; violates the Korn inequality for `d ≥ 2`.
    Axes { dim: usize },
    Custom { generators: Vec<Vec<i64>> },
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum CoefficientConfig {
    /// Scalar spring constants per bond: `values[sample][bond]`, broadcast
    /// when a single row is given. The elastic form is `diag(a)`; the pair
    /// form couples each bond's elastic and plastic strain with a positive
    /// `hardening` modulus.
    PerBond {
        values: Vec<Vec<f64>>,
        #[serde(default)]
        hardening: Option<Vec<f64>>,
    },
    /// Full symmetric coefficient matrix per sample, row-major.
    Matrix { rows: Vec<Vec<f64>> },
    /// Independent uniform draws per sample and bond from `[low, high]`,
    /// seeded by the run seed.
    IidUniform {
        low: f64,
        high: f64,
        #[serde(default)]
        hardening: Option<Vec<f64>>,
    },
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LoadConfig {
    /// Spatially constant body load; `amplitude` has one entry per
    /// displacement component (or one entry broadcast to all).
    Constant { amplitude: Vec<f64> },
    /// `amplitude_c · Π_a sin(π x_a / side_a)`, vanishing on the box faces.
    Sine { amplitude: Vec<f64> },
    /// `amplitude_c · Π_a 4 (x_a/side_a)(1 − x_a/side_a)`, vanishing on the
    /// box faces.
    Parabola { amplitude: Vec<f64> },
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudySection {
    pub epsilons: Vec<f64>,
    pub sides: Vec<f64>,
    #[serde(default = "default_quadrature")]
    pub quadrature: usize,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvolutionSection {
    pub horizon: f64,
    pub steps: usize,
    #[serde(default)]
    pub sample_times: Vec<f64>,
    /// Per-bond yield stresses, broadcast over samples (`inf` freezes a bond).
    pub sigma_y: Vec<f64>,
    /// Optional per-sample override of `sigma_y`.
    #[serde(default)]
    pub sigma_y_samples: Option<Vec<Vec<f64>>>,
    /// Gradient-plasticity exponent `γ ∈ (0,1)`; absent = no regularization.
    #[serde(default)]
    pub gamma: Option<f64>,
    /// Gradient coefficient `G = scale · I`.
    #[serde(default = "default_one")]
    pub gradient_scale: f64,
    #[serde(default)]
    pub mode: EvolveMode,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvolveMode {
    /// ε-sweep against the two-scale (or deterministic) limit.
    #[default]
    Study,
    /// Single trajectory at the first configured ε.
    Trajectory,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KornSection {
    #[serde(default = "default_korn_sides")]
    pub sides: Vec<usize>,
    #[serde(default)]
    pub expect: KornExpectation,
    /// Maximum admissible consecutive-window drift for a bounded sweep.
    #[serde(default = "default_drift_tolerance")]
    pub drift_tolerance: f64,
    /// Minimum first-to-last growth certifying an unbounded sweep.
    #[serde(default = "default_growth_minimum")]
    pub growth_minimum: f64,
    /// Randomized trials for the stochastic (potential-space) constant;
    /// 0 skips that report.
    #[serde(default)]
    pub stochastic_trials: usize,
}

impl Default for KornSection {
    fn default() -> Self {
        KornSection {
            sides: default_korn_sides(),
            expect: KornExpectation::Bounded,
            drift_tolerance: default_drift_tolerance(),
            growth_minimum: default_growth_minimum(),
            stochastic_trials: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Deserialize, serde::Serialize)]
#[serde(rename_all = "snake_case")]
pub enum KornExpectation {
    /// The generating set satisfies the Korn inequality: the windowed
    /// constant stabilizes.
    #[default]
    Bounded,
    /// Negative control: the constant grows without bound.
    Unbounded,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifySection {
    /// Minimum number of randomized instances across the structure grid.
    #[serde(default = "default_instances")]
    pub instances: usize,
    #[serde(default = "default_identity_tolerance")]
    pub tolerance: f64,
}

impl Default for VerifySection {
    fn default() -> Self {
        VerifySection {
            instances: default_instances(),
            tolerance: default_identity_tolerance(),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorrectorSection {
    #[serde(default = "default_probes")]
    pub probes: usize,
    #[serde(default = "default_probe_tolerance")]
    pub tolerance: f64,
}

impl Default for CorrectorSection {
    fn default() -> Self {
        CorrectorSection {
            probes: default_probes(),
            tolerance: default_probe_tolerance(),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverSection {
    #[serde(default = "default_cg_rel_tol")]
    pub cg_rel_tol: f64,
    #[serde(default = "default_cg_iter_factor")]
    pub cg_max_iter_factor: usize,
    #[serde(default = "default_kkt_tol")]
    pub kkt_tol: f64,
    #[serde(default = "default_max_alternations")]
    pub max_alternations: usize,
}

impl Default for SolverSection {
    fn default() -> Self {
        SolverSection {
            cg_rel_tol: default_cg_rel_tol(),
            cg_max_iter_factor: default_cg_iter_factor(),
            kkt_tol: default_kkt_tol(),
            max_alternations: default_max_alternations(),
        }
    }
}

fn default_quadrature() -> usize {
    1
}
fn default_one() -> f64 {
    1.0
}
fn default_korn_sides() -> Vec<usize> {
    vec![6, 8, 10]
}
fn default_drift_tolerance() -> f64 {
    0.15
}
fn default_growth_minimum() -> f64 {
    2.0
}
fn default_instances() -> usize {
    50
}
fn default_identity_tolerance() -> f64 {
    1e-12
}
fn default_probes() -> usize {
    8
}
fn default_probe_tolerance() -> f64 {
    1e-10
}
fn default_cg_rel_tol() -> f64 {
    1e-10
}
fn default_cg_iter_factor() -> usize {
    10
}
fn default_kkt_tol() -> f64 {
    1e-9
}
fn default_max_alternations() -> usize {
    500
}

// ---------------------------------------------------------------------------
// Builders
// ---------------------------------------------------------------------------

pub fn build_space(cfg: &FileConfig) -> Result<Arc<ProbabilitySpace>, ConfigError> {
    let section = cfg
        .space
        .as_ref()
        .ok_or_else(|| ConfigError("missing [space] section".into()))?;
    let space = match section {
        SpaceConfig::Singleton { dim } => ProbabilitySpace::singleton(*dim),
        SpaceConfig::Torus { periods } => ProbabilitySpace::torus(periods),
    };
    space.map_err(|e| ConfigError(format!("space: {e}")))
}

pub fn build_graph(cfg: &FileConfig) -> Result<LatticeGraph, ConfigError> {
    let section = cfg
        .graph
        .as_ref()
        .ok_or_else(|| ConfigError("missing [graph] section".into()))?;
    let graph = match section {
        GraphConfig::Standard { dim } => LatticeGraph::standard(*dim),
        GraphConfig::Axes { dim } => LatticeGraph::axes(*dim),
        GraphConfig::Custom { generators } => LatticeGraph::new(generators.clone()),
    };
    graph.map_err(|e| ConfigError(format!("graph: {e}")))
}

/// Per-sample, per-bond spring constants from the coefficient section.
fn bond_values(
    cfg: &CoefficientConfig,
    m: usize,
    k: usize,
    seed: u64,
) -> Result<Vec<Vec<f64>>, ConfigError> {
    match cfg {
        CoefficientConfig::PerBond { values, .. } => {
            let rows: Vec<Vec<f64>> = if values.len() == 1 {
                vec![values[0].clone(); m]
            } else {
                values.clone()
            };
            if rows.len() != m {
                return bad(format!(
                    "coefficient: {} sample rows for a {m}-sample space",
                    rows.len()
                ));
            }
            for row in &rows {
                if row.len() != k {
                    return bad(format!(
                        "coefficient: row with {} entries, the graph has {k} bonds",
                        row.len()
                    ));
                }
            }
            Ok(rows)
        }
        CoefficientConfig::IidUniform { low, high, .. } => {
            use rand::{Rng, SeedableRng};
            if !(low.is_finite() && high.is_finite() && low <= high) {
                return bad(format!("coefficient: bad uniform range [{low}, {high}]"));
            }
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            Ok((0..m)
                .map(|_| (0..k).map(|_| rng.gen_range(*low..=*high)).collect())
                .collect())
        }
        CoefficientConfig::Matrix { .. } => bad("coefficient: matrix form has no bond values"),
    }
}

/// Elastic (`blocks = 1`) integrand.
pub fn build_elastic(
    cfg: &FileConfig,
    space: &Arc<ProbabilitySpace>,
    graph: &LatticeGraph,
    seed: u64,
) -> Result<QuadraticIntegrand, ConfigError> {
    let section = cfg
        .coefficient
        .as_ref()
        .ok_or_else(|| ConfigError("missing [coefficient] section".into()))?;
    let m = space.len();
    let k = graph.len();
    let a = match section {
        CoefficientConfig::Matrix { rows } => matrix_variable(rows, space, k)?,
        _ => {
            let bonds = bond_values(section, m, k, seed)?;
            RandomVariable::from_fn(space, k * k, |s, out| {
                for i in 0..k {
                    out[i * k + i] = bonds[s][i];
                }
            })
        }
    };
    QuadraticIntegrand::elastic(space, graph, a).map_err(|e| ConfigError(format!("coefficient: {e}")))
}

/// Elasto-plastic pair (`blocks = 2`) integrand. Bond springs `a_i` with
/// hardening `h_i` give the per-bond energy `a(e − z)² + h z²`, i.e. the
/// block matrix `[[D, −D], [−D, D + H]]`.
pub fn build_pair(
    cfg: &FileConfig,
    space: &Arc<ProbabilitySpace>,
    graph: &LatticeGraph,
    seed: u64,
) -> Result<QuadraticIntegrand, ConfigError> {
    let section = cfg
        .coefficient
        .as_ref()
        .ok_or_else(|| ConfigError("missing [coefficient] section".into()))?;
    let m = space.len();
    let k = graph.len();
    let a = match section {
        CoefficientConfig::Matrix { rows } => matrix_variable(rows, space, 2 * k)?,
        CoefficientConfig::PerBond { hardening, .. }
        | CoefficientConfig::IidUniform { hardening, .. } => {
            let h = hardening
                .clone()
                .ok_or_else(|| ConfigError("coefficient: pair form needs `hardening`".into()))?;
            let h = if h.len() == 1 { vec![h[0]; k] } else { h };
            if h.len() != k {
                return bad(format!(
                    "coefficient: {} hardening entries, the graph has {k} bonds",
                    h.len()
                ));
            }
            if h.iter().any(|&v| !(v > 0.0)) {
                return bad("coefficient: hardening moduli must be positive");
            }
            let bonds = bond_values(section, m, k, seed)?;
            let j = 2 * k;
            RandomVariable::from_fn(space, j * j, |s, out| {
                for i in 0..k {
                    let ai = bonds[s][i];
                    out[i * j + i] = ai;
                    out[i * j + (k + i)] = -ai;
                    out[(k + i) * j + i] = -ai;
                    out[(k + i) * j + (k + i)] = ai + h[i];
                }
            })
        }
    };
    QuadraticIntegrand::pair(space, graph, a).map_err(|e| ConfigError(format!("coefficient: {e}")))
}

fn matrix_variable(
    rows: &[Vec<f64>],
    space: &Arc<ProbabilitySpace>,
    j: usize,
) -> Result<RandomVariable, ConfigError> {
    let m = space.len();
    let rows: Vec<Vec<f64>> = if rows.len() == 1 {
        vec![rows[0].clone(); m]
    } else {
        rows.to_vec()
    };
    if rows.len() != m {
        return bad(format!(
            "coefficient: {} matrix rows for a {m}-sample space",
            rows.len()
        ));
    }
    for row in &rows {
        if row.len() != j * j {
            return bad(format!(
                "coefficient: matrix with {} entries, expected {j}×{j}",
                row.len()
            ));
        }
    }
    Ok(RandomVariable::from_fn(space, j * j, |s, out| {
        out.copy_from_slice(&rows[s]);
    }))
}

#[derive(Clone, Copy)]
enum LoadProfile {
    Constant,
    Sine,
    Parabola,
}

/// Deterministic spatial load profile `x ↦ l(x) ∈ R^d`.
#[derive(Clone)]
pub struct SpatialLoad {
    amplitude: Vec<f64>,
    profile: LoadProfile,
    sides: Vec<f64>,
}

impl SpatialLoad {
    pub fn eval(&self, x: &[f64], out: &mut [f64]) {
        let mut profile = 1.0;
        match self.profile {
            LoadProfile::Constant => {}
            LoadProfile::Sine => {
                for (xa, sa) in x.iter().zip(&self.sides) {
                    profile *= (std::f64::consts::PI * xa / sa).sin();
                }
            }
            LoadProfile::Parabola => {
                for (xa, sa) in x.iter().zip(&self.sides) {
                    let r = xa / sa;
                    profile *= 4.0 * r * (1.0 - r);
                }
            }
        }
        for (o, a) in out.iter_mut().zip(&self.amplitude) {
            *o = a * profile;
        }
    }

    /// Time-ramped version `l(t, x) = t · l(x)` as a shared evolution load.
    pub fn ramp(&self) -> Arc<LoadFn> {
        let load = self.clone();
        Arc::new(move |t, x, out| {
            load.eval(x, out);
            for v in out.iter_mut() {
                *v *= t;
            }
        })
    }
}

pub fn build_load(cfg: &FileConfig, d: usize, sides: &[f64]) -> Result<SpatialLoad, ConfigError> {
    let section = cfg
        .load
        .as_ref()
        .ok_or_else(|| ConfigError("missing [load] section".into()))?;
    let (raw, profile) = match section {
        LoadConfig::Constant { amplitude } => (amplitude, LoadProfile::Constant),
        LoadConfig::Sine { amplitude } => (amplitude, LoadProfile::Sine),
        LoadConfig::Parabola { amplitude } => (amplitude, LoadProfile::Parabola),
    };
    let amplitude = if raw.len() == 1 {
        vec![raw[0]; d]
    } else {
        raw.clone()
    };
    if amplitude.len() != d {
        return bad(format!(
            "load: {} amplitude entries for {d} displacement components",
            amplitude.len()
        ));
    }
    if !amplitude.iter().all(|v| v.is_finite()) {
        return bad("load: amplitudes must be finite");
    }
    Ok(SpatialLoad {
        amplitude,
        profile,
        sides: sides.to_vec(),
    })
}

pub fn build_sigma(
    cfg: &EvolutionSection,
    space: &Arc<ProbabilitySpace>,
    k: usize,
) -> Result<RandomVariable, ConfigError> {
    let m = space.len();
    let rows: Vec<Vec<f64>> = match &cfg.sigma_y_samples {
        Some(rows) => {
            if rows.len() != m {
                return bad(format!(
                    "evolution: {} sigma_y_samples rows for a {m}-sample space",
                    rows.len()
                ));
            }
            rows.clone()
        }
        None => {
            let row = if cfg.sigma_y.len() == 1 {
                vec![cfg.sigma_y[0]; k]
            } else {
                cfg.sigma_y.clone()
            };
            vec![row; m]
        }
    };
    for row in &rows {
        if row.len() != k {
            return bad(format!(
                "evolution: sigma_y row with {} entries, the graph has {k} bonds",
                row.len()
            ));
        }
        if row.iter().any(|v| v.is_nan() || *v < 0.0) {
            return bad("evolution: yield stresses must be nonnegative (or inf)");
        }
    }
    Ok(RandomVariable::from_fn(space, k, |s, out| {
        out.copy_from_slice(&rows[s]);
    }))
}

pub fn build_gradient(
    cfg: &EvolutionSection,
    space: &Arc<ProbabilitySpace>,
    k: usize,
) -> Result<Option<GradientPlasticity>, ConfigError> {
    let Some(gamma) = cfg.gamma else {
        return Ok(None);
    };
    if !(cfg.gradient_scale > 0.0) {
        return bad(format!(
            "evolution: gradient_scale must be positive, got {}",
            cfg.gradient_scale
        ));
    }
    let g = RandomVariable::from_fn(space, k * k, |_, out| {
        for i in 0..k {
            out[i * k + i] = cfg.gradient_scale;
        }
    });
    GradientPlasticity::new(gamma, g)
        .map(Some)
        .map_err(|e| ConfigError(format!("evolution: {e}")))
}

pub fn quadrature_rule(points: usize) -> Result<QuadratureRule, ConfigError> {
    if points == 0 || points > 5 {
        return bad(format!("quadrature must use 1..=5 points per axis, got {points}"));
    }
    Ok(if points == 1 {
        QuadratureRule::midpoint()
    } else {
        QuadratureRule::gauss(points)
    })
}

pub fn study_section(cfg: &FileConfig) -> Result<&StudySection, ConfigError> {
    let section = cfg
        .study
        .as_ref()
        .ok_or_else(|| ConfigError("missing [study] section".into()))?;
    if section.epsilons.is_empty() {
        return bad("study: the ε list must not be empty");
    }
    if section.epsilons.iter().any(|&e| !(e > 0.0)) {
        return bad("study: every ε must be positive");
    }
    if section.sides.is_empty() || section.sides.iter().any(|&s| !(s > 0.0)) {
        return bad("study: box sides must be positive");
    }
    Ok(section)
}

pub fn evolution_section(cfg: &FileConfig) -> Result<&EvolutionSection, ConfigError> {
    let section = cfg
        .evolution
        .as_ref()
        .ok_or_else(|| ConfigError("missing [evolution] section".into()))?;
    if !(section.horizon > 0.0) || section.steps == 0 {
        return bad("evolution: horizon and steps must be positive");
    }
    Ok(section)
}

pub fn cg_options(cfg: &FileConfig) -> CgOptions {
    let solver = cfg.solver.clone().unwrap_or_default();
    CgOptions {
        rel_tol: solver.cg_rel_tol,
        max_iter_factor: solver.cg_max_iter_factor,
    }
}

pub fn eris_options(cfg: &FileConfig) -> ErisOptions {
    let solver = cfg.solver.clone().unwrap_or_default();
    ErisOptions {
        kkt_tol: solver.kkt_tol,
        max_alternations: solver.max_alternations,
        cg: CgOptions {
            rel_tol: solver.cg_rel_tol,
            max_iter_factor: solver.cg_max_iter_factor,
        },
        ..ErisOptions::default()
    }
}
