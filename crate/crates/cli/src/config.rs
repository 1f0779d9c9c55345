//! Run configuration: a TOML document with `schema = 1`, one optional table
//! per concern. Unknown keys are errors; omitted keys take the defaults below.

use std::path::{Path, PathBuf};

use parabolic::field::{Boundary, GridSpec, Orientation};
use parabolic::pde::{Law, SolverConfig};
use serde::Deserialize;

pub const SCHEMA: u32 = 1;

/// Every problem found in a configuration, reported together.
#[derive(Clone, Debug, PartialEq)]
pub struct ConfigError {
    pub problems: Vec<String>,
}

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "invalid configuration: {}", self.problems.join("; "))
    }
}

impl std::error::Error for ConfigError {}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema: u32,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    // Studies keep their own grid, solver, law and forcing unless the
    // corresponding table is present.
    pub grid: Option<GridConfig>,
    pub solver: Option<SolverToml>,
    pub law: Option<LawConfig>,
    pub forcing: Option<ForcingConfig>,
    #[serde(default)]
    pub maximal: MaximalSection,
    #[serde(default)]
    pub weights: WeightsSection,
    #[serde(default)]
    pub whitney: WhitneySection,
    #[serde(default)]
    pub truncate: TruncateSection,
    #[serde(default)]
    pub solve: SolveSection,
    #[serde(default)]
    pub study: StudySection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            schema: SCHEMA,
            seed: None,
            out: None,
            grid: None,
            solver: None,
            law: None,
            forcing: None,
            maximal: MaximalSection::default(),
            weights: WeightsSection::default(),
            whitney: WhitneySection::default(),
            truncate: TruncateSection::default(),
            solve: SolveSection::default(),
            study: StudySection::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BoundaryName {
    Dirichlet,
    Periodic,
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridConfig {
    pub n: usize,
    pub components: usize,
    pub cells: usize,
    pub length: f64,
    pub steps: usize,
    pub t_final: f64,
    pub boundary: BoundaryName,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self { n: 1, components: 1, cells: 32, length: 1.0, steps: 32, t_final: 0.05, boundary: BoundaryName::Dirichlet }
    }
}

impl GridConfig {
    pub fn spec(&self) -> GridSpec {
        let b = match self.boundary {
            BoundaryName::Dirichlet => Boundary::Dirichlet,
            BoundaryName::Periodic => Boundary::Periodic,
        };
        GridSpec::uniform(self.n, self.components, self.cells, self.length, self.steps, self.t_final).with_boundary(b)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverToml {
    pub picard_tol: f64,
    pub picard_max: usize,
    pub cg_tol: f64,
    pub cg_max: usize,
}

impl Default for SolverToml {
    fn default() -> Self {
        let s = SolverConfig::default();
        Self { picard_tol: s.picard_tol, picard_max: s.picard_max, cg_tol: s.cg_tol, cg_max: s.cg_max }
    }
}

impl SolverToml {
    pub fn to_solver(self) -> SolverConfig {
        SolverConfig { picard_tol: self.picard_tol, picard_max: self.picard_max, cg_tol: self.cg_tol, cg_max: self.cg_max }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum LawConfig {
    Linear { nu: f64 },
    MinPower { p: f64, nu_inf: f64 },
    MaxPower { p: f64, nu_inf: f64, cap: f64 },
}

impl Default for LawConfig {
    fn default() -> Self {
        Self::MinPower { p: 3.0, nu_inf: 1.0 }
    }
}

impl LawConfig {
    pub fn to_law(self) -> Law {
        match self {
            Self::Linear { nu } => Law::Linear { nu },
            Self::MinPower { p, nu_inf } => Law::MinPower { p, nu_inf },
            Self::MaxPower { p, nu_inf, cap } => Law::MaxPower { p, nu_inf, cap },
        }
    }
}

/// Either a field file or a lattice of mollified point masses.
#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ForcingConfig {
    pub file: Option<PathBuf>,
    pub width_cells: f64,
    pub per_axis: usize,
    pub t_frac: f64,
    pub mass: f64,
}

impl Default for ForcingConfig {
    fn default() -> Self {
        Self { file: None, width_cells: 2.0, per_axis: 1, t_frac: 0.25, mass: 1.0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OrientationName {
    Backward,
    Symmetric,
}

impl OrientationName {
    pub fn to_orientation(self) -> Orientation {
        match self {
            Self::Backward => Orientation::Backward,
            Self::Symmetric => Orientation::Symmetric,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaximalSection {
    /// Radius ladder; the dyadic ladder of the grid when absent.
    pub radii: Option<Vec<f64>>,
    pub q: f64,
    pub restrict: Option<f64>,
    pub orientation: OrientationName,
}

impl Default for MaximalSection {
    fn default() -> Self {
        Self { radii: None, q: 1.0, restrict: None, orientation: OrientationName::Backward }
    }
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WeightsSection {
    pub q0: f64,
    pub ps: Vec<f64>,
    pub rh_threshold: f64,
    pub s_max: f64,
}

impl Default for WeightsSection {
    fn default() -> Self {
        Self { q0: 1.5, ps: vec![1.5, 2.0, 3.0, 4.0], rh_threshold: 2.0, s_max: 4.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WhitneySection {
    /// Level of the bad set `{M f > lambda}`; `fraction * max M f` when absent.
    pub lambda: Option<f64>,
    pub fraction: f64,
    pub orientation: OrientationName,
}

impl Default for WhitneySection {
    fn default() -> Self {
        Self { lambda: None, fraction: 0.25, orientation: OrientationName::Backward }
    }
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TruncateSection {
    /// Solution and flux data as field files; both or neither. Without them
    /// the pair is the heat flow driven by `[forcing]`.
    pub w: Option<PathBuf>,
    pub data: Option<PathBuf>,
    pub coeff: Option<PathBuf>,
    /// Residual of whatever produced the files.
    pub solver_residual: f64,
    /// Explicit levels, increasing; otherwise `points` levels `2^(-i/2)` apart
    /// ending at the largest dyadic level that changes `w`.
    pub lambdas: Option<Vec<f64>>,
    pub points: usize,
    pub q: f64,
    pub margin: usize,
    pub wall_tol: f64,
    pub gate_factor: f64,
    pub gate_floor: f64,
    pub pair_samples: usize,
}

impl Default for TruncateSection {
    fn default() -> Self {
        Self {
            w: None,
            data: None,
            coeff: None,
            solver_residual: 0.0,
            lambdas: None,
            points: 8,
            q: 1.5,
            margin: 4,
            wall_tol: 0.05,
            gate_factor: 10.0,
            gate_floor: 1e-13,
            pair_samples: 2000,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolveSection {
    /// Initial values at `t = 0` as a field file (first time slice is used).
    pub initial: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StudyName {
    Apriori,
    GoodLambda,
    Uniqueness,
    Existence,
    Convergence,
    Truncation,
}

impl StudyName {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Apriori => "apriori",
            Self::GoodLambda => "good_lambda",
            Self::Uniqueness => "uniqueness",
            Self::Existence => "existence",
            Self::Convergence => "convergence",
            Self::Truncation => "truncation",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StudySection {
    pub name: StudyName,
    /// Main ladder: forcing scales, dilations, level multipliers, cell counts
    /// or slab bases, depending on the study.
    pub ladder: Option<Vec<f64>>,
}

impl Default for StudySection {
    fn default() -> Self {
        Self { name: StudyName::Convergence, ladder: None }
    }
}

/// Parses and validates a configuration document.
pub fn parse_config(text: &str) -> Result<RunConfig, ConfigError> {
    let cfg: RunConfig = toml::from_str(text).map_err(|e| ConfigError { problems: vec![e.message().to_string()] })?;
    let problems = cfg.validate();
    if problems.is_empty() {
        Ok(cfg)
    } else {
        Err(ConfigError { problems })
    }
}

pub fn load_config(path: &Path) -> Result<RunConfig, ConfigError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| ConfigError { problems: vec![format!("cannot read {}: {e}", path.display())] })?;
    parse_config(&text)
}

fn positive(p: &mut Vec<String>, name: &str, v: f64) {
    if !(v > 0.0 && v.is_finite()) {
        p.push(format!("{name} must be positive and finite, got {v}"));
    }
}

fn ladder(p: &mut Vec<String>, name: &str, v: &[f64]) {
    if v.is_empty() {
        p.push(format!("{name}: ladder is empty"));
    } else if v.windows(2).any(|w| !(w[1] > w[0])) || v.iter().any(|x| !(*x > 0.0 && x.is_finite())) {
        p.push(format!("{name}: ladder must be increasing"));
    }
}

fn exists(p: &mut Vec<String>, name: &str, path: &Option<PathBuf>) {
    if let Some(f) = path {
        if !f.is_file() {
            p.push(format!("{name}: no such file {}", f.display()));
        }
    }
}

impl RunConfig {
    /// All violations, in document order.
    pub fn validate(&self) -> Vec<String> {
        let mut p = Vec::new();
        if self.schema != SCHEMA {
            p.push(format!("schema must be {SCHEMA}, got {}", self.schema));
        }
        if let Some(g) = &self.grid {
            if g.n != 1 && g.n != 2 {
                p.push(format!("grid.n must be 1 or 2, got {}", g.n));
            }
            if g.components == 0 || g.cells == 0 || g.steps == 0 {
                p.push("grid.components, grid.cells and grid.steps must be at least 1".into());
            }
            positive(&mut p, "grid.length", g.length);
            positive(&mut p, "grid.t_final", g.t_final);
        }
        if let Some(s) = &self.solver {
            positive(&mut p, "solver.picard_tol", s.picard_tol);
            positive(&mut p, "solver.cg_tol", s.cg_tol);
        }
        match self.law.unwrap_or_default() {
            LawConfig::Linear { nu } => positive(&mut p, "law.nu", nu),
            LawConfig::MinPower { p: e, nu_inf } => {
                if !(e > 2.0) {
                    p.push(format!("law.p must exceed 2 for min-power, got {e}"));
                }
                positive(&mut p, "law.nu_inf", nu_inf);
            }
            LawConfig::MaxPower { p: e, nu_inf, cap } => {
                if !(e > 1.0 && e < 2.0) {
                    p.push(format!("law.p must lie in (1, 2) for max-power, got {e}"));
                }
                positive(&mut p, "law.nu_inf", nu_inf);
                if !(cap >= nu_inf) {
                    p.push(format!("law.cap must be at least law.nu_inf, got {cap}"));
                }
            }
        }
        let f = &self.forcing.clone().unwrap_or_default();
        exists(&mut p, "forcing.file", &f.file);
        positive(&mut p, "forcing.width_cells", f.width_cells);
        if f.per_axis == 0 {
            p.push("forcing.per_axis must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&f.t_frac) {
            p.push(format!("forcing.t_frac must lie in [0, 1], got {}", f.t_frac));
        }
        if !(f.mass >= 0.0 && f.mass.is_finite()) {
            p.push(format!("forcing.mass must be non-negative, got {}", f.mass));
        }

        let m = &self.maximal;
        if let Some(r) = &m.radii {
            ladder(&mut p, "maximal.radii", r);
        }
        if !(m.q >= 1.0 && m.q.is_finite()) {
            p.push(format!("maximal.q must be at least 1, got {}", m.q));
        }
        if let Some(r) = m.restrict {
            positive(&mut p, "maximal.restrict", r);
        }

        let w = &self.weights;
        if !(w.q0 > 1.0 && w.q0 < 2.0) {
            p.push(format!("weights.q0 must lie in (1, 2), got {}", w.q0));
        }
        ladder(&mut p, "weights.ps", &w.ps);
        if w.ps.iter().any(|&e| !(e > 1.0)) {
            p.push("weights.ps entries must exceed 1".into());
        }
        if !(w.s_max > 1.0) {
            p.push(format!("weights.s_max must exceed 1, got {}", w.s_max));
        }
        positive(&mut p, "weights.rh_threshold", w.rh_threshold);

        let wh = &self.whitney;
        if let Some(l) = wh.lambda {
            positive(&mut p, "whitney.lambda", l);
        }
        if !(wh.fraction > 0.0 && wh.fraction <= 1.0) {
            p.push(format!("whitney.fraction must lie in (0, 1], got {}", wh.fraction));
        }

        let t = &self.truncate;
        if t.w.is_some() != t.data.is_some() {
            p.push("truncate.w and truncate.data must be given together".into());
        }
        if t.coeff.is_some() && t.w.is_none() {
            p.push("truncate.coeff needs truncate.w and truncate.data".into());
        }
        exists(&mut p, "truncate.w", &t.w);
        exists(&mut p, "truncate.data", &t.data);
        exists(&mut p, "truncate.coeff", &t.coeff);
        if let Some(l) = &t.lambdas {
            ladder(&mut p, "truncate.lambdas", l);
        } else if t.points < 1 {
            p.push("truncate.points must be at least 1".into());
        }
        if !(t.solver_residual >= 0.0 && t.solver_residual.is_finite()) {
            p.push(format!("truncate.solver_residual must be non-negative, got {}", t.solver_residual));
        }
        if !(t.q > 1.0 && t.q.is_finite()) {
            p.push(format!("truncate.q must exceed 1, got {}", t.q));
        }
        positive(&mut p, "truncate.gate_factor", t.gate_factor);
        positive(&mut p, "truncate.gate_floor", t.gate_floor);
        positive(&mut p, "truncate.wall_tol", t.wall_tol);

        exists(&mut p, "solve.initial", &self.solve.initial);

        if let Some(l) = &self.study.ladder {
            ladder(&mut p, "study.ladder", l);
            match self.study.name {
                StudyName::Uniqueness => p.push("study.ladder does not apply to the uniqueness study".into()),
                StudyName::Convergence if l.iter().any(|c| c.fract() != 0.0) => {
                    p.push("study.ladder holds cell counts for the convergence study".into())
                }
                _ => {}
            }
        }
        p
    }

    pub fn grid_spec(&self) -> GridSpec {
        self.grid.clone().unwrap_or_default().spec()
    }

    pub fn solver_config(&self) -> SolverConfig {
        self.solver.unwrap_or_default().to_solver()
    }
}
