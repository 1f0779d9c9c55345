//! Batch studies: a-priori scaling, good-lambda decay, uniqueness,
//! the truncated-forcing existence pipeline, solver convergence and the
//! truncation sweep.
//!
//! Every study returns a `Table` of measurements plus named `Check`s. All
//! randomness is drawn from the study's seed, so reruns are bit-identical.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::field::{
    discrete_gradient, lp_norm, weight_measure, weighted_lp_norm, Field, Grid, GridSpec, Orientation, Rank,
};
use crate::liptrunc::{FluxPair, TruncationConfig, TruncationResult, TruncationSetup};
use crate::maximal::{maximal, maximal_q_restricted, MaximalConfig};
use crate::pde::{
    algebra_modulus, check_law, mollified_point_mass, solve_linear, solve_nonlinear, solve_nonlinear_from,
    truncate_forcing, Law, LinearTensor, ProblemData, SolverConfig,
};

/// Standard spike widths, in cells.
pub const SPIKE_WIDTHS: [f64; 3] = [2.0, 4.0, 8.0];

/// Rectangular table of finite numbers with named columns.
#[derive(Clone, Debug, PartialEq)]
pub struct Table {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl Table {
    pub fn new(columns: &[&str]) -> Self {
        Self { columns: columns.iter().map(|c| c.to_string()).collect(), rows: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<f64>) {
        debug_assert_eq!(row.len(), self.columns.len());
        self.rows.push(row);
    }

    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let j = self.columns.iter().position(|c| c == name)?;
        Some(self.rows.iter().map(|r| r[j]).collect())
    }

    /// Header plus one line per row, values as `{:.12e}`. Non-finite values
    /// are rejected.
    pub fn to_csv(&self) -> Result<String> {
        let mut out = self.columns.join(",");
        out.push('\n');
        for (i, row) in self.rows.iter().enumerate() {
            if row.len() != self.columns.len() {
                return Err(Error::InvalidParameter(format!("row {i} has {} values", row.len())));
            }
            if let Some(j) = row.iter().position(|v| !v.is_finite()) {
                return Err(Error::InvalidParameter(format!(
                    "non-finite value in row {i}, column {}",
                    self.columns[j]
                )));
            }
            let line: Vec<String> = row.iter().map(|v| format!("{v:.12e}")).collect();
            out.push_str(&line.join(","));
            out.push('\n');
        }
        Ok(out)
    }
}

/// One assertion-class criterion of a study.
#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub bound: f64,
    pub passed: bool,
}

impl Check {
    pub fn at_most(name: impl Into<String>, value: f64, bound: f64) -> Self {
        Self { name: name.into(), value, bound, passed: value <= bound }
    }

    pub fn holds(name: impl Into<String>, ok: bool) -> Self {
        let v = if ok { 1.0 } else { 0.0 };
        Self { name: name.into(), value: v, bound: 1.0, passed: ok }
    }
}

/// Output of any study.
#[derive(Clone, Debug, PartialEq)]
pub struct Report {
    pub study: String,
    pub table: Table,
    /// Secondary tables (name, table).
    pub extra: Vec<(String, Table)>,
    /// Recorded constants that are not asserted.
    pub recorded: Vec<(String, f64)>,
    pub checks: Vec<Check>,
}

impl Report {
    fn new(study: &str, table: Table) -> Self {
        Self { study: study.into(), table, extra: Vec::new(), recorded: Vec::new(), checks: Vec::new() }
    }

    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn recorded(&self, name: &str) -> Option<f64> {
        self.recorded.iter().find(|(n, _)| n == name).map(|r| r.1)
    }

    pub fn check(&self, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == name)
    }
}

/// Least-squares slope of `ln y` against `ln x`; `None` with fewer than two
/// usable (positive) points.
pub fn loglog_slope(x: &[f64], y: &[f64]) -> Option<f64> {
    let pts: Vec<(f64, f64)> =
        x.iter().zip(y).filter(|(a, b)| **a > 0.0 && **b > 0.0).map(|(a, b)| (a.ln(), b.ln())).collect();
    if pts.len() < 2 {
        return None;
    }
    let m = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / m;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / m;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    (sxx > 0.0).then(|| sxy / sxx)
}

/// Sum of mollified point masses on a lattice: `per_axis` positions per
/// spatial axis at `(j + 1) / (per_axis + 1)` of the extent, all at time
/// `t_frac * T`. Returned as a flux field (`n x N`, every entry equal).
pub fn spiky_forcing(grid: &Grid, width_cells: f64, per_axis: usize, t_frac: f64, mass: f64) -> Result<Field> {
    if per_axis == 0 {
        return Err(Error::InvalidParameter("spike lattice is empty".into()));
    }
    let n = grid.n();
    let ext = &grid.spec().extents;
    let t0 = t_frac * grid.spec().t_final;
    let width = width_cells * grid.h();
    let mut total = Field::zeros(grid, Rank::Scalar);
    let count = per_axis.pow(n as u32);
    for idx in 0..count {
        let mut x0 = [0.0; 2];
        let mut rest = idx;
        for a in 0..n {
            let j = rest % per_axis;
            rest /= per_axis;
            x0[a] = grid.origin()[a] + ext[a] * (j + 1) as f64 / (per_axis + 1) as f64;
        }
        let m = mollified_point_mass(grid, &x0[..n], t0, width, mass)?;
        total = total.zip_map(&m, |a, b| a + b)?;
    }
    let rank = Rank::Matrix(n, grid.components());
    let k = rank.comps();
    let values = total.values().iter().flat_map(|&v| std::iter::repeat_n(v, k)).collect();
    Field::from_values(grid, rank, values)
}

fn gradient_of(u: &Field) -> Result<Field> {
    discrete_gradient(u)
}

/// `(1 + M f)^e` for any real exponent, with `M` over centred cylinders as
/// in `weight_from_maximal`.
pub fn maximal_power_weight(f: &Field, e: f64) -> Result<Field> {
    let m = maximal(f, &MaximalConfig::dyadic(f.grid()).with_orientation(Orientation::Symmetric))?;
    Ok(m.map(|v| (1.0 + v).powf(e)))
}

// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct AprioriConfig {
    pub grid: GridSpec,
    pub law: Law,
    pub qs: Vec<f64>,
    /// Forcing multipliers, increasing.
    pub scales: Vec<f64>,
    pub width_cells: f64,
    pub mass: f64,
    /// Ladder points (from the top) entering the slope fit.
    pub fit_points: usize,
    pub slope_max: f64,
    pub solver: SolverConfig,
}

impl Default for AprioriConfig {
    fn default() -> Self {
        Self {
            grid: GridSpec::uniform(1, 1, 32, 1.0, 32, 0.05),
            law: Law::MinPower { p: 3.0, nu_inf: 1.0 },
            qs: vec![1.3, 1.7, 2.5],
            scales: (0..6).map(|j| 2f64.powi(j)).collect(),
            width_cells: 2.0,
            mass: 1.0,
            fit_points: 4,
            slope_max: 1.05,
            solver: SolverConfig::default(),
        }
    }
}

fn check_ladder(v: &[f64], what: &str) -> Result<()> {
    if v.is_empty() {
        return Err(Error::InvalidParameter(format!("{what} ladder is empty")));
    }
    if v.windows(2).any(|w| !(w[1] > w[0])) || v.iter().any(|x| !(x.is_finite() && *x > 0.0)) {
        return Err(Error::InvalidParameter(format!("{what} ladder must be increasing")));
    }
    Ok(())
}

/// Gradient norms of solutions against forcing norms along a forcing
/// ladder, in `L^q` and in `L^q` weighted by `(1 + M f0)^(q-2)`.
pub fn apriori_scaling_study(cfg: &AprioriConfig) -> Result<Report> {
    check_ladder(&cfg.scales, "forcing")?;
    if cfg.fit_points < 2 || cfg.fit_points > cfg.scales.len() {
        return Err(Error::InvalidParameter(format!("cannot fit {} of {} ladder points", cfg.fit_points, cfg.scales.len())));
    }
    let grid = Grid::new(cfg.grid.clone())?;
    let f0 = spiky_forcing(&grid, cfg.width_cells, 1, 0.25, cfg.mass)?;
    let unit = Field::constant(&grid, Rank::Scalar, 1.0);
    let solves: Vec<(Field, Field)> = cfg
        .scales
        .iter()
        .map(|&s| {
            let f = f0.scaled(s);
            let sol = solve_nonlinear(&cfg.law, &ProblemData::homogeneous(f.clone()), &cfg.solver)?;
            if !sol.converged {
                return Err(Error::NoConvergence(sol.residual));
            }
            Ok((f, gradient_of(&sol.u)?))
        })
        .collect::<Result<_>>()?;

    let mut table = Table::new(&["q", "weighted", "scale", "f_norm", "grad_norm", "ratio"]);
    let mut report_checks = Vec::new();
    let mut recorded = Vec::new();
    for &q in &cfg.qs {
        let weights = [unit.clone(), maximal_power_weight(&f0, q - 2.0)?];
        for (wi, w) in weights.iter().enumerate() {
            let mut fx = Vec::new();
            let mut gy = Vec::new();
            let mut envelope: f64 = 0.0;
            for (&s, (f, g)) in cfg.scales.iter().zip(&solves) {
                let fnorm = weighted_lp_norm(f, w, q)?;
                let gnorm = weighted_lp_norm(g, w, q)?;
                let ratio = gnorm / (1.0 + fnorm);
                envelope = envelope.max(ratio);
                table.push(vec![q, wi as f64, s, fnorm, gnorm, ratio]);
                fx.push(fnorm);
                gy.push(gnorm);
            }
            let top = cfg.scales.len() - cfg.fit_points;
            let slope = loglog_slope(&fx[top..], &gy[top..]).unwrap_or(0.0);
            let tag = format!("q={q} weighted={wi}");
            recorded.push((format!("envelope {tag}"), envelope));
            report_checks.push(Check::at_most(format!("slope {tag}"), slope, cfg.slope_max));
        }
    }
    let mut report = Report::new("apriori", table);
    report.recorded = recorded;
    report.checks = report_checks;
    Ok(report)
}

// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct GoodLambdaConfig {
    pub grid: GridSpec,
    /// Oscillation of the coefficient `1 + delta * U(-1, 1)`.
    pub delta: f64,
    /// Exponent of the maximal functions.
    pub q: f64,
    pub width_cells: f64,
    pub mass: f64,
    /// Levels `start * Lambda * 2^j`, `j < lambdas`, kept while `O_lambda`
    /// is nonempty.
    pub lambda_start: f64,
    pub lambdas: usize,
    /// `eps = 2^(eps_top - i)`, `i < eps_levels`.
    pub eps_top: i32,
    pub eps_levels: usize,
    pub ks: Vec<f64>,
    /// Constant in the redistribution target `ratio <= c (eps + delta)`.
    pub redistribution: f64,
    /// Exponent of the weight `(1 + M f)^e`; `None` for `omega = 1`.
    pub weight_exponent: Option<f64>,
    pub seed: u64,
    pub solver: SolverConfig,
}

impl Default for GoodLambdaConfig {
    fn default() -> Self {
        Self {
            grid: GridSpec::uniform(1, 1, 48, 1.0, 48, 0.05),
            delta: 0.05,
            q: 1.0,
            width_cells: 2.0,
            mass: 1.0,
            lambda_start: 1.0,
            lambdas: 8,
            eps_top: 3,
            eps_levels: 11,
            ks: vec![4.0, 8.0, 16.0, 32.0],
            redistribution: 1.0,
            weight_exponent: None,
            seed: 1,
            solver: SolverConfig::default(),
        }
    }
}

/// Measures `omega(O_{k lambda} ∩ {M_q f <= eps lambda}) / omega(O_lambda)`
/// for a linear system with a coefficient oscillating by `delta`.
pub fn good_lambda_probe(cfg: &GoodLambdaConfig) -> Result<Report> {
    check_ladder(&cfg.ks, "dilation")?;
    if cfg.lambdas == 0 || cfg.eps_levels == 0 {
        return Err(Error::InvalidParameter("level ladders are empty".into()));
    }
    if !(cfg.delta >= 0.0 && cfg.delta < 1.0) {
        return Err(Error::InvalidParameter(format!("oscillation must lie in [0, 1), got {}", cfg.delta)));
    }
    let grid = Grid::new(cfg.grid.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let coeff: Vec<f64> = (0..grid.cells()).map(|_| 1.0 + cfg.delta * rng.gen_range(-1.0..1.0)).collect();
    let tensor = LinearTensor::new(Field::from_values(&grid, Rank::Scalar, coeff)?)?;
    let t_frac = rng.gen_range(0.2..0.3);
    let f = spiky_forcing(&grid, cfg.width_cells, 1, t_frac, cfg.mass)?;
    let u = solve_linear(&tensor, &ProblemData::homogeneous(f.clone()), &cfg.solver)?.u;
    let g = gradient_of(&u)?;
    let mcfg = MaximalConfig::dyadic(&grid).with_q(cfg.q);
    let mg = maximal_q_restricted(&g, &mcfg)?;
    let mf = maximal_q_restricted(&f, &mcfg)?;
    let omega = match cfg.weight_exponent {
        Some(e) => maximal_power_weight(&f, e)?,
        None => Field::constant(&grid, Rank::Scalar, 1.0),
    };
    let big = lp_norm(&g, cfg.q)? / grid.total_volume().powf(1.0 / cfg.q);
    let base = cfg.lambda_start * big;
    let mgv = mg.values();
    let mfv = mf.values();
    let lambdas: Vec<f64> = (0..cfg.lambdas)
        .map(|j| base * 2f64.powi(j as i32))
        .filter(|&l| mgv.iter().any(|&v| v > l))
        .collect();
    let eps: Vec<f64> = (0..cfg.eps_levels).map(|i| 2f64.powi(cfg.eps_top - i as i32)).collect();

    let mut table = Table::new(&["k", "lambda", "eps", "omega_o", "omega_u", "ratio"]);
    let mut working = Vec::new();
    let mut monotone_all = true;
    let mut floors = Vec::new();
    for &k in &cfg.ks {
        let mut monotone = true;
        let mut within = true;
        let mut floor: f64 = 0.0;
        let mut worst = vec![0.0f64; eps.len()];
        for &lambda in &lambdas {
            let o = weight_measure(&omega, |c| mgv[c] > lambda);
            let mut prev = f64::INFINITY;
            for (i, &e) in eps.iter().enumerate() {
                let u_meas = weight_measure(&omega, |c| mgv[c] > k * lambda && mfv[c] <= e * lambda);
                let ratio = if o > 0.0 { u_meas / o } else { 0.0 };
                monotone &= ratio <= prev;
                within &= ratio <= cfg.redistribution * (e + cfg.delta);
                prev = ratio;
                worst[i] = worst[i].max(ratio);
                table.push(vec![k, lambda, e, o, u_meas, ratio]);
            }
            floor = floor.max(prev);
        }
        floors.push((k, floor, loglog_slope(&eps, &worst)));
        monotone_all &= monotone;
        working.push(monotone && within);
    }
    let smallest = cfg.ks.iter().zip(&working).find(|(_, &w)| w).map(|(&k, _)| k);
    let mut report = Report::new("good_lambda", table);
    report.recorded.push(("Lambda".into(), big));
    report.recorded.push(("levels".into(), lambdas.len() as f64));
    report.recorded.push(("smallest_k".into(), smallest.unwrap_or(f64::MAX)));
    for (k, fl, decay) in floors {
        report.recorded.push((format!("floor k={k}"), fl));
        if let Some(d) = decay {
            report.recorded.push((format!("decay exponent k={k}"), d));
        }
    }
    report.checks.push(Check::holds("monotone in eps", monotone_all));
    report.checks.push(Check::holds("some k works", smallest.is_some()));
    Ok(report)
}

// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct UniquenessConfig {
    pub grid: GridSpec,
    pub laws: Vec<Law>,
    pub width_cells: f64,
    pub mass: f64,
    /// Amplitude of the random initial iterate.
    pub guess_amplitude: f64,
    pub tol: f64,
    pub deltas: Vec<f64>,
    pub samples: usize,
    pub seed: u64,
    pub solver: SolverConfig,
}

/// Ten laws that are linear at infinity: four of min-power type, four of
/// max-power type, two linear.
pub fn standard_laws() -> Vec<Law> {
    vec![
        Law::MinPower { p: 2.5, nu_inf: 1.0 },
        Law::MinPower { p: 3.0, nu_inf: 1.0 },
        Law::MinPower { p: 4.0, nu_inf: 2.0 },
        Law::MinPower { p: 3.0, nu_inf: 0.5 },
        Law::MaxPower { p: 1.5, nu_inf: 1.0, cap: 10.0 },
        Law::MaxPower { p: 1.3, nu_inf: 1.0, cap: 4.0 },
        Law::MaxPower { p: 1.8, nu_inf: 0.5, cap: 5.0 },
        Law::MaxPower { p: 1.5, nu_inf: 2.0, cap: 20.0 },
        Law::Linear { nu: 1.0 },
        Law::Linear { nu: 0.3 },
    ]
}

impl Default for UniquenessConfig {
    fn default() -> Self {
        Self {
            grid: GridSpec::uniform(1, 1, 24, 1.0, 24, 0.05),
            laws: standard_laws(),
            width_cells: 2.0,
            mass: 1.0,
            guess_amplitude: 1.0,
            tol: 1e-8,
            deltas: vec![0.5, 0.1, 0.01],
            samples: 2000,
            seed: 3,
            solver: SolverConfig::default(),
        }
    }
}

fn l2_diff(a: &Field, b: &Field) -> f64 {
    a.values().iter().zip(b.values()).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

fn l2(a: &Field) -> f64 {
    a.values().iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Solves each law from the zero iterate and from a random one and compares.
pub fn uniqueness_probe(cfg: &UniquenessConfig) -> Result<Report> {
    if cfg.laws.is_empty() {
        return Err(Error::InvalidParameter("no laws to probe".into()));
    }
    let grid = Grid::new(cfg.grid.clone())?;
    let f = spiky_forcing(&grid, cfg.width_cells, 1, 0.25, cfg.mass)?;
    let data = ProblemData::homogeneous(f);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let dim = grid.n() * grid.components();
    let mut table = Table::new(&["law", "picard_zero", "picard_random", "rel_diff", "linear_at_infinity"]);
    let mut modulus = Table::new(&["law", "delta", "c_scale1", "c_scale10"]);
    let mut worst: f64 = 0.0;
    let mut all_lai = true;
    for (i, law) in cfg.laws.iter().enumerate() {
        let lai = check_law(law, grid.n(), grid.components(), cfg.samples, cfg.seed)?.linear_at_infinity();
        all_lai &= lai;
        let vals = (0..grid.cells() * grid.components()).map(|_| cfg.guess_amplitude * rng.gen_range(-1.0..1.0)).collect();
        let guess = Field::from_values(&grid, Rank::Vector(grid.components()), vals)?;
        let zero = Field::zeros(&grid, Rank::Vector(grid.components()));
        let a = solve_nonlinear_from(law, &data, &cfg.solver, Some(&zero))?;
        let b = solve_nonlinear_from(law, &data, &cfg.solver, Some(&guess))?;
        let norm = l2(&a.u).max(l2(&b.u));
        let rel = if norm > 0.0 { l2_diff(&a.u, &b.u) / norm } else { 0.0 };
        worst = worst.max(rel);
        let it = |s: &crate::pde::Solution| s.iterations.iter().sum::<usize>() as f64;
        table.push(vec![i as f64, it(&a), it(&b), rel, lai as u8 as f64]);
        let s1 = algebra_modulus(law, dim, &cfg.deltas, 1.0, cfg.samples, cfg.seed);
        let s10 = algebra_modulus(law, dim, &cfg.deltas, 10.0, cfg.samples, cfg.seed);
        for ((d, c1), (_, c10)) in s1.into_iter().zip(s10) {
            modulus.push(vec![i as f64, d, c1, c10]);
        }
    }
    let mut report = Report::new("uniqueness", table);
    report.extra.push(("algebra_modulus".into(), modulus));
    report.checks.push(Check::holds("laws linear at infinity", all_lai));
    report.checks.push(Check::at_most("two-start agreement", worst, cfg.tol));
    Ok(report)
}

// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct ExistenceConfig {
    pub grid: GridSpec,
    pub law: Law,
    pub q: f64,
    /// Truncation levels, increasing; the last one is the reference.
    pub ks: Vec<f64>,
    pub width_cells: f64,
    /// Largest forcing magnitude; the spike is rescaled to reach it.
    pub peak: f64,
    pub uniform_ratio: f64,
    pub solver: SolverConfig,
}

impl Default for ExistenceConfig {
    fn default() -> Self {
        Self {
            // tau ~ h^2 so the spike is resolved in time
            grid: GridSpec::uniform(1, 1, 64, 1.0, 205, 0.05),
            law: Law::MinPower { p: 3.0, nu_inf: 1.0 },
            q: 1.3,
            ks: (0..7).map(|j| 2f64.powi(j)).collect(),
            width_cells: 2.0,
            peak: 48.0,
            uniform_ratio: 4.0,
            // partially truncated spikes contract slowly under Picard
            solver: SolverConfig { picard_max: 20_000, ..SolverConfig::default() },
        }
    }
}

/// Exponent strictly between 1 and `min(2, q)`.
pub fn midpoint_exponent(q: f64) -> f64 {
    0.5 * (1.0 + q.min(2.0))
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let m = s.len();
    if m % 2 == 1 {
        s[m / 2]
    } else {
        0.5 * (s[m / 2 - 1] + s[m / 2])
    }
}

/// Solves with forcings truncated at each `k` and records weighted bounds
/// and the distance to the reference solution.
pub fn existence_pipeline(cfg: &ExistenceConfig) -> Result<Report> {
    check_ladder(&cfg.ks, "truncation")?;
    if !(cfg.q > 1.0) {
        return Err(Error::InvalidParameter(format!("integrability exponent must exceed 1, got {}", cfg.q)));
    }
    let grid = Grid::new(cfg.grid.clone())?;
    let q0 = midpoint_exponent(cfg.q);
    if !(cfg.peak >= 0.0 && cfg.peak.is_finite()) {
        return Err(Error::InvalidParameter(format!("forcing peak must be finite and nonnegative, got {}", cfg.peak)));
    }
    let spike = spiky_forcing(&grid, cfg.width_cells, 1, 0.25, 1.0)?;
    let f = spike.scaled(cfg.peak / spike.max_abs());
    let omega0 = maximal_power_weight(&f, q0 - 2.0)?;
    let unit = Field::constant(&grid, Rank::Scalar, 1.0);
    let mut us = Vec::new();
    let mut fks = Vec::new();
    for &k in &cfg.ks {
        let fk = truncate_forcing(&f, k)?;
        let sol = solve_nonlinear(&cfg.law, &ProblemData::homogeneous(fk.clone()), &cfg.solver)?;
        if !sol.converged {
            return Err(Error::NoConvergence(sol.residual));
        }
        us.push(sol.u);
        fks.push(fk);
    }
    let reference = us.last().unwrap().clone();
    let mut table =
        Table::new(&["k", "f_l2w0", "grad_l2w0", "f_lq", "grad_lq", "cauchy"]);
    let mut col = Vec::new();
    let mut cauchy = Vec::new();
    for ((&k, u), fk) in cfg.ks.iter().zip(&us).zip(&fks) {
        let g = gradient_of(u)?;
        let diff = u.zip_map(&reference, |a, b| a - b)?;
        let c = lp_norm(&diff, q0)? + lp_norm(&gradient_of(&diff)?, q0)?;
        let row = vec![
            k,
            weighted_lp_norm(fk, &omega0, 2.0)?,
            weighted_lp_norm(&g, &omega0, 2.0)?,
            weighted_lp_norm(fk, &unit, cfg.q)?,
            weighted_lp_norm(&g, &unit, cfg.q)?,
            c,
        ];
        col.push(row[2]);
        cauchy.push(c);
        table.push(row);
    }
    let med = median(&col);
    let max = col.iter().copied().fold(0.0, f64::max);
    let ratio = if med > 0.0 { max / med } else if max == 0.0 { 1.0 } else { f64::INFINITY };
    let decreasing = cauchy.windows(2).all(|w| w[1] < w[0]);
    let mut report = Report::new("existence", table);
    report.recorded.push(("q0".into(), q0));
    report.checks.push(Check::at_most("uniform weighted bound", ratio, cfg.uniform_ratio));
    report.checks.push(Check::holds("cauchy column decreasing", decreasing));
    Ok(report)
}

// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct ConvergenceConfig {
    /// Cell counts of the refinement ladder (each the double of the last).
    pub cells: Vec<usize>,
    /// Multiplier of the initial profile.
    pub amplitude: f64,
    /// `tau = ratio * h^2`.
    pub tau_ratio: f64,
    pub t_final: f64,
    pub ratio_range: (f64, f64),
    pub solver: SolverConfig,
}

impl Default for ConvergenceConfig {
    fn default() -> Self {
        Self { cells: vec![8, 16, 32, 64], amplitude: 1.0, tau_ratio: 1.0, t_final: 0.1, ratio_range: (3.0, 5.0), solver: SolverConfig::default() }
    }
}

/// Heat flow of `c sin(pi x)` on `(0, 1)`: errors of the values and of the
/// face gradients (wall faces included) against `c sin(pi x) exp(-pi^2 t)`.
pub fn convergence_study(cfg: &ConvergenceConfig) -> Result<Report> {
    if cfg.cells.len() < 2 || cfg.cells.windows(2).any(|w| w[1] != 2 * w[0]) {
        return Err(Error::InvalidParameter("refinement ladder must double the cell count".into()));
    }
    use std::f64::consts::PI;
    let mut table = Table::new(&["cells", "h", "tau", "l2_error", "grad_error"]);
    for &m in &cfg.cells {
        let h = 1.0 / m as f64;
        let steps = (cfg.t_final / (cfg.tau_ratio * h * h)).round().max(1.0) as usize;
        let grid = Grid::new(GridSpec::uniform(1, 1, m, 1.0, steps, cfg.t_final))?;
        let c = cfg.amplitude;
        let init: Vec<f64> = (0..m).map(|i| c * (PI * grid.x_center(0, i)).sin()).collect();
        let data = ProblemData { initial: Some(init), ..ProblemData::zero(&grid) };
        let u = solve_linear(&LinearTensor::constant(&grid, 1.0)?, &data, &cfg.solver)?.u;
        let (mut e2, mut g2) = (0.0, 0.0);
        let tau = grid.tau();
        for k in 0..steps {
            let t = (k + 1) as f64 * tau;
            let decay = c * (-PI * PI * t).exp();
            let at = |i: usize| u.values()[grid.index(k, [i, 0])];
            for i in 0..m {
                let x = grid.x_center(0, i);
                e2 += (at(i) - (PI * x).sin() * decay).powi(2);
            }
            for face in 0..=m {
                let left = if face == 0 { -at(0) } else { at(face - 1) };
                let right = if face == m { -at(m - 1) } else { at(face) };
                let exact = PI * (PI * face as f64 * h).cos() * decay;
                g2 += ((right - left) / h - exact).powi(2);
            }
        }
        table.push(vec![m as f64, h, tau, (e2 * h * tau).sqrt(), (g2 * h * tau).sqrt()]);
    }
    let mut report = Report::new("convergence", table);
    for (name, col) in [("l2_error", "value"), ("grad_error", "gradient")] {
        let e = report.table.column(name).unwrap();
        for (i, w) in e.windows(2).enumerate() {
            let r = if w[1] > 0.0 { w[0] / w[1] } else { f64::INFINITY };
            let (lo, hi) = cfg.ratio_range;
            report.checks.push(Check {
                name: format!("{col} ratio {}", i + 1),
                value: r,
                bound: hi,
                passed: r >= lo && r <= hi,
            });
        }
    }
    Ok(report)
}

// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct TruncationStudyConfig {
    pub grid: GridSpec,
    pub width_cells: f64,
    pub mass: f64,
    /// Ladder length; levels step by `sqrt(2)` below the top.
    pub points: usize,
    pub decay_max: f64,
    /// Base levels of the slab selection run after the ladder.
    pub bases: Vec<f64>,
    pub truncation: TruncationConfig,
    pub solver: SolverConfig,
}

impl Default for TruncationStudyConfig {
    fn default() -> Self {
        Self {
            grid: GridSpec::new(1, 1, vec![1.0], 24.0 * 10.0 / 4096.0, 1.0 / 64.0, 10.0 / 4096.0),
            width_cells: 2.0,
            mass: 1.0,
            points: 8,
            decay_max: -0.8,
            bases: vec![2.0, 4.0],
            truncation: TruncationConfig::default(),
            solver: SolverConfig::default(),
        }
    }
}

/// Everything measured along a truncation ladder.
#[derive(Clone, Debug)]
pub struct TruncationStudy {
    pub report: Report,
    pub results: Vec<TruncationResult>,
    /// Largest of each property ratio along the ladder.
    pub envelopes: Vec<(String, f64)>,
}

/// Heat flow driven by one spike, truncated along a ladder whose top is the
/// largest dyadic fraction of `max(M grad w, M G)` that changes `w`.
pub fn truncation_study(cfg: &TruncationStudyConfig) -> Result<TruncationStudy> {
    if cfg.points < 2 {
        return Err(Error::InvalidParameter("truncation ladder needs two points".into()));
    }
    let grid = Grid::new(cfg.grid.clone())?;
    let f = spiky_forcing(&grid, cfg.width_cells, 1, 0.3, cfg.mass)?;
    let sol = solve_linear(&LinearTensor::constant(&grid, 1.0)?, &ProblemData::homogeneous(f.clone()), &cfg.solver)?;
    let pair = FluxPair::from_solution(&sol.u, None, &f)?;
    let tcfg = TruncationConfig { solver_residual: sol.residual, ..cfg.truncation.clone() };
    let setup = TruncationSetup::new(&pair, None, &tcfg)?;
    let top = setup.m_grad.max_abs().max(setup.m_g.max_abs());
    let mut hi = top;
    let mut probe = setup.truncate(hi)?;
    let mut halvings = 0;
    while probe.props.changed_measure == 0.0 {
        halvings += 1;
        if halvings > 60 {
            return Err(Error::InvalidParameter("truncation never changes the input".into()));
        }
        hi *= 0.5;
        probe = setup.truncate(hi)?;
    }
    let mut results = Vec::with_capacity(cfg.points);
    for i in 0..cfg.points - 1 {
        let lambda = hi * 2f64.powf(-0.5 * (cfg.points - 1 - i) as f64);
        results.push(setup.truncate(lambda)?);
    }
    results.push(probe);

    let mut table = Table::new(&[
        "lambda", "bad_measure", "changed_measure", "l2", "l6", "l7", "l8", "lp", "lip", "poincare", "ls3", "ls3_analytic",
    ]);
    for r in &results {
        let p = &r.props;
        let (ls3, ls3a) = setup.ls3_residuals(r);
        table.push(vec![
            r.lambda,
            p.bad_measure,
            p.changed_measure,
            p.l2_ratio,
            p.l6_ratio,
            p.l7_ratio,
            p.l8_ratio,
            p.lp_ratio,
            p.lip_ratio,
            p.poincare_ratio,
            ls3,
            ls3a,
        ]);
    }
    let lambdas: Vec<f64> = results.iter().map(|r| r.lambda).collect();
    let changed: Vec<f64> = results.iter().map(|r| r.props.changed_measure).collect();
    let half = cfg.points / 2;
    let slope = loglog_slope(&lambdas[half..], &changed[half..]).unwrap_or(f64::INFINITY);
    let env = |name: &str| table.column(name).unwrap().into_iter().fold(0.0, f64::max);
    let envelopes: Vec<(String, f64)> =
        ["l2", "l6", "l7", "l8", "lip", "poincare"].iter().map(|n| (n.to_string(), env(n))).collect();
    let l1 = results.iter().all(|r| r.l1_exact && r.support_ok);
    let covers = results.iter().all(|r| r.cover_check.passed() && r.partition_check.passed());
    let c_pou = results.iter().map(|r| r.partition_check.c_pou).fold(0.0, f64::max);

    let ls3 = report_max(&table, "ls3");
    let mut pigeonhole = true;
    let mut slabs = Table::new(&["base", "m0", "chosen", "lambda", "energy", "total"]);
    for &b in &cfg.bases {
        let sel = crate::liptrunc::select_level(&setup, b, tcfg.q)?;
        pigeonhole &= sel.pigeonhole_holds();
        slabs.push(vec![b, sel.m0 as f64, sel.chosen as f64, sel.lambda, sel.energies[sel.chosen], sel.total()]);
    }

    let mut report = Report::new("truncation", table);
    report.extra.push(("slabs".into(), slabs));
    report.recorded.push(("solver_residual".into(), sol.residual));
    report.recorded.push(("identity_residual".into(), setup.identity_residual));
    report.recorded.push(("decay_slope".into(), slope));
    report.recorded.push(("c_pou".into(), c_pou));
    for (n, v) in &envelopes {
        report.recorded.push((format!("envelope {n}"), *v));
    }
    report.checks.push(Check::holds("equal off the bad set", l1));
    report.checks.push(Check::holds("cover and partition", covers));
    report.checks.push(Check::at_most("changed-set decay slope", slope, cfg.decay_max));
    report.checks.push(Check::at_most("integration by parts", ls3, tcfg.gate_factor * sol.residual));
    report.checks.push(Check::holds("slab pigeonhole", pigeonhole));
    Ok(TruncationStudy { report, results, envelopes })
}

fn report_max(t: &Table, col: &str) -> f64 {
    t.column(col).map_or(0.0, |c| c.into_iter().fold(0.0, f64::max))
}

impl TruncationStudyConfig {
    /// Same physical problem with `h / 2` and `tau / 4`.
    pub fn refined(&self) -> Self {
        let g = &self.grid;
        let grid = GridSpec { h: 0.5 * g.h, tau: 0.25 * g.tau, ..g.clone() };
        Self { grid, width_cells: 2.0 * self.width_cells, ..self.clone() }
    }
}

/// Pairs of envelopes agreeing within `factor` (both zero counts as agreement).
pub fn envelopes_agree(a: &[(String, f64)], b: &[(String, f64)], names: &[&str], factor: f64) -> Vec<Check> {
    names
        .iter()
        .map(|name| {
            let get = |v: &[(String, f64)]| v.iter().find(|(n, _)| n == name).map_or(f64::NAN, |e| e.1);
            let (x, y) = (get(a), get(b));
            let ratio = if x == 0.0 && y == 0.0 {
                1.0
            } else if x > 0.0 && y > 0.0 {
                (x / y).max(y / x)
            } else {
                f64::INFINITY
            };
            let ok = x.is_finite() && y.is_finite() && ratio <= factor;
            Check { name: format!("{name} envelope under refinement"), value: ratio, bound: factor, passed: ok }
        })
        .collect()
}
