//! One runner per subcommand. Each builds an [`Outcome`] without touching
//! the disk.

use std::fs::File;
use std::io::BufReader;
use std::path::Path;

use parabolic::error::Error;
use parabolic::experiments::{self as ex, Check, Report, Table};
use parabolic::field::{self, Field, Grid, Rank};
use parabolic::liptrunc::{FluxPair, TruncationConfig, TruncationSetup};
use parabolic::maximal::{maximal, maximal_q_restricted, MaximalConfig};
use parabolic::pde::{solve_linear, solve_nonlinear, LinearTensor, ProblemData};
use parabolic::weights::{a1_constant, ap_constant, reverse_holder_exponent, weight_from_maximal};
use parabolic::whitney::{bad_set, check_cover, check_partition, partition_of_unity, whitney_cover, write_cover_csv};

use crate::config::{RunConfig, StudyName};
use crate::report::{Artifact, Outcome};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Command {
    Maximal,
    Weights,
    Whitney,
    Truncate,
    Solve,
    Study,
}

impl Command {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Maximal => "maximal",
            Self::Weights => "weights",
            Self::Whitney => "whitney",
            Self::Truncate => "truncate",
            Self::Solve => "solve",
            Self::Study => "study",
        }
    }
}

/// Why a run produced no outcome.
#[derive(Debug)]
pub enum RunError {
    /// Parameters the library refused.
    Usage(String),
    /// Numerical or I/O failure.
    Failed(String),
}

impl std::fmt::Display for RunError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Usage(m) | Self::Failed(m) => f.write_str(m),
        }
    }
}

impl From<Error> for RunError {
    fn from(e: Error) -> Self {
        match e {
            Error::InvalidParameter(_) | Error::InvalidGrid(_) | Error::Parse(_) | Error::RankMismatch { .. } => {
                Self::Usage(e.to_string())
            }
            _ => Self::Failed(e.to_string()),
        }
    }
}

impl From<String> for RunError {
    fn from(m: String) -> Self {
        Self::Failed(m)
    }
}

type Run = Result<Outcome, RunError>;

pub fn run(command: Command, cfg: &RunConfig) -> Run {
    match command {
        Command::Maximal => run_maximal(cfg),
        Command::Weights => run_weights(cfg),
        Command::Whitney => run_whitney(cfg),
        Command::Truncate => run_truncate(cfg),
        Command::Solve => run_solve(cfg),
        Command::Study => run_study(cfg),
    }
}

fn report(name: &str, table: Table) -> Report {
    Report { study: name.into(), table, extra: Vec::new(), recorded: Vec::new(), checks: Vec::new() }
}

fn outcome(command: Command, report: Report, artifacts: Vec<Artifact>) -> Outcome {
    Outcome { command: command.as_str().into(), report, artifacts, stopped: None }
}

fn read_field(path: &Path) -> Result<Field, RunError> {
    let f = File::open(path).map_err(|e| RunError::Failed(format!("cannot open {}: {e}", path.display())))?;
    field::read_csv(BufReader::new(f)).map_err(|e| RunError::Usage(format!("{}: {e}", path.display())))
}

/// Forcing from the file, or the spike lattice on the configured grid.
fn forcing(cfg: &RunConfig) -> Result<Field, RunError> {
    let fc = cfg.forcing.clone().unwrap_or_default();
    match &fc.file {
        Some(p) => read_field(p),
        None => {
            let grid = Grid::new(cfg.grid_spec())?;
            Ok(ex::spiky_forcing(&grid, fc.width_cells, fc.per_axis, fc.t_frac, fc.mass)?)
        }
    }
}

fn maximal_config(cfg: &RunConfig, grid: &Grid) -> Result<MaximalConfig, RunError> {
    let m = &cfg.maximal;
    let base = match &m.radii {
        Some(r) => MaximalConfig::new(r.clone(), m.q, m.restrict)?,
        None => {
            let mut d = MaximalConfig::dyadic(grid).with_q(m.q);
            d.restrict = m.restrict;
            d
        }
    };
    Ok(base.with_orientation(m.orientation.to_orientation()))
}

fn run_maximal(cfg: &RunConfig) -> Run {
    let f = forcing(cfg)?;
    let mcfg = maximal_config(cfg, f.grid())?;
    let m = maximal_q_restricted(&f, &mcfg)?;
    let mut table = Table::new(&["radius"]);
    for r in mcfg.radii() {
        table.push(vec![r]);
    }
    let mut rep = report("maximal", table);
    let q = mcfg.q;
    rep.recorded.push(("max |f|".into(), f.max_abs()));
    rep.recorded.push(("max M f".into(), m.max_abs()));
    rep.recorded.push(("norm f".into(), field::lp_norm(&f, q)?));
    rep.recorded.push(("norm M f".into(), field::lp_norm(&m, q)?));
    rep.checks.push(Check::holds("finite", m.values().iter().all(|v| v.is_finite())));
    let artifacts = vec![Artifact::field("maximal.csv", &m)?, Artifact::table("radii.csv", &rep.table)?];
    Ok(outcome(Command::Maximal, rep, artifacts))
}

fn run_weights(cfg: &RunConfig) -> Run {
    let w = &cfg.weights;
    let f = forcing(cfg)?;
    let mcfg = maximal_config(cfg, f.grid())?;
    let omega = weight_from_maximal(&f, w.q0, &mcfg)?;
    let mut table = Table::new(&["p", "ap", "dual"]);
    for &p in &w.ps {
        let est = ap_constant(&omega, p, &mcfg)?;
        table.push(vec![p, est.constant, est.dual().constant]);
    }
    let a1 = a1_constant(&omega, &mcfg)?;
    let rh = reverse_holder_exponent(&omega, w.rh_threshold, w.s_max, &mcfg)?;
    let finite = table.rows.iter().all(|r| r.iter().all(|v| v.is_finite()));
    let mut rep = report("weights", table);
    rep.recorded.push(("q0".into(), w.q0));
    rep.recorded.push(("A1".into(), a1));
    rep.recorded.push(("reverse Holder exponent".into(), rh.s));
    rep.recorded.push(("reverse Holder constant".into(), rh.constant));
    rep.checks.push(Check::holds("A_p constants finite", finite));
    rep.checks.push(Check::holds("reverse Holder exponent found", rh.found));
    let pts: Vec<(f64, f64)> = rep.table.rows.iter().map(|r| (r[0], r[1])).collect();
    let artifacts = vec![
        Artifact::field("weight.csv", &omega)?,
        Artifact::table("weights.csv", &rep.table)?,
        Artifact::plot("weights.svg", "A_p of the maximal weight", ("p", "A_p"), &pts),
    ];
    Ok(outcome(Command::Weights, rep, artifacts))
}

fn run_whitney(cfg: &RunConfig) -> Run {
    let f = forcing(cfg)?;
    let mcfg = maximal_config(cfg, f.grid())?.with_orientation(cfg.whitney.orientation.to_orientation());
    let mf = maximal(&f, &mcfg)?;
    let lambda = cfg.whitney.lambda.unwrap_or(cfg.whitney.fraction * mf.max_abs());
    if !(lambda > 0.0) {
        return Err(RunError::Usage("whitney level is zero: the forcing vanishes".into()));
    }
    let bad = bad_set(&mf, &mf, lambda)?;
    let cover = whitney_cover(&bad)?;
    let chk = check_cover(&bad, &cover);
    let part = check_partition(&cover, &partition_of_unity(&cover));
    let mut table = Table::new(&["level", "cubes"]);
    let mut levels: Vec<u32> = cover.cubes.iter().map(|c| c.level).collect();
    levels.sort_unstable();
    levels.dedup();
    for l in levels {
        table.push(vec![l as f64, cover.cubes.iter().filter(|c| c.level == l).count() as f64]);
    }
    let mut rep = report("whitney", table);
    for (k, v) in [
        ("lambda", lambda),
        ("cubes", cover.len() as f64),
        ("bad measure", bad.measure()),
        ("K_overlap", chk.k_overlap() as f64),
        ("4Q overlap", chk.overlap_4q as f64),
        ("neighbours", chk.max_neighbors as f64),
        ("C_pou", part.c_pou),
        ("partition defect", part.p3_defect),
    ] {
        rep.recorded.push((k.into(), v));
    }
    for (ok, name) in [
        (chk.w1, "W1 half cubes cover the bad set"),
        (chk.w2, "W2 distance to the complement"),
        (chk.w3, "W3 neighbouring radii comparable"),
        (chk.w4, "W4 quarter cubes disjoint"),
        (chk.w6, "W6 neighbour overlaps"),
        (chk.w7, "W7 neighbour radii"),
        (chk.neighbors_symmetric, "W8 neighbour relation symmetric"),
    ] {
        rep.checks.push(Check::holds(name, ok));
    }
    rep.checks.push(Check::holds("partition of unity", part.passed()));
    let mut cover_csv = Vec::new();
    write_cover_csv(&cover, &mut cover_csv)?;
    let artifacts = vec![
        Artifact { name: "cover.csv".into(), contents: Some(cover_csv) },
        Artifact::table("levels.csv", &rep.table)?,
    ];
    Ok(outcome(Command::Whitney, rep, artifacts))
}

const TRUNCATION_COLUMNS: [&str; 10] =
    ["lambda", "bad_measure", "changed_measure", "l2", "l6", "l7", "l8", "lip", "c_pou", "k_overlap"];

fn run_truncate(cfg: &RunConfig) -> Run {
    let t = &cfg.truncate;
    let (pair, residual) = match (&t.w, &t.data) {
        (Some(w), Some(d)) => {
            let coeff = t.coeff.as_deref().map(read_field).transpose()?;
            (FluxPair::new(read_field(w)?, coeff, read_field(d)?)?, t.solver_residual)
        }
        _ => {
            let f = forcing(cfg)?;
            let tensor = LinearTensor::constant(f.grid(), 1.0)?;
            let sol = solve_linear(&tensor, &ProblemData::homogeneous(f.clone()), &cfg.solver_config())?;
            (FluxPair::from_solution(&sol.u, None, &f)?, sol.residual)
        }
    };
    let tcfg = TruncationConfig {
        margin: t.margin,
        wall_tol: t.wall_tol,
        gate_factor: t.gate_factor,
        gate_floor: t.gate_floor,
        solver_residual: residual,
        q: t.q,
        pair_samples: t.pair_samples,
        seed: cfg.seed.unwrap_or(0),
    };
    let plot = |rep: &Report| {
        let pts: Vec<(f64, f64)> = rep.table.rows.iter().map(|r| (r[0], r[2])).collect();
        Artifact::plot("truncation.svg", "changed set along the level ladder", ("lambda", "changed measure"), &pts)
    };
    let setup = match TruncationSetup::new(&pair, None, &tcfg) {
        Ok(s) => s,
        Err(Error::ResidualGate { residual: r, gate }) => {
            // the pair is inconsistent: report the gate and write no ladder
            let mut rep = report("truncation", Table::new(&TRUNCATION_COLUMNS));
            rep.recorded.push(("solver_residual".into(), residual));
            rep.checks.push(Check::at_most("residual gate", r, gate));
            let artifacts = vec![Artifact::table("truncation.csv", &rep.table)?, plot(&rep)];
            let mut o = outcome(Command::Truncate, rep, artifacts);
            o.stopped = Some(format!("residual gate: {}", Error::ResidualGate { residual: r, gate }));
            return Ok(o);
        }
        Err(e) => return Err(e.into()),
    };
    let gate = (tcfg.gate_factor * residual).max(tcfg.gate_floor);
    let lambdas = match &t.lambdas {
        Some(l) => l.clone(),
        None => {
            // top of the ladder: the largest dyadic fraction of the maximal
            // fields at which w actually changes
            let mut hi = setup.m_grad.max_abs().max(setup.m_g.max_abs());
            let mut halvings = 0;
            while hi > 0.0 && setup.truncate(hi)?.props.changed_measure == 0.0 && halvings < 60 {
                hi *= 0.5;
                halvings += 1;
            }
            if !(hi > 0.0) || halvings == 60 {
                return Err(RunError::Usage("truncation never changes the input".into()));
            }
            (0..t.points).rev().map(|i| hi * 2f64.powf(-0.5 * i as f64)).collect()
        }
    };
    let mut table = Table::new(&TRUNCATION_COLUMNS);
    let (mut exact, mut covers) = (true, true);
    for &lambda in &lambdas {
        let r = setup.truncate(lambda)?;
        let p = &r.props;
        exact &= r.l1_exact && r.support_ok;
        covers &= r.cover_check.passed() && r.partition_check.passed();
        table.push(vec![
            lambda,
            p.bad_measure,
            p.changed_measure,
            p.l2_ratio,
            p.l6_ratio,
            p.l7_ratio,
            p.l8_ratio,
            p.lip_ratio,
            r.partition_check.c_pou,
            r.cover_check.k_overlap() as f64,
        ]);
    }
    let mut rep = report("truncation", table);
    rep.recorded.push(("solver_residual".into(), residual));
    rep.recorded.push(("identity_residual".into(), setup.identity_residual));
    let lam = rep.table.column("lambda").unwrap_or_default();
    let changed = rep.table.column("changed_measure").unwrap_or_default();
    if let Some(s) = ex::loglog_slope(&lam, &changed) {
        rep.recorded.push(("decay_slope".into(), s));
    }
    rep.checks.push(Check::at_most("residual gate", setup.identity_residual, gate));
    rep.checks.push(Check::holds("equal off the bad set", exact));
    rep.checks.push(Check::holds("cover and partition", covers));
    let artifacts = vec![Artifact::table("truncation.csv", &rep.table)?, plot(&rep)];
    Ok(outcome(Command::Truncate, rep, artifacts))
}

fn run_solve(cfg: &RunConfig) -> Run {
    let f = forcing(cfg)?;
    let grid = f.grid().clone();
    let f = if f.rank() == Rank::Matrix(grid.n(), grid.components()) {
        f
    } else {
        return Err(RunError::Usage(format!("forcing must be an {} x {} flux field", grid.n(), grid.components())));
    };
    let mut data = ProblemData::homogeneous(f);
    if let Some(p) = &cfg.solve.initial {
        let u0 = read_field(p)?;
        let slice = grid.space_cells() * grid.components();
        if u0.values().len() < slice {
            return Err(RunError::Usage(format!("{}: too few values for an initial state", p.display())));
        }
        data.initial = Some(u0.values()[..slice].to_vec());
    }
    let law = cfg.law.unwrap_or_default().to_law();
    let sol = solve_nonlinear(&law, &data, &cfg.solver_config())?;
    let mut table = Table::new(&["iteration", "increment"]);
    for (i, d) in sol.increments.iter().enumerate() {
        table.push(vec![(i + 1) as f64, *d]);
    }
    let mut rep = report("solve", table);
    rep.recorded.push(("residual".into(), sol.residual));
    rep.recorded.push(("max iterations".into(), sol.iterations.iter().copied().max().unwrap_or(0) as f64));
    rep.recorded.push(("monotone increments".into(), if sol.monotone_increments { 1.0 } else { 0.0 }));
    rep.checks.push(Check::holds("converged", sol.converged));
    let artifacts = vec![Artifact::field("solution.csv", &sol.u)?, Artifact::table("increments.csv", &rep.table)?];
    Ok(outcome(Command::Solve, rep, artifacts))
}

fn run_study(cfg: &RunConfig) -> Run {
    let name = cfg.study.name;
    let ladder = cfg.study.ladder.clone();
    let grid = cfg.grid.as_ref().map(|g| g.spec());
    let solver = cfg.solver.map(|s| s.to_solver());
    let law = cfg.law.map(|l| l.to_law());
    let forcing = cfg.forcing.clone();
    if forcing.as_ref().is_some_and(|f| f.file.is_some()) {
        return Err(RunError::Usage("studies generate their own forcing; forcing.file does not apply".into()));
    }
    let (width, mass) = forcing.map_or((None, None), |f| (Some(f.width_cells), Some(f.mass)));

    let rep = match name {
        StudyName::Apriori => {
            let mut c = ex::AprioriConfig::default();
            set(&mut c.grid, grid);
            set(&mut c.solver, solver);
            set(&mut c.law, law);
            set(&mut c.width_cells, width);
            set(&mut c.mass, mass);
            if let Some(l) = ladder {
                c.fit_points = c.fit_points.min(l.len());
                c.scales = l;
            }
            ex::apriori_scaling_study(&c)?
        }
        StudyName::GoodLambda => {
            let mut c = ex::GoodLambdaConfig::default();
            set(&mut c.grid, grid);
            set(&mut c.solver, solver);
            set(&mut c.width_cells, width);
            set(&mut c.mass, mass);
            set(&mut c.ks, ladder);
            set(&mut c.seed, cfg.seed);
            ex::good_lambda_probe(&c)?
        }
        StudyName::Uniqueness => {
            let mut c = ex::UniquenessConfig::default();
            set(&mut c.grid, grid);
            set(&mut c.solver, solver);
            set(&mut c.laws, law.map(|l| vec![l]));
            set(&mut c.width_cells, width);
            set(&mut c.mass, mass);
            set(&mut c.seed, cfg.seed);
            ex::uniqueness_probe(&c)?
        }
        StudyName::Existence => {
            let mut c = ex::ExistenceConfig::default();
            set(&mut c.grid, grid);
            set(&mut c.solver, solver);
            set(&mut c.law, law);
            set(&mut c.width_cells, width);
            set(&mut c.ks, ladder);
            ex::existence_pipeline(&c)?
        }
        StudyName::Convergence => {
            let mut c = ex::ConvergenceConfig::default();
            set(&mut c.solver, solver);
            set(&mut c.amplitude, mass);
            set(&mut c.cells, ladder.map(|l| l.iter().map(|&v| v as usize).collect()));
            ex::convergence_study(&c)?
        }
        StudyName::Truncation => {
            let mut c = ex::TruncationStudyConfig::default();
            set(&mut c.grid, grid);
            set(&mut c.solver, solver);
            set(&mut c.width_cells, width);
            set(&mut c.mass, mass);
            set(&mut c.bases, ladder);
            set(&mut c.truncation.seed, cfg.seed);
            ex::truncation_study(&c)?.report
        }
    };
    let base = name.as_str();
    let mut artifacts = vec![Artifact::table(&format!("{base}.csv"), &rep.table)?];
    for (extra, t) in &rep.extra {
        artifacts.push(Artifact::table(&format!("{base}_{extra}.csv"), t)?);
    }
    if let Some((title, (x, y), pts)) = study_plot(name, &rep.table) {
        artifacts.push(Artifact::plot(&format!("{base}.svg"), &title, (x, y), &pts));
    }
    Ok(outcome(Command::Study, rep, artifacts))
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

type Plot = (String, (&'static str, &'static str), Vec<(f64, f64)>);

/// The ladder plot of a study: which columns, restricted to which rows.
fn study_plot(name: StudyName, t: &Table) -> Option<Plot> {
    let col = |c: &str| t.columns.iter().position(|n| n == c).expect("study column");
    let pick = |x: usize, y: usize, keep: &dyn Fn(&[f64]) -> bool| -> Vec<(f64, f64)> {
        t.rows.iter().filter(|r| keep(r)).map(|r| (r[x], r[y])).collect()
    };
    match name {
        StudyName::Apriori => {
            let (q, w) = (col("q"), col("weighted"));
            let q0 = t.rows.first().map_or(0.0, |r| r[q]);
            let pts = pick(col("f_norm"), col("grad_norm"), &|r| r[q] == q0 && r[w] == 0.0);
            Some((format!("gradient against forcing, q = {q0}"), ("forcing norm", "gradient norm"), pts))
        }
        StudyName::GoodLambda => {
            let (k, l) = (col("k"), col("lambda"));
            let first = t.rows.first().map(|r| (r[k], r[l]));
            let pts = pick(col("eps"), col("ratio"), &|r| Some((r[k], r[l])) == first);
            let title = first.map_or("good-lambda ratios".into(), |(a, b)| format!("good-lambda ratios, k = {a}, lambda = {b:.3e}"));
            Some((title, ("eps", "ratio"), pts))
        }
        StudyName::Existence => {
            Some(("Cauchy differences of the truncated solutions".into(), ("k", "cauchy"), pick(col("k"), col("cauchy"), &|_| true)))
        }
        StudyName::Convergence => {
            Some(("refinement errors".into(), ("h", "l2 error"), pick(col("h"), col("l2_error"), &|_| true)))
        }
        StudyName::Truncation => Some((
            "changed set along the level ladder".into(),
            ("lambda", "changed measure"),
            pick(col("lambda"), col("changed_measure"), &|_| true),
        )),
        StudyName::Uniqueness => None,
    }
}
