//! Implicit finite-volume solvers for parabolic systems with isotropic
//! coefficients.
//!
//! Unknowns sit at cell centres; the value in time cell `k` is the state at
//! the end of step `k`. Each step solves
//! `(v - v_prev) / tau = div(a grad v + E) + s` with face-averaged `a`,
//! face gradients, and zero Dirichlet data through odd ghost cells (or
//! wrap-around on periodic axes). Data fluxes `E` are face averages of
//! cell values with even ghosts. Nonlinear laws `A(Q) = nu(|Q|) Q` are
//! solved per step by Picard iteration with `nu` frozen at the previous
//! iterate.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::field::{discrete_gradient, Boundary, Field, Grid, Rank};

/// Constitutive law `A(Q) = nu(|Q|) Q`, linear at infinity with `nu -> nu_inf`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Law {
    /// `nu` constant.
    Linear { nu: f64 },
    /// `nu(s) = min(nu_inf, s^(p-2))`, `p > 2`.
    MinPower { p: f64, nu_inf: f64 },
    /// `nu(s) = min(cap, max(nu_inf, s^(p-2)))`, `1 < p < 2`.
    MaxPower { p: f64, nu_inf: f64, cap: f64 },
}

/// Growth constants: `c0 |Q|^2 - c2 <= A.Q` and `|A| <= c1 |Q| + c2`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LawConstants {
    pub c0: f64,
    pub c1: f64,
    pub c2: f64,
}

impl Law {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParameter(m));
        match *self {
            Law::Linear { nu } if !(nu > 0.0 && nu.is_finite()) => bad(format!("linear law needs nu > 0, got {nu}")),
            Law::MinPower { p, nu_inf } if !(p > 2.0 && p.is_finite() && nu_inf > 0.0 && nu_inf.is_finite()) => {
                bad(format!("min-power law needs p > 2 and nu_inf > 0, got p={p}, nu_inf={nu_inf}"))
            }
            Law::MaxPower { p, nu_inf, cap }
                if !(p > 1.0 && p < 2.0 && nu_inf > 0.0 && cap >= nu_inf && cap.is_finite()) =>
            {
                bad(format!("max-power law needs 1 < p < 2 and cap >= nu_inf > 0, got p={p}, nu_inf={nu_inf}, cap={cap}"))
            }
            _ => Ok(()),
        }
    }

    pub fn nu_inf(&self) -> f64 {
        match *self {
            Law::Linear { nu } => nu,
            Law::MinPower { nu_inf, .. } | Law::MaxPower { nu_inf, .. } => nu_inf,
        }
    }

    pub fn is_linear(&self) -> bool {
        matches!(self, Law::Linear { .. })
    }

    pub fn nu(&self, s: f64) -> f64 {
        match *self {
            Law::Linear { nu } => nu,
            Law::MinPower { p, nu_inf } => nu_inf.min(s.powf(p - 2.0)),
            Law::MaxPower { p, nu_inf, cap } => {
                if s == 0.0 {
                    cap
                } else {
                    cap.min(nu_inf.max(s.powf(p - 2.0)))
                }
            }
        }
    }

    /// `d nu / ds` (one-sided at the kinks).
    pub fn nu_prime(&self, s: f64) -> f64 {
        match *self {
            Law::Linear { .. } => 0.0,
            Law::MinPower { p, nu_inf } => {
                let v = s.powf(p - 2.0);
                if v < nu_inf {
                    (p - 2.0) * s.powf(p - 3.0)
                } else {
                    0.0
                }
            }
            Law::MaxPower { p, nu_inf, cap } => {
                let v = s.powf(p - 2.0);
                if s > 0.0 && v > nu_inf && v < cap {
                    (p - 2.0) * s.powf(p - 3.0)
                } else {
                    0.0
                }
            }
        }
    }

    pub fn apply(&self, q: &[f64], out: &mut [f64]) {
        let s = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        let nu = self.nu(s);
        for (o, v) in out.iter_mut().zip(q) {
            *o = nu * v;
        }
    }

    pub fn constants(&self) -> LawConstants {
        match *self {
            Law::Linear { nu } => LawConstants { c0: nu, c1: nu, c2: 0.0 },
            Law::MinPower { p, nu_inf } => {
                // below s* = nu_inf^(1/(p-2)) the law is the pure power
                let s = nu_inf.powf(1.0 / (p - 2.0));
                LawConstants { c0: nu_inf, c1: nu_inf, c2: nu_inf * s * s }
            }
            Law::MaxPower { p, nu_inf, cap } => {
                let s = nu_inf.powf(1.0 / (p - 2.0));
                LawConstants { c0: nu_inf, c1: nu_inf, c2: s.powf(p - 1.0).min(cap * s) }
            }
        }
    }

    pub fn label(&self) -> String {
        match *self {
            Law::Linear { nu } => format!("linear(nu={nu})"),
            Law::MinPower { p, nu_inf } => format!("min-power(p={p},nu_inf={nu_inf})"),
            Law::MaxPower { p, nu_inf, cap } => format!("max-power(p={p},nu_inf={nu_inf},cap={cap})"),
        }
    }
}

/// Sampled law properties.
#[derive(Clone, Debug, PartialEq)]
pub struct LawReport {
    pub constants: LawConstants,
    pub growth_ok: bool,
    pub monotone_ok: bool,
    /// Smallest `(A(Q)-A(P)).(Q-P) / |Q-P|^2`.
    pub min_monotonicity: f64,
    /// `(m, sup_{|Q| >= m} |A(Q) - nu_inf Q| / |Q|)`.
    pub modulus: Vec<(f64, f64)>,
    /// `(m, sup_{|Q| >= m} |DA(Q) - nu_inf I|)`.
    pub jacobian_modulus: Vec<(f64, f64)>,
}

impl LawReport {
    /// Both moduli are nonincreasing along the ladder and vanish at its top.
    pub fn linear_at_infinity(&self) -> bool {
        let mono = |t: &[(f64, f64)]| t.windows(2).all(|w| w[1].1 <= w[0].1) && t.last().is_some_and(|l| l.1 < 1e-6);
        mono(&self.modulus) && mono(&self.jacobian_modulus)
    }
}

fn random_matrix(rng: &mut ChaCha8Rng, dim: usize, norm: f64) -> Vec<f64> {
    let mut v: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let s = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-300);
    for x in &mut v {
        *x *= norm / s;
    }
    v
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Checks growth, monotonicity and the asymptotic moduli on `samples`
/// random `n x comps` matrices with magnitudes log-uniform in `[1e-3, 1e3]`.
pub fn check_law(law: &Law, n: usize, comps: usize, samples: usize, seed: u64) -> Result<LawReport> {
    law.validate()?;
    let dim = n * comps;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = law.constants();
    let mut growth_ok = true;
    let mut monotone_ok = true;
    let mut min_mono = f64::INFINITY;
    let mut aq = vec![0.0; dim];
    let mut ap = vec![0.0; dim];
    for _ in 0..samples {
        let sq0 = 10f64.powf(rng.gen_range(-3.0..3.0));
        let q = random_matrix(&mut rng, dim, sq0);
        let sp0 = 10f64.powf(rng.gen_range(-3.0..3.0));
        let p = random_matrix(&mut rng, dim, sp0);
        law.apply(&q, &mut aq);
        law.apply(&p, &mut ap);
        let sq = norm(&q);
        let dot: f64 = aq.iter().zip(&q).map(|(a, b)| a * b).sum();
        let slack = 1e-12 * (1.0 + sq * sq * k.c1);
        growth_ok &= dot >= k.c0 * sq * sq - k.c2 - slack && norm(&aq) <= k.c1 * sq + k.c2 + slack;
        let d: Vec<f64> = q.iter().zip(&p).map(|(a, b)| a - b).collect();
        let da: Vec<f64> = aq.iter().zip(&ap).map(|(a, b)| a - b).collect();
        let m: f64 = d.iter().zip(&da).map(|(a, b)| a * b).sum();
        let dd = norm(&d);
        if dd > 0.0 {
            let scale = norm(&aq).max(norm(&ap)) * dd;
            monotone_ok &= m >= -1e-12 * scale;
            min_mono = min_mono.min(m / (dd * dd));
        }
    }
    let ladder = [1.0, 10.0, 100.0, 1e3, 1e4, 1e5];
    let per = (samples / ladder.len()).max(1);
    let nu_inf = law.nu_inf();
    let mut modulus = Vec::new();
    let mut jac = Vec::new();
    for &m in &ladder {
        let (mut e, mut j) = (0.0f64, 0.0f64);
        for _ in 0..per {
            let s = m * rng.gen_range(1.0..10.0);
            let q = random_matrix(&mut rng, dim, s);
            law.apply(&q, &mut aq);
            let dev: Vec<f64> = aq.iter().zip(&q).map(|(a, b)| a - nu_inf * b).collect();
            e = e.max(norm(&dev) / s);
            j = j.max((law.nu(s) - nu_inf).abs() + law.nu_prime(s).abs() * s);
        }
        modulus.push((m, e));
        jac.push((m, j));
    }
    Ok(LawReport {
        constants: k,
        growth_ok,
        monotone_ok,
        min_monotonicity: min_mono,
        modulus,
        jacobian_modulus: jac,
    })
}

/// `C(delta) = sup (|nu_inf (Q-P) - (A(Q)-A(P))| - delta |Q-P|)^+` over random
/// pairs with magnitudes up to `scale`.
pub fn algebra_modulus(law: &Law, dim: usize, deltas: &[f64], scale: f64, samples: usize, seed: u64) -> Vec<(f64, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let nu_inf = law.nu_inf();
    let pairs: Vec<(Vec<f64>, Vec<f64>)> = (0..samples)
        .map(|_| {
            let (sa, sb) = (scale * rng.gen_range(0.0..1.0f64), scale * rng.gen_range(0.0..1.0f64));
            let a = random_matrix(&mut rng, dim, sa);
            let b = random_matrix(&mut rng, dim, sb);
            (a, b)
        })
        .collect();
    let mut aq = vec![0.0; dim];
    let mut ap = vec![0.0; dim];
    deltas
        .iter()
        .map(|&delta| {
            let mut c: f64 = 0.0;
            for (q, p) in &pairs {
                law.apply(q, &mut aq);
                law.apply(p, &mut ap);
                let dev: Vec<f64> = (0..dim).map(|i| nu_inf * (q[i] - p[i]) - (aq[i] - ap[i])).collect();
                let d: Vec<f64> = q.iter().zip(p).map(|(a, b)| a - b).collect();
                c = c.max(norm(&dev) - delta * norm(&d));
            }
            (delta, c)
        })
        .collect()
}

/// Isotropic coefficient field `a(z) I`.
#[derive(Clone, Debug)]
pub struct LinearTensor {
    pub coeff: Field,
}

impl LinearTensor {
    pub fn new(coeff: Field) -> Result<Self> {
        crate::field::check_weight(&coeff)?;
        Ok(Self { coeff })
    }

    pub fn constant(grid: &Grid, a: f64) -> Result<Self> {
        Self::new(Field::constant(grid, Rank::Scalar, a))
    }

    /// Ellipticity bounds `(min a, max a)`.
    pub fn bounds(&self) -> (f64, f64) {
        let v = self.coeff.values();
        (v.iter().copied().fold(f64::INFINITY, f64::min), v.iter().copied().fold(0.0, f64::max))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SolverConfig {
    pub picard_tol: f64,
    pub picard_max: usize,
    pub cg_tol: f64,
    pub cg_max: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self { picard_tol: 1e-12, picard_max: 500, cg_tol: 1e-13, cg_max: 20_000 }
    }
}

impl SolverConfig {
    fn validate(&self) -> Result<()> {
        if !(self.picard_tol > 0.0 && self.cg_tol > 0.0) || self.picard_max == 0 || self.cg_max == 0 {
            return Err(Error::InvalidParameter("solver tolerances and iteration caps must be positive".into()));
        }
        Ok(())
    }
}

/// Forcing `f` (`n x N` per cell), optional source `s` (`N` per cell) and
/// initial state (`N` per spatial cell, zero when absent).
#[derive(Clone, Debug)]
pub struct ProblemData {
    pub f: Field,
    pub source: Option<Field>,
    pub initial: Option<Vec<f64>>,
}

impl ProblemData {
    pub fn homogeneous(f: Field) -> Self {
        Self { f, source: None, initial: None }
    }

    pub fn zero(grid: &Grid) -> Self {
        Self::homogeneous(Field::zeros(grid, Rank::Matrix(grid.n(), grid.components())))
    }

    fn validate(&self) -> Result<()> {
        let g = self.f.grid();
        let (n, nc) = (g.n(), g.components());
        if self.f.rank() != Rank::Matrix(n, nc) {
            return Err(Error::RankMismatch { expected: Rank::Matrix(n, nc).label(), found: self.f.rank().label() });
        }
        if let Some(s) = &self.source {
            if !s.grid().same_layout(g) || s.comps() != nc {
                return Err(Error::RankMismatch { expected: Rank::Vector(nc).label(), found: s.rank().label() });
            }
        }
        if let Some(u0) = &self.initial {
            if u0.len() != g.space_cells() * nc {
                return Err(Error::InvalidParameter(format!("initial datum has {} values", u0.len())));
            }
        }
        Ok(())
    }
}

/// Solver output.
#[derive(Clone, Debug)]
pub struct Solution {
    pub u: Field,
    /// Picard iterations per step.
    pub iterations: Vec<usize>,
    pub converged: bool,
    /// Largest residual of the discrete equations over all steps, relative
    /// to the largest term in any of them.
    pub residual: f64,
    /// Increments of the step that needed the most iterations.
    pub increments: Vec<f64>,
    /// Whether every step's increments decrease after the second iterate.
    pub monotone_increments: bool,
}

/// Spatial stencil of one time slice.
struct Stencil {
    n: usize,
    dims: [usize; 2],
    h: f64,
    periodic: [bool; 2],
}

impl Stencil {
    fn new(g: &Grid) -> Self {
        let mut periodic = [false; 2];
        for (a, p) in periodic.iter_mut().enumerate().take(g.n()) {
            *p = g.boundary(a) == Boundary::Periodic;
        }
        Self { n: g.n(), dims: g.dims2(), h: g.h(), periodic }
    }

    fn cells(&self) -> usize {
        self.dims[0] * self.dims[1]
    }

    /// Neighbour across the `plus` or minus face along `a`; `None` at a wall.
    fn neighbor(&self, s: usize, a: usize, plus: bool) -> Option<usize> {
        let i = [s / self.dims[1], s % self.dims[1]];
        let m = self.dims[a];
        let ia = if plus {
            if i[a] + 1 < m {
                i[a] + 1
            } else if self.periodic[a] {
                0
            } else {
                return None;
            }
        } else if i[a] > 0 {
            i[a] - 1
        } else if self.periodic[a] {
            m - 1
        } else {
            return None;
        };
        let mut j = i;
        j[a] = ia;
        Some(j[0] * self.dims[1] + j[1])
    }

    /// Cell-centred gradient of component `j` of `v` (odd ghosts at walls),
    /// accumulated into `out[a * nc + j]`.
    fn cell_gradient(&self, v: &[f64], nc: usize, j: usize, s: usize, out: &mut [f64]) {
        for a in 0..self.n {
            let vp = self.neighbor(s, a, true).map_or(-v[s * nc + j], |t| v[t * nc + j]);
            let vm = self.neighbor(s, a, false).map_or(-v[s * nc + j], |t| v[t * nc + j]);
            out[a * nc + j] += (vp - vm) / (2.0 * self.h);
        }
    }
}

/// Sparse symmetric system `diag_s v_s - sum off v_t = rhs`.
struct System {
    diag: Vec<f64>,
    off: Vec<Vec<(usize, f64)>>,
}

impl System {
    fn build(st: &Stencil, a: &[f64], tau: f64) -> Self {
        let h2 = st.h * st.h;
        let mut diag = vec![1.0 / tau; st.cells()];
        let mut off = vec![Vec::with_capacity(2 * st.n); st.cells()];
        for s in 0..st.cells() {
            for ax in 0..st.n {
                for plus in [true, false] {
                    match st.neighbor(s, ax, plus) {
                        Some(t) => {
                            let c = 0.5 * (a[s] + a[t]) / h2;
                            diag[s] += c;
                            off[s].push((t, c));
                        }
                        None => diag[s] += 2.0 * a[s] / h2,
                    }
                }
            }
        }
        Self { diag, off }
    }

    fn apply(&self, v: &[f64], out: &mut [f64]) {
        for (s, o) in out.iter_mut().enumerate() {
            let mut acc = self.diag[s] * v[s];
            for &(t, c) in &self.off[s] {
                acc -= c * v[t];
            }
            *o = acc;
        }
    }

    /// Tridiagonal elimination; valid for a 1-D chain without wrap-around.
    fn thomas(&self, rhs: &[f64]) -> Vec<f64> {
        let m = rhs.len();
        let coef = |s: usize, t: usize| self.off[s].iter().find(|e| e.0 == t).map_or(0.0, |e| e.1);
        let mut cp = vec![0.0; m];
        let mut dp = vec![0.0; m];
        for s in 0..m {
            let lower = if s > 0 { coef(s, s - 1) } else { 0.0 };
            let upper = if s + 1 < m { coef(s, s + 1) } else { 0.0 };
            let (prev_c, prev_d) = if s > 0 { (cp[s - 1], dp[s - 1]) } else { (0.0, 0.0) };
            let denom = self.diag[s] + lower * prev_c;
            cp[s] = -upper / denom;
            dp[s] = (rhs[s] + lower * prev_d) / denom;
        }
        let mut x = vec![0.0; m];
        for s in (0..m).rev() {
            x[s] = dp[s] - cp[s] * if s + 1 < m { x[s + 1] } else { 0.0 };
        }
        x
    }

    /// Jacobi-preconditioned conjugate gradients with a relative stop.
    fn pcg(&self, rhs: &[f64], x0: &[f64], tol: f64, max: usize) -> Result<Vec<f64>> {
        let m = rhs.len();
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        let bnorm = dot(rhs, rhs).sqrt();
        if bnorm == 0.0 {
            return Ok(vec![0.0; m]);
        }
        let mut x = x0.to_vec();
        let mut ax = vec![0.0; m];
        self.apply(&x, &mut ax);
        let mut r: Vec<f64> = rhs.iter().zip(&ax).map(|(b, a)| b - a).collect();
        let mut z: Vec<f64> = r.iter().zip(&self.diag).map(|(r, d)| r / d).collect();
        let mut p = z.clone();
        let mut rz = dot(&r, &z);
        let mut ap = vec![0.0; m];
        for _ in 0..max {
            if dot(&r, &r).sqrt() <= tol * bnorm {
                return Ok(x);
            }
            self.apply(&p, &mut ap);
            let alpha = rz / dot(&p, &ap);
            for i in 0..m {
                x[i] += alpha * p[i];
                r[i] -= alpha * ap[i];
            }
            for i in 0..m {
                z[i] = r[i] / self.diag[i];
            }
            let rz_new = dot(&r, &z);
            let beta = rz_new / rz;
            rz = rz_new;
            for i in 0..m {
                p[i] = z[i] + beta * p[i];
            }
        }
        let res = dot(&r, &r).sqrt() / bnorm;
        if res <= tol {
            Ok(x)
        } else {
            Err(Error::NoConvergence(res))
        }
    }
}

/// How a prescribed state enters the flux of the unknown.
#[derive(Clone, Copy)]
enum Shift<'a> {
    None,
    /// Cell gradients of a lift, face-averaged (`n x N` per cell).
    Cell(&'a Field),
    /// A state with zero Dirichlet data, differenced across faces;
    /// `subtract` removes its unit-coefficient flux.
    Face { state: &'a Field, subtract: bool },
}

enum Coefficient<'a> {
    Fixed(&'a Field),
    Law(Law),
}

struct Problem<'a> {
    grid: &'a Grid,
    coefficient: Coefficient<'a>,
    shift: Shift<'a>,
    /// Cell data flux entering with a minus sign (`n x N` per cell).
    data: &'a Field,
    source: Option<&'a Field>,
    initial: Option<&'a [f64]>,
    guess: Option<&'a Field>,
}

fn march(pb: &Problem, cfg: &SolverConfig) -> Result<Solution> {
    cfg.validate()?;
    let g = pb.grid;
    let st = Stencil::new(g);
    let (n, nc, sc, tau, h) = (g.n(), g.components(), g.space_cells(), g.tau(), g.h());
    let use_thomas = n == 1 && !st.periodic[0];
    let mut u = Field::zeros(g, Rank::Vector(nc));
    let mut prev: Vec<f64> = pb.initial.map_or(vec![0.0; sc * nc], |v| v.to_vec());
    let mut iterations = Vec::with_capacity(g.nt());
    let mut converged = true;
    let mut residual: f64 = 0.0;
    let mut residual_scale: f64 = 0.0;
    let mut worst: (usize, Vec<f64>) = (0, Vec::new());
    let mut monotone = true;
    let fixed = matches!(pb.coefficient, Coefficient::Fixed(_) | Coefficient::Law(Law::Linear { .. }));

    for k in 0..g.nt() {
        let base = k * sc;
        let slice = |f: &Field, w: usize| f.values()[base * w..(base + sc) * w].to_vec();
        let data = slice(pb.data, n * nc);
        let source = pb.source.map(|s| slice(s, nc));
        let shift_cell = match pb.shift {
            Shift::Cell(gl) => Some(slice(gl, n * nc)),
            _ => None,
        };
        let shift_state = match pb.shift {
            Shift::Face { state, .. } => Some(slice(state, nc)),
            _ => None,
        };
        let subtract = matches!(pb.shift, Shift::Face { subtract: true, .. });
        let mut v = pb.guess.map_or(prev.clone(), |gs| slice(gs, nc));

        // coefficient per cell from the current iterate
        let coeff = |v: &[f64]| -> Vec<f64> {
            match &pb.coefficient {
                Coefficient::Fixed(a) => a.values()[base..base + sc].to_vec(),
                Coefficient::Law(law) => (0..sc)
                    .map(|s| {
                        let mut q = vec![0.0; n * nc];
                        for j in 0..nc {
                            st.cell_gradient(v, nc, j, s, &mut q);
                            if let Some(hs) = &shift_state {
                                st.cell_gradient(hs, nc, j, s, &mut q);
                            }
                        }
                        if let Some(gc) = &shift_cell {
                            for (qq, gg) in q.iter_mut().zip(&gc[s * n * nc..(s + 1) * n * nc]) {
                                *qq += gg;
                            }
                        }
                        law.nu(norm(&q))
                    })
                    .collect(),
            }
        };
        // divergence of the explicit flux a S - D for component j
        let explicit = |a: &[f64], j: usize| -> Vec<f64> {
            let mut out = vec![0.0; sc];
            for (s, o) in out.iter_mut().enumerate() {
                let mut acc = 0.0;
                for ax in 0..n {
                    for plus in [true, false] {
                        let nb = st.neighbor(s, ax, plus);
                        let af = nb.map_or(a[s], |t| 0.5 * (a[s] + a[t]));
                        let d_at = |c: usize| data[c * n * nc + ax * nc + j];
                        let df = nb.map_or(d_at(s), |t| 0.5 * (d_at(s) + d_at(t)));
                        let mut sf = 0.0;
                        if let Some(gc) = &shift_cell {
                            let g_at = |c: usize| gc[c * n * nc + ax * nc + j];
                            sf = nb.map_or(g_at(s), |t| 0.5 * (g_at(s) + g_at(t)));
                        }
                        if let Some(hs) = &shift_state {
                            let own = hs[s * nc + j];
                            let other = nb.map_or(-own, |t| hs[t * nc + j]);
                            sf = if plus { (other - own) / h } else { (own - other) / h };
                        }
                        let coef = if subtract { af - 1.0 } else { af };
                        let flux = if sf == 0.0 { -df } else { coef * sf - df };
                        acc += if plus { flux } else { -flux };
                    }
                }
                *o = acc / h;
            }
            out
        };

        let mut incs = Vec::new();
        let mut iters = 0;
        let mut step_converged = fixed;
        let mut a = coeff(&v);
        let mut theta: f64 = 1.0;
        for _ in 0..cfg.picard_max {
            iters += 1;
            let sys = System::build(&st, &a, tau);
            let mut next = vec![0.0; sc * nc];
            for j in 0..nc {
                let ex = explicit(&a, j);
                let rhs: Vec<f64> = (0..sc)
                    .map(|s| {
                        let src = source.as_ref().map_or(0.0, |sv| sv[s * nc + j]);
                        prev[s * nc + j] / tau + ex[s] + src
                    })
                    .collect();
                let x0: Vec<f64> = (0..sc).map(|s| v[s * nc + j]).collect();
                let x = if use_thomas { sys.thomas(&rhs) } else { sys.pcg(&rhs, &x0, cfg.cg_tol, cfg.cg_max)? };
                for s in 0..sc {
                    next[s * nc + j] = x[s];
                }
            }
            let diff: f64 = next.iter().zip(&v).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
            let size = norm(&next);
            v = next;
            if fixed {
                break;
            }
            let inc = if size > 0.0 { diff / size } else { diff };
            // damp the coefficient update once increments stop shrinking
            if incs.last().is_some_and(|&last| inc >= last) {
                theta = (0.5 * theta).max(1.0 / 64.0);
            }
            incs.push(inc);
            let fresh = coeff(&v);
            if theta == 1.0 {
                a = fresh;
            } else {
                a.iter_mut().zip(&fresh).for_each(|(x, y)| *x += theta * (y - *x));
            }
            if diff <= cfg.picard_tol * size || diff == 0.0 {
                step_converged = true;
                break;
            }
        }
        if incs.len() > 3 && incs[2..].windows(2).any(|w| w[1] > w[0]) {
            monotone = false;
        }
        converged &= step_converged;
        iterations.push(iters);
        if iters > worst.0 {
            worst = (iters, incs);
        }

        // residual of the discrete equations with the final coefficient
        let a = coeff(&v);
        let sys = System::build(&st, &a, tau);
        let mut r_max: f64 = 0.0;
        let mut scale: f64 = 0.0;
        for j in 0..nc {
            let x: Vec<f64> = (0..sc).map(|s| v[s * nc + j]).collect();
            let mut ax = vec![0.0; sc];
            sys.apply(&x, &mut ax);
            let ex = explicit(&a, j);
            for s in 0..sc {
                let src = source.as_ref().map_or(0.0, |sv| sv[s * nc + j]);
                let r = ax[s] - prev[s * nc + j] / tau - ex[s] - src;
                let dt = (x[s] - prev[s * nc + j]) / tau;
                let diffusion = ax[s] - x[s] / tau;
                r_max = r_max.max(r.abs());
                scale = scale.max(dt.abs() + diffusion.abs() + ex[s].abs() + src.abs());
            }
        }
        residual = residual.max(r_max);
        residual_scale = residual_scale.max(scale);
        u.values_mut()[base * nc..(base + sc) * nc].copy_from_slice(&v);
        prev = v;
    }
    if residual_scale > 0.0 {
        residual /= residual_scale;
    }
    Ok(Solution { u, iterations, converged, residual, increments: worst.1, monotone_increments: monotone })
}

fn check_forcing(data: &ProblemData, grid: &Grid) -> Result<()> {
    data.validate()?;
    if !data.f.grid().same_layout(grid) {
        return Err(Error::GridMismatch);
    }
    Ok(())
}

/// `d_t u - div(a grad u) = -div f + s`.
pub fn solve_linear(tensor: &LinearTensor, data: &ProblemData, cfg: &SolverConfig) -> Result<Solution> {
    let grid = data.f.grid();
    check_forcing(data, tensor.coeff.grid())?;
    let pb = Problem {
        grid,
        coefficient: Coefficient::Fixed(&tensor.coeff),
        shift: Shift::None,
        data: &data.f,
        source: data.source.as_ref(),
        initial: data.initial.as_deref(),
        guess: None,
    };
    march(&pb, cfg)
}

/// `d_t u - div A(grad u) = -div f + s`, Picard from the previous step.
pub fn solve_nonlinear(law: &Law, data: &ProblemData, cfg: &SolverConfig) -> Result<Solution> {
    solve_nonlinear_from(law, data, cfg, None)
}

/// As `solve_nonlinear`, starting every step's Picard loop from `guess`.
pub fn solve_nonlinear_from(law: &Law, data: &ProblemData, cfg: &SolverConfig, guess: Option<&Field>) -> Result<Solution> {
    law.validate()?;
    data.validate()?;
    let grid = data.f.grid();
    if let Some(gs) = guess {
        if !gs.grid().same_layout(grid) || gs.comps() != grid.components() {
            return Err(Error::GridMismatch);
        }
    }
    let pb = Problem {
        grid,
        coefficient: Coefficient::Law(*law),
        shift: Shift::None,
        data: &data.f,
        source: data.source.as_ref(),
        initial: data.initial.as_deref(),
        guess,
    };
    march(&pb, cfg)
}

/// `f^k = f` where `|f| < k`, zero elsewhere.
pub fn truncate_forcing(f: &Field, k: f64) -> Result<Field> {
    if !(k > 0.0) {
        return Err(Error::InvalidParameter(format!("truncation level must be positive, got {k}")));
    }
    let mut out = f.clone();
    for cell in 0..f.grid().cells() {
        if !(f.cell_abs(cell) < k) {
            out.at_mut(cell).iter_mut().for_each(|v| *v = 0.0);
        }
    }
    Ok(out)
}

/// `div(a grad w + D)` per cell in the solver's discretization: face
/// gradients with odd ghosts for the diffusive part, face averages with even
/// ghosts for the data flux `D`. Without `coeff` only `D` contributes.
pub fn flux_divergence(w: &Field, coeff: Option<&Field>, data: &Field) -> Result<Field> {
    let g = w.grid();
    let (n, nc, sc, h) = (g.n(), w.comps(), g.space_cells(), g.h());
    if data.rank() != Rank::Matrix(n, nc) {
        return Err(Error::RankMismatch { expected: Rank::Matrix(n, nc).label(), found: data.rank().label() });
    }
    if !data.grid().same_layout(g) || coeff.is_some_and(|a| !a.grid().same_layout(g)) {
        return Err(Error::GridMismatch);
    }
    let st = Stencil::new(g);
    let mut out = Field::zeros(g, Rank::Vector(nc));
    for k in 0..g.nt() {
        let base = k * sc;
        for s in 0..sc {
            for j in 0..nc {
                let mut acc = 0.0;
                for ax in 0..n {
                    for plus in [true, false] {
                        let nb = st.neighbor(s, ax, plus);
                        let d_at = |c: usize| data.values()[(base + c) * n * nc + ax * nc + j];
                        let mut flux = nb.map_or(d_at(s), |t| 0.5 * (d_at(s) + d_at(t)));
                        if let Some(a) = coeff {
                            let a = a.values();
                            let own = w.values()[(base + s) * nc + j];
                            let other = nb.map_or(-own, |t| w.values()[(base + t) * nc + j]);
                            let af = nb.map_or(a[base + s], |t| 0.5 * (a[base + s] + a[base + t]));
                            let grad = if plus { (other - own) / h } else { (own - other) / h };
                            flux += af * grad;
                        }
                        acc += if plus { flux } else { -flux };
                    }
                }
                out.values_mut()[(base + s) * nc + j] = acc / h;
            }
        }
    }
    Ok(out)
}

/// Boundary lift `g` with flux `F` such that `d_t g = div F`, and the state
/// `g0` at time zero.
#[derive(Clone, Debug)]
pub struct Lift {
    pub g0: Vec<f64>,
    pub g: Field,
    pub flux: Field,
}

impl Lift {
    pub fn zero(grid: &Grid) -> Self {
        let nc = grid.components();
        Self {
            g0: vec![0.0; grid.space_cells() * nc],
            g: Field::zeros(grid, Rank::Vector(nc)),
            flux: Field::zeros(grid, Rank::Matrix(grid.n(), nc)),
        }
    }
}

/// Relative residual of `(g^k - g^(k-1)) / tau = div F^k` with the
/// face-averaged divergence used for data fluxes.
pub fn representation_residual(lift: &Lift) -> Result<f64> {
    let g = lift.g.grid();
    let (n, nc, sc) = (g.n(), g.components(), g.space_cells());
    if lift.flux.rank() != Rank::Matrix(n, nc) || lift.g.comps() != nc || lift.g0.len() != sc * nc {
        return Err(Error::RankMismatch { expected: Rank::Matrix(n, nc).label(), found: lift.flux.rank().label() });
    }
    let st = Stencil::new(g);
    let (mut r_max, mut scale) = (0.0f64, 0.0f64);
    for k in 0..g.nt() {
        for s in 0..sc {
            for j in 0..nc {
                let now = lift.g.values()[(k * sc + s) * nc + j];
                let before = if k == 0 { lift.g0[s * nc + j] } else { lift.g.values()[((k - 1) * sc + s) * nc + j] };
                let fl = |c: usize, ax: usize| lift.flux.values()[(k * sc + c) * n * nc + ax * nc + j];
                let mut div = 0.0;
                for ax in 0..n {
                    let fp = st.neighbor(s, ax, true).map_or(fl(s, ax), |t| 0.5 * (fl(s, ax) + fl(t, ax)));
                    let fm = st.neighbor(s, ax, false).map_or(fl(s, ax), |t| 0.5 * (fl(s, ax) + fl(t, ax)));
                    div += (fp - fm) / g.h();
                }
                let dt = (now - before) / g.tau();
                r_max = r_max.max((dt - div).abs());
                scale = scale.max(dt.abs() + div.abs());
            }
        }
    }
    Ok(if scale > 0.0 { r_max / scale } else { 0.0 })
}

/// Solves for `v = u - g` with zero Dirichlet data and returns `u = v + g`.
/// The lift must satisfy its representation identity to `rep_tol`.
pub fn lift_inhomogeneous(law: &Law, lift: &Lift, data: &ProblemData, cfg: &SolverConfig, rep_tol: f64) -> Result<Solution> {
    law.validate()?;
    data.validate()?;
    let grid = data.f.grid();
    if !lift.g.grid().same_layout(grid) || !lift.flux.grid().same_layout(grid) {
        return Err(Error::GridMismatch);
    }
    let residual = representation_residual(lift)?;
    if residual > rep_tol {
        return Err(Error::ResidualGate { residual, gate: rep_tol });
    }
    let grad_g = discrete_gradient(&lift.g)?;
    let combined = data.f.zip_map(&lift.flux, |a, b| a + b)?;
    let v0: Vec<f64> = match &data.initial {
        Some(u0) => u0.iter().zip(&lift.g0).map(|(a, b)| a - b).collect(),
        None => vec![0.0; lift.g0.len()],
    };
    let pb = Problem {
        grid,
        coefficient: Coefficient::Law(*law),
        shift: Shift::Cell(&grad_g),
        data: &combined,
        source: data.source.as_ref(),
        initial: Some(&v0),
        guess: None,
    };
    let mut sol = march(&pb, cfg)?;
    sol.u = sol.u.zip_map(&lift.g.clone().with_rank(sol.u.rank())?, |a, b| a + b)?;
    Ok(sol)
}

/// Solution of `d_t u - div A(grad u) = mu` through the heat lift `h`
/// (`d_t h - lap h = mu`) and `w = u - h`, which carries the flux
/// `A(grad w + grad h) - grad h`.
#[derive(Clone, Debug)]
pub struct MeasureSolution {
    pub u: Field,
    pub heat: Field,
    pub w: Solution,
}

pub fn measure_rhs_demo(law: &Law, mu: &Field, cfg: &SolverConfig) -> Result<MeasureSolution> {
    law.validate()?;
    let grid = mu.grid();
    let nc = grid.components();
    let source = match mu.rank() {
        Rank::Scalar => {
            let mut s = Field::zeros(grid, Rank::Vector(nc));
            for c in 0..grid.cells() {
                s.at_mut(c)[0] = mu.values()[c];
            }
            s
        }
        Rank::Vector(c) if c == nc => mu.clone(),
        r => return Err(Error::RankMismatch { expected: Rank::Vector(nc).label(), found: r.label() }),
    };
    let zero = ProblemData::zero(grid);
    let heat_data = ProblemData { f: zero.f.clone(), source: Some(source), initial: None };
    let heat = solve_linear(&LinearTensor::constant(grid, 1.0)?, &heat_data, cfg)?.u;
    let pb = Problem {
        grid,
        coefficient: Coefficient::Law(*law),
        shift: Shift::Face { state: &heat, subtract: true },
        data: &zero.f,
        source: None,
        initial: None,
        guess: None,
    };
    let w = march(&pb, cfg)?;
    let u = w.u.zip_map(&heat, |a, b| a + b)?;
    Ok(MeasureSolution { u, heat, w })
}

/// Parabolic Gaussian `exp(-|x-x0|^2/w^2 - (t-t0)^2/w^4)` scaled to total
/// discrete mass `mass`.
pub fn mollified_point_mass(grid: &Grid, x0: &[f64], t0: f64, width: f64, mass: f64) -> Result<Field> {
    if !(width > 0.0) {
        return Err(Error::InvalidParameter(format!("mollification width must be positive, got {width}")));
    }
    let n = grid.n();
    let raw = Field::scalar_from_fn(grid, |x, t| {
        let d2: f64 = (0..n).map(|a| (x[a] - x0[a]).powi(2)).sum();
        (-d2 / (width * width) - (t - t0).powi(2) / width.powi(4)).exp()
    });
    let total = crate::sum::exact_sum(raw.values().iter().copied()) * grid.cell_volume();
    if !(total > 0.0) {
        return Err(Error::InvalidParameter("point mass falls outside the grid".into()));
    }
    Ok(raw.scaled(mass / total))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::GridSpec;

    #[test]
    fn zero_data_gives_zero() {
        let g = Grid::new(GridSpec::uniform(1, 1, 8, 1.0, 8, 1.0 / 32.0)).unwrap();
        let s = solve_linear(&LinearTensor::constant(&g, 1.0).unwrap(), &ProblemData::zero(&g), &SolverConfig::default())
            .unwrap();
        assert!(s.u.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn strict_truncation() {
        let g = Grid::new(GridSpec::uniform(1, 1, 4, 1.0, 4, 1.0)).unwrap();
        let f = Field::constant(&g, Rank::Matrix(1, 1), 5.0);
        assert!(truncate_forcing(&f, 3.0).unwrap().values().iter().all(|&v| v == 0.0));
        assert!(truncate_forcing(&f, 5.0).unwrap().values().iter().all(|&v| v == 0.0));
        assert_eq!(truncate_forcing(&f, 5.5).unwrap(), f);
    }

    #[test]
    fn law_constants_hold_on_samples() {
        for law in [
            Law::Linear { nu: 2.0 },
            Law::MinPower { p: 3.0, nu_inf: 1.0 },
            Law::MaxPower { p: 1.5, nu_inf: 1.0, cap: 100.0 },
        ] {
            let r = check_law(&law, 2, 2, 2000, 7).unwrap();
            assert!(r.growth_ok && r.monotone_ok, "{law:?} {r:?}");
            assert!(r.linear_at_infinity(), "{law:?} {r:?}");
        }
    }
}
