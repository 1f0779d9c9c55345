//! Space-time grids, cell-centred fields, parabolic cylinders and norms.
//!
//! Cells are closed boxes of side `h` in space and `tau` in time; a value
//! lives at the cell centre and every integral is a midpoint sum with cell
//! volume `h^n * tau`. Flat storage is time-major, then space (axis 0
//! slowest), then component.

use std::io::{BufRead, Read, Write};

use crate::error::{Error, Result};
use crate::sum::ExactSum;

/// Relative slack (in units of a step) for cell-centre membership tests.
pub const BOUNDARY_TOL: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Boundary {
    Dirichlet,
    Periodic,
}

impl Boundary {
    pub fn name(self) -> &'static str {
        match self {
            Boundary::Dirichlet => "dirichlet",
            Boundary::Periodic => "periodic",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "dirichlet" | "dirichlet-zero" => Ok(Boundary::Dirichlet),
            "periodic" => Ok(Boundary::Periodic),
            other => Err(Error::Parse(format!("unknown boundary `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridSpec {
    pub n: usize,
    pub components: usize,
    pub extents: Vec<f64>,
    pub t_final: f64,
    pub h: f64,
    pub tau: f64,
    pub boundary: Vec<Boundary>,
}

impl GridSpec {
    /// Dirichlet walls on every axis.
    pub fn new(n: usize, components: usize, extents: Vec<f64>, t_final: f64, h: f64, tau: f64) -> Self {
        Self { n, components, extents, t_final, h, tau, boundary: vec![Boundary::Dirichlet; n] }
    }

    /// Square domain of `cells` per axis with `steps` time steps over `t_final`.
    pub fn uniform(n: usize, components: usize, cells: usize, length: f64, steps: usize, t_final: f64) -> Self {
        let h = length / cells as f64;
        let tau = t_final / steps as f64;
        Self::new(n, components, vec![length; n], t_final, h, tau)
    }

    pub fn with_boundary(mut self, b: Boundary) -> Self {
        self.boundary = vec![b; self.n];
        self
    }
}

fn step_count(len: f64, step: f64, what: &str) -> Result<usize> {
    let c = (len / step).round();
    if !(c.is_finite()) || c < 1.0 || (c * step - len).abs() > 1e-9 * len.abs().max(step) {
        return Err(Error::InvalidGrid(format!("{what}: length {len} is not a multiple of step {step}")));
    }
    Ok(c as usize)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Grid {
    spec: GridSpec,
    dims: [usize; 2],
    nt: usize,
    origin: [f64; 2],
    t0: f64,
}

pub fn make_grid(spec: GridSpec) -> Result<Grid> {
    Grid::new(spec)
}

impl Grid {
    pub fn new(spec: GridSpec) -> Result<Self> {
        if spec.n != 1 && spec.n != 2 {
            return Err(Error::InvalidGrid(format!("spatial dimension must be 1 or 2, got {}", spec.n)));
        }
        if spec.components == 0 {
            return Err(Error::InvalidGrid("component count must be at least 1".into()));
        }
        if !(spec.h > 0.0 && spec.h.is_finite()) || !(spec.tau > 0.0 && spec.tau.is_finite()) {
            return Err(Error::InvalidGrid(format!("steps must be positive: h={}, tau={}", spec.h, spec.tau)));
        }
        if spec.extents.len() != spec.n || spec.boundary.len() != spec.n {
            return Err(Error::InvalidGrid("extents and boundary need one entry per axis".into()));
        }
        let mut dims = [1usize; 2];
        for a in 0..spec.n {
            dims[a] = step_count(spec.extents[a], spec.h, "extent")?;
            if dims[a] < 4 {
                return Err(Error::InvalidGrid(format!("axis {a} has {} cells, need at least 4", dims[a])));
            }
        }
        let nt = step_count(spec.t_final, spec.tau, "final time")?;
        if nt < 4 {
            return Err(Error::InvalidGrid(format!("{nt} time steps, need at least 4")));
        }
        Ok(Self { spec, dims, nt, origin: [0.0; 2], t0: 0.0 })
    }

    /// Grid with explicit counts and origin; used for extended domains.
    pub fn with_layout(spec: GridSpec, dims: &[usize], nt: usize, origin: &[f64], t0: f64) -> Result<Self> {
        let mut g = Self::new(spec)?;
        let n = g.spec.n;
        g.dims[..n].copy_from_slice(&dims[..n]);
        g.origin[..n].copy_from_slice(&origin[..n]);
        g.nt = nt;
        g.t0 = t0;
        Ok(g)
    }

    pub fn spec(&self) -> &GridSpec {
        &self.spec
    }
    pub fn n(&self) -> usize {
        self.spec.n
    }
    pub fn components(&self) -> usize {
        self.spec.components
    }
    pub fn h(&self) -> f64 {
        self.spec.h
    }
    pub fn tau(&self) -> f64 {
        self.spec.tau
    }
    /// Spatial cell counts, one per axis.
    pub fn dims(&self) -> &[usize] {
        &self.dims[..self.spec.n]
    }
    /// Counts padded to two axes (second is 1 when `n == 1`).
    pub fn dims2(&self) -> [usize; 2] {
        self.dims
    }
    pub fn nt(&self) -> usize {
        self.nt
    }
    pub fn origin(&self) -> &[f64] {
        &self.origin[..self.spec.n]
    }
    pub fn t0(&self) -> f64 {
        self.t0
    }
    pub fn boundary(&self, axis: usize) -> Boundary {
        self.spec.boundary[axis]
    }
    pub fn space_cells(&self) -> usize {
        self.dims[0] * self.dims[1]
    }
    pub fn cells(&self) -> usize {
        self.nt * self.space_cells()
    }
    pub fn cell_volume(&self) -> f64 {
        self.spec.h.powi(self.spec.n as i32) * self.spec.tau
    }
    pub fn space_volume(&self) -> f64 {
        self.spec.h.powi(self.spec.n as i32)
    }
    pub fn total_volume(&self) -> f64 {
        self.cells() as f64 * self.cell_volume()
    }

    pub fn index(&self, k: usize, i: [usize; 2]) -> usize {
        (k * self.dims[0] + i[0]) * self.dims[1] + i[1]
    }
    pub fn space_index(&self, i: [usize; 2]) -> usize {
        i[0] * self.dims[1] + i[1]
    }
    /// `(time index, spatial indices)` of a flat cell index.
    pub fn coords(&self, cell: usize) -> (usize, [usize; 2]) {
        let i1 = cell % self.dims[1];
        let rest = cell / self.dims[1];
        (rest / self.dims[0], [rest % self.dims[0], i1])
    }
    pub fn x_center(&self, axis: usize, i: usize) -> f64 {
        self.origin[axis] + (i as f64 + 0.5) * self.spec.h
    }
    pub fn t_center(&self, k: usize) -> f64 {
        self.t0 + (k as f64 + 0.5) * self.spec.tau
    }
    pub fn center(&self, cell: usize) -> ([f64; 2], f64) {
        let (k, i) = self.coords(cell);
        let mut x = [0.0; 2];
        for a in 0..self.spec.n {
            x[a] = self.x_center(a, i[a]);
        }
        (x, self.t_center(k))
    }
    pub fn t_end(&self) -> f64 {
        self.t0 + self.nt as f64 * self.spec.tau
    }

    /// Same layout, different component count.
    pub fn with_components(&self, components: usize) -> Grid {
        let mut g = self.clone();
        g.spec.components = components;
        g
    }

    pub fn same_layout(&self, other: &Grid) -> bool {
        self.dims == other.dims
            && self.nt == other.nt
            && self.spec.n == other.spec.n
            && self.spec.h == other.spec.h
            && self.spec.tau == other.spec.tau
            && self.origin == other.origin
            && self.t0 == other.t0
    }
}

/// Parabolic distance `max(|x-y|_inf, sqrt|t-s|)`.
pub fn d_par(x: &[f64], t: f64, y: &[f64], s: f64) -> f64 {
    let mut d = (t - s).abs().sqrt();
    for (a, b) in x.iter().zip(y) {
        d = d.max((a - b).abs());
    }
    d
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Rank {
    Scalar,
    Vector(usize),
    /// `Matrix(n, N)`: component `a * N + j` holds the `a`-th partial of the `j`-th component.
    Matrix(usize, usize),
}

impl Rank {
    pub fn comps(self) -> usize {
        match self {
            Rank::Scalar => 1,
            Rank::Vector(c) => c,
            Rank::Matrix(a, b) => a * b,
        }
    }

    pub fn label(self) -> String {
        match self {
            Rank::Scalar => "scalar".into(),
            Rank::Vector(c) => format!("vector({c})"),
            Rank::Matrix(a, b) => format!("matrix({a}x{b})"),
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        let s = s.trim();
        if s == "scalar" {
            return Ok(Rank::Scalar);
        }
        let inner = |p: &str| s.strip_prefix(p).and_then(|r| r.strip_suffix(')'));
        if let Some(c) = inner("vector(") {
            return c.parse().map(Rank::Vector).map_err(|_| Error::Parse(format!("bad rank `{s}`")));
        }
        if let Some(m) = inner("matrix(") {
            if let Some((a, b)) = m.split_once('x') {
                if let (Ok(a), Ok(b)) = (a.parse(), b.parse()) {
                    return Ok(Rank::Matrix(a, b));
                }
            }
        }
        Err(Error::Parse(format!("bad rank `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Field {
    grid: Grid,
    rank: Rank,
    values: Vec<f64>,
}

impl Field {
    pub fn zeros(grid: &Grid, rank: Rank) -> Self {
        Self { grid: grid.clone(), rank, values: vec![0.0; grid.cells() * rank.comps()] }
    }

    pub fn constant(grid: &Grid, rank: Rank, c: f64) -> Self {
        Self { grid: grid.clone(), rank, values: vec![c; grid.cells() * rank.comps()] }
    }

    pub fn from_values(grid: &Grid, rank: Rank, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.cells() * rank.comps() {
            return Err(Error::InvalidParameter(format!(
                "expected {} values, got {}",
                grid.cells() * rank.comps(),
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(i));
        }
        Ok(Self { grid: grid.clone(), rank, values })
    }

    /// Samples `f(x, t, out)` at every cell centre.
    pub fn from_fn(grid: &Grid, rank: Rank, mut f: impl FnMut(&[f64], f64, &mut [f64])) -> Self {
        let c = rank.comps();
        let mut values = vec![0.0; grid.cells() * c];
        for cell in 0..grid.cells() {
            let (x, t) = grid.center(cell);
            f(&x[..grid.n()], t, &mut values[cell * c..(cell + 1) * c]);
        }
        Self { grid: grid.clone(), rank, values }
    }

    pub fn scalar_from_fn(grid: &Grid, mut f: impl FnMut(&[f64], f64) -> f64) -> Self {
        Self::from_fn(grid, Rank::Scalar, |x, t, out| out[0] = f(x, t))
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }
    pub fn rank(&self) -> Rank {
        self.rank
    }
    pub fn comps(&self) -> usize {
        self.rank.comps()
    }
    pub fn values(&self) -> &[f64] {
        &self.values
    }
    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }
    pub fn into_values(self) -> Vec<f64> {
        self.values
    }
    pub fn at(&self, cell: usize) -> &[f64] {
        let c = self.comps();
        &self.values[cell * c..(cell + 1) * c]
    }
    pub fn at_mut(&mut self, cell: usize) -> &mut [f64] {
        let c = self.comps();
        &mut self.values[cell * c..(cell + 1) * c]
    }

    /// Euclidean (Frobenius) magnitude of the value at `cell`.
    pub fn cell_abs(&self, cell: usize) -> f64 {
        cell_abs(self.at(cell))
    }

    /// Pointwise magnitude as a scalar field.
    pub fn abs(&self) -> Field {
        let values = (0..self.grid.cells()).map(|c| self.cell_abs(c)).collect();
        Field { grid: self.grid.clone(), rank: Rank::Scalar, values }
    }

    pub fn scaled(&self, c: f64) -> Field {
        self.map(|v| c * v)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Field {
        Field { grid: self.grid.clone(), rank: self.rank, values: self.values.iter().map(|&v| f(v)).collect() }
    }

    pub fn zip_map(&self, other: &Field, f: impl Fn(f64, f64) -> f64) -> Result<Field> {
        self.check_same(other)?;
        let values = self.values.iter().zip(&other.values).map(|(&a, &b)| f(a, b)).collect();
        Ok(Field { grid: self.grid.clone(), rank: self.rank, values })
    }

    pub fn check_same(&self, other: &Field) -> Result<()> {
        if !self.grid.same_layout(&other.grid) {
            return Err(Error::GridMismatch);
        }
        if self.rank != other.rank {
            return Err(Error::RankMismatch { expected: self.rank.label(), found: other.rank.label() });
        }
        Ok(())
    }

    pub fn max_abs(&self) -> f64 {
        (0..self.grid.cells()).map(|c| self.cell_abs(c)).fold(0.0, f64::max)
    }

    pub fn validate_finite(&self) -> Result<()> {
        match self.values.iter().position(|v| !v.is_finite()) {
            Some(i) => Err(Error::NonFinite(i)),
            None => Ok(()),
        }
    }

    /// The scalar field `c`-th component.
    pub fn component(&self, c: usize) -> Field {
        let k = self.comps();
        let values = (0..self.grid.cells()).map(|cell| self.values[cell * k + c]).collect();
        Field { grid: self.grid.clone(), rank: Rank::Scalar, values }
    }

    pub fn with_rank(mut self, rank: Rank) -> Result<Field> {
        if rank.comps() != self.rank.comps() {
            return Err(Error::RankMismatch { expected: self.rank.label(), found: rank.label() });
        }
        self.rank = rank;
        Ok(self)
    }
}

pub(crate) fn cell_abs(v: &[f64]) -> f64 {
    if v.len() == 1 {
        v[0].abs()
    } else {
        cell_abs_sq(v).sqrt()
    }
}

pub(crate) fn cell_abs_sq(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum()
}

fn norm_term(v: &[f64], p: f64) -> f64 {
    if p == 2.0 {
        cell_abs_sq(v)
    } else if p == 1.0 {
        cell_abs(v)
    } else {
        cell_abs(v).powf(p)
    }
}

fn finish_norm(sum: f64, vol: f64, p: f64) -> f64 {
    let s = sum * vol;
    if p == 1.0 {
        s
    } else if p == 2.0 {
        s.sqrt()
    } else {
        s.powf(1.0 / p)
    }
}

fn check_exponent(p: f64) -> Result<()> {
    if !(p >= 1.0) {
        return Err(Error::InvalidParameter(format!("norm exponent must be >= 1, got {p}")));
    }
    Ok(())
}

/// `(sum |f|^p vol)^(1/p)` with a correctly rounded sum; `p = inf` gives the max.
pub fn lp_norm(f: &Field, p: f64) -> Result<f64> {
    check_exponent(p)?;
    if p.is_infinite() {
        return Ok(f.max_abs());
    }
    let mut s = ExactSum::new();
    for cell in 0..f.grid.cells() {
        s.add(norm_term(f.at(cell), p) * 1.0);
    }
    Ok(finish_norm(s.value(), f.grid.cell_volume(), p))
}

/// `(sum |f|^p w vol)^(1/p)`.
pub fn weighted_lp_norm(f: &Field, w: &Field, p: f64) -> Result<f64> {
    check_exponent(p)?;
    check_weight(w)?;
    if !f.grid.same_layout(&w.grid) {
        return Err(Error::GridMismatch);
    }
    if p.is_infinite() {
        return Ok(f.max_abs());
    }
    let mut s = ExactSum::new();
    for cell in 0..f.grid.cells() {
        s.add(norm_term(f.at(cell), p) * w.values[cell]);
    }
    Ok(finish_norm(s.value(), f.grid.cell_volume(), p))
}

/// `sum |f|^p w vol` restricted to cells where `mask` holds.
pub fn masked_power_integral(f: &Field, w: Option<&Field>, p: f64, mask: impl Fn(usize) -> bool) -> f64 {
    let mut s = ExactSum::new();
    for cell in 0..f.grid.cells() {
        if mask(cell) {
            let wt = w.map_or(1.0, |w| w.values[cell]);
            s.add(norm_term(f.at(cell), p) * wt);
        }
    }
    s.value() * f.grid.cell_volume()
}

/// `sum w vol` over masked cells.
pub fn weight_measure(w: &Field, mask: impl Fn(usize) -> bool) -> f64 {
    let mut s = ExactSum::new();
    for cell in 0..w.grid.cells() {
        if mask(cell) {
            s.add(w.values[cell]);
        }
    }
    s.value() * w.grid.cell_volume()
}

pub fn check_weight(w: &Field) -> Result<()> {
    if w.rank != Rank::Scalar {
        return Err(Error::RankMismatch { expected: "scalar".into(), found: w.rank.label() });
    }
    match w.values.iter().position(|&v| !(v > 0.0) || !v.is_finite()) {
        Some(i) => Err(Error::NonPositiveWeight(i)),
        None => Ok(()),
    }
}

/// Spatial gradient of a scalar or vector field: central differences inside,
/// first-order one-sided at Dirichlet walls, wrap-around on periodic axes.
pub fn discrete_gradient(u: &Field) -> Result<Field> {
    let nc = match u.rank {
        Rank::Scalar => 1,
        Rank::Vector(c) => c,
        Rank::Matrix(..) => {
            return Err(Error::RankMismatch { expected: "vector".into(), found: u.rank.label() })
        }
    };
    let g = &u.grid;
    let n = g.n();
    let h = g.h();
    let dims = g.dims2();
    let mut out = Field::zeros(g, Rank::Matrix(n, nc));
    for cell in 0..g.cells() {
        let (k, i) = g.coords(cell);
        for a in 0..n {
            let m = dims[a];
            let shifted = |ia: usize| {
                let mut j = i;
                j[a] = ia;
                g.index(k, j)
            };
            let (lo, hi, span) = if i[a] > 0 && i[a] + 1 < m {
                (shifted(i[a] - 1), shifted(i[a] + 1), 2.0 * h)
            } else {
                match g.boundary(a) {
                    Boundary::Periodic => {
                        let l = (i[a] + m - 1) % m;
                        let r = (i[a] + 1) % m;
                        (shifted(l), shifted(r), 2.0 * h)
                    }
                    Boundary::Dirichlet if i[a] == 0 => (cell, shifted(1), h),
                    Boundary::Dirichlet => (shifted(i[a] - 1), cell, h),
                }
            };
            for j in 0..nc {
                out.values[cell * n * nc + a * nc + j] = (u.values[hi * nc + j] - u.values[lo * nc + j]) / span;
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Orientation {
    /// `(t - r^2, t]`
    Backward,
    /// `(t - r^2, t + r^2)`
    Symmetric,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Cylinder {
    pub x: Vec<f64>,
    pub t: f64,
    pub r: f64,
    pub orientation: Orientation,
}

impl Cylinder {
    pub fn backward(x: &[f64], t: f64, r: f64) -> Self {
        Self { x: x.to_vec(), t, r, orientation: Orientation::Backward }
    }
    pub fn symmetric(x: &[f64], t: f64, r: f64) -> Self {
        Self { x: x.to_vec(), t, r, orientation: Orientation::Symmetric }
    }

    /// Membership of a point (a cell centre) with the grid's boundary slack.
    pub fn contains(&self, y: &[f64], s: f64, h: f64, tau: f64) -> bool {
        let sx = BOUNDARY_TOL * h;
        let st = BOUNDARY_TOL * tau;
        if self.x.iter().zip(y).any(|(a, b)| (a - b).abs() > self.r + sx) {
            return false;
        }
        let r2 = self.r * self.r;
        match self.orientation {
            Orientation::Backward => s <= self.t + st && self.t - s < r2 - st,
            Orientation::Symmetric => (s - self.t).abs() < r2 - st,
        }
    }
}

/// Cells whose centres lie in the cylinder.
pub fn cylinder_cells(grid: &Grid, c: &Cylinder) -> Result<Vec<usize>> {
    if c.x.len() != grid.n() {
        return Err(Error::InvalidParameter("cylinder dimension differs from grid".into()));
    }
    if !(c.r >= 0.5 * grid.h() * (1.0 - BOUNDARY_TOL)) {
        return Err(Error::InvalidParameter(format!("radius {} below h/2", c.r)));
    }
    let (h, tau) = (grid.h(), grid.tau());
    let cells: Vec<usize> = (0..grid.cells())
        .filter(|&cell| {
            let (x, t) = grid.center(cell);
            c.contains(&x[..grid.n()], t, h, tau)
        })
        .collect();
    if cells.is_empty() {
        return Err(Error::InvalidParameter("cylinder contains no cell centre".into()));
    }
    Ok(cells)
}

/// Even reflection of `w` and odd reflection of `G` about `T` onto
/// `(-T, 3T)`, zero-padded by `margin` cells on each spatial side.
#[derive(Clone, Debug)]
pub struct Extension {
    pub grid: Grid,
    pub base: Grid,
    pub margin: usize,
}

impl Extension {
    pub fn new(base: &Grid, margin: usize) -> Result<Self> {
        if base.t0() != 0.0 || base.origin().iter().any(|&o| o != 0.0) {
            return Err(Error::InvalidGrid("extension expects a grid anchored at the origin".into()));
        }
        if (0..base.n()).any(|a| base.boundary(a) != Boundary::Dirichlet) {
            return Err(Error::InvalidGrid("extension requires Dirichlet walls".into()));
        }
        let n = base.n();
        let dims: Vec<usize> = base.dims().iter().map(|d| d + 2 * margin).collect();
        let origin: Vec<f64> = vec![-(margin as f64) * base.h(); n];
        let t_final = base.spec().t_final;
        let grid = Grid::with_layout(base.spec().clone(), &dims, 4 * base.nt(), &origin, -t_final)?;
        Ok(Self { grid, base: base.clone(), margin })
    }

    /// Base cell feeding an extended cell and whether it is a reflected copy.
    pub fn source(&self, cell: usize) -> Option<(usize, bool)> {
        let (k, i) = self.grid.coords(cell);
        let nt = self.base.nt();
        let mut j = [0usize; 2];
        let bd = self.base.dims2();
        for a in 0..self.base.n() {
            let ia = i[a].checked_sub(self.margin)?;
            if ia >= bd[a] {
                return None;
            }
            j[a] = ia;
        }
        if k < nt || k >= 3 * nt {
            return None;
        }
        let kk = k - nt;
        if kk < nt {
            Some((self.base.index(kk, j), false))
        } else {
            Some((self.base.index(2 * nt - 1 - kk, j), true))
        }
    }

    /// Whether the extended cell lies in `(0, 2T) x Omega`.
    pub fn in_domain(&self, cell: usize) -> bool {
        self.source(cell).is_some()
    }

    /// Whether the extended cell lies in the original `(0, T) x Omega`.
    pub fn in_base(&self, cell: usize) -> bool {
        matches!(self.source(cell), Some((_, false)))
    }

    fn extend(&self, f: &Field, odd: bool) -> Result<Field> {
        if !f.grid.same_layout(&self.base) {
            return Err(Error::GridMismatch);
        }
        let mut out = Field::zeros(&self.grid, f.rank);
        for cell in 0..self.grid.cells() {
            if let Some((src, refl)) = self.source(cell) {
                let sign = if odd && refl { -1.0 } else { 1.0 };
                for (o, v) in out.at_mut(cell).iter_mut().zip(f.at(src)) {
                    *o = sign * v;
                }
            }
        }
        Ok(out)
    }

    pub fn extend_even(&self, f: &Field) -> Result<Field> {
        self.extend(f, false)
    }

    pub fn extend_odd(&self, f: &Field) -> Result<Field> {
        self.extend(f, true)
    }

    /// Positive weight on the whole extended grid: even reflection about
    /// `T` (and about `0` and `2T` beyond), nearest wall value in the margin.
    pub fn extend_weight(&self, w: &Field) -> Result<Field> {
        check_weight(w)?;
        if !w.grid.same_layout(&self.base) {
            return Err(Error::GridMismatch);
        }
        let nt = self.base.nt() as isize;
        let bd = self.base.dims2();
        let mut out = Field::zeros(&self.grid, Rank::Scalar);
        for cell in 0..self.grid.cells() {
            let (k, i) = self.grid.coords(cell);
            let mut kk = k as isize - nt;
            kk = kk.rem_euclid(2 * nt);
            if kk >= nt {
                kk = 2 * nt - 1 - kk;
            }
            let mut j = [0usize; 2];
            for a in 0..self.base.n() {
                j[a] = (i[a] as isize - self.margin as isize).clamp(0, bd[a] as isize - 1) as usize;
            }
            out.values[cell] = w.values[self.base.index(kk as usize, j)];
        }
        Ok(out)
    }

    /// Restriction of an extended field to `(0, T) x Omega`.
    pub fn restrict(&self, f: &Field) -> Result<Field> {
        if !f.grid.same_layout(&self.grid) {
            return Err(Error::GridMismatch);
        }
        let mut out = Field::zeros(&self.base, f.rank);
        for cell in 0..self.grid.cells() {
            if let Some((src, false)) = self.source(cell) {
                out.at_mut(src).copy_from_slice(f.at(cell));
            }
        }
        Ok(out)
    }
}

/// Largest wall trace of `w`, estimated by linear extrapolation
/// `1.5 u_0 - 0.5 u_1` from the two cells next to each Dirichlet wall.
pub fn wall_trace(w: &Field) -> f64 {
    let g = &w.grid;
    let dims = g.dims2();
    let c = w.comps();
    let mut worst: f64 = 0.0;
    for k in 0..g.nt() {
        for a in 0..g.n() {
            if g.boundary(a) != Boundary::Dirichlet {
                continue;
            }
            let other = if g.n() == 2 { dims[1 - a] } else { 1 };
            for s in 0..other {
                for wall in [0usize, 1] {
                    let at = |off: usize| {
                        let ia = if wall == 0 { off } else { dims[a] - 1 - off };
                        let mut i = [0usize; 2];
                        i[a] = ia;
                        if g.n() == 2 {
                            i[1 - a] = s;
                        }
                        g.index(k, i)
                    };
                    let (c0, c1) = (at(0), at(1));
                    for j in 0..c {
                        let tr = 1.5 * w.values[c0 * c + j] - 0.5 * w.values[c1 * c + j];
                        worst = worst.max(tr.abs());
                    }
                }
            }
        }
    }
    worst
}

/// Extends `(w, G)` per the reflection rules after checking the wall trace.
pub fn extend_spacetime(w: &Field, g: &Field, margin: usize, wall_tol: f64) -> Result<(Extension, Field, Field)> {
    if !matches!(w.rank, Rank::Vector(_) | Rank::Scalar) {
        return Err(Error::RankMismatch { expected: "vector".into(), found: w.rank.label() });
    }
    if !matches!(g.rank, Rank::Matrix(..)) {
        return Err(Error::RankMismatch { expected: "matrix".into(), found: g.rank.label() });
    }
    let trace = wall_trace(w);
    if trace > wall_tol {
        return Err(Error::WallTrace { trace, tol: wall_tol });
    }
    let ext = Extension::new(w.grid(), margin)?;
    let we = ext.extend_even(w)?;
    let ge = ext.extend_odd(g)?;
    Ok((ext, we, ge))
}

fn header_line(f: &Field) -> String {
    let g = &f.grid;
    let join = |v: &[f64]| v.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(";");
    let dims: Vec<String> = g.dims().iter().map(|d| d.to_string()).collect();
    let bnd: Vec<&str> = (0..g.n()).map(|a| g.boundary(a).name()).collect();
    format!(
        "# n={} N={} extents={} T={:?} h={:?} tau={:?} rank={} dims={} nt={} origin={} t0={:?} boundary={}",
        g.n(),
        g.components(),
        join(&g.spec.extents),
        g.spec.t_final,
        g.h(),
        g.tau(),
        f.rank.label(),
        dims.join(";"),
        g.nt(),
        join(g.origin()),
        g.t0(),
        bnd.join(";")
    )
}

/// CSV with a `#` header line carrying the grid, then one row per cell:
/// `t_index, x_index..., c0, c1, ...` in storage order.
pub fn write_csv<W: Write>(f: &Field, mut out: W) -> Result<()> {
    writeln!(out, "{}", header_line(f))?;
    let n = f.grid.n();
    let mut cols = vec!["t_index".to_string()];
    cols.extend((0..n).map(|a| format!("x{a}_index")));
    cols.extend((0..f.comps()).map(|c| format!("c{c}")));
    writeln!(out, "{}", cols.join(","))?;
    for cell in 0..f.grid.cells() {
        let (k, i) = f.grid.coords(cell);
        let mut row = vec![k.to_string()];
        row.extend(i[..n].iter().map(|v| v.to_string()));
        row.extend(f.at(cell).iter().map(|v| format!("{v:?}")));
        writeln!(out, "{}", row.join(","))?;
    }
    Ok(())
}

fn parse_header(line: &str) -> Result<(Grid, Rank)> {
    let body = line.strip_prefix('#').ok_or_else(|| Error::Parse("missing header".into()))?;
    let mut kv = std::collections::BTreeMap::new();
    for tok in body.split_whitespace() {
        let (k, v) = tok.split_once('=').ok_or_else(|| Error::Parse(format!("bad header token `{tok}`")))?;
        kv.insert(k.to_string(), v.to_string());
    }
    let get = |k: &str| kv.get(k).cloned().ok_or_else(|| Error::Parse(format!("header lacks `{k}`")));
    let num = |k: &str| -> Result<f64> { get(k)?.parse().map_err(|_| Error::Parse(format!("bad `{k}`"))) };
    let int = |k: &str| -> Result<usize> { get(k)?.parse().map_err(|_| Error::Parse(format!("bad `{k}`"))) };
    let list = |k: &str| -> Result<Vec<f64>> {
        get(k)?.split(';').map(|s| s.parse().map_err(|_| Error::Parse(format!("bad `{k}`")))).collect()
    };
    let n = int("n")?;
    let boundary = get("boundary")?.split(';').map(Boundary::parse).collect::<Result<Vec<_>>>()?;
    let spec = GridSpec {
        n,
        components: int("N")?,
        extents: list("extents")?,
        t_final: num("T")?,
        h: num("h")?,
        tau: num("tau")?,
        boundary,
    };
    let dims: Vec<usize> =
        get("dims")?.split(';').map(|s| s.parse().map_err(|_| Error::Parse("bad dims".into()))).collect::<Result<_>>()?;
    let grid = Grid::with_layout(spec, &dims, int("nt")?, &list("origin")?, num("t0")?)?;
    Ok((grid, Rank::parse(&get("rank")?)?))
}

pub fn read_csv<R: BufRead>(input: R) -> Result<Field> {
    let mut lines = input.lines();
    let header = lines.next().ok_or_else(|| Error::Parse("empty input".into()))??;
    let (grid, rank) = parse_header(&header)?;
    lines.next().ok_or_else(|| Error::Parse("missing column line".into()))??;
    let c = rank.comps();
    let skip = 1 + grid.n();
    let mut values = Vec::with_capacity(grid.cells() * c);
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        for tok in line.split(',').skip(skip) {
            values.push(tok.trim().parse::<f64>().map_err(|_| Error::Parse(format!("bad value `{tok}`")))?);
        }
    }
    Field::from_values(&grid, rank, values)
}

const MAGIC: &[u8; 4] = b"PFLD";

/// Little-endian binary: magic, header line length + bytes, then values.
pub fn write_binary<W: Write>(f: &Field, mut out: W) -> Result<()> {
    let header = header_line(f);
    out.write_all(MAGIC)?;
    out.write_all(&(header.len() as u64).to_le_bytes())?;
    out.write_all(header.as_bytes())?;
    for v in &f.values {
        out.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_binary<R: Read>(mut input: R) -> Result<Field> {
    let mut magic = [0u8; 4];
    input.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Parse("bad magic".into()));
    }
    let mut len = [0u8; 8];
    input.read_exact(&mut len)?;
    let mut header = vec![0u8; u64::from_le_bytes(len) as usize];
    input.read_exact(&mut header)?;
    let header = String::from_utf8(header).map_err(|_| Error::Parse("header is not utf-8".into()))?;
    let (grid, rank) = parse_header(&header)?;
    let mut values = vec![0.0; grid.cells() * rank.comps()];
    let mut buf = [0u8; 8];
    for v in values.iter_mut() {
        input.read_exact(&mut buf)?;
        *v = f64::from_le_bytes(buf);
    }
    Field::from_values(&grid, rank, values)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid1(cells: usize, steps: usize) -> Grid {
        Grid::new(GridSpec::uniform(1, 1, cells, 1.0, steps, 1.0)).unwrap()
    }

    #[test]
    fn counting() {
        let g = grid1(8, 8);
        assert_eq!(g.cells(), 64);
        assert_eq!(g.cell_volume(), g.h() * g.tau());
        let g2 = Grid::new(GridSpec::uniform(2, 1, 4, 1.0, 4, 1.0)).unwrap();
        assert_eq!(g2.space_volume(), g2.h() * g2.h());
    }

    #[test]
    fn rejects_bad_steps() {
        assert!(Grid::new(GridSpec::new(1, 1, vec![1.0], 1.0, 0.0, 0.1)).is_err());
        assert!(Grid::new(GridSpec::new(1, 1, vec![1.0], 1.0, 0.125, -0.1)).is_err());
        assert!(Grid::new(GridSpec::new(1, 1, vec![1.0], 1.0, 0.3, 0.1)).is_err());
        assert!(Grid::new(GridSpec::new(1, 1, vec![1.0], 1.0, 0.5, 0.125)).is_err());
    }

    #[test]
    fn coords_roundtrip() {
        let g = Grid::new(GridSpec::uniform(2, 1, 5, 1.0, 6, 1.0)).unwrap();
        for cell in 0..g.cells() {
            let (k, i) = g.coords(cell);
            assert_eq!(g.index(k, i), cell);
        }
    }

    #[test]
    fn csv_and_binary_roundtrip() {
        let g = Grid::new(GridSpec::uniform(2, 2, 4, 1.0, 4, 0.5)).unwrap();
        let f = Field::from_fn(&g, Rank::Vector(2), |x, t, o| {
            o[0] = x[0] * 0.1 + t;
            o[1] = (x[1] * 7.0).sin();
        });
        let mut buf = Vec::new();
        write_csv(&f, &mut buf).unwrap();
        assert_eq!(read_csv(&buf[..]).unwrap(), f);
        let mut bin = Vec::new();
        write_binary(&f, &mut bin).unwrap();
        assert_eq!(read_binary(&bin[..]).unwrap(), f);
    }

    #[test]
    fn rank_labels_parse() {
        for r in [Rank::Scalar, Rank::Vector(3), Rank::Matrix(2, 3)] {
            assert_eq!(Rank::parse(&r.label()).unwrap(), r);
        }
    }
}
