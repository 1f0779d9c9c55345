//! Parabolic Whitney coverings of bad sets and their partitions of unity.
//!
//! Space-time is tiled dyadically: a level `l` tile has spatial side
//! `S = L 2^(l - 20)` for the domain length `L` and time length `S^2 / 4`;
//! the finest levels in use are finer than a grid cell. The cube of a tile
//! shares its centre, with radius `r = g_l S / 2` and time length `r^2`,
//! where `g_l = 4 - (l + 1) / 16` decreases with the level. Levels are tied
//! to the domain rather than the grid, so refinement keeps tile geometry.
//! A tile qualifies when `8Q` lies in the bad set; the cover consists of the
//! maximal qualifying tiles containing bad cell centres. Every geometric relation is decided on closed grid cells, and the
//! checker re-verifies all covering properties on the constructed cover.

use std::collections::BTreeSet;
use std::io::Write;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::field::{Field, Grid, Rank};

/// Number of tile levels; keeps `g_l` inside `(2, 4)`.
pub const LEVELS: u32 = 31;

/// Dilation of the level `l` cube relative to its tile.
pub fn gamma(level: u32) -> f64 {
    4.0 - (level as f64 + 1.0) / 16.0
}

/// Superlevel set `{M grad w > lambda} u {M G > lambda}` as a cell mask.
#[derive(Clone, Debug)]
pub struct BadSet {
    pub grid: Grid,
    pub lambda: f64,
    pub mask: Vec<bool>,
}

impl BadSet {
    pub fn from_mask(grid: &Grid, lambda: f64, mask: Vec<bool>) -> Result<Self> {
        if mask.len() != grid.cells() {
            return Err(Error::InvalidParameter(format!("mask has {} cells, grid has {}", mask.len(), grid.cells())));
        }
        Ok(Self { grid: grid.clone(), lambda, mask })
    }

    pub fn count(&self) -> usize {
        self.mask.iter().filter(|&&b| b).count()
    }

    pub fn measure(&self) -> f64 {
        self.count() as f64 * self.grid.cell_volume()
    }

    pub fn is_empty(&self) -> bool {
        !self.mask.iter().any(|&b| b)
    }
}

pub fn bad_set(m_grad: &Field, m_g: &Field, lambda: f64) -> Result<BadSet> {
    if !(lambda > 0.0) {
        return Err(Error::InvalidParameter(format!("threshold must be positive, got {lambda}")));
    }
    if m_grad.rank() != Rank::Scalar || m_g.rank() != Rank::Scalar {
        return Err(Error::RankMismatch { expected: "scalar".into(), found: m_grad.rank().label() });
    }
    if !m_grad.grid().same_layout(m_g.grid()) {
        return Err(Error::GridMismatch);
    }
    let mask = m_grad.values().iter().zip(m_g.values()).map(|(&a, &b)| a > lambda || b > lambda).collect();
    BadSet::from_mask(m_grad.grid(), lambda, mask)
}

/// Axis-aligned space-time box; unused spatial axes are ignored.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ParBox {
    pub n: usize,
    pub lo: [f64; 2],
    pub hi: [f64; 2],
    pub t_lo: f64,
    pub t_hi: f64,
}

impl ParBox {
    pub fn volume(&self) -> f64 {
        (0..self.n).map(|a| self.hi[a] - self.lo[a]).product::<f64>() * (self.t_hi - self.t_lo)
    }

    /// Point in the open box.
    pub fn contains(&self, x: &[f64], t: f64) -> bool {
        t > self.t_lo && t < self.t_hi && (0..self.n).all(|a| x[a] > self.lo[a] && x[a] < self.hi[a])
    }

    pub fn intersection(&self, o: &ParBox) -> Option<ParBox> {
        let mut b = *self;
        for a in 0..self.n {
            b.lo[a] = self.lo[a].max(o.lo[a]);
            b.hi[a] = self.hi[a].min(o.hi[a]);
        }
        b.t_lo = self.t_lo.max(o.t_lo);
        b.t_hi = self.t_hi.min(o.t_hi);
        let ok = b.t_lo <= b.t_hi && (0..self.n).all(|a| b.lo[a] <= b.hi[a]);
        ok.then_some(b)
    }

    pub fn intersects_open(&self, o: &ParBox) -> bool {
        self.intersection(o).is_some_and(|b| b.t_lo < b.t_hi && (0..self.n).all(|a| b.lo[a] < b.hi[a]))
    }

    pub fn intersects_closed(&self, o: &ParBox) -> bool {
        self.intersection(o).is_some()
    }

    /// Lattice ranges of the closed cells meeting the closed box, or `None`
    /// when some of them lie outside the grid.
    pub fn cell_ranges(&self, grid: &Grid) -> Option<[(usize, usize); 3]> {
        let range = |lo: f64, hi: f64, o: f64, step: f64, len: usize| -> Option<(usize, usize)> {
            let a = ((lo - o) / step - 1.0).ceil();
            let b = ((hi - o) / step).floor();
            (a >= 0.0 && b < len as f64 && a <= b).then_some((a as usize, b as usize + 1))
        };
        let dims = grid.dims2();
        let t = range(self.t_lo, self.t_hi, grid.t0(), grid.tau(), grid.nt())?;
        let x0 = range(self.lo[0], self.hi[0], grid.origin()[0], grid.h(), dims[0])?;
        let x1 = if self.n == 2 { range(self.lo[1], self.hi[1], grid.origin()[1], grid.h(), dims[1])? } else { (0, 1) };
        Some([t, x0, x1])
    }

    /// Like `cell_ranges` but clipped to the grid; `None` if disjoint.
    pub fn clipped_ranges(&self, grid: &Grid) -> Option<[(usize, usize); 3]> {
        let range = |lo: f64, hi: f64, o: f64, step: f64, len: usize| -> Option<(usize, usize)> {
            let a = ((lo - o) / step - 1.0).ceil().max(0.0);
            let b = ((hi - o) / step).floor().min(len as f64 - 1.0);
            (a <= b).then_some((a as usize, b as usize + 1))
        };
        let dims = grid.dims2();
        let t = range(self.t_lo, self.t_hi, grid.t0(), grid.tau(), grid.nt())?;
        let x0 = range(self.lo[0], self.hi[0], grid.origin()[0], grid.h(), dims[0])?;
        let x1 = if self.n == 2 { range(self.lo[1], self.hi[1], grid.origin()[1], grid.h(), dims[1])? } else { (0, 1) };
        Some([t, x0, x1])
    }
}

fn cells_of(grid: &Grid, r: [(usize, usize); 3]) -> impl Iterator<Item = usize> + '_ {
    (r[0].0..r[0].1).flat_map(move |k| {
        (r[1].0..r[1].1).flat_map(move |i| (r[2].0..r[2].1).map(move |j| grid.index(k, [i, j])))
    })
}

/// One Whitney cube and the tile it grows from.
#[derive(Clone, Debug, PartialEq)]
pub struct Cube {
    pub level: u32,
    /// Tile indices `(time, x0, x1)` at its level.
    pub anchor: [i64; 3],
    pub side: f64,
    pub r: f64,
    pub center: [f64; 2],
    pub t_center: f64,
}

impl Cube {
    /// `alpha Q`: spatial half-width `alpha r`, time length `alpha^2 r^2`.
    pub fn scaled(&self, n: usize, alpha: f64) -> ParBox {
        let w = alpha * self.r;
        let ht = 0.5 * alpha * alpha * self.r * self.r;
        let mut b = ParBox { n, lo: [0.0; 2], hi: [0.0; 2], t_lo: self.t_center - ht, t_hi: self.t_center + ht };
        for a in 0..n {
            b.lo[a] = self.center[a] - w;
            b.hi[a] = self.center[a] + w;
        }
        b
    }

    pub fn tile(&self, n: usize) -> ParBox {
        let lt = 0.25 * self.side * self.side;
        let mut b = ParBox {
            n,
            lo: [0.0; 2],
            hi: [0.0; 2],
            t_lo: self.t_center - 0.5 * lt,
            t_hi: self.t_center + 0.5 * lt,
        };
        for a in 0..n {
            b.lo[a] = self.center[a] - 0.5 * self.side;
            b.hi[a] = self.center[a] + 0.5 * self.side;
        }
        b
    }

    pub fn volume(&self, n: usize) -> f64 {
        (2.0 * self.r).powi(n as i32) * self.r * self.r
    }
}

/// Level whose tiles have side equal to the domain length.
const UNIT_LEVEL: i32 = 20;

/// Dyadic tiling geometry of a grid.
#[derive(Clone, Debug)]
struct Tiling {
    grid: Grid,
    /// Finest tile side is `h / 2^fine`.
    #[cfg_attr(not(test), allow(dead_code))]
    fine: u32,
    /// Level of the finest tile.
    first: u32,
    unit: f64,
}

impl Tiling {
    fn new(grid: &Grid) -> Result<Self> {
        let (h, tau) = (grid.h(), grid.tau());
        // the finest tile's 8Q stays inside the cell of any point it contains
        let mut fine = 0;
        loop {
            let s = h / 2f64.powi(fine as i32);
            if 16.5 * s < 0.5 * h && 128.125 * s * s < 0.5 * tau {
                break;
            }
            fine += 1;
        }
        let unit = grid.spec().extents.iter().copied().fold(0.0, f64::max);
        let finest = h / 2f64.powi(fine as i32);
        let first = UNIT_LEVEL + ((finest / unit).log2() + 1e-9).floor() as i32;
        if first < 0 || first as u32 >= LEVELS {
            return Err(Error::InvalidGrid(format!("cell size {h} out of range for tiling the domain")));
        }
        Ok(Self { grid: grid.clone(), fine, first: first as u32, unit })
    }

    fn side(&self, level: u32) -> f64 {
        self.unit * 2f64.powi(level as i32 - UNIT_LEVEL)
    }

    fn cube(&self, level: u32, anchor: [i64; 3]) -> Cube {
        let s = self.side(level);
        let lt = 0.25 * s * s;
        let n = self.grid.n();
        let mut center = [0.0; 2];
        for a in 0..n {
            center[a] = self.grid.origin()[a] + (anchor[a + 1] as f64 + 0.5) * s;
        }
        Cube {
            level,
            anchor,
            side: s,
            r: 0.5 * gamma(level) * s,
            center,
            t_center: self.grid.t0() + (anchor[0] as f64 + 0.5) * lt,
        }
    }

    fn tile_at(&self, level: u32, x: &[f64], t: f64) -> [i64; 3] {
        let s = self.side(level);
        let lt = 0.25 * s * s;
        let mut a = [0i64; 3];
        a[0] = ((t - self.grid.t0()) / lt).floor() as i64;
        for ax in 0..self.grid.n() {
            a[ax + 1] = ((x[ax] - self.grid.origin()[ax]) / s).floor() as i64;
        }
        a
    }
}

/// Prefix counts of bad cells for constant-time box queries.
struct BadCounts {
    table: Vec<u32>,
    d: [usize; 2],
}

impl BadCounts {
    fn new(bad: &BadSet) -> Self {
        let g = &bad.grid;
        let d = g.dims2();
        let (s1, s2) = (d[0] + 1, d[1] + 1);
        let idx = |k: usize, i: usize, j: usize| (k * s1 + i) * s2 + j;
        let mut table = vec![0u32; (g.nt() + 1) * s1 * s2];
        for k in 0..g.nt() {
            for i in 0..d[0] {
                for j in 0..d[1] {
                    let v = bad.mask[g.index(k, [i, j])] as u32;
                    table[idx(k + 1, i + 1, j + 1)] = v + table[idx(k, i + 1, j + 1)] + table[idx(k + 1, i, j + 1)]
                        + table[idx(k + 1, i + 1, j)]
                        + table[idx(k, i, j)]
                        - table[idx(k, i, j + 1)]
                        - table[idx(k, i + 1, j)]
                        - table[idx(k + 1, i, j)];
                }
            }
        }
        Self { table, d }
    }

    fn all_bad(&self, r: [(usize, usize); 3]) -> bool {
        let (s1, s2) = (self.d[0] + 1, self.d[1] + 1);
        let t = |k: usize, i: usize, j: usize| self.table[(k * s1 + i) * s2 + j] as i64;
        let [k, a, b] = r;
        let count = t(k.1, a.1, b.1) - t(k.0, a.1, b.1) - t(k.1, a.0, b.1) - t(k.1, a.1, b.0)
            + t(k.0, a.0, b.1)
            + t(k.0, a.1, b.0)
            + t(k.1, a.0, b.0)
            - t(k.0, a.0, b.0);
        count == ((k.1 - k.0) * (a.1 - a.0) * (b.1 - b.0)) as i64
    }

    /// Whether the closed box lies in the bad set (cells outside the grid
    /// count as good).
    fn inside(&self, grid: &Grid, b: &ParBox) -> bool {
        b.cell_ranges(grid).is_some_and(|r| self.all_bad(r))
    }
}

/// The cover of a bad set.
#[derive(Clone, Debug)]
pub struct WhitneyCover {
    pub grid: Grid,
    pub cubes: Vec<Cube>,
    /// `A_k`: cubes whose `3/4`-scaled box meets that of cube `k` (includes `k`).
    pub neighbors: Vec<Vec<usize>>,
    /// Level of the finest tiles, which are at most `h / 64` wide.
    pub first_level: u32,
}

impl WhitneyCover {
    pub fn len(&self) -> usize {
        self.cubes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cubes.is_empty()
    }
}

pub fn whitney_cover(bad: &BadSet) -> Result<WhitneyCover> {
    let grid = &bad.grid;
    let tiling = Tiling::new(grid)?;
    let counts = BadCounts::new(bad);
    let n = grid.n();
    let qualifies = |level: u32, anchor: [i64; 3]| {
        let c = tiling.cube(level, anchor);
        counts.inside(grid, &c.scaled(n, 8.0))
    };
    let picked: BTreeSet<(u32, [i64; 3])> = (0..grid.cells())
        .into_par_iter()
        .filter(|&c| bad.mask[c])
        .map(|cell| {
            let (x, t) = grid.center(cell);
            // qualification is inherited by children, so scan upward
            let mut best = None;
            for level in tiling.first..LEVELS {
                let a = tiling.tile_at(level, &x[..n], t);
                if qualifies(level, a) {
                    best = Some((level, a));
                } else {
                    break;
                }
            }
            best.expect("the finest tile of a bad cell always qualifies")
        })
        .collect::<Vec<_>>()
        .into_iter()
        .collect();
    let cubes: Vec<Cube> = picked.into_iter().map(|(l, a)| tiling.cube(l, a)).collect();
    let neighbors = neighbor_sets(grid, &cubes);
    Ok(WhitneyCover { grid: grid.clone(), cubes, neighbors, first_level: tiling.first })
}

/// Pairs `(j, k)` of cubes whose `alpha`-scaled boxes meet, per cube,
/// found through buckets of the grid cells each box meets.
fn meeting_pairs(grid: &Grid, cubes: &[Cube], alpha: f64, open: bool) -> Vec<Vec<usize>> {
    let n = grid.n();
    let boxes: Vec<ParBox> = cubes.iter().map(|c| c.scaled(n, alpha)).collect();
    let mut buckets: Vec<Vec<u32>> = vec![Vec::new(); grid.cells()];
    for (j, b) in boxes.iter().enumerate() {
        if let Some(r) = b.clipped_ranges(grid) {
            for cell in cells_of(grid, r) {
                buckets[cell].push(j as u32);
            }
        }
    }
    (0..cubes.len())
        .into_par_iter()
        .map(|k| {
            let mut out = BTreeSet::new();
            if let Some(r) = boxes[k].clipped_ranges(grid) {
                for cell in cells_of(grid, r) {
                    for &j in &buckets[cell] {
                        let j = j as usize;
                        let hit =
                            if open { boxes[k].intersects_open(&boxes[j]) } else { boxes[k].intersects_closed(&boxes[j]) };
                        if hit {
                            out.insert(j);
                        }
                    }
                }
            }
            out.into_iter().collect()
        })
        .collect()
}

/// `A_k = { j : 3/4 Q_k and 3/4 Q_j intersect }`.
pub fn neighbor_sets(grid: &Grid, cubes: &[Cube]) -> Vec<Vec<usize>> {
    meeting_pairs(grid, cubes, 0.75, true)
}

/// Per-cell count of cubes whose open `alpha`-box contains the cell centre.
pub fn center_counts(grid: &Grid, cubes: &[Cube], alpha: f64) -> Vec<u32> {
    let n = grid.n();
    let mut counts = vec![0u32; grid.cells()];
    for c in cubes {
        let b = c.scaled(n, alpha);
        if let Some(r) = b.clipped_ranges(grid) {
            for cell in cells_of(grid, r) {
                let (x, t) = grid.center(cell);
                if b.contains(&x[..n], t) {
                    counts[cell] += 1;
                }
            }
        }
    }
    counts
}

/// Outcome of the covering-property checker.
#[derive(Clone, Debug, PartialEq)]
pub struct CoverCheck {
    /// Union of the half cubes equals the bad set at cell centres.
    pub w1: bool,
    /// `8Q` inside and `16Q` meeting the complement.
    pub w2: bool,
    /// Touching cubes have radii within a factor 2.
    pub w3: bool,
    /// Quarter cubes pairwise disjoint.
    pub w4: bool,
    /// Largest number of `4Q` containing one cell centre.
    pub overlap_4q: usize,
    /// Largest neighbour set.
    pub max_neighbors: usize,
    pub w6: bool,
    /// Smallest `|3/4 Q_j n 3/4 Q_k| / max(|Q_j|, |Q_k|)` over neighbours.
    pub w6_min_ratio: f64,
    pub w7: bool,
    /// Neighbour relation is symmetric and reflexive.
    pub neighbors_symmetric: bool,
}

impl CoverCheck {
    pub fn k_overlap(&self) -> usize {
        self.overlap_4q.max(self.max_neighbors)
    }

    pub fn failures(&self) -> Vec<&'static str> {
        let mut f = Vec::new();
        for (ok, name) in [
            (self.w1, "W1"),
            (self.w2, "W2"),
            (self.w3, "W3"),
            (self.w4, "W4"),
            (self.w6, "W6"),
            (self.w7, "W7"),
            (self.neighbors_symmetric, "W8"),
        ] {
            if !ok {
                f.push(name);
            }
        }
        f
    }

    pub fn passed(&self) -> bool {
        self.failures().is_empty()
    }
}

pub fn check_cover(bad: &BadSet, cover: &WhitneyCover) -> CoverCheck {
    let grid = &bad.grid;
    let n = grid.n();
    let cubes = &cover.cubes;
    let counts = BadCounts::new(bad);

    let half = center_counts(grid, cubes, 0.5);
    let w1 = (0..grid.cells()).all(|c| bad.mask[c] == (half[c] > 0));

    let w2 = cubes
        .par_iter()
        .all(|c| counts.inside(grid, &c.scaled(n, 8.0)) && !counts.inside(grid, &c.scaled(n, 16.0)));

    let touching = meeting_pairs(grid, cubes, 1.0, false);
    let w3 = touching.iter().enumerate().all(|(k, js)| {
        js.iter().all(|&j| 0.5 * cubes[k].r <= cubes[j].r && cubes[j].r <= 2.0 * cubes[k].r)
    });

    let quarter = meeting_pairs(grid, cubes, 0.25, true);
    let w4 = quarter.iter().enumerate().all(|(k, js)| js.iter().all(|&j| j == k));

    let overlap_4q = center_counts(grid, cubes, 4.0).into_iter().max().unwrap_or(0) as usize;
    let nb = &cover.neighbors;
    let max_neighbors = nb.iter().map(Vec::len).max().unwrap_or(0);
    let neighbors_symmetric = nb.iter().enumerate().all(|(k, js)| {
        js.contains(&k) && js.iter().all(|&j| nb[j].binary_search(&k).is_ok())
    });

    let floor = 32f64.powi(-(n as i32) - 2);
    let mut w6_min_ratio = f64::INFINITY;
    let mut w7 = true;
    for (k, js) in nb.iter().enumerate() {
        let bk = cubes[k].scaled(n, 0.75);
        for &j in js {
            let v = cubes[j].scaled(n, 0.75).intersection(&bk).map_or(0.0, |b| b.volume());
            let ratio = v / cubes[j].volume(n).max(cubes[k].volume(n));
            w6_min_ratio = w6_min_ratio.min(ratio);
            w7 &= 0.5 * cubes[k].r <= cubes[j].r && cubes[j].r < 2.0 * cubes[k].r;
        }
    }
    CoverCheck {
        w1,
        w2,
        w3,
        w4,
        overlap_4q,
        max_neighbors,
        w6: w6_min_ratio >= floor,
        w6_min_ratio,
        w7,
        neighbors_symmetric,
    }
}

/// `C^1` plateau: 1 on `|s - c| <= a`, 0 on `|s - c| >= b`, cubic between.
/// Returns value, first and second derivative.
pub fn plateau(s: f64, c: f64, a: f64, b: f64) -> (f64, f64, f64) {
    let d = (s - c).abs();
    if d <= a {
        return (1.0, 0.0, 0.0);
    }
    if d >= b {
        return (0.0, 0.0, 0.0);
    }
    let u = (b - d) / (b - a);
    let du = -(s - c).signum() / (b - a);
    (u * u * (3.0 - 2.0 * u), 6.0 * u * (1.0 - u) * du, (6.0 - 12.0 * u) * du * du)
}

/// Value and derivatives of one bump at one cell centre.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct BumpSample {
    pub cell: usize,
    pub value: f64,
    pub dt: f64,
    pub grad: [f64; 2],
    /// `(xx, xy, yy)`.
    pub hess: [f64; 3],
}

fn bump_samples(grid: &Grid, cube: &Cube) -> Vec<BumpSample> {
    let n = grid.n();
    let b = cube.scaled(n, 0.75);
    let r = cube.r;
    let Some(range) = b.clipped_ranges(grid) else { return Vec::new() };
    let mut out = Vec::new();
    for cell in cells_of(grid, range) {
        let (x, t) = grid.center(cell);
        if !b.contains(&x[..n], t) {
            continue;
        }
        let (pt, dpt, _) = plateau(t, cube.t_center, 0.125 * r * r, 0.28125 * r * r);
        let mut px = [(1.0, 0.0, 0.0); 2];
        for a in 0..n {
            px[a] = plateau(x[a], cube.center[a], 0.5 * r, 0.75 * r);
        }
        let space = px[0].0 * px[1].0;
        let mut s = BumpSample { cell, value: pt * space, dt: dpt * space, ..Default::default() };
        s.grad[0] = pt * px[0].1 * px[1].0;
        s.hess[0] = pt * px[0].2 * px[1].0;
        if n == 2 {
            s.grad[1] = pt * px[0].0 * px[1].1;
            s.hess[1] = pt * px[0].1 * px[1].1;
            s.hess[2] = pt * px[0].0 * px[1].2;
        }
        if s.value > 0.0 {
            out.push(s);
        }
    }
    out
}

/// Bumps `rho_j` sampled at cell centres, with analytic derivatives.
#[derive(Clone, Debug)]
pub struct PartitionOfUnity {
    /// Unnormalized bumps `psi_j`.
    pub bumps: Vec<Vec<BumpSample>>,
    /// Normalized `rho_j = psi_j / sum psi` (only where the sum is off 1).
    pub rho: Vec<Vec<BumpSample>>,
    /// `sum_j psi_j` per cell.
    pub sum: Vec<f64>,
}

/// Tolerance on `sum psi - 1` below which the bumps are left unnormalized.
pub const NORMALIZE_TOL: f64 = 1e-12;

pub fn partition_of_unity(cover: &WhitneyCover) -> PartitionOfUnity {
    let grid = &cover.grid;
    let bumps: Vec<Vec<BumpSample>> = cover.cubes.par_iter().map(|c| bump_samples(grid, c)).collect();
    let cells = grid.cells();
    let mut sum = vec![0.0; cells];
    let mut dsum = vec![BumpSample::default(); cells];
    for list in &bumps {
        for s in list {
            sum[s.cell] += s.value;
            let d = &mut dsum[s.cell];
            d.dt += s.dt;
            for a in 0..2 {
                d.grad[a] += s.grad[a];
            }
            for a in 0..3 {
                d.hess[a] += s.hess[a];
            }
        }
    }
    let rho = bumps
        .par_iter()
        .map(|list| {
            list.iter()
                .map(|s| {
                    let (q, d) = (sum[s.cell], &dsum[s.cell]);
                    let value = if (q - 1.0).abs() > NORMALIZE_TOL { s.value / q } else { s.value };
                    let q2 = q * q;
                    let q3 = q2 * q;
                    let dt = s.dt / q - s.value * d.dt / q2;
                    let grad = [s.grad[0] / q - s.value * d.grad[0] / q2, s.grad[1] / q - s.value * d.grad[1] / q2];
                    let pairs = [(0, 0), (0, 1), (1, 1)];
                    let mut hess = [0.0; 3];
                    for (m, &(a, b)) in pairs.iter().enumerate() {
                        hess[m] = s.hess[m] / q - (s.grad[a] * d.grad[b] + s.grad[b] * d.grad[a]) / q2
                            - s.value * d.hess[m] / q2
                            + 2.0 * s.value * d.grad[a] * d.grad[b] / q3;
                    }
                    BumpSample { cell: s.cell, value, dt, grad, hess }
                })
                .collect()
        })
        .collect();
    PartitionOfUnity { bumps, rho, sum }
}

/// Outcome of the partition checker.
#[derive(Clone, Debug, PartialEq)]
pub struct PartitionCheck {
    /// `chi_{Q/2} <= psi_j <= chi_{3Q/4}` at every cell centre.
    pub p1_bumps: bool,
    /// `rho_j <= chi_{3Q/4}` and `rho_j > 0` on `Q/2`.
    pub p1_support: bool,
    /// Smallest `rho_j` over `Q/2` centres.
    pub rho_floor_half: f64,
    /// Measured `max_j (|rho_j| + r|grad| + r^2|hess| + r^2|d_t|)`.
    pub c_pou: f64,
    /// Largest `|sum_{j in A_k} rho_j - 1|` over `3/4 Q_k` centres.
    pub p3_defect: f64,
}

impl PartitionCheck {
    pub fn passed(&self) -> bool {
        self.p1_bumps && self.p1_support && self.p3_defect <= 1e-12 && self.c_pou.is_finite()
    }
}

pub fn check_partition(cover: &WhitneyCover, pou: &PartitionOfUnity) -> PartitionCheck {
    let grid = &cover.grid;
    let n = grid.n();
    let mut p1_bumps = true;
    let mut p1_support = true;
    let mut floor = f64::INFINITY;
    let mut c_pou: f64 = 0.0;
    for (j, cube) in cover.cubes.iter().enumerate() {
        let half = cube.scaled(n, 0.5);
        let threeq = cube.scaled(n, 0.75);
        let (psi, rho) = (&pou.bumps[j], &pou.rho[j]);
        // every sample lies in 3/4 Q; every Q/2 centre has value 1
        let half_cells: Vec<usize> = half
            .clipped_ranges(grid)
            .map(|r| {
                cells_of(grid, r)
                    .filter(|&c| {
                        let (x, t) = grid.center(c);
                        half.contains(&x[..n], t)
                    })
                    .collect()
            })
            .unwrap_or_default();
        for s in psi {
            let (x, t) = grid.center(s.cell);
            p1_bumps &= threeq.contains(&x[..n], t) && s.value <= 1.0 && s.value > 0.0;
        }
        for &c in &half_cells {
            match psi.iter().find(|s| s.cell == c) {
                Some(s) => p1_bumps &= s.value == 1.0,
                None => p1_bumps = false,
            }
            let v = rho.iter().find(|s| s.cell == c).map_or(0.0, |s| s.value);
            p1_support &= v > 0.0;
            floor = floor.min(v);
        }
        let r = cube.r;
        let mut m: [f64; 4] = [0.0; 4];
        for s in rho {
            p1_support &= s.value <= 1.0 + 1e-15;
            m[0] = m[0].max(s.value.abs());
            m[1] = m[1].max((s.grad[0] * s.grad[0] + s.grad[1] * s.grad[1]).sqrt());
            let hf = (s.hess[0] * s.hess[0] + 2.0 * s.hess[1] * s.hess[1] + s.hess[2] * s.hess[2]).sqrt();
            m[2] = m[2].max(hf);
            m[3] = m[3].max(s.dt.abs());
        }
        c_pou = c_pou.max(m[0] + r * m[1] + r * r * m[2] + r * r * m[3]);
    }
    // every sample of a neighbour of k inside 3/4 Q_k is summed there
    let mut per_cell = vec![0.0f64; grid.cells()];
    for list in &pou.rho {
        for s in list {
            per_cell[s.cell] += s.value;
        }
    }
    let mut defect: f64 = 0.0;
    for (k, cube) in cover.cubes.iter().enumerate() {
        let b = cube.scaled(n, 0.75);
        let mut local = std::collections::HashMap::new();
        for &j in &cover.neighbors[k] {
            for s in &pou.rho[j] {
                *local.entry(s.cell).or_insert(0.0) += s.value;
            }
        }
        if let Some(r) = b.clipped_ranges(grid) {
            for c in cells_of(grid, r) {
                let (x, t) = grid.center(c);
                if b.contains(&x[..n], t) {
                    let v = local.get(&c).copied().unwrap_or(0.0);
                    defect = defect.max((v - 1.0).abs()).max((per_cell[c] - v).abs());
                }
            }
        }
    }
    PartitionCheck { p1_bumps, p1_support, rho_floor_half: if floor.is_finite() { floor } else { 0.0 }, c_pou, p3_defect: defect }
}

/// Cover dump: `j, level, anchor_t, anchor_x0, anchor_x1, r, neighbors, overlap`,
/// where `overlap` is the largest `4Q` count over the cube's half-scale centres.
pub fn write_cover_csv<W: Write>(cover: &WhitneyCover, mut out: W) -> Result<()> {
    let grid = &cover.grid;
    let n = grid.n();
    let counts = center_counts(grid, &cover.cubes, 4.0);
    writeln!(out, "j,level,anchor_t,anchor_x0,anchor_x1,r,neighbors,overlap")?;
    for (j, c) in cover.cubes.iter().enumerate() {
        let half = c.scaled(n, 0.5);
        let overlap = half
            .clipped_ranges(grid)
            .map(|r| {
                cells_of(grid, r)
                    .filter(|&cell| {
                        let (x, t) = grid.center(cell);
                        half.contains(&x[..n], t)
                    })
                    .map(|cell| counts[cell])
                    .max()
                    .unwrap_or(0)
            })
            .unwrap_or(0);
        writeln!(
            out,
            "{j},{},{},{},{},{:.12e},{},{overlap}",
            c.level,
            c.anchor[0],
            c.anchor[1],
            c.anchor[2],
            c.r,
            cover.neighbors[j].len()
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::GridSpec;

    #[test]
    fn plateau_is_c1() {
        let (c, a, b) = (0.0, 0.5, 0.75);
        let (v, d, _) = plateau(0.6, c, a, b);
        assert!(v > 0.0 && v < 1.0 && d < 0.0);
        let e = 1e-7;
        for s in [0.55, 0.6, 0.7, -0.6] {
            let fd = (plateau(s + e, c, a, b).0 - plateau(s - e, c, a, b).0) / (2.0 * e);
            assert!((fd - plateau(s, c, a, b).1).abs() < 1e-6);
        }
        assert_eq!(plateau(0.5, c, a, b), (1.0, 0.0, 0.0));
        assert_eq!(plateau(0.75, c, a, b).0, 0.0);
    }

    #[test]
    fn empty_mask_gives_empty_cover() {
        let g = Grid::new(GridSpec::uniform(1, 1, 8, 1.0, 32, 1.0 / 32.0)).unwrap();
        let bad = BadSet::from_mask(&g, 1.0, vec![false; g.cells()]).unwrap();
        let cover = whitney_cover(&bad).unwrap();
        assert!(cover.is_empty());
        assert!(check_cover(&bad, &cover).passed());
    }

    #[test]
    fn finest_tile_fits_inside_its_cell() {
        let g = Grid::new(GridSpec::uniform(1, 1, 8, 1.0, 32, 1.0 / 32.0)).unwrap();
        let t = Tiling::new(&g).unwrap();
        assert!(t.fine >= 6);
        assert!(t.side(t.first) <= g.h() / 64.0);
    }
}
