//! Parabolic maximal operators over a factor-2 radius ladder.
//!
//! `M f(z)` is the largest average of `|f|` over the backward cylinders
//! `(t - r^2, t] x [x - r, x + r]^n` anchored at `z` (or the centred ones
//! `(t - r^2, t + r^2) x ...` when so configured), with `f` extended by
//! zero off the grid: the divisor is the full lattice count of the cylinder.
//! Cylinder sums are exact and rounded once, so the summed-area fast path
//! and the brute-force oracle agree bit for bit.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::field::{Cylinder, Field, Grid, Orientation, Rank, BOUNDARY_TOL};
use crate::boxsum::BoxSums;
use crate::sum::ExactSum;

#[derive(Clone, Debug, PartialEq)]
pub struct MaximalConfig {
    radii: Vec<f64>,
    pub q: f64,
    pub restrict: Option<f64>,
    pub orientation: Orientation,
}

impl MaximalConfig {
    pub fn new(radii: Vec<f64>, q: f64, restrict: Option<f64>) -> Result<Self> {
        if radii.is_empty() {
            return Err(Error::InvalidParameter("radius ladder is empty".into()));
        }
        if radii.windows(2).any(|w| !(w[1] > w[0])) || radii.iter().any(|r| !(*r > 0.0 && r.is_finite())) {
            return Err(Error::InvalidParameter("ladder must be increasing".into()));
        }
        if !(q >= 1.0 && q.is_finite()) {
            return Err(Error::InvalidParameter(format!("power exponent must be >= 1, got {q}")));
        }
        Ok(Self { radii, q, restrict, orientation: Orientation::Backward })
    }

    /// `h/2, h, 2h, ...` up to the first radius whose cylinder covers the grid.
    pub fn dyadic(grid: &Grid) -> Self {
        let span = grid.dims().iter().map(|&d| d as f64 * grid.h()).fold(0.0, f64::max);
        let depth = grid.nt() as f64 * grid.tau();
        let mut r = 0.5 * grid.h();
        let mut radii = vec![r];
        while r < span || r * r < depth {
            r *= 2.0;
            radii.push(r);
        }
        Self { radii, q: 1.0, restrict: None, orientation: Orientation::Backward }
    }

    /// Dyadic ladder capped at `r_max` (always keeps `h/2`).
    pub fn dyadic_up_to(grid: &Grid, r_max: f64) -> Self {
        let mut radii = vec![0.5 * grid.h()];
        while radii.last().unwrap() * 2.0 <= r_max * (1.0 + 1e-12) {
            let r = radii.last().unwrap() * 2.0;
            radii.push(r);
        }
        Self { radii, q: 1.0, restrict: None, orientation: Orientation::Backward }
    }

    pub fn with_q(mut self, q: f64) -> Self {
        self.q = q;
        self
    }

    pub fn with_orientation(mut self, orientation: Orientation) -> Self {
        self.orientation = orientation;
        self
    }

    pub fn with_restrict(mut self, rho: Option<f64>) -> Self {
        self.restrict = rho;
        self
    }

    /// Radii in use after the optional restriction.
    pub fn radii(&self) -> Vec<f64> {
        match self.restrict {
            Some(rho) => self.radii.iter().copied().filter(|&r| r <= rho * (1.0 + 1e-12)).collect(),
            None => self.radii.clone(),
        }
    }

    fn check(&self, grid: &Grid) -> Result<Vec<f64>> {
        let radii = self.radii();
        if radii.is_empty() {
            return Err(Error::InvalidParameter("radius ladder is empty after restriction".into()));
        }
        if radii[0] < 0.5 * grid.h() * (1.0 - BOUNDARY_TOL) {
            return Err(Error::InvalidParameter(format!("smallest radius {} below h/2", radii[0])));
        }
        Ok(radii)
    }
}

/// Lattice extent of a backward cylinder: spatial half-width in cells and
/// depth in time steps (anchor step included).
pub(crate) fn cylinder_shape(grid: &Grid, r: f64) -> (usize, usize) {
    let w = (r / grid.h() + BOUNDARY_TOL).floor() as usize;
    let x = r * r / grid.tau() - BOUNDARY_TOL;
    let d = if x > 0.0 { x.ceil() as usize } else { 0 };
    (w, d)
}

pub(crate) fn clip(c: usize, w: usize, len: usize) -> (usize, usize) {
    (c.saturating_sub(w), (c + w + 1).min(len))
}

/// Maximal function of a non-negative scalar array laid out on `grid`.
fn maximal_of_magnitude(grid: &Grid, a: &[f64], radii: &[f64], orientation: Orientation) -> Vec<f64> {
    let symmetric = orientation == Orientation::Symmetric;
    let shapes: Vec<(usize, usize, f64)> = radii
        .iter()
        .map(|&r| {
            let (w, d) = cylinder_shape(grid, r);
            let side = (2 * w + 1) as f64;
            let steps = if symmetric && d > 0 { 2 * d - 1 } else { d };
            let count = side.powi(grid.n() as i32) * steps as f64;
            (w, d, count)
        })
        .filter(|s| s.1 > 0)
        .collect();
    let dims = grid.dims2();
    let sums = BoxSums::new(grid, a);
    (0..grid.cells())
        .into_par_iter()
        .map(|cell| {
            let (k, i) = grid.coords(cell);
            let mut best = 0.0f64;
            for &(w, d, count) in &shapes {
                let top = if symmetric { (k + d).min(grid.nt()) } else { k + 1 };
                let kr = (k + 1 - d.min(k + 1), top);
                let x0 = clip(i[0], w, dims[0]);
                let x1 = if grid.n() == 2 { clip(i[1], w, dims[1]) } else { (0, 1) };
                best = best.max(sums.sum(kr, x0, x1) / count);
            }
            best
        })
        .collect()
}

/// `M f` for a field of any rank (applied to the pointwise magnitude).
pub fn maximal(f: &Field, cfg: &MaximalConfig) -> Result<Field> {
    let radii = cfg.check(f.grid())?;
    let a = f.abs();
    let out = maximal_of_magnitude(f.grid(), a.values(), &radii, cfg.orientation);
    Field::from_values(f.grid(), Rank::Scalar, out)
}

/// `M_q g = (M |g|^q)^(1/q)` over the ladder truncated at `cfg.restrict`.
pub fn maximal_q_restricted(g: &Field, cfg: &MaximalConfig) -> Result<Field> {
    let radii = cfg.check(g.grid())?;
    let q = cfg.q;
    let pow = g.abs().map(|v| v.powf(q));
    let m = maximal_of_magnitude(g.grid(), pow.values(), &radii, cfg.orientation);
    let out = m.into_iter().map(|v| v.powf(1.0 / q)).collect();
    Field::from_values(g.grid(), Rank::Scalar, out)
}

/// Brute force: every ladder cylinder at every cell, membership decided by
/// the coordinate predicate, lattice count by per-axis enumeration.
pub fn oracle_maximal(f: &Field, cfg: &MaximalConfig) -> Result<Field> {
    let grid = f.grid();
    let radii = cfg.check(grid)?;
    let a = f.abs();
    let (h, tau) = (grid.h(), grid.tau());
    let n = grid.n();
    let dims = grid.dims2();
    let symmetric = cfg.orientation == Orientation::Symmetric;
    let out: Vec<f64> = (0..grid.cells())
        .into_par_iter()
        .map(|cell| {
            let (k, i) = grid.coords(cell);
            let (xc, tc) = grid.center(cell);
            let mut best = 0.0f64;
            for &r in &radii {
                let cyl = if symmetric {
                    Cylinder::symmetric(&xc[..n], tc, r)
                } else {
                    Cylinder::backward(&xc[..n], tc, r)
                };
                let reach = (r / h).ceil() as i64 + 2;
                let depth = (r * r / tau).ceil() as i64 + 2;
                let inside_x = |m: i64, axis: usize| {
                    let x = grid.x_center(axis, 0) + (i[axis] as i64 + m) as f64 * h;
                    (x - xc[axis]).abs() <= r + BOUNDARY_TOL * h
                };
                let inside_t = |j: i64| {
                    let s = tc - j as f64 * tau;
                    if symmetric {
                        (s - tc).abs() < r * r - BOUNDARY_TOL * tau
                    } else {
                        s <= tc + BOUNDARY_TOL * tau && tc - s < r * r - BOUNDARY_TOL * tau
                    }
                };
                let later = if symmetric { -depth } else { 0 };
                let mut count = (later..=depth).filter(|&j| inside_t(j)).count() as f64;
                for axis in 0..n {
                    count *= (-reach..=reach).filter(|&m| inside_x(m, axis)).count() as f64;
                }
                if count == 0.0 {
                    continue;
                }
                let mut s = ExactSum::new();
                for j in later.max(k as i64 + 1 - grid.nt() as i64)..=depth.min(k as i64) {
                    let kk = (k as i64 - j) as usize;
                    for m0 in -reach..=reach {
                        let i0 = i[0] as i64 + m0;
                        if i0 < 0 || i0 >= dims[0] as i64 {
                            continue;
                        }
                        let r1 = if n == 2 { reach } else { 0 };
                        for m1 in -r1..=r1 {
                            let i1 = i[1] as i64 + m1;
                            if i1 < 0 || i1 >= dims[1] as i64 {
                                continue;
                            }
                            let other = grid.index(kk, [i0 as usize, i1 as usize]);
                            let (y, ty) = grid.center(other);
                            if cyl.contains(&y[..n], ty, h, tau) {
                                s.add(a.values()[other]);
                            }
                        }
                    }
                }
                best = best.max(s.value() / count);
            }
            best
        })
        .collect();
    Field::from_values(grid, Rank::Scalar, out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::GridSpec;

    #[test]
    fn constant_field_is_fixed() {
        let g = Grid::new(GridSpec::uniform(1, 1, 8, 1.0, 8, 0.125)).unwrap();
        let f = Field::constant(&g, Rank::Scalar, 3.0);
        // zero extension dilutes large cylinders; the smallest one is the cell
        let m = maximal(&f, &MaximalConfig::dyadic(&g)).unwrap();
        assert!(m.values().iter().all(|&v| v == 3.0));
    }

    #[test]
    fn shape_of_smallest_cylinder() {
        let g = Grid::new(GridSpec::uniform(1, 1, 8, 1.0, 8, 0.125)).unwrap();
        assert_eq!(cylinder_shape(&g, 0.5 * g.h()), (0, 1));
        assert_eq!(cylinder_shape(&g, g.h()), (1, 1));
        assert_eq!(cylinder_shape(&g, 2.0 * g.h()), (2, 4));
    }

    #[test]
    fn centred_cylinders_match_oracle() {
        let g = Grid::new(GridSpec::uniform(1, 1, 12, 1.0, 16, 1.0 / 64.0)).unwrap();
        let vals = (0..g.cells()).map(|c| ((c * 37 % 11) as f64 - 5.0) * 0.3).collect();
        let f = Field::from_values(&g, Rank::Scalar, vals).unwrap();
        let cfg = MaximalConfig::dyadic(&g).with_orientation(Orientation::Symmetric);
        let fast = maximal(&f, &cfg).unwrap();
        let slow = oracle_maximal(&f, &cfg).unwrap();
        assert_eq!(fast.values(), slow.values());
        let back = maximal(&f, &MaximalConfig::dyadic(&g)).unwrap();
        assert_ne!(fast.values(), back.values());
    }
}
