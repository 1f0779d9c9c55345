//! Muckenhoupt constants of space-time weights.
//!
//! Every estimate runs over the same cylinder family as the maximal ladder:
//! backward cylinders of every ladder radius at every cell, clipped to the
//! grid. Averages are exact box sums rounded once. Weights are normalized by
//! their maximum before averaging; the constants are invariant under scaling,
//! and the normalization keeps powers of extreme weights representable.

use rayon::prelude::*;

use crate::boxsum::BoxSums;
use crate::error::{Error, Result};
use crate::field::{check_weight, Field, Grid, Orientation, Rank};
use crate::maximal::{clip, cylinder_shape, maximal, MaximalConfig};

/// Smallest admissible `p - 1`; below it `w^(-1/(p-1))` leaves the `f64` range.
const MIN_P_MINUS_ONE: f64 = 1e-6;

/// Clipped backward cylinder `(time range, x0 range, x1 range, cell count)`.
type ClippedBox = ((usize, usize), (usize, usize), (usize, usize), f64);

/// Lattice boxes of the clipped cylinder family, indexed by `(radius, cell)`.
#[derive(Clone, Debug)]
pub struct CylinderSample {
    radii: Vec<f64>,
    shapes: Vec<(usize, usize)>,
    cells: usize,
}

impl CylinderSample {
    pub fn new(grid: &Grid, cfg: &MaximalConfig) -> Result<Self> {
        let radii = cfg.radii();
        if radii.is_empty() {
            return Err(Error::InvalidParameter("radius ladder is empty".into()));
        }
        let pairs: Vec<(f64, (usize, usize))> = radii
            .into_iter()
            .map(|r| (r, cylinder_shape(grid, r)))
            .filter(|(_, s)| s.1 > 0)
            .collect();
        if pairs.is_empty() {
            return Err(Error::InvalidParameter("no ladder cylinder contains a time step".into()));
        }
        Ok(Self {
            radii: pairs.iter().map(|p| p.0).collect(),
            shapes: pairs.iter().map(|p| p.1).collect(),
            cells: grid.cells(),
        })
    }

    pub fn radii(&self) -> &[f64] {
        &self.radii
    }

    pub fn len(&self) -> usize {
        self.radii.len() * self.cells
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `(anchor cell, radius)` of sample entry `idx`.
    pub fn entry(&self, idx: usize) -> (usize, f64) {
        (idx % self.cells, self.radii[idx / self.cells])
    }

    fn clipped(&self, grid: &Grid, idx: usize) -> ClippedBox {
        let (cell, ri) = (idx % self.cells, idx / self.cells);
        let (w, d) = self.shapes[ri];
        let (k, i) = grid.coords(cell);
        let dims = grid.dims2();
        let kr = (k + 1 - d.min(k + 1), k + 1);
        let x0 = clip(i[0], w, dims[0]);
        let x1 = if grid.n() == 2 { clip(i[1], w, dims[1]) } else { (0, 1) };
        let count = ((kr.1 - kr.0) * (x0.1 - x0.0) * (x1.1 - x1.0)) as f64;
        (kr, x0, x1, count)
    }

    /// Cells of sample cylinder `idx`.
    pub fn members(&self, grid: &Grid, idx: usize) -> Vec<usize> {
        let (kr, x0, x1, _) = self.clipped(grid, idx);
        let mut out = Vec::new();
        for k in kr.0..kr.1 {
            for a in x0.0..x0.1 {
                for b in x1.0..x1.1 {
                    out.push(grid.index(k, [a, b]));
                }
            }
        }
        out
    }

    /// Means of `a` over every sample cylinder.
    pub fn means(&self, grid: &Grid, a: &[f64]) -> Vec<f64> {
        let sums = BoxSums::new(grid, a);
        (0..self.len())
            .into_par_iter()
            .map(|idx| {
                let (kr, x0, x1, count) = self.clipped(grid, idx);
                sums.sum(kr, x0, x1) / count
            })
            .collect()
    }
}

fn normalized(w: &Field) -> Result<Vec<f64>> {
    if w.rank() != Rank::Scalar {
        return Err(Error::RankMismatch { expected: "scalar".into(), found: w.rank().label() });
    }
    check_weight(w)?;
    let top = w.values().iter().copied().fold(0.0, f64::max);
    Ok(w.values().iter().map(|&v| v / top).collect())
}

fn check_p(p: f64) -> Result<f64> {
    if !p.is_finite() || p <= 1.0 {
        return Err(Error::InvalidParameter(format!("A_p needs p > 1 (got {p}); use a1_constant for p = 1")));
    }
    if p - 1.0 < MIN_P_MINUS_ONE {
        return Err(Error::InvalidParameter(format!("p = {p} too close to 1")));
    }
    Ok(p / (p - 1.0))
}

fn argmax(v: &[f64]) -> (usize, f64) {
    v.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |b, (i, &x)| if x > b.1 { (i, x) } else { b })
}

/// Per-cylinder products `<w> <w^(-(p'-1))>^(p-1)` and their maximum.
#[derive(Clone, Debug)]
pub struct ApEstimate {
    pub p: f64,
    pub p_conj: f64,
    pub constant: f64,
    /// `(anchor cell, radius)` of the maximizing cylinder.
    pub argmax: (usize, f64),
    pub sample: CylinderSample,
    products: Vec<f64>,
}

impl ApEstimate {
    fn from_products(p: f64, p_conj: f64, sample: CylinderSample, products: Vec<f64>) -> Self {
        let (i, constant) = argmax(&products);
        let argmax = sample.entry(i);
        Self { p, p_conj, constant, argmax, sample, products }
    }

    pub fn products(&self) -> &[f64] {
        &self.products
    }

    /// Estimate for the dual weight `w^(-(p'-1))` in `A_p'`. The dual product
    /// on each cylinder is the primal one raised to `p' - 1`.
    pub fn dual(&self) -> ApEstimate {
        let e = self.p_conj - 1.0;
        let products = self.products.iter().map(|&v| v.powf(e)).collect();
        ApEstimate::from_products(self.p_conj, self.p, self.sample.clone(), products)
    }
}

/// `max over the sample of <w>_Q <w^(-(p'-1))>_Q^(p-1)`.
pub fn ap_constant(w: &Field, p: f64, cfg: &MaximalConfig) -> Result<ApEstimate> {
    let p_conj = check_p(p)?;
    let grid = w.grid();
    let sample = CylinderSample::new(grid, cfg)?;
    let a = normalized(w)?;
    let e = 1.0 / (p - 1.0);
    let sigma: Vec<f64> = a.iter().map(|&v| v.powf(-e)).collect();
    if let Some(i) = sigma.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(i));
    }
    let ma = sample.means(grid, &a);
    let ms = sample.means(grid, &sigma);
    let products = ma
        .iter()
        .zip(&ms)
        .map(|(&x, &y)| if p == 2.0 { x * y } else { x * y.powf(p - 1.0) })
        .collect();
    Ok(ApEstimate::from_products(p, p_conj, sample, products))
}

/// `max_z (max over sample cylinders at z of <w>) / w(z)`.
pub fn a1_constant(w: &Field, cfg: &MaximalConfig) -> Result<f64> {
    let grid = w.grid();
    let sample = CylinderSample::new(grid, cfg)?;
    let a = normalized(w)?;
    let means = sample.means(grid, &a);
    let cells = grid.cells();
    let ratio = (0..cells)
        .map(|c| {
            let m = (0..sample.radii.len()).map(|r| means[r * cells + c]).fold(0.0, f64::max);
            m / a[c]
        })
        .fold(0.0, f64::max);
    Ok(ratio)
}

/// A weight together with its `A_p` estimate.
#[derive(Clone, Debug)]
pub struct WeightField {
    pub omega: Field,
    pub p: f64,
    pub estimate: ApEstimate,
}

impl WeightField {
    pub fn new(omega: Field, p: f64, cfg: &MaximalConfig) -> Result<Self> {
        let estimate = ap_constant(&omega, p, cfg)?;
        Ok(Self { omega, p, estimate })
    }

    pub fn constant(&self) -> f64 {
        self.estimate.constant
    }
}

/// `(1 + M f)^(q0 - 2)`, a weight in `(0, 1]`.
///
/// `M` runs over centred cylinders whatever the orientation of `cfg`: the
/// backward maximal function of a spike vanishes before it, and the weight
/// then jumps from 1 to nearly 0 across one step, so its `A_2` constant grows
/// without bound as the spike is scaled up.
pub fn weight_from_maximal(f: &Field, q0: f64, cfg: &MaximalConfig) -> Result<Field> {
    if !(q0 > 1.0 && q0 < 2.0) {
        return Err(Error::InvalidParameter(format!("q0 must lie in (1, 2), got {q0}")));
    }
    let m = maximal(f, &cfg.clone().with_orientation(Orientation::Symmetric))?;
    let e = q0 - 2.0;
    Ok(m.map(|v| (1.0 + v).powf(e)))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Combine {
    Min,
    Max,
}

pub fn weight_combine(w1: &Field, w2: &Field, op: Combine) -> Result<Field> {
    check_weight(w1)?;
    check_weight(w2)?;
    match op {
        Combine::Min => w1.zip_map(w2, f64::min),
        Combine::Max => w1.zip_map(w2, f64::max),
    }
}

/// Outcome of the reverse Hölder sweep.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ReverseHolder {
    /// Largest accepted exponent, or the first ladder exponent on failure.
    pub s: f64,
    /// `max over the sample of <w^s>^(1/s) / <w>` at `s`.
    pub constant: f64,
    pub found: bool,
}

/// Exponents `1.05, 1.10, ...` up to `s_max`.
pub fn reverse_holder_ladder(s_max: f64) -> Vec<f64> {
    (1..).map(|j| 1.0 + 0.05 * j as f64).take_while(|&s| s <= s_max + 1e-12).collect()
}

pub fn reverse_holder_constant(w: &Field, s: f64, cfg: &MaximalConfig) -> Result<f64> {
    let grid = w.grid();
    let sample = CylinderSample::new(grid, cfg)?;
    let a = normalized(w)?;
    Ok(rh_constant(grid, &sample, &a, &sample.means(grid, &a), s))
}

fn rh_constant(grid: &Grid, sample: &CylinderSample, a: &[f64], mean: &[f64], s: f64) -> f64 {
    let pow: Vec<f64> = a.iter().map(|&v| v.powf(s)).collect();
    let mp = sample.means(grid, &pow);
    mp.iter().zip(mean).map(|(&x, &m)| x.powf(1.0 / s) / m).fold(0.0, f64::max)
}

/// Largest ladder `s` whose reverse Hölder constant stays at or below `threshold`.
pub fn reverse_holder_exponent(w: &Field, threshold: f64, s_max: f64, cfg: &MaximalConfig) -> Result<ReverseHolder> {
    let grid = w.grid();
    let sample = CylinderSample::new(grid, cfg)?;
    let a = normalized(w)?;
    let mean = sample.means(grid, &a);
    let ladder = reverse_holder_ladder(s_max);
    if ladder.is_empty() {
        return Err(Error::InvalidParameter(format!("s_max = {s_max} leaves the exponent ladder empty")));
    }
    let mut best: Option<ReverseHolder> = None;
    for &s in &ladder {
        let c = rh_constant(grid, &sample, &a, &mean, s);
        if c > threshold {
            break;
        }
        best = Some(ReverseHolder { s, constant: c, found: true });
    }
    Ok(best.unwrap_or_else(|| {
        let s = ladder[0];
        ReverseHolder { s, constant: rh_constant(grid, &sample, &a, &mean, s), found: false }
    }))
}

/// Per-cylinder comparison of `(<|f|^qt>)^(1/qt)` with the weighted `L^p` mean.
#[derive(Clone, Debug)]
pub struct EmbeddingReport {
    pub p: f64,
    /// Reverse Hölder exponent of the dual weight.
    pub s: f64,
    pub q_tilde: f64,
    pub c_sigma: f64,
    pub ap: f64,
    /// `c_sigma^(1/p') ap^(1/p)`.
    pub constant: f64,
    /// Largest `lhs / (constant * rhs)` over the sample.
    pub worst_ratio: f64,
}

/// Checks `<|f|^qt>^(1/qt) <= C (w(Q)^-1 int_Q |f|^p w)^(1/p)` on every
/// sample cylinder, with `qt = s p / (p + s - 1)` from the reverse Hölder
/// exponent `s` of the dual weight.
pub fn embedding_check(f: &Field, w: &Field, p: f64, threshold: f64, cfg: &MaximalConfig) -> Result<EmbeddingReport> {
    let p_conj = check_p(p)?;
    if !f.grid().same_layout(w.grid()) {
        return Err(Error::GridMismatch);
    }
    let grid = w.grid();
    let sample = CylinderSample::new(grid, cfg)?;
    let est = ap_constant(w, p, cfg)?;
    let a = normalized(w)?;
    let sigma = Field::from_values(grid, Rank::Scalar, a.iter().map(|&v| v.powf(-1.0 / (p - 1.0))).collect())?;
    let rh = reverse_holder_exponent(&sigma, threshold, 4.0, cfg)?;
    let s = rh.s;
    let qt = s * p / (p + s - 1.0);
    let constant = rh.constant.powf(1.0 / p_conj) * est.constant.powf(1.0 / p);
    let fa = f.abs();
    let lhs_in: Vec<f64> = fa.values().iter().map(|&v| v.powf(qt)).collect();
    let rhs_in: Vec<f64> = fa.values().iter().zip(&a).map(|(&v, &wv)| v.powf(p) * wv).collect();
    let lhs = sample.means(grid, &lhs_in);
    let num = sample.means(grid, &rhs_in);
    let den = sample.means(grid, &a);
    let worst = (0..sample.len())
        .map(|i| {
            let l = lhs[i].powf(1.0 / qt);
            let r = constant * (num[i] / den[i]).powf(1.0 / p);
            if l == 0.0 {
                0.0
            } else {
                l / r
            }
        })
        .fold(0.0, f64::max);
    Ok(EmbeddingReport { p, s, q_tilde: qt, c_sigma: rh.constant, ap: est.constant, constant, worst_ratio: worst })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::GridSpec;

    fn grid() -> Grid {
        Grid::new(GridSpec::uniform(1, 1, 8, 1.0, 16, 1.0 / 256.0)).unwrap()
    }

    #[test]
    fn constant_weight_has_unit_constants() {
        let g = grid();
        let cfg = MaximalConfig::dyadic(&g);
        let w = Field::constant(&g, Rank::Scalar, 3.7);
        assert_eq!(ap_constant(&w, 2.0, &cfg).unwrap().constant, 1.0);
        assert_eq!(ap_constant(&w, 3.5, &cfg).unwrap().constant, 1.0);
        assert_eq!(a1_constant(&w, &cfg).unwrap(), 1.0);
        let rh = reverse_holder_exponent(&w, 1.5, 2.0, &cfg).unwrap();
        assert!(rh.found && rh.constant == 1.0 && (rh.s - 2.0).abs() < 1e-12);
    }

    #[test]
    fn rejects_p_at_most_one() {
        let g = grid();
        let w = Field::constant(&g, Rank::Scalar, 1.0);
        let cfg = MaximalConfig::dyadic(&g);
        assert!(ap_constant(&w, 1.0, &cfg).is_err());
        assert!(ap_constant(&w, 1.0 + 1e-9, &cfg).is_err());
    }

    #[test]
    fn ladder_of_exponents() {
        let l = reverse_holder_ladder(1.2);
        assert_eq!(l.len(), 4);
        assert!((l[0] - 1.05).abs() < 1e-15 && (l[3] - 1.2).abs() < 1e-12);
    }
}
