//! Parabolic Lipschitz truncation.
//!
//! A pair `(w, G)` with `d_t w = div G` is extended to `(-T, 3T)` (even `w`,
//! odd `G`, zero padding in space). On the bad set `O = {M grad w > lambda} ∪
//! {M G > lambda}` the field is replaced by `sum_j rho_j w_j`, where `rho_j`
//! is the Whitney partition of unity and `w_j` the `rho_j`-weighted mean of
//! `w`, set to zero for cubes whose `3/4`-box leaves `(0, 2T) x Omega`.
//! Derivatives of the truncation are assembled from the analytic bump
//! derivatives; only `grad w` and `d_t w` are grid differences.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::field::{d_par, discrete_gradient, extend_spacetime, Extension, Field, Orientation, Rank};
use crate::maximal::{maximal, MaximalConfig};
use crate::pde::flux_divergence;
use crate::whitney::{
    bad_set, check_cover, check_partition, partition_of_unity, whitney_cover, BadSet, CoverCheck, PartitionCheck,
    PartitionOfUnity, WhitneyCover,
};

/// `w` with `G = a grad w + D`, kept in the split form the solver uses so the
/// divergence identity can be checked in the solver's own discretization.
#[derive(Clone, Debug)]
pub struct FluxPair {
    pub w: Field,
    pub coeff: Option<Field>,
    pub data: Field,
}

impl FluxPair {
    pub fn new(w: Field, coeff: Option<Field>, data: Field) -> Result<Self> {
        let g = w.grid();
        let nc = match w.rank() {
            Rank::Vector(c) => c,
            r => return Err(Error::RankMismatch { expected: "vector".into(), found: r.label() }),
        };
        if data.rank() != Rank::Matrix(g.n(), nc) {
            return Err(Error::RankMismatch { expected: Rank::Matrix(g.n(), nc).label(), found: data.rank().label() });
        }
        if !data.grid().same_layout(g) || coeff.as_ref().is_some_and(|a| !a.grid().same_layout(g)) {
            return Err(Error::GridMismatch);
        }
        w.validate_finite()?;
        data.validate_finite()?;
        Ok(Self { w, coeff, data })
    }

    /// Pair of a solution of `d_t u = div(a grad u - f)` with zero initial
    /// state: `G = a grad u - f`.
    pub fn from_solution(u: &Field, coeff: Option<&Field>, f: &Field) -> Result<Self> {
        let a = coeff.cloned().unwrap_or_else(|| Field::constant(u.grid(), Rank::Scalar, 1.0));
        Self::new(u.clone(), Some(a), f.scaled(-1.0))
    }

    /// Cell values of `G`, with the cell gradient of `w`.
    pub fn g_cells(&self) -> Result<Field> {
        let mut g = self.data.clone();
        if let Some(a) = &self.coeff {
            let grad = discrete_gradient(&self.w)?;
            let per = grad.comps();
            for (c, &av) in a.values().iter().enumerate() {
                for (o, v) in g.at_mut(c).iter_mut().zip(&grad.values()[c * per..(c + 1) * per]) {
                    *o += av * v;
                }
            }
        }
        Ok(g)
    }

    pub fn divergence(&self) -> Result<Field> {
        flux_divergence(&self.w, self.coeff.as_ref(), &self.data)
    }

    /// Backward difference `(w^k - w^(k-1)) / tau` with `w^(-1) = 0`.
    pub fn time_difference(&self) -> Field {
        backward_difference(&self.w)
    }

    /// `max |d_t w - div G| / max (|d_t w| + |div G|)`.
    pub fn identity_residual(&self) -> Result<f64> {
        let dt = self.time_difference();
        let div = self.divergence()?;
        let (mut r, mut s) = (0.0f64, 0.0f64);
        for (a, b) in dt.values().iter().zip(div.values()) {
            r = r.max((a - b).abs());
            s = s.max(a.abs() + b.abs());
        }
        Ok(if s > 0.0 { r / s } else { 0.0 })
    }
}

fn backward_difference(w: &Field) -> Field {
    let g = w.grid();
    let per = g.space_cells() * w.comps();
    let v = w.values();
    let tau = g.tau();
    let out: Vec<f64> = (0..v.len()).map(|i| (v[i] - if i >= per { v[i - per] } else { 0.0 }) / tau).collect();
    Field::from_values(g, w.rank(), out).expect("same layout")
}

#[derive(Clone, Debug, PartialEq)]
pub struct TruncationConfig {
    /// Zero-padding cells on each spatial side of the extension.
    pub margin: usize,
    /// Admissible wall trace relative to `max |w|`.
    pub wall_tol: f64,
    /// Identity gate as a multiple of the solver residual.
    pub gate_factor: f64,
    /// Rounding floor of the gate.
    pub gate_floor: f64,
    pub solver_residual: f64,
    /// Integrability exponent of the stability measurements.
    pub q: f64,
    /// Random cell pairs for the Hölder quotients (adjacent pairs are always used).
    pub pair_samples: usize,
    pub seed: u64,
}

impl Default for TruncationConfig {
    fn default() -> Self {
        Self {
            margin: 4,
            wall_tol: 0.05,
            gate_factor: 10.0,
            gate_floor: 1e-13,
            solver_residual: 0.0,
            q: 1.5,
            pair_samples: 2000,
            seed: 0,
        }
    }
}

/// The `lambda`-independent part: extension, gradients and maximal fields.
#[derive(Clone, Debug)]
pub struct TruncationSetup {
    pub ext: Extension,
    pub w: Field,
    pub grad: Field,
    pub g: Field,
    pub omega: Field,
    pub dt_w: Field,
    pub m_grad: Field,
    pub m_g: Field,
    /// Base-grid divergence of `G`.
    pub div_g: Field,
    pub identity_residual: f64,
    pub cfg: TruncationConfig,
    /// Extended cell of every base cell.
    base_to_ext: Vec<usize>,
}

impl TruncationSetup {
    pub fn new(pair: &FluxPair, omega: Option<&Field>, cfg: &TruncationConfig) -> Result<Self> {
        if !(cfg.q >= 1.0 && cfg.q.is_finite()) {
            return Err(Error::InvalidParameter(format!("exponent q must be >= 1, got {}", cfg.q)));
        }
        let residual = pair.identity_residual()?;
        let gate = (cfg.gate_factor * cfg.solver_residual).max(cfg.gate_floor);
        if residual > gate {
            return Err(Error::ResidualGate { residual, gate });
        }
        let g_cells = pair.g_cells()?;
        let wall = cfg.wall_tol * pair.w.max_abs();
        let (ext, w, g) = extend_spacetime(&pair.w, &g_cells, cfg.margin, wall)?;
        let omega = match omega {
            Some(o) => ext.extend_weight(o)?,
            None => Field::constant(&ext.grid, Rank::Scalar, 1.0),
        };
        let grad = discrete_gradient(&w)?;
        let mcfg = MaximalConfig::dyadic(&ext.grid).with_orientation(Orientation::Symmetric);
        let m_grad = maximal(&grad, &mcfg)?;
        let m_g = maximal(&g, &mcfg)?;
        let dt_w = backward_difference(&w);
        let mut base_to_ext = vec![0; pair.w.grid().cells()];
        for c in 0..ext.grid.cells() {
            if let Some((b, false)) = ext.source(c) {
                base_to_ext[b] = c;
            }
        }
        Ok(Self {
            ext,
            w,
            grad,
            g,
            omega,
            dt_w,
            m_grad,
            m_g,
            div_g: pair.divergence()?,
            identity_residual: residual,
            cfg: cfg.clone(),
            base_to_ext,
        })
    }

    fn vol(&self) -> f64 {
        self.ext.grid.cell_volume()
    }

    /// `lambda^q |O_lambda| + lambda^2 omega(O_lambda)` on the extension.
    pub fn level_measure(&self, lambda: f64, q: f64) -> f64 {
        let (mut m, mut wm) = (0.0, 0.0);
        for c in 0..self.ext.grid.cells() {
            if self.m_grad.values()[c] > lambda || self.m_g.values()[c] > lambda {
                m += 1.0;
                wm += self.omega.values()[c];
            }
        }
        (lambda.powf(q) * m + lambda * lambda * wm) * self.vol()
    }

    /// `sum |G|^2 omega + |grad w|^2 omega` and the `L^q` counterparts over the base.
    pub fn data_bound(&self, q: f64) -> f64 {
        let (mut l2g, mut l2w, mut lqg, mut lqw) = (0.0, 0.0, 0.0, 0.0);
        for &c in &self.base_to_ext {
            let (gn, wn, om) = (self.g.cell_abs(c), self.grad.cell_abs(c), self.omega.values()[c]);
            l2g += gn * gn * om;
            l2w += wn * wn * om;
            lqg += gn.powf(q);
            lqw += wn.powf(q);
        }
        let v = self.vol();
        (l2g * v).sqrt() + (l2w * v).sqrt() + (lqg * v).powf(1.0 / q) + (lqw * v).powf(1.0 / q)
    }

    pub fn truncate(&self, lambda: f64) -> Result<TruncationResult> {
        if !(lambda > 0.0 && lambda.is_finite()) {
            return Err(Error::InvalidParameter(format!("level must be positive, got {lambda}")));
        }
        let grid = &self.ext.grid;
        let n = grid.n();
        let nc = self.w.comps();
        let cells = grid.cells();
        let bad = bad_set(&self.m_grad, &self.m_g, lambda)?;
        let cover = whitney_cover(&bad)?;
        let cover_check = check_cover(&bad, &cover);
        let pou = partition_of_unity(&cover);
        let partition_check = check_partition(&cover, &pou);

        let extents = &self.ext.base.spec().extents;
        let t2 = 2.0 * self.ext.base.spec().t_final;
        let eps = 1e-12 * (extents.iter().copied().fold(t2, f64::max));
        let interior: Vec<bool> = cover
            .cubes
            .iter()
            .map(|c| {
                let b = c.scaled(n, 0.75);
                b.t_lo >= -eps && b.t_hi <= t2 + eps && (0..n).all(|a| b.lo[a] >= -eps && b.hi[a] <= extents[a] + eps)
            })
            .collect();
        let wv = self.w.values();
        // per cube: mean and a bound on its rounding error, per component
        let (means, mean_err): (Vec<Vec<f64>>, Vec<Vec<f64>>) = pou
            .rho
            .iter()
            .zip(&interior)
            .map(|(list, &inside)| {
                if !inside || list.is_empty() {
                    return (vec![0.0; nc], vec![0.0; nc]);
                }
                if list.len() == 1 {
                    return (wv[list[0].cell * nc..(list[0].cell + 1) * nc].to_vec(), vec![0.0; nc]);
                }
                let mass: f64 = list.iter().map(|s| s.value).sum();
                let slack = (4 * list.len() + 8) as f64 * f64::EPSILON;
                (0..nc)
                    .map(|j| {
                        let m = list.iter().map(|s| s.value * wv[s.cell * nc + j]).sum::<f64>() / mass;
                        let top = list.iter().map(|s| wv[s.cell * nc + j].abs()).fold(0.0, f64::max);
                        (m, slack * top)
                    })
                    .unzip()
            })
            .unzip();

        // reference cube per cell: the one with the largest weight there
        let mut reference = vec![(usize::MAX, 0.0f64); cells];
        for (j, list) in pou.rho.iter().enumerate() {
            for s in list {
                if s.value > reference[s.cell].1 {
                    reference[s.cell] = (j, s.value);
                }
            }
        }
        // Where the bumps sum to one, the derivatives of w_lambda reduce to
        // sums of bump derivatives times mean differences. Differences below
        // the means' rounding level are zero: such means agree exactly.
        let mean_gap = |j: usize, r: usize, k: usize| {
            let d = means[j][k] - means[r][k];
            if d.abs() <= mean_err[j][k] + mean_err[r][k] {
                0.0
            } else {
                d
            }
        };
        let mut touched = vec![false; cells];
        let mut sw = vec![0.0; cells * nc];
        let mut glam = vec![0.0; cells * n * nc];
        let mut dtl = vec![0.0; cells * nc];
        let mut support_ok = true;
        for (j, list) in pou.rho.iter().enumerate() {
            for s in list {
                let c = s.cell;
                let r = reference[c].0;
                touched[c] = true;
                for k in 0..nc {
                    let d = wv[c * nc + k] - means[j][k];
                    if s.value * d != 0.0 && !self.ext.in_domain(c) {
                        support_ok = false;
                    }
                    sw[c * nc + k] += s.value * d;
                    let gap = mean_gap(j, r, k);
                    dtl[c * nc + k] += s.dt * gap;
                    for a in 0..n {
                        glam[c * n * nc + a * nc + k] += s.grad[a] * gap;
                    }
                }
            }
        }
        let gv = self.grad.values();
        let mut sgrad = vec![0.0; cells * n * nc];
        let mut w_lambda = self.w.clone();
        let mut grad_lambda = self.grad.clone();
        let mut dt_lambda = self.dt_w.clone();
        for c in (0..cells).filter(|&c| touched[c]) {
            for k in 0..nc {
                w_lambda.values_mut()[c * nc + k] = wv[c * nc + k] - sw[c * nc + k];
                dt_lambda.values_mut()[c * nc + k] = dtl[c * nc + k];
            }
            for i in c * n * nc..(c + 1) * n * nc {
                grad_lambda.values_mut()[i] = glam[i];
                sgrad[i] = gv[i] - glam[i];
            }
        }
        let changed: Vec<bool> = (0..cells).map(|c| w_lambda.at(c) != self.w.at(c)).collect();
        let l1_exact = (0..cells).all(|c| {
            (bad.mask[c] || w_lambda.at(c) == self.w.at(c)) && (self.ext.in_domain(c) || w_lambda.at(c).iter().all(|&v| v == 0.0))
        });

        let props = self.measure(lambda, &bad, &cover, &pou, &means, &w_lambda, &grad_lambda, &dt_lambda, &sgrad, &changed)?;
        Ok(TruncationResult {
            lambda,
            bad,
            cover,
            cover_check,
            pou,
            partition_check,
            means,
            interior,
            w_lambda,
            grad_lambda,
            dt_lambda,
            changed,
            l1_exact,
            support_ok,
            props,
        })
    }

    #[allow(clippy::too_many_arguments)]
    fn measure(
        &self,
        lambda: f64,
        bad: &BadSet,
        cover: &WhitneyCover,
        pou: &PartitionOfUnity,
        means: &[Vec<f64>],
        w_lambda: &Field,
        grad_lambda: &Field,
        dt_lambda: &Field,
        sgrad: &[f64],
        changed: &[bool],
    ) -> Result<Properties> {
        let grid = &self.ext.grid;
        let (n, nc, cells) = (grid.n(), self.w.comps(), grid.cells());
        let q = self.cfg.q;
        let vol = self.vol();
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        let in_base: Vec<bool> = (0..cells).map(|c| self.ext.in_base(c)).collect();
        let in_dom: Vec<bool> = (0..cells).map(|c| self.ext.in_domain(c)).collect();
        let om = self.omega.values();

        let (mut l2_num, mut l2_den) = (0.0, 0.0);
        let (mut l6_num, mut lq_base) = (0.0, 0.0);
        let (mut l7_num, mut l2w_base) = (0.0, 0.0);
        let mut l8_num = 0.0;
        let (mut lp_num, mut lp_den) = (0.0, 0.0);
        let mut weighted_bad = 0.0;
        let (mut bad_count, mut changed_count, mut changed_base) = (0usize, 0usize, 0usize);
        let mut lip: f64 = 0.0;
        for c in 0..cells {
            let gw = self.grad.cell_abs(c);
            let gg = self.g.cell_abs(c);
            let diff: Vec<f64> = w_lambda.at(c).iter().zip(self.w.at(c)).map(|(a, b)| a - b).collect();
            let time_term = dot(dt_lambda.at(c), &diff);
            if in_dom[c] {
                l2_num += norm(&sgrad[c * n * nc..(c + 1) * n * nc]).powf(q);
                lip = lip.max(grad_lambda.cell_abs(c));
            }
            if bad.mask[c] {
                bad_count += 1;
                l2_den += gw.powf(q) + gg.powf(q);
                weighted_bad += om[c];
            }
            if changed[c] {
                changed_count += 1;
                changed_base += in_base[c] as usize;
            }
            l6_num += time_term.abs().powf(q);
            if in_base[c] {
                lq_base += gw.powf(q) + gg.powf(q);
                l2w_base += (gw * gw + gg * gg) * om[c];
                l7_num += grad_lambda.cell_abs(c).powi(2) * om[c];
                l8_num += time_term * om[c];
                lp_num += w_lambda.cell_abs(c).powf(q);
                lp_den += self.w.cell_abs(c).powf(q);
            }
        }
        let ratio = |a: f64, b: f64| if a == 0.0 { 0.0 } else { a / b };
        let m_lambda = maximal(grad_lambda, &MaximalConfig::dyadic(grid).with_orientation(Orientation::Symmetric))?;
        let max_ratio = m_lambda.max_abs() / lambda;

        let holder = self.holder_quotient(w_lambda, |c| in_dom[c]);
        let (poincare, jumps) = poincare_ratios(self, cover, pou, means, lambda);
        Ok(Properties {
            bad_measure: bad_count as f64 * vol,
            changed_measure: changed_count as f64 * vol,
            changed_base_measure: changed_base as f64 * vol,
            weighted_bad: weighted_bad * vol,
            l2_ratio: ratio(l2_num, l2_den),
            lip_ratio: lip / lambda,
            max_ratio,
            holder_ratio: holder / lambda,
            l6_ratio: ratio(l6_num, lambda.powf(q) * lq_base),
            l7_ratio: ratio(l7_num, l2w_base),
            l8_ratio: ratio(l8_num.abs() * vol, (lambda * lambda * weighted_bad * vol).sqrt() * (l2w_base * vol).sqrt()),
            lp_ratio: ratio(lp_num, lp_den),
            poincare_ratio: poincare,
            mean_jump_ratio: jumps,
        })
    }

    /// Largest `|v(z) - v(z')| / d_par(z, z')` over adjacent pairs and seeded
    /// random pairs of admissible cells.
    fn holder_quotient(&self, v: &Field, admissible: impl Fn(usize) -> bool) -> f64 {
        let grid = &self.ext.grid;
        let n = grid.n();
        let cells = grid.cells();
        let dims = grid.dims2();
        let quotient = |a: usize, b: usize| {
            let (xa, ta) = grid.center(a);
            let (xb, tb) = grid.center(b);
            let d: Vec<f64> = v.at(a).iter().zip(v.at(b)).map(|(x, y)| x - y).collect();
            d.iter().map(|x| x * x).sum::<f64>().sqrt() / d_par(&xa[..n], ta, &xb[..n], tb)
        };
        let mut best: f64 = 0.0;
        for c in (0..cells).filter(|&c| admissible(c)) {
            let (k, i) = grid.coords(c);
            if k + 1 < grid.nt() {
                let o = grid.index(k + 1, i);
                if admissible(o) {
                    best = best.max(quotient(c, o));
                }
            }
            for a in 0..n {
                if i[a] + 1 < dims[a] {
                    let mut j = i;
                    j[a] += 1;
                    let o = grid.index(k, j);
                    if admissible(o) {
                        best = best.max(quotient(c, o));
                    }
                }
            }
        }
        let pool: Vec<usize> = (0..cells).filter(|&c| admissible(c)).collect();
        if pool.len() > 1 {
            let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
            for _ in 0..self.cfg.pair_samples {
                let a = pool[rng.gen_range(0..pool.len())];
                let b = pool[rng.gen_range(0..pool.len())];
                if a != b {
                    best = best.max(quotient(a, b));
                }
            }
        }
        best
    }
}

/// Pointwise Poincaré quotient `|w(z) - w_k| / r_j / (M grad w + M G)(z)` over
/// `z` in `3/4 Q_j`, `k` in `A_j`, and the mean-jump quotient
/// `sum_{j in A_k} |w_j - w_k| / r_j / lambda`.
fn poincare_ratios(
    setup: &TruncationSetup,
    cover: &WhitneyCover,
    pou: &PartitionOfUnity,
    means: &[Vec<f64>],
    lambda: f64,
) -> (f64, f64) {
    let nc = setup.w.comps();
    let wv = setup.w.values();
    let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let mut pointwise: f64 = 0.0;
    let mut jumps: f64 = 0.0;
    for (j, cube) in cover.cubes.iter().enumerate() {
        for s in &pou.bumps[j] {
            let rhs = setup.m_grad.values()[s.cell] + setup.m_g.values()[s.cell];
            for &k in &cover.neighbors[j] {
                let lhs = dist(&wv[s.cell * nc..(s.cell + 1) * nc], &means[k]) / cube.r;
                if lhs > 0.0 {
                    pointwise = pointwise.max(lhs / rhs);
                }
            }
        }
        let sum: f64 = cover.neighbors[j].iter().map(|&i| dist(&means[i], &means[j]) / cover.cubes[i].r).sum();
        jumps = jumps.max(sum / lambda);
    }
    (pointwise, jumps)
}

/// Measured sides of the truncation properties; ratios are left side over
/// right side without constants.
#[derive(Clone, Debug, PartialEq)]
pub struct Properties {
    pub bad_measure: f64,
    /// `|{w != w_lambda}|` on the extension.
    pub changed_measure: f64,
    /// The same restricted to `(0, T) x Omega`.
    pub changed_base_measure: f64,
    pub weighted_bad: f64,
    pub l2_ratio: f64,
    /// `max |grad w_lambda| / lambda`.
    pub lip_ratio: f64,
    /// `max M(grad w_lambda) / lambda`.
    pub max_ratio: f64,
    /// Parabolic Hölder quotient over `lambda`.
    pub holder_ratio: f64,
    pub l6_ratio: f64,
    pub l7_ratio: f64,
    pub l8_ratio: f64,
    /// `int |w_lambda|^q / int |w|^q` over the base.
    pub lp_ratio: f64,
    pub poincare_ratio: f64,
    pub mean_jump_ratio: f64,
}

#[derive(Clone, Debug)]
pub struct TruncationResult {
    pub lambda: f64,
    pub bad: BadSet,
    pub cover: WhitneyCover,
    pub cover_check: CoverCheck,
    pub pou: PartitionOfUnity,
    pub partition_check: PartitionCheck,
    pub means: Vec<Vec<f64>>,
    /// Whether each cube's `3/4`-box lies in `(0, 2T) x Omega`.
    pub interior: Vec<bool>,
    pub w_lambda: Field,
    pub grad_lambda: Field,
    pub dt_lambda: Field,
    pub changed: Vec<bool>,
    /// `w_lambda == w` bitwise off the bad set and `0` outside `(0, 2T) x Omega`.
    pub l1_exact: bool,
    /// Every correction `rho_j (w - w_j)` vanishes outside `(0, 2T) x Omega`.
    pub support_ok: bool,
    pub props: Properties,
}

/// Slab selection for one element of a sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct SlabSelection {
    pub base: f64,
    pub m0: usize,
    /// `Lambda^(2^m)` for `m = 0..=m0+1`, capped at `2^64`.
    pub levels: Vec<f64>,
    pub energies: Vec<f64>,
    pub chosen: usize,
    pub lambda: f64,
    pub capped: bool,
}

/// Largest representable level.
pub const LEVEL_CAP: f64 = 18446744073709551616.0;

impl SlabSelection {
    pub fn total(&self) -> f64 {
        self.energies.iter().sum()
    }

    /// The chosen slab is at most the mean slab, hence at most `total / m0`.
    pub fn pigeonhole_holds(&self) -> bool {
        let e = self.energies[self.chosen];
        let count = self.energies.len() as f64;
        e * count <= self.total() && e * self.m0 as f64 <= self.total()
    }
}

fn level(base: f64, m: usize) -> (f64, bool) {
    let mut v = base;
    for _ in 0..m {
        v *= v;
        if v > LEVEL_CAP {
            break;
        }
    }
    if v.is_finite() && v <= LEVEL_CAP {
        (v, false)
    } else {
        (LEVEL_CAP, true)
    }
}

/// Picks `m` minimizing the slab energy
/// `int_{L_m < MG <= L_{m+1}} MG^q + MG^2 w + (same for M grad w)`.
pub fn select_level(setup: &TruncationSetup, base: f64, q: f64) -> Result<SlabSelection> {
    if !(base > 1.0 && base.is_finite()) {
        return Err(Error::InvalidParameter(format!("base level must exceed 1, got {base}")));
    }
    let m0 = base.ceil() as usize;
    let levels: Vec<(f64, bool)> = (0..=m0 + 1).map(|m| level(base, m)).collect();
    let vol = setup.vol();
    let om = setup.omega.values();
    let mut energies = vec![0.0; m0 + 1];
    for (m, e) in energies.iter_mut().enumerate() {
        let (lo, hi) = (levels[m].0, levels[m + 1].0);
        let mut acc = 0.0;
        for c in 0..setup.ext.grid.cells() {
            for v in [setup.m_g.values()[c], setup.m_grad.values()[c]] {
                if lo < v && v <= hi {
                    acc += v.powf(q) + v * v * om[c];
                }
            }
        }
        *e = acc * vol;
    }
    let mut chosen = 0;
    for m in 1..energies.len() {
        if energies[m] < energies[chosen] {
            chosen = m;
        }
    }
    Ok(SlabSelection {
        base,
        m0,
        levels: levels.iter().map(|l| l.0).collect(),
        lambda: levels[chosen].0,
        capped: levels[chosen].1,
        energies,
        chosen,
    })
}

/// Measured sides of the sequence properties for one element.
#[derive(Clone, Debug)]
pub struct SequenceEntry {
    pub selection: SlabSelection,
    /// `Lambda (lambda^q |O| + lambda^2 omega(O))`.
    pub level_constant: f64,
    /// `||grad w_L||_inf + ||w_L||_{C^1/2} + ||d_t w_L . (w - w_L)||_q`.
    pub ls1: f64,
    /// `Lambda^(4^Lambda)`, capped.
    pub ls1_bound: f64,
    pub ls1_capped: bool,
    /// `int |grad w_L|^q + |grad w_L|^2 w + sqrt(Lambda) |d_t w_L . (w - w_L)| w`.
    pub ls2: f64,
    pub ls2_lp: f64,
    /// Discrete integration-by-parts residual (backward-difference product rule).
    pub ls3_residual: f64,
    /// The same identity with the analytic time derivative, midpoint quadrature.
    pub ls3_analytic: f64,
    /// `Lambda |{w != w_L} ∩ Q|`.
    pub ls4: f64,
    pub result: TruncationResult,
}

/// Test function `sin^2(pi t/T) prod sin^2(pi x_a/L_a)` with its derivatives.
fn eta(x: &[f64], t: f64, extents: &[f64], tf: f64) -> (f64, f64, [f64; 2]) {
    use std::f64::consts::PI;
    let n = extents.len();
    let st = (PI * t / tf).sin();
    let tv = st * st;
    let dtv = 2.0 * st * (PI * t / tf).cos() * PI / tf;
    let mut sx = [1.0; 2];
    let mut dsx = [0.0; 2];
    for a in 0..n {
        let s = (PI * x[a] / extents[a]).sin();
        sx[a] = s * s;
        dsx[a] = 2.0 * s * (PI * x[a] / extents[a]).cos() * PI / extents[a];
    }
    let space = sx[0] * sx[1];
    let grad = [tv * dsx[0] * sx[1], tv * sx[0] * dsx[1]];
    (tv * space, dtv * space, grad)
}

impl TruncationSetup {
    /// Both forms of the integration-by-parts identity over `(0, T) x Omega`.
    pub fn ls3_residuals(&self, r: &TruncationResult) -> (f64, f64) {
        let base = &self.ext.base;
        let (n, nc) = (base.n(), self.w.comps());
        let sc_ext = self.ext.grid.space_cells();
        let tau = base.tau();
        let extents = &base.spec().extents;
        let tf = base.spec().t_final;
        let wl = r.w_lambda.values();
        let wv = self.w.values();
        let at = |v: &[f64], c: usize| v[c * nc..(c + 1) * nc].to_vec();
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        let (mut lhs, mut rhs, mut mass, mut scale) = (0.0, 0.0, 0.0, 0.0f64);
        let (mut lhs_a, mut rhs_a) = (0.0, 0.0);
        let div = self.div_g.values();
        let dtw = backward_difference_values(wv, sc_ext * nc, tau);
        for (b, &c) in self.base_to_ext.iter().enumerate() {
            let (x, t) = base.center(b);
            let (e, de, ge) = eta(&x[..n], t, extents, tf);
            let prev = c - sc_ext;
            let (a1, a0, w1, w0) = (at(wl, c), at(wl, prev), at(wv, c), at(wv, prev));
            let phi: Vec<f64> = a1.iter().map(|v| v * e).collect();
            let dg = &div[b * nc..(b + 1) * nc];
            lhs -= dot(dg, &phi);
            let x1 = 0.5 * dot(&a1, &a1) - dot(&w1, &a1);
            let x0 = 0.5 * dot(&a0, &a0) - dot(&w0, &a0);
            let da: Vec<f64> = a1.iter().zip(&a0).map(|(p, q)| (p - q) / tau).collect();
            let gap: Vec<f64> = a1.iter().zip(&w0).map(|(p, q)| p - q).collect();
            rhs += (x1 - x0) / tau * e - dot(&da, &gap) * e + 0.5 * tau * dot(&da, &da) * e;
            mass += phi.iter().map(|v| v.abs()).sum::<f64>();
            for j in 0..nc {
                scale = scale.max(dtw[c * nc + j].abs() + dg[j].abs());
            }
            // analytic form: G . grad(w_L eta) against -X d_t eta - d_t w_L . (w_L - w) eta
            let gcell = self.g.at(c);
            let gl = r.grad_lambda.at(c);
            let mut gdot = 0.0;
            for a in 0..n {
                for j in 0..nc {
                    gdot += gcell[a * nc + j] * (gl[a * nc + j] * e + a1[j] * ge[a]);
                }
            }
            lhs_a += gdot;
            let diff: Vec<f64> = a1.iter().zip(&w1).map(|(p, q)| p - q).collect();
            rhs_a += -x1 * de - dot(r.dt_lambda.at(c), &diff) * e;
        }
        let discrete = if scale * mass > 0.0 { (lhs - rhs).abs() / (scale * mass) } else { (lhs - rhs).abs() };
        let denom = lhs_a.abs().max(rhs_a.abs());
        let analytic = if denom > 0.0 { (lhs_a - rhs_a).abs() / denom } else { 0.0 };
        (discrete, analytic)
    }

    /// Selects the level for `base`, truncates and measures the sequence properties.
    pub fn sequence_entry(&self, base: f64) -> Result<SequenceEntry> {
        let q = self.cfg.q;
        let selection = select_level(self, base, q)?;
        let result = self.truncate(selection.lambda)?;
        let level_constant = base * self.level_measure(selection.lambda, q);
        let (ls3_residual, ls3_analytic) = self.ls3_residuals(&result);
        let vol = self.vol();
        let (mut grad_inf, mut sup, mut lsq, mut ls2, mut lp_num, mut lp_den) = (0.0f64, 0.0f64, 0.0, 0.0, 0.0, 0.0);
        let om = self.omega.values();
        for &c in &self.base_to_ext {
            let gl = result.grad_lambda.cell_abs(c);
            grad_inf = grad_inf.max(gl);
            sup = sup.max(result.w_lambda.cell_abs(c));
            let diff: Vec<f64> = result.w_lambda.at(c).iter().zip(self.w.at(c)).map(|(a, b)| b - a).collect();
            let tt: f64 = result.dt_lambda.at(c).iter().zip(&diff).map(|(a, b)| a * b).sum();
            lsq += tt.abs().powf(q);
            ls2 += gl.powf(q) + gl * gl * om[c] + base.sqrt() * tt.abs() * om[c];
            lp_num += result.w_lambda.cell_abs(c).powf(q);
            lp_den += self.w.cell_abs(c).powf(q);
        }
        let base_set: std::collections::HashSet<usize> = self.base_to_ext.iter().copied().collect();
        let holder = self.holder_quotient(&result.w_lambda, |c| base_set.contains(&c));
        let ls1 = grad_inf + sup + holder + (lsq * vol).powf(1.0 / q);
        let exp = 4f64.powf(base);
        let raw = (exp * base.ln()).exp();
        let (ls1_bound, ls1_capped) = if raw.is_finite() && raw <= LEVEL_CAP { (raw, false) } else { (LEVEL_CAP, true) };
        Ok(SequenceEntry {
            level_constant,
            ls1,
            ls1_bound,
            ls1_capped,
            ls2: ls2 * vol,
            ls2_lp: if lp_num == 0.0 { 0.0 } else { lp_num / lp_den },
            ls3_residual,
            ls3_analytic,
            ls4: base * result.props.changed_base_measure,
            selection,
            result,
        })
    }
}

fn backward_difference_values(v: &[f64], per: usize, tau: f64) -> Vec<f64> {
    (0..v.len()).map(|i| (v[i] - if i >= per { v[i - per] } else { 0.0 }) / tau).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{Grid, GridSpec};

    #[test]
    fn zero_pair_is_untouched() {
        let g = Grid::new(GridSpec::uniform(1, 1, 8, 1.0, 8, 1.0)).unwrap();
        let pair = FluxPair::from_solution(
            &Field::zeros(&g, Rank::Vector(1)),
            None,
            &Field::zeros(&g, Rank::Matrix(1, 1)),
        )
        .unwrap();
        let setup = TruncationSetup::new(&pair, None, &TruncationConfig::default()).unwrap();
        let r = setup.truncate(1.0).unwrap();
        assert!(r.bad.is_empty() && r.l1_exact);
        assert!(r.w_lambda.values().iter().all(|&v| v == 0.0));
        assert_eq!(r.props.l2_ratio, 0.0);
    }

    #[test]
    fn slab_levels_cap() {
        assert_eq!(level(3.0, 0), (3.0, false));
        assert_eq!(level(3.0, 1).0, 9.0);
        assert!(level(3.0, 8).1);
    }
}
