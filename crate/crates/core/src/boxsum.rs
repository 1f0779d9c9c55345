//! Exact box sums over space-time grids.
//!
//! Values are split into fixed-point bit bands and accumulated in
//! summed-area tables of `i128`; every box sum is then exact and rounded to
//! `f64` once. Inputs that would need too many bands fall back to direct
//! correctly rounded summation, which yields the same bits.

use crate::field::Grid;
use crate::sum::ExactSum;

pub(crate) fn decompose(v: f64) -> (u64, i32) {
    let bits = v.to_bits();
    let e = ((bits >> 52) & 0x7ff) as i32;
    let m = bits & ((1u64 << 52) - 1);
    if e == 0 {
        (m, -1074)
    } else {
        (m | (1u64 << 52), e - 1075)
    }
}

pub(crate) fn ldexp(mut x: f64, mut e: i32) -> f64 {
    while e > 1000 {
        x *= 2f64.powi(1000);
        e -= 1000;
    }
    while e < -1000 {
        x *= 2f64.powi(-1000);
        e += 1000;
    }
    x * 2f64.powi(e)
}

/// Space-time summed-area tables of exact fixed-point values.
///
/// The bit range of the input is cut into bands narrow enough that every
/// box sum of one band fits an `i128`; a box sum is the exact combination of
/// its per-band integers.
pub(crate) struct PrefixTable {
    bands: Vec<(i32, Vec<i128>)>,
    nt: usize,
    d: [usize; 2],
}

/// Entries allowed across all bands before falling back to direct sums.
const TABLE_LIMIT: usize = 1 << 26;

/// Bits of `m * 2^e` that land in `[base, base + width)`, as an integer.
fn band_bits(m: u64, e: i32, base: i32, width: i32) -> u128 {
    let s = e - base;
    let raw = if s >= 0 {
        if s >= width {
            return 0;
        }
        (m as u128) << s
    } else if -s >= 64 {
        0
    } else {
        (m >> -s) as u128
    };
    raw & ((1u128 << width) - 1)
}

impl PrefixTable {
    /// `None` when the bands would exceed the table budget.
    fn build(grid: &Grid, a: &[f64]) -> Option<Self> {
        let mut lo = i32::MAX;
        let mut hi = i32::MIN;
        for &v in a {
            if v != 0.0 {
                let (m, e) = decompose(v);
                lo = lo.min(e + m.trailing_zeros() as i32);
                hi = hi.max(e + 63 - m.leading_zeros() as i32);
            }
        }
        let d = grid.dims2();
        let nt = grid.nt();
        let sz = (nt + 1) * (d[0] + 1) * (d[1] + 1);
        if lo == i32::MAX {
            return Some(Self { bands: Vec::new(), nt, d });
        }
        let cells_bits = 64 - (a.len() as u64).leading_zeros() as i32;
        let width = 125 - cells_bits;
        let nb = ((hi - lo + 1 + width - 1) / width) as usize;
        if nb * sz > TABLE_LIMIT.max(sz) {
            return None;
        }
        let (s1, s2) = (d[0] + 1, d[1] + 1);
        let idx = |k: usize, i: usize, j: usize| (k * s1 + i) * s2 + j;
        let mut bands = Vec::with_capacity(nb);
        for b in 0..nb {
            let base = lo + b as i32 * width;
            let mut table = vec![0i128; sz];
            let mut any = false;
            for k in 0..nt {
                for i in 0..d[0] {
                    for j in 0..d[1] {
                        let v = a[grid.index(k, [i, j])];
                        let fixed = if v == 0.0 {
                            0i128
                        } else {
                            let (m, e) = decompose(v);
                            let p = band_bits(m, e, base, width) as i128;
                            if v < 0.0 {
                                -p
                            } else {
                                p
                            }
                        };
                        any |= fixed != 0;
                        let val = fixed
                            .wrapping_add(table[idx(k, i + 1, j + 1)])
                            .wrapping_add(table[idx(k + 1, i, j + 1)])
                            .wrapping_add(table[idx(k + 1, i + 1, j)])
                            .wrapping_sub(table[idx(k, i, j + 1)])
                            .wrapping_sub(table[idx(k, i + 1, j)])
                            .wrapping_sub(table[idx(k + 1, i, j)])
                            .wrapping_add(table[idx(k, i, j)]);
                        table[idx(k + 1, i + 1, j + 1)] = val;
                    }
                }
            }
            if any {
                bands.push((base, table));
            }
        }
        Some(Self { bands, nt, d })
    }

    /// Exact sum over `[k0,k1) x [a0,b0) x [a1,b1)`, rounded once to `f64`.
    fn box_sum(&self, k: (usize, usize), x0: (usize, usize), x1: (usize, usize)) -> f64 {
        debug_assert!(self.nt > 0);
        let (s1, s2) = (self.d[0] + 1, self.d[1] + 1);
        let at = |i: usize, j: usize, l: usize| (i * s1 + j) * s2 + l;
        let corners = [
            (at(k.1, x0.1, x1.1), 1),
            (at(k.0, x0.1, x1.1), -1),
            (at(k.1, x0.0, x1.1), -1),
            (at(k.1, x0.1, x1.0), -1),
            (at(k.0, x0.0, x1.1), 1),
            (at(k.0, x0.1, x1.0), 1),
            (at(k.1, x0.0, x1.0), 1),
            (at(k.0, x0.0, x1.0), -1),
        ];
        let band_sum = |t: &[i128]| {
            corners.iter().fold(0i128, |acc, &(c, s)| {
                if s > 0 {
                    acc.wrapping_add(t[c])
                } else {
                    acc.wrapping_sub(t[c])
                }
            })
        };
        // one band far from the subnormal range: a single rounding suffices
        if let [(base, t)] = self.bands.as_slice() {
            if *base > -1022 + 1 {
                let s = band_sum(t);
                return if s == 0 { 0.0 } else { ldexp(s as f64, *base) };
            }
        }
        let mut acc = ExactSum::new();
        for (base, t) in &self.bands {
            let s = band_sum(t);
            if s == 0 {
                continue;
            }
            // 43-bit chunks are exact in f64 at any exponent >= -1074
            let mask = (1i128 << 43) - 1;
            acc.add(ldexp((s & mask) as f64, *base));
            acc.add(ldexp(((s >> 43) & mask) as f64, base + 43));
            acc.add(ldexp((s >> 86) as f64, base + 86));
        }
        acc.value()
    }
}

/// Box sums of one scalar array.
pub(crate) enum BoxSums<'a> {
    Prefix(PrefixTable),
    Direct { grid: &'a Grid, a: &'a [f64] },
}

impl<'a> BoxSums<'a> {
    pub(crate) fn new(grid: &'a Grid, a: &'a [f64]) -> Self {
        match PrefixTable::build(grid, a) {
            Some(t) => BoxSums::Prefix(t),
            None => BoxSums::Direct { grid, a },
        }
    }

    /// Correctly rounded sum over `[k0,k1) x [a0,b0) x [a1,b1)`.
    pub(crate) fn sum(&self, k: (usize, usize), x0: (usize, usize), x1: (usize, usize)) -> f64 {
        match self {
            BoxSums::Prefix(t) => t.box_sum(k, x0, x1),
            BoxSums::Direct { grid, a } => {
                let mut s = ExactSum::new();
                for kk in k.0..k.1 {
                    for i in x0.0..x0.1 {
                        for j in x1.0..x1.1 {
                            s.add(a[grid.index(kk, [i, j])]);
                        }
                    }
                }
                s.value()
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::GridSpec;

    #[test]
    fn ldexp_matches_powers() {
        assert_eq!(ldexp(3.0, -2), 0.75);
        assert_eq!(ldexp(1.0, -1074), f64::from_bits(1));
        assert_eq!(ldexp(1.0, 1023), f64::MAX / (2.0 - f64::EPSILON));
    }

    #[test]
    fn banded_tables_match_direct_sums() {
        let g = Grid::new(GridSpec::uniform(1, 1, 8, 1.0, 8, 0.125)).unwrap();
        let wide: Vec<f64> = (0..g.cells())
            .map(|c| match c % 4 {
                0 => 1e200,
                1 => -1e-200,
                2 => 3.0 * f64::from_bits(1 + c as u64),
                _ => -(c as f64) * 0.1,
            })
            .collect();
        let narrow: Vec<f64> = (0..g.cells()).map(|c| 1.0 + c as f64 * 0.1).collect();
        for a in [&wide, &narrow] {
            let t = PrefixTable::build(&g, a).unwrap();
            let d = BoxSums::Direct { grid: &g, a };
            for k0 in 0..8 {
                for k1 in k0..=8 {
                    for (x0, x1) in [(0, 8), (3, 4), (1, 6), (5, 5)] {
                        let want = d.sum((k0, k1), (x0, x1), (0, 1));
                        assert_eq!(t.box_sum((k0, k1), (x0, x1), (0, 1)).to_bits(), want.to_bits());
                    }
                }
            }
        }
    }
}
