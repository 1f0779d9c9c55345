use parabolic::field::*;
use parabolic::maximal::{maximal, MaximalConfig};
use parabolic::weights::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn grid() -> Grid {
    Grid::new(GridSpec::uniform(1, 1, 16, 1.0, 32, 1.0 / 8.0)).unwrap()
}

fn random_weight(g: &Grid, seed: u64, spread: f64) -> Field {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vals = (0..g.cells()).map(|_| spread.powf(rng.gen_range(-1.0..1.0))).collect();
    Field::from_values(g, Rank::Scalar, vals).unwrap()
}

/// Brute-force `A_p` over clipped backward cylinders listed cell by cell.
fn ap_oracle(w: &Field, p: f64, cfg: &MaximalConfig) -> f64 {
    let g = w.grid();
    let top = w.values().iter().copied().fold(0.0, f64::max);
    let mut best: f64 = 0.0;
    for r in cfg.radii() {
        for cell in 0..g.cells() {
            let (x, t) = g.center(cell);
            let Ok(members) = cylinder_cells(g, &Cylinder::backward(&x[..g.n()], t, r)) else { continue };
            let m = members.len() as f64;
            let a: f64 = members.iter().map(|&c| w.values()[c] / top).sum::<f64>() / m;
            let s: f64 = members.iter().map(|&c| (w.values()[c] / top).powf(-1.0 / (p - 1.0))).sum::<f64>() / m;
            best = best.max(a * s.powf(p - 1.0));
        }
    }
    best
}

#[test]
fn constant_weights_have_unit_constant() {
    let g = grid();
    let cfg = MaximalConfig::dyadic(&g);
    for c in [1.0, 0.37, 5e7] {
        let w = Field::constant(&g, Rank::Scalar, c);
        for p in [1.5, 2.0, 4.0] {
            assert_eq!(ap_constant(&w, p, &cfg).unwrap().constant, 1.0);
        }
    }
}

#[test]
fn constants_match_brute_force_oracle() {
    let g = grid();
    let cfg = MaximalConfig::dyadic(&g);
    for seed in 0..3 {
        let w = random_weight(&g, seed, 50.0);
        for p in [1.5, 2.0, 3.0] {
            let got = ap_constant(&w, p, &cfg).unwrap().constant;
            let want = ap_oracle(&w, p, &cfg);
            assert!((got - want).abs() <= 1e-12 * want, "p {p}: {got} vs {want}");
        }
    }
}

#[test]
fn power_weight_constant_grows_with_exponent() {
    let g = grid();
    let cfg = MaximalConfig::dyadic(&g);
    // the singular point sits between cell centres
    let z0 = ([0.51], 0.061);
    let mut prev = 0.0;
    for a in [0.25, 0.75, 1.25, 1.75, 2.25, 2.75] {
        let w = Field::scalar_from_fn(&g, |x, t| d_par(x, t, &z0.0, z0.1).powf(a));
        let c = ap_constant(&w, 2.0, &cfg).unwrap().constant;
        assert!(c.is_finite() && c > prev, "a {a}: {c} after {prev}");
        prev = c;
    }
}

#[test]
fn dual_estimate_is_the_conjugate_weight() {
    let g = grid();
    let cfg = MaximalConfig::dyadic(&g);
    let w = random_weight(&g, 9, 20.0);
    let p = 3.0;
    let est = ap_constant(&w, p, &cfg).unwrap();
    let sigma = w.map(|v| v.powf(-1.0 / (p - 1.0)));
    let direct = ap_constant(&sigma, est.p_conj, &cfg).unwrap().constant;
    assert!((est.dual().constant - direct).abs() <= 1e-12 * direct);
}

#[test]
fn a1_of_maximal_root_is_finite() {
    let g = grid();
    let cfg = MaximalConfig::dyadic(&g);
    assert_eq!(a1_constant(&Field::constant(&g, Rank::Scalar, 2.0), &cfg).unwrap(), 1.0);
    let f = random_weight(&g, 4, 10.0);
    let w = maximal(&f, &cfg).unwrap().map(f64::sqrt);
    let c = a1_constant(&w, &cfg).unwrap();
    assert!(c.is_finite() && c >= 1.0, "{c}");
}

#[test]
fn a1_of_a_spike_grows_with_height() {
    let g = Grid::new(GridSpec::uniform(1, 1, 32, 1.0, 64, 1.0 / 16.0)).unwrap();
    let cfg = MaximalConfig::dyadic(&g);
    let spike = |height: f64| {
        let mut w = Field::constant(&g, Rank::Scalar, 1.0);
        w.values_mut()[g.index(40, [16, 0])] = height;
        a1_constant(&w, &cfg).unwrap()
    };
    let (a, b) = (spike(1e3), spike(1e6));
    assert!(a > 10.0 && b > 100.0 * a, "{a} {b}");
}

#[test]
fn weight_from_maximal_on_constants() {
    let g = grid();
    let cfg = MaximalConfig::dyadic(&g);
    let w0 = weight_from_maximal(&Field::zeros(&g, Rank::Scalar), 1.5, &cfg).unwrap();
    assert!(w0.values().iter().all(|&v| v == 1.0));
    let wc = weight_from_maximal(&Field::constant(&g, Rank::Scalar, 3.0), 1.5, &cfg).unwrap();
    assert!(wc.values().iter().all(|&v| v == 4f64.powf(-0.5)));
    assert!(weight_from_maximal(&Field::zeros(&g, Rank::Scalar), 2.0, &cfg).is_err());
}

#[test]
fn weight_from_maximal_stays_uniformly_a2_under_scaling() {
    let g = Grid::new(GridSpec::uniform(1, 1, 32, 1.0, 64, 1.0 / 16.0)).unwrap();
    let cfg = MaximalConfig::dyadic(&g);
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut worst: f64 = 0.0;
    for _ in 0..10 {
        let mut f = Field::zeros(&g, Rank::Scalar);
        for _ in 0..3 {
            let c = rng.gen_range(0..g.cells());
            f.values_mut()[c] = rng.gen_range(1.0..100.0);
        }
        for s in [1.0, 10.0, 100.0] {
            let w = weight_from_maximal(&f.scaled(s), 1.5, &cfg).unwrap();
            worst = worst.max(ap_constant(&w, 2.0, &cfg).unwrap().constant);
        }
    }
    assert!(worst < 4.0, "{worst}");
}

#[test]
fn min_and_max_of_weights() {
    let g = grid();
    let cfg = MaximalConfig::dyadic(&g);
    let w1 = random_weight(&g, 1, 30.0);
    assert_eq!(weight_combine(&w1, &w1, Combine::Min).unwrap(), w1);
    assert_eq!(weight_combine(&w1, &w1, Combine::Max).unwrap(), w1);
    let huge = Field::constant(&g, Rank::Scalar, 1e300);
    assert_eq!(weight_combine(&w1, &huge, Combine::Min).unwrap(), w1);
    for seed in 2..6 {
        let w2 = random_weight(&g, seed, 30.0);
        let m = weight_combine(&w1, &w2, Combine::Min).unwrap();
        let a = |w: &Field| ap_constant(w, 2.0, &cfg).unwrap().constant;
        assert!(a(&m) <= a(&w1) + a(&w2));
    }
}

#[test]
fn reverse_holder_sweeps() {
    let g = grid();
    let cfg = MaximalConfig::dyadic(&g);
    let one = Field::constant(&g, Rank::Scalar, 1.0);
    for s in [1.1, 2.0, 3.5] {
        assert_eq!(reverse_holder_constant(&one, s, &cfg).unwrap(), 1.0);
    }
    let f = random_weight(&g, 5, 10.0);
    let w = weight_from_maximal(&f, 1.5, &cfg).unwrap();
    let rh = reverse_holder_exponent(&w, 2.0, 4.0, &cfg).unwrap();
    assert!(rh.found && rh.s > 1.0);

    let coarse = Grid::new(GridSpec::uniform(1, 1, 8, 1.0, 8, 1.0 / 8.0)).unwrap();
    let ccfg = MaximalConfig::dyadic(&coarse);
    let mut spike = Field::constant(&coarse, Rank::Scalar, 1.0);
    spike.values_mut()[coarse.index(4, [4, 0])] = 1e8;
    let sharp = reverse_holder_exponent(&spike, 2.0, 4.0, &ccfg).unwrap();
    // a lone spike in m cells gives <w^s>^(1/s) / <w> = m^(1 - 1/s)
    assert!(sharp.s < rh.s, "{} vs {}", sharp.s, rh.s);
    let c = reverse_holder_constant(&spike, 2.0, &ccfg).unwrap();
    assert!(c > 4.0 && c > 2.0 * reverse_holder_constant(&w, 2.0, &cfg).unwrap(), "{c}");
}

#[test]
fn embedding_holds_on_every_cylinder() {
    let g = grid();
    let cfg = MaximalConfig::dyadic(&g);
    let w = weight_from_maximal(&random_weight(&g, 6, 10.0), 1.5, &cfg).unwrap();
    let f = random_weight(&g, 7, 5.0);
    let rep = embedding_check(&f, &w, 2.0, 2.0, &cfg).unwrap();
    assert!(rep.q_tilde > 1.0 && rep.q_tilde < 2.0);
    assert!(rep.worst_ratio <= 1.0, "{}", rep.worst_ratio);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn ap_is_at_least_one_and_scale_free(seed in 0u64..10_000, e in -30i32..30, p in 1.2f64..4.0) {
        let g = Grid::new(GridSpec::uniform(1, 1, 8, 1.0, 8, 0.25)).unwrap();
        let cfg = MaximalConfig::dyadic(&g);
        let w = random_weight(&g, seed, 100.0);
        let a = ap_constant(&w, p, &cfg).unwrap().constant;
        prop_assert!(a >= 1.0 - 1e-12);
        prop_assert_eq!(a, ap_constant(&w.scaled(2f64.powi(e)), p, &cfg).unwrap().constant);
    }

    #[test]
    fn ap_decreases_in_p(seed in 0u64..10_000, p in 1.2f64..3.0, dp in 0.1f64..2.0) {
        let g = Grid::new(GridSpec::uniform(1, 1, 8, 1.0, 8, 0.25)).unwrap();
        let cfg = MaximalConfig::dyadic(&g);
        let w = random_weight(&g, seed, 100.0);
        let lo = ap_constant(&w, p, &cfg).unwrap().constant;
        let hi = ap_constant(&w, p + dp, &cfg).unwrap().constant;
        prop_assert!(hi <= lo * (1.0 + 1e-12));
    }
}
