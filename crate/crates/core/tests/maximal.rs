use parabolic::field::*;
use parabolic::maximal::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_field(g: &Grid, seed: u64) -> Field {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vals = (0..g.cells()).map(|_| rng.gen_range(-3.0..3.0)).collect();
    Field::from_values(g, Rank::Scalar, vals).unwrap()
}

#[test]
fn zero_field_has_zero_maximal_function() {
    let g = Grid::new(GridSpec::uniform(2, 1, 4, 1.0, 4, 1.0)).unwrap();
    let m = maximal(&Field::zeros(&g, Rank::Scalar), &MaximalConfig::dyadic(&g)).unwrap();
    assert!(m.values().iter().all(|&v| v == 0.0));
}

#[test]
fn indicator_on_four_cells_by_hand() {
    // h = tau = 1/4: radii h/2, h, 2h span one step; 4h spans four steps
    let g = Grid::new(GridSpec::uniform(1, 1, 4, 1.0, 4, 1.0)).unwrap();
    let cfg = MaximalConfig::dyadic(&g);
    assert_eq!(cfg.radii(), vec![0.125, 0.25, 0.5, 1.0]);
    let mut f = Field::zeros(&g, Rank::Scalar);
    f.values_mut()[g.index(0, [1, 0])] = 1.0;
    let m = maximal(&f, &cfg).unwrap();
    let at = |k: usize, i: usize| m.values()[g.index(k, [i, 0])];
    assert_eq!(at(0, 1), 1.0);
    assert_eq!(at(0, 0), 1.0 / 3.0);
    assert_eq!(at(0, 2), 1.0 / 3.0);
    assert_eq!(at(0, 3), 1.0 / 5.0);
    for k in 1..4 {
        for i in 0..4 {
            assert_eq!(at(k, i), 1.0 / 36.0);
        }
    }
}

#[test]
fn indicator_decays_away_from_its_cell() {
    let g = Grid::new(GridSpec::uniform(1, 1, 16, 1.0, 16, 1.0 / 16.0)).unwrap();
    let mut f = Field::zeros(&g, Rank::Scalar);
    let spot = g.index(8, [8, 0]);
    f.values_mut()[spot] = 1.0;
    let cfg = MaximalConfig::dyadic(&g).with_orientation(Orientation::Symmetric);
    let m = maximal(&f, &cfg).unwrap();
    assert_eq!(m.values()[spot], 1.0);
    assert_eq!(m, oracle_maximal(&f, &cfg).unwrap());
    let row: Vec<f64> = (8..16).map(|i| m.values()[g.index(8, [i, 0])]).collect();
    assert!(row.windows(2).all(|w| w[1] <= w[0]), "{row:?}");
    assert!(row[7] < row[0]);
}

#[test]
fn random_fields_match_oracle_on_cube_grid() {
    let g = Grid::new(GridSpec::uniform(2, 1, 8, 1.0, 8, 0.125)).unwrap();
    for seed in 0..4 {
        let f = random_field(&g, seed);
        for o in [Orientation::Backward, Orientation::Symmetric] {
            let cfg = MaximalConfig::dyadic(&g).with_orientation(o);
            assert_eq!(maximal(&f, &cfg).unwrap(), oracle_maximal(&f, &cfg).unwrap());
        }
    }
}

#[test]
fn power_maximal_reduces_to_plain() {
    let g = Grid::new(GridSpec::uniform(1, 1, 16, 1.0, 16, 0.5)).unwrap();
    let f = random_field(&g, 3);
    let cfg = MaximalConfig::dyadic(&g);
    assert_eq!(maximal_q_restricted(&f, &cfg).unwrap(), maximal(&f, &cfg).unwrap());
    let c = Field::constant(&g, Rank::Scalar, 1.5);
    let m2 = maximal_q_restricted(&c, &cfg.clone().with_q(2.0)).unwrap();
    assert!(m2.values().iter().all(|&v| (v - 1.5).abs() < 1e-15));
}

#[test]
fn smallest_radius_gives_single_cylinder_power_mean() {
    // (h/2)^2 / tau = 2.5, so the smallest cylinder is three steps deep
    let g = Grid::new(GridSpec::uniform(1, 1, 8, 1.0, 40, 0.0625)).unwrap();
    let f = random_field(&g, 4);
    let q = 2.5;
    let cfg = MaximalConfig::dyadic(&g).with_q(q).with_restrict(Some(0.5 * g.h()));
    let m = maximal_q_restricted(&f, &cfg).unwrap();
    for cell in 0..g.cells() {
        let (k, i) = g.coords(cell);
        let s: f64 = (k.saturating_sub(2)..=k).map(|kk| f.values()[g.index(kk, i)].abs().powf(q)).sum();
        let want = (s / 3.0).powf(1.0 / q);
        assert!((m.values()[cell] - want).abs() <= 1e-13 * want.max(1e-300), "cell {cell}");
    }
}

#[test]
fn descending_ladder_is_rejected() {
    let err = MaximalConfig::new(vec![0.5, 0.25], 1.0, None).unwrap_err();
    assert!(err.to_string().contains("ladder must be increasing"));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn fast_path_equals_oracle_bitwise(seed in 0u64..10_000, cells in 4usize..12, steps in 4usize..20, sym in any::<bool>(), two in any::<bool>()) {
        let n = if two { 2 } else { 1 };
        let g = Grid::new(GridSpec::uniform(n, 1, cells, 1.0, steps, 0.3)).unwrap();
        let f = random_field(&g, seed);
        let o = if sym { Orientation::Symmetric } else { Orientation::Backward };
        let cfg = MaximalConfig::dyadic(&g).with_orientation(o);
        prop_assert_eq!(maximal(&f, &cfg).unwrap(), oracle_maximal(&f, &cfg).unwrap());
    }

    #[test]
    fn maximal_dominates_and_is_sublinear(seed in 0u64..10_000) {
        let g = Grid::new(GridSpec::uniform(1, 1, 12, 1.0, 12, 0.25)).unwrap();
        let f = random_field(&g, seed);
        let h = random_field(&g, seed + 1);
        let cfg = MaximalConfig::dyadic(&g);
        let mf = maximal(&f, &cfg).unwrap();
        let mh = maximal(&h, &cfg).unwrap();
        let ms = maximal(&f.zip_map(&h, |a, b| a + b).unwrap(), &cfg).unwrap();
        for c in 0..g.cells() {
            prop_assert!(mf.values()[c] >= f.values()[c].abs());
            prop_assert!(ms.values()[c] <= (mf.values()[c] + mh.values()[c]) * (1.0 + 1e-12));
        }
    }
}
