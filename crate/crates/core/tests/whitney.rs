use parabolic::field::*;
use parabolic::maximal::{maximal, MaximalConfig};
use parabolic::whitney::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn grid(n: usize, cells: usize, steps: usize) -> Grid {
    let h = 1.0 / cells as f64;
    Grid::new(GridSpec::uniform(n, 1, cells, 1.0, steps, steps as f64 * h * h)).unwrap()
}

fn random_mask(g: &Grid, seed: u64, density: f64) -> BadSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mask: Vec<bool> = (0..g.cells()).map(|_| rng.gen_bool(density)).collect();
    if !mask.iter().any(|&b| b) {
        mask[0] = true;
    }
    BadSet::from_mask(g, 1.0, mask).unwrap()
}

/// Largest radius among the cubes whose half cube holds the centre of `cell`.
fn radius_at(cover: &WhitneyCover, cell: usize) -> f64 {
    let g = &cover.grid;
    let (x, t) = g.center(cell);
    cover
        .cubes
        .iter()
        .filter(|c| c.scaled(g.n(), 0.5).contains(&x[..g.n()], t))
        .map(|c| c.r)
        .fold(0.0, f64::max)
}

#[test]
fn threshold_extremes() {
    let g = grid(1, 8, 8);
    let mut a = Field::zeros(&g, Rank::Scalar);
    let mut b = Field::zeros(&g, Rank::Scalar);
    a.values_mut()[3] = 2.0;
    b.values_mut()[10] = 0.5;
    assert!(bad_set(&a, &b, 2.0).unwrap().is_empty());
    let tiny = bad_set(&a, &b, 1e-300).unwrap();
    let support: Vec<usize> = (0..g.cells()).filter(|&c| tiny.mask[c]).collect();
    assert_eq!(support, vec![3, 10]);
    assert!(bad_set(&a, &b, 0.0).is_err());
}

#[test]
fn chebyshev_bound_on_a_threshold_ladder() {
    let g = grid(1, 16, 16);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let f = Field::from_values(&g, Rank::Scalar, (0..g.cells()).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
    let gg = f.map(|v| v * v * 3.0);
    let cfg = MaximalConfig::dyadic(&g);
    let (mf, mg) = (maximal(&f, &cfg).unwrap(), maximal(&gg, &cfg).unwrap());
    let q = 1.5;
    let rhs = lp_norm(&mf, q).unwrap().powf(q) + lp_norm(&mg, q).unwrap().powf(q);
    for j in -4..4 {
        let lambda = 2f64.powi(j);
        let bad = bad_set(&mf, &mg, lambda).unwrap();
        assert!(lambda.powf(q) * bad.measure() <= rhs, "lambda {lambda}");
    }
}

#[test]
fn single_bad_cell_gets_a_single_cube() {
    let g = grid(1, 32, 32);
    let mut mask = vec![false; g.cells()];
    let cell = g.index(12, [20, 0]);
    mask[cell] = true;
    let bad = BadSet::from_mask(&g, 1.0, mask).unwrap();
    let cover = whitney_cover(&bad).unwrap();
    assert_eq!(cover.len(), 1);
    assert_eq!(cover.neighbors, vec![vec![0]]);
    assert!(check_cover(&bad, &cover).passed());
    let pou = partition_of_unity(&cover);
    assert_eq!(pou.rho[0].len(), 1);
    assert_eq!((pou.rho[0][0].cell, pou.rho[0][0].value), (cell, 1.0));
}

#[test]
fn radii_shrink_toward_a_hole() {
    let g = grid(1, 32, 32);
    let hole = g.index(16, [16, 0]);
    let mut mask = vec![true; g.cells()];
    mask[hole] = false;
    let bad = BadSet::from_mask(&g, 1.0, mask).unwrap();
    let cover = whitney_cover(&bad).unwrap();
    let chk = check_cover(&bad, &cover);
    assert!(chk.passed(), "{:?}", chk.failures());
    let row: Vec<f64> = (17..21).map(|i| radius_at(&cover, g.index(16, [i, 0]))).collect();
    assert!(row.windows(2).all(|w| w[0] < w[1]), "{row:?}");
}

#[test]
fn random_masks_pass_the_checker() {
    for (n, cells, steps) in [(1, 16, 32), (2, 8, 8)] {
        let g = grid(n, cells, steps);
        for seed in 0..6 {
            let bad = random_mask(&g, seed, 0.7);
            let cover = whitney_cover(&bad).unwrap();
            let chk = check_cover(&bad, &cover);
            assert!(chk.passed(), "n {n} seed {seed}: {:?}", chk.failures());
            assert!(chk.k_overlap() >= 1);
        }
    }
}

fn cube(g: &Grid, level: u32, anchor: [i64; 3]) -> Cube {
    // same geometry as the builder: side from the level, time length side^2 / 4
    let side = 2f64.powi(level as i32 - 20);
    let lt = 0.25 * side * side;
    let mut center = [0.0; 2];
    for a in 0..g.n() {
        center[a] = (anchor[a + 1] as f64 + 0.5) * side;
    }
    Cube { level, anchor, side, r: 0.5 * gamma(level) * side, center, t_center: (anchor[0] as f64 + 0.5) * lt }
}

#[test]
fn two_adjacent_cubes_sum_to_one_on_their_overlap() {
    let g = grid(1, 64, 256);
    let cubes = vec![cube(&g, 16, [40, 7, 0]), cube(&g, 16, [40, 8, 0])];
    let neighbors = neighbor_sets(&g, &cubes);
    assert_eq!(neighbors, vec![vec![0, 1], vec![0, 1]]);
    let cover = WhitneyCover { grid: g.clone(), cubes, neighbors, first_level: 0 };
    let pou = partition_of_unity(&cover);
    let mut total = vec![0.0; g.cells()];
    let mut hits = vec![0; g.cells()];
    for list in &pou.rho {
        for s in list {
            total[s.cell] += s.value;
            hits[s.cell] += 1;
        }
    }
    let shared: Vec<usize> = (0..g.cells()).filter(|&c| hits[c] == 2).collect();
    assert!(shared.len() > 10);
    for c in shared {
        assert!((total[c] - 1.0).abs() < 1e-15, "cell {c}: {}", total[c]);
    }
}

#[test]
fn partition_derivatives_on_random_covers() {
    let mut worst: f64 = 0.0;
    for (n, cells, steps) in [(1, 32, 64), (2, 8, 16)] {
        let g = grid(n, cells, steps);
        for seed in 0..4 {
            let bad = random_mask(&g, 100 + seed, 0.85);
            let cover = whitney_cover(&bad).unwrap();
            let chk = check_partition(&cover, &partition_of_unity(&cover));
            assert!(chk.passed(), "{chk:?}");
            worst = worst.max(chk.c_pou);
        }
    }
    assert!(worst <= 64.0, "C_pou {worst}");
}

#[test]
fn neighbor_sets_of_simple_covers() {
    let g = grid(1, 64, 256);
    let far = vec![cube(&g, 14, [2, 0, 0]), cube(&g, 14, [2, 3, 0]), cube(&g, 14, [9, 0, 0])];
    assert_eq!(neighbor_sets(&g, &far), vec![vec![0], vec![1], vec![2]]);
    assert_eq!(neighbor_sets(&g, &far[..1]), vec![vec![0]]);
}

#[test]
fn neighbor_sets_match_pairwise_oracle() {
    for (n, cells, steps) in [(1, 32, 64), (2, 8, 16)] {
        let g = grid(n, cells, steps);
        for seed in 0..3 {
            let cover = whitney_cover(&random_mask(&g, 200 + seed, 0.8)).unwrap();
            let boxes: Vec<ParBox> = cover.cubes.iter().map(|c| c.scaled(n, 0.75)).collect();
            for (k, bk) in boxes.iter().enumerate() {
                let want: Vec<usize> = (0..boxes.len()).filter(|&j| bk.intersects_open(&boxes[j])).collect();
                assert_eq!(cover.neighbors[k], want, "cube {k}");
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn any_mask_gives_a_valid_cover(seed in 0u64..100_000, density in 0.05f64..1.0, two in any::<bool>()) {
        let g = if two { grid(2, 4, 8) } else { grid(1, 8, 16) };
        let bad = random_mask(&g, seed, density);
        let cover = whitney_cover(&bad).unwrap();
        let chk = check_cover(&bad, &cover);
        prop_assert!(chk.passed(), "{:?}", chk.failures());
        let part = check_partition(&cover, &partition_of_unity(&cover));
        prop_assert!(part.passed(), "{:?}", part);
    }
}
