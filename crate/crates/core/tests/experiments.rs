use parabolic::experiments::*;
use parabolic::field::GridSpec;
use parabolic::pde::Law;
use proptest::prelude::*;

fn small_apriori() -> AprioriConfig {
    AprioriConfig { grid: GridSpec::uniform(1, 1, 16, 1.0, 16, 0.05), qs: vec![1.5], ..Default::default() }
}

#[test]
fn apriori_with_zero_forcing_has_zero_envelope() {
    let cfg = AprioriConfig { mass: 0.0, ..small_apriori() };
    let r = apriori_scaling_study(&cfg).unwrap();
    assert_eq!(r.recorded("envelope q=1.5 weighted=0"), Some(0.0));
    assert_eq!(r.recorded("envelope q=1.5 weighted=1"), Some(0.0));
    assert!(r.table.column("grad_norm").unwrap().iter().all(|&v| v == 0.0));
}

#[test]
fn apriori_linear_law_has_unit_slope() {
    let cfg = AprioriConfig { law: Law::Linear { nu: 1.0 }, ..small_apriori() };
    let r = apriori_scaling_study(&cfg).unwrap();
    for w in 0..2 {
        let c = r.check(&format!("slope q=1.5 weighted={w}")).unwrap();
        assert!((c.value - 1.0).abs() < 1e-9, "{}", c.value);
    }
}

#[test]
fn apriori_rejects_descending_scales() {
    let cfg = AprioriConfig { scales: vec![4.0, 2.0, 1.0], fit_points: 2, ..small_apriori() };
    let err = apriori_scaling_study(&cfg).unwrap_err();
    assert!(err.to_string().contains("ladder must be increasing"));
}

fn small_good_lambda() -> GoodLambdaConfig {
    GoodLambdaConfig { grid: GridSpec::uniform(1, 1, 24, 1.0, 24, 0.05), ks: vec![4.0, 8.0], ..Default::default() }
}

#[test]
fn good_lambda_without_forcing_is_vacuous() {
    let r = good_lambda_probe(&GoodLambdaConfig { mass: 0.0, ..small_good_lambda() }).unwrap();
    assert!(r.table.rows.is_empty());
    assert_eq!(r.recorded("levels"), Some(0.0));
    assert_eq!(r.recorded("Lambda"), Some(0.0));
}

#[test]
fn good_lambda_above_the_maximal_function_is_empty() {
    let r = good_lambda_probe(&GoodLambdaConfig { lambda_start: 1e12, ..small_good_lambda() }).unwrap();
    assert_eq!(r.recorded("levels"), Some(0.0));
}

#[test]
fn good_lambda_ratios_fall_with_eps() {
    let r = good_lambda_probe(&small_good_lambda()).unwrap();
    assert!(r.check("monotone in eps").unwrap().passed);
    assert!(r.table.column("ratio").unwrap().iter().all(|&v| (0.0..=1.0).contains(&v)));
}

#[test]
fn uniqueness_for_a_linear_law() {
    let cfg = UniquenessConfig {
        grid: GridSpec::uniform(1, 1, 16, 1.0, 16, 0.05),
        laws: vec![Law::Linear { nu: 1.0 }],
        ..Default::default()
    };
    let r = uniqueness_probe(&cfg).unwrap();
    let c = r.check("two-start agreement").unwrap();
    assert!(c.passed && c.value <= 1e-10, "{}", c.value);
    assert!(r.check("laws linear at infinity").unwrap().passed);
}

fn small_existence() -> ExistenceConfig {
    ExistenceConfig { grid: GridSpec::uniform(1, 1, 16, 1.0, 16, 0.05), ks: vec![64.0, 128.0, 256.0], ..Default::default() }
}

#[test]
fn existence_with_levels_above_the_peak_is_one_solve() {
    let r = existence_pipeline(&small_existence()).unwrap();
    let rows = &r.table.rows;
    for row in rows {
        assert_eq!(row[1..5], rows[0][1..5]);
        assert_eq!(row[5], 0.0);
    }
}

#[test]
fn existence_without_forcing_is_zero() {
    let r = existence_pipeline(&ExistenceConfig { peak: 0.0, ..small_existence() }).unwrap();
    assert!(r.table.rows.iter().all(|row| row[1..].iter().all(|&v| v == 0.0)));
}

#[test]
fn convergence_of_the_zero_solution_is_exact() {
    let r = convergence_study(&ConvergenceConfig { amplitude: 0.0, cells: vec![8, 16], ..Default::default() }).unwrap();
    assert!(r.table.column("l2_error").unwrap().iter().all(|&v| v == 0.0));
    assert!(r.table.column("grad_error").unwrap().iter().all(|&v| v == 0.0));
}

#[test]
fn convergence_rejects_uneven_refinement() {
    assert!(convergence_study(&ConvergenceConfig { cells: vec![8, 12], ..Default::default() }).is_err());
}

#[test]
fn csv_rejects_non_finite_values() {
    let mut t = Table::new(&["a", "b"]);
    t.push(vec![1.0, f64::NAN]);
    let err = t.to_csv().unwrap_err();
    assert!(err.to_string().contains('b'));
    assert_eq!(Table::new(&["a", "b"]).to_csv().unwrap(), "a,b\n");
}

#[test]
fn reruns_are_byte_identical() {
    let a = good_lambda_probe(&small_good_lambda()).unwrap().table.to_csv().unwrap();
    let b = good_lambda_probe(&small_good_lambda()).unwrap().table.to_csv().unwrap();
    assert_eq!(a, b);
}

proptest! {
    #[test]
    fn slope_of_a_power_law_is_its_exponent(e in -3.0f64..3.0, c in 0.1f64..10.0) {
        let x: Vec<f64> = (0..6).map(|j| 2f64.powi(j)).collect();
        let y: Vec<f64> = x.iter().map(|v| c * v.powf(e)).collect();
        prop_assert!((loglog_slope(&x, &y).unwrap() - e).abs() < 1e-12);
    }
}
