use contour_core::catalog::{BoxRegion, ContourSystem, ShapeCatalog};
use contour_core::geometry::Contour;
use contour_core::oracle::{enumerate_x, measure, measure_system};

#[test]
fn enumeration_matches_subset_brute_force() {
    let sys = ContourSystem::new(&ShapeCatalog::build(8), BoxRegion::new(0, 0, 2, 2), 1.0);
    let n = sys.len();
    assert!(n < 20);
    let mut brute: Vec<Vec<u32>> = (0u32..1 << n)
        .map(|mask| (0..n as u32).filter(|i| mask >> i & 1 == 1).collect::<Vec<u32>>())
        .filter(|s| s.iter().all(|&a| s.iter().all(|&b| a == b || !sys.conflict(a, b))))
        .collect();
    brute.sort();
    let mut ours = enumerate_x(&sys).unwrap();
    ours.sort();
    assert_eq!(ours, brute);
}

#[test]
fn normalisation_and_volume_monotonicity() {
    let mut prev: Option<(f64, f64)> = None;
    for side in 1..=4 {
        let m = measure(BoxRegion::square(side), 1.5, 8).unwrap();
        let total: f64 = m.probabilities.iter().sum();
        assert!((total - 1.0).abs() < 1e-12);
        let empty = m.probability(&[]);
        assert!((empty - 1.0 / m.partition_function).abs() < 1e-15);
        if let Some((z, e)) = prev {
            assert!(m.partition_function > z && empty < e);
        }
        prev = Some((m.partition_function, empty));
    }
}

#[test]
fn two_incompatible_squares() {
    let beta = 0.7;
    let sys = ContourSystem::from_contours(vec![Contour::unit_square(0, 0), Contour::unit_square(1, 0)], beta);
    let m = measure_system(sys).unwrap();
    let w = (-4.0 * beta).exp();
    assert_eq!(m.len(), 3);
    assert!((m.probability(&[]) - 1.0 / (1.0 + 2.0 * w)).abs() < 1e-15);
    assert!((m.marginal(0) - w / (1.0 + 2.0 * w)).abs() < 1e-15);
    assert_eq!(m.probability(&[0, 1]), 0.0);
    assert!(m.detailed_balance_residual() < 1e-15);
}

#[test]
fn compatible_pieces_factorise() {
    let cs = vec![Contour::unit_square(0, 0), Contour::unit_square(1, 0), Contour::unit_square(5, 0)];
    let m = measure_system(ContourSystem::from_contours(cs, 0.5)).unwrap();
    let (a, b) = (0u32, 2u32);
    let both = m.expectation(|c| (c.contains(&a) && c.contains(&b)) as u8 as f64);
    assert!((both - m.marginal(a) * m.marginal(b)).abs() < 1e-15);
    let z_left = 1.0 + 2.0 * (-2.0f64).exp();
    let z_right = 1.0 + (-2.0f64).exp();
    assert!((m.partition_function - z_left * z_right).abs() < 1e-12);
}
