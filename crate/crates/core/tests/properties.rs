use approx::assert_abs_diff_eq;
use overlap_lab::cascade::{CascadeConfig, CascadeSource};
use overlap_lab::functions::{MatrixFn, OverlapFn};
use overlap_lab::identity::{gg_identity_test, TestOptions};
use overlap_lab::invariance::{delta_t, general_t, t_map};
use overlap_lab::measure::Budget;
use overlap_lab::overlap::OverlapMatrix;
use overlap_lab::seed::SeedKey;
use overlap_lab::ultrametric::{barycenter_on_pattern, build_ultrametric_tree, classify_triple, pattern_gram, triangle_census, TriangleClass};
use proptest::prelude::*;

proptest! {
    #[test]
    fn t_map_is_a_flow(w1 in 0.001f64..0.999, s in -5.0f64..5.0, t in -5.0f64..5.0) {
        let w = [w1, 1.0 - w1];
        let (tw, _) = t_map(&w, t).unwrap();
        let (st, _) = t_map(&tw, s).unwrap();
        let (direct, _) = t_map(&w, s + t).unwrap();
        assert_abs_diff_eq!(st[0], direct[0], epsilon = 1e-12);
        assert_abs_diff_eq!(tw[0] + tw[1], 1.0, epsilon = 1e-14);
    }

    #[test]
    fn t_map_first_weight_increases_in_t(w1 in 0.001f64..0.999, t in -5.0f64..5.0, dt in 0.01f64..2.0) {
        let w = [w1, 1.0 - w1];
        prop_assert!(t_map(&w, t + dt).unwrap().0[0] > t_map(&w, t).unwrap().0[0]);
        if t >= 0.0 {
            prop_assert!(delta_t(w1, t) >= 1.0);
        }
    }

    #[test]
    fn general_t_reduces_to_two_cell_map(w1 in 0.01f64..0.99, t in -5.0f64..5.0, shift in -20.0f64..20.0) {
        let g = general_t(2, &[(0, w1, t + shift), (1, 1.0 - w1, shift)]).unwrap();
        let (tw, _) = t_map(&[w1, 1.0 - w1], t).unwrap();
        assert_abs_diff_eq!(g[0], tw[0], epsilon = 1e-12);
        assert_abs_diff_eq!(g[1], tw[1], epsilon = 1e-12);
    }

    #[test]
    fn census_classes_partition_triples(raw in prop::collection::vec((-1.0f64..1.0, -1.0f64..1.0, -1.0f64..1.0), 1..60), eps in 0.001f64..0.2) {
        let triples: Vec<[f64; 3]> = raw.iter().map(|&(a, b, c)| [a, b, c]).collect();
        let c = triangle_census(&triples, eps).unwrap();
        prop_assert_eq!(c.total, triples.len());
        prop_assert_eq!(c.equilateral + c.isosceles + c.violating, c.total);
        for t in &triples {
            let (class, margin) = classify_triple(t[0], t[1], t[2], eps);
            prop_assert_eq!(class == TriangleClass::Violating, margin >= eps);
        }
    }

    #[test]
    fn barycenter_bounds_hold_on_psd_patterns(q in 0.3f64..1.0, fa in 0.0f64..1.0, fb in 0.0f64..1.0, fc in 0.0f64..1.0, m in 1usize..8) {
        let mut v = [q * (2.0 * fa - 1.0), q * (2.0 * fb - 1.0), q * (2.0 * fc - 1.0)];
        v.sort_by(f64::total_cmp);
        let (a, b, c) = (v[0], v[1], v[2]);
        prop_assume!(a < b && c < q - 1e-3);
        let g = nalgebra::DMatrix::from_row_slice(3 * m, 3 * m, &pattern_gram(m, q, a, b, c, c));
        prop_assume!(g.symmetric_eigenvalues().min() > 1e-7);
        prop_assert!(barycenter_on_pattern(m, q, a, b, c).unwrap().all_hold());
    }

    #[test]
    fn trees_reproduce_random_ultrametrics(n in 2usize..12, seed in any::<u64>()) {
        let r = random_ultrametric(n, seed);
        let tree = build_ultrametric_tree(&r, 1e-9).unwrap();
        prop_assert!(tree.reconstruction_error(&r).unwrap() < 1e-12);
        prop_assert_eq!(tree.merges.len(), n - 1);
    }
}

/// Random agglomeration: the overlap of two points is the height at which
/// their clusters merge, and heights decrease from 1.
fn random_ultrametric(n: usize, seed: u64) -> OverlapMatrix {
    use rand::Rng;
    let mut rng = SeedKey::new(seed).stream();
    let mut clusters: Vec<Vec<usize>> = (0..n).map(|i| vec![i]).collect();
    let mut entries = vec![1.0; n * n];
    let mut height = 1.0;
    while clusters.len() > 1 {
        height -= rng.random_range(0.01..0.2);
        let i = rng.random_range(0..clusters.len());
        let a = clusters.swap_remove(i);
        let j = rng.random_range(0..clusters.len());
        for &x in &a {
            for &y in &clusters[j] {
                entries[x * n + y] = height;
                entries[y * n + x] = height;
            }
        }
        clusters[j].extend(a);
    }
    OverlapMatrix::from_entries(n, 1.0, entries).unwrap()
}

#[test]
fn standard_error_shrinks_like_root_budget() {
    let src = CascadeSource::new(CascadeConfig::one_level(0.5, 0.2, 0.8, 256).unwrap()).unwrap();
    let f = MatrixFn::pair(1, 2, OverlapFn::threshold(0.5));
    let psi = OverlapFn::threshold(0.5);
    let opts = TestOptions::default();
    let se = |m| gg_identity_test(&src, &f, &psi, 2, Budget::new(m, 4), SeedKey::new(3), &opts).unwrap().difference.std_error;
    let ratio = se(1000) / se(2000);
    assert!((1.25..=1.6).contains(&ratio), "SE ratio {ratio}");
}
