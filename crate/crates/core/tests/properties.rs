use proptest::prelude::*;

use urbanctx::baselines::FittedLognormal;
use urbanctx::cluster::{adjusted_rand_index, agglomerate, Linkage};
use urbanctx::conformal::CpsDistribution;
use urbanctx::geo::{Axial, GeoPoint, Tessellation};
use urbanctx::metrics::{crps_step, kruskal_wallis_h, mann_whitney_u, pinball, Ensemble};
use urbanctx::PredictiveDistribution;

fn axial() -> impl Strategy<Value = Axial> {
    (-200i32..200, -200i32..200).prop_map(|(q, r)| Axial::new(q, r))
}

proptest! {
    #![proptest_config(ProptestConfig { failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn ring_and_disk_sizes(c in axial(), k in 0u32..12) {
        let ring = c.ring(k);
        prop_assert_eq!(ring.len(), if k == 0 { 1 } else { 6 * k as usize });
        prop_assert!(ring.iter().all(|a| a.distance(c) == k));
        prop_assert_eq!(c.spiral(k).len() as u32, 3 * k * (k + 1) + 1);
    }

    #[test]
    fn distance_is_a_metric(a in axial(), b in axial(), c in axial()) {
        prop_assert_eq!(a.distance(b), b.distance(a));
        prop_assert_eq!(a.distance(a), 0);
        prop_assert!(a.distance(c) <= a.distance(b) + b.distance(c));
        prop_assert!(a.neighbors().iter().all(|n| n.distance(a) == 1));
    }

    #[test]
    fn cell_centres_map_back_to_their_cell(q in -60i32..60, r in -60i32..60, lat in -60.0f64..60.0, lon in -179.0f64..179.0) {
        let tess = Tessellation::with_default_edge("p", GeoPoint::new(lat, lon).unwrap()).unwrap();
        let a = Axial::new(q, r);
        prop_assert_eq!(tess.point_to_axial(tess.cell_center(a)).unwrap(), a);
    }

    #[test]
    fn cps_cdf_is_monotone_and_inverts(
        point in 10.0f64..500.0,
        residuals in prop::collection::vec(-100.0f64..300.0, 1..60),
        ys in prop::collection::vec(-200.0f64..900.0, 2..20),
        tau in 0.01f64..0.99,
    ) {
        let mut residuals = residuals;
        residuals.sort_by(f64::total_cmp);
        let d = CpsDistribution::from_residuals(point, &residuals);
        let mut ys = ys;
        ys.sort_by(f64::total_cmp);
        let cdfs: Vec<f64> = ys.iter().map(|&y| d.cdf(y)).collect();
        prop_assert!(cdfs.windows(2).all(|w| w[0] <= w[1]));
        prop_assert!(cdfs.iter().all(|c| (0.0..=1.0).contains(c)));
        let q = d.quantile(tau);
        prop_assert!(d.cdf(q) >= tau - 1e-12);
        prop_assert!(crps_step(&d, ys[0]) >= 0.0);
    }

    #[test]
    fn pinball_is_nonnegative_and_halves_mae(y in -1e4f64..1e4, yhat in -1e4f64..1e4, tau in 0.0f64..=1.0) {
        prop_assert!(pinball(y, yhat, tau).unwrap() >= 0.0);
        prop_assert!((pinball(y, yhat, 0.5).unwrap() - 0.5 * (y - yhat).abs()).abs() <= 1e-9);
    }

    #[test]
    fn single_atom_crps_is_absolute_error(x in -1e3f64..1e3, y in -1e3f64..1e3) {
        let e = Ensemble::new(vec![x]).unwrap();
        prop_assert!((crps_step(&e, y) - (x - y).abs()).abs() <= 1e-9 * (1.0 + (x - y).abs()));
    }

    #[test]
    fn lognormal_quantile_roundtrip(mu in 1.0f64..8.0, sigma in 0.05f64..2.0, tau in 0.001f64..0.999) {
        let d = FittedLognormal::new(mu, sigma).unwrap();
        prop_assert!((d.cdf(d.quantile(tau)) - tau).abs() < 1e-9);
    }

    #[test]
    fn ari_is_symmetric_and_label_invariant(labels in prop::collection::vec((0usize..4, 0usize..3), 2..80)) {
        let (a, b): (Vec<usize>, Vec<usize>) = labels.into_iter().unzip();
        let ab = adjusted_rand_index(&a, &b).unwrap();
        prop_assert!((ab - adjusted_rand_index(&b, &a).unwrap()).abs() < 1e-12);
        let renamed: Vec<usize> = a.iter().map(|l| 10 + 3 * l).collect();
        prop_assert!((adjusted_rand_index(&renamed, &b).unwrap() - ab).abs() < 1e-12);
        prop_assert!(ab <= 1.0 + 1e-12);
    }

    #[test]
    fn rank_statistics_ignore_monotone_transforms(
        a in prop::collection::vec(0.0f64..100.0, 1..15),
        b in prop::collection::vec(0.0f64..100.0, 1..15),
        c in prop::collection::vec(0.0f64..100.0, 1..15),
    ) {
        let f = |v: &[f64]| v.iter().map(|x| (x + 1.0).ln() * 3.0 + 7.0).collect::<Vec<_>>();
        let h = kruskal_wallis_h(&[a.clone(), b.clone(), c.clone()]).unwrap();
        let hf = kruskal_wallis_h(&[f(&a), f(&b), f(&c)]).unwrap();
        prop_assert!((h - hf).abs() < 1e-9);
        prop_assert!((mann_whitney_u(&a, &b) - mann_whitney_u(&f(&a), &f(&b))).abs() < 1e-9);
        prop_assert!((mann_whitney_u(&a, &b) + mann_whitney_u(&b, &a) - (a.len() * b.len()) as f64).abs() < 1e-9);
    }

    #[test]
    fn agglomeration_yields_k_nonempty_clusters(
        points in prop::collection::vec(-10.0f64..10.0, 6..60),
        k in 1usize..4,
    ) {
        let n = points.len() / 2;
        prop_assume!(n >= k);
        for linkage in [Linkage::Ward, Linkage::Average] {
            let labels = agglomerate(&points[..2 * n], 2, k, linkage).unwrap();
            prop_assert_eq!(labels.len(), n);
            let distinct: std::collections::BTreeSet<_> = labels.iter().collect();
            prop_assert_eq!(distinct.len(), k);
        }
    }
}
