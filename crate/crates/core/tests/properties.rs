use proptest::prelude::*;

use quantlab::ald::{ald_log_ratio, check_loss, AldWorkingModel, TauLevel};
use quantlab::design::{sup_norm_distance, CovariateDesign, CovariateSpace, FamilyKind, ThetaFamily};
use quantlab::posterior::{log_lik_ratio_sum_iid, posterior_mass_outside_iid, GridPrior};
use quantlab::truth::{MixtureComponent, TrueDensity};

fn level() -> impl Strategy<Value = TauLevel> {
    (0.01f64..0.99).prop_map(|t| TauLevel::new(t).unwrap())
}

fn density() -> impl Strategy<Value = TrueDensity> {
    prop_oneof![
        (-2.0f64..2.0, 0.2f64..3.0).prop_map(|(m, s)| TrueDensity::gaussian(m, s)),
        (1.0f64..10.0, -1.0f64..1.0, 0.5f64..2.0).prop_map(|(nu, c, s)| TrueDensity::student_t(nu, c, s)),
        (0.1f64..0.9, -3.0f64..0.0, 0.0f64..3.0).prop_map(|(w, a, b)| TrueDensity::Mixture {
            components: vec![
                MixtureComponent { weight: w, mu: a, sigma: 1.0 },
                MixtureComponent { weight: 1.0 - w, mu: b, sigma: 0.5 },
            ],
        }),
        (-1.0f64..1.0, 0.2f64..2.0, 0.2f64..2.0).prop_map(|(m, l, r)| TrueDensity::Skewed {
            mode: m,
            left_scale: l,
            right_scale: r
        }),
    ]
}

proptest! {
    #[test]
    fn tau_outside_unit_interval_is_rejected(t in prop_oneof![-5.0f64..=0.0, 1.0f64..5.0]) {
        prop_assert!(TauLevel::new(t).is_err());
    }

    #[test]
    fn check_loss_is_nonnegative_and_vanishes_only_at_zero(u in -1e6f64..1e6, tau in level()) {
        let r = check_loss(u, tau);
        prop_assert!(r >= 0.0);
        prop_assert_eq!(r == 0.0, u == 0.0);
    }

    #[test]
    fn working_log_density_is_finite(y in -1e8f64..1e8, loc in -100.0f64..100.0, tau in level()) {
        prop_assert!(AldWorkingModel::new(loc, tau).log_pdf(y).is_finite());
    }

    #[test]
    fn ratio_is_antisymmetric(y in -50.0f64..50.0, t in -50.0f64..50.0, s in -50.0f64..50.0, tau in level()) {
        prop_assert_eq!(ald_log_ratio(y, t, s, tau), -ald_log_ratio(y, s, t, tau));
    }

    #[test]
    fn ratio_sum_is_bounded(
        ys in prop::collection::vec(-20.0f64..20.0, 1..200),
        t in -5.0f64..5.0,
        t_star in -5.0f64..5.0,
        tau in level(),
    ) {
        let s = log_lik_ratio_sum_iid(&ys, t, t_star, tau);
        prop_assert!(s.abs() <= ys.len() as f64 * (t - t_star).abs());
    }

    #[test]
    fn cdf_is_monotone_with_unit_limits(dist in density(), a in -30.0f64..30.0, b in -30.0f64..30.0) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(dist.cdf(lo) <= dist.cdf(hi));
        prop_assert!(dist.cdf(-1e12) < 1e-6);
        prop_assert!(dist.cdf(1e12) > 1.0 - 1e-6);
    }

    #[test]
    fn posterior_masses_are_complementary(
        weights in prop::collection::vec(0.01f64..1.0, 2..60),
        ys in prop::collection::vec(-4.0f64..4.0, 0..100),
        t_star in -1.0f64..1.0,
        eps in 0.05f64..2.0,
        tau in level(),
    ) {
        let k = weights.len();
        let atoms: Vec<Vec<f64>> = (0..k).map(|j| vec![-3.0 + 6.0 * j as f64 / (k - 1) as f64]).collect();
        let prior = GridPrior::discrete(atoms, &weights).unwrap();
        prop_assert!((prior.total_mass() - 1.0).abs() < 1e-10);
        let s = posterior_mass_outside_iid(&ys, &prior, t_star, eps, tau).unwrap();
        prop_assert!((0.0..=1.0).contains(&s.mass_outside));
        prop_assert!((s.mass_outside + s.mass_inside - 1.0).abs() < 1e-10);
        prop_assert!((s.mass_outside - (s.log_r1n_outside - s.log_r2n).exp()).abs() < 1e-15);
    }

    #[test]
    fn designs_stay_in_space_and_are_deterministic(count in 1usize..50, seed in any::<u64>(), i in 0usize..10_000) {
        let space = CovariateSpace::new(vec![(-1.0, 2.0), (0.0, 0.5)], Default::default()).unwrap();
        let a = CovariateDesign::uniform_draws(space.clone(), count, seed).unwrap();
        let b = CovariateDesign::uniform_draws(space.clone(), count, seed).unwrap();
        prop_assert!(space.contains(a.point(i)));
        prop_assert_eq!(a.point(i), b.point(i));
        prop_assert_eq!(a.point(i), a.point(i + count));
    }

    #[test]
    fn families_respect_their_bound(
        b0 in -1.0f64..1.0, b1 in -2.0f64..2.0, b2 in 0.5f64..3.0, x in 0.0f64..=2.0,
    ) {
        let space = CovariateSpace::interval(0.0, 2.0).unwrap();
        let affine = ThetaFamily::new(FamilyKind::Affine, space.clone(), vec![(-1.0, 1.0), (-2.0, 2.0)]).unwrap();
        prop_assert!(affine.evaluate(&[b0, b1], &[x]).abs() <= affine.bound());
        let sine = ThetaFamily::new(FamilyKind::Sine, space, vec![(-1.0, 1.0), (-2.0, 2.0), (0.5, 3.0)]).unwrap();
        prop_assert!(sine.evaluate(&[b0, b1, b2], &[x]).abs() <= sine.bound());
    }

    #[test]
    fn sup_distance_is_a_metric_and_refines_upward(
        a in prop::array::uniform3(-1.0f64..1.0),
        b in prop::array::uniform3(-1.0f64..1.0),
        c in prop::array::uniform3(-1.0f64..1.0),
    ) {
        let space = CovariateSpace::interval(0.0, 2.0).unwrap();
        let fam = ThetaFamily::new(FamilyKind::Sine, space, vec![(-1.0, 1.0); 3]).unwrap();
        let d = |p: &[f64], q: &[f64]| sup_norm_distance(&fam, p, q, 129);
        prop_assert_eq!(d(&a, &a), 0.0);
        prop_assert_eq!(d(&a, &b), d(&b, &a));
        prop_assert!(d(&a, &c) <= d(&a, &b) + d(&b, &c) + 1e-15);
        // the 257-point grid contains the 129-point grid
        prop_assert!(sup_norm_distance(&fam, &a, &b, 257) >= d(&a, &b));
    }
}
