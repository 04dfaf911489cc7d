//! Randomised invariants across modules.

use adcs::constraints::{Constraint, ConstraintSet, PoseSpec};
use adcs::lie::{expmap, logmap, NoiseSchedule, Twist};
use adcs::metrics::{quantile, voxel_stats};
use adcs::models::{AdcsModel, CwtConfig, ModelConfig, WeightingKind};
use adcs::sample::{apportion, kde_density, resample, Replication};
use adcs::seeds;
use adcs::tasks::Bounds;
use nalgebra::{Vector3, Vector6};
use proptest::prelude::*;

fn twist_strategy(max_angle: f64) -> impl Strategy<Value = Twist> {
    (prop::array::uniform3(-1.0..1.0f64), 0.0..max_angle, prop::array::uniform3(-3.0..3.0f64)).prop_filter_map("zero axis", |(a, th, v)| {
        let axis = Vector3::from(a);
        (axis.norm() > 1e-3).then(|| Twist::new(axis.normalize() * th, Vector3::from(v)))
    })
}

fn points(n: usize) -> impl Strategy<Value = Vec<Vector3<f64>>> {
    prop::collection::vec(prop::array::uniform3(-0.2..1.2f64).prop_map(Vector3::from), 0..n)
}

fn unit() -> Bounds {
    Bounds { lo: [0.0; 3], hi: [1.0; 3] }
}

proptest! {
    #[test]
    fn log_inverts_exp(t in twist_strategy(3.1)) {
        let back = logmap(&expmap(&t)).unwrap();
        prop_assert!((back.to_vector6() - t.to_vector6()).norm() < 1e-9);
    }

    #[test]
    fn exp_inverts_log_up_to_the_group(t in twist_strategy(std::f64::consts::PI - 1e-3)) {
        let p = expmap(&t);
        let q = expmap(&logmap(&p).unwrap());
        prop_assert!((p.to_homogeneous() - q.to_homogeneous()).abs().max() < 1e-9);
    }

    #[test]
    fn exp_of_negated_twist_is_the_inverse(t in twist_strategy(3.0)) {
        let neg = Twist::from_vector6(&(-t.to_vector6()));
        let prod = expmap(&t) * expmap(&neg);
        prop_assert!((prod.to_homogeneous() - nalgebra::Matrix4::identity()).abs().max() < 1e-9);
    }

    #[test]
    fn coverage_is_a_fraction_and_never_drops_when_points_are_added(a in points(60), b in points(20), m in 1usize..8) {
        let va = voxel_stats(&a, m, &unit()).unwrap();
        let mut ab = a.clone();
        ab.extend(b);
        let vab = voxel_stats(&ab, m, &unit()).unwrap();
        prop_assert!((0.0..=1.0).contains(&va.coverage));
        prop_assert!(vab.coverage >= va.coverage);
        prop_assert_eq!(vab.counts.iter().sum::<u64>() as usize, ab.len());
        prop_assert!(va.variance >= 0.0);
    }

    #[test]
    fn quantiles_are_ordered_and_bounded(xs in prop::collection::vec(-1e3..1e3f64, 1..50)) {
        let lo = xs.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let (q1, q2, q3) = (quantile(&xs, 0.25), quantile(&xs, 0.5), quantile(&xs, 0.75));
        prop_assert!(lo <= q1 && q1 <= q2 && q2 <= q3 && q3 <= hi);
        prop_assert_eq!(quantile(&xs, 0.0), lo);
        prop_assert_eq!(quantile(&xs, 1.0), hi);
    }

    #[test]
    fn resampling_only_copies_kept_inputs(
        qs in prop::collection::vec(prop::collection::vec(-3.0..3.0f64, 3), 1..30),
        seed in 0u64..1000,
        n_s in 1usize..60,
        kde in any::<bool>(),
    ) {
        let energies: Vec<f64> = (0..qs.len()).map(|i| ((i as u64 * 7919 + seed) % 101) as f64).collect();
        let n_r = 1 + (seed as usize % qs.len());
        let mode = if kde { Replication::Kde } else { Replication::Uniform };
        let out = resample(&qs, &energies, n_r, n_s, Some(0.5), mode);
        prop_assert_eq!(out.len(), n_s);
        let mut sorted = energies.clone();
        sorted.sort_by(f64::total_cmp);
        let cutoff = sorted[n_r - 1];
        for q in &out {
            let i = qs.iter().position(|x| x == q);
            prop_assert!(i.is_some());
            prop_assert!(qs.iter().enumerate().any(|(j, x)| x == q && energies[j] <= cutoff));
        }
    }

    #[test]
    fn apportion_hits_the_total(ws in prop::collection::vec(1e-6..10.0f64, 1..20), total in 0usize..500) {
        let c = apportion(&ws, total);
        prop_assert_eq!(c.iter().sum::<usize>(), total);
        let s: f64 = ws.iter().sum();
        for (w, n) in ws.iter().zip(&c) {
            prop_assert!((*n as f64 - w / s * total as f64).abs() < 1.0 + 1e-9);
        }
    }

    #[test]
    fn kde_density_is_positive_and_permutation_equivariant(qs in prop::collection::vec(prop::collection::vec(-2.0..2.0f64, 2), 1..20)) {
        let d = kde_density(&qs, 0.4);
        prop_assert!(d.iter().all(|x| *x > 0.0));
        let mut rev = qs.clone();
        rev.reverse();
        let mut dr = kde_density(&rev, 0.4);
        dr.reverse();
        for (a, b) in d.iter().zip(&dr) {
            prop_assert!((a - b).abs() <= 1e-12 * a.abs());
        }
    }
}

fn weight_model(kind: WeightingKind) -> AdcsModel {
    let cs = ConstraintSet::new(vec![
        Constraint::RelativePose { target: PoseSpec { quat: [0.0, 0.0, 1.0, 0.0], trans: [0.0, 0.0, 0.7] }, a: 0, b: 1 },
        Constraint::MidpointBox { c1: [-0.1, -0.05, 0.4], c2: [0.1, 0.05, 0.8] },
        Constraint::OrientationAxis { ee: 0, body_axis: [0.0, 0.0, 1.0], world_axis: [0.0, 0.0, -1.0] },
        Constraint::MidpointEq { target: [0.0, 0.0, 0.6] },
    ]);
    let cfg = ModelConfig { weighting: kind, cwt: CwtConfig { freeze_pe: true, ..Default::default() }, ..Default::default() };
    AdcsModel::new(cfg, &cs, NoiseSchedule::geometric(0.01, 1.0, 32).unwrap(), false, 1).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn composition_weights_form_a_distribution(e in prop::array::uniform4(0.0..50.0f64), pe in any::<u64>()) {
        let slots = [11, 4, 10, 3];
        for kind in [WeightingKind::Fixed, WeightingKind::Mlp, WeightingKind::Cwt] {
            let m = weight_model(kind);
            let (w, total) = m.compose(&e, &slots, &mut seeds::stream(pe, "pe")).unwrap();
            prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-9, "{kind:?}: {w:?}");
            prop_assert!(w.iter().all(|x| *x >= 0.0));
            let lo = e.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = e.iter().cloned().fold(0.0, f64::max);
            prop_assert!(total >= lo - 1e-9 && total <= hi + 1e-9);
        }
    }

    #[test]
    fn twist_vectors_round_trip(x in prop::array::uniform6(-5.0..5.0f64)) {
        let v = Vector6::from(x);
        prop_assert_eq!(Twist::from_vector6(&v).to_vector6(), v);
    }
}
