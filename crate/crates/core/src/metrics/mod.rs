//! Forecast verification: MSE, thresholded CSI, ensemble CRPS, spread-skill ratio
//! and a perceptual score, per lead time and averaged over the horizon.

mod report;
mod scores;

pub use report::{
    evaluate_rollout, render_csv, score_into, threshold_label, AveragedMetrics, Evaluator, Forecast,
    LeadMetrics, MetricConfig, MetricReport, ThresholdScore, ABSENT,
};
pub use scores::{crps_ensemble, csi, mae, mse, ssr, ContingencyCounts, SpreadSkill};

#[cfg(test)]
mod proptests {
    use super::*;
    use crate::data::NormalizationSpec;
    use ndarray::{Array1, Array2, Axis};
    use proptest::prelude::*;

    fn brute_crps(members: &Array2<f32>, obs: &Array1<f32>) -> f64 {
        let x = members.nrows() as f64;
        let mut total = 0.0;
        for p in 0..obs.len() {
            let col: Vec<f64> = members.column(p).iter().map(|&v| v as f64).collect();
            let y = obs[p] as f64;
            let skill: f64 = col.iter().map(|v| (v - y).abs()).sum::<f64>() / x;
            let mut pair = 0.0;
            for a in &col {
                for b in &col {
                    pair += (a - b).abs();
                }
            }
            total += skill - pair / (2.0 * x * x);
        }
        total / obs.len() as f64
    }

    fn ensemble() -> impl Strategy<Value = (Array2<f32>, Array1<f32>)> {
        (1usize..6, 1usize..10).prop_flat_map(|(x, n)| {
            (
                proptest::collection::vec(0.0f32..1.0, x * n),
                proptest::collection::vec(0.0f32..1.0, n),
            )
                .prop_map(move |(m, o)| (Array2::from_shape_vec((x, n), m).unwrap(), Array1::from(o)))
        })
    }

    proptest! {
        #[test]
        fn crps_matches_double_sum((m, o) in ensemble()) {
            let got = crps_ensemble(m.view(), o.view(), false).unwrap();
            let want = brute_crps(&m, &o);
            prop_assert!((got - want).abs() <= 1e-12 + 1e-9 * want.abs());
            prop_assert!(got >= -1e-12);
        }

        #[test]
        fn duplicate_member_reweights((m, o) in ensemble(), pick in 0usize..6) {
            let pick = pick % m.nrows();
            let mut grown = m.clone();
            grown.push_row(m.row(pick)).unwrap();
            let got = crps_ensemble(grown.view(), o.view(), false).unwrap();
            prop_assert!((got - brute_crps(&grown, &o)).abs() <= 1e-9);
        }

        #[test]
        fn member_order_is_irrelevant((m, o) in ensemble()) {
            let mut rev = m.clone();
            rev.invert_axis(Axis(0));
            let a = crps_ensemble(m.view(), o.view(), false).unwrap();
            let b = crps_ensemble(rev.view(), o.view(), false).unwrap();
            prop_assert!((a - b).abs() <= 1e-12);
            prop_assert_eq!(ssr(m.view(), o.view()).unwrap().is_some(), ssr(rev.view(), o.view()).unwrap().is_some());
        }

        #[test]
        fn single_member_crps_is_mae(o in proptest::collection::vec(0.0f32..1.0, 1..20), d in proptest::collection::vec(-0.5f32..0.5, 20)) {
            let obs = Array1::from(o.clone());
            let member: Array1<f32> = o.iter().zip(&d).map(|(a, b)| (a + b).clamp(0.0, 1.0)).collect();
            let m = member.clone().insert_axis(Axis(0));
            let got = crps_ensemble(m.view(), obs.view(), false).unwrap();
            prop_assert!((got - mae(member.view(), obs.view()).unwrap()).abs() <= 1e-12);
        }

        #[test]
        fn crps_zero_iff_members_equal_obs((m, o) in ensemble()) {
            let exact = o.clone().insert_axis(Axis(0)).broadcast(m.raw_dim()).unwrap().to_owned();
            prop_assert_eq!(crps_ensemble(exact.view(), o.view(), false).unwrap(), 0.0);
            let v = crps_ensemble(m.view(), o.view(), false).unwrap();
            if m != exact {
                prop_assert!(v > 0.0);
            }
        }

        #[test]
        fn csi_commutes_with_monotone_maps(
            p in proptest::collection::vec(0.0f64..60.0, 16),
            t in proptest::collection::vec(0.0f64..60.0, 16),
            thr in 0.5f64..40.0,
        ) {
            let direct = ContingencyCounts::from_values(p.iter().copied(), t.iter().copied(), thr);
            let g = |v: f64| (1.0 + v).ln() * 3.0 + 7.0;
            let mapped = ContingencyCounts::from_values(p.iter().map(|&v| g(v)), t.iter().map(|&v| g(v)), g(thr));
            prop_assert_eq!(direct, mapped);
            prop_assert_eq!(direct.total(), 16);
            // the normalization is one such map
            let spec = NormalizationSpec::analytic(100.0);
            let norm = |v: &Vec<f64>| Array1::from_iter(v.iter().map(|&r| spec.forward_value(r).unwrap() as f32));
            let via = ContingencyCounts::from_normalized(norm(&p).view(), norm(&t).view(), thr, &spec).unwrap();
            let close = |a: &Vec<f64>| a.iter().all(|v| (spec.inverse_value(spec.forward_value(*v).unwrap() as f32 as f64).unwrap() >= thr) == (*v >= thr));
            if close(&p) && close(&t) {
                prop_assert_eq!(via, direct);
            }
        }

        #[test]
        fn report_is_sample_order_invariant(seed in 0u64..1000) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let spec = NormalizationSpec::analytic(100.0);
            let samples: Vec<(ndarray::Array5<f32>, ndarray::Array4<f32>)> = (0..3)
                .map(|_| {
                    (
                        ndarray::Array5::from_shape_simple_fn((3, 2, 1, 4, 4), || rng.random::<f32>()),
                        ndarray::Array4::from_shape_simple_fn((2, 1, 4, 4), || rng.random::<f32>()),
                    )
                })
                .collect();
            let run = |order: &[usize]| {
                let mut e = Evaluator::new("m", MetricConfig::default(), &spec, None).unwrap();
                for &i in order {
                    e.add_ensemble(samples[i].0.view(), samples[i].1.view()).unwrap();
                }
                e.finish(None).unwrap()
            };
            let a = run(&[0, 1, 2]);
            let b = run(&[2, 0, 1]);
            prop_assert!((a.averaged.mse - b.averaged.mse).abs() < 1e-12);
            prop_assert!((a.averaged.crps.unwrap() - b.averaged.crps.unwrap()).abs() < 1e-12);
            prop_assert_eq!(&a.averaged.csi, &b.averaged.csi);
            match (a.averaged.ssr, b.averaged.ssr) {
                (Some(x), Some(y)) => prop_assert!((x - y).abs() < 1e-12),
                (x, y) => prop_assert_eq!(x, y),
            }
        }
    }
}
