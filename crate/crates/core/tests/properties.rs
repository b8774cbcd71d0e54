use objflow_core::flow::{
    fd_risk_rate, ineq1_gap, ineq3_gap, risk_rate, ContextSpec, Task, DEFAULT_ETAS,
};
use objflow_core::grad::{step_gradient, step_loss};
use objflow_core::ingest::{build_mask, parse_log, quantile, write_log, TokenLog, TokenRecord};
use objflow_core::simplex::{softmax, softmax_jacobian_vec};
use objflow_core::{Logits, Objective, OneHot, Simplex, ThresholdInterval};
use proptest::prelude::*;

fn logits(max_len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-6.0f64..6.0, 2..=max_len)
}

fn simplex(v: usize) -> impl Strategy<Value = Simplex> {
    prop::collection::vec(1e-3f64..1.0, v).prop_map(|w| {
        let s: f64 = w.iter().sum();
        Simplex::new(w.into_iter().map(|x| x / s).collect()).unwrap()
    })
}

fn objective() -> impl Strategy<Value = Objective> {
    prop_oneof![
        Just(Objective::neg_log_p()),
        Just(Objective::log_one_minus_p()),
        (0.05f64..10.0).prop_map(|a| Objective::alpha(a).unwrap()),
        (1.0f64..4.0).prop_map(|k| Objective::neg_p_pow(k).unwrap()),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn softmax_is_shift_invariant(z in logits(12), c in -50.0f64..50.0) {
        let a = softmax(&Logits::new(z.clone()).unwrap());
        let b = softmax(&Logits::new(z.iter().map(|x| x + c).collect()).unwrap());
        for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
            prop_assert!((x - y).abs() < 1e-12);
        }
        prop_assert!((a.as_slice().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn jacobian_matches_finite_differences(
        v in prop::sample::select(vec![2usize, 5, 50]),
        seed in any::<u64>(),
    ) {
        use rand::Rng;
        let mut rng = objflow_core::simplex::seeded_rng(seed);
        let z: Vec<f64> = (0..v).map(|_| rng.random_range(-3.0..3.0)).collect();
        let m: Vec<f64> = (0..v).map(|_| rng.random_range(-1.0..1.0)).collect();
        let q = softmax(&Logits::new(z.clone()).unwrap());
        let jm = softmax_jacobian_vec(&q, &m).unwrap();
        // d/dz_k of m^T softmax(z) equals (J m)_k since J is symmetric
        let h = 1e-5;
        for k in 0..v {
            let at = |d: f64| {
                let mut zz = z.clone();
                zz[k] += d;
                let s = softmax(&Logits::new(zz).unwrap());
                s.as_slice().iter().zip(&m).map(|(a, b)| a * b).sum::<f64>()
            };
            let fd = (at(h) - at(-h)) / (2.0 * h);
            prop_assert!((fd - jm[k]).abs() < 1e-8, "k={} fd={} jm={}", k, fd, jm[k]);
        }
    }

    #[test]
    fn derivative_matches_finite_difference(f in objective(), p in 0.01f64..0.99) {
        let h = 1e-6;
        let fd = (f.eval(p + h).unwrap() - f.eval(p - h).unwrap()) / (2.0 * h);
        let d = f.deriv(p).unwrap();
        prop_assert!(d <= 0.0);
        prop_assert!((fd - d).abs() <= 1e-6 * d.abs().max(1.0), "{} at {}: {} vs {}", f.name(), p, fd, d);
    }

    #[test]
    fn weight_is_nonnegative(f in objective(), p in 1e-9f64..(1.0 - 1e-9)) {
        prop_assert!(f.weight(p).unwrap() >= 0.0);
    }

    #[test]
    fn argmax_side_follows_curvature(a in 0.01f64..10.0) {
        let f = Objective::alpha(a).unwrap();
        let m = f.argmax_weight(9_999).unwrap();
        prop_assert!((m - a / (a + 1.0)).abs() <= 1e-4 + 1e-12);
        if a <= 1.0 { prop_assert!(m <= 0.5 + 1e-4) } else { prop_assert!(m >= 0.5 - 1e-4) }
    }

    #[test]
    fn gradient_sums_to_zero_and_points_to_target(f in objective(), z in logits(20), y in any::<prop::sample::Index>()) {
        let v = z.len();
        let y = OneHot::new(y.index(v), v).unwrap();
        let g = step_gradient(&f, &Logits::new(z).unwrap(), &y, None).unwrap();
        let s: f64 = g.as_slice().iter().sum();
        prop_assert!(s.abs() < 1e-9 * g.as_slice().iter().map(|x| x.abs()).sum::<f64>().max(1.0));
        prop_assert!(g.as_slice()[y.index()] >= 0.0);
        for (k, &x) in g.as_slice().iter().enumerate() {
            if k != y.index() { prop_assert!(x <= 0.0); }
        }
    }

    #[test]
    fn mask_is_all_or_nothing(f in objective(), z in logits(10), lo in 0.0f64..1.0, w in 0.0f64..1.0) {
        let v = z.len();
        let hi = (lo + w).min(1.0);
        let i = ThresholdInterval::new(lo, hi).unwrap();
        let y = OneHot::new(0, v).unwrap();
        let l = Logits::new(z).unwrap();
        let p = softmax(&l).as_slice()[0];
        let masked = step_gradient(&f, &l, &y, Some(&i)).unwrap();
        let plain = step_gradient(&f, &l, &y, None).unwrap();
        if i.contains(p) {
            prop_assert_eq!(masked, plain);
        } else {
            prop_assert!(masked.is_zero());
            prop_assert_eq!(step_loss(&f, &l, &y, Some(&i)).unwrap(), 0.0);
        }
    }

    #[test]
    fn inequality_gaps_are_nonnegative(q in (2usize..=8).prop_flat_map(simplex), j in any::<prop::sample::Index>(), k in 1usize..8) {
        let v = q.len();
        let j = j.index(v);
        prop_assert!(ineq1_gap(&q, j).unwrap() >= -1e-12);
        let i = (j + 1 + k % (v - 1).max(1)) % v;
        if i != j {
            if let Ok(g) = ineq3_gap(&q, i, j) {
                prop_assert!(g >= -1e-12);
            }
        }
    }
}

fn task_strategy() -> impl Strategy<Value = Task> {
    prop::sample::select(vec![2usize, 4, 10]).prop_flat_map(|v| {
        prop::collection::vec((simplex(v), 0..v, 0..v, 0.1f64..1.0), 1..5).prop_map(move |rows| {
            let total: f64 = rows.iter().map(|r| r.3).sum();
            let contexts = rows
                .into_iter()
                .map(|(q0, y_star, y_tilde, w)| ContextSpec { weight: w / total, q0, y_star, y_tilde })
                .collect();
            Task::new(v, contexts).unwrap()
        })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn analytic_rate_matches_finite_difference(task in task_strategy(), f in objective()) {
        let a = risk_rate(&task, &f).unwrap();
        let fd = fd_risk_rate(&task, &f, &DEFAULT_ETAS).unwrap();
        prop_assert!((a - fd).abs() <= 1e-4, "{} vs {}", a, fd);
    }
}

fn token_log() -> impl Strategy<Value = Vec<TokenRecord>> {
    prop::collection::vec((0u8..4, 0.0f64..=1.0), 1..60).prop_map(|rows| {
        let mut counters = [0u64; 4];
        rows.into_iter()
            .map(|(s, prob)| {
                let idx = counters[s as usize];
                counters[s as usize] += 1;
                TokenRecord { sample_id: format!("s{s}"), token_index: idx, prob, token_id: None }
            })
            .collect()
    })
}

proptest! {
    #[test]
    fn log_round_trips(records in token_log()) {
        let log = TokenLog::from_records(records).unwrap();
        let mut buf = Vec::new();
        write_log(&log, &mut buf).unwrap();
        let back = parse_log(buf.as_slice()).unwrap();
        prop_assert_eq!(back, log);
    }

    #[test]
    fn quantiles_ignore_order_and_are_monotone(records in token_log(), perm_seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        let log = TokenLog::from_records(records.clone()).unwrap();
        let mut shuffled = records;
        shuffled.shuffle(&mut objflow_core::simplex::seeded_rng(perm_seed));
        let other = TokenLog::from_records(shuffled).unwrap();
        let mut prev = f64::NEG_INFINITY;
        for p in [1.0, 10.0, 25.0, 50.0, 75.0, 90.0, 100.0] {
            let a = quantile(&log, p).unwrap();
            prop_assert_eq!(a, quantile(&other, p).unwrap());
            prop_assert!(a >= prev);
            prev = a;
        }
    }

    #[test]
    fn kept_fraction_tracks_percentile(records in token_log(), p in 1.0f64..=100.0) {
        let log = TokenLog::from_records(records).unwrap();
        let n = log.n_tokens() as f64;
        let q = quantile(&log, p).unwrap();
        let m = build_mask(&log, &ThresholdInterval::new(0.0, q).unwrap());
        prop_assert!(m.kept_fraction >= p / 100.0 - 1e-12);
        prop_assert_eq!(m.keep.iter().filter(|&&k| k).count() as f64 / n, m.kept_fraction);
    }
}
