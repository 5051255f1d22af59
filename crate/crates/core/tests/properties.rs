use multiwave::cohort::StratumSpec;
use multiwave::forecast::predict_stopping_rate;
use multiwave::intervals::{bayes_interval, lai_interval, lai_log_statistic};
use multiwave::raking::{
    effective_counts, raking_weights, weighted_margins, weighted_ppv, RakingConfig, RakingFactor,
};
use multiwave::rng::rng_for;
use multiwave::sampling::{
    allocate_neyman, allocate_random, largest_remainder, AllocationHistory, Reservoir,
    SamplingPolicy, Strategy as Allocation,
};
use proptest::prelude::*;

fn counts_and_labels() -> impl Strategy<Value = (u32, u32)> {
    (1u32..3000).prop_flat_map(|k| (Just(k), 0..=k))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn every_covariate_in_range_has_one_stratum(x in 0.0f64..=0.5) {
        let spec = StratumSpec::frailty();
        let s = spec.stratify(x).unwrap();
        let b = spec.boundaries();
        prop_assert!(s < spec.m());
        prop_assert!(b[s] <= x);
        prop_assert!(x < b[s + 1] || (s + 1 == spec.m() && x == b[s + 1]));
    }

    #[test]
    fn covariates_outside_the_range_are_rejected(x in 0.5001f64..10.0) {
        prop_assert!(StratumSpec::frailty().stratify(x).is_err());
        prop_assert!(StratumSpec::frailty().stratify(-x).is_err());
    }

    #[test]
    fn lai_bounds_sit_on_the_alpha_level((k, s) in counts_and_labels()) {
        let (k, s) = (f64::from(k), f64::from(s));
        let band = lai_interval(k, s, 0.05).unwrap();
        let target = 0.05f64.ln();
        prop_assert!(band.lower <= band.point && band.point <= band.upper);
        if s > 0.0 {
            prop_assert!((lai_log_statistic(k, s, band.lower) - target).abs() < 1e-8);
        }
        if s < k {
            prop_assert!((lai_log_statistic(k, s, band.upper) - target).abs() < 1e-8);
        }
    }

    #[test]
    fn bands_shrink_with_four_times_the_data(k in 10u32..1500, frac in 0.0f64..=1.0) {
        let s = (f64::from(k) * frac).round();
        let k = f64::from(k);
        for f in [lai_interval, bayes_interval] {
            let small = f(k, s, 0.05).unwrap();
            let big = f(4.0 * k, 4.0 * s, 0.05).unwrap();
            prop_assert!(big.width() < small.width());
        }
    }

    #[test]
    fn bayes_band_is_inside_the_unit_interval((k, s) in counts_and_labels()) {
        let b = bayes_interval(f64::from(k), f64::from(s), 0.05).unwrap();
        prop_assert!(0.0 < b.lower && b.lower < b.upper && b.upper < 1.0);
    }

    #[test]
    fn largest_remainder_hits_the_total(
        targets in prop::collection::vec(0.0f64..50.0, 1..8),
    ) {
        let caps: Vec<usize> = targets.iter().map(|t| t.ceil() as usize + 3).collect();
        let total = (targets.iter().sum::<f64>().round() as usize).min(caps.iter().sum());
        let out = largest_remainder(&targets, total, &caps);
        prop_assert_eq!(out.iter().sum::<usize>(), total);
        for (o, c) in out.iter().zip(&caps) {
            prop_assert!(o <= c);
        }
    }

    #[test]
    fn random_allocation_respects_the_reservoir(
        counts in prop::collection::vec(0usize..200, 1..7),
        b in 1usize..500,
        seed in any::<u64>(),
    ) {
        let res = Reservoir::new(counts.clone());
        let a = allocate_random(b, &res, &mut rng_for(seed, &[]));
        prop_assert_eq!(a.total(), b.min(res.total()));
        for (x, c) in a.counts.iter().zip(&counts) {
            prop_assert!(x <= c);
        }
    }

    #[test]
    fn neyman_conserves_the_batch(
        strata in prop::collection::vec((1usize..400, 0.0f64..0.6, 0.0f64..200.0), 2..7),
        b in 1usize..300,
        min in 0usize..6,
    ) {
        let reservoir: Vec<usize> = strata.iter().map(|t| t.0).collect();
        let sds: Vec<f64> = strata.iter().map(|t| t.1).collect();
        let sizes: Vec<f64> = strata.iter().map(|t| t.2).collect();
        let m = reservoir.len();
        let res = Reservoir::new(reservoir.clone());
        let mut policy = SamplingPolicy::new(Allocation::Neyman, b);
        policy.min_per_stratum = min;
        let history = AllocationHistory::from_waves(vec![vec![1; m]]);
        let a = allocate_neyman(&history, b, &sizes, &sds, &vec![1.0 / m as f64; m], &res, &policy)
            .unwrap();
        prop_assert_eq!(a.total(), b.min(res.total()));
        for (x, c) in a.counts.iter().zip(&reservoir) {
            prop_assert!(x <= c);
        }
        // When the floors fit in the batch, every open stratum gets its floor.
        let floors: usize = reservoir.iter().map(|&c| c.min(min)).sum();
        if floors <= b {
            for (x, c) in a.counts.iter().zip(&reservoir) {
                prop_assert!(*x >= min.min(*c));
            }
        }
    }

    #[test]
    fn effective_size_never_exceeds_the_sample(
        rows in prop::collection::vec((any::<bool>(), 0.01f64..10.0), 1..300),
    ) {
        let labels: Vec<bool> = rows.iter().map(|r| r.0).collect();
        let weights: Vec<f64> = rows.iter().map(|r| r.1).collect();
        let (k, s) = effective_counts(&labels, &weights).unwrap();
        prop_assert!(k <= labels.len() as f64 + 1e-12);
        prop_assert!(k >= 1.0 - 1e-12);
        prop_assert!((0.0..=k).contains(&s));
    }

    #[test]
    fn weighted_ppv_ignores_weight_scale(
        rows in prop::collection::vec((any::<bool>(), 0.01f64..10.0), 1..300),
        c in 1e-3f64..1e3,
    ) {
        let labels: Vec<bool> = rows.iter().map(|r| r.0).collect();
        let weights: Vec<f64> = rows.iter().map(|r| r.1).collect();
        let scaled: Vec<f64> = weights.iter().map(|w| w * c).collect();
        let a = weighted_ppv(&labels, &weights).unwrap();
        let b = weighted_ppv(&labels, &scaled).unwrap();
        prop_assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn raking_weights_are_capped_with_mean_one(
        cats in prop::collection::vec(0usize..4, 40..400),
        raw in prop::collection::vec(0.05f64..1.0, 4),
    ) {
        prop_assume!((0..4).all(|c| cats.contains(&c)));
        let total: f64 = raw.iter().sum();
        let population: Vec<f64> = raw.iter().map(|r| r / total).collect();
        let cfg = RakingConfig::default();
        let factor = RakingFactor { categories: cats.clone(), population: population.clone() };
        let out = raking_weights(&[factor], &cfg).unwrap();
        let n = out.weights.len() as f64;
        prop_assert!((out.weights.iter().sum::<f64>() / n - 1.0).abs() < 1e-9);
        prop_assert!(out.weights.iter().all(|&w| w > 0.0 && w <= cfg.weight_cap + 1e-9));
        if out.raked_factors == [0] && out.converged {
            let got = weighted_margins(&cats, &out.weights, 4);
            for (g, p) in got.iter().zip(&population) {
                prop_assert!((g - p).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn rate_is_zero_exactly_when_the_band_is_narrow_enough(
        w in 0.001f64..1.0,
        l in 0.001f64..1.0,
        n in 1.0f64..5000.0,
        b in 1usize..200,
    ) {
        let batches = predict_stopping_rate(w, n, l, b).unwrap();
        prop_assert_eq!(batches == 0, w <= l || n * ((w / l).powi(2) - 1.0) <= 1e-9 * b as f64);
    }

    #[test]
    fn halving_the_target_costs_at_least_four_times_as_much(
        w in 0.05f64..1.0,
        ratio in 1.01f64..20.0,
        n in 10.0f64..5000.0,
        b in 1usize..200,
    ) {
        let l = w / ratio;
        let once = predict_stopping_rate(w, n, l, b).unwrap();
        let twice = predict_stopping_rate(w, n, l / 2.0, b).unwrap();
        prop_assert!(twice + 3 >= 4 * once);
        prop_assert!(twice >= once);
    }
}
