use proptest::prelude::*;
use rand::Rng;
use renalseq_core::eval::{
    auc_pairwise, auc_trapezoid, bootstrap_auc_ci, confusion_at, confusion_counts,
    resample_indices, roc_points,
};
use renalseq_core::gru::{bce_loss, forward, loss_and_gradient};
use renalseq_core::{rng, ModelParams, ScoredSet};

/// Relative error with the denominator floored at 1e-3, where central
/// differences at ε = 1e-5 carry ~1e-10 absolute error of their own.
fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3)
}

fn max_gradient_error(hidden: usize, steps: usize, seed: u64) -> f64 {
    let input = 6;
    let mut rng = rng::seeded(seed);
    let mut p = ModelParams::zeros(hidden, input, 2);
    for t in p.tensors_mut() {
        for v in t {
            *v = rng.random_range(-1.0..1.0);
        }
    }
    let x: Vec<f64> = (0..steps * input)
        .map(|_| f64::from(u8::from(rng.random_bool(0.5))))
        .collect();
    let statics = [
        rng.random_range(0.0..1.0),
        f64::from(u8::from(rng.random_bool(0.5))),
    ];
    let label = u8::from(rng.random_bool(0.5));
    let (_, grad) = loss_and_gradient(&p, &x, &statics, label).unwrap();
    let loss = |q: &ModelParams| bce_loss(forward(q, &x, &statics).unwrap().0, label);
    let eps = 1e-5;
    let mut worst: f64 = 0.0;
    for (ti, g) in grad.tensors().iter().enumerate() {
        for (j, &analytic) in g.iter().enumerate() {
            let mut plus = p.clone();
            plus.tensors_mut()[ti][j] += eps;
            let mut minus = p.clone();
            minus.tensors_mut()[ti][j] -= eps;
            let numeric = (loss(&plus) - loss(&minus)) / (2.0 * eps);
            worst = worst.max(relative_error(analytic, numeric));
        }
    }
    worst
}

fn scored_with_ties() -> impl Strategy<Value = ScoredSet> {
    (2usize..=50)
        .prop_flat_map(|n| {
            (
                prop::collection::vec(0u8..8, n),
                prop::collection::vec(any::<bool>(), n),
                0..n,
                0..n,
            )
        })
        .prop_map(|(levels, labels, i, j)| {
            let mut labels: Vec<u8> = labels.into_iter().map(u8::from).collect();
            let n = labels.len();
            labels[i] = 1;
            labels[if i == j { (j + 1) % n } else { j }] = 0;
            let scores = levels.iter().map(|&l| f64::from(l) / 7.0).collect();
            ScoredSet::from_scores(scores, labels).unwrap()
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(20))]

    #[test]
    fn bptt_matches_central_differences(hidden in prop::sample::select(vec![2usize, 4]), steps in 3usize..=6, seed in any::<u64>()) {
        let err = max_gradient_error(hidden, steps, seed);
        prop_assert!(err < 1e-6, "max relative error {err:e}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn trapezoid_auc_equals_pairwise(s in scored_with_ties()) {
        let a = auc_trapezoid(&s).unwrap();
        let b = auc_pairwise(&s).unwrap();
        prop_assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
    }

    #[test]
    fn roc_is_monotone_from_origin_to_corner(s in scored_with_ties()) {
        let c = roc_points(&s).unwrap();
        let pts = &c.points;
        prop_assert_eq!((pts[0].fpr, pts[0].tpr), (0.0, 0.0));
        let last = pts.last().unwrap();
        prop_assert_eq!((last.fpr, last.tpr), (1.0, 1.0));
        for w in pts.windows(2) {
            prop_assert!(w[0].fpr <= w[1].fpr && w[0].tpr <= w[1].tpr);
            prop_assert!(w[0].threshold > w[1].threshold);
        }
    }

    #[test]
    fn confusion_matches_brute_force(s in scored_with_ties(), threshold in 0.0f64..1.0) {
        let c = confusion_at(&s, threshold, 0, 1).unwrap();
        let mut expected = [0u64; 4];
        for (score, label) in s.scores.iter().zip(&s.labels) {
            let predicted = *score >= threshold;
            match (predicted, *label) {
                (true, 1) => expected[0] += 1,
                (true, _) => expected[1] += 1,
                (false, 0) => expected[2] += 1,
                (false, _) => expected[3] += 1,
            }
        }
        prop_assert_eq!([c.tp, c.fp, c.tn, c.fn_], expected);
        prop_assert_eq!(c.total() as usize, s.len());
        prop_assert_eq!(confusion_counts(&s.scores, &s.labels, threshold), expected);
    }
}

#[test]
fn bootstrap_is_reproducible_and_brackets_the_point() {
    let mut rng = rng::seeded(3);
    let labels: Vec<u8> = (0..200).map(|i| u8::from(i % 3 == 0)).collect();
    let scores: Vec<f64> = labels
        .iter()
        .map(|&l| f64::from(l) * 0.3 + rng.random_range(0.0..1.0))
        .collect();
    let s = ScoredSet::from_scores(scores, labels).unwrap();
    let a = bootstrap_auc_ci(&s, 2000, 11).unwrap();
    let b = bootstrap_auc_ci(&s, 2000, 11).unwrap();
    assert_eq!(a.resamples, 2000);
    assert_eq!(a.lo.to_bits(), b.lo.to_bits());
    assert_eq!(a.hi.to_bits(), b.hi.to_bits());
    assert!(a.lo < a.point && a.point < a.hi);
    let c = bootstrap_auc_ci(&s, 2000, 12).unwrap();
    assert_ne!((a.lo, a.hi), (c.lo, c.hi));
}

#[test]
fn bootstrap_fails_when_most_resamples_lack_a_class() {
    let mut labels = vec![0u8; 40];
    labels[0] = 1;
    let scores = (0..40).map(f64::from).collect();
    let s = ScoredSet::from_scores(scores, labels).unwrap();
    assert!(bootstrap_auc_ci(&s, 500, 1).is_err());
}

fn random_model(hidden: usize, input: usize, rng: &mut impl Rng) -> ModelParams {
    let mut p = ModelParams::zeros(hidden, input, 2);
    for t in p.tensors_mut() {
        for v in t {
            *v = rng.random_range(-2.0..2.0);
        }
    }
    p
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn gates_stay_in_their_ranges(seed in any::<u64>(), steps in 1usize..12) {
        let mut rng = rng::seeded(seed);
        let p = random_model(5, 4, &mut rng);
        let x: Vec<f64> = (0..steps * 4).map(|_| f64::from(u8::from(rng.random_bool(0.5)))).collect();
        let (_, cache) = forward(&p, &x, &[0.5, 1.0]).unwrap();
        prop_assert!(cache.z.iter().chain(&cache.r).all(|&g| g > 0.0 && g < 1.0));
        prop_assert!(cache.candidate.iter().all(|&c| c > -1.0 && c < 1.0));
        prop_assert!(cache.hidden.iter().all(|&h| h > -1.0 && h < 1.0));
        let (again, _) = forward(&p, &x, &[0.5, 1.0]).unwrap();
        prop_assert_eq!(again.to_bits(), cache.logit.to_bits());
    }

    #[test]
    fn auc_and_roc_ignore_strictly_increasing_transforms(s in scored_with_ties(), scale in 0.1f64..10.0, shift in -5.0f64..5.0) {
        let transformed: Vec<f64> = s.scores.iter().map(|&x| (scale * x + shift).exp()).collect();
        let t = ScoredSet::from_scores(transformed, s.labels.clone()).unwrap();
        prop_assert_eq!(auc_trapezoid(&s).unwrap(), auc_trapezoid(&t).unwrap());
        let rates = |c: renalseq_core::RocCurve| c.points.iter().map(|p| (p.fpr, p.tpr)).collect::<Vec<_>>();
        prop_assert_eq!(rates(roc_points(&s).unwrap()), rates(roc_points(&t).unwrap()));
    }
}

#[test]
fn head_loss_falls_under_small_steps_with_the_gru_frozen() {
    let mut rng = rng::seeded(17);
    let mut p = random_model(4, 3, &mut rng);
    let batch: Vec<(Vec<f64>, [f64; 2], u8)> = (0..16)
        .map(|_| {
            let x = (0..5 * 3)
                .map(|_| f64::from(u8::from(rng.random_bool(0.4))))
                .collect();
            (
                x,
                [rng.random_range(0.0..1.0), 0.0],
                u8::from(rng.random_bool(0.5)),
            )
        })
        .collect();
    let loss = |p: &ModelParams| -> f64 {
        batch
            .iter()
            .map(|(x, s, y)| bce_loss(forward(p, x, s).unwrap().0, *y))
            .sum::<f64>()
            / 16.0
    };
    let mut previous = loss(&p);
    for _ in 0..200 {
        let mut step = p.zeros_like();
        for (x, s, y) in &batch {
            let g = loss_and_gradient(&p, x, s, *y).unwrap().1;
            step.head
                .w
                .iter_mut()
                .zip(&g.head.w)
                .for_each(|(a, b)| *a += b / 16.0);
            step.head.b += g.head.b / 16.0;
        }
        p.add_scaled(&step, -0.05);
        let current = loss(&p);
        assert!(current <= previous, "{previous} -> {current}");
        previous = current;
    }
}

#[test]
fn point_lies_inside_its_interval_in_nearly_every_fuzz_case() {
    let mut rng = rng::seeded(23);
    let cases = 200;
    let mut inside = 0;
    for case in 0..cases {
        let n = rng.random_range(40..120);
        let signal = rng.random_range(0.0..1.5);
        let labels: Vec<u8> = (0..n)
            .map(|i| u8::from(i % 2 == 0 || rng.random_bool(0.3)))
            .collect();
        let scores = labels
            .iter()
            .map(|&l| f64::from(l) * signal + rng.random_range(0.0..1.0))
            .collect();
        let s = ScoredSet::from_scores(scores, labels).unwrap();
        let ci = bootstrap_auc_ci(&s, 400, case).unwrap();
        inside += usize::from(ci.contains(ci.point));
    }
    assert!(inside * 100 >= cases as usize * 99, "{inside}/{cases}");
}

/// Six patients, so all 6⁶ resamples can be enumerated.
#[test]
fn small_bootstrap_matches_enumeration() {
    let scores = vec![0.9, 0.7, 0.6, 0.6, 0.3, 0.1];
    let labels = vec![1u8, 0, 1, 0, 1, 0];
    let s = ScoredSet::from_scores(scores.clone(), labels.clone()).unwrap();
    let pair_auc = |idx: &[usize]| -> Option<f64> {
        let (mut wins, mut pairs) = (0.0, 0.0);
        for &i in idx {
            for &j in idx {
                if labels[i] == 1 && labels[j] == 0 {
                    pairs += 1.0;
                    wins += if scores[i] > scores[j] {
                        1.0
                    } else if scores[i] == scores[j] {
                        0.5
                    } else {
                        0.0
                    };
                }
            }
        }
        (pairs > 0.0).then(|| wins / pairs)
    };

    let resamples = 200;
    let ci = bootstrap_auc_ci(&s, resamples, 99).unwrap();
    let mut drawn: Vec<f64> = (0..resamples)
        .filter_map(|b| pair_auc(&resample_indices(6, 99, b)))
        .collect();
    assert_eq!(drawn.len() + ci.skipped, resamples);
    drawn.sort_by(f64::total_cmp);
    let pct = |q: f64| {
        let h = (drawn.len() - 1) as f64 * q;
        let k = h.floor() as usize;
        drawn[k] + (h - k as f64) * (drawn[(k + 1).min(drawn.len() - 1)] - drawn[k])
    };
    assert!(
        (ci.lo - pct(0.025)).abs() < 1e-12,
        "{} vs {}",
        ci.lo,
        pct(0.025)
    );
    assert!(
        (ci.hi - pct(0.975)).abs() < 1e-12,
        "{} vs {}",
        ci.hi,
        pct(0.975)
    );

    // exact bootstrap distribution over all 46656 ordered resamples
    let mut exact = Vec::new();
    let mut idx = [0usize; 6];
    for code in 0..6usize.pow(6) {
        let mut c = code;
        for k in &mut idx {
            *k = c % 6;
            c /= 6;
        }
        if let Some(a) = pair_auc(&idx) {
            exact.push(a);
        }
    }
    exact.sort_by(f64::total_cmp);
    let cdf = |v: &[f64], x: f64| v.partition_point(|&a| a <= x) as f64 / v.len() as f64;
    let ks = exact
        .iter()
        .chain(&drawn)
        .map(|&x| (cdf(&exact, x) - cdf(&drawn, x)).abs())
        .fold(0.0, f64::max);
    // 1% critical value of the one-sample KS statistic at n = 200 is about 0.115
    assert!(ks < 0.115, "KS distance {ks}");
    let skip_rate = 1.0 - exact.len() as f64 / 46656.0;
    assert!((ci.skipped as f64 / resamples as f64 - skip_rate).abs() < 0.05);
}
