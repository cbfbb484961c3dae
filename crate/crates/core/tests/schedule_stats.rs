use dyntok::rng::SeedRng;
use dyntok::schedule::{plan_epoch, TokenSchedule};
use num_rational::Ratio;
use proptest::prelude::*;
use statrs::distribution::{ChiSquared, ContinuousCDF};

fn default_schedule() -> TokenSchedule {
    TokenSchedule::new(&[64, 144, 256], &[0.2, 0.3, 0.5]).unwrap()
}

fn frequencies(s: &TokenSchedule, draws: usize, seed: u64) -> Vec<usize> {
    let mut rng = SeedRng::new(seed);
    let mut hits = vec![0; s.counts().len()];
    for _ in 0..draws {
        let n = s.sample(&mut rng);
        hits[s.counts().iter().position(|&c| c == n).unwrap()] += 1;
    }
    hits
}

#[test]
fn empirical_frequencies_within_one_point() {
    let s = default_schedule();
    let hits = frequencies(&s, 100_000, 20_240_101);
    for (h, p) in hits.iter().zip(s.probs()) {
        assert!((*h as f64 / 1e5 - p).abs() <= 0.01, "{hits:?}");
    }
}

fn chi_square_accepts(s: &TokenSchedule, seed: u64) -> bool {
    let draws = 100_000;
    let hits = frequencies(s, draws, seed);
    let (mut stat, mut df) = (0.0, 0usize);
    for (h, p) in hits.iter().zip(s.probs()) {
        if *p == 0.0 {
            assert_eq!(*h, 0);
            continue;
        }
        let e = p * draws as f64;
        stat += (*h as f64 - e).powi(2) / e;
        df += 1;
    }
    if df < 2 {
        return true;
    }
    let critical = ChiSquared::new((df - 1) as f64).unwrap().inverse_cdf(1.0 - 0.001);
    stat < critical
}

#[test]
fn chi_square_goodness_of_fit() {
    let schedules = [
        default_schedule(),
        TokenSchedule::from_ratios(&[64, 144, 256], &[5, 3, 2]).unwrap(),
        TokenSchedule::from_ratios(&[64, 144, 256], &[1, 1, 1]).unwrap(),
        TokenSchedule::from_ratios(&[1, 4, 9, 16, 25], &[1, 0, 7, 2, 90]).unwrap(),
    ];
    for (i, s) in schedules.iter().enumerate() {
        assert!(chi_square_accepts(s, 7_700 + i as u64), "schedule {i}");
    }
}

#[test]
fn plan_frequencies_and_independence() {
    let s = default_schedule();
    let plan = plan_epoch(&s, 10_000, 99).unwrap();
    for (&n, &p) in s.counts().iter().zip(s.probs()) {
        let f = plan.counts.iter().filter(|&&c| c == n).count() as f64 / 1e4;
        assert!((f - p).abs() <= 0.015);
    }
    let xs: Vec<f64> = plan.counts.iter().map(|&c| c as f64).collect();
    let mean = xs.iter().sum::<f64>() / xs.len() as f64;
    let var: f64 = xs.iter().map(|x| (x - mean).powi(2)).sum();
    let cov: f64 = xs.windows(2).map(|w| (w[0] - mean) * (w[1] - mean)).sum();
    assert!((cov / var).abs() < 0.05, "lag-1 autocorrelation {}", cov / var);
    assert!(plan.counts.iter().all(|c| s.counts().contains(c)));
}

#[test]
fn degenerate_schedules_are_exact() {
    let s = TokenSchedule::fixed(144).unwrap();
    assert!(plan_epoch(&s, 5_000, 1).unwrap().counts.iter().all(|&c| c == 144));
    let s = TokenSchedule::from_ratios(&[64, 144, 256], &[0, 0, 1]).unwrap();
    assert!(plan_epoch(&s, 5_000, 2).unwrap().counts.iter().all(|&c| c == 256));
}

#[test]
fn thousand_batch_token_total_near_expectation() {
    let plan = plan_epoch(&default_schedule(), 1000, 3).unwrap();
    let exact = plan.total_tokens(8);
    assert_eq!(exact, plan.counts.iter().map(|&n| 8 * n as u64).sum::<u64>());
    // 1000 batches of 8: expectation 1,472,000; sd of the sum is 8·√1000·σ_N ≈ 19,000
    assert!((exact as f64 - 1_472_000.0).abs() < 4.0 * 19_000.0, "{exact}");
}

#[test]
fn exact_expectations_for_the_ablation_proportions() {
    let e = |w: &[u64]| TokenSchedule::from_ratios(&[64, 144, 256], w).unwrap().expected_tokens_exact();
    assert_eq!(e(&[2, 3, 5]), Ratio::from_integer(184));
    assert_eq!(e(&[5, 3, 2]), Ratio::new(632, 5));
    assert_eq!(e(&[1, 1, 1]), Ratio::new(464, 3));
}

proptest! {
    #[test]
    fn expectation_is_linear_and_order_free(
        weights in proptest::collection::vec(0u64..50, 3),
        other in proptest::collection::vec(0u64..50, 3),
        t in 0u64..=10,
    ) {
        prop_assume!(weights.iter().sum::<u64>() > 0 && other.iter().sum::<u64>() > 0);
        let counts = [64, 144, 256];
        let a = TokenSchedule::from_ratios(&counts, &weights).unwrap();
        let b = TokenSchedule::from_ratios(&counts, &other).unwrap();
        // permuting (count, prob) pairs together changes nothing
        let rev = TokenSchedule::new(&[256, 144, 64], &a.probs().iter().rev().copied().collect::<Vec<_>>()).unwrap();
        prop_assert_eq!(&rev, &a);
        let lam = t as f64 / 10.0;
        let mixed: Vec<f64> = a.probs().iter().zip(b.probs()).map(|(p, q)| lam * p + (1.0 - lam) * q).collect();
        let m = TokenSchedule::new(&counts, &mixed).unwrap();
        let lin = lam * a.expected_tokens() + (1.0 - lam) * b.expected_tokens();
        prop_assert!((m.expected_tokens() - lin).abs() < 1e-9);
    }

    #[test]
    fn plans_replay_bit_for_bit(seed in any::<u64>(), batches in 1usize..300) {
        let s = default_schedule();
        prop_assert_eq!(plan_epoch(&s, batches, seed).unwrap(), plan_epoch(&s, batches, seed).unwrap());
    }
}
