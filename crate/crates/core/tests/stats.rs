use fedplace_core::stats::*;
use proptest::prelude::*;

#[test]
fn summarize_examples() {
    let s = summarize("market", "cqi-chain", 5.0, 1, 4, &[4.0, 2.0, 1.0, 3.0]).unwrap();
    assert_eq!(s.completion_rate, 1.0);
    assert_eq!(s.p50_ms, Some(2.0));
    assert_eq!(s.p99_ms, Some(4.0));
    assert_eq!(s.mean_latency_ms, Some(2.5));

    let s = summarize("rr", "cqi-chain", 5.0, 1, 10, &[]).unwrap();
    assert_eq!(s.completion_rate, 0.0);
    assert!(s.mean_latency_ms.is_none() && s.p50_ms.is_none() && s.p99_ms.is_none());

    let s = summarize("rr", "cqi-chain", 5.0, 1, 3, &[7.0]).unwrap();
    assert_eq!((s.mean_latency_ms, s.p50_ms, s.p99_ms), (Some(7.0), Some(7.0), Some(7.0)));

    assert!(summarize("rr", "x", 1.0, 0, 0, &[]).is_err());
    assert!(summarize("rr", "x", 1.0, 0, 1, &[1.0, 2.0]).is_err());
}

#[test]
fn sign_test_examples() {
    let p = sign_test(&[-3.0; 45], Direction::Less).unwrap();
    let exact = 2f64.powi(-45);
    assert!(((p - exact) / exact).abs() < 1e-20);
    assert!((p - 2.8e-14).abs() < 0.05e-14);
    assert_eq!(sign_test(&[-1.0, 1.0], Direction::Less).unwrap(), 0.75);
    assert_eq!(sign_test(&[1.0; 5], Direction::Less).unwrap(), 1.0);
    assert!(sign_test(&[], Direction::Less).is_err());
    assert!(sign_test(&[0.0, 0.0], Direction::Less).is_err());
    // zeros dropped: 2 wins of 2 nonzero
    assert_eq!(sign_test(&[-1.0, 0.0, -2.0], Direction::Less).unwrap(), 0.25);
    assert_eq!(sign_test(&[1.0, 2.0], Direction::Greater).unwrap(), 0.25);
}

#[test]
fn binomial_tail_matches_across_branches() {
    // exact arithmetic and the distribution crate agree near the switch-over
    for n in [100usize, 120] {
        for k in [0usize, 1, n / 2, n - 3, n] {
            let exact = binomial_upper_tail(n, k);
            let b = statrs::distribution::Binomial::new(0.5, n as u64).unwrap();
            use statrs::distribution::DiscreteCDF;
            let approx = if k == 0 { 1.0 } else { b.sf(k as u64 - 1) };
            assert!((exact - approx).abs() <= 1e-12 * exact.max(1e-300), "n={n} k={k}");
        }
    }
    assert!((binomial_upper_tail(200, 200) - 2f64.powi(-200)).abs() < 1e-70);
}

#[test]
fn hodges_lehmann_examples() {
    assert_eq!(hodges_lehmann(&[-1.0, 1.0]).unwrap(), 0.0);
    assert_eq!(hodges_lehmann(&[2.0]).unwrap(), 2.0);
    assert_eq!(hodges_lehmann(&[1.0, 3.0, 5.0]).unwrap(), 3.0);
    assert!(hodges_lehmann(&[]).is_err());
}

#[test]
fn bootstrap_constant_data_is_a_point() {
    let ci = bootstrap_ci(&[4.2; 9], |s| s.iter().sum::<f64>() / s.len() as f64, 500, 0.95, 3).unwrap();
    assert_eq!(ci, (4.2, 4.2));
}

#[test]
fn bootstrap_is_deterministic_and_validates() {
    let data = [1.0, 5.0, 2.0, 8.0, 3.0];
    let m = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    assert_eq!(bootstrap_ci(&data, m, 1000, 0.9, 11).unwrap(), bootstrap_ci(&data, m, 1000, 0.9, 11).unwrap());
    assert!(bootstrap_ci(&[], m, 10, 0.95, 0).is_err());
    assert!(bootstrap_ci(&data, m, 0, 0.95, 0).is_err());
    assert!(bootstrap_ci(&data, m, 10, 1.0, 0).is_err());
}

#[test]
fn percentile_interval_is_nearest_rank() {
    let sorted: Vec<f64> = (1..=10_000).map(f64::from).collect();
    assert_eq!(percentile_interval(&sorted, 0.95), (250.0, 9_750.0));
    let sorted: Vec<f64> = (1..=7).map(f64::from).collect();
    // ceil(0.025 * 7) = 1, ceil(0.975 * 7) = 7
    assert_eq!(percentile_interval(&sorted, 0.95), (1.0, 7.0));
    assert_eq!(percentile_interval(&sorted, 0.5), (2.0, 6.0));
}

/// Exact resample distribution of the mean for a tiny sample, by enumerating
/// all n^n index tuples.
fn exact_mean_quantiles(values: &[f64], level: f64) -> (f64, f64) {
    let n = values.len();
    let mut means = Vec::new();
    let total = n.pow(n as u32);
    for code in 0..total {
        let mut c = code;
        let mut s = 0.0;
        for _ in 0..n {
            s += values[c % n];
            c /= n;
        }
        means.push(s / n as f64);
    }
    means.sort_by(f64::total_cmp);
    let alpha = 1.0 - level;
    let at = |q: f64| means[((q * total as f64).ceil() as usize).clamp(1, total) - 1];
    (at(alpha / 2.0), at(1.0 - alpha / 2.0))
}

#[test]
fn bootstrap_matches_exhaustive_enumeration() {
    let m = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    for values in [vec![0.0, 1.0, 10.0], vec![2.0, 3.0, 5.0, 11.0], vec![-4.0, 0.0, 0.5, 7.0, 9.0]] {
        let want = exact_mean_quantiles(&values, 0.95);
        let got = bootstrap_ci(&values, m, 10_000, 0.95, 42).unwrap();
        let spread = values.iter().cloned().fold(f64::MIN, f64::max) - values.iter().cloned().fold(f64::MAX, f64::min);
        // Monte Carlo with B = 10^4 lands on or next to the exact atom
        assert!((got.0 - want.0).abs() <= spread / values.len() as f64 + 1e-9, "{values:?} {got:?} {want:?}");
        assert!((got.1 - want.1).abs() <= spread / values.len() as f64 + 1e-9, "{values:?} {got:?} {want:?}");
    }
    // n = 3: every tail atom has mass 1/27 > 2.5%, so the bounds are min and max exactly
    let got = bootstrap_ci(&[0.0, 1.0, 10.0], m, 10_000, 0.95, 7).unwrap();
    assert_eq!(got, (0.0, 10.0));
}

#[test]
fn bootstrap_ci_contains_estimate_on_random_data() {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(99);
    for seed in 0..100 {
        let n = rng.gen_range(5..40);
        let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-50.0..50.0)).collect();
        let est = hodges_lehmann(&data).unwrap();
        let (lo, hi) = bootstrap_ci(&data, |s| hodges_lehmann(s).unwrap(), 400, 0.95, seed).unwrap();
        assert!(lo <= est && est <= hi, "seed {seed}: {est} not in [{lo}, {hi}]");
    }
}

fn hinge(x: f64, k: f64, a: f64, b: f64, c: f64) -> f64 {
    a + b * x + c * (x - k).max(0.0)
}

#[test]
fn knee_recovers_planted_break_at_ten() {
    let pts: Vec<(f64, f64)> = (1..=20).map(|x| (x as f64, hinge(x as f64, 10.0, 1.0, 0.0, -0.08))).collect();
    let fit = knee_fit(&pts, 200, 1).unwrap();
    assert!((fit.breakpoint - 10.0).abs() <= KNEE_GRID_STEP + 1e-9);
    assert!(!fit.degenerate);
    assert!(fit.slope_left.abs() < 1e-9);
    assert!((fit.slope_right + 0.08).abs() < 1e-9);
    let (lo, hi) = fit.ci.unwrap();
    assert!(lo <= fit.breakpoint && fit.breakpoint <= hi);
}

#[test]
fn knee_flat_is_degenerate() {
    let pts: Vec<(f64, f64)> = (1..=8).map(|x| (x as f64, 1.0)).collect();
    let fit = knee_fit(&pts, 100, 1).unwrap();
    assert!(fit.degenerate);
    assert!(fit.ci.is_none());
}

#[test]
fn knee_on_saturation_shaped_data() {
    let pts = [(5.0, 0.988), (10.0, 0.224), (15.0, 0.033), (50.0, 0.0)];
    let fit = knee_fit(&pts, 500, 5).unwrap();
    assert!(fit.breakpoint > 5.0 && fit.breakpoint < 15.0, "{fit:?}");
    assert!(fit.slope_left < 0.0);
}

#[test]
fn knee_needs_four_points() {
    assert!(knee_fit(&[(5.0, 0.988), (10.0, 0.224), (15.0, 0.033)], 0, 0).is_err());
    assert!(knee_fit(&[(1.0, 1.0), (1.0, 0.9), (2.0, 0.5), (3.0, 0.1)], 0, 0).is_err());
}

#[test]
fn efficiency_examples() {
    let r = efficiency_gap(&[10.0, 20.0], &[10.0, 20.0], 100.0).unwrap();
    assert_eq!(r.delta_eff, 0.0);
    let r = EfficiencyReport::from_welfare(95.0, 100.0).unwrap();
    assert!((r.delta_eff - 0.05).abs() < 1e-12);
    let r = efficiency_gap(&[5.0], &[15.0], 100.0).unwrap();
    assert!(r.delta_eff < 0.0);
    assert!(EfficiencyReport::from_welfare(1.0, 0.0).is_err());
    assert!(efficiency_gap(&[], &[], 100.0).is_err());
}

#[test]
fn comparison_counts_ties_within_a_millisecond() {
    assert_eq!(compare_cell(100.0, 100.9), Outcome::Tie);
    assert_eq!(compare_cell(100.0, 101.0), Outcome::Win);
    assert_eq!(compare_cell(102.0, 101.0), Outcome::Loss);
    let pairs = [(90.0, 130.0), (95.0, 131.0), (100.0, 100.5), (120.0, 110.0)];
    let r = compare("oracle", &pairs, 200, 3);
    assert_eq!((r.wins, r.losses, r.ties), (2, 1, 1));
    assert_eq!(r.sign_p, Some(binomial_upper_tail(4, 3)));
    assert!(r.render().starts_with("market vs oracle: wins 2 losses 1 ties 1"));
}

proptest! {
    #[test]
    fn all_wins_give_exact_power_of_two(n in 1usize..=60) {
        let p = sign_test(&vec![-1.0; n], Direction::Less).unwrap();
        prop_assert_eq!(p, 2f64.powi(-(n as i32)));
    }

    #[test]
    fn hodges_lehmann_translation_equivariant(xs in prop::collection::vec(-100i32..100, 1..30), c in -50i32..50) {
        // integer-valued data keeps Walsh averages exact in binary
        let xs: Vec<f64> = xs.into_iter().map(f64::from).collect();
        let shifted: Vec<f64> = xs.iter().map(|x| x + c as f64).collect();
        prop_assert_eq!(hodges_lehmann(&shifted).unwrap(), hodges_lehmann(&xs).unwrap() + c as f64);
    }

    #[test]
    fn bootstrap_wider_at_higher_level(xs in prop::collection::vec(-10.0f64..10.0, 2..25), seed in 0u64..1000) {
        let m = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
        let narrow = bootstrap_ci(&xs, m, 300, 0.8, seed).unwrap();
        let wide = bootstrap_ci(&xs, m, 300, 0.95, seed).unwrap();
        prop_assert!(wide.0 <= narrow.0 && narrow.1 <= wide.1);
    }

    #[test]
    fn summary_percentiles_ordered(lat in prop::collection::vec(0.0f64..1e4, 0..50), extra in 0usize..20) {
        let s = summarize("m", "k", 1.0, 0, lat.len() + extra.max(usize::from(lat.is_empty())), &lat).unwrap();
        prop_assert!((0.0..=1.0).contains(&s.completion_rate));
        if let (Some(a), Some(b), Some(c)) = (s.p50_ms, s.p95_ms, s.p99_ms) {
            prop_assert!(a <= b && b <= c);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(20))]
    #[test]
    fn knee_recovers_planted_breakpoints(
        k10 in 30i32..170,
        a in 0.5f64..1.0,
        b in -0.01f64..0.01,
        c in prop_oneof![-0.2f64..-0.02, 0.02f64..0.2],
    ) {
        let k = k10 as f64 / 10.0;
        let pts: Vec<(f64, f64)> = (0..=40).map(|i| {
            let x = i as f64 * 0.5;
            (x, hinge(x, k, a, b, c))
        }).collect();
        let fit = knee_fit(&pts, 0, 0).unwrap();
        prop_assert!((fit.breakpoint - k).abs() <= KNEE_GRID_STEP + 1e-9, "planted {} got {}", k, fit.breakpoint);
        prop_assert!(!fit.degenerate);
    }
}
