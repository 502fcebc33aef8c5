mod common;

use common::topk_inclusion_oracle;
use concept_mil::rng::stream_rng;
use concept_mil::topk::{mc_indicator, sample_perturbations};

#[test]
fn oracle_sums_to_k_and_matches_closed_forms() {
    for (alpha, k) in [(vec![0.0, 1.0, 2.0], 1), (vec![0.3, -0.2, 0.9, 0.1], 2), (vec![1.0; 5], 3)] {
        let p = topk_inclusion_oracle(&alpha, k, 1.0);
        assert!((p.iter().sum::<f64>() - k as f64).abs() < 1e-9, "{p:?}");
    }
    // two entries: P(X0 > X1) = Φ((α0 − α1)/(σ√2))
    let p = topk_inclusion_oracle(&[0.5, 0.0], 1, 1.0);
    assert!((p[0] - 0.638_163_195_1).abs() < 1e-8, "{}", p[0]);
    let eq = topk_inclusion_oracle(&[0.2; 4], 1, 0.3);
    assert!(eq.iter().all(|v| (v - 0.25).abs() < 1e-10));
}

#[test]
fn monte_carlo_indicator_within_three_standard_errors() {
    let cases = [
        (vec![0.0, 1.0, 2.0], 1, 1.0, 1),
        (vec![0.3, -0.2, 0.9, 0.1, 0.5], 2, 0.5, 2),
        (vec![0.0, 0.05, 0.1, 0.6, 0.61, 0.2], 3, 0.05, 3),
    ];
    let m = 40_000;
    for (alpha, k, sigma, seed) in cases {
        let truth = topk_inclusion_oracle(&alpha, k, sigma);
        let s = sample_perturbations(&alpha, k, m, sigma, &mut stream_rng(seed, 0)).unwrap();
        let est = mc_indicator(&s);
        for (e, t) in est.iter().zip(&truth) {
            let se = (t * (1.0 - t) / m as f64).sqrt().max(1e-12);
            assert!((e - t).abs() <= 3.0 * se + 1e-12, "alpha {alpha:?}: {e} vs {t} (se {se})");
        }
    }
}
