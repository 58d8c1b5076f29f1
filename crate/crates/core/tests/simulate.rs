mod common;

use std::collections::HashSet;

use reciprocity_core::events::HOUR;
use reciprocity_core::pipeline::build_windows;
use reciprocity_core::simulate::{generate, generate_events, SimConfig};
use statrs::distribution::{Binomial, DiscreteCDF};

fn null_config(seed: u64, n_users: usize) -> SimConfig {
    SimConfig {
        seed,
        n_users,
        true_beta: [0.0; 5],
        ..SimConfig::default()
    }
}

/// Pre and post help counts summed over every eligible window.
fn phase_counts(cfg: &SimConfig) -> (usize, u64, u64) {
    let corpus = generate(cfg).unwrap();
    let windows = build_windows(&corpus, 48 * HOUR).unwrap();
    let (mut pre, mut post) = (0, 0);
    for w in &windows {
        for &t in &w.help_times {
            if t <= w.t_question {
                pre += 1;
            } else {
                post += 1;
            }
        }
    }
    (windows.len(), pre, post)
}

#[test]
fn null_world_has_no_post_question_shift() {
    let (n, pre, post) = phase_counts(&null_config(61, 24_000));
    assert!(n >= 100_000, "{n} windows");
    // given a window's total, a flat hazard splits it evenly between halves
    let total = pre + post;
    let bin = Binomial::new(0.5, total).unwrap();
    let p = 2.0 * bin.cdf(pre.min(post)).min(0.5);
    assert!(p > 0.01, "pre {pre} post {post} p {p}");
}

#[test]
fn window_counts_match_the_baseline_rate() {
    let cfg = SimConfig {
        frailty_sd: 0.0,
        ..null_config(62, 3_000)
    };
    let (n, pre, post) = phase_counts(&cfg);
    let mean = (pre + post) as f64 / n as f64;
    let expected = cfg.baseline_help_rate * 96.0;
    let se = (expected / n as f64).sqrt();
    assert!(
        (mean - expected).abs() < 3.0 * se,
        "mean {mean} vs {expected} (se {se})"
    );
}

#[test]
fn seeds_give_distinct_reproducible_corpora() {
    let mut seen = HashSet::new();
    for seed in 0..20 {
        let cfg = SimConfig {
            seed,
            n_users: 80,
            horizon_days: 200.0,
            ..SimConfig::default()
        };
        let a = generate_events(&cfg).unwrap();
        assert_eq!(a, generate_events(&cfg).unwrap());
        let key: Vec<(i64, u64)> = a.iter().map(|e| (e.timestamp, e.user_id)).collect();
        assert!(seen.insert(key), "seed {seed} repeats an earlier corpus");
    }
}
