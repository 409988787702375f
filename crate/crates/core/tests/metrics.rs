mod common;

use common::{brute_auc, brute_gauc, random_suite, rng};
use proptest::prelude::*;
use store_core::metrics::*;

#[test]
fn fast_metrics_equal_brute_force() {
    let mut r = rng(21);
    let mut checked = 0;
    for i in 0..1000 {
        let suite = random_suite(&mut r, i % 2 == 0);
        match brute_auc(&suite) {
            Some(b) => assert_eq!(auc(&suite).unwrap(), b, "suite {i}"),
            None => assert!(auc(&suite).is_err()),
        }
        match brute_gauc(&suite) {
            Some(b) => assert_eq!(gauc(&suite).unwrap(), b, "suite {i}"),
            None => assert!(gauc(&suite).is_err()),
        }
        checked += 1;
    }
    assert_eq!(checked, 1000);
}

#[test]
fn logloss_matches_formula() {
    let mut r = rng(22);
    for _ in 0..200 {
        let suite = random_suite(&mut r, false);
        let oracle = -suite
            .iter()
            .map(|e| {
                let p = e.score.clamp(1e-7, 1.0 - 1e-7);
                if e.label == 1 {
                    p.ln()
                } else {
                    (1.0 - p).ln()
                }
            })
            .sum::<f64>()
            / suite.len() as f64;
        assert!((logloss(&suite) - oracle).abs() < 1e-12);
    }
    let extreme = [EvalRecord::new(1, 0.0, 0), EvalRecord::new(0, 1.0, 0)];
    assert!(logloss(&extreme).is_finite());
}

#[test]
fn worked_example() {
    // one positive above both negatives, one tied with a negative
    let r = [
        EvalRecord::new(1, 0.9, 0),
        EvalRecord::new(1, 0.4, 1),
        EvalRecord::new(0, 0.4, 1),
        EvalRecord::new(0, 0.1, 0),
    ];
    assert_eq!(auc(&r).unwrap(), 3.5 / 4.0);
    assert_eq!(gauc(&r).unwrap(), (2.0 * 1.0 + 2.0 * 0.5) / 4.0);
}

fn suite_strategy() -> impl Strategy<Value = Vec<(u8, f64)>> {
    prop::collection::vec((0u8..2, 0.0f64..1.0), 2..80)
}

proptest! {
    #[test]
    fn auc_is_rank_invariant(rows in suite_strategy()) {
        let recs: Vec<EvalRecord> = rows.iter().map(|&(l, s)| EvalRecord::new(l, s, 0)).collect();
        prop_assume!(recs.iter().any(|r| r.label == 1) && recs.iter().any(|r| r.label == 0));
        let a = auc(&recs).unwrap();
        prop_assert!((0.0..=1.0).contains(&a));
        let warped: Vec<EvalRecord> = recs.iter().map(|r| EvalRecord::new(r.label, (3.0 * r.score).exp(), 0)).collect();
        prop_assert_eq!(auc(&warped).unwrap(), a);
        let flipped: Vec<EvalRecord> = recs.iter().map(|r| EvalRecord::new(r.label, -r.score, 0)).collect();
        prop_assert!((auc(&flipped).unwrap() - (1.0 - a)).abs() < 1e-12);
    }

    #[test]
    fn single_group_gauc_is_auc(rows in suite_strategy()) {
        let recs: Vec<EvalRecord> = rows.iter().map(|&(l, s)| EvalRecord::new(l, s, 7)).collect();
        prop_assume!(recs.iter().any(|r| r.label == 1) && recs.iter().any(|r| r.label == 0));
        prop_assert!((gauc(&recs).unwrap() - auc(&recs).unwrap()).abs() < 1e-12);
    }
}
