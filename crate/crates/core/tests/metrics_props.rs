use proptest::prelude::*;
use roiformer::metrics::{auc, compute_metrics};

fn brute_auc(scores: &[f64], labels: &[u8]) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for (i, &yi) in labels.iter().enumerate() {
        for (j, &yj) in labels.iter().enumerate() {
            if yi == 1 && yj == 0 {
                den += 1.0;
                num += if scores[i] > scores[j] {
                    1.0
                } else if scores[i] == scores[j] {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    num / den
}

fn scored_labels() -> impl Strategy<Value = (Vec<f64>, Vec<u8>)> {
    (2usize..=20).prop_flat_map(|n| {
        (
            // coarse grid so ties are common
            prop::collection::vec((0u8..10).prop_map(|v| f64::from(v) / 10.0), n),
            prop::collection::vec(0u8..=1, n),
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn auc_matches_pair_counting((scores, labels) in scored_labels()) {
        let both = labels.contains(&0) && labels.contains(&1);
        match auc(&scores, &labels) {
            Ok(a) => {
                prop_assert!(both);
                prop_assert!((a - brute_auc(&scores, &labels)).abs() < 1e-12);
            }
            Err(_) => prop_assert!(!both),
        }
    }

    #[test]
    fn auc_invariant_under_monotone_maps((scores, labels) in scored_labels()) {
        prop_assume!(labels.contains(&0) && labels.contains(&1));
        let mapped: Vec<f64> = scores.iter().map(|s| (3.0 * s).exp() - 7.0).collect();
        prop_assert_eq!(auc(&scores, &labels).unwrap(), auc(&mapped, &labels).unwrap());
    }

    #[test]
    fn rates_recompute_from_counts(
        (scores, labels) in scored_labels(),
        threshold in 0.0f64..1.0,
    ) {
        let r = compute_metrics(&scores, &labels, threshold).unwrap();
        prop_assert_eq!(r.n(), scores.len());
        prop_assert_eq!(r.acc, (r.tp + r.tn) as f64 / r.n() as f64);
        let pos = r.tp + r.fn_;
        let neg = r.tn + r.fp;
        prop_assert_eq!(pos, labels.iter().filter(|&&y| y == 1).count());
        prop_assert_eq!(r.sen, (pos > 0).then(|| r.tp as f64 / pos as f64));
        prop_assert_eq!(r.spe, (neg > 0).then(|| r.tn as f64 / neg as f64));
        let predicted = scores.iter().filter(|&&s| s >= threshold).count();
        prop_assert_eq!(r.tp + r.fp, predicted);
    }
}
