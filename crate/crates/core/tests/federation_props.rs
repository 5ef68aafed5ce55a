use ciffreeda_core::federation::{fedavg_aggregate, select_best, RoundLog};
use ciffreeda_core::head::{ClassifierMode, HeadParams};
use ciffreeda_core::metrics::{macro_recall, ConfusionMatrix};
use proptest::prelude::*;

fn log(round: usize, val: Option<f64>) -> RoundLog {
    RoundLog {
        round,
        client_val_mar: vec![val],
        aggregated_val_mar: val,
        test_mar: None,
        bytes: 0,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn aggregate_stays_in_the_hull(
        seeds in prop::collection::vec(any::<u64>(), 1..5),
        raw in prop::collection::vec(0.0f64..10.0, 5),
    ) {
        let heads: Vec<HeadParams> = seeds
            .iter()
            .map(|&s| HeadParams::init(4, 3, 2, ClassifierMode::Trainable, s).unwrap())
            .collect();
        let mut weights = raw[..heads.len()].to_vec();
        weights[0] += 0.5;
        let agg = fedavg_aggregate(&heads, &weights).unwrap();
        for (t, out) in agg.tensors().iter().enumerate() {
            for (i, &v) in out.iter().enumerate() {
                let lo = heads.iter().map(|h| h.tensors()[t][i]).fold(f64::INFINITY, f64::min);
                let hi = heads.iter().map(|h| h.tensors()[t][i]).fold(f64::NEG_INFINITY, f64::max);
                prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
            }
        }
        let scaled: Vec<f64> = weights.iter().map(|w| 3.0 * w).collect();
        let again = fedavg_aggregate(&heads, &scaled).unwrap();
        for (a, b) in agg.tensors().iter().zip(again.tensors()) {
            for (x, y) in a.iter().zip(b) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn selection_picks_the_first_maximum(vals in prop::collection::vec(prop::option::of(0u8..5), 1..12)) {
        let history: Vec<RoundLog> = vals
            .iter()
            .enumerate()
            .map(|(r, v)| log(r + 1, v.map(|x| f64::from(x) / 4.0)))
            .collect();
        let best = select_best(&history).unwrap();
        let max = vals.iter().flatten().max();
        match max {
            Some(m) => prop_assert_eq!(best, vals.iter().position(|v| v.as_ref() == Some(m)).unwrap()),
            None => prop_assert_eq!(best, 0),
        }
    }

    #[test]
    fn macro_recall_is_bounded_and_label_symmetric(
        pairs in prop::collection::vec((0usize..4, 0usize..4), 1..60),
        perm_seed in 0usize..24,
    ) {
        let (truth, pred): (Vec<usize>, Vec<usize>) = pairs.iter().copied().unzip();
        let cm = ConfusionMatrix::from_predictions(4, &truth, &pred).unwrap();
        let mar = macro_recall(&cm).unwrap();
        prop_assert!((0.0..=1.0).contains(&mar));

        let mut perm: Vec<usize> = (0..4).collect();
        let mut s = perm_seed;
        for i in (1..4).rev() {
            perm.swap(i, s % (i + 1));
            s /= i + 1;
        }
        let t2: Vec<usize> = truth.iter().map(|&c| perm[c]).collect();
        let p2: Vec<usize> = pred.iter().map(|&c| perm[c]).collect();
        let cm2 = ConfusionMatrix::from_predictions(4, &t2, &p2).unwrap();
        prop_assert!((macro_recall(&cm2).unwrap() - mar).abs() < 1e-12);
    }
}
