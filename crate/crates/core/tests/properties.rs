// SPDX-License-Identifier: Apache-2.0

use num_traits::One;
use proptest::prelude::*;
use probseg_core::metrics::{closest_mode_frequencies, dist, ged_sampled, wilcoxon_signed_rank, IoUConvention};
use probseg_core::nets::GaussianParams;
use probseg_core::objectives::{kl_value, mheads_weights};
use probseg_core::synth::{enumerate_modes, FlipSpec, Prob};
use probseg_core::SegMap;

fn maps(count: usize) -> impl Strategy<Value = Vec<SegMap>> {
    (1usize..4, 1usize..4).prop_flat_map(move |(h, w)| {
        prop::collection::vec(
            (prop::collection::vec(0u8..3, h * w), prop::collection::vec(prop::bool::weighted(0.2), h * w))
                .prop_map(move |(c, ig)| SegMap::with_ignore(h, w, 3, c, Some(ig)).unwrap()),
            count,
        )
    })
}

fn conventions() -> impl Strategy<Value = IoUConvention> {
    prop_oneof![Just(IoUConvention::binary()), Just(IoUConvention::switchable(vec![1, 2]).unwrap())]
}

proptest! {
    #[test]
    fn distance_is_bounded_and_symmetric(ms in maps(2), conv in conventions()) {
        let d = dist(&ms[0], &ms[1], &conv).unwrap();
        prop_assert!((0.0..=1.0).contains(&d));
        prop_assert_eq!(d, dist(&ms[1], &ms[0], &conv).unwrap());
        prop_assert_eq!(dist(&ms[0], &ms[0], &conv).unwrap(), 0.0);
    }

    #[test]
    fn ged_of_a_set_with_itself_is_zero(ms in maps(4), conv in conventions()) {
        let r = ged_sampled(&ms, &ms, &conv).unwrap();
        prop_assert!(r.d2.abs() < 1e-12);
        prop_assert!((r.d2 - (2.0 * r.cross - r.pred_div - r.gt_div)).abs() < 1e-12);
    }

    #[test]
    fn mode_frequencies_form_a_distribution(ms in maps(9), conv in conventions()) {
        let f = closest_mode_frequencies(&[(&ms[..6], &ms[6..])], &conv).unwrap();
        prop_assert!(f.iter().all(|v| *v >= 0.0));
        prop_assert!((f.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn kl_is_non_negative(
        v in prop::collection::vec((-3.0f64..3.0, -2.0f64..2.0, -3.0f64..3.0, -2.0f64..2.0), 1..6)
    ) {
        let q = GaussianParams::new(v.iter().map(|t| t.0).collect(), v.iter().map(|t| t.1).collect()).unwrap();
        let p = GaussianParams::new(v.iter().map(|t| t.2).collect(), v.iter().map(|t| t.3).collect()).unwrap();
        prop_assert!(kl_value(&q, &p).unwrap() >= 0.0);
        prop_assert!(kl_value(&q, &q).unwrap().abs() < 1e-12);
    }

    #[test]
    fn mode_tables_sum_to_one(nums in prop::collection::vec((1i128..50, 1i128..50), 1..7)) {
        let probs: Vec<Prob> = nums.iter().map(|&(a, b)| Prob::new(a.min(b), a.max(b) + 1)).collect();
        let t = enumerate_modes(&FlipSpec::consecutive(&probs).unwrap()).unwrap();
        prop_assert_eq!(t.len(), 1 << probs.len());
        prop_assert_eq!(t.total().unwrap(), Prob::one());
    }

    #[test]
    fn oracle_weights_are_a_distribution(losses in prop::collection::vec(0.0f64..5.0, 2..8), eps in 0.001f64..0.999) {
        let w = mheads_weights(&losses, eps).unwrap();
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn wilcoxon_p_is_a_probability(pairs in prop::collection::vec((-5.0f64..5.0, -5.0f64..5.0), 5..30)) {
        let (a, b): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        if let Ok(r) = wilcoxon_signed_rank(&a, &b) {
            prop_assert!((0.0..=1.0).contains(&r.p));
        }
    }
}
