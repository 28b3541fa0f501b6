//! Property tests for the spec-level invariants that hold over whole input
//! families rather than single examples.

use proptest::prelude::*;

use tagalign::evaluation::average_precision;
use tagalign::labels::{parse_tags, Category, LabelSystem};
use tagalign::losses::{asl, AslConfig};
use tagalign::numerics::{softmax, Array};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn softmax_sums_to_one_and_is_shift_invariant(
        xs in prop::collection::vec(-30.0f64..30.0, 1..24),
        shift in -50.0f64..50.0,
    ) {
        let x = Array::vector(xs.clone());
        let s = softmax(&x, 0).unwrap();
        let sum: f64 = s.data().iter().sum();
        prop_assert!((sum - 1.0).abs() <= 1e-12);
        prop_assert!(s.data().iter().all(|&v| v > 0.0));

        let shifted = Array::vector(xs.iter().map(|v| v + shift).collect());
        let s2 = softmax(&shifted, 0).unwrap();
        for (a, b) in s.data().iter().zip(s2.data()) {
            prop_assert!((a - b).abs() <= 1e-12, "shift variance {a} vs {b}");
        }
    }

    #[test]
    fn average_precision_invariant_under_monotone_transform(
        grid in prop::collection::vec(0u32..1024, 1..30),
        labels in prop::collection::vec(any::<bool>(), 30),
        scale in 0.1f64..10.0,
        offset in -5.0f64..5.0,
    ) {
        // scores on a 1/1024 grid: ties are exact and survive any strictly
        // monotone transform without float collisions
        let scores: Vec<f64> = grid.iter().map(|&k| k as f64 / 1024.0).collect();
        let labels = &labels[..scores.len()];
        let base = average_precision(&scores, labels);
        let affine: Vec<f64> = scores.iter().map(|s| scale * s + offset).collect();
        prop_assert_eq!(base, average_precision(&affine, labels));
        let curved: Vec<f64> = scores.iter().map(|s| (3.0 * s).atan()).collect();
        prop_assert_eq!(base, average_precision(&curved, labels));
    }

    #[test]
    fn asl_negative_branch_zero_below_margin(
        p in 0.0f64..1.0,
        margin in 0.01f64..0.5,
        gamma in 0.0f64..6.0,
    ) {
        let cfg = AslConfig { gamma_pos: 0.0, gamma_neg: gamma, margin };
        let loss = asl(p, false, &cfg);
        if p <= margin {
            prop_assert_eq!(loss, 0.0);
        } else {
            prop_assert!(loss >= 0.0);
        }
    }

    #[test]
    fn parsed_tags_occur_verbatim_in_caption(
        picks in prop::collection::vec(0usize..6, 0..5),
        noise_words in prop::collection::vec("[a-z]{6,9}", 0..4),
    ) {
        let names = ["dog", "couch", "table", "cat", "bird", "meteor shower"];
        let ls = LabelSystem::new(
            names
                .iter()
                .enumerate()
                .map(|(id, n)| Category { id, name: n.to_string(), synonyms: vec![] })
                .collect(),
        )
        .unwrap();
        let mut words: Vec<String> = picks.iter().map(|&i| names[i].to_string()).collect();
        words.extend(noise_words);
        let caption = words.join(" ");
        let tags = parse_tags(&caption, &ls);
        for &tag in &tags {
            prop_assert!(tag < ls.len());
            // the name occurs verbatim (case-insensitive whole words)
            let name = names[tag];
            prop_assert!(
                caption.split(' ').collect::<Vec<_>>().join(" ").contains(name),
                "tag {name} not found in {caption:?}"
            );
        }
        // and every picked name that is not shadowed by a longer phrase parses
        for &i in &picks {
            if names[i] != "shower" {
                prop_assert!(tags.contains(&i), "missing {} in {caption:?}", names[i]);
            }
        }
    }
}
