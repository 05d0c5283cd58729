//! Randomized invariants over the numeric and data-handling kernels.

use cloze_forge::cor::TeacherOutput;
use cloze_forge::data::{build_vocab, TokenMode};
use cloze_forge::decode::{edit_distance, edit_distance_recursive};
use cloze_forge::loss::lst_loss;
use cloze_forge::mask::{AttentionMask, MaskBank};
use cloze_forge::tensor::Tensor;
use proptest::prelude::*;

proptest! {
    #[test]
    fn masked_softmax_rows_sum_to_one_or_zero(
        n in 1usize..6,
        scores in proptest::collection::vec(-30.0f64..30.0, 36),
        allow in proptest::collection::vec(any::<bool>(), 36),
    ) {
        let mask = AttentionMask {
            n_query: n,
            banks: vec![MaskBank { n_key: n, allow: allow[..n * n].to_vec() }],
        };
        let t = Tensor::matrix(n, n, scores[..n * n].to_vec());
        let p = cloze_forge::autodiff::masked_softmax(&t, &mask).unwrap();
        for r in 0..n {
            let allowed = (0..n).any(|c| mask.banks[0].allow[r * n + c]);
            let sum: f64 = p.row(r).iter().sum();
            if allowed {
                prop_assert!((sum - 1.0).abs() < 1e-12, "row {r} sums to {sum}");
            } else {
                prop_assert_eq!(sum, 0.0, "denied row {} must be exactly zero", r);
            }
            prop_assert!(p.row(r).iter().all(|&x| x >= 0.0));
        }
    }

    #[test]
    fn encode_decode_round_trip(
        words in proptest::collection::vec("[a-z]{1,4}", 1..6),
    ) {
        let sentence = words.join(" ");
        let vocab = build_vocab(&sentence, 1, TokenMode::Whitespace).unwrap();
        let enc = vocab.encode_sentence(&sentence, TokenMode::Whitespace);
        prop_assert_eq!(vocab.decode_sentence(&enc, TokenMode::Whitespace), sentence);
    }

    #[test]
    fn lst_loss_linear_in_lambda(
        raw_s in proptest::collection::vec(0.01f64..1.0, 6),
        raw_t in proptest::collection::vec(0.01f64..1.0, 6),
        label in 0usize..6,
        lambda in 0.0f64..1.0,
    ) {
        let norm = |v: &[f64]| -> Vec<f64> {
            let s: f64 = v.iter().sum();
            v.iter().map(|x| x / s).collect()
        };
        let student = Tensor::matrix(1, 6, norm(&raw_s));
        let teacher = TeacherOutput { probs: Tensor::matrix(1, 6, norm(&raw_t)) };
        let l0 = lst_loss(&student, &[label], &teacher, 0.0, None).unwrap().total;
        let l1 = lst_loss(&student, &[label], &teacher, 1.0, None).unwrap().total;
        let lm = lst_loss(&student, &[label], &teacher, lambda, None).unwrap().total;
        prop_assert!((lm - (lambda * l1 + (1.0 - lambda) * l0)).abs() < 1e-12);
    }

    #[test]
    fn edit_distance_matches_recursive_definition(
        a in proptest::collection::vec(3usize..8, 0..8),
        b in proptest::collection::vec(3usize..8, 0..8),
    ) {
        prop_assert_eq!(edit_distance(&a, &b), edit_distance_recursive(&a, &b));
    }
}
