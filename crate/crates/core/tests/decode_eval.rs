mod common;

use common::*;
use proptest::prelude::*;
use stasr::decode::{beam_search, decode_all, greedy_decode, DecodeOptions, ModelScorer};
use stasr::eval::{edit_distance, evaluate, score_utterance, EditCounts};
use stasr::Error;

#[test]
fn beam_never_scores_below_greedy() {
    for seed in 0..8u64 {
        let (model, _) = tiny_model(seed);
        let feats = random_tensor(&[9, 5], 50 + seed);
        let mut s = ModelScorer::new(&model, &feats).unwrap();
        let greedy = greedy_decode(&mut s, 10).unwrap();
        for alpha in [0.0, 0.6, 1.0] {
            for width in [2, 4, 8] {
                let beam = beam_search(&mut s, width, alpha, 10).unwrap();
                assert!(beam.finished || !greedy.finished);
                if beam.finished == greedy.finished {
                    assert!(beam.normalized_score(alpha) >= greedy.normalized_score(alpha));
                }
            }
        }
    }
}

#[test]
fn threaded_decoding_keeps_order_and_results() {
    let (model, _) = tiny_model(1);
    let feats: Vec<_> = (0..7).map(|i| random_tensor(&[4 + i, 5], 200 + i as u64)).collect();
    let refs: Vec<_> = feats.iter().collect();
    let opts = DecodeOptions {
        beam: 3,
        alpha: 0.6,
        max_len: 8,
    };
    let one = decode_all(&model, &refs, &opts, 1).unwrap();
    let many = decode_all(&model, &refs, &opts, 4).unwrap();
    assert_eq!(one, many);
}

#[test]
fn max_len_truncates_without_end_symbol() {
    let (model, _) = tiny_model(2);
    let feats = random_tensor(&[6, 5], 9);
    let mut s = ModelScorer::new(&model, &feats).unwrap();
    let h = greedy_decode(&mut s, 1).unwrap();
    assert!(h.tokens.len() <= 1);
    assert!(beam_search(&mut s, 0, 0.6, 5).is_err());
}

#[test]
fn known_edit_counts() {
    let c = |r: &str, h: &str| {
        let r: Vec<char> = r.chars().collect();
        let h: Vec<char> = h.chars().collect();
        edit_distance(&r, &h)
    };
    assert_eq!(c("kitten", "sitting"), EditCounts { sub: 2, del: 0, ins: 1 });
    assert_eq!(c("abc", ""), EditCounts { sub: 0, del: 3, ins: 0 });
    assert_eq!(c("", "ab"), EditCounts { sub: 0, del: 0, ins: 2 });
    // Equal-cost alignments resolve toward substitutions.
    assert_eq!(c("ab", "ba"), EditCounts { sub: 2, del: 0, ins: 0 });
}

#[test]
fn character_rate_counts_spaces() {
    let s = score_utterance("u", "ab cd", "abcd");
    assert_eq!(s.ref_chars, 5);
    assert_eq!(s.chars.errors(), 1);
    assert_eq!(s.ref_words, 2);
    assert_eq!(s.words.errors(), 2);
}

#[test]
fn id_mismatches_are_reported() {
    let refs = vec![("a".to_string(), "x y".to_string()), ("b".to_string(), "z".to_string())];
    let hyps = vec![("a".to_string(), "x y".to_string()), ("c".to_string(), "z".to_string())];
    match evaluate(&refs, &hyps) {
        Err(Error::Usage(msg)) => assert!(msg.contains('b') && msg.contains('c'), "{msg}"),
        other => panic!("{other:?}"),
    }
}

proptest! {
    #[test]
    fn distance_bounded_by_lengths(r in "[ab ]{0,12}", h in "[ab ]{0,12}") {
        let rv: Vec<char> = r.chars().collect();
        let hv: Vec<char> = h.chars().collect();
        let e = edit_distance(&rv, &hv).errors();
        prop_assert!(e >= rv.len().abs_diff(hv.len()));
        prop_assert!(e <= rv.len().max(hv.len()));
        prop_assert_eq!(e == 0, rv == hv);
    }
}
