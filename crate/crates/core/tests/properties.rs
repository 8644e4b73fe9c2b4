use cme_grpo::align::align;
use cme_grpo::grpo::{advantages, clipped_surrogate, normalize_sequence};
use cme_grpo::rewards::{RewardMatrix, RowRewards};
use cme_grpo::text::{train_merges, Alphabet, MergeTable, Tokenizer, TokenizedText};
use proptest::collection::vec;
use proptest::prelude::*;

fn segment(text: &str, cuts: &[bool]) -> TokenizedText {
    let mut lengths = vec![1usize];
    for &c in cuts.iter().take(text.chars().count() - 1) {
        if c {
            lengths.push(1);
        } else {
            *lengths.last_mut().unwrap() += 1;
        }
    }
    let ids: Vec<_> = (0..lengths.len()).collect();
    TokenizedText::from_lengths(text, &ids, &lengths).unwrap()
}

fn text_and_cuts() -> impl Strategy<Value = (String, Vec<bool>, Vec<bool>)> {
    "[ab c]{1,24}".prop_flat_map(|t| {
        let n = t.chars().count();
        (Just(t), vec(any::<bool>(), n), vec(any::<bool>(), n))
    })
}

proptest! {
    #[test]
    fn alignment_weights_partition_each_verifier_token((text, gc, vc) in text_and_cuts()) {
        let gen = segment(&text, &gc);
        let ver = segment(&text, &vc);
        let map = align(&gen, &ver).unwrap();
        let mut per_ver = vec![0.0; ver.len()];
        for e in map.entries() {
            prop_assert!(e.w > 0.0 && e.w <= 1.0);
            per_ver[e.s] += e.w;
        }
        for s in per_ver {
            prop_assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn alignment_conserves_verifier_mass(
        (text, gc, vc) in text_and_cuts(),
        lp in vec(-20.0f64..0.0, 24),
    ) {
        let gen = segment(&text, &gc);
        let ver = segment(&text, &vc);
        let map = align(&gen, &ver).unwrap();
        let lp = &lp[..ver.len()];
        let out = map.aligned_logprobs(lp).unwrap();
        let total: f64 = lp.iter().sum();
        let got: f64 = out.pre_mask.iter().sum();
        prop_assert!((total - got).abs() <= 1e-9 * total.abs().max(1.0));
        for (t, tok) in gen.tokens().iter().enumerate() {
            let blank = gen.token_text(t).chars().all(|c| c == ' ');
            prop_assert_eq!(out.valid[t], !blank, "position {} span {:?}", t, tok.span);
            if blank {
                prop_assert_eq!(out.values[t], 0.0);
            }
        }
    }

    #[test]
    fn alignment_of_identical_segmentations_is_identity((text, gc, _) in text_and_cuts()) {
        let seg = segment(&text, &gc);
        let map = align(&seg, &seg).unwrap();
        prop_assert_eq!(map.entries().len(), seg.len());
        for e in map.entries() {
            prop_assert_eq!(e.t, e.s);
            prop_assert_eq!(e.w, 1.0);
        }
    }

    #[test]
    fn trained_tokenizer_round_trips(
        corpus in vec("[abcd]{1,12}", 1..8),
        extra in 0usize..10,
        probe in "[abcd]{0,20}",
    ) {
        let alphabet = Alphabet::new("abcd").unwrap();
        let merges = train_merges(&corpus, &alphabet, alphabet.len() + extra).unwrap();
        prop_assert!(merges.len() <= extra);
        prop_assert_eq!(MergeTable::parse(&merges.to_text()).unwrap(), merges.clone());
        let tok = Tokenizer::new(alphabet, merges).unwrap();
        for text in corpus.iter().chain([&probe]) {
            let enc = tok.encode(text).unwrap();
            prop_assert_eq!(&tok.decode(&enc.ids()).unwrap(), text);
            let mut next = 0;
            for (k, span) in enc.spans().enumerate() {
                prop_assert_eq!(span.start, next);
                prop_assert_eq!(tok.token_str(enc.tokens()[k].id).unwrap(), enc.token_text(k));
                next = span.end;
            }
            prop_assert_eq!(next, text.chars().count());
        }
    }

    #[test]
    fn token_advantages_are_centered_and_invariant(
        rows in vec((vec(-64i32..64, 1..6), vec(any::<bool>(), 6)), 2..6),
        shift in -32i32..32,
        scale_exp in -4i32..5,
    ) {
        let build = |f: &dyn Fn(f64) -> f64| {
            RewardMatrix::from_rows(
                rows.iter()
                    .map(|(vals, mask)| RowRewards {
                        values: vals.iter().map(|&v| f(v as f64 / 8.0)).collect(),
                        mask: mask[..vals.len()].to_vec(),
                        total: 0.0,
                    })
                    .collect(),
            )
        };
        let g = rows.len();
        let base = advantages(&build(&|x| x), g).unwrap();
        let scale = 2f64.powi(scale_exp);
        let moved = advantages(&build(&|x| scale * x + shift as f64 / 4.0), g).unwrap();
        prop_assert_eq!(base.values(), moved.values());

        for t in 0..base.cols() {
            let col: Vec<f64> = (0..g).filter(|&i| base.is_valid(i, t)).map(|i| base.get(i, t)).collect();
            prop_assert!(col.iter().sum::<f64>().abs() < 1e-9);
            if !col.is_empty() && col.iter().any(|&a| a != 0.0) {
                let var = col.iter().map(|a| a * a).sum::<f64>() / col.len() as f64;
                prop_assert!((var - 1.0).abs() < 1e-9);
            }
            for i in 0..g {
                if !base.is_valid(i, t) {
                    prop_assert_eq!(base.get(i, t), 0.0);
                }
            }
        }
    }

    #[test]
    fn sequence_advantages_are_standardized(rewards in vec(-100.0f64..100.0, 2..10)) {
        let a = normalize_sequence(&rewards).unwrap();
        prop_assert!(a.iter().sum::<f64>().abs() < 1e-9);
        let spread = rewards.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
            - rewards.iter().cloned().fold(f64::INFINITY, f64::min);
        if spread > 1e-6 {
            let var = a.iter().map(|x| x * x).sum::<f64>() / a.len() as f64;
            prop_assert!((var - 1.0).abs() < 1e-9);
        }
        for (i, j) in [(0, 1), (1, 0)] {
            if rewards[i] > rewards[j] {
                prop_assert!(a[i] > a[j]);
            }
        }
    }

    #[test]
    fn clipped_surrogate_never_exceeds_unclipped(rho in 0.0f64..3.0, adv in -5.0f64..5.0, eps in 0.01f64..0.5) {
        let s = clipped_surrogate(rho, adv, eps);
        prop_assert!(s <= rho * adv + 1e-12);
        if (1.0 - eps..=1.0 + eps).contains(&rho) {
            prop_assert_eq!(s, rho * adv);
        }
    }
}
