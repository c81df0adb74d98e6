//! Property tests for mask selection, containers and the dense forward.

use proptest::prelude::*;
use sparselora::container::Container;
use sparselora::linalg::{topk_indices, ScoreVector};
use sparselora::model::ForwardOptions;
use sparselora::sparsity::{kept_units, mask_overlap, select_mask};
use sparselora::{build_model, Group, Model, ModelConfig, Tape, Tensor, TokenBatch};

fn scores() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.0f64..100.0, 1..64)
}

fn logits(model: &Model<f32>, tokens: &TokenBatch) -> Tensor<f32> {
    let mut tape = Tape::new();
    let vars = model.register(&mut tape, false);
    let out = model
        .forward(&mut tape, &vars, tokens, ForwardOptions::default(), None)
        .unwrap();
    tape.value(out.logits).clone()
}

fn tiny() -> ModelConfig {
    ModelConfig {
        n_layers: 2,
        max_seq_len: 16,
        ..ModelConfig::tiny()
    }
}

proptest! {
    #[test]
    fn selection_ignores_positive_scale(s in scores(), k in 1e-3f64..1e3, sparsity in 0.0f64..1.0) {
        let n = s.len();
        let a = select_mask(&ScoreVector::channels(s.clone()), sparsity, n, Group::FfnIntermediate).unwrap();
        let scaled = s.iter().map(|v| v * k).collect();
        let b = select_mask(&ScoreVector::channels(scaled), sparsity, n, Group::FfnIntermediate).unwrap();
        prop_assert_eq!(&a.kept, &b.kept);
        prop_assert_eq!(a.len(), kept_units(n, sparsity));
        prop_assert!(a.kept.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn topk_matches_sort(s in scores(), frac in 0.0f64..=1.0) {
        let n = ((s.len() as f64) * frac) as usize;
        let mut got = topk_indices(&ScoreVector::channels(s.clone()), n).unwrap();
        got.sort_unstable();
        let mut order: Vec<usize> = (0..s.len()).collect();
        order.sort_by(|&a, &b| s[b].total_cmp(&s[a]).then(a.cmp(&b)));
        let mut want = order[..n].to_vec();
        want.sort_unstable();
        prop_assert_eq!(got, want);
    }

    #[test]
    fn overlap_is_bounded(a in scores(), seed in any::<u64>(), sparsity in 0.0f64..1.0) {
        let n = a.len();
        let b: Vec<f64> = (0..n).map(|i| ((i as u64).wrapping_mul(seed | 1) % 97) as f64).collect();
        let ma = select_mask(&ScoreVector::channels(a), sparsity, n, Group::VoOuter).unwrap();
        let mb = select_mask(&ScoreVector::channels(b), sparsity, n, Group::VoOuter).unwrap();
        let o = mask_overlap(&ma, &mb).unwrap();
        prop_assert!((0.0..=1.0).contains(&o));
        prop_assert_eq!(mask_overlap(&ma, &ma).unwrap(), 1.0);
    }

    #[test]
    fn container_roundtrip(data in prop::collection::vec(any::<f32>(), 1..48), key in "[a-z]{1,8}", val in "[ -~]{0,16}") {
        let mut c = Container::new("test");
        c.meta.insert(key, val);
        c.push("w", &Tensor::new(vec![data.len()], data).unwrap());
        let bytes = c.to_bytes().unwrap();
        let back = Container::from_bytes(&bytes).unwrap();
        prop_assert_eq!(back.to_bytes().unwrap(), bytes);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn future_tokens_do_not_leak(seed in 0u64..1000, cut in 1usize..11, fill in prop::collection::vec(3usize..259, 11)) {
        let cfg = tiny();
        let model = build_model::<f32>(&cfg, seed).unwrap();
        let seq = 12;
        let ids: Vec<usize> = (0..seq).map(|t| (t * 7 + seed as usize) % cfg.vocab_size).collect();
        let mut mutated = ids.clone();
        for (t, v) in (cut..seq).zip(&fill) {
            mutated[t] = v % cfg.vocab_size;
        }
        let a = logits(&model, &TokenBatch::new(1, seq, ids).unwrap());
        let b = logits(&model, &TokenBatch::new(1, seq, mutated).unwrap());
        let v = cfg.vocab_size;
        prop_assert_eq!(&a.data()[..cut * v], &b.data()[..cut * v]);
    }

    #[test]
    fn batch_order_is_equivariant(seed in 0u64..1000) {
        let cfg = tiny();
        let model = build_model::<f32>(&cfg, seed).unwrap();
        let seq = 8;
        let rows: Vec<Vec<usize>> = (0..3)
            .map(|b| (0..seq).map(|t| (t * 13 + b * 31 + seed as usize) % cfg.vocab_size).collect())
            .collect();
        let fwd = logits(&model, &TokenBatch::new(3, seq, rows.concat()).unwrap());
        let perm = [2, 0, 1];
        let swapped: Vec<usize> = perm.iter().flat_map(|&b| rows[b].clone()).collect();
        let rev = logits(&model, &TokenBatch::new(3, seq, swapped).unwrap());
        let w = seq * cfg.vocab_size;
        for (i, &b) in perm.iter().enumerate() {
            prop_assert_eq!(&rev.data()[i * w..(i + 1) * w], &fwd.data()[b * w..(b + 1) * w]);
        }
    }
}
