//! Sliced execution checked against explicit references: context rows see
//! pruned channels as exact zeros, output rows are bit-for-bit dense paths.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sparselora::linalg::ScoreGranularity;
use sparselora::model::{apply_rope, attention, ffn_intermediate, row_positions, ForwardOptions};
use sparselora::plan::{Criteria, SparsityPlan};
use sparselora::sparse_exec::{main_linear, sparse_ffn, Slice};
use sparselora::sparsity::{random_scores, select_mask};
use sparselora::tape::AttnShape;
use sparselora::{
    build_model, split_tokens_compute, ChannelMask, Group, Model, ModelConfig, SparseStep, Tape, Tensor,
    TokenBatch, TokenPartition,
};

const TOL: f64 = 1e-11;

fn random_partition(rng: &mut ChaCha8Rng, batch: usize, seq: usize) -> TokenPartition {
    let mut ctx = Vec::new();
    let mut out = Vec::new();
    for _ in 0..batch {
        let (mut c, mut o) = (Vec::new(), Vec::new());
        for t in 0..seq {
            if rng.gen_bool(0.6) {
                c.push(t);
            } else {
                o.push(t);
            }
        }
        ctx.push(c);
        out.push(o);
    }
    TokenPartition::new(seq, ctx, out).unwrap()
}

fn random_mask(rng: &mut ChaCha8Rng, total: usize, group: Group) -> ChannelMask {
    let s = random_scores(total, ScoreGranularity::Channel, rng);
    let sparsity = rng.gen_range(0.0..0.95);
    select_mask(&s, sparsity, total, group).unwrap()
}

/// Row `r` is a context row under `p` (every row when there is no partition).
fn is_ctx(p: Option<&TokenPartition>, r: usize) -> bool {
    p.is_none_or(|p| p.context_rows().contains(&r))
}

fn zero_cols_on_ctx(x: &mut Tensor<f64>, keep: &ChannelMask, p: Option<&TokenPartition>) {
    let cols = x.cols();
    let drop: Vec<usize> = (0..cols).filter(|c| keep.kept.binary_search(c).is_err()).collect();
    for r in 0..x.rows() {
        if is_ctx(p, r) {
            for &c in &drop {
                x.data_mut()[r * cols + c] = 0.0;
            }
        }
    }
}

fn eval_linear(x: &Tensor<f64>, w: &Arc<Tensor<f64>>, slice: Slice<'_>, p: Option<&TokenPartition>) -> Tensor<f64> {
    let mut tape = Tape::new();
    let xv = tape.constant(Arc::new(x.clone()));
    let y = main_linear(&mut tape, xv, w, slice, None, p).unwrap();
    tape.value(y).clone()
}

fn max_diff(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn main_linear_slices_match_zeroed_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for trial in 0..1000 {
        let (batch, seq) = (rng.gen_range(1..3), rng.gen_range(1..7));
        let (d_in, d_out) = (rng.gen_range(1..9), rng.gen_range(1..9));
        let x = Tensor::randn(&[batch * seq, d_in], 1.0, &mut rng);
        let w = Arc::new(Tensor::randn(&[d_in, d_out], 1.0, &mut rng));
        let part = random_partition(&mut rng, batch, seq);
        let dense = x.matmul(&w).unwrap();
        for p in [None, Some(&part)] {
            let m_out = random_mask(&mut rng, d_out, Group::QkInner);
            let mut want = dense.clone();
            zero_cols_on_ctx(&mut want, &m_out, p);
            let got = eval_linear(&x, &w, Slice::Out(&m_out), p);
            assert!(max_diff(&got, &want) < TOL, "trial {trial}: out slice");

            let m_in = random_mask(&mut rng, d_in, Group::VoOuter);
            let mut xz = x.clone();
            zero_cols_on_ctx(&mut xz, &m_in, p);
            let want = xz.matmul(&w).unwrap();
            let got = eval_linear(&x, &w, Slice::In(&m_in), p);
            assert!(max_diff(&got, &want) < TOL, "trial {trial}: in slice");
        }
    }
}

#[test]
fn split_ffn_matches_zeroed_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let cfg = ModelConfig {
        n_layers: 1,
        n_heads: 2,
        d_model: 8,
        d_ffn: 12,
        ..ModelConfig::tiny()
    };
    for trial in 0..1000 {
        let model = build_model::<f32>(&cfg, trial).unwrap().cast::<f64>();
        let lw = &model.layers[0];
        let (batch, seq) = (rng.gen_range(1..3), rng.gen_range(1..7));
        let x = Tensor::randn(&[batch * seq, cfg.d_model], 1.0, &mut rng);
        let part = random_partition(&mut rng, batch, seq);
        let mask = {
            let mut m = random_mask(&mut rng, cfg.d_ffn, Group::FfnIntermediate);
            if m.kept.is_empty() {
                m.kept.push(0);
            }
            m
        };
        let mut inter = ffn_intermediate(&x, lw).unwrap();
        zero_cols_on_ctx(&mut inter, &mask, Some(&part));
        let want = inter.matmul(&lw.w_down).unwrap();

        let mut tape = Tape::new();
        let xv = tape.constant(Arc::new(x.clone()));
        let (g, u, d) = (
            tape.constant(Arc::clone(&lw.w_gate)),
            tape.constant(Arc::clone(&lw.w_up)),
            tape.constant(Arc::clone(&lw.w_down)),
        );
        let y = split_tokens_compute(
            &mut tape,
            xv,
            &part,
            |t, rows| sparse_ffn(t, rows, lw, &mask, None, 0),
            |t, rows| Ok(sparselora::sparse_exec::dense_ffn(t, rows, g, u, d)?.0),
        )
        .unwrap();
        assert!(max_diff(tape.value(y), &want) < TOL, "trial {trial}");
    }
}

fn rmsnorm(x: &Tensor<f64>, gain: &Tensor<f64>, eps: f64) -> Tensor<f64> {
    let d = x.cols();
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(d) {
        let r = 1.0 / (row.iter().map(|v| v * v).sum::<f64>() / d as f64 + eps).sqrt();
        for (v, g) in row.iter_mut().zip(gain.data()) {
            *v *= r * g;
        }
    }
    out
}

fn add(a: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
    Tensor::new(a.shape().to_vec(), data).unwrap()
}

/// Plain-tensor forward where context rows drop pruned channels and output
/// rows run dense.
fn reference_logits(
    model: &Model<f64>,
    tokens: &TokenBatch,
    masks: &BTreeMap<(usize, Group), ChannelMask>,
    p: Option<&TokenPartition>,
) -> Tensor<f64> {
    let cfg = &model.cfg;
    let d = cfg.d_model;
    let mut x = Tensor::zeros(&[tokens.ids.len(), d]);
    for (r, &id) in tokens.ids.iter().enumerate() {
        x.data_mut()[r * d..(r + 1) * d].copy_from_slice(model.embed.row(id));
    }
    let pos = row_positions(tokens.batch, tokens.seq);
    let shape = AttnShape {
        batch: tokens.batch,
        seq: tokens.seq,
        heads: cfg.n_heads,
        d_head: cfg.d_head(),
    };
    for (l, lw) in model.layers.iter().enumerate() {
        let h = rmsnorm(&x, &lw.attn_norm, cfg.rmsnorm_eps);
        let (qk, vo) = (&masks[&(l, Group::QkInner)], &masks[&(l, Group::VoOuter)]);
        let mut q = h.matmul(&lw.wq).unwrap();
        let mut k = h.matmul(&lw.wk).unwrap();
        let mut v = h.matmul(&lw.wv).unwrap();
        zero_cols_on_ctx(&mut q, qk, p);
        zero_cols_on_ctx(&mut k, qk, p);
        zero_cols_on_ctx(&mut v, vo, p);
        let q = apply_rope(&q, &pos, cfg.d_head(), cfg.rope_theta).unwrap();
        let k = apply_rope(&k, &pos, cfg.d_head(), cfg.rope_theta).unwrap();
        let (mut a, _) = attention(&q, &k, &v, shape).unwrap();
        zero_cols_on_ctx(&mut a, vo, p);
        x = add(&x, &a.matmul(&lw.wo).unwrap());

        let h2 = rmsnorm(&x, &lw.ffn_norm, cfg.rmsnorm_eps);
        let mut inter = ffn_intermediate(&h2, lw).unwrap();
        zero_cols_on_ctx(&mut inter, &masks[&(l, Group::FfnIntermediate)], p);
        x = add(&x, &inter.matmul(&lw.w_down).unwrap());
    }
    rmsnorm(&x, &model.final_norm, cfg.rmsnorm_eps).matmul(&model.lm_head).unwrap()
}

#[test]
fn sparse_forward_matches_reference_model() {
    let cfg = ModelConfig {
        n_layers: 2,
        n_heads: 2,
        d_model: 16,
        d_ffn: 32,
        max_seq_len: 16,
        ..ModelConfig::tiny()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let mut plan = SparsityPlan::uniform(cfg.n_layers, 0.5, 0.5);
    plan.criteria = Criteria::Oracle;
    for trial in 0..100 {
        let model = build_model::<f32>(&cfg, trial).unwrap().cast::<f64>();
        let (batch, seq) = (rng.gen_range(1..3), rng.gen_range(2..12));
        let ids = (0..batch * seq).map(|_| rng.gen_range(0..cfg.vocab_size)).collect();
        let tokens = TokenBatch::new(batch, seq, ids).unwrap();
        let mut masks = BTreeMap::new();
        for l in 0..cfg.n_layers {
            let pairs = random_scores(cfg.d_model / 2, ScoreGranularity::RopePair, &mut rng);
            let s = rng.gen_range(0.0..0.9);
            masks.insert((l, Group::QkInner), select_mask(&pairs, s, cfg.d_model, Group::QkInner).unwrap());
            masks.insert((l, Group::VoOuter), random_mask(&mut rng, cfg.d_model, Group::VoOuter));
            let mut f = random_mask(&mut rng, cfg.d_ffn, Group::FfnIntermediate);
            if f.kept.is_empty() {
                f.kept.push(rng.gen_range(0..cfg.d_ffn));
            }
            masks.insert((l, Group::FfnIntermediate), f);
        }
        let part = random_partition(&mut rng, batch, seq);
        for p in [None, Some(&part)] {
            let mut tape = Tape::new();
            let vars = model.register(&mut tape, false);
            let mut step = SparseStep::new(&model, &plan, None, batch, seq, p.cloned(), 0)
                .unwrap()
                .with_fixed_masks(masks.clone());
            let out = model
                .forward(&mut tape, &vars, &tokens, ForwardOptions::default(), Some(&mut step))
                .unwrap();
            let want = reference_logits(&model, &tokens, &masks, p);
            let diff = max_diff(tape.value(out.logits), &want);
            assert!(diff < 1e-9, "trial {trial} split={}: max diff {diff:e}", p.is_some());
        }
    }
}
