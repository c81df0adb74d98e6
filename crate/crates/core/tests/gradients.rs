//! End-to-end finite-difference checks of LoRA gradients through the full
//! model, dense and under fixed channel masks with and without token splitting.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sparselora::data::{kv_recall, Batch, Batcher};
use sparselora::gradcheck::grad_check;
use sparselora::linalg::ScoreGranularity;
use sparselora::plan::{Criteria, SparsityPlan};
use sparselora::sparsity::{random_scores, select_mask};
use sparselora::train::batch_loss;
use sparselora::{
    attach_lora, build_model, AdapterBank, ChannelMask, Group, Model, ModelConfig, Proj, SparseStep, Tape,
    Tensor, TokenPartition, Var,
};

const TOL: f64 = 1e-4;

struct Fixture {
    model: Model<f64>,
    adapters: AdapterBank<f64>,
    batch: Batch,
}

fn fixture() -> Fixture {
    let cfg = ModelConfig {
        n_layers: 2,
        n_heads: 2,
        d_model: 16,
        d_ffn: 32,
        max_seq_len: 32,
        ..ModelConfig::tiny()
    };
    let model = build_model::<f32>(&cfg, 11).unwrap().cast::<f64>();
    let mut adapters: AdapterBank<f64> = attach_lora(&cfg, &Proj::ALL, 2, 4.0, 5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for a in adapters.adapters.values_mut() {
        a.b = Tensor::randn(a.b.shape(), 0.1, &mut rng);
    }
    let batch = Batcher::new(&kv_recall(2, 2, 3), 20, 2).unwrap().sequential().unwrap().remove(0);
    Fixture { model, adapters, batch }
}

fn random_masks(cfg: &ModelConfig, sparsity: f64, seed: u64) -> BTreeMap<(usize, Group), ChannelMask> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut masks = BTreeMap::new();
    for l in 0..cfg.n_layers {
        let specs = [
            (Group::QkInner, cfg.d_model / 2, ScoreGranularity::RopePair, cfg.d_model),
            (Group::VoOuter, cfg.d_model, ScoreGranularity::Channel, cfg.d_model),
            (Group::FfnIntermediate, cfg.d_ffn, ScoreGranularity::Channel, cfg.d_ffn),
        ];
        for (g, units, gran, total) in specs {
            let s = random_scores(units, gran, &mut rng);
            masks.insert((l, g), select_mask(&s, sparsity, total, g).unwrap());
        }
    }
    masks
}

/// Loss as a function of one adapter factor.
fn check(fx: &Fixture, key: (usize, Proj), factor_b: bool, masks: Option<&BTreeMap<(usize, Group), ChannelMask>>, split: bool) -> f64 {
    let ad = fx.adapters.get(key.0, key.1).unwrap();
    let x = if factor_b { ad.b.clone() } else { ad.a.clone() };
    let plan = {
        let mut p = SparsityPlan::uniform(fx.model.cfg.n_layers, 0.5, 0.5);
        p.criteria = Criteria::Oracle;
        p
    };
    let partition = split.then(|| TokenPartition::from_loss_mask(&fx.batch.loss_mask, fx.batch.tokens.seq).unwrap());
    let f = |t: &mut Tape<f64>, v: Var| {
        let vars = fx.model.register(t, false);
        let mut av = fx.adapters.register(t);
        let slot = av.vars.get_mut(&key).unwrap();
        if factor_b {
            slot.b = v;
        } else {
            slot.a = v;
        }
        let mut sparse = match masks {
            Some(m) => Some(
                SparseStep::new(
                    &fx.model,
                    &plan,
                    None,
                    fx.batch.tokens.batch,
                    fx.batch.tokens.seq,
                    partition.clone(),
                    0,
                )?
                .with_fixed_masks(m.clone()),
            ),
            None => None,
        };
        batch_loss(t, &fx.model, &vars, Some(&av), &fx.batch, sparse.as_mut())
    };
    grad_check(f, &x, 1e-4).unwrap()
}

const KEYS: [(usize, Proj); 5] = [(0, Proj::Q), (0, Proj::V), (1, Proj::O), (0, Proj::Up), (1, Proj::Down)];

#[test]
fn dense_lora_gradients() {
    let fx = fixture();
    for key in KEYS {
        for b in [false, true] {
            let e = check(&fx, key, b, None, false);
            assert!(e < TOL, "{key:?} b={b}: rel err {e:e}");
        }
    }
}

#[test]
fn masked_lora_gradients() {
    let fx = fixture();
    let masks = random_masks(&fx.model.cfg, 0.5, 1);
    for key in KEYS {
        for b in [false, true] {
            let e = check(&fx, key, b, Some(&masks), false);
            assert!(e < TOL, "{key:?} b={b}: rel err {e:e}");
        }
    }
}

#[test]
fn masked_split_lora_gradients() {
    let fx = fixture();
    let masks = random_masks(&fx.model.cfg, 0.75, 2);
    for key in KEYS {
        for b in [false, true] {
            let e = check(&fx, key, b, Some(&masks), true);
            assert!(e < TOL, "{key:?} b={b}: rel err {e:e}");
        }
    }
}
