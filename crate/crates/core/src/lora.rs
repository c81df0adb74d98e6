//! Low-rank adapters: the only trainable parameters during fine-tuning.
//!
//! Each adapter wraps one projection of one layer and adds
//! `(alpha / r) · (x·A)·B` to the projection's output. Adapters always run at
//! full width; sparsity never touches them.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flops::Branch;
use crate::model::ModelConfig;
use crate::sparse_exec::{main_linear, Slice};
use crate::sparsity::ChannelMask;
use crate::tape::{Tape, Var};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Proj {
    Q,
    K,
    V,
    O,
    Gate,
    Up,
    Down,
}

impl Proj {
    pub const ALL: [Proj; 7] = [Proj::Q, Proj::K, Proj::V, Proj::O, Proj::Gate, Proj::Up, Proj::Down];

    /// Position in [`Proj::ALL`].
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Proj::Q => "q",
            Proj::K => "k",
            Proj::V => "v",
            Proj::O => "o",
            Proj::Gate => "gate",
            Proj::Up => "up",
            Proj::Down => "down",
        }
    }

    /// `(d_in, d_out)` of the projection.
    pub fn dims(self, cfg: &ModelConfig) -> (usize, usize) {
        match self {
            Proj::Q | Proj::K | Proj::V | Proj::O => (cfg.d_model, cfg.d_model),
            Proj::Gate | Proj::Up => (cfg.d_model, cfg.d_ffn),
            Proj::Down => (cfg.d_ffn, cfg.d_model),
        }
    }

    /// Parse a compact target string such as `qkvo` or `QKVUD`
    /// (`g` = gate, `u` = up, `d` = down), or a comma list of names.
    pub fn parse_set(s: &str) -> Result<Vec<Proj>> {
        let s = s.trim();
        let mut out = Vec::new();
        if s.contains(',') {
            for part in s.split(',') {
                out.push(part.trim().parse()?);
            }
        } else {
            for ch in s.chars() {
                out.push(match ch.to_ascii_lowercase() {
                    'q' => Proj::Q,
                    'k' => Proj::K,
                    'v' => Proj::V,
                    'o' => Proj::O,
                    'g' => Proj::Gate,
                    'u' => Proj::Up,
                    'd' => Proj::Down,
                    _ => {
                        return Err(Error::Config(format!(
                            "unknown projection '{ch}' in target set '{s}'"
                        )))
                    }
                });
            }
        }
        out.sort();
        out.dedup();
        Ok(out)
    }
}

impl fmt::Display for Proj {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Proj {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Proj::ALL
            .iter()
            .copied()
            .find(|p| p.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::Config(format!("unknown projection name '{s}'")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoraAdapter<S> {
    /// `d_in × r`, seeded normal.
    pub a: Tensor<S>,
    /// `r × d_out`, zero at attach time.
    pub b: Tensor<S>,
    pub rank: usize,
    pub alpha: f64,
    pub layer: usize,
    pub proj: Proj,
}

impl<S: Scalar> LoraAdapter<S> {
    pub fn scale(&self) -> S {
        S::of(self.alpha / self.rank as f64)
    }
}

/// All adapters of a model, ordered by `(layer, projection)`.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct AdapterBank<S> {
    pub adapters: BTreeMap<(usize, Proj), LoraAdapter<S>>,
}

/// Tape handles of one adapter for the current step.
#[derive(Clone, Copy, Debug)]
pub struct AdapterVar<S> {
    pub a: Var,
    pub b: Var,
    pub scale: S,
}

#[derive(Clone, Debug, Default)]
pub struct AdapterVars<S> {
    pub vars: BTreeMap<(usize, Proj), AdapterVar<S>>,
}

impl<S: Scalar> AdapterVars<S> {
    pub fn get(&self, layer: usize, p: Proj) -> Option<&AdapterVar<S>> {
        self.vars.get(&(layer, p))
    }
}

/// Attach one adapter per `(layer, target)`. `A` is drawn from
/// `N(0, 1/d_in)` with a seeded stream; `B` starts at zero so the initial
/// delta is exactly zero.
pub fn attach_lora<S: Scalar>(
    cfg: &ModelConfig,
    targets: &[Proj],
    rank: usize,
    alpha: f64,
    seed: u64,
) -> Result<AdapterBank<S>> {
    if rank == 0 {
        return Err(Error::Config("LoRA rank must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut adapters = BTreeMap::new();
    let mut targets = targets.to_vec();
    targets.sort();
    targets.dedup();
    for layer in 0..cfg.n_layers {
        for &p in &targets {
            let (d_in, d_out) = p.dims(cfg);
            if rank > d_in.min(d_out) {
                return Err(Error::Config(format!(
                    "LoRA rank {rank} exceeds {p} projection width {}",
                    d_in.min(d_out)
                )));
            }
            let a = Tensor::randn(&[d_in, rank], 1.0 / (d_in as f64).sqrt(), &mut rng);
            adapters.insert(
                (layer, p),
                LoraAdapter {
                    a,
                    b: Tensor::zeros(&[rank, d_out]),
                    rank,
                    alpha,
                    layer,
                    proj: p,
                },
            );
        }
    }
    Ok(AdapterBank { adapters })
}

impl<S: Scalar> AdapterBank<S> {
    pub fn len(&self) -> usize {
        self.adapters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.adapters.is_empty()
    }

    pub fn get(&self, layer: usize, p: Proj) -> Option<&LoraAdapter<S>> {
        self.adapters.get(&(layer, p))
    }

    /// `(layer, proj, rank)` triples for FLOP accounting.
    pub fn targets(&self) -> Vec<(usize, Proj, usize)> {
        self.adapters.values().map(|a| (a.layer, a.proj, a.rank)).collect()
    }

    /// Put every adapter matrix on the tape as a trainable leaf.
    pub fn register(&self, tape: &mut Tape<S>) -> AdapterVars<S> {
        let mut vars = BTreeMap::new();
        for (&key, ad) in &self.adapters {
            let a = tape.param(ad.a.clone());
            let b = tape.param(ad.b.clone());
            vars.insert(
                key,
                AdapterVar {
                    a,
                    b,
                    scale: ad.scale(),
                },
            );
        }
        AdapterVars { vars }
    }

    pub fn cast<T: Scalar>(&self) -> AdapterBank<T> {
        AdapterBank {
            adapters: self
                .adapters
                .iter()
                .map(|(&k, a)| {
                    (
                        k,
                        LoraAdapter {
                            a: a.a.cast(),
                            b: a.b.cast(),
                            rank: a.rank,
                            alpha: a.alpha,
                            layer: a.layer,
                            proj: a.proj,
                        },
                    )
                })
                .collect(),
        }
    }

    /// Number of trainable scalars.
    pub fn num_params(&self) -> usize {
        self.adapters.values().map(|a| a.a.len() + a.b.len()).sum()
    }
}

/// `scale · (x·A)·B`, charged to the LoRA branch of the current layer.
pub fn lora_delta<S: Scalar>(tape: &mut Tape<S>, x: Var, ad: &AdapterVar<S>) -> Result<Var> {
    let layer = tape.scope().layer;
    let prev = tape.set_scope(layer, Branch::Lora);
    let res = (|| {
        let xa = tape.matmul(x, ad.a)?;
        let xab = tape.matmul(xa, ad.b)?;
        Ok(tape.scale(xab, ad.scale))
    })();
    tape.restore_scope(prev);
    res
}

/// Main branch (optionally with pruned output channels) plus the dense LoRA
/// delta. The delta still reaches every output channel.
pub fn merged_linear<S: Scalar>(
    tape: &mut Tape<S>,
    x: Var,
    w: &Arc<Tensor<S>>,
    adapter: Option<&AdapterVar<S>>,
    mask: Option<&ChannelMask>,
) -> Result<Var> {
    if let Some(m) = mask {
        if m.total != w.cols() {
            return Err(Error::dim("merged_linear mask", w.shape(), &[m.total]));
        }
    }
    let slice = match mask {
        Some(m) => Slice::Out(m),
        None => Slice::Dense,
    };
    let main = main_linear(tape, x, w, slice, None, None)?;
    match adapter {
        Some(ad) => {
            let d = lora_delta(tape, x, ad)?;
            tape.add(main, d)
        }
        None => Ok(main),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_target_sets() {
        assert_eq!(Proj::parse_set("qkvo").unwrap(), vec![Proj::Q, Proj::K, Proj::V, Proj::O]);
        assert_eq!(
            Proj::parse_set("QKVUD").unwrap(),
            vec![Proj::Q, Proj::K, Proj::V, Proj::Up, Proj::Down]
        );
        assert_eq!(Proj::parse_set("q, gate").unwrap(), vec![Proj::Q, Proj::Gate]);
        assert!(matches!(Proj::parse_set("qx"), Err(Error::Config(_))));
        assert!(matches!("proj_z".parse::<Proj>(), Err(Error::Config(_))));
    }

    #[test]
    fn attach_counts_and_shapes() {
        let cfg = ModelConfig {
            n_layers: 8,
            d_model: 256,
            n_heads: 8,
            d_ffn: 1024,
            ..ModelConfig::default()
        };
        let bank = attach_lora::<f32>(&cfg, &Proj::parse_set("qkvo").unwrap(), 32, 64.0, 0).unwrap();
        assert_eq!(bank.len(), 32);
        let ad = bank.get(0, Proj::Q).unwrap();
        assert_eq!(ad.a.shape(), &[256, 32]);
        assert_eq!(ad.b.shape(), &[32, 256]);
        assert_eq!(ad.scale(), 2.0);
        assert!(ad.b.data().iter().all(|&v| v == 0.0));

        let down = attach_lora::<f32>(&cfg, &[Proj::Down], 32, 64.0, 0).unwrap();
        assert_eq!(down.get(3, Proj::Down).unwrap().a.shape(), &[1024, 32]);
    }
}
