//! Floating-point operation accounting.
//!
//! Two independent routes produce per-step counts: the tape increments
//! [`FlopCounts`] at every matmul call site (instrumented), and
//! [`analytic_step`] derives the same numbers in closed form from the model
//! geometry, the plan, and the token partition. Ledger closure requires the
//! two to agree exactly.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::lora::Proj;
use crate::model::ModelConfig;
use crate::plan::{Granularity, LayerSparsity};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlopPath {
    MainFwd,
    MainBwdInput,
    /// Only produced when base weights are trainable (dense pre-training).
    MainBwdWeight,
    LoraFwd,
    LoraBwd,
    Estimator,
    Head,
}

impl FlopPath {
    pub const ALL: [FlopPath; 7] = [
        FlopPath::MainFwd,
        FlopPath::MainBwdInput,
        FlopPath::MainBwdWeight,
        FlopPath::LoraFwd,
        FlopPath::LoraBwd,
        FlopPath::Estimator,
        FlopPath::Head,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FlopPath::MainFwd => "main_fwd",
            FlopPath::MainBwdInput => "main_bwd_input",
            FlopPath::MainBwdWeight => "main_bwd_weight",
            FlopPath::LoraFwd => "lora_fwd",
            FlopPath::LoraBwd => "lora_bwd",
            FlopPath::Estimator => "estimator",
            FlopPath::Head => "head",
        }
    }
}

/// Which part of the network a tape node belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Branch {
    Main,
    Lora,
    Head,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Scope {
    pub layer: Option<usize>,
    pub branch: Branch,
}

impl Default for Scope {
    fn default() -> Self {
        Scope {
            layer: None,
            branch: Branch::Head,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LinearMode {
    Fwd,
    BwdInput,
    BwdWeight,
}

impl Scope {
    pub fn path(self, mode: LinearMode) -> FlopPath {
        match (self.branch, mode) {
            (Branch::Main, LinearMode::Fwd) => FlopPath::MainFwd,
            (Branch::Main, LinearMode::BwdInput) => FlopPath::MainBwdInput,
            (Branch::Main, LinearMode::BwdWeight) => FlopPath::MainBwdWeight,
            (Branch::Lora, LinearMode::Fwd) => FlopPath::LoraFwd,
            (Branch::Lora, _) => FlopPath::LoraBwd,
            (Branch::Head, _) => FlopPath::Head,
        }
    }
}

/// FLOPs of one dense linear map over `tokens` rows. Every mode costs the same
/// `2·T·d_in·d_out`; the mode only decides which ledger path it lands in.
pub fn flops_linear(tokens: usize, d_in: usize, d_out: usize, _mode: LinearMode) -> u64 {
    2 * tokens as u64 * d_in as u64 * d_out as u64
}

/// Counts keyed by `(layer, path)`; `None` is the non-layer slot (LM head).
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct FlopCounts {
    map: BTreeMap<(Option<usize>, FlopPath), u64>,
}

impl FlopCounts {
    pub fn add(&mut self, layer: Option<usize>, path: FlopPath, n: u64) {
        if n > 0 {
            *self.map.entry((layer, path)).or_default() += n;
        }
    }

    pub fn merge(&mut self, other: &FlopCounts) {
        for (&(l, p), &n) in &other.map {
            self.add(l, p, n);
        }
    }

    pub fn get(&self, layer: Option<usize>, path: FlopPath) -> u64 {
        self.map.get(&(layer, path)).copied().unwrap_or(0)
    }

    pub fn total(&self) -> u64 {
        self.map.values().sum()
    }

    pub fn path_total(&self, path: FlopPath) -> u64 {
        self.map
            .iter()
            .filter(|((_, p), _)| *p == path)
            .map(|(_, n)| n)
            .sum()
    }

    pub fn layer_total(&self, layer: Option<usize>) -> u64 {
        self.map
            .iter()
            .filter(|((l, _), _)| *l == layer)
            .map(|(_, n)| n)
            .sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (Option<usize>, FlopPath, u64)> + '_ {
        self.map.iter().map(|(&(l, p), &n)| (l, p, n))
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

/// Token geometry of one step.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StepGeometry {
    pub batch: usize,
    pub seq_len: usize,
    /// Rows routed through the sparse path. Equals `batch·seq_len` without
    /// token splitting.
    pub context_tokens: usize,
}

impl StepGeometry {
    pub fn tokens(&self) -> usize {
        self.batch * self.seq_len
    }

    pub fn output_tokens(&self) -> usize {
        self.tokens() - self.context_tokens
    }
}

/// Kept-unit widths of one sparsified layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct KeptWidths {
    pub ffn: Option<usize>,
    pub qk: Option<usize>,
    pub vo: Option<usize>,
}

impl KeptWidths {
    pub fn for_layer(cfg: &ModelConfig, ls: &LayerSparsity, qk_gran: Granularity) -> Self {
        let kept = |sp: f64, total: usize, unit: usize| -> Option<usize> {
            if sp <= 0.0 {
                None
            } else {
                Some(crate::sparsity::kept_units(total / unit, sp) * unit)
            }
        };
        let qk_unit = match qk_gran {
            Granularity::Channel => 1,
            Granularity::RopePair => 2,
            Granularity::Head => cfg.d_head(),
        };
        KeptWidths {
            ffn: kept(ls.ffn, cfg.d_ffn, 1),
            qk: kept(ls.qkvo, cfg.d_model, qk_unit),
            vo: kept(ls.qkvo, cfg.d_model, 1),
        }
    }

    pub fn is_dense(&self) -> bool {
        self.ffn.is_none() && self.qk.is_none() && self.vo.is_none()
    }
}

/// Everything the closed-form count needs about one step.
pub struct AnalyticInput<'a> {
    pub cfg: &'a ModelConfig,
    pub geometry: StepGeometry,
    /// Sorted `(layer, projection, rank)` adapter targets.
    pub adapters: &'a [(usize, Proj, usize)],
    /// Per-layer kept widths; dense layers are `KeptWidths::default()`.
    pub kept: &'a [KeptWidths],
    /// Estimator rank when the step builds masks with the SVD estimator.
    pub estimator_rank: Option<usize>,
    /// Which groups (ffn, qk, vo) consult the estimator; the random metric
    /// does not.
    pub estimator_groups: [bool; 3],
    /// Whether the estimator statistics include output tokens.
    pub estimator_all_tokens: bool,
    /// Whether a backward pass runs.
    pub backward: bool,
}

/// Closed-form FLOPs for one step of LoRA fine-tuning with frozen base weights.
///
/// Mirrors the execution rules of the forward and backward passes: a main
/// branch linear map costs `2·T·d_in·d_out` forward, and again backward only
/// when its input carries gradient; LoRA factors cost forward, backward into
/// the factor weights, and backward into their inputs only when those carry
/// gradient; causal attention costs `2·d_head` per (query, key ≤ query) pair for
/// each of the score and mixing products.
pub fn analytic_step(inp: &AnalyticInput<'_>) -> FlopCounts {
    let cfg = inp.cfg;
    let g = inp.geometry;
    let t_all = g.tokens();
    let t_ctx = g.context_tokens;
    let t_out = g.output_tokens();
    let d = cfg.d_model;
    let mut out = FlopCounts::default();

    let has = |layer: usize, p: Proj| -> Option<usize> {
        inp.adapters
            .iter()
            .find(|(l, q, _)| *l == layer && *q == p)
            .map(|&(_, _, r)| r)
    };

    // Gradient liveness of the residual stream entering the current layer.
    let mut live = false;
    for layer in 0..cfg.n_layers {
        let l = Some(layer);
        let kw = inp.kept.get(layer).copied().unwrap_or_default();

        // Main-branch linear map with an optional kept output (or input) width.
        let main = |out: &mut FlopCounts, d_in: usize, d_out_full: usize, kept: Option<usize>, sliced_in: bool, grad_in: bool| {
            let (fi, fo) = match kept {
                Some(k) if sliced_in => (k, d_out_full),
                Some(k) => (d_in, k),
                None => (d_in, d_out_full),
            };
            let f = match kept {
                Some(_) => {
                    flops_linear(t_ctx, fi, fo, LinearMode::Fwd)
                        + flops_linear(t_out, d_in, d_out_full, LinearMode::Fwd)
                }
                None => flops_linear(t_all, d_in, d_out_full, LinearMode::Fwd),
            };
            out.add(l, FlopPath::MainFwd, f);
            if inp.backward && grad_in {
                out.add(l, FlopPath::MainBwdInput, f);
            }
        };
        let lora = |out: &mut FlopCounts, p: Proj, d_in: usize, d_out: usize, grad_in: bool| {
            if let Some(r) = has(layer, p) {
                let fa = flops_linear(t_all, d_in, r, LinearMode::Fwd);
                let fb = flops_linear(t_all, r, d_out, LinearMode::Fwd);
                out.add(l, FlopPath::LoraFwd, fa + fb);
                if inp.backward {
                    // dB, d(xA), dA; dx only if the input carries gradient.
                    let mut bw = 2 * fb + fa;
                    if grad_in {
                        bw += fa;
                    }
                    out.add(l, FlopPath::LoraBwd, bw);
                }
            }
        };

        // Attention projections.
        lora(&mut out, Proj::Q, d, d, live);
        lora(&mut out, Proj::K, d, d, live);
        lora(&mut out, Proj::V, d, d, live);
        main(&mut out, d, d, kw.qk, false, live);
        main(&mut out, d, d, kw.qk, false, live);
        main(&mut out, d, d, kw.vo, false, live);

        let q_live = live || has(layer, Proj::Q).is_some();
        let k_live = live || has(layer, Proj::K).is_some();
        let v_live = live || has(layer, Proj::V).is_some();
        let pairs = (g.batch * cfg.n_heads * g.seq_len * (g.seq_len + 1) / 2) as u64;
        let per_pair = 2 * cfg.d_head() as u64;
        out.add(l, FlopPath::MainFwd, 2 * pairs * per_pair);
        if inp.backward {
            let mut n = 0;
            if q_live || k_live {
                n += 1; // dP
            }
            if v_live {
                n += 1;
            }
            if q_live {
                n += 1;
            }
            if k_live {
                n += 1;
            }
            out.add(l, FlopPath::MainBwdInput, n * pairs * per_pair);
        }
        let attn_live = q_live || k_live || v_live;

        lora(&mut out, Proj::O, d, d, attn_live);
        main(&mut out, d, d, kw.vo, true, attn_live);
        live = attn_live || has(layer, Proj::O).is_some();

        // FFN block.
        lora(&mut out, Proj::Gate, d, cfg.d_ffn, live);
        lora(&mut out, Proj::Up, d, cfg.d_ffn, live);
        main(&mut out, d, cfg.d_ffn, kw.ffn, false, live);
        main(&mut out, d, cfg.d_ffn, kw.ffn, false, live);
        let inter_live = live || has(layer, Proj::Gate).is_some() || has(layer, Proj::Up).is_some();
        lora(&mut out, Proj::Down, cfg.d_ffn, d, inter_live);
        main(&mut out, cfg.d_ffn, d, kw.ffn, true, inter_live);
        live = inter_live || has(layer, Proj::Down).is_some();

        if let Some(k) = inp.estimator_rank {
            if !kw.is_dense() {
                let t_est = if inp.estimator_all_tokens { t_all } else { t_ctx } as u64;
                let app = |d1: usize, d2: usize| 2 * t_est * k as u64 * (d1 + d2) as u64;
                let mut e = 0;
                let [ffn, qk, vo] = inp.estimator_groups;
                if ffn && kw.ffn.is_some() {
                    e += 2 * app(d, cfg.d_ffn);
                }
                if qk && kw.qk.is_some() {
                    e += 2 * app(d, d);
                }
                if vo && kw.vo.is_some() {
                    e += app(d, d);
                }
                out.add(l, FlopPath::Estimator, e);
            }
        }
    }

    let head = flops_linear(t_all, d, cfg.vocab_size, LinearMode::Fwd);
    out.add(None, FlopPath::Head, head);
    if inp.backward && live {
        out.add(None, FlopPath::Head, head);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_count_hand_values() {
        assert_eq!(flops_linear(2, 3, 4, LinearMode::Fwd), 48);
        assert_eq!(flops_linear(2, 3, 2, LinearMode::BwdInput), 24);
    }

    #[test]
    fn counts_merge_and_totals() {
        let mut a = FlopCounts::default();
        a.add(Some(0), FlopPath::MainFwd, 10);
        a.add(None, FlopPath::Head, 5);
        let mut b = FlopCounts::default();
        b.add(Some(0), FlopPath::MainFwd, 1);
        b.add(Some(1), FlopPath::Estimator, 2);
        a.merge(&b);
        assert_eq!(a.get(Some(0), FlopPath::MainFwd), 11);
        assert_eq!(a.total(), 18);
        assert_eq!(a.path_total(FlopPath::Estimator), 2);
        assert_eq!(a.layer_total(Some(0)), 11);
    }
}
