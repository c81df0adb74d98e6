//! Contextual channel selection: oracle and estimated scores, top-k masks,
//! and the per-step mask builder consulted by the forward pass.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flops::FlopCounts;
use crate::linalg::{
    col_l2_norms, estimator_apply, factors_from_svd, svd_jacobi, svd_topk, topk_indices, ScoreGranularity, ScoreVector,
    SvdFactors,
};
use crate::lora::Proj;
use crate::model::{apply_rope, attention, attention_probs, ffn_intermediate, row_positions, LayerWeights, Model, TokenBatch};
use crate::plan::{Criteria, Granularity, Metric, SparsityPlan};
use crate::sparse_exec::{SliceCache, TokenPartition};
use crate::tape::AttnShape;
use crate::tensor::{Scalar, Tensor};

/// Which paired projections a mask governs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    /// Gate/up output columns and down input rows.
    FfnIntermediate,
    /// V output columns and O input rows.
    VoOuter,
    /// Q and K output columns.
    QkInner,
}

impl Group {
    pub const ALL: [Group; 3] = [Group::FfnIntermediate, Group::QkInner, Group::VoOuter];

    pub fn name(self) -> &'static str {
        match self {
            Group::FfnIntermediate => "ffn",
            Group::VoOuter => "vo",
            Group::QkInner => "qk",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelMask {
    /// Ascending kept channel indices.
    pub kept: Vec<usize>,
    pub total: usize,
    pub granularity: ScoreGranularity,
    pub group: Group,
}

impl ChannelMask {
    pub fn full(total: usize, group: Group) -> Self {
        ChannelMask {
            kept: (0..total).collect(),
            total,
            granularity: ScoreGranularity::Channel,
            group,
        }
    }

    pub fn len(&self) -> usize {
        self.kept.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kept.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.kept.len() == self.total
    }

    /// Fraction of channels kept.
    pub fn density(&self) -> f64 {
        self.kept.len() as f64 / self.total.max(1) as f64
    }

    /// Boolean view over all channels.
    pub fn flags(&self) -> Vec<bool> {
        let mut f = vec![false; self.total];
        for &i in &self.kept {
            f[i] = true;
        }
        f
    }

    /// Indices ascending, unique and in range.
    pub fn check(&self) -> Result<()> {
        if self.kept.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Precondition("mask indices not strictly ascending".into()));
        }
        if self.kept.last().is_some_and(|&i| i >= self.total) {
            return Err(Error::Precondition(format!("mask index out of range {}", self.total)));
        }
        Ok(())
    }

    /// Every rotary pair is kept whole or dropped whole.
    pub fn check_rope_pairs(&self) -> Result<()> {
        let f = self.flags();
        match f.chunks(2).position(|p| p.len() == 2 && p[0] != p[1]) {
            Some(i) => Err(Error::Precondition(format!(
                "{} mask splits rotary pair {i}; use rope_pair or head granularity",
                self.group.name()
            ))),
            None => Ok(()),
        }
    }

    /// Every head of width `d_head` is kept whole or dropped whole.
    pub fn check_heads(&self, d_head: usize) -> Result<()> {
        let f = self.flags();
        match f.chunks(d_head).position(|h| h.iter().any(|&b| b != h[0])) {
            Some(i) => Err(Error::Precondition(format!("mask splits head {i}"))),
            None => Ok(()),
        }
    }
}

/// `⌈(1 − sparsity)·units⌉`, guarding against the float error in `1 − s`.
pub fn kept_units(units: usize, sparsity: f64) -> usize {
    if sparsity <= 0.0 {
        return units;
    }
    let k = ((1.0 - sparsity) * units as f64 - 1e-9).ceil();
    (k.max(0.0) as usize).min(units)
}

/// Keep the top `⌈(1−sparsity)·units⌉` units of `s`, expanded to channel
/// indices of a `total`-wide projection.
pub fn select_mask(s: &ScoreVector, sparsity: f64, total: usize, group: Group) -> Result<ChannelMask> {
    if !(0.0..=1.0).contains(&sparsity) {
        return Err(Error::Precondition(format!("sparsity {sparsity} not in [0, 1]")));
    }
    let units = s.len();
    if units == 0 || !total.is_multiple_of(units) {
        return Err(Error::dim("select_mask", &[units], &[total]));
    }
    let width = total / units;
    let expected = match s.granularity {
        ScoreGranularity::Channel => 1,
        ScoreGranularity::RopePair => 2,
        ScoreGranularity::Head => width,
    };
    if width != expected {
        return Err(Error::dim("select_mask unit width", &[width], &[expected]));
    }
    let top = topk_indices(s, kept_units(units, sparsity))?;
    let kept = top.iter().flat_map(|&u| u * width..(u + 1) * width).collect();
    Ok(ChannelMask {
        kept,
        total,
        granularity: s.granularity,
        group,
    })
}

/// `|a ∩ b| / |a|` for masks of the same width, group and size.
pub fn mask_overlap(a: &ChannelMask, b: &ChannelMask) -> Result<f64> {
    if a.total != b.total || a.group != b.group {
        return Err(Error::Precondition(format!(
            "masks over different channels ({} {:?} vs {} {:?})",
            a.total, a.group, b.total, b.group
        )));
    }
    if a.len() != b.len() {
        return Err(Error::Precondition(format!(
            "mask sizes differ ({} vs {})",
            a.len(),
            b.len()
        )));
    }
    if a.is_empty() {
        return Ok(1.0);
    }
    let fb = b.flags();
    let common = a.kept.iter().filter(|&&i| fb[i]).count();
    Ok(common as f64 / a.len() as f64)
}

pub fn score_granularity(g: Granularity) -> ScoreGranularity {
    match g {
        Granularity::Channel => ScoreGranularity::Channel,
        Granularity::RopePair => ScoreGranularity::RopePair,
        Granularity::Head => ScoreGranularity::Head,
    }
}

/// Sum channel scores into pairs or heads.
pub fn aggregate(channel: &[f64], g: ScoreGranularity, d_head: usize) -> ScoreVector {
    let width = match g {
        ScoreGranularity::Channel => 1,
        ScoreGranularity::RopePair => 2,
        ScoreGranularity::Head => d_head,
    };
    ScoreVector {
        scores: channel.chunks(width).map(|c| c.iter().sum()).collect(),
        granularity: g,
    }
}

/// Column norms of the FFN intermediate `SiLU(x·W_gate) ⊙ (x·W_up)`.
pub fn ffn_oracle_scores<S: Scalar>(x: &Tensor<S>, lw: &LayerWeights<S>) -> Result<ScoreVector> {
    Ok(col_l2_norms(&ffn_intermediate(x, lw)?))
}

/// Column norms of the input to `W_O`.
pub fn vo_oracle_scores<S: Scalar>(attn_out: &Tensor<S>) -> ScoreVector {
    col_l2_norms(attn_out)
}

fn check_qk<S: Scalar>(q: &Tensor<S>, k: &Tensor<S>) -> Result<()> {
    if q.shape() != k.shape() {
        return Err(Error::dim("qk scores", q.shape(), k.shape()));
    }
    Ok(())
}

/// `s[c] = ‖Q[:,c]‖·‖K[:,c]‖`, summed into pairs or heads.
pub fn qk_oracle_scores<S: Scalar>(
    q: &Tensor<S>,
    k: &Tensor<S>,
    g: ScoreGranularity,
    d_head: usize,
) -> Result<ScoreVector> {
    check_qk(q, k)?;
    let (nq, nk) = (col_l2_norms(q).scores, col_l2_norms(k).scores);
    let s: Vec<f64> = nq.iter().zip(&nk).map(|(a, b)| a * b).collect();
    Ok(aggregate(&s, g, d_head))
}

/// L2 comparator for QK: `s[c] = ‖[Q;K][:,c]‖`, the plain activation norm of
/// the score product's operands.
pub fn qk_l2_scores<S: Scalar>(
    q: &Tensor<S>,
    k: &Tensor<S>,
    g: ScoreGranularity,
    d_head: usize,
) -> Result<ScoreVector> {
    check_qk(q, k)?;
    let (nq, nk) = (col_l2_norms(q).scores, col_l2_norms(k).scores);
    let s: Vec<f64> = nq.iter().zip(&nk).map(|(a, b)| (a * a + b * b).sqrt()).collect();
    Ok(aggregate(&s, g, d_head))
}

/// Wanda-style FFN comparator: `‖x_int[:,c]‖ · ‖W_down[c,:]‖`.
pub fn wanda_scores<S: Scalar>(x_int: &Tensor<S>, w_down: &Tensor<S>) -> Result<ScoreVector> {
    if x_int.cols() != w_down.rows() {
        return Err(Error::dim("wanda", x_int.shape(), w_down.shape()));
    }
    let act = col_l2_norms(x_int).scores;
    let scores = act
        .iter()
        .enumerate()
        .map(|(c, a)| {
            let w: f64 = w_down.row(c).iter().map(|v| v.f64() * v.f64()).sum();
            a * w.sqrt()
        })
        .collect();
    Ok(ScoreVector::channels(scores))
}

/// Uniform scores from a seeded stream, independent of the data.
pub fn random_scores<R: Rng>(units: usize, g: ScoreGranularity, rng: &mut R) -> ScoreVector {
    ScoreVector {
        scores: (0..units).map(|_| rng.gen::<f64>()).collect(),
        granularity: g,
    }
}

/// Rank-k factors of the projections the estimator needs, per layer.
#[derive(Clone, Debug, PartialEq)]
pub struct EstimatorBank<S> {
    pub rank: usize,
    pub factors: BTreeMap<(usize, Proj), SvdFactors<S>>,
}

/// Projections with estimator factors: gate and up for FFN, Q and K for QK, V for VO.
pub const ESTIMATED: [Proj; 5] = [Proj::Q, Proj::K, Proj::V, Proj::Gate, Proj::Up];

impl<S: Scalar> EstimatorBank<S> {
    /// Decompose every estimated projection of `layers`.
    pub fn build(model: &Model<S>, rank: usize, layers: &[usize]) -> Result<Self> {
        let mut factors = BTreeMap::new();
        for &l in layers {
            if l >= model.layers.len() {
                return Err(Error::Config(format!("estimator layer L{l} outside model")));
            }
            for p in ESTIMATED {
                let label = format!("L{l}.{p}");
                log::debug!("decomposing {label} at rank {rank}");
                factors.insert((l, p), svd_topk(model.weight(l, p), rank, &label)?);
            }
        }
        Ok(EstimatorBank { rank, factors })
    }

    /// One bank per rank from a single decomposition of each weight.
    pub fn build_ranks(model: &Model<S>, ranks: &[usize], layers: &[usize]) -> Result<Vec<Self>> {
        let mut banks: Vec<Self> = ranks
            .iter()
            .map(|&rank| EstimatorBank {
                rank,
                factors: BTreeMap::new(),
            })
            .collect();
        for &l in layers {
            if l >= model.layers.len() {
                return Err(Error::Config(format!("estimator layer L{l} outside model")));
            }
            for p in ESTIMATED {
                let label = format!("L{l}.{p}");
                let w = model.weight(l, p);
                let svd = svd_jacobi(w, &label)?;
                for bank in &mut banks {
                    if bank.rank == 0 || bank.rank > w.rows().min(w.cols()) {
                        return Err(Error::Config(format!(
                            "rank {} invalid for {label} ({}x{})",
                            bank.rank,
                            w.rows(),
                            w.cols()
                        )));
                    }
                    bank.factors.insert((l, p), factors_from_svd(&svd, bank.rank, &label));
                }
            }
        }
        Ok(banks)
    }

    pub fn get(&self, layer: usize, p: Proj) -> Result<&SvdFactors<S>> {
        self.factors.get(&(layer, p)).ok_or_else(|| {
            Error::Config(format!("estimator bank has no {p} factors for layer L{layer}"))
        })
    }

    pub fn layers(&self) -> Vec<usize> {
        let mut l: Vec<usize> = self.factors.keys().map(|k| k.0).collect();
        l.dedup();
        l
    }

    pub fn cast<T: Scalar>(&self) -> EstimatorBank<T> {
        EstimatorBank {
            rank: self.rank,
            factors: self
                .factors
                .iter()
                .map(|(&k, f)| {
                    (
                        k,
                        SvdFactors {
                            w_a: f.w_a.cast(),
                            w_b: f.w_b.cast(),
                            rank: f.rank,
                            source: f.source.clone(),
                        },
                    )
                })
                .collect(),
        }
    }
}

/// How one group turns activations into scores.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ScoreRule {
    pub metric: Metric,
    pub granularity: ScoreGranularity,
    pub d_head: usize,
}

impl ScoreRule {
    pub fn default_for(group: Group, d_head: usize) -> Self {
        ScoreRule {
            metric: match group {
                Group::QkInner => Metric::QkNorm,
                _ => Metric::L2,
            },
            granularity: ScoreGranularity::Channel,
            d_head,
        }
    }
}

/// Scores from estimated activations. Random rules are not handled here.
pub fn estimate_scores<S: Scalar>(
    x: &Tensor<S>,
    bank: &EstimatorBank<S>,
    layer: usize,
    group: Group,
    rule: ScoreRule,
    w_down: Option<&Tensor<S>>,
    counts: &mut FlopCounts,
) -> Result<ScoreVector> {
    let l = Some(layer);
    match group {
        Group::FfnIntermediate => {
            let g = estimator_apply(x, bank.get(layer, Proj::Gate)?, counts, l)?;
            let u = estimator_apply(x, bank.get(layer, Proj::Up)?, counts, l)?;
            let inter = silu_mul(&g, &u);
            match rule.metric {
                Metric::Wanda => {
                    let w = w_down.ok_or_else(|| Error::Config("wanda scores need W_down".into()))?;
                    wanda_scores(&inter, w)
                }
                _ => Ok(col_l2_norms(&inter)),
            }
        }
        Group::QkInner => {
            let q = estimator_apply(x, bank.get(layer, Proj::Q)?, counts, l)?;
            let k = estimator_apply(x, bank.get(layer, Proj::K)?, counts, l)?;
            match rule.metric {
                Metric::L2 => qk_l2_scores(&q, &k, rule.granularity, rule.d_head),
                _ => qk_oracle_scores(&q, &k, rule.granularity, rule.d_head),
            }
        }
        Group::VoOuter => Ok(col_l2_norms(&estimator_apply(x, bank.get(layer, Proj::V)?, counts, l)?)),
    }
}

fn silu_mul<S: Scalar>(g: &Tensor<S>, u: &Tensor<S>) -> Tensor<S> {
    let data = g
        .data()
        .iter()
        .zip(u.data())
        .map(|(&g, &u)| g / (S::one() + (-g).exp()) * u)
        .collect();
    Tensor::new(g.shape().to_vec(), data).expect("same shape")
}

fn take_rows<S: Scalar>(x: &Tensor<S>, rows: Option<&[usize]>) -> Tensor<S> {
    match rows {
        None => x.clone(),
        Some(rows) => {
            let d = x.cols();
            let mut data = Vec::with_capacity(rows.len() * d);
            for &r in rows {
                data.extend_from_slice(x.row(r));
            }
            Tensor::new(vec![rows.len(), d], data).expect("row gather")
        }
    }
}

/// Per-step sparsity state: builds each layer's masks from the current
/// activations and carries the token partition and slice buffers used by
/// the sliced paths.
pub struct SparseStep<'a, S: Scalar> {
    model: &'a Model<S>,
    plan: &'a SparsityPlan,
    bank: Option<&'a EstimatorBank<S>>,
    shape: AttnShape,
    score_rows: Option<Vec<usize>>,
    rng: ChaCha8Rng,
    fixed: Option<BTreeMap<(usize, Group), ChannelMask>>,
    pub partition: Option<TokenPartition>,
    pub cache: Option<&'a mut SliceCache<S>>,
    /// FLOPs spent applying the estimator this step.
    pub estimator_flops: FlopCounts,
    /// Masks chosen this step, for diagnostics.
    pub masks: BTreeMap<(usize, Group), ChannelMask>,
}

impl<'a, S: Scalar> SparseStep<'a, S> {
    pub fn new(
        model: &'a Model<S>,
        plan: &'a SparsityPlan,
        bank: Option<&'a EstimatorBank<S>>,
        batch: usize,
        seq: usize,
        partition: Option<TokenPartition>,
        seed: u64,
    ) -> Result<Self> {
        plan.validate(model.cfg.n_layers)?;
        if plan.estimator_groups().iter().any(|&g| g) {
            let bank = bank.ok_or_else(|| Error::Config("SVD criteria need an estimator bank".into()))?;
            if bank.rank != plan.estimator_rank {
                return Err(Error::Config(format!(
                    "estimator bank has rank {} but the plan asks for rank {}",
                    bank.rank, plan.estimator_rank
                )));
            }
            for (&l, ls) in &plan.layers {
                let groups = plan.estimator_groups();
                let mut need = Vec::new();
                if ls.ffn > 0.0 && groups[0] {
                    need.extend([Proj::Gate, Proj::Up]);
                }
                if ls.qkvo > 0.0 && groups[1] {
                    need.extend([Proj::Q, Proj::K]);
                }
                if ls.qkvo > 0.0 && groups[2] {
                    need.push(Proj::V);
                }
                for p in need {
                    bank.get(l, p)?;
                }
            }
        }
        if let Some(p) = &partition {
            if p.rows() != batch * seq {
                return Err(Error::dim("partition", &[batch, seq], &[p.rows()]));
            }
        }
        let score_rows = match &partition {
            Some(p) if !plan.estimator_all_tokens => Some(p.context_rows().to_vec()),
            _ => None,
        };
        Ok(SparseStep {
            model,
            plan,
            bank,
            shape: AttnShape {
                batch,
                seq,
                heads: model.cfg.n_heads,
                d_head: model.cfg.d_head(),
            },
            score_rows,
            rng: ChaCha8Rng::seed_from_u64(seed),
            fixed: None,
            partition,
            cache: None,
            estimator_flops: FlopCounts::default(),
            masks: BTreeMap::new(),
        })
    }

    /// Use exactly these masks instead of scoring; absent entries stay dense.
    pub fn with_fixed_masks(mut self, masks: BTreeMap<(usize, Group), ChannelMask>) -> Self {
        self.fixed = Some(masks);
        self
    }

    pub fn with_cache(mut self, cache: &'a mut SliceCache<S>) -> Self {
        self.cache = Some(cache);
        self
    }

    fn rule(&self, group: Group) -> ScoreRule {
        let m = self.plan.metrics;
        let cfg = &self.model.cfg;
        match group {
            Group::FfnIntermediate => ScoreRule {
                metric: m.ffn,
                granularity: ScoreGranularity::Channel,
                d_head: cfg.d_head(),
            },
            Group::VoOuter => ScoreRule {
                metric: m.vo,
                granularity: ScoreGranularity::Channel,
                d_head: cfg.d_head(),
            },
            Group::QkInner => ScoreRule {
                metric: m.qk,
                granularity: score_granularity(self.plan.qk_granularity(cfg.rope)),
                d_head: cfg.d_head(),
            },
        }
    }

    fn units(&self, group: Group, rule: ScoreRule) -> usize {
        let cfg = &self.model.cfg;
        let total = match group {
            Group::FfnIntermediate => cfg.d_ffn,
            _ => cfg.d_model,
        };
        match rule.granularity {
            ScoreGranularity::Channel => total,
            ScoreGranularity::RopePair => total / 2,
            ScoreGranularity::Head => total / rule.d_head,
        }
    }

    fn finish(&mut self, layer: usize, group: Group, s: ScoreVector, sparsity: f64) -> Result<ChannelMask> {
        let total = match group {
            Group::FfnIntermediate => self.model.cfg.d_ffn,
            _ => self.model.cfg.d_model,
        };
        let m = select_mask(&s, sparsity, total, group)?;
        self.masks.insert((layer, group), m.clone());
        Ok(m)
    }

    fn fixed_mask(&mut self, layer: usize, group: Group) -> Option<ChannelMask> {
        let m = self.fixed.as_ref()?.get(&(layer, group)).cloned();
        if let Some(m) = &m {
            self.masks.insert((layer, group), m.clone());
        }
        m
    }

    /// Masks for the QK and VO groups of `layer` from its normed input `h`.
    pub fn attention_masks(
        &mut self,
        layer: usize,
        h: &Tensor<S>,
    ) -> Result<(Option<ChannelMask>, Option<ChannelMask>)> {
        if self.fixed.is_some() {
            return Ok((
                self.fixed_mask(layer, Group::QkInner),
                self.fixed_mask(layer, Group::VoOuter),
            ));
        }
        let sp = self.plan.layer(layer).qkvo;
        if sp <= 0.0 {
            return Ok((None, None));
        }
        let x = take_rows(h, self.score_rows.as_deref());
        let lw = &self.model.layers[layer];
        let svd = self.plan.criteria == Criteria::Svd;

        let qk_rule = self.rule(Group::QkInner);
        let qk_scores = match (qk_rule.metric, svd) {
            (Metric::Random, _) => {
                let n = self.units(Group::QkInner, qk_rule);
                random_scores(n, qk_rule.granularity, &mut self.rng)
            }
            (_, true) => {
                let bank = self.bank.expect("checked at construction");
                estimate_scores(&x, bank, layer, Group::QkInner, qk_rule, None, &mut self.estimator_flops)?
            }
            (metric, false) => {
                let q = x.matmul(&lw.wq)?;
                let k = x.matmul(&lw.wk)?;
                match metric {
                    Metric::L2 => qk_l2_scores(&q, &k, qk_rule.granularity, qk_rule.d_head)?,
                    _ => qk_oracle_scores(&q, &k, qk_rule.granularity, qk_rule.d_head)?,
                }
            }
        };
        let qk = self.finish(layer, Group::QkInner, qk_scores, sp)?;

        let vo_rule = self.rule(Group::VoOuter);
        let vo_scores = match (vo_rule.metric, svd) {
            (Metric::Random, _) => {
                let n = self.units(Group::VoOuter, vo_rule);
                random_scores(n, vo_rule.granularity, &mut self.rng)
            }
            (_, true) => {
                let bank = self.bank.expect("checked at construction");
                estimate_scores(&x, bank, layer, Group::VoOuter, vo_rule, None, &mut self.estimator_flops)?
            }
            (_, false) => {
                // The true input to W_O needs the full dense attention replay.
                let out = self.dense_attention_output(layer, h)?;
                vo_oracle_scores(&take_rows(&out, self.score_rows.as_deref()))
            }
        };
        let vo = self.finish(layer, Group::VoOuter, vo_scores, sp)?;
        Ok((Some(qk), Some(vo)))
    }

    fn dense_attention_output(&self, layer: usize, h: &Tensor<S>) -> Result<Tensor<S>> {
        let cfg = &self.model.cfg;
        let lw = &self.model.layers[layer];
        let mut q = h.matmul(&lw.wq)?;
        let mut k = h.matmul(&lw.wk)?;
        let v = h.matmul(&lw.wv)?;
        if cfg.rope {
            let pos = row_positions(self.shape.batch, self.shape.seq);
            q = apply_rope(&q, &pos, cfg.d_head(), cfg.rope_theta)?;
            k = apply_rope(&k, &pos, cfg.d_head(), cfg.rope_theta)?;
        }
        Ok(attention(&q, &k, &v, self.shape)?.0)
    }

    /// Mask for the FFN intermediate of `layer` from its normed input `h2`.
    pub fn ffn_mask(&mut self, layer: usize, h2: &Tensor<S>) -> Result<Option<ChannelMask>> {
        if self.fixed.is_some() {
            return Ok(self.fixed_mask(layer, Group::FfnIntermediate));
        }
        let sp = self.plan.layer(layer).ffn;
        if sp <= 0.0 {
            return Ok(None);
        }
        let x = take_rows(h2, self.score_rows.as_deref());
        let lw = &self.model.layers[layer];
        let rule = self.rule(Group::FfnIntermediate);
        let scores = match (rule.metric, self.plan.criteria) {
            (Metric::Random, _) => random_scores(self.units(Group::FfnIntermediate, rule), rule.granularity, &mut self.rng),
            (_, Criteria::Svd) => {
                let bank = self.bank.expect("checked at construction");
                estimate_scores(
                    &x,
                    bank,
                    layer,
                    Group::FfnIntermediate,
                    rule,
                    Some(&lw.w_down),
                    &mut self.estimator_flops,
                )?
            }
            (Metric::Wanda, Criteria::Oracle) => wanda_scores(&ffn_intermediate(&x, lw)?, &lw.w_down)?,
            (_, Criteria::Oracle) => ffn_oracle_scores(&x, lw)?,
        };
        Ok(Some(self.finish(layer, Group::FfnIntermediate, scores, sp)?))
    }
}

/// QK pruning strategies compared on attention maps.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttnStrategy {
    QkNorm,
    L2Input,
    Random,
}

impl AttnStrategy {
    pub const ALL: [AttnStrategy; 3] = [AttnStrategy::QkNorm, AttnStrategy::L2Input, AttnStrategy::Random];

    pub fn name(self) -> &'static str {
        match self {
            AttnStrategy::QkNorm => "qk_norm",
            AttnStrategy::L2Input => "l2_input",
            AttnStrategy::Random => "random",
        }
    }
}

/// Frobenius distance between dense and QK-pruned attention maps of every
/// head of `layer`, summed over the batch. `QkNorm` and `Random` zero pruned
/// channels of both Q and K before rotation. `L2Input` prunes the input side
/// of `W_Q`/`W_K` instead, keeping the hidden channels with the largest L2
/// norm as the FFN criterion does. The logit scale is unchanged.
pub fn attention_map_errors<S: Scalar>(
    model: &Model<S>,
    tokens: &TokenBatch,
    layer: usize,
    strategy: AttnStrategy,
    sparsity: f64,
    seed: u64,
) -> Result<Vec<f64>> {
    let cfg = &model.cfg;
    if layer >= cfg.n_layers {
        return Err(Error::Input(format!("layer {layer} outside model")));
    }
    let taps = model.capture(tokens)?;
    let tap = &taps[layer];
    let (q, k) = (
        tap.q_proj.as_ref().expect("captured"),
        tap.k_proj.as_ref().expect("captured"),
    );
    let d_head = cfg.d_head();
    let g = if cfg.rope {
        ScoreGranularity::RopePair
    } else {
        ScoreGranularity::Channel
    };
    let prune = |t: &Tensor<S>, keep: &[bool]| {
        let mut t = t.clone();
        let d = t.cols();
        for (i, v) in t.data_mut().iter_mut().enumerate() {
            if !keep[i % d] {
                *v = S::zero();
            }
        }
        t
    };
    let (q_pruned, k_pruned) = match strategy {
        AttnStrategy::L2Input => {
            let h = tap.attn_input.as_ref().expect("captured");
            // Hidden-channel mask; the group tag is only a label here.
            let mask = select_mask(&col_l2_norms(h), sparsity, cfg.d_model, Group::VoOuter)?;
            let h = prune(h, &mask.flags());
            (h.matmul(model.weight(layer, Proj::Q))?, h.matmul(model.weight(layer, Proj::K))?)
        }
        _ => {
            let scores = match strategy {
                AttnStrategy::QkNorm => qk_oracle_scores(q, k, g, d_head)?,
                _ => {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    let units = aggregate(&vec![0.0; cfg.d_model], g, d_head).len();
                    random_scores(units, g, &mut rng)
                }
            };
            let keep = select_mask(&scores, sparsity, cfg.d_model, Group::QkInner)?.flags();
            (prune(q, &keep), prune(k, &keep))
        }
    };
    let shape = AttnShape {
        batch: tokens.batch,
        seq: tokens.seq,
        heads: cfg.n_heads,
        d_head,
    };
    let pos = row_positions(tokens.batch, tokens.seq);
    let rot = |t: &Tensor<S>| -> Result<Tensor<S>> {
        if cfg.rope {
            apply_rope(t, &pos, d_head, cfg.rope_theta)
        } else {
            Ok(t.clone())
        }
    };
    let dense = attention_probs(&rot(q)?, &rot(k)?, shape);
    let pruned = attention_probs(&rot(&q_pruned)?, &rot(&k_pruned)?, shape);
    let per_map = tokens.seq * tokens.seq;
    let mut err = vec![0.0; cfg.n_heads];
    for (m, (a, b)) in dense.chunks(per_map).zip(pruned.chunks(per_map)).enumerate() {
        let h = m % cfg.n_heads;
        err[h] += a.iter().zip(b).map(|(x, y)| (x.f64() - y.f64()).powi(2)).sum::<f64>();
    }
    Ok(err.into_iter().map(f64::sqrt).collect())
}

/// Error of a single head; see [`attention_map_errors`].
pub fn attention_map_error<S: Scalar>(
    model: &Model<S>,
    tokens: &TokenBatch,
    layer: usize,
    head: usize,
    strategy: AttnStrategy,
    sparsity: f64,
    seed: u64,
) -> Result<f64> {
    if head >= model.cfg.n_heads {
        return Err(Error::Input(format!("head {head} outside model")));
    }
    Ok(attention_map_errors(model, tokens, layer, strategy, sparsity, seed)?[head])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kept_units_ceiling() {
        assert_eq!(kept_units(1024, 0.9), 103);
        assert_eq!(kept_units(10, 0.7), 3);
        assert_eq!(kept_units(8, 0.0), 8);
        assert_eq!(kept_units(8, 1.0), 0);
        assert_eq!(kept_units(8, 0.5), 4);
    }

    #[test]
    fn select_hand_ranking() {
        let s = ScoreVector::channels((1..=8).rev().map(f64::from).collect());
        let m = select_mask(&s, 0.5, 8, Group::FfnIntermediate).unwrap();
        assert_eq!(m.kept, vec![0, 1, 2, 3]);
        let full = select_mask(&s, 0.0, 8, Group::FfnIntermediate).unwrap();
        assert!(full.is_full());
    }

    #[test]
    fn pair_and_head_expansion() {
        let s = ScoreVector {
            scores: vec![1.0, 5.0, 3.0, 0.0],
            granularity: ScoreGranularity::RopePair,
        };
        let m = select_mask(&s, 0.5, 8, Group::QkInner).unwrap();
        assert_eq!(m.kept, vec![2, 3, 4, 5]);
        m.check_rope_pairs().unwrap();
        let h = ScoreVector {
            scores: vec![1.0, 2.0],
            granularity: ScoreGranularity::Head,
        };
        let m = select_mask(&h, 0.5, 8, Group::QkInner).unwrap();
        assert_eq!(m.kept, vec![4, 5, 6, 7]);
        m.check_heads(4).unwrap();
    }

    #[test]
    fn overlap_cases() {
        let a = ChannelMask {
            kept: vec![0, 1],
            ..ChannelMask::full(4, Group::VoOuter)
        };
        let b = ChannelMask {
            kept: vec![2, 3],
            ..a.clone()
        };
        assert_eq!(mask_overlap(&a, &a).unwrap(), 1.0);
        assert_eq!(mask_overlap(&a, &b).unwrap(), 0.0);
        let c = ChannelMask {
            kept: vec![2],
            ..a.clone()
        };
        assert!(mask_overlap(&a, &c).is_err());
    }

    #[test]
    fn qk_hand_scores() {
        let q = Tensor::<f64>::from_rows(&[&[1.0, 0.0]]);
        let k = Tensor::<f64>::from_rows(&[&[2.0, 0.0]]);
        let s = qk_oracle_scores(&q, &k, ScoreGranularity::Channel, 2).unwrap();
        assert_eq!(s.scores, vec![2.0, 0.0]);
        assert_eq!(topk_indices(&s, 1).unwrap(), vec![0]);
    }

    #[test]
    fn split_pair_detected() {
        let m = ChannelMask {
            kept: vec![0, 2, 3],
            ..ChannelMask::full(4, Group::QkInner)
        };
        assert!(m.check_rope_pairs().is_err());
    }
}
