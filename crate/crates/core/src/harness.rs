//! Offline tooling around training: estimator decomposition, layer
//! sensitivity sweeps, sparsity allocation, mask agreement and FLOP reports.

use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::Batch;
use crate::error::{Error, Result};
use crate::flops::{analytic_step, AnalyticInput, FlopCounts, FlopPath, KeptWidths, StepGeometry};
use crate::linalg::col_l2_norms;
use crate::lora::{AdapterBank, Proj};
use crate::model::{Model, ModelConfig, TokenBatch};
use crate::plan::{Criteria, LayerSparsity, SparsityPlan};
use crate::sparsity::{mask_overlap, select_mask, ChannelMask, EstimatorBank, Group, SparseStep, ESTIMATED};
use crate::tensor::{Scalar, Tensor};
use crate::train::{evaluate_batches, EvalSparsity};

/// Table 8 of the reference results: estimator FLOPs as a percentage of
/// fine-tuning FLOPs.
pub const REFERENCE_ESTIMATOR_FLOPS_PCT: f64 = 0.05;

/// Relative Frobenius reconstruction error of each decomposed weight.
pub fn decompose<S: Scalar>(model: &Model<S>, rank: usize, layers: &[usize]) -> Result<(EstimatorBank<S>, Vec<(String, f64)>)> {
    let bank = EstimatorBank::build(model, rank, layers)?;
    let mut errors = Vec::new();
    for &l in layers {
        for p in ESTIMATED {
            let w = model.weight(l, p);
            let approx = bank.get(l, p)?.reconstruct();
            let (mut num, mut den) = (0.0, 0.0);
            for (a, b) in w.data().iter().zip(approx.data()) {
                num += (a.f64() - b.f64()).powi(2);
                den += a.f64().powi(2);
            }
            let err = (num / den.max(f64::MIN_POSITIVE)).sqrt();
            log::info!("L{l}.{p}: rank {rank} relative error {err:.4}");
            errors.push((format!("L{l}.{p}"), err));
        }
    }
    Ok((bank, errors))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepGroup {
    Ffn,
    Qkvo,
}

impl SweepGroup {
    pub fn name(self) -> &'static str {
        match self {
            SweepGroup::Ffn => "ffn",
            SweepGroup::Qkvo => "qkvo",
        }
    }

    fn sparsity(self, r: f64) -> LayerSparsity {
        match self {
            SweepGroup::Ffn => LayerSparsity { ffn: r, qkvo: 0.0 },
            SweepGroup::Qkvo => LayerSparsity { ffn: 0.0, qkvo: r },
        }
    }
}

impl FromStr for SweepGroup {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "ffn" => Ok(SweepGroup::Ffn),
            "qkvo" => Ok(SweepGroup::Qkvo),
            other => Err(Error::Config(format!("unknown group '{other}' (ffn|qkvo)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensitivityPoint {
    pub ratio: f64,
    pub loss: f64,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensitivityCurve {
    pub layer: usize,
    pub group: SweepGroup,
    /// Ascending in ratio.
    pub points: Vec<SensitivityPoint>,
}

/// Evaluate with one layer at a time sparsified (oracle criteria), every
/// other layer dense. `base` supplies metrics, granularity and token split.
pub fn sweep_layer_sensitivity<S: Scalar>(
    model: &Model<S>,
    adapters: &AdapterBank<S>,
    batches: &[Batch],
    ratios: &[f64],
    group: SweepGroup,
    base: &SparsityPlan,
    seed: u64,
) -> Result<Vec<SensitivityCurve>> {
    if ratios.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config("sweep ratios must be strictly ascending".into()));
    }
    if let Some(r) = ratios.iter().find(|r| !(0.0..=1.0).contains(*r)) {
        return Err(Error::Config(format!("sweep ratio {r} not in [0, 1]")));
    }
    let mut curves = Vec::with_capacity(model.cfg.n_layers);
    for layer in 0..model.cfg.n_layers {
        let mut points = Vec::with_capacity(ratios.len());
        for &ratio in ratios {
            let mut plan = base.clone();
            plan.layers.clear();
            plan.criteria = Criteria::Oracle;
            plan.dense_warmup = 0.0;
            plan.set_layer(layer, group.sparsity(ratio));
            let sp = EvalSparsity {
                plan: &plan,
                bank: None,
                seed,
            };
            let e = evaluate_batches(model, adapters, batches, Some(&sp))?;
            log::info!("{} L{layer} @ {ratio}: loss {:.5}", group.name(), e.loss);
            points.push(SensitivityPoint {
                ratio,
                loss: e.loss,
                accuracy: e.token_accuracy,
            });
        }
        curves.push(SensitivityCurve { layer, group, points });
    }
    Ok(curves)
}

pub fn curves_to_csv(curves: &[SensitivityCurve]) -> String {
    let mut s = String::from("group,layer,ratio,loss,accuracy\n");
    for c in curves {
        for p in &c.points {
            let _ = writeln!(s, "{},{},{},{},{}", c.group.name(), c.layer, p.ratio, p.loss, p.accuracy);
        }
    }
    s
}

pub fn curves_from_csv(text: &str) -> Result<Vec<SensitivityCurve>> {
    let mut curves: Vec<SensitivityCurve> = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        let bad = || Error::Input(format!("curve csv line {}: '{line}'", i + 1));
        if f.len() != 5 {
            return Err(bad());
        }
        let group: SweepGroup = f[0].parse()?;
        let layer: usize = f[1].trim().parse().map_err(|_| bad())?;
        let num = |s: &str| s.trim().parse::<f64>().map_err(|_| bad());
        let point = SensitivityPoint {
            ratio: num(f[2])?,
            loss: num(f[3])?,
            accuracy: num(f[4])?,
        };
        match curves.iter_mut().find(|c| c.layer == layer && c.group == group) {
            Some(c) => c.points.push(point),
            None => curves.push(SensitivityCurve {
                layer,
                group,
                points: vec![point],
            }),
        }
    }
    Ok(curves)
}

/// What the allocator charges FLOPs against.
pub struct AllocContext<'a> {
    pub cfg: &'a ModelConfig,
    pub geometry: StepGeometry,
    pub adapters: &'a [(usize, Proj, usize)],
    /// Supplies estimator rank, criteria, metrics and granularity.
    pub base: &'a SparsityPlan,
}

impl AllocContext<'_> {
    pub fn step_flops(&self, plan: &SparsityPlan) -> FlopCounts {
        plan_flops(self.cfg, plan, self.geometry, self.adapters, true)
    }

    /// Sparse-step FLOPs of `plan` relative to a dense step.
    pub fn fraction(&self, plan: &SparsityPlan) -> f64 {
        let dense = self.step_flops(&SparsityPlan::dense()).total();
        self.step_flops(plan).total() as f64 / dense as f64
    }
}

/// Closed-form FLOPs of one step under `plan`. Token splitting applies only
/// when the plan has a sparse layer.
pub fn plan_flops(
    cfg: &ModelConfig,
    plan: &SparsityPlan,
    geometry: StepGeometry,
    adapters: &[(usize, Proj, usize)],
    backward: bool,
) -> FlopCounts {
    let sparse = !plan.is_all_dense();
    let kept: Vec<KeptWidths> = if sparse {
        let g = plan.qk_granularity(cfg.rope);
        (0..cfg.n_layers)
            .map(|l| KeptWidths::for_layer(cfg, &plan.layer(l), g))
            .collect()
    } else {
        Vec::new()
    };
    let geometry = if sparse && plan.token_split != crate::plan::TokenSplit::Off {
        geometry
    } else {
        StepGeometry {
            context_tokens: geometry.tokens(),
            ..geometry
        }
    };
    let groups = plan.estimator_groups();
    analytic_step(&AnalyticInput {
        cfg,
        geometry,
        adapters,
        kept: &kept,
        estimator_rank: (sparse && groups.iter().any(|&g| g)).then_some(plan.estimator_rank),
        estimator_groups: groups,
        estimator_all_tokens: plan.estimator_all_tokens,
        backward,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Allocation {
    pub plan: SparsityPlan,
    pub fraction: f64,
    /// Fraction with every curve at its largest ratio.
    pub floor: f64,
}

/// Greedy allocation: repeatedly apply the move (raise one curve's ratio to
/// any higher point) with the least eval-loss increase per FLOP saved, until
/// the step FLOPs fall to `budget` of dense. Ties go to the lower layer, then
/// FFN before QKVO, then the smaller ratio.
pub fn allocate_sparsity(curves: &[SensitivityCurve], budget: f64, ctx: &AllocContext<'_>) -> Result<Allocation> {
    if !(budget > 0.0 && budget <= 1.0) {
        return Err(Error::Config(format!("budget {budget} not in (0, 1]")));
    }
    for c in curves {
        if c.layer >= ctx.cfg.n_layers {
            return Err(Error::Config(format!("curve for layer L{} outside model", c.layer)));
        }
        if c.points.first().map(|p| p.ratio) != Some(0.0) {
            return Err(Error::Config(format!(
                "{} curve for L{} must start at ratio 0",
                c.group.name(),
                c.layer
            )));
        }
        if c.points.windows(2).any(|w| w[0].ratio >= w[1].ratio) {
            return Err(Error::Config(format!("{} curve for L{} not ascending", c.group.name(), c.layer)));
        }
    }
    let mut order: Vec<usize> = (0..curves.len()).collect();
    order.sort_by_key(|&i| (curves[i].layer, curves[i].group));

    let build = |level: &[usize]| -> SparsityPlan {
        let mut plan = ctx.base.clone();
        plan.layers.clear();
        for (c, &j) in curves.iter().zip(level) {
            let mut ls = plan.layer(c.layer);
            match c.group {
                SweepGroup::Ffn => ls.ffn = c.points[j].ratio,
                SweepGroup::Qkvo => ls.qkvo = c.points[j].ratio,
            }
            plan.set_layer(c.layer, ls);
        }
        plan
    };

    let max_level: Vec<usize> = curves.iter().map(|c| c.points.len() - 1).collect();
    let floor = ctx.fraction(&build(&max_level));
    if floor > budget + 1e-12 {
        return Err(Error::Config(format!(
            "budget {budget} is infeasible: the sparsest plan the curves allow reaches {floor:.4}"
        )));
    }

    let mut level = vec![0usize; curves.len()];
    let mut frac = ctx.fraction(&build(&level));
    let mut cur_flops = ctx.step_flops(&build(&level)).total() as f64;
    while frac > budget + 1e-12 {
        let mut best: Option<(f64, usize, usize)> = None;
        for &i in &order {
            let c = &curves[i];
            for j in level[i] + 1..c.points.len() {
                let mut next = level.clone();
                next[i] = j;
                let saved = cur_flops - ctx.step_flops(&build(&next)).total() as f64;
                if saved <= 0.0 {
                    continue;
                }
                let cost = (c.points[j].loss - c.points[level[i]].loss) / saved;
                if best.is_none_or(|(b, _, _)| cost < b) {
                    best = Some((cost, i, j));
                }
            }
        }
        let Some((_, i, j)) = best else {
            return Err(Error::Config(format!(
                "allocation stalled at fraction {frac:.4} above budget {budget}"
            )));
        };
        level[i] = j;
        let plan = build(&level);
        cur_flops = ctx.step_flops(&plan).total() as f64;
        frac = ctx.fraction(&plan);
    }
    Ok(Allocation {
        plan: build(&level),
        fraction: frac,
        floor,
    })
}

/// What the VO estimator masks are compared against.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VoReference {
    /// Column norms of the true input to `W_O`.
    AttnOutput,
    /// Column norms of the dense `V` projection, the statistic the estimator
    /// approximates.
    ValueNorm,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MaskAgreement {
    pub rank: usize,
    pub layer: usize,
    pub group: Group,
    /// One overlap per batch.
    pub overlaps: Vec<f64>,
}

impl MaskAgreement {
    pub fn mean(&self) -> f64 {
        self.overlaps.iter().sum::<f64>() / self.overlaps.len().max(1) as f64
    }

    pub fn median(&self) -> f64 {
        crate::train::median(&self.overlaps).unwrap_or(f64::NAN)
    }
}

/// Overlap between oracle masks and estimator masks, per bank rank, layer
/// and group, on activations of the dense forward pass.
pub fn compare_masks<S: Scalar>(
    model: &Model<S>,
    banks: &[EstimatorBank<S>],
    batches: &[TokenBatch],
    plan: &SparsityPlan,
    vo_reference: VoReference,
) -> Result<Vec<MaskAgreement>> {
    let mut oracle_plan = plan.clone();
    oracle_plan.criteria = Criteria::Oracle;
    let mut out: Vec<MaskAgreement> = Vec::new();
    let mut record = |rank: usize, layer: usize, group: Group, v: f64| {
        match out.iter_mut().find(|a| a.rank == rank && a.layer == layer && a.group == group) {
            Some(a) => a.overlaps.push(v),
            None => out.push(MaskAgreement {
                rank,
                layer,
                group,
                overlaps: vec![v],
            }),
        }
    };
    for tokens in batches {
        let taps = model.capture(tokens)?;
        for (&l, ls) in &plan.layers {
            let tap = &taps[l];
            let (h, h2) = match (&tap.attn_input, &tap.ffn_input) {
                (Some(h), Some(h2)) => (h, h2),
                _ => return Err(Error::Precondition("capture did not record block inputs".into())),
            };
            let reference = layer_masks(model, &oracle_plan, None, tokens, l, h, h2)?;
            let vo_ref = match (vo_reference, reference.1.as_ref()) {
                (VoReference::ValueNorm, Some(_)) => {
                    let v = h.matmul(model.weight(l, Proj::V))?;
                    Some(select_mask(&col_l2_norms(&v), ls.qkvo, model.cfg.d_model, Group::VoOuter)?)
                }
                (_, m) => m.cloned(),
            };
            for bank in banks {
                let mut est_plan = plan.clone();
                est_plan.criteria = Criteria::Svd;
                est_plan.estimator_rank = bank.rank;
                let est = layer_masks(model, &est_plan, Some(bank), tokens, l, h, h2)?;
                let pairs = [
                    (Group::QkInner, &reference.0, &est.0),
                    (Group::VoOuter, &vo_ref, &est.1),
                    (Group::FfnIntermediate, &reference.2, &est.2),
                ];
                for (g, a, b) in pairs {
                    if let (Some(a), Some(b)) = (a, b) {
                        record(bank.rank, l, g, mask_overlap(a, b)?);
                    }
                }
            }
        }
    }
    Ok(out)
}

type LayerMasks = (Option<ChannelMask>, Option<ChannelMask>, Option<ChannelMask>);

fn layer_masks<S: Scalar>(
    model: &Model<S>,
    plan: &SparsityPlan,
    bank: Option<&EstimatorBank<S>>,
    tokens: &TokenBatch,
    layer: usize,
    h: &Tensor<S>,
    h2: &Tensor<S>,
) -> Result<LayerMasks> {
    let mut step = SparseStep::new(model, plan, bank, tokens.batch, tokens.seq, None, 0)?;
    let (qk, vo) = step.attention_masks(layer, h)?;
    let ffn = step.ffn_mask(layer, h2)?;
    Ok((qk, vo, ffn))
}

/// The LLaMA2-7B Math10K configuration of the reference sparsity table:
/// FFN L13–L29 at 90%, QKVO L13–L29 except L20 and L24 at 60%, 5% dense steps.
pub fn llama2_7b_math10k_plan() -> SparsityPlan {
    let mut plan = SparsityPlan::default();
    for l in 13..=29 {
        let qkvo = if l == 20 || l == 24 { 0.0 } else { 0.6 };
        plan.set_layer(l, LayerSparsity { ffn: 0.9, qkvo });
    }
    plan.dense_warmup = 0.05;
    plan
}

/// Dense and planned FLOPs of one step.
#[derive(Clone, Debug, PartialEq)]
pub struct FlopsSummary {
    pub dense: FlopCounts,
    pub planned: FlopCounts,
}

impl FlopsSummary {
    pub fn new(cfg: &ModelConfig, plan: &SparsityPlan, geometry: StepGeometry, adapters: &[(usize, Proj, usize)]) -> Self {
        FlopsSummary {
            dense: plan_flops(cfg, &SparsityPlan::dense(), geometry, adapters, true),
            planned: plan_flops(cfg, plan, geometry, adapters, true),
        }
    }

    pub fn fraction(&self) -> f64 {
        self.planned.total() as f64 / self.dense.total() as f64
    }

    /// Estimator FLOPs over all FLOPs of the planned step.
    pub fn estimator_fraction(&self) -> f64 {
        self.planned.path_total(FlopPath::Estimator) as f64 / self.planned.total() as f64
    }

    /// Fraction over a run of `total_steps` with the plan's dense warmup.
    pub fn run_fraction(&self, total_steps: usize, dense_warmup: f64) -> Result<f64> {
        let w = crate::train::dense_steps(total_steps, dense_warmup)? as f64;
        let n = total_steps as f64;
        let (d, p) = (self.dense.total() as f64, self.planned.total() as f64);
        Ok((w * d + (n - w) * p) / (n * d))
    }

    pub fn render(&self) -> String {
        let mut s = String::from("path,dense,planned\n");
        for p in FlopPath::ALL {
            let _ = writeln!(s, "{},{},{}", p.name(), self.dense.path_total(p), self.planned.path_total(p));
        }
        let _ = writeln!(s, "total,{},{}", self.dense.total(), self.planned.total());
        s
    }
}

/// `(layer, projection, rank)` for every target on every layer.
pub fn adapter_targets(cfg: &ModelConfig, targets: &[Proj], rank: usize) -> Vec<(usize, Proj, usize)> {
    let mut t = targets.to_vec();
    t.sort();
    t.dedup();
    (0..cfg.n_layers)
        .flat_map(|l| t.iter().map(move |&p| (l, p, rank)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::plan::TokenSplit;

    fn curve(layer: usize, group: SweepGroup, slope: f64) -> SensitivityCurve {
        SensitivityCurve {
            layer,
            group,
            points: [0.0, 0.5, 0.9]
                .iter()
                .map(|&r| SensitivityPoint {
                    ratio: r,
                    loss: 1.0 + slope * r,
                    accuracy: 0.0,
                })
                .collect(),
        }
    }

    fn ctx_parts() -> (ModelConfig, SparsityPlan) {
        let mut base = SparsityPlan::default();
        base.token_split = TokenSplit::Off;
        base.criteria = Criteria::Oracle;
        (ModelConfig::tiny(), base)
    }

    fn geometry() -> StepGeometry {
        StepGeometry {
            batch: 2,
            seq_len: 16,
            context_tokens: 32,
        }
    }

    #[test]
    fn full_budget_is_dense() {
        let (cfg, base) = ctx_parts();
        let ctx = AllocContext {
            cfg: &cfg,
            geometry: geometry(),
            adapters: &[],
            base: &base,
        };
        let curves = vec![curve(0, SweepGroup::Ffn, 1.0), curve(1, SweepGroup::Ffn, 1.0)];
        let a = allocate_sparsity(&curves, 1.0, &ctx).unwrap();
        assert!(a.plan.is_all_dense());
        assert_eq!(a.fraction, 1.0);
    }

    #[test]
    fn tie_goes_to_lower_layer() {
        let (cfg, base) = ctx_parts();
        let ctx = AllocContext {
            cfg: &cfg,
            geometry: geometry(),
            adapters: &[],
            base: &base,
        };
        let curves = vec![curve(1, SweepGroup::Ffn, 1.0), curve(0, SweepGroup::Ffn, 1.0)];
        let a = allocate_sparsity(&curves, 0.999, &ctx).unwrap();
        assert!(a.plan.layer(0).ffn > 0.0);
        assert_eq!(a.plan.layer(1).ffn, 0.0);
    }

    #[test]
    fn infeasible_budget_reports_floor() {
        let (cfg, base) = ctx_parts();
        let ctx = AllocContext {
            cfg: &cfg,
            geometry: geometry(),
            adapters: &[],
            base: &base,
        };
        let err = allocate_sparsity(&[curve(0, SweepGroup::Ffn, 1.0)], 0.1, &ctx).unwrap_err();
        assert!(err.to_string().contains("reaches"), "{err}");
    }

    #[test]
    fn csv_roundtrip() {
        let curves = vec![curve(0, SweepGroup::Ffn, 0.5), curve(3, SweepGroup::Qkvo, 2.0)];
        assert_eq!(curves_from_csv(&curves_to_csv(&curves)).unwrap(), curves);
    }

    #[test]
    fn llama_preset_estimator_share_is_small() {
        let cfg = ModelConfig::llama2_7b();
        let plan = llama2_7b_math10k_plan();
        let geom = StepGeometry {
            batch: 1,
            seq_len: 512,
            context_tokens: 512,
        };
        let targets = adapter_targets(&cfg, &[Proj::Q, Proj::K, Proj::V, Proj::O], 32);
        let s = FlopsSummary::new(&cfg, &plan, geom, &targets);
        assert!(s.estimator_fraction() > 0.0 && s.estimator_fraction() < 0.01);
        assert!(s.fraction() < 1.0);
    }
}
