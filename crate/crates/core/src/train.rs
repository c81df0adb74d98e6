//! LoRA fine-tuning loop, evaluation, dense pre-training and the FLOP ledger.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Batch, Batcher, Dataset};
use crate::error::{Error, Result};
use crate::flops::{FlopCounts, FlopPath, StepGeometry};
use crate::harness::plan_flops;
use crate::lora::{attach_lora, AdapterBank, AdapterVars, Proj};
use crate::model::{ForwardOptions, Model, ModelVars};
use crate::plan::{SparsityPlan, TokenSplit, MAX_DENSE_WARMUP};
use crate::sparse_exec::{SliceCache, TokenPartition};
use crate::sparsity::{EstimatorBank, SparseStep};
use crate::tape::{Tape, Var};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub warmup_ratio: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            warmup_ratio: 0.04,
        }
    }
}

/// `true` iff `step < ⌈fraction·total⌉`.
pub fn is_dense_step(step: usize, total: usize, fraction: f64) -> Result<bool> {
    Ok(step < dense_steps(total, fraction)?)
}

/// Number of leading dense steps, `⌈fraction·total⌉`.
pub fn dense_steps(total: usize, fraction: f64) -> Result<usize> {
    if !(0.0..=MAX_DENSE_WARMUP).contains(&fraction) {
        return Err(Error::Config(format!(
            "dense warmup fraction {fraction} outside [0, {MAX_DENSE_WARMUP}]"
        )));
    }
    Ok(((fraction * total as f64) - 1e-9).ceil().max(0.0) as usize)
}

/// Linear warmup over `⌈warmup_ratio·total⌉` steps (first step at
/// `base/warmup`), then cosine decay reaching zero at `total`.
pub fn lr_at(step: usize, total: usize, base: f64, warmup_ratio: f64) -> f64 {
    let w = ((warmup_ratio * total as f64) - 1e-9).ceil().max(0.0) as usize;
    if step < w {
        return base * (step + 1) as f64 / w as f64;
    }
    let span = total.saturating_sub(w).max(1) as f64;
    let progress = (step - w) as f64 / span;
    base * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Adam with decoupled weight decay and bias-corrected moments.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW<S> {
    pub cfg: OptimConfig,
    pub t: u64,
    m: Vec<Vec<S>>,
    v: Vec<Vec<S>>,
}

impl<S: Scalar> AdamW<S> {
    pub fn new(cfg: OptimConfig) -> Self {
        AdamW {
            cfg,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// Update every parameter with its gradient (`None` = zero gradient).
    pub fn step(
        &mut self,
        params: &mut [&mut Tensor<S>],
        grads: &[Option<&Tensor<S>>],
        names: &[String],
        lr: f64,
    ) -> Result<()> {
        if params.len() != grads.len() || params.len() != names.len() {
            return Err(Error::dim("adamw", &[params.len()], &[grads.len(), names.len()]));
        }
        for ((p, g), name) in params.iter().zip(grads).zip(names) {
            if let Some(g) = g {
                if g.shape() != p.shape() {
                    return Err(Error::dim("adamw grad", p.shape(), g.shape()));
                }
                if !g.all_finite() {
                    return Err(Error::NonFinite(format!("gradient of {name}")));
                }
            }
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![S::zero(); p.len()]).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let c = &self.cfg;
        let (b1, b2) = (S::of(c.beta1), S::of(c.beta2));
        let bc1 = S::of(1.0 - c.beta1.powi(self.t as i32));
        let bc2 = S::of(1.0 - c.beta2.powi(self.t as i32));
        let (lr_s, eps, decay) = (S::of(lr), S::of(c.eps), S::of(lr * c.weight_decay));
        for (i, p) in params.iter_mut().enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let g = grads[i].map(|g| g.data());
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                let gj = g.map_or(S::zero(), |g| g[j]);
                m[j] = b1 * m[j] + (S::one() - b1) * gj;
                v[j] = b2 * v[j] + (S::one() - b2) * gj * gj;
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                *w = *w - decay * *w - lr_s * mh / (vh.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// One fine-tuning run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub targets: Vec<Proj>,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    pub plan: SparsityPlan,
    pub optim: OptimConfig,
    /// Nominal step count; one epoch when zero.
    pub steps: usize,
    pub batch_size: usize,
    pub seq_len: usize,
    /// Adapter initialisation.
    pub seed: u64,
    /// Record order.
    pub data_seed: u64,
    /// Random metric and random token subsets.
    pub metric_seed: u64,
    /// Stop once cumulative analytic FLOPs reach this fraction of the dense
    /// run over the nominal steps.
    pub flop_budget: Option<f64>,
    /// Evaluate every this many steps (0 = only at the end).
    pub eval_every: usize,
    /// Record per-step wall-clock time in the metrics log.
    pub log_wall: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            targets: vec![Proj::Q, Proj::K, Proj::V, Proj::O],
            lora_rank: 32,
            lora_alpha: 64.0,
            plan: SparsityPlan::dense(),
            optim: OptimConfig::default(),
            steps: 0,
            batch_size: 8,
            seq_len: 64,
            seed: 0,
            data_seed: 0,
            metric_seed: 0,
            flop_budget: None,
            eval_every: 0,
            log_wall: false,
        }
    }
}

impl RunConfig {
    /// Apply one `key = value` setting; unknown keys go to the sparsity plan.
    pub fn set_key(&mut self, key: &str, value: &str, pending: &mut crate::plan::PendingGroups) -> Result<()> {
        let num = |what: &str| -> Result<f64> {
            value
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{what}: cannot parse '{value}'")))
        };
        let int = |what: &str| -> Result<usize> {
            value
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{what}: cannot parse '{value}'")))
        };
        match key {
            "targets" | "lora.targets" => self.targets = Proj::parse_set(value)?,
            "lora.rank" | "lora_rank" => self.lora_rank = int(key)?,
            "lora.alpha" | "lora_alpha" => self.lora_alpha = num(key)?,
            "lr" => self.optim.lr = num(key)?,
            "beta1" => self.optim.beta1 = num(key)?,
            "beta2" => self.optim.beta2 = num(key)?,
            "eps" => self.optim.eps = num(key)?,
            "weight_decay" => self.optim.weight_decay = num(key)?,
            "warmup_ratio" => self.optim.warmup_ratio = num(key)?,
            "steps" => self.steps = int(key)?,
            "batch_size" | "batch" => self.batch_size = int(key)?,
            "seq_len" => self.seq_len = int(key)?,
            "seed" => self.seed = int(key)? as u64,
            "data_seed" => self.data_seed = int(key)? as u64,
            "metric_seed" => self.metric_seed = int(key)? as u64,
            "flop_budget" => self.flop_budget = Some(crate::plan::parse_percent(value)?),
            "eval_every" => self.eval_every = int(key)?,
            _ => self.plan.set_key(key, value, pending)?,
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut pending = crate::plan::PendingGroups::default();
        for (k, v) in crate::plan::parse_kv(text)? {
            cfg.set_key(&k, &v, &mut pending)?;
        }
        pending.apply(&mut cfg.plan)?;
        Ok(cfg)
    }

    pub fn validate(&self, n_layers: usize) -> Result<()> {
        self.plan.validate(n_layers)?;
        let mut bad = Vec::new();
        if self.lora_rank == 0 {
            bad.push("lora rank must be positive".to_string());
        }
        if self.batch_size == 0 || self.seq_len == 0 {
            bad.push("batch size and sequence length must be positive".into());
        }
        if !(self.optim.lr > 0.0) {
            bad.push(format!("learning rate {} must be positive", self.optim.lr));
        }
        if !(0.0..1.0).contains(&self.optim.warmup_ratio) {
            bad.push(format!("warmup ratio {} not in [0, 1)", self.optim.warmup_ratio));
        }
        if let Some(b) = self.flop_budget {
            if !(b > 0.0) {
                bad.push(format!("flop budget {b} must be positive"));
            }
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(bad.join("; ")))
        }
    }
}

/// Token partition for a sparse step. `Random` densifies a seeded random
/// subset of positions per sequence, matched in count to its output tokens.
pub fn make_partition(split: TokenSplit, batch: &Batch, seed: u64) -> Result<Option<TokenPartition>> {
    let seq = batch.tokens.seq;
    match split {
        TokenSplit::Off => Ok(None),
        TokenSplit::On => Ok(Some(TokenPartition::from_loss_mask(&batch.loss_mask, seq)?)),
        TokenSplit::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut dense = vec![false; batch.loss_mask.len()];
            for (b, m) in batch.loss_mask.chunks(seq).enumerate() {
                let n = m.iter().filter(|&&x| x).count();
                for p in sample(&mut rng, seq, n).into_iter() {
                    dense[b * seq + p] = true;
                }
            }
            Ok(Some(TokenPartition::from_loss_mask(&dense, seq)?))
        }
    }
}

/// Closed-form FLOPs of one step over `batch`.
pub fn analytic_for_batch<S: Scalar>(
    model: &Model<S>,
    adapters: &[(usize, Proj, usize)],
    plan: &SparsityPlan,
    batch: &Batch,
    sparse: bool,
    backward: bool,
) -> FlopCounts {
    let tokens = batch.tokens.rows();
    let geometry = StepGeometry {
        batch: batch.tokens.batch,
        seq_len: batch.tokens.seq,
        context_tokens: tokens - batch.output_tokens(),
    };
    let dense = SparsityPlan::dense();
    let plan = if sparse { plan } else { &dense };
    plan_flops(&model.cfg, plan, geometry, adapters, backward)
}

/// Forward one batch and return the masked mean cross-entropy.
pub fn batch_loss<S: Scalar>(
    tape: &mut Tape<S>,
    model: &Model<S>,
    vars: &ModelVars,
    adapters: Option<&AdapterVars<S>>,
    batch: &Batch,
    sparse: Option<&mut SparseStep<'_, S>>,
) -> Result<Var> {
    let opts = ForwardOptions {
        adapters,
        capture: false,
    };
    let out = model.forward(tape, vars, &batch.tokens, opts, sparse)?;
    tape.cross_entropy_masked(out.logits, &batch.targets, &batch.loss_mask)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub dense: bool,
    pub flops: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub wall_ms: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub step: usize,
    pub loss: f64,
    pub token_accuracy: f64,
    pub exact_match: f64,
}

/// Per-step FLOPs, analytic and counted at the matmul call sites.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FlopLedger {
    pub steps: Vec<(FlopCounts, FlopCounts)>,
}

impl FlopLedger {
    /// Steps whose instrumented total differs from the analytic one.
    pub fn mismatches(&self) -> Vec<usize> {
        self.steps
            .iter()
            .enumerate()
            .filter(|(_, (a, i))| a != i)
            .map(|(s, _)| s)
            .collect()
    }

    pub fn analytic_total(&self) -> u64 {
        self.steps.iter().map(|(a, _)| a.total()).sum()
    }

    pub fn path_total(&self, p: FlopPath) -> u64 {
        self.steps.iter().map(|(a, _)| a.path_total(p)).sum()
    }
}

#[derive(Clone, Debug)]
pub struct RunReport {
    pub records: Vec<StepRecord>,
    pub evals: Vec<EvalRecord>,
    pub adapters: AdapterBank<f32>,
    pub ledger: FlopLedger,
    /// Analytic FLOPs of the same batches run fully dense.
    pub dense_flops: u64,
    pub step_ms: Vec<f64>,
    /// Mean kept fraction per (layer, group name) over sparse steps.
    pub mask_density: BTreeMap<String, f64>,
}

impl RunReport {
    pub fn final_eval(&self) -> Option<&EvalRecord> {
        self.evals.last()
    }

    pub fn flops_fraction(&self) -> f64 {
        self.ledger.analytic_total() as f64 / self.dense_flops.max(1) as f64
    }

    /// Median step time excluding the first three steps.
    pub fn median_step_ms(&self) -> Option<f64> {
        median(self.step_ms.get(3..).unwrap_or(&[]))
    }

    /// Metrics log: one JSON record per step and evaluation, then a summary.
    pub fn metrics_log(&self) -> String {
        let mut s = String::new();
        let mut evals = self.evals.iter().peekable();
        for r in &self.records {
            s.push_str(&serde_json::to_string(r).expect("serializable"));
            s.push('\n');
            while let Some(e) = evals.next_if(|e| e.step == r.step) {
                s.push_str(&serde_json::json!({ "eval": e }).to_string());
                s.push('\n');
            }
        }
        let summary = serde_json::json!({
            "summary": {
                "steps": self.records.len(),
                "final_loss": self.records.last().map(|r| r.loss),
                "eval_loss": self.final_eval().map(|e| e.loss),
                "analytic_flops": self.ledger.analytic_total(),
                "dense_flops": self.dense_flops,
                "flops_fraction": self.flops_fraction(),
                "estimator_flops": self.ledger.path_total(FlopPath::Estimator),
                "ledger_mismatches": self.ledger.mismatches().len(),
            }
        });
        s.push_str(&summary.to_string());
        s.push('\n');
        s
    }
}

pub fn median(xs: &[f64]) -> Option<f64> {
    if xs.is_empty() {
        return None;
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    })
}

/// Steps to run: the nominal count, or under a FLOP budget the smallest
/// count whose closed-form cumulative FLOPs reach the budget.
pub fn planned_steps<S: Scalar>(
    model: &Model<S>,
    targets: &[(usize, Proj, usize)],
    cfg: &RunConfig,
    batcher: &Batcher,
) -> Result<usize> {
    let nominal = if cfg.steps == 0 {
        batcher.batches_per_epoch()
    } else {
        cfg.steps
    };
    let Some(budget) = cfg.flop_budget else {
        return Ok(nominal);
    };
    let per_epoch = batcher.batches_per_epoch();
    let mut epochs: Vec<Vec<Batch>> = Vec::new();
    let mut batch_at = |i: usize| -> Result<Batch> {
        let e = i / per_epoch;
        while epochs.len() <= e {
            epochs.push(batcher.epoch(cfg.data_seed, epochs.len())?);
        }
        Ok(epochs[e][i % per_epoch].clone())
    };
    let mut dense = Vec::new();
    let mut sparse = Vec::new();
    let push = |i: usize, dense: &mut Vec<u64>, sparse: &mut Vec<u64>, b: &Batch| {
        let d = analytic_for_batch(model, targets, &cfg.plan, b, false, true).total();
        let s = analytic_for_batch(model, targets, &cfg.plan, b, true, true).total();
        let (pd, ps) = (dense.last().copied().unwrap_or(0), sparse.last().copied().unwrap_or(0));
        debug_assert_eq!(dense.len(), i);
        dense.push(pd + d);
        sparse.push(ps + s);
    };
    for i in 0..nominal {
        let b = batch_at(i)?;
        push(i, &mut dense, &mut sparse, &b);
    }
    let target = budget * dense[nominal - 1] as f64;
    let cap = nominal.saturating_mul(100).max(1);
    for n in 1..=cap {
        while dense.len() < n {
            let i = dense.len();
            let b = batch_at(i)?;
            push(i, &mut dense, &mut sparse, &b);
        }
        let w = dense_steps(n, cfg.plan.dense_warmup)?.min(n);
        let cum_dense = if w == 0 { 0 } else { dense[w - 1] };
        let cum_sparse = sparse[n - 1] - if w == 0 { 0 } else { sparse[w - 1] };
        if (cum_dense + cum_sparse) as f64 >= target {
            return Ok(n);
        }
    }
    Err(Error::Config(format!(
        "flop budget {budget} not reachable within {cap} steps"
    )))
}

/// Fine-tune freshly attached adapters on `train_data`.
pub fn train(
    model: &Model<f32>,
    bank: Option<&EstimatorBank<f32>>,
    train_data: &Dataset,
    eval_data: Option<&Dataset>,
    cfg: &RunConfig,
) -> Result<RunReport> {
    let adapters = attach_lora::<f32>(&model.cfg, &cfg.targets, cfg.lora_rank, cfg.lora_alpha, cfg.seed)?;
    train_from(model, bank, adapters, train_data, eval_data, cfg)
}

/// Fine-tune the given adapters. Generic over precision so gradient tests can
/// run the same loop in `f64`.
pub fn train_from<S: Scalar>(
    model: &Model<S>,
    bank: Option<&EstimatorBank<S>>,
    mut adapters: AdapterBank<S>,
    train_data: &Dataset,
    eval_data: Option<&Dataset>,
    cfg: &RunConfig,
) -> Result<RunReport> {
    cfg.validate(model.cfg.n_layers)?;
    if cfg.seq_len > model.cfg.max_seq_len {
        return Err(Error::Config(format!(
            "seq_len {} exceeds model max_seq_len {}",
            cfg.seq_len, model.cfg.max_seq_len
        )));
    }
    let batcher = Batcher::new(train_data, cfg.seq_len, cfg.batch_size)?;
    let eval_batcher = match eval_data {
        Some(d) => Some(Batcher::new(d, cfg.seq_len, cfg.batch_size)?),
        None => None,
    };
    let targets = adapters.targets();
    let total = planned_steps(model, &targets, cfg, &batcher)?;
    let warm = dense_steps(total, cfg.plan.dense_warmup)?;
    let per_epoch = batcher.batches_per_epoch();
    log::info!(
        "training {total} steps ({warm} dense), {} adapters, {} params",
        adapters.len(),
        adapters.num_params()
    );

    let mut opt = AdamW::<S>::new(cfg.optim.clone());
    let mut cache = SliceCache::<S>::new();
    let mut records = Vec::with_capacity(total);
    let mut evals = Vec::new();
    let mut ledger = FlopLedger::default();
    let mut dense_flops = 0u64;
    let mut step_ms = Vec::with_capacity(total);
    let mut density: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    let mut last_finite = f64::NAN;
    let mut epoch_batches: Vec<Batch> = Vec::new();
    let names: Vec<String> = adapters
        .adapters
        .keys()
        .flat_map(|(l, p)| [format!("L{l}.{p}.a"), format!("L{l}.{p}.b")])
        .collect();

    for step in 0..total {
        if step % per_epoch == 0 {
            epoch_batches = batcher.epoch(cfg.data_seed, step / per_epoch)?;
        }
        let batch = &epoch_batches[step % per_epoch];
        let sparse_step = step >= warm && !cfg.plan.is_all_dense();
        let lr = lr_at(step, total, cfg.optim.lr, cfg.optim.warmup_ratio);
        let started = Instant::now();

        let mut tape = Tape::<S>::new();
        let vars = model.register(&mut tape, false);
        let avars = adapters.register(&mut tape);
        let step_seed = cfg.metric_seed.wrapping_mul(1_000_003).wrapping_add(step as u64);
        let mut sparse = if sparse_step {
            let partition = make_partition(cfg.plan.token_split, batch, step_seed)?;
            Some(
                SparseStep::new(
                    model,
                    &cfg.plan,
                    bank,
                    batch.tokens.batch,
                    batch.tokens.seq,
                    partition,
                    step_seed,
                )?
                .with_cache(&mut cache),
            )
        } else {
            None
        };
        let loss = batch_loss(&mut tape, model, &vars, Some(&avars), batch, sparse.as_mut())?;
        let loss_v = tape.value(loss).data()[0].f64();
        if !loss_v.is_finite() {
            return Err(Error::Diverged {
                step,
                last_finite_loss: last_finite,
            });
        }
        last_finite = loss_v;
        tape.backward(loss)?;

        let mut counted = tape.flops().clone();
        if let Some(s) = &sparse {
            counted.merge(&s.estimator_flops);
            for ((l, g), m) in &s.masks {
                let e = density.entry(format!("L{l}.{}", g.name())).or_insert((0.0, 0));
                e.0 += m.density();
                e.1 += 1;
            }
        }
        drop(sparse);

        let grads: Vec<Option<Tensor<S>>> = avars
            .vars
            .values()
            .flat_map(|v| [tape.grad(v.a).cloned(), tape.grad(v.b).cloned()])
            .collect();
        drop(tape);
        let mut params: Vec<&mut Tensor<S>> = adapters
            .adapters
            .values_mut()
            .flat_map(|a| [&mut a.a, &mut a.b])
            .collect();
        let grad_refs: Vec<Option<&Tensor<S>>> = grads.iter().map(Option::as_ref).collect();
        opt.step(&mut params, &grad_refs, &names, lr)?;
        let ms = started.elapsed().as_secs_f64() * 1e3;
        step_ms.push(ms);

        let analytic = analytic_for_batch(model, &targets, &cfg.plan, batch, sparse_step, true);
        dense_flops += analytic_for_batch(model, &targets, &cfg.plan, batch, false, true).total();
        if analytic != counted {
            log::warn!(
                "step {step}: instrumented FLOPs {} differ from analytic {}",
                counted.total(),
                analytic.total()
            );
        }
        records.push(StepRecord {
            step,
            loss: loss_v,
            lr,
            dense: !sparse_step,
            flops: analytic.total(),
            wall_ms: cfg.log_wall.then_some(ms),
        });
        ledger.steps.push((analytic, counted));

        let last = step + 1 == total;
        if let Some(eb) = &eval_batcher {
            if last || (cfg.eval_every > 0 && (step + 1) % cfg.eval_every == 0) {
                let e = evaluate_batches(model, &adapters, &eb.sequential()?, None)?;
                evals.push(EvalRecord {
                    step,
                    loss: e.loss,
                    token_accuracy: e.token_accuracy,
                    exact_match: e.exact_match,
                });
            }
        }
    }

    Ok(RunReport {
        records,
        evals,
        adapters: adapters.cast(),
        ledger,
        dense_flops,
        step_ms,
        mask_density: density
            .into_iter()
            .map(|(k, (s, n))| (k, s / n as f64))
            .collect(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalResult {
    /// Mean cross-entropy per output token.
    pub loss: f64,
    pub token_accuracy: f64,
    /// Fraction of records whose every output token is the argmax.
    pub exact_match: f64,
}

/// Sparsity applied during evaluation, for sensitivity sweeps.
pub struct EvalSparsity<'a, S> {
    pub plan: &'a SparsityPlan,
    pub bank: Option<&'a EstimatorBank<S>>,
    pub seed: u64,
}

/// Evaluate with teacher forcing. Without `sparsity` the forward is dense.
pub fn evaluate_batches<S: Scalar>(
    model: &Model<S>,
    adapters: &AdapterBank<S>,
    batches: &[Batch],
    sparsity: Option<&EvalSparsity<'_, S>>,
) -> Result<EvalResult> {
    let (mut loss_sum, mut n_tok, mut correct, mut exact, mut n_rec) = (0.0, 0usize, 0usize, 0usize, 0usize);
    for (bi, batch) in batches.iter().enumerate() {
        let mut tape = Tape::<S>::new();
        let vars = model.register(&mut tape, false);
        let avars = adapters.register(&mut tape);
        let mut sparse = match sparsity {
            Some(sp) if !sp.plan.is_all_dense() => {
                let seed = sp.seed.wrapping_add(bi as u64);
                let partition = make_partition(sp.plan.token_split, batch, seed)?;
                Some(SparseStep::new(
                    model,
                    sp.plan,
                    sp.bank,
                    batch.tokens.batch,
                    batch.tokens.seq,
                    partition,
                    seed,
                )?)
            }
            _ => None,
        };
        let opts = ForwardOptions {
            adapters: Some(&avars),
            capture: false,
        };
        let out = model.forward(&mut tape, &vars, &batch.tokens, opts, sparse.as_mut())?;
        let logits = tape.value(out.logits);
        let v = logits.cols();
        let seq = batch.tokens.seq;
        for b in 0..batch.tokens.batch {
            let mut all_ok = true;
            let mut any = false;
            for t in 0..seq {
                let r = b * seq + t;
                if !batch.loss_mask[r] {
                    continue;
                }
                any = true;
                let row = &logits.data()[r * v..(r + 1) * v];
                let mx = row.iter().fold(f64::NEG_INFINITY, |m, x| m.max(x.f64()));
                let lse = mx + row.iter().map(|x| (x.f64() - mx).exp()).sum::<f64>().ln();
                let tgt = batch.targets[r];
                loss_sum += lse - row[tgt].f64();
                n_tok += 1;
                let arg = (0..v)
                    .max_by(|&a, &c| row[a].f64().total_cmp(&row[c].f64()).then(c.cmp(&a)))
                    .unwrap_or(0);
                if arg == tgt {
                    correct += 1;
                } else {
                    all_ok = false;
                }
            }
            if any {
                n_rec += 1;
                exact += usize::from(all_ok);
            }
        }
    }
    if n_tok == 0 {
        return Err(Error::Input("evaluation set has no output tokens".into()));
    }
    Ok(EvalResult {
        loss: loss_sum / n_tok as f64,
        token_accuracy: correct as f64 / n_tok as f64,
        exact_match: exact as f64 / n_rec.max(1) as f64,
    })
}

pub fn evaluate<S: Scalar>(
    model: &Model<S>,
    adapters: &AdapterBank<S>,
    data: &Dataset,
    seq_len: usize,
    batch_size: usize,
) -> Result<EvalResult> {
    let batches = Batcher::new(data, seq_len, batch_size)?.sequential()?;
    evaluate_batches(model, adapters, &batches, None)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub seq_len: usize,
    pub optim: OptimConfig,
    pub data_seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            steps: 800,
            batch_size: 16,
            seq_len: 16,
            optim: OptimConfig {
                lr: 3e-3,
                warmup_ratio: 0.05,
                ..OptimConfig::default()
            },
            data_seed: 0,
        }
    }
}

/// Dense training of every weight, scored on the output part of each record;
/// returns the trained model and the loss per step.
pub fn pretrain(model: &Model<f32>, data: &Dataset, cfg: &PretrainConfig) -> Result<(Model<f32>, Vec<f64>)> {
    let batcher = Batcher::new(data, cfg.seq_len, cfg.batch_size)?;
    let per_epoch = batcher.batches_per_epoch();
    let mut model = model.clone();
    let mut weights: Vec<Tensor<f32>> = {
        let mut tape = Tape::<f32>::new();
        let vars = model.register(&mut tape, false);
        vars.all().iter().map(|&v| tape.value(v).clone()).collect()
    };
    let names: Vec<String> = (0..weights.len()).map(|i| format!("weight[{i}]")).collect();
    let mut opt = AdamW::<f32>::new(cfg.optim.clone());
    let mut losses = Vec::with_capacity(cfg.steps);
    let mut batches = Vec::new();
    let mut last_finite = f64::NAN;
    for step in 0..cfg.steps {
        if step % per_epoch == 0 {
            batches = batcher.epoch(cfg.data_seed, step / per_epoch)?;
        }
        let batch = &batches[step % per_epoch];
        let mut tape = Tape::<f32>::new();
        let vars = model.register(&mut tape, true);
        let loss = batch_loss(&mut tape, &model, &vars, None, batch, None)?;
        let lv = tape.value(loss).data()[0].f64();
        if !lv.is_finite() {
            return Err(Error::Diverged {
                step,
                last_finite_loss: last_finite,
            });
        }
        last_finite = lv;
        losses.push(lv);
        tape.backward(loss)?;
        let grads: Vec<Option<Tensor<f32>>> = vars.all().iter().map(|&v| tape.grad(v).cloned()).collect();
        drop(tape);
        let lr = lr_at(step, cfg.steps, cfg.optim.lr, cfg.optim.warmup_ratio);
        let mut params: Vec<&mut Tensor<f32>> = weights.iter_mut().collect();
        let grad_refs: Vec<Option<&Tensor<f32>>> = grads.iter().map(Option::as_ref).collect();
        opt.step(&mut params, &grad_refs, &names, lr)?;
        model = model.with_weights(weights.clone())?;
        if step % 50 == 0 {
            log::info!("pretrain step {step}: loss {lv:.4}");
        }
    }
    Ok((model, losses))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dense_step_boundaries() {
        assert!(is_dense_step(49, 1000, 0.05).unwrap());
        assert!(!is_dense_step(50, 1000, 0.05).unwrap());
        assert!(!is_dense_step(0, 1000, 0.0).unwrap());
        assert!(is_dense_step(0, 10, 0.1).unwrap());
        assert!(!is_dense_step(1, 10, 0.1).unwrap());
        assert!(matches!(is_dense_step(0, 10, 0.2), Err(Error::Config(_))));
    }

    #[test]
    fn lr_schedule_shape() {
        let (total, base) = (100, 1e-3);
        assert_eq!(lr_at(0, total, base, 0.04), base / 4.0);
        assert_eq!(lr_at(4, total, base, 0.04), base);
        let tail = base * 0.5 * (1.0 + (std::f64::consts::PI * 95.0 / 96.0).cos());
        assert!((lr_at(99, total, base, 0.04) - tail).abs() < 1e-12);
        assert_eq!(lr_at(0, total, base, 0.0), base);
    }

    #[test]
    fn adamw_zero_grad_only_decays() {
        let mut p = Tensor::<f64>::from_rows(&[&[2.0, -1.0]]);
        let mut opt = AdamW::new(OptimConfig {
            weight_decay: 0.1,
            ..OptimConfig::default()
        });
        opt.step(&mut [&mut p], &[None], &["p".into()], 0.5).unwrap();
        assert_eq!(p.data(), &[2.0 * 0.95, -0.95]);
    }

    #[test]
    fn adamw_rejects_nonfinite_grad() {
        let mut p = Tensor::<f64>::zeros(&[1, 1]);
        let g = Tensor::<f64>::full(&[1, 1], f64::NAN);
        let mut opt = AdamW::new(OptimConfig::default());
        let err = opt.step(&mut [&mut p], &[Some(&g)], &["L0.q.a".into()], 0.1).unwrap_err();
        assert!(err.to_string().contains("L0.q.a"));
    }

    #[test]
    fn median_even_odd() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), Some(2.5));
        assert_eq!(median(&[]), None);
    }
}
