use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use sparselora::container::{
    adapters_from_container, adapters_to_container, estimator_from_container, estimator_to_container,
    model_from_container, model_to_container, Container,
};
use sparselora::data::{kv_recall, load_dataset, pretrain_corpus, shift_tail, write_dataset, Batcher, Dataset};
use sparselora::harness::{
    adapter_targets, allocate_sparsity, compare_masks, curves_from_csv, curves_to_csv, decompose,
    llama2_7b_math10k_plan, sweep_layer_sensitivity, AllocContext, FlopsSummary, SweepGroup, VoReference,
    REFERENCE_ESTIMATOR_FLOPS_PCT,
};
use sparselora::plan::{parse_layers, parse_percent, PendingGroups};
use sparselora::sparsity::{attention_map_errors, AttnStrategy, EstimatorBank};
use sparselora::train::{evaluate, median, pretrain, train, PretrainConfig, RunConfig};
use sparselora::{build_model, AdapterBank, FlopPath, Model, ModelConfig, Proj, SparsityPlan, StepGeometry};

#[derive(Parser)]
#[command(name = "sparselora", version, about = "Contextual channel sparsity for LoRA fine-tuning")]
struct Cli {
    /// Seed for every random choice the subcommand makes (default 0).
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write a synthetic dataset.
    GenData(GenDataArgs),
    /// Dense language-model training of a base checkpoint.
    Pretrain(PretrainArgs),
    /// Build the low-rank estimator container from a checkpoint.
    Decompose(DecomposeArgs),
    /// LoRA fine-tuning under a sparsity plan.
    Train(TrainArgs),
    /// Dense evaluation of a checkpoint with optional adapters.
    Eval(EvalArgs),
    /// Per-layer sensitivity curves as CSV.
    SweepSensitivity(SweepArgs),
    /// Greedy sparsity allocation from sensitivity curves.
    Allocate(AllocateArgs),
    /// Agreement between oracle and estimator masks across ranks.
    CompareMasks(CompareArgs),
    /// Attention-map error of QK pruning strategies.
    AttnFidelity(AttnArgs),
    /// Closed-form FLOPs of a plan without training.
    Flops(FlopsArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// shift (tail-shift fine-tuning task), kv (key-value recall) or corpus
    /// (copy problems for pre-training).
    #[arg(long, default_value = "shift")]
    task: String,
    #[arg(long, default_value_t = 1024)]
    n: usize,
    /// Bindings per kv record.
    #[arg(long, default_value_t = 3)]
    pairs: usize,
    /// Letters before the separator in shift records.
    #[arg(long, default_value_t = 10)]
    context_len: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PretrainArgs {
    /// Model preset: tiny, small or default.
    #[arg(long, default_value = "small")]
    model: String,
    /// Training text; a synthetic corpus when absent.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value_t = 800)]
    steps: usize,
    #[arg(long, default_value_t = 3e-3)]
    lr: f64,
    #[arg(long, default_value_t = 16)]
    batch: usize,
    #[arg(long, default_value_t = 16)]
    seq_len: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct DecomposeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value_t = 8)]
    rank: usize,
    /// Layer set such as "L0-L3"; every layer when absent.
    #[arg(long)]
    layers: Option<String>,
    #[arg(long)]
    out: PathBuf,
}

/// Flags that override sparsity-plan keys.
#[derive(Args, Default)]
struct PlanFlags {
    /// Sparsity plan file (key = value).
    #[arg(long)]
    plan: Option<PathBuf>,
    /// Estimator rank.
    #[arg(long)]
    rank: Option<usize>,
    /// Percent of steps kept dense, e.g. 5.
    #[arg(long)]
    dense_warmup: Option<String>,
    /// on, off or random.
    #[arg(long)]
    token_split: Option<String>,
    /// oracle or svd.
    #[arg(long)]
    criteria: Option<String>,
    /// l2, qknorm, wanda or random.
    #[arg(long)]
    metric: Option<String>,
    /// channel, pair or head.
    #[arg(long)]
    granularity: Option<String>,
}

impl PlanFlags {
    fn apply(&self, cfg: &mut RunConfig) -> Result<()> {
        if let Some(p) = &self.plan {
            cfg.plan = SparsityPlan::load(p).with_context(|| format!("reading plan {}", p.display()))?;
        }
        let mut pending = PendingGroups::default();
        let mut set = |k: &str, v: String| cfg.plan.set_key(k, &v, &mut pending);
        if let Some(r) = self.rank {
            set("rank", r.to_string())?;
        }
        if let Some(v) = &self.dense_warmup {
            set("step", v.clone())?;
        }
        if let Some(v) = &self.token_split {
            set("token_split", v.clone())?;
        }
        if let Some(v) = &self.criteria {
            set("criteria", v.clone())?;
        }
        if let Some(v) = &self.metric {
            set("metric", v.clone())?;
        }
        if let Some(v) = &self.granularity {
            set("granularity", v.clone())?;
        }
        pending.apply(&mut cfg.plan)?;
        Ok(())
    }

    fn plan(&self) -> Result<SparsityPlan> {
        let mut cfg = RunConfig::default();
        self.apply(&mut cfg)?;
        Ok(cfg.plan)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    eval_data: Option<PathBuf>,
    /// Run configuration (key = value); flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Estimator container; decomposed on the fly when the plan needs one.
    #[arg(long)]
    estimator: Option<PathBuf>,
    #[command(flatten)]
    plan: PlanFlags,
    /// Stop at this percent of the dense run's FLOPs, e.g. 60.
    #[arg(long)]
    flop_budget: Option<String>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    seq_len: Option<usize>,
    /// Include per-step wall-clock time in the metrics log.
    #[arg(long)]
    log_wall: bool,
    /// Metrics log path; stdout when absent.
    #[arg(long)]
    metrics: Option<PathBuf>,
    /// Adapter container output.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    adapters: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 64)]
    seq_len: usize,
    #[arg(long, default_value_t = 16)]
    batch: usize,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Adapters of a dense fine-tuning run.
    #[arg(long)]
    adapters: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    /// Comma-separated ratios, ascending, starting at 0.
    #[arg(long, default_value = "0,0.25,0.5,0.75,0.9")]
    ratios: String,
    /// ffn, qkvo or both.
    #[arg(long, default_value = "both")]
    group: String,
    #[command(flatten)]
    plan: PlanFlags,
    #[arg(long, default_value_t = 64)]
    seq_len: usize,
    #[arg(long, default_value_t = 16)]
    batch: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AllocateArgs {
    /// Curves CSV from sweep-sensitivity.
    #[arg(long)]
    curves: PathBuf,
    /// Target percent of dense step FLOPs, e.g. 60.
    #[arg(long)]
    flop_budget: String,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset fixing the token geometry.
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    plan: PlanFlags,
    #[arg(long, default_value = "q,k,v,o")]
    targets: String,
    #[arg(long, default_value_t = 32)]
    lora_rank: usize,
    #[arg(long, default_value_t = 64)]
    seq_len: usize,
    #[arg(long, default_value_t = 16)]
    batch: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CompareArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "1,2,4,8,16")]
    ranks: String,
    #[command(flatten)]
    plan: PlanFlags,
    /// attn_output or value_norm.
    #[arg(long, default_value = "attn_output")]
    vo_reference: String,
    #[arg(long, default_value_t = 8)]
    batches: usize,
    #[arg(long, default_value_t = 64)]
    seq_len: usize,
    #[arg(long, default_value_t = 8)]
    batch: usize,
}

#[derive(Args)]
struct AttnArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    sparsity: f64,
    #[arg(long, default_value_t = 64)]
    seq_len: usize,
    #[arg(long, default_value_t = 4)]
    batch: usize,
}

#[derive(Args)]
struct FlopsArgs {
    /// Model preset (llama2-7b, default, small, tiny); ignored with --checkpoint.
    #[arg(long, default_value = "llama2-7b")]
    preset: String,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[command(flatten)]
    plan: PlanFlags,
    /// Use the LLaMA2-7B Math10K plan of the reference configuration table.
    #[arg(long)]
    paper_plan: bool,
    #[arg(long, default_value = "q,k,v,o")]
    targets: String,
    #[arg(long, default_value_t = 32)]
    lora_rank: usize,
    #[arg(long, default_value_t = 512)]
    seq_len: usize,
    #[arg(long, default_value_t = 1)]
    batch: usize,
    /// Share of tokens that are loss-bearing outputs (dense under token splitting).
    #[arg(long, default_value_t = 0.0)]
    output_frac: f64,
    /// Steps used to amortise the dense warmup.
    #[arg(long, default_value_t = 1000)]
    steps: usize,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let seed = cli.seed.unwrap_or(0);
    match cli.cmd {
        Cmd::GenData(a) => gen_data(a, seed),
        Cmd::Pretrain(a) => cmd_pretrain(a, seed),
        Cmd::Decompose(a) => cmd_decompose(a),
        Cmd::Train(a) => cmd_train(a, cli.seed),
        Cmd::Eval(a) => cmd_eval(a),
        Cmd::SweepSensitivity(a) => cmd_sweep(a, seed),
        Cmd::Allocate(a) => cmd_allocate(a),
        Cmd::CompareMasks(a) => cmd_compare(a, seed),
        Cmd::AttnFidelity(a) => cmd_attn(a, seed),
        Cmd::Flops(a) => cmd_flops(a),
    }
}

fn load_model(path: &Path) -> Result<Model<f32>> {
    let c = Container::load(path).with_context(|| format!("reading checkpoint {}", path.display()))?;
    Ok(model_from_container(&c)?)
}

fn load_data(path: &Path) -> Result<Dataset> {
    load_dataset(path).with_context(|| format!("reading dataset {}", path.display()))
}

fn parse_list<T: std::str::FromStr>(s: &str, what: &str) -> Result<Vec<T>> {
    s.split(',')
        .filter(|x| !x.trim().is_empty())
        .map(|x| x.trim().parse().map_err(|_| anyhow::anyhow!("bad {what} '{x}'")))
        .collect()
}

fn write_or_print(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn gen_data(a: GenDataArgs, seed: u64) -> Result<()> {
    let ds = match a.task.as_str() {
        "shift" => shift_tail(a.n, a.context_len, seed),
        "kv" => kv_recall(a.n, a.pairs, seed),
        "corpus" => pretrain_corpus(a.n, seed),
        other => bail!("unknown task '{other}' (shift|kv|corpus)"),
    };
    write_dataset(&a.out, &ds)?;
    Ok(())
}

fn cmd_pretrain(a: PretrainArgs, seed: u64) -> Result<()> {
    let cfg = ModelConfig::preset(&a.model)?;
    let data = match &a.data {
        Some(p) => load_data(p)?,
        None => pretrain_corpus(4096, seed),
    };
    let model = build_model(&cfg, seed)?;
    let pcfg = PretrainConfig {
        steps: a.steps,
        batch_size: a.batch,
        seq_len: a.seq_len,
        optim: sparselora::train::OptimConfig {
            lr: a.lr,
            ..PretrainConfig::default().optim
        },
        data_seed: seed,
    };
    let (model, losses) = pretrain(&model, &data, &pcfg)?;
    model_to_container(&model).save(&a.out)?;
    if let Some(l) = losses.last() {
        println!("final loss {l:.4}");
    }
    Ok(())
}

fn cmd_decompose(a: DecomposeArgs) -> Result<()> {
    let model = load_model(&a.checkpoint)?;
    let layers = match &a.layers {
        Some(s) => parse_layers(s)?,
        None => (0..model.cfg.n_layers).collect(),
    };
    let (bank, errors) = decompose(&model, a.rank, &layers)?;
    for (name, err) in &errors {
        println!("{name},{err:.6}");
    }
    estimator_to_container(&bank).save(&a.out)?;
    Ok(())
}

fn cmd_train(a: TrainArgs, seed: Option<u64>) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            RunConfig::parse(&text)?
        }
        None => RunConfig::default(),
    };
    if let Some(seed) = seed {
        cfg.seed = seed;
        cfg.data_seed = seed;
        cfg.metric_seed = seed;
    }
    a.plan.apply(&mut cfg)?;
    if let Some(b) = &a.flop_budget {
        cfg.flop_budget = Some(parse_percent(b)?);
    }
    if let Some(s) = a.steps {
        cfg.steps = s;
    }
    if let Some(lr) = a.lr {
        cfg.optim.lr = lr;
    }
    if let Some(b) = a.batch {
        cfg.batch_size = b;
    }
    if let Some(s) = a.seq_len {
        cfg.seq_len = s;
    }
    cfg.log_wall = a.log_wall;

    let model = load_model(&a.checkpoint)?;
    let data = load_data(&a.data)?;
    let eval = a.eval_data.as_deref().map(load_data).transpose()?;
    let bank = estimator_for(&model, &cfg.plan, a.estimator.as_deref())?;
    let report = train(&model, bank.as_ref(), &data, eval.as_ref(), &cfg)?;

    write_or_print(a.metrics.as_deref(), &report.metrics_log())?;
    if let Some(out) = &a.out {
        adapters_to_container(&report.adapters).save(out)?;
    }
    let mismatches = report.ledger.mismatches();
    if !mismatches.is_empty() {
        bail!("FLOP ledger mismatch on steps {mismatches:?}");
    }
    eprintln!(
        "steps {}  analytic FLOPs {:.4} of dense  estimator share {:.4}%",
        report.records.len(),
        report.flops_fraction(),
        100.0 * report.ledger.path_total(FlopPath::Estimator) as f64 / report.ledger.analytic_total() as f64
    );
    Ok(())
}

/// Load the estimator container, or decompose when the plan needs one and
/// none was given.
fn estimator_for(model: &Model<f32>, plan: &SparsityPlan, path: Option<&Path>) -> Result<Option<EstimatorBank<f32>>> {
    if let Some(p) = path {
        let c = Container::load(p).with_context(|| format!("reading estimator {}", p.display()))?;
        return Ok(Some(estimator_from_container(&c)?));
    }
    if plan.is_all_dense() || !plan.estimator_groups().iter().any(|&g| g) {
        return Ok(None);
    }
    let layers: Vec<usize> = plan.layers.keys().copied().collect();
    log::info!("no estimator given; decomposing at rank {}", plan.estimator_rank);
    Ok(Some(EstimatorBank::build(model, plan.estimator_rank, &layers)?))
}

fn load_adapters(path: Option<&Path>) -> Result<AdapterBank<f32>> {
    match path {
        Some(p) => {
            let c = Container::load(p).with_context(|| format!("reading adapters {}", p.display()))?;
            Ok(adapters_from_container(&c)?)
        }
        None => Ok(AdapterBank::default()),
    }
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let model = load_model(&a.checkpoint)?;
    let adapters = load_adapters(a.adapters.as_deref())?;
    let data = load_data(&a.data)?;
    let e = evaluate(&model, &adapters, &data, a.seq_len, a.batch)?;
    println!(
        "{}",
        serde_json::json!({
            "loss": e.loss,
            "token_accuracy": e.token_accuracy,
            "exact_match": e.exact_match,
        })
    );
    Ok(())
}

fn cmd_sweep(a: SweepArgs, seed: u64) -> Result<()> {
    let model = load_model(&a.checkpoint)?;
    let adapters = load_adapters(a.adapters.as_deref())?;
    let data = load_data(&a.data)?;
    let batches = Batcher::new(&data, a.seq_len, a.batch)?.sequential()?;
    let ratios: Vec<f64> = parse_list(&a.ratios, "ratio")?;
    let groups = match a.group.as_str() {
        "both" => vec![SweepGroup::Ffn, SweepGroup::Qkvo],
        g => vec![g.parse()?],
    };
    let base = a.plan.plan()?;
    let mut curves = Vec::new();
    for g in groups {
        curves.extend(sweep_layer_sensitivity(&model, &adapters, &batches, &ratios, g, &base, seed)?);
    }
    write_or_print(a.out.as_deref(), &curves_to_csv(&curves))
}

fn cmd_allocate(a: AllocateArgs) -> Result<()> {
    let text = fs::read_to_string(&a.curves).with_context(|| format!("reading {}", a.curves.display()))?;
    let curves = curves_from_csv(&text)?;
    let model = load_model(&a.checkpoint)?;
    let data = load_data(&a.data)?;
    let batches = Batcher::new(&data, a.seq_len, a.batch)?.sequential()?;
    let (mut tokens, mut outputs) = (0usize, 0usize);
    for b in &batches {
        tokens += b.tokens.rows();
        outputs += b.output_tokens();
    }
    let geometry = StepGeometry {
        batch: a.batch,
        seq_len: a.seq_len,
        context_tokens: a.batch * a.seq_len - (outputs * a.batch * a.seq_len).div_ceil(tokens.max(1)),
    };
    let targets = adapter_targets(&model.cfg, &Proj::parse_set(&a.targets)?, a.lora_rank);
    let base = a.plan.plan()?;
    let ctx = AllocContext {
        cfg: &model.cfg,
        geometry,
        adapters: &targets,
        base: &base,
    };
    let alloc = allocate_sparsity(&curves, parse_percent(&a.flop_budget)?, &ctx)?;
    eprintln!("step FLOPs fraction {:.4} (floor {:.4})", alloc.fraction, alloc.floor);
    write_or_print(a.out.as_deref(), &alloc.plan.render())
}

fn cmd_compare(a: CompareArgs, seed: u64) -> Result<()> {
    let model = load_model(&a.checkpoint)?.cast::<f64>();
    let data = load_data(&a.data)?;
    let batches: Vec<_> = Batcher::new(&data, a.seq_len, a.batch)?
        .epoch(seed, 0)?
        .into_iter()
        .take(a.batches)
        .map(|b| b.tokens)
        .collect();
    let ranks: Vec<usize> = parse_list(&a.ranks, "rank")?;
    let mut plan = a.plan.plan()?;
    if plan.is_all_dense() {
        plan = SparsityPlan::uniform(model.cfg.n_layers, 0.5, 0.5);
    }
    let layers: Vec<usize> = plan.layers.keys().copied().collect();
    let banks = EstimatorBank::build_ranks(&model, &ranks, &layers)?;
    let vo = match a.vo_reference.as_str() {
        "attn_output" => VoReference::AttnOutput,
        "value_norm" => VoReference::ValueNorm,
        other => bail!("unknown vo reference '{other}' (attn_output|value_norm)"),
    };
    let agreement = compare_masks(&model, &banks, &batches, &plan, vo)?;
    println!("rank,layer,group,mean_overlap,median_overlap");
    for m in &agreement {
        println!("{},{},{},{:.4},{:.4}", m.rank, m.layer, m.group.name(), m.mean(), m.median());
    }
    let geometry = StepGeometry {
        batch: a.batch,
        seq_len: a.seq_len,
        context_tokens: a.batch * a.seq_len,
    };
    for &rank in &ranks {
        let mut p = plan.clone();
        p.estimator_rank = rank;
        p.token_split = sparselora::TokenSplit::Off;
        let s = FlopsSummary::new(&model.cfg, &p, geometry, &[]);
        eprintln!("rank {rank}: estimator share of step FLOPs {:.4}%", 100.0 * s.estimator_fraction());
    }
    Ok(())
}

fn cmd_attn(a: AttnArgs, seed: u64) -> Result<()> {
    let model = load_model(&a.checkpoint)?.cast::<f64>();
    let data = load_data(&a.data)?;
    let batch = Batcher::new(&data, a.seq_len, a.batch)?
        .epoch(seed, 0)?
        .into_iter()
        .next()
        .context("dataset too small for one batch")?;
    println!("strategy,layer,head,error");
    for (name, strategy) in [
        ("qk_norm", AttnStrategy::QkNorm),
        ("l2_input", AttnStrategy::L2Input),
        ("random", AttnStrategy::Random),
    ] {
        let mut all = Vec::new();
        for layer in 0..model.cfg.n_layers {
            let errs = attention_map_errors(&model, &batch.tokens, layer, strategy, a.sparsity, seed)?;
            for (h, e) in errs.iter().enumerate() {
                println!("{name},{layer},{h},{e:.6}");
            }
            all.extend(errs);
        }
        eprintln!("{name}: median error {:.6}", median(&all).unwrap_or(f64::NAN));
    }
    Ok(())
}

fn cmd_flops(a: FlopsArgs) -> Result<()> {
    let cfg = match &a.checkpoint {
        Some(p) => load_model(p)?.cfg,
        None => ModelConfig::preset(&a.preset)?,
    };
    let plan = if a.paper_plan {
        llama2_7b_math10k_plan()
    } else {
        a.plan.plan()?
    };
    plan.validate(cfg.n_layers)?;
    if !(0.0..1.0).contains(&a.output_frac) {
        bail!("output fraction {} not in [0, 1)", a.output_frac);
    }
    let tokens = a.batch * a.seq_len;
    let geometry = StepGeometry {
        batch: a.batch,
        seq_len: a.seq_len,
        context_tokens: tokens - (a.output_frac * tokens as f64).round() as usize,
    };
    let targets = adapter_targets(&cfg, &Proj::parse_set(&a.targets)?, a.lora_rank);
    let s = FlopsSummary::new(&cfg, &plan, geometry, &targets);
    print!("{}", s.render());
    println!("step_fraction,{:.6}", s.fraction());
    println!("run_fraction,{:.6}", s.run_fraction(a.steps, plan.dense_warmup)?);
    println!("estimator_pct,{:.6}", 100.0 * s.estimator_fraction());
    println!("reference_estimator_pct,{REFERENCE_ESTIMATOR_FLOPS_PCT}");
    Ok(())
}
