use sparselora::data::kv_recall;
use sparselora::plan::{Criteria, Granularity, Metric, SparsityPlan, TokenSplit};
use sparselora::train::{train, RunConfig};
use sparselora::{build_model, EstimatorBank, FlopPath, Model, ModelConfig, Proj};

fn setup() -> (Model<f32>, EstimatorBank<f32>) {
    let model = build_model(&ModelConfig::tiny(), 3).unwrap();
    let bank = EstimatorBank::build(&model, 4, &[0, 1]).unwrap();
    (model, bank)
}

fn run_cfg(mut plan: SparsityPlan) -> RunConfig {
    plan.estimator_rank = 4;
    RunConfig {
        plan,
        lora_rank: 4,
        lora_alpha: 8.0,
        steps: 4,
        batch_size: 4,
        seq_len: 24,
        optim: sparselora::train::OptimConfig {
            lr: 1e-2,
            ..Default::default()
        },
        ..RunConfig::default()
    }
}

fn assert_closure(cfg: &RunConfig) {
    let (model, bank) = setup();
    let data = kv_recall(16, 2, 1);
    let report = train(&model, Some(&bank), &data, None, cfg).unwrap();
    assert!(
        report.ledger.mismatches().is_empty(),
        "ledger mismatch at steps {:?}: {:?}",
        report.ledger.mismatches(),
        report.ledger.steps[report.ledger.mismatches()[0]]
    );
    assert_eq!(report.records.len(), cfg.steps);
}

#[test]
fn ledger_closes_dense() {
    assert_closure(&run_cfg(SparsityPlan::dense()));
}

#[test]
fn ledger_closes_svd_token_split() {
    assert_closure(&run_cfg(SparsityPlan::uniform(2, 0.5, 0.5)));
}

#[test]
fn ledger_closes_svd_without_split() {
    let mut plan = SparsityPlan::uniform(2, 0.5, 0.25);
    plan.token_split = TokenSplit::Off;
    assert_closure(&run_cfg(plan));
}

#[test]
fn ledger_closes_random_split_and_all_token_stats() {
    let mut plan = SparsityPlan::uniform(2, 0.75, 0.5);
    plan.token_split = TokenSplit::Random;
    plan.estimator_all_tokens = true;
    assert_closure(&run_cfg(plan));
}

#[test]
fn ledger_closes_oracle_and_metric_variants() {
    for metric in [Metric::Random, Metric::Wanda] {
        let mut plan = SparsityPlan::uniform(2, 0.5, 0.5);
        plan.criteria = Criteria::Oracle;
        plan.metrics.apply_override(metric);
        assert_closure(&run_cfg(plan));
    }
    let mut plan = SparsityPlan::uniform(2, 0.5, 0.5);
    plan.metrics.apply_override(Metric::Random);
    assert_closure(&run_cfg(plan));
}

#[test]
fn ledger_closes_head_granularity_and_ffn_adapters() {
    let mut plan = SparsityPlan::uniform(2, 0.5, 0.5);
    plan.qk_granularity = Some(Granularity::Head);
    plan.layers.remove(&0);
    let mut cfg = run_cfg(plan);
    cfg.targets = Proj::ALL.to_vec();
    assert_closure(&cfg);
}

#[test]
fn dense_warmup_steps_are_dense() {
    let mut plan = SparsityPlan::uniform(2, 0.5, 0.5);
    plan.dense_warmup = 0.1;
    let mut cfg = run_cfg(plan);
    cfg.steps = 12;
    let (model, bank) = setup();
    let report = train(&model, Some(&bank), &kv_recall(48, 2, 1), None, &cfg).unwrap();
    let dense: Vec<bool> = report.records.iter().map(|r| r.dense).collect();
    assert_eq!(&dense[..2], &[true, true]);
    assert!(dense[2..].iter().all(|d| !d));
    for (r, (a, _)) in report.records.iter().zip(&report.ledger.steps) {
        assert_eq!(r.dense, a.path_total(FlopPath::Estimator) == 0);
    }
}

#[test]
fn metrics_log_is_deterministic() {
    let cfg = run_cfg(SparsityPlan::uniform(2, 0.5, 0.5));
    let (model, bank) = setup();
    let data = kv_recall(16, 2, 1);
    let a = train(&model, Some(&bank), &data, Some(&data), &cfg).unwrap();
    let b = train(&model, Some(&bank), &data, Some(&data), &cfg).unwrap();
    assert_eq!(a.metrics_log(), b.metrics_log());
    assert_eq!(a.adapters, b.adapters);
}

#[test]
fn flop_budget_extends_sparse_run() {
    let mut cfg = run_cfg(SparsityPlan::uniform(2, 0.75, 0.5));
    cfg.steps = 4;
    cfg.flop_budget = Some(1.0);
    let (model, bank) = setup();
    let report = train(&model, Some(&bank), &kv_recall(16, 2, 1), None, &cfg).unwrap();
    assert!(report.records.len() > 4);
    let dense_nominal: u64 = report.dense_flops * 4 / report.records.len() as u64;
    assert!(report.ledger.analytic_total() as f64 >= 0.99 * dense_nominal as f64);
}
