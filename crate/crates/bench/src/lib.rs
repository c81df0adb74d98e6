//! Fixtures shared by the kernel benchmarks.

use sparselora::data::{kv_recall, Batch, Batcher};
use sparselora::train::{batch_loss, make_partition};
use sparselora::{
    attach_lora, build_model, AdapterBank, EstimatorBank, Model, ModelConfig, Proj, SparseStep, SparsityPlan,
    Tape,
};

/// One fine-tuning step's inputs at a given geometry.
pub struct StepFixture {
    pub model: Model<f32>,
    pub adapters: AdapterBank<f32>,
    pub bank: EstimatorBank<f32>,
    pub batch: Batch,
}

impl StepFixture {
    pub fn new(cfg: &ModelConfig, batch: usize, seq: usize, rank: usize) -> Self {
        let model = build_model::<f32>(cfg, 0).expect("model");
        let adapters = attach_lora(cfg, &[Proj::Q, Proj::K, Proj::V, Proj::O], 16, 32.0, 1).expect("adapters");
        let layers: Vec<usize> = (0..cfg.n_layers).collect();
        let bank = EstimatorBank::build(&model, rank, &layers).expect("estimator");
        let data = kv_recall(batch, 3, 2);
        let batch = Batcher::new(&data, seq, batch)
            .and_then(|b| b.sequential())
            .expect("batch")
            .remove(0);
        StepFixture {
            model,
            adapters,
            bank,
            batch,
        }
    }

    /// Forward and backward of one step; returns the loss.
    pub fn step(&self, plan: Option<&SparsityPlan>) -> f32 {
        let mut tape = Tape::new();
        let vars = self.model.register(&mut tape, false);
        let av = self.adapters.register(&mut tape);
        let loss = match plan {
            Some(p) => {
                let part = make_partition(p.token_split, &self.batch, 0).expect("partition");
                let (b, s) = (self.batch.tokens.batch, self.batch.tokens.seq);
                let mut step = SparseStep::new(&self.model, p, Some(&self.bank), b, s, part, 0).expect("step");
                batch_loss(&mut tape, &self.model, &vars, Some(&av), &self.batch, Some(&mut step))
            }
            None => batch_loss(&mut tape, &self.model, &vars, Some(&av), &self.batch, None),
        }
        .expect("loss");
        tape.backward(loss).expect("backward");
        tape.value(loss).data()[0]
    }
}
