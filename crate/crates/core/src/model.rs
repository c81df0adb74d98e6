//! LLaMA-style decoder: RMSNorm, rotary attention, SwiGLU feed-forward.
//!
//! The frozen weights live behind `Arc`s so the tape, the slice cache and the
//! estimator can all share them without copies.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flops::Branch;
use crate::lora::{lora_delta, AdapterVars, Proj};
use crate::sparse_exec::{dense_ffn, main_linear_cached, sparse_ffn, split_tokens_compute, Slice};
use crate::sparsity::{ChannelMask, SparseStep};
use crate::tape::{softmax_in_place, AttnShape, Tape, Var};
use crate::tensor::{Scalar, Tensor};

const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ffn: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub rope_theta: f64,
    pub rmsnorm_eps: f64,
    /// Rotary position embeddings on Q and K. Without them the model has no
    /// positional signal beyond causality.
    pub rope: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n_layers: 8,
            n_heads: 8,
            d_model: 256,
            d_ffn: 1024,
            vocab_size: crate::data::VOCAB,
            max_seq_len: 256,
            rope_theta: 10000.0,
            rmsnorm_eps: 1e-5,
            rope: true,
        }
    }
}

impl ModelConfig {
    /// LLaMA2-7B geometry, for closed-form FLOP accounting only.
    pub fn llama2_7b() -> Self {
        ModelConfig {
            n_layers: 32,
            n_heads: 32,
            d_model: 4096,
            d_ffn: 11008,
            vocab_size: 32000,
            max_seq_len: 4096,
            ..ModelConfig::default()
        }
    }

    /// Four-layer model used for desk-scale experiments.
    pub fn small() -> Self {
        ModelConfig {
            n_layers: 4,
            n_heads: 4,
            d_model: 64,
            d_ffn: 256,
            max_seq_len: 64,
            ..ModelConfig::default()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "tiny" => Ok(Self::tiny()),
            "small" => Ok(Self::small()),
            "default" => Ok(Self::default()),
            "llama2-7b" => Ok(Self::llama2_7b()),
            other => Err(Error::Config(format!(
                "unknown model preset '{other}' (tiny|small|default|llama2-7b)"
            ))),
        }
    }

    /// A few-second configuration used by tests and smoke runs.
    pub fn tiny() -> Self {
        ModelConfig {
            n_layers: 2,
            n_heads: 2,
            d_model: 32,
            d_ffn: 64,
            vocab_size: crate::data::VOCAB,
            max_seq_len: 64,
            ..ModelConfig::default()
        }
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        for (name, v) in [
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_model", self.d_model),
            ("d_ffn", self.d_ffn),
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
        ] {
            if v == 0 {
                bad.push(format!("{name} must be at least 1"));
            }
        }
        if self.n_heads > 0 && !self.d_model.is_multiple_of(self.n_heads) {
            bad.push(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        } else if self.n_heads > 0 && !self.d_head().is_multiple_of(2) {
            bad.push(format!("d_head {} must be even", self.d_head()));
        }
        if !(self.rope_theta > 0.0) {
            bad.push(format!("rope_theta {} must be positive", self.rope_theta));
        }
        if !(self.rmsnorm_eps > 0.0) {
            bad.push(format!("rmsnorm_eps {} must be positive", self.rmsnorm_eps));
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(bad.join("; ")))
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerWeights<S> {
    pub wq: Arc<Tensor<S>>,
    pub wk: Arc<Tensor<S>>,
    pub wv: Arc<Tensor<S>>,
    pub wo: Arc<Tensor<S>>,
    pub w_gate: Arc<Tensor<S>>,
    pub w_up: Arc<Tensor<S>>,
    pub w_down: Arc<Tensor<S>>,
    pub attn_norm: Arc<Tensor<S>>,
    pub ffn_norm: Arc<Tensor<S>>,
}

impl<S: Scalar> LayerWeights<S> {
    pub fn zeros(d_model: usize, d_ffn: usize) -> Self {
        let z = |r, c| Arc::new(Tensor::zeros(&[r, c]));
        LayerWeights {
            wq: z(d_model, d_model),
            wk: z(d_model, d_model),
            wv: z(d_model, d_model),
            wo: z(d_model, d_model),
            w_gate: z(d_model, d_ffn),
            w_up: z(d_model, d_ffn),
            w_down: z(d_ffn, d_model),
            attn_norm: Arc::new(Tensor::full(&[1, d_model], S::one())),
            ffn_norm: Arc::new(Tensor::full(&[1, d_model], S::one())),
        }
    }

    pub fn weight(&self, p: Proj) -> &Arc<Tensor<S>> {
        match p {
            Proj::Q => &self.wq,
            Proj::K => &self.wk,
            Proj::V => &self.wv,
            Proj::O => &self.wo,
            Proj::Gate => &self.w_gate,
            Proj::Up => &self.w_up,
            Proj::Down => &self.w_down,
        }
    }

    pub fn weight_mut(&mut self, p: Proj) -> &mut Arc<Tensor<S>> {
        match p {
            Proj::Q => &mut self.wq,
            Proj::K => &mut self.wk,
            Proj::V => &mut self.wv,
            Proj::O => &mut self.wo,
            Proj::Gate => &mut self.w_gate,
            Proj::Up => &mut self.w_up,
            Proj::Down => &mut self.w_down,
        }
    }

    fn cast<T: Scalar>(&self) -> LayerWeights<T> {
        let c = |t: &Arc<Tensor<S>>| Arc::new(t.cast::<T>());
        LayerWeights {
            wq: c(&self.wq),
            wk: c(&self.wk),
            wv: c(&self.wv),
            wo: c(&self.wo),
            w_gate: c(&self.w_gate),
            w_up: c(&self.w_up),
            w_down: c(&self.w_down),
            attn_norm: c(&self.attn_norm),
            ffn_norm: c(&self.ffn_norm),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model<S> {
    pub cfg: ModelConfig,
    /// `vocab × d_model`.
    pub embed: Arc<Tensor<S>>,
    pub layers: Vec<LayerWeights<S>>,
    pub final_norm: Arc<Tensor<S>>,
    /// `d_model × vocab`.
    pub lm_head: Arc<Tensor<S>>,
}

/// Seeded `N(0, 0.02)` projections and embeddings, unit norm gains.
pub fn build_model<S: Scalar>(cfg: &ModelConfig, seed: u64) -> Result<Model<S>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (d, f) = (cfg.d_model, cfg.d_ffn);
    let mut rand = |r: usize, c: usize| Arc::new(Tensor::randn(&[r, c], INIT_STD, &mut rng));
    let embed = rand(cfg.vocab_size, d);
    let mut layers = Vec::with_capacity(cfg.n_layers);
    for _ in 0..cfg.n_layers {
        layers.push(LayerWeights {
            wq: rand(d, d),
            wk: rand(d, d),
            wv: rand(d, d),
            wo: rand(d, d),
            w_gate: rand(d, f),
            w_up: rand(d, f),
            w_down: rand(f, d),
            attn_norm: Arc::new(Tensor::full(&[1, d], S::one())),
            ffn_norm: Arc::new(Tensor::full(&[1, d], S::one())),
        });
    }
    let lm_head = rand(d, cfg.vocab_size);
    Ok(Model {
        cfg: cfg.clone(),
        embed,
        layers,
        final_norm: Arc::new(Tensor::full(&[1, d], S::one())),
        lm_head,
    })
}

/// Token ids of a `batch × seq` block, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenBatch {
    pub batch: usize,
    pub seq: usize,
    pub ids: Vec<usize>,
}

impl TokenBatch {
    pub fn new(batch: usize, seq: usize, ids: Vec<usize>) -> Result<Self> {
        if ids.len() != batch * seq || batch == 0 || seq == 0 {
            return Err(Error::dim("token batch", &[batch, seq], &[ids.len()]));
        }
        Ok(TokenBatch { batch, seq, ids })
    }

    pub fn rows(&self) -> usize {
        self.batch * self.seq
    }
}

/// Per-layer activations captured during a forward.
#[derive(Clone, Debug, Default)]
pub struct ActivationTap<S> {
    /// Input to `W_down`; present when the fused dense FFN ran.
    pub ffn_intermediate: Option<Tensor<S>>,
    /// Input to `W_O`.
    pub attn_output: Option<Tensor<S>>,
    /// `Q` and `K` before rotary embedding.
    pub q_proj: Option<Tensor<S>>,
    pub k_proj: Option<Tensor<S>>,
    /// Normed inputs of the attention and FFN blocks.
    pub attn_input: Option<Tensor<S>>,
    pub ffn_input: Option<Tensor<S>>,
}

/// Tape handles of all model weights for one step.
#[derive(Clone, Debug)]
pub struct ModelVars {
    pub embed: Var,
    pub layers: Vec<LayerVars>,
    pub final_norm: Var,
    pub lm_head: Var,
}

#[derive(Clone, Debug)]
pub struct LayerVars {
    /// Indexed by [`Proj::index`].
    pub proj: [Var; 7],
    pub attn_norm: Var,
    pub ffn_norm: Var,
}

impl ModelVars {
    /// Every weight handle in a fixed order (embed, per layer, final norm, head).
    pub fn all(&self) -> Vec<Var> {
        let mut v = vec![self.embed];
        for l in &self.layers {
            v.extend_from_slice(&l.proj);
            v.push(l.attn_norm);
            v.push(l.ffn_norm);
        }
        v.push(self.final_norm);
        v.push(self.lm_head);
        v
    }
}

#[derive(Clone, Copy, Default)]
pub struct ForwardOptions<'a, S> {
    pub adapters: Option<&'a AdapterVars<S>>,
    pub capture: bool,
}

pub struct ForwardOutput<S> {
    /// `(batch·seq) × vocab`.
    pub logits: Var,
    /// One entry per layer when capture was requested, else empty.
    pub taps: Vec<ActivationTap<S>>,
    /// Attention output node of each layer, for probability inspection.
    pub attention: Vec<Var>,
}

impl<S: Scalar> Model<S> {
    pub fn cast<T: Scalar>(&self) -> Model<T> {
        Model {
            cfg: self.cfg.clone(),
            embed: Arc::new(self.embed.cast()),
            layers: self.layers.iter().map(LayerWeights::cast).collect(),
            final_norm: Arc::new(self.final_norm.cast()),
            lm_head: Arc::new(self.lm_head.cast()),
        }
    }

    pub fn num_params(&self) -> usize {
        let per_layer: usize = self
            .layers
            .first()
            .map(|l| {
                Proj::ALL.iter().map(|&p| l.weight(p).len()).sum::<usize>()
                    + l.attn_norm.len()
                    + l.ffn_norm.len()
            })
            .unwrap_or(0);
        self.embed.len() + per_layer * self.layers.len() + self.final_norm.len() + self.lm_head.len()
    }

    pub fn weight(&self, layer: usize, p: Proj) -> &Arc<Tensor<S>> {
        self.layers[layer].weight(p)
    }

    /// Put the weights on the tape, trainable only for pre-training.
    pub fn register(&self, tape: &mut Tape<S>, trainable: bool) -> ModelVars {
        let mut leaf = |t: &Arc<Tensor<S>>| tape.leaf(Arc::clone(t), trainable);
        let embed = leaf(&self.embed);
        let layers = self
            .layers
            .iter()
            .map(|lw| LayerVars {
                proj: Proj::ALL.map(|p| leaf(lw.weight(p))),
                attn_norm: leaf(&lw.attn_norm),
                ffn_norm: leaf(&lw.ffn_norm),
            })
            .collect();
        let final_norm = leaf(&self.final_norm);
        let lm_head = leaf(&self.lm_head);
        ModelVars {
            embed,
            layers,
            final_norm,
            lm_head,
        }
    }

    /// Rebuild from tensors in [`ModelVars::all`] order.
    pub fn with_weights(&self, mut ws: Vec<Tensor<S>>) -> Result<Model<S>> {
        let expect = 1 + self.layers.len() * 9 + 2;
        if ws.len() != expect {
            return Err(Error::dim("with_weights", &[expect], &[ws.len()]));
        }
        let mut m = self.clone();
        let mut it = ws.drain(..);
        let mut next = |old: &Arc<Tensor<S>>| -> Result<Arc<Tensor<S>>> {
            let t = it.next().expect("count checked");
            if t.shape() != old.shape() {
                return Err(Error::dim("with_weights", old.shape(), t.shape()));
            }
            Ok(Arc::new(t))
        };
        m.embed = next(&self.embed)?;
        for (l, lw) in m.layers.iter_mut().enumerate() {
            for p in Proj::ALL {
                *lw.weight_mut(p) = next(self.layers[l].weight(p))?;
            }
            lw.attn_norm = next(&self.layers[l].attn_norm)?;
            lw.ffn_norm = next(&self.layers[l].ffn_norm)?;
        }
        m.final_norm = next(&self.final_norm)?;
        m.lm_head = next(&self.lm_head)?;
        Ok(m)
    }

    fn attn_shape(&self, tokens: &TokenBatch) -> AttnShape {
        AttnShape {
            batch: tokens.batch,
            seq: tokens.seq,
            heads: self.cfg.n_heads,
            d_head: self.cfg.d_head(),
        }
    }

    fn check_tokens(&self, tokens: &TokenBatch) -> Result<()> {
        if tokens.seq > self.cfg.max_seq_len {
            return Err(Error::Input(format!(
                "sequence length {} exceeds max_seq_len {}",
                tokens.seq, self.cfg.max_seq_len
            )));
        }
        if let Some(pos) = tokens.ids.iter().position(|&id| id >= self.cfg.vocab_size) {
            return Err(Error::Input(format!(
                "token {} at batch {} position {} is outside the vocabulary ({})",
                tokens.ids[pos],
                pos / tokens.seq,
                pos % tokens.seq,
                self.cfg.vocab_size
            )));
        }
        Ok(())
    }

    /// Logits for every position. With `sparse` present each layer asks its
    /// mask builder for masks and runs the sliced paths.
    pub fn forward(
        &self,
        tape: &mut Tape<S>,
        vars: &ModelVars,
        tokens: &TokenBatch,
        opts: ForwardOptions<'_, S>,
        mut sparse: Option<&mut SparseStep<'_, S>>,
    ) -> Result<ForwardOutput<S>> {
        self.check_tokens(tokens)?;
        let cfg = &self.cfg;
        let shape = self.attn_shape(tokens);
        let eps = S::of(cfg.rmsnorm_eps);
        let rope = if cfg.rope {
            Some(Arc::new(rope_table::<S>(
                &row_positions(tokens.batch, tokens.seq),
                cfg.d_head(),
                cfg.rope_theta,
            )))
        } else {
            None
        };

        let prev = tape.set_scope(None, Branch::Main);
        let mut x = tape.embedding(vars.embed, &tokens.ids)?;
        let mut taps = Vec::new();
        let mut attention = Vec::with_capacity(cfg.n_layers);

        for (l, (lw, lv)) in self.layers.iter().zip(&vars.layers).enumerate() {
            tape.set_scope(Some(l), Branch::Main);
            let mut tap = ActivationTap::default();
            let adapter = |p: Proj| opts.adapters.and_then(|a| a.get(l, p)).copied();

            // Attention block.
            let h = tape.rmsnorm(x, lv.attn_norm, eps)?;
            if opts.capture {
                tap.attn_input = Some(tape.value(h).clone());
            }
            let (qk_mask, vo_mask) = match sparse.as_deref_mut() {
                Some(s) => s.attention_masks(l, tape.value(h))?,
                None => (None, None),
            };
            if let (Some(m), true) = (&qk_mask, cfg.rope) {
                m.check_rope_pairs()?;
            }
            let ads = opts.adapters;
            let proj = |tape: &mut Tape<S>, sp: Option<&mut SparseStep<'_, S>>, x: Var, p: Proj, slice: Slice<'_>| {
                self.project(tape, sp, lv, ads, l, x, p, slice)
            };
            let mut q = proj(tape, sparse.as_deref_mut(), h, Proj::Q, out_slice(&qk_mask))?;
            let mut k = proj(tape, sparse.as_deref_mut(), h, Proj::K, out_slice(&qk_mask))?;
            let v = proj(tape, sparse.as_deref_mut(), h, Proj::V, out_slice(&vo_mask))?;
            if opts.capture {
                tap.q_proj = Some(tape.value(q).clone());
                tap.k_proj = Some(tape.value(k).clone());
            }
            if let Some(table) = &rope {
                q = tape.rope(q, Arc::clone(table), cfg.d_head())?;
                k = tape.rope(k, Arc::clone(table), cfg.d_head())?;
            }
            let a = tape.attention(q, k, v, shape)?;
            attention.push(a);
            if opts.capture {
                tap.attn_output = Some(tape.value(a).clone());
            }
            let o_slice = vo_mask.as_ref().map_or(Slice::Dense, Slice::In);
            let o = proj(tape, sparse.as_deref_mut(), a, Proj::O, o_slice)?;
            x = tape.add(x, o)?;

            // Feed-forward block.
            let h2 = tape.rmsnorm(x, lv.ffn_norm, eps)?;
            if opts.capture {
                tap.ffn_input = Some(tape.value(h2).clone());
            }
            let ffn_mask = match sparse.as_deref_mut() {
                Some(s) => s.ffn_mask(l, tape.value(h2))?,
                None => None,
            };
            let ffn_adapters = [Proj::Gate, Proj::Up, Proj::Down]
                .into_iter()
                .any(|p| adapter(p).is_some());
            let (gv, uv, dv) = (
                lv.proj[Proj::Gate.index()],
                lv.proj[Proj::Up.index()],
                lv.proj[Proj::Down.index()],
            );
            let f = if ffn_adapters {
                let sl = out_slice(&ffn_mask);
                let g = proj(tape, sparse.as_deref_mut(), h2, Proj::Gate, sl)?;
                let u = proj(tape, sparse.as_deref_mut(), h2, Proj::Up, sl)?;
                let sg = tape.silu(g);
                let inter = tape.mul(sg, u)?;
                if opts.capture {
                    tap.ffn_intermediate = Some(tape.value(inter).clone());
                }
                proj(tape, sparse.as_deref_mut(), inter, Proj::Down, ffn_mask.as_ref().map_or(Slice::Dense, Slice::In))?
            } else {
                match (&ffn_mask, sparse.as_deref_mut()) {
                    (Some(m), Some(s)) => {
                        let cache = &mut s.cache;
                        match s.partition.as_ref() {
                            Some(p) => split_tokens_compute(
                                tape,
                                h2,
                                p,
                                |t, rows| sparse_ffn(t, rows, lw, m, cache.as_deref_mut(), l),
                                |t, rows| Ok(dense_ffn(t, rows, gv, uv, dv)?.0),
                            )?,
                            None => sparse_ffn(tape, h2, lw, m, cache.as_deref_mut(), l)?,
                        }
                    }
                    _ => {
                        let (out, inter) = dense_ffn(tape, h2, gv, uv, dv)?;
                        if opts.capture {
                            tap.ffn_intermediate = Some(tape.value(inter).clone());
                        }
                        out
                    }
                }
            };
            x = tape.add(x, f)?;
            if opts.capture {
                taps.push(tap);
            }
        }

        tape.set_scope(None, Branch::Head);
        let hf = tape.rmsnorm(x, vars.final_norm, eps)?;
        let logits = tape.matmul(hf, vars.lm_head)?;
        tape.restore_scope(prev);
        Ok(ForwardOutput {
            logits,
            taps,
            attention,
        })
    }

    #[allow(clippy::too_many_arguments)]
    fn project(
        &self,
        tape: &mut Tape<S>,
        sparse: Option<&mut SparseStep<'_, S>>,
        lv: &LayerVars,
        adapters: Option<&AdapterVars<S>>,
        l: usize,
        x: Var,
        p: Proj,
        slice: Slice<'_>,
    ) -> Result<Var> {
        let (partition, cache) = match sparse {
            Some(s) => (s.partition.as_ref(), s.cache.as_deref_mut()),
            None => (None, None),
        };
        let main = main_linear_cached(
            tape,
            x,
            self.weight(l, p),
            slice,
            Some(lv.proj[p.index()]),
            partition,
            cache.map(|c| (c, (l, p))),
        )?;
        match adapters.and_then(|a| a.get(l, p)) {
            Some(ad) => {
                let d = lora_delta(tape, x, ad)?;
                tape.add(main, d)
            }
            None => Ok(main),
        }
    }

    /// Plain dense forward without a caller-managed tape.
    pub fn logits(&self, tokens: &TokenBatch) -> Result<Tensor<S>> {
        let mut tape = Tape::new();
        let vars = self.register(&mut tape, false);
        let out = self.forward(&mut tape, &vars, tokens, ForwardOptions::default(), None)?;
        Ok(tape.value(out.logits).clone())
    }

    /// Dense forward that also returns every layer's activation taps.
    pub fn capture(&self, tokens: &TokenBatch) -> Result<Vec<ActivationTap<S>>> {
        let mut tape = Tape::new();
        let vars = self.register(&mut tape, false);
        let opts = ForwardOptions {
            adapters: None,
            capture: true,
        };
        Ok(self.forward(&mut tape, &vars, tokens, opts, None)?.taps)
    }
}

fn out_slice(m: &Option<ChannelMask>) -> Slice<'_> {
    m.as_ref().map_or(Slice::Dense, Slice::Out)
}

/// Position of each flattened row, `r mod seq`.
pub fn row_positions(batch: usize, seq: usize) -> Vec<usize> {
    (0..batch * seq).map(|r| r % seq).collect()
}

/// `(cos, sin)` of `pos·theta^(−2i/d_head)` for each row and pair `i`.
pub fn rope_table<S: Scalar>(positions: &[usize], d_head: usize, theta: f64) -> Vec<(S, S)> {
    let pph = d_head / 2;
    let mut out = Vec::with_capacity(positions.len() * pph);
    for &p in positions {
        for i in 0..pph {
            let angle = p as f64 * theta.powf(-2.0 * i as f64 / d_head as f64);
            out.push((S::of(angle.cos()), S::of(angle.sin())));
        }
    }
    out
}

/// Rotate channel pairs `(2i, 2i+1)` of every head of `x` (`rows × heads·d_head`).
pub fn apply_rope<S: Scalar>(x: &Tensor<S>, positions: &[usize], d_head: usize, theta: f64) -> Result<Tensor<S>> {
    let mut tape = Tape::new();
    let xv = tape.constant(Arc::new(x.clone()));
    let y = tape.rope(xv, Arc::new(rope_table(positions, d_head, theta)), d_head)?;
    Ok(tape.value(y).clone())
}

/// Causal attention on plain tensors; returns the output and probabilities
/// `[batch, heads, seq, seq]`.
pub fn attention<S: Scalar>(
    q: &Tensor<S>,
    k: &Tensor<S>,
    v: &Tensor<S>,
    shape: AttnShape,
) -> Result<(Tensor<S>, Vec<S>)> {
    let mut tape = Tape::new();
    let (qv, kv, vv) = (
        tape.constant(Arc::new(q.clone())),
        tape.constant(Arc::new(k.clone())),
        tape.constant(Arc::new(v.clone())),
    );
    let a = tape.attention(qv, kv, vv, shape)?;
    let probs = tape.attention_probs(a).expect("attention node").to_vec();
    Ok((tape.value(a).clone(), probs))
}

/// Causal attention probabilities only, `[batch, heads, seq, seq]`, from
/// already-rotated `q`, `k`.
pub fn attention_probs<S: Scalar>(q: &Tensor<S>, k: &Tensor<S>, shape: AttnShape) -> Vec<S> {
    let AttnShape {
        batch,
        seq,
        heads,
        d_head,
    } = shape;
    let width = heads * d_head;
    let scale = 1.0 / (d_head as f64).sqrt();
    let mut probs = vec![S::zero(); batch * heads * seq * seq];
    for b in 0..batch {
        for h in 0..heads {
            for t in 0..seq {
                let base = ((b * heads + h) * seq + t) * seq;
                let qrow = &q.data()[(b * seq + t) * width + h * d_head..][..d_head];
                let row = &mut probs[base..base + t + 1];
                for (j, p) in row.iter_mut().enumerate() {
                    let krow = &k.data()[(b * seq + j) * width + h * d_head..][..d_head];
                    let s: f64 = qrow.iter().zip(krow).map(|(a, b)| a.f64() * b.f64()).sum();
                    *p = S::of(s * scale);
                }
                softmax_in_place(row);
            }
        }
    }
    probs
}

/// Dense feed-forward on plain tensors: `W_down(SiLU(x·W_gate) ⊙ (x·W_up))`.
pub fn ffn_forward<S: Scalar>(x: &Tensor<S>, lw: &LayerWeights<S>) -> Result<Tensor<S>> {
    ffn_intermediate(x, lw)?.matmul(&lw.w_down)
}

/// `SiLU(x·W_gate) ⊙ (x·W_up)`.
pub fn ffn_intermediate<S: Scalar>(x: &Tensor<S>, lw: &LayerWeights<S>) -> Result<Tensor<S>> {
    let g = x.matmul(&lw.w_gate)?;
    let u = x.matmul(&lw.w_up)?;
    let data = g
        .data()
        .iter()
        .zip(u.data())
        .map(|(&g, &u)| g / (S::one() + (-g).exp()) * u)
        .collect();
    Tensor::new(g.shape().to_vec(), data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_validation_lists_violations() {
        let cfg = ModelConfig {
            d_model: 65,
            n_heads: 4,
            ..ModelConfig::tiny()
        };
        let err = cfg.validate().unwrap_err().to_string();
        assert!(err.contains("not divisible"), "{err}");
        let cfg = ModelConfig {
            vocab_size: 0,
            n_layers: 0,
            ..ModelConfig::tiny()
        };
        let err = cfg.validate().unwrap_err().to_string();
        assert!(err.contains("vocab_size") && err.contains("n_layers"), "{err}");
    }

    #[test]
    fn seeded_build_is_deterministic() {
        let cfg = ModelConfig {
            d_model: 64,
            n_heads: 4,
            ..ModelConfig::tiny()
        };
        let a = build_model::<f32>(&cfg, 3).unwrap();
        let b = build_model::<f32>(&cfg, 3).unwrap();
        assert_eq!(a, b);
        assert_eq!(cfg.d_head(), 16);
        assert_eq!(a.layers[0].wq.shape(), &[64, 64]);
        assert_ne!(a, build_model::<f32>(&cfg, 4).unwrap());
    }

    #[test]
    fn out_of_range_token_reports_position() {
        let m = build_model::<f32>(&ModelConfig::tiny(), 0).unwrap();
        let toks = TokenBatch::new(1, 3, vec![1, 2, 999]).unwrap();
        let err = m.logits(&toks).unwrap_err().to_string();
        assert!(err.contains("position 2"), "{err}");
    }

    #[test]
    fn single_token_logits_shape() {
        let m = build_model::<f32>(&ModelConfig::tiny(), 0).unwrap();
        let out = m.logits(&TokenBatch::new(1, 1, vec![5]).unwrap()).unwrap();
        assert_eq!(out.shape(), &[1, crate::data::VOCAB]);
    }

    #[test]
    fn rope_quarter_turn() {
        // d_head 2, theta irrelevant for pair 0: angle = pos.
        let x = Tensor::<f64>::from_rows(&[&[1.0, 0.0]]);
        let pos = [0usize];
        assert_eq!(apply_rope(&x, &pos, 2, 10000.0).unwrap(), x);
        let t = rope_table::<f64>(&[1], 2, 10000.0);
        assert!((t[0].0 - 1f64.cos()).abs() < 1e-15);
    }
}
