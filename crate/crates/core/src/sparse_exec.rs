//! Sliced execution of the frozen main branch.
//!
//! Kept weight channels are gathered into contiguous buffers on the fly and
//! multiplied directly, so the matmul cost scales with the kept width. When a
//! [`TokenPartition`] is supplied, context rows take the sliced path and
//! output rows the dense one; results are scattered back in row order.

use std::collections::HashMap;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::lora::Proj;
use crate::model::LayerWeights;
use crate::sparsity::ChannelMask;
use crate::tape::{Tape, Var};
use crate::tensor::{Scalar, Tensor};

/// Context/output split of every sequence in a batch.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenPartition {
    pub seq_len: usize,
    /// Per sequence, ascending positions taking the sparse path.
    pub context_positions: Vec<Vec<usize>>,
    /// Per sequence, ascending positions taking the dense path.
    pub output_positions: Vec<Vec<usize>>,
    ctx_rows: Vec<usize>,
    out_rows: Vec<usize>,
}

impl TokenPartition {
    pub fn new(
        seq_len: usize,
        context_positions: Vec<Vec<usize>>,
        output_positions: Vec<Vec<usize>>,
    ) -> Result<Self> {
        if context_positions.len() != output_positions.len() {
            return Err(Error::Input("partition: sequence count mismatch".into()));
        }
        let mut ctx_rows = Vec::new();
        let mut out_rows = Vec::new();
        for (b, (c, o)) in context_positions.iter().zip(&output_positions).enumerate() {
            let mut seen = vec![0u8; seq_len];
            for (list, tag) in [(c, 1u8), (o, 2u8)] {
                if list.windows(2).any(|w| w[0] >= w[1]) {
                    return Err(Error::Input(format!("partition: sequence {b} positions not ascending")));
                }
                for &p in list {
                    if p >= seq_len {
                        return Err(Error::Input(format!("partition: position {p} ≥ seq len {seq_len}")));
                    }
                    if seen[p] != 0 {
                        return Err(Error::Input(format!(
                            "partition: position {p} of sequence {b} is in both sets"
                        )));
                    }
                    seen[p] = tag;
                }
            }
            if let Some(p) = seen.iter().position(|&s| s == 0) {
                return Err(Error::Input(format!(
                    "partition: position {p} of sequence {b} is in neither set"
                )));
            }
            ctx_rows.extend(c.iter().map(|&p| b * seq_len + p));
            out_rows.extend(o.iter().map(|&p| b * seq_len + p));
        }
        ctx_rows.sort_unstable();
        out_rows.sort_unstable();
        Ok(TokenPartition {
            seq_len,
            context_positions,
            output_positions,
            ctx_rows,
            out_rows,
        })
    }

    /// Output positions are exactly where `loss_mask` (flattened `batch × seq_len`) is true.
    pub fn from_loss_mask(loss_mask: &[bool], seq_len: usize) -> Result<Self> {
        if seq_len == 0 || !loss_mask.len().is_multiple_of(seq_len) {
            return Err(Error::dim("partition", &[loss_mask.len()], &[seq_len]));
        }
        let mut ctx = Vec::new();
        let mut out = Vec::new();
        for seq in loss_mask.chunks(seq_len) {
            ctx.push((0..seq_len).filter(|&p| !seq[p]).collect());
            out.push((0..seq_len).filter(|&p| seq[p]).collect());
        }
        Self::new(seq_len, ctx, out)
    }

    pub fn rows(&self) -> usize {
        self.context_positions.len() * self.seq_len
    }

    pub fn context_rows(&self) -> &[usize] {
        &self.ctx_rows
    }

    pub fn output_rows(&self) -> &[usize] {
        &self.out_rows
    }

    /// Row-level dense flags, for checking against the loss mask.
    pub fn dense_flags(&self) -> Vec<bool> {
        let mut f = vec![false; self.rows()];
        for &r in &self.out_rows {
            f[r] = true;
        }
        f
    }
}

/// Submatrix of kept rows (`in_mask`) and columns (`out_mask`) in ascending order.
pub fn slice_gather<S: Scalar>(
    w: &Tensor<S>,
    in_mask: Option<&[usize]>,
    out_mask: Option<&[usize]>,
) -> Result<Tensor<S>> {
    let mut out = Tensor::zeros(&[0, 0]);
    slice_gather_into(w, in_mask, out_mask, &mut out)?;
    Ok(out)
}

fn slice_gather_into<S: Scalar>(
    w: &Tensor<S>,
    in_mask: Option<&[usize]>,
    out_mask: Option<&[usize]>,
    dst: &mut Tensor<S>,
) -> Result<()> {
    let (r, c) = (w.rows(), w.cols());
    for (mask, lim, side) in [(in_mask, r, "row"), (out_mask, c, "column")] {
        if let Some(&bad) = mask.and_then(|m| m.iter().find(|&&i| i >= lim)) {
            return Err(Error::Input(format!("slice {side} index {bad} out of range ({lim})")));
        }
    }
    let nr = in_mask.map_or(r, <[usize]>::len);
    let nc = out_mask.map_or(c, <[usize]>::len);
    let mut data = std::mem::take(dst).into_data();
    data.clear();
    data.reserve(nr * nc);
    let mut push_row = |row: &[S]| match out_mask {
        Some(cols) => data.extend(cols.iter().map(|&j| row[j])),
        None => data.extend_from_slice(row),
    };
    match in_mask {
        Some(rows) => rows.iter().for_each(|&i| push_row(w.row(i))),
        None => (0..r).for_each(|i| push_row(w.row(i))),
    }
    *dst = Tensor::new(vec![nr, nc], data)?;
    Ok(())
}

/// Reusable slice buffers keyed by `(layer, projection)`. A buffer is
/// refilled in place once the previous step's tape has released it.
#[derive(Default)]
pub struct SliceCache<S> {
    buffers: HashMap<(usize, Proj), Arc<Tensor<S>>>,
}

impl<S: Scalar> SliceCache<S> {
    pub fn new() -> Self {
        SliceCache {
            buffers: HashMap::new(),
        }
    }

    pub fn get(
        &mut self,
        key: (usize, Proj),
        w: &Tensor<S>,
        in_mask: Option<&[usize]>,
        out_mask: Option<&[usize]>,
    ) -> Result<Arc<Tensor<S>>> {
        let slot = self
            .buffers
            .entry(key)
            .or_insert_with(|| Arc::new(Tensor::zeros(&[0, 0])));
        match Arc::get_mut(slot) {
            Some(buf) => slice_gather_into(w, in_mask, out_mask, buf)?,
            None => *slot = Arc::new(slice_gather(w, in_mask, out_mask)?),
        }
        Ok(Arc::clone(slot))
    }
}

/// How the main branch of one projection is narrowed.
#[derive(Clone, Copy, Debug)]
pub enum Slice<'m> {
    Dense,
    /// Compute only kept output columns, zero-fill the rest.
    Out(&'m ChannelMask),
    /// Consume only kept input rows.
    In(&'m ChannelMask),
}

/// Route context rows through `sparse_fn` and output rows through `dense_fn`,
/// then scatter the results back in original row order.
pub fn split_tokens_compute<S, FS, FD>(
    tape: &mut Tape<S>,
    x: Var,
    partition: &TokenPartition,
    sparse_fn: FS,
    dense_fn: FD,
) -> Result<Var>
where
    S: Scalar,
    FS: FnOnce(&mut Tape<S>, Var) -> Result<Var>,
    FD: FnOnce(&mut Tape<S>, Var) -> Result<Var>,
{
    let rows = tape.value(x).rows();
    if partition.rows() != rows {
        return Err(Error::dim("split_tokens_compute", &[rows], &[partition.rows()]));
    }
    let (ctx, out) = (partition.context_rows(), partition.output_rows());
    if out.is_empty() {
        return sparse_fn(tape, x);
    }
    if ctx.is_empty() {
        return dense_fn(tape, x);
    }
    let xc = tape.gather_rows(x, ctx)?;
    let yc = sparse_fn(tape, xc)?;
    let xo = tape.gather_rows(x, out)?;
    let yo = dense_fn(tape, xo)?;
    tape.scatter_rows(&[(yc, ctx.to_vec()), (yo, out.to_vec())], rows)
}

fn sliced<S: Scalar>(
    w: &Arc<Tensor<S>>,
    in_mask: Option<&[usize]>,
    out_mask: Option<&[usize]>,
    cache: Option<(&mut SliceCache<S>, (usize, Proj))>,
) -> Result<Arc<Tensor<S>>> {
    match cache {
        Some((c, key)) => c.get(key, w, in_mask, out_mask),
        None => Ok(Arc::new(slice_gather(w, in_mask, out_mask)?)),
    }
}

/// Main-branch `x · W` under `slice`, optionally split by token partition.
/// `w_var` is the tape handle of the full weight, used for dense rows.
pub fn main_linear<S: Scalar>(
    tape: &mut Tape<S>,
    x: Var,
    w: &Arc<Tensor<S>>,
    slice: Slice<'_>,
    w_var: Option<Var>,
    partition: Option<&TokenPartition>,
) -> Result<Var> {
    main_linear_cached(tape, x, w, slice, w_var, partition, None)
}

pub fn main_linear_cached<S: Scalar>(
    tape: &mut Tape<S>,
    x: Var,
    w: &Arc<Tensor<S>>,
    slice: Slice<'_>,
    w_var: Option<Var>,
    partition: Option<&TokenPartition>,
    cache: Option<(&mut SliceCache<S>, (usize, Proj))>,
) -> Result<Var> {
    let dense_var = match w_var {
        Some(v) => v,
        None => tape.constant(Arc::clone(w)),
    };
    let d_out = w.cols();
    let sparse_w = match slice {
        Slice::Dense => return tape.matmul(x, dense_var),
        Slice::Out(m) => {
            if m.total != d_out {
                return Err(Error::dim("out mask", w.shape(), &[m.total]));
            }
            sliced(w, None, Some(&m.kept), cache)?
        }
        Slice::In(m) => {
            if m.total != w.rows() {
                return Err(Error::dim("in mask", w.shape(), &[m.total]));
            }
            sliced(w, Some(&m.kept), None, cache)?
        }
    };
    let sw = tape.constant(sparse_w);
    let sparse_fn = |t: &mut Tape<S>, rows: Var| -> Result<Var> {
        match slice {
            Slice::Out(m) => {
                let y = t.matmul(rows, sw)?;
                t.scatter_cols(y, &m.kept, d_out)
            }
            Slice::In(m) => {
                let xs = t.gather_cols(rows, &m.kept)?;
                t.matmul(xs, sw)
            }
            Slice::Dense => unreachable!(),
        }
    };
    match partition {
        Some(p) => split_tokens_compute(tape, x, p, sparse_fn, |t, rows| t.matmul(rows, dense_var)),
        None => sparse_fn(tape, x),
    }
}

/// Dense SwiGLU block `W_down(SiLU(x·W_gate) ⊙ (x·W_up))`. Returns the output
/// and the intermediate activation.
pub fn dense_ffn<S: Scalar>(
    tape: &mut Tape<S>,
    x: Var,
    gate: Var,
    up: Var,
    down: Var,
) -> Result<(Var, Var)> {
    let g = tape.matmul(x, gate)?;
    let u = tape.matmul(x, up)?;
    let sg = tape.silu(g);
    let inter = tape.mul(sg, u)?;
    Ok((tape.matmul(inter, down)?, inter))
}

/// SwiGLU block over kept intermediate channels only: gate/up keep mask
/// columns, down keeps mask rows, so the output is already full width.
pub fn sparse_ffn<S: Scalar>(
    tape: &mut Tape<S>,
    x: Var,
    layer: &LayerWeights<S>,
    mask: &ChannelMask,
    cache: Option<&mut SliceCache<S>>,
    layer_idx: usize,
) -> Result<Var> {
    if mask.kept.is_empty() {
        return Err(Error::Input(format!(
            "FFN mask at layer {layer_idx} keeps no channels"
        )));
    }
    let d_ffn = layer.w_gate.cols();
    if mask.total != d_ffn {
        return Err(Error::dim("ffn mask", layer.w_gate.shape(), &[mask.total]));
    }
    let (g, u, d) = match cache {
        Some(c) => (
            c.get((layer_idx, Proj::Gate), &layer.w_gate, None, Some(&mask.kept))?,
            c.get((layer_idx, Proj::Up), &layer.w_up, None, Some(&mask.kept))?,
            c.get((layer_idx, Proj::Down), &layer.w_down, Some(&mask.kept), None)?,
        ),
        None => (
            Arc::new(slice_gather(&layer.w_gate, None, Some(&mask.kept))?),
            Arc::new(slice_gather(&layer.w_up, None, Some(&mask.kept))?),
            Arc::new(slice_gather(&layer.w_down, Some(&mask.kept), None)?),
        ),
    };
    let (g, u, d) = (tape.constant(g), tape.constant(u), tape.constant(d));
    Ok(dense_ffn(tape, x, g, u, d)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::ScoreGranularity;
    use crate::sparsity::Group;

    fn mask(kept: Vec<usize>, total: usize) -> ChannelMask {
        ChannelMask {
            kept,
            total,
            granularity: ScoreGranularity::Channel,
            group: Group::FfnIntermediate,
        }
    }

    #[test]
    fn gather_hand_case() {
        let w = Tensor::<f64>::from_rows(&[&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0], &[7.0, 8.0, 9.0]]);
        let s = slice_gather(&w, None, Some(&[0, 2])).unwrap();
        assert_eq!(s, Tensor::from_rows(&[&[1.0, 3.0], &[4.0, 6.0], &[7.0, 9.0]]));
        assert_eq!(slice_gather(&w, None, None).unwrap(), w);
        assert!(slice_gather(&w, Some(&[3]), None).is_err());
    }

    #[test]
    fn cache_reuses_buffer_once_released() {
        let w = Tensor::<f64>::eye(4);
        let mut c = SliceCache::new();
        let a = c.get((0, Proj::Q), &w, None, Some(&[0, 1])).unwrap();
        let ptr = a.data().as_ptr();
        drop(a);
        let b = c.get((0, Proj::Q), &w, None, Some(&[2, 3])).unwrap();
        assert_eq!(b.data().as_ptr(), ptr);
        assert_eq!(b.at(2, 0), 1.0);
        // Still held: a fresh buffer is allocated instead of mutating.
        let held = b;
        let d = c.get((0, Proj::Q), &w, None, Some(&[0])).unwrap();
        assert_eq!(held.cols(), 2);
        assert_eq!(d.cols(), 1);
    }

    #[test]
    fn partition_validation() {
        assert!(TokenPartition::new(3, vec![vec![0, 1]], vec![vec![1, 2]]).is_err());
        assert!(TokenPartition::new(3, vec![vec![0]], vec![vec![2]]).is_err());
        let p = TokenPartition::from_loss_mask(&[false, true, false, false], 2).unwrap();
        assert_eq!(p.context_rows(), &[0, 2, 3]);
        assert_eq!(p.output_rows(), &[1]);
    }

    #[test]
    fn empty_ffn_mask_rejected() {
        let lw = LayerWeights::<f64>::zeros(4, 8);
        let mut tape = Tape::new();
        let x = tape.constant(Arc::new(Tensor::zeros(&[2, 4])));
        assert!(sparse_ffn(&mut tape, x, &lw, &mask(vec![], 8), None, 0).is_err());
    }
}
