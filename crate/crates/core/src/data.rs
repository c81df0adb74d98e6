//! Byte-level tokenization, context/output records, and seeded batching.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::TokenBatch;

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
const BYTE_OFFSET: usize = 3;
/// Ids used by the tokenizer: three specials plus every byte value.
pub const VOCAB: usize = BYTE_OFFSET + 256;

pub fn encode(text: &str) -> Vec<usize> {
    text.bytes().map(|b| b as usize + BYTE_OFFSET).collect()
}

/// Inverse of [`encode`]; specials are dropped.
pub fn decode(ids: &[usize]) -> String {
    let bytes: Vec<u8> = ids
        .iter()
        .filter(|&&i| (BYTE_OFFSET..VOCAB).contains(&i))
        .map(|&i| (i - BYTE_OFFSET) as u8)
        .collect();
    String::from_utf8_lossy(&bytes).into_owned()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub context: String,
    pub output: String,
}

/// A record laid out for next-token training: `inputs` is the token stream
/// shifted right behind `BOS`, `targets` the stream itself, and the loss
/// mask is true exactly where the target is an output token.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Encoded {
    pub inputs: Vec<usize>,
    pub targets: Vec<usize>,
    pub loss_mask: Vec<bool>,
}

impl Encoded {
    pub fn output_tokens(&self) -> usize {
        self.loss_mask.iter().filter(|&&m| m).count()
    }
}

/// Encode one record into at most `seq_len` positions. Oldest context bytes
/// are dropped first; output bytes are never truncated.
pub fn encode_record(r: &DatasetRecord, seq_len: usize) -> Result<Encoded> {
    let out = encode(&r.output);
    if out.is_empty() {
        return Err(Error::Input("empty output field".into()));
    }
    if out.len() > seq_len {
        return Err(Error::Input(format!(
            "output of {} tokens exceeds sequence length {seq_len}",
            out.len()
        )));
    }
    let mut ctx = encode(&r.context);
    let room = seq_len - out.len();
    if ctx.len() > room {
        ctx.drain(..ctx.len() - room);
    }
    let n = ctx.len() + out.len();
    let mut stream = ctx;
    stream.extend_from_slice(&out);
    let mut inputs = Vec::with_capacity(n);
    inputs.push(BOS);
    inputs.extend_from_slice(&stream[..n - 1]);
    let loss_mask = (0..n).map(|i| i >= n - out.len()).collect();
    Ok(Encoded {
        inputs,
        targets: stream,
        loss_mask,
    })
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub records: Vec<DatasetRecord>,
}

/// Read line-delimited JSON records with `context` and `output` fields.
/// Blank lines are skipped.
pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let text = fs::read_to_string(path)?;
    parse_dataset(&text, path)
}

pub fn parse_dataset(text: &str, path: &Path) -> Result<Dataset> {
    let err = |line: usize, msg: String| Error::Dataset {
        path: PathBuf::from(path),
        line,
        msg,
    };
    let mut records = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let r: DatasetRecord = serde_json::from_str(line).map_err(|e| err(i + 1, e.to_string()))?;
        if r.output.is_empty() {
            return Err(err(i + 1, "empty output field".into()));
        }
        records.push(r);
    }
    Ok(Dataset { records })
}

pub fn write_dataset(path: &Path, ds: &Dataset) -> Result<()> {
    let mut s = String::new();
    for r in &ds.records {
        s.push_str(&serde_json::to_string(r).map_err(|e| Error::Input(e.to_string()))?);
        s.push('\n');
    }
    fs::write(path, s)?;
    Ok(())
}

/// One right-padded training batch.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub tokens: TokenBatch,
    pub targets: Vec<usize>,
    pub loss_mask: Vec<bool>,
}

impl Batch {
    pub fn output_tokens(&self) -> usize {
        self.loss_mask.iter().filter(|&&m| m).count()
    }
}

fn collate(items: &[&Encoded], seq_len: usize) -> Result<Batch> {
    let b = items.len();
    let mut ids = vec![PAD; b * seq_len];
    let mut targets = vec![PAD; b * seq_len];
    let mut mask = vec![false; b * seq_len];
    for (i, e) in items.iter().enumerate() {
        let base = i * seq_len;
        ids[base..base + e.inputs.len()].copy_from_slice(&e.inputs);
        targets[base..base + e.targets.len()].copy_from_slice(&e.targets);
        mask[base..base + e.loss_mask.len()].copy_from_slice(&e.loss_mask);
    }
    Ok(Batch {
        tokens: TokenBatch::new(b, seq_len, ids)?,
        targets,
        loss_mask: mask,
    })
}

/// Fixed-length batches over an encoded dataset.
#[derive(Clone, Debug)]
pub struct Batcher {
    encoded: Vec<Encoded>,
    seq_len: usize,
    batch_size: usize,
}

impl Batcher {
    pub fn new(ds: &Dataset, seq_len: usize, batch_size: usize) -> Result<Self> {
        if batch_size == 0 || seq_len == 0 {
            return Err(Error::Config("batch size and sequence length must be positive".into()));
        }
        if ds.records.is_empty() {
            return Err(Error::Input("dataset is empty".into()));
        }
        let encoded = ds
            .records
            .iter()
            .enumerate()
            .map(|(i, r)| {
                encode_record(r, seq_len).map_err(|e| Error::Input(format!("record {}: {e}", i + 1)))
            })
            .collect::<Result<_>>()?;
        Ok(Batcher {
            encoded,
            seq_len,
            batch_size,
        })
    }

    pub fn len(&self) -> usize {
        self.encoded.len()
    }

    pub fn is_empty(&self) -> bool {
        self.encoded.is_empty()
    }

    /// Full batches per epoch; a trailing partial batch is dropped.
    pub fn batches_per_epoch(&self) -> usize {
        (self.encoded.len() / self.batch_size).max(1)
    }

    /// Batch `index` of `epoch`, with record order shuffled by `seed` and epoch.
    pub fn epoch(&self, seed: u64, epoch: usize) -> Result<Vec<Batch>> {
        let mut order: Vec<usize> = (0..self.encoded.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        order.shuffle(&mut rng);
        let bs = self.batch_size.min(order.len());
        order
            .chunks(bs)
            .filter(|c| c.len() == bs)
            .map(|c| {
                let items: Vec<&Encoded> = c.iter().map(|&i| &self.encoded[i]).collect();
                collate(&items, self.seq_len)
            })
            .collect()
    }

    /// Batches in file order, including a trailing partial one, for evaluation.
    pub fn sequential(&self) -> Result<Vec<Batch>> {
        self.encoded
            .chunks(self.batch_size)
            .map(|c| collate(&c.iter().collect::<Vec<_>>(), self.seq_len))
            .collect()
    }
}

/// Synthetic key-value recall: the context lists `pairs` bindings of
/// single-letter keys to two-digit values and ends with a query key; the
/// output is the bound value.
pub fn kv_recall(n: usize, pairs: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let keys: Vec<char> = ('a'..='z').collect();
    let records = (0..n)
        .map(|_| {
            let ks: Vec<char> = keys.choose_multiple(&mut rng, pairs.min(26)).copied().collect();
            let mut context = String::new();
            let mut vals = Vec::new();
            for &k in &ks {
                let v: u32 = rng.gen_range(10..100);
                context.push_str(&format!("{k}={v} "));
                vals.push(v);
            }
            let q = rng.gen_range(0..ks.len());
            context.push_str(&format!("?{}:", ks[q]));
            DatasetRecord {
                context,
                output: format!("{};", vals[q]),
            }
        })
        .collect();
    Dataset { records }
}

fn random_letters<R: Rng>(rng: &mut R, n: usize) -> String {
    (0..n).map(|_| (b'a' + rng.gen_range(0..26u8)) as char).collect()
}

fn shift_letters(s: &str, k: u8) -> String {
    s.bytes().map(|b| (b'a' + (b - b'a' + k) % 26) as char).collect()
}

/// Desk-scale fine-tuning task: `context_len` random letters and `]`; the
/// output is the last three letters, each moved one step along the alphabet,
/// then `;`. The base model has learned to copy that tail, so fine-tuning only
/// has to change the mapping, not find the positions.
pub fn shift_tail(n: usize, context_len: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let context_len = context_len.max(3);
    let records = (0..n)
        .map(|_| {
            let s = random_letters(&mut rng, context_len);
            DatasetRecord {
                output: format!("{};", shift_letters(&s[context_len - 3..], 1)),
                context: format!("{s}]"),
            }
        })
        .collect();
    Dataset { records }
}

/// Pre-training corpus of copy problems: half copy a short word after `>`,
/// half copy the last three letters of a longer one after `]`. The prefix is
/// uniformly random, so only the part after the separator carries signal and
/// it is the only part scored.
pub fn pretrain_corpus(n: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let records = (0..n)
        .map(|_| {
            if rng.gen_bool(0.5) {
                let len = rng.gen_range(3..=7);
                let s = random_letters(&mut rng, len);
                DatasetRecord {
                    context: format!("{s}>"),
                    output: format!("{s};"),
                }
            } else {
                let len = rng.gen_range(4..=12);
                let s = random_letters(&mut rng, len);
                DatasetRecord {
                    output: format!("{};", &s[len - 3..]),
                    context: format!("{s}]"),
                }
            }
        })
        .collect();
    Dataset { records }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn record_layout_and_mask() {
        let r = DatasetRecord {
            context: "ab".into(),
            output: "cd".into(),
        };
        let e = encode_record(&r, 8).unwrap();
        assert_eq!(e.loss_mask, vec![false, false, true, true]);
        assert_eq!(e.targets, encode("abcd"));
        assert_eq!(e.inputs[0], BOS);
        assert_eq!(&e.inputs[1..], &encode("abc")[..]);
        let b = collate(&[&e], 6).unwrap();
        assert_eq!(b.loss_mask, vec![false, false, true, true, false, false]);
    }

    #[test]
    fn truncation_drops_oldest_context() {
        let r = DatasetRecord {
            context: "0123456".into(),
            output: "xy".into(),
        };
        let e = encode_record(&r, 5).unwrap();
        assert_eq!(decode(&e.targets), "456xy");
        assert_eq!(e.output_tokens(), 2);
        let long = DatasetRecord {
            context: String::new(),
            output: "toolong".into(),
        };
        assert!(encode_record(&long, 3).is_err());
    }

    #[test]
    fn malformed_lines_report_line_numbers() {
        let p = Path::new("mem.jsonl");
        let e = parse_dataset("{\"context\":\"a\",\"output\":\"b\"}\n{oops}\n", p).unwrap_err();
        assert!(matches!(e, Error::Dataset { line: 2, .. }), "{e}");
        let e = parse_dataset("\n{\"context\":\"a\",\"output\":\"\"}\n", p).unwrap_err();
        assert!(matches!(e, Error::Dataset { line: 2, .. }), "{e}");
    }

    #[test]
    fn shuffle_is_seeded() {
        let ds = kv_recall(40, 3, 1);
        let b = Batcher::new(&ds, 32, 4).unwrap();
        assert_eq!(b.epoch(7, 0).unwrap(), b.epoch(7, 0).unwrap());
        assert_ne!(b.epoch(7, 0).unwrap(), b.epoch(7, 1).unwrap());
        assert_eq!(b.epoch(7, 0).unwrap().len(), 10);
    }

    #[test]
    fn mask_sum_matches_output_counts() {
        let ds = kv_recall(12, 4, 2);
        let b = Batcher::new(&ds, 24, 4).unwrap();
        let total: usize = b.epoch(0, 0).unwrap().iter().map(Batch::output_tokens).sum();
        let expect: usize = ds.records.iter().map(|r| r.output.len()).sum();
        assert_eq!(total, expect);
    }

    #[test]
    fn roundtrip_text() {
        assert_eq!(decode(&encode("k=42;")), "k=42;");
        assert!(encode("é").iter().all(|&i| i < VOCAB));
    }
}
