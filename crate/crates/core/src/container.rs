//! `SLRA` container files for checkpoints, adapters and estimator factors.
//!
//! Layout: magic `SLRA`, `u32` version, `u64` manifest length, the JSON
//! manifest, then packed little-endian `f32` payloads. Manifest offsets are
//! relative to the start of the payload section.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::SvdFactors;
use crate::lora::{AdapterBank, LoraAdapter, Proj};
use crate::model::{Model, ModelConfig};
use crate::sparsity::{EstimatorBank, ESTIMATED};
use crate::tensor::{Scalar, Tensor};

pub const MAGIC: &[u8; 4] = b"SLRA";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
struct Entry {
    name: String,
    dtype: String,
    shape: Vec<usize>,
    offset: u64,
    length: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
struct Manifest {
    kind: String,
    meta: BTreeMap<String, String>,
    tensors: Vec<Entry>,
}

/// Named `f32` tensors plus string metadata, in insertion order.
#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub kind: String,
    pub meta: BTreeMap<String, String>,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

impl Container {
    pub fn new(kind: &str) -> Self {
        Container {
            kind: kind.to_string(),
            meta: BTreeMap::new(),
            tensors: Vec::new(),
        }
    }

    pub fn push<S: Scalar>(&mut self, name: impl Into<String>, t: &Tensor<S>) {
        self.tensors.push((name.into(), t.cast()));
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<f32>> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Container(format!("missing tensor '{name}'")))
    }

    pub fn meta(&self, key: &str) -> Result<&str> {
        self.meta
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::Container(format!("missing metadata '{key}'")))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut entries = Vec::with_capacity(self.tensors.len());
        let mut offset = 0u64;
        for (name, t) in &self.tensors {
            if entries.iter().any(|e: &Entry| &e.name == name) {
                return Err(Error::Container(format!("duplicate tensor '{name}'")));
            }
            let length = 4 * t.len() as u64;
            entries.push(Entry {
                name: name.clone(),
                dtype: "f32".into(),
                shape: t.shape().to_vec(),
                offset,
                length,
            });
            offset += length;
        }
        let manifest = Manifest {
            kind: self.kind.clone(),
            meta: self.meta.clone(),
            tensors: entries,
        };
        let text = serde_json::to_string(&manifest).map_err(|e| Error::Container(e.to_string()))?;
        let mut out = Vec::with_capacity(16 + text.len() + offset as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(text.len() as u64).to_le_bytes());
        out.extend_from_slice(text.as_bytes());
        for (_, t) in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: String| Error::Container(m);
        if bytes.len() < 16 || &bytes[..4] != MAGIC {
            return Err(bad("not an SLRA container (bad magic)".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let mlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = bytes
            .get(16..16usize.saturating_add(mlen))
            .ok_or_else(|| bad(format!("manifest length {mlen} exceeds file")))?;
        let text = std::str::from_utf8(body).map_err(|e| bad(format!("manifest not UTF-8: {e}")))?;
        let manifest: Manifest = serde_json::from_str(text).map_err(|e| bad(format!("manifest: {e}")))?;
        let payload = &bytes[16 + mlen..];

        let mut spans: Vec<(u64, u64, &str)> = Vec::new();
        let mut tensors = Vec::with_capacity(manifest.tensors.len());
        for e in &manifest.tensors {
            if e.dtype != "f32" {
                return Err(bad(format!("tensor '{}': unsupported dtype {}", e.name, e.dtype)));
            }
            let n: usize = e.shape.iter().product();
            if e.length != 4 * n as u64 {
                return Err(bad(format!(
                    "tensor '{}': length {} does not match shape {:?}",
                    e.name, e.length, e.shape
                )));
            }
            let end = e.offset.checked_add(e.length).filter(|&end| end <= payload.len() as u64);
            let Some(end) = end else {
                return Err(bad(format!(
                    "tensor '{}': span {}+{} outside payload of {} bytes",
                    e.name,
                    e.offset,
                    e.length,
                    payload.len()
                )));
            };
            if let Some(other) = spans.iter().find(|(s, t, _)| e.offset < *t && *s < end) {
                return Err(bad(format!("tensor '{}' overlaps '{}'", e.name, other.2)));
            }
            spans.push((e.offset, end, &e.name));
            let raw = &payload[e.offset as usize..end as usize];
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            tensors.push((e.name.clone(), Tensor::new(e.shape.clone(), data)?));
        }
        Ok(Container {
            kind: manifest.kind,
            meta: manifest.meta,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Container(format!(
                "expected a {kind} container, found {}",
                self.kind
            )));
        }
        Ok(())
    }
}

fn json<T: Serialize>(v: &T) -> String {
    serde_json::to_string(v).expect("serializable")
}

fn parse_json<T: for<'de> Deserialize<'de>>(s: &str, what: &str) -> Result<T> {
    serde_json::from_str(s).map_err(|e| Error::Container(format!("{what}: {e}")))
}

pub fn model_to_container<S: Scalar>(m: &Model<S>) -> Container {
    let mut c = Container::new("checkpoint");
    c.meta.insert("config".into(), json(&m.cfg));
    c.push("embed", &m.embed);
    for (l, lw) in m.layers.iter().enumerate() {
        for p in Proj::ALL {
            c.push(format!("L{l}.{p}"), lw.weight(p));
        }
        c.push(format!("L{l}.attn_norm"), &lw.attn_norm);
        c.push(format!("L{l}.ffn_norm"), &lw.ffn_norm);
    }
    c.push("final_norm", &m.final_norm);
    c.push("lm_head", &m.lm_head);
    c
}

pub fn model_from_container<S: Scalar>(c: &Container) -> Result<Model<S>> {
    c.expect_kind("checkpoint")?;
    let cfg: ModelConfig = parse_json(c.meta("config")?, "config")?;
    let base = crate::model::build_model::<S>(&cfg, 0)?;
    let mut ws = vec![c.get("embed")?.cast()];
    for l in 0..cfg.n_layers {
        for p in Proj::ALL {
            ws.push(c.get(&format!("L{l}.{p}"))?.cast());
        }
        ws.push(c.get(&format!("L{l}.attn_norm"))?.cast());
        ws.push(c.get(&format!("L{l}.ffn_norm"))?.cast());
    }
    ws.push(c.get("final_norm")?.cast());
    ws.push(c.get("lm_head")?.cast());
    base.with_weights(ws)
}

pub fn adapters_to_container<S: Scalar>(bank: &AdapterBank<S>) -> Container {
    let mut c = Container::new("adapters");
    for ((l, p), ad) in &bank.adapters {
        c.meta.insert(format!("L{l}.{p}.alpha"), json(&ad.alpha));
        c.push(format!("L{l}.{p}.a"), &ad.a);
        c.push(format!("L{l}.{p}.b"), &ad.b);
    }
    c
}

pub fn adapters_from_container<S: Scalar>(c: &Container) -> Result<AdapterBank<S>> {
    c.expect_kind("adapters")?;
    let mut bank = AdapterBank::default();
    for (name, t) in &c.tensors {
        let Some(stem) = name.strip_suffix(".a") else {
            continue;
        };
        let (l, p) = parse_target(stem)?;
        let b = c.get(&format!("{stem}.b"))?;
        let alpha: f64 = parse_json(c.meta(&format!("{stem}.alpha"))?, "alpha")?;
        bank.adapters.insert(
            (l, p),
            LoraAdapter {
                a: t.cast(),
                b: b.cast(),
                rank: t.cols(),
                alpha,
                layer: l,
                proj: p,
            },
        );
    }
    Ok(bank)
}

fn parse_target(stem: &str) -> Result<(usize, Proj)> {
    let bad = || Error::Container(format!("bad tensor name '{stem}'"));
    let (l, p) = stem.split_once('.').ok_or_else(bad)?;
    let l: usize = l.strip_prefix('L').and_then(|s| s.parse().ok()).ok_or_else(bad)?;
    Ok((l, p.parse()?))
}

pub fn estimator_to_container<S: Scalar>(bank: &EstimatorBank<S>) -> Container {
    let mut c = Container::new("estimator");
    c.meta.insert("rank".into(), bank.rank.to_string());
    for ((l, p), f) in &bank.factors {
        c.push(format!("L{l}.{p}.w_a"), &f.w_a);
        c.push(format!("L{l}.{p}.w_b"), &f.w_b);
    }
    c
}

pub fn estimator_from_container<S: Scalar>(c: &Container) -> Result<EstimatorBank<S>> {
    c.expect_kind("estimator")?;
    let rank: usize = c
        .meta("rank")?
        .parse()
        .map_err(|e| Error::Container(format!("rank: {e}")))?;
    let mut factors = BTreeMap::new();
    for (name, t) in &c.tensors {
        let Some(stem) = name.strip_suffix(".w_a") else {
            continue;
        };
        let (l, p) = parse_target(stem)?;
        if !ESTIMATED.contains(&p) {
            return Err(Error::Container(format!("unexpected estimator target '{stem}'")));
        }
        let w_b = c.get(&format!("{stem}.w_b"))?;
        if t.cols() != rank || w_b.rows() != rank {
            return Err(Error::Container(format!("'{stem}' factors are not rank {rank}")));
        }
        factors.insert(
            (l, p),
            SvdFactors {
                w_a: t.cast(),
                w_b: w_b.cast(),
                rank,
                source: stem.to_string(),
            },
        );
    }
    Ok(EstimatorBank { rank, factors })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Container {
        let mut c = Container::new("test");
        c.meta.insert("k".into(), "v".into());
        c.push("a", &Tensor::<f32>::from_rows(&[&[1.0, -2.5], &[3.0, 0.125]]));
        c.push("b", &Tensor::<f32>::from_rows(&[&[7.0]]));
        c
    }

    #[test]
    fn bytes_roundtrip_bitwise() {
        let c = sample();
        let bytes = c.to_bytes().unwrap();
        let back = Container::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes().unwrap(), bytes);
        assert_eq!(&bytes[..4], b"SLRA");
    }

    fn patch(bytes: &[u8], from: &str, to: &str) -> Vec<u8> {
        assert_eq!(from.len(), to.len());
        let at = bytes
            .windows(from.len())
            .position(|w| w == from.as_bytes())
            .expect("pattern present");
        let mut out = bytes.to_vec();
        out[at..at + to.len()].copy_from_slice(to.as_bytes());
        out
    }

    #[test]
    fn corrupt_offset_names_tensor() {
        let bytes = sample().to_bytes().unwrap();
        let bad = patch(&bytes, "\"offset\":16", "\"offset\":99");
        let err = Container::from_bytes(&bad).unwrap_err().to_string();
        assert!(err.contains("'b'"), "{err}");
    }

    #[test]
    fn overlapping_spans_rejected() {
        let bytes = sample().to_bytes().unwrap();
        let bad = patch(&bytes, "\"offset\":16", "\"offset\":12");
        let err = Container::from_bytes(&bad).unwrap_err().to_string();
        assert!(err.contains("overlaps"), "{err}");
    }

    #[test]
    fn bad_magic() {
        assert!(Container::from_bytes(b"NOPE0000000000000000").is_err());
    }
}
