//! Sparsity plans and the flat `key = value` configuration format.
//!
//! A plan file mirrors the columns of a per-model sparsity table:
//!
//! ```text
//! # LLaMA3-8B / Math10K style
//! ffn.layers     = L3-L30
//! ffn.sparsity   = 99
//! qkvo.layers    = L14-L19,L21-L23,L25-L29
//! qkvo.sparsity  = 75
//! step           = 5
//! rank           = 8
//! token_split    = on
//! criteria       = svd
//! ```
//!
//! Layer indices are zero-based. Several groups with different ratios are
//! separated by `/` in both the `layers` and `sparsity` keys
//! (`ffn.layers = L17-L30 / L31`, `ffn.sparsity = 95 / 50`). Percentages may be
//! integers or decimals. Layers not listed are dense.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct LayerSparsity {
    pub ffn: f64,
    pub qkvo: f64,
}

impl LayerSparsity {
    pub fn is_dense(&self) -> bool {
        self.ffn <= 0.0 && self.qkvo <= 0.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Criteria {
    /// Scores from the true dense activations of the frozen main branch.
    Oracle,
    /// Scores from rank-k SVD estimates of those activations.
    Svd,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    L2,
    QkNorm,
    Wanda,
    Random,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    Channel,
    RopePair,
    Head,
}

/// Which tokens take the dense path on sparse steps.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenSplit {
    /// Every token is sparse.
    Off,
    /// Loss-bearing output tokens are dense, context tokens sparse.
    On,
    /// A random subset of positions, matched in count to the output tokens, is dense.
    Random,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupMetrics {
    pub ffn: Metric,
    pub qk: Metric,
    pub vo: Metric,
}

impl Default for GroupMetrics {
    fn default() -> Self {
        GroupMetrics {
            ffn: Metric::L2,
            qk: Metric::QkNorm,
            vo: Metric::L2,
        }
    }
}

impl GroupMetrics {
    /// Apply a single `--metric` choice to every group where it is meaningful.
    pub fn apply_override(&mut self, m: Metric) {
        match m {
            Metric::QkNorm => self.qk = m,
            Metric::Wanda => self.ffn = m,
            Metric::L2 | Metric::Random => {
                self.ffn = m;
                self.qk = m;
                self.vo = m;
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SparsityPlan {
    /// Sparsified layers; absent layers are dense.
    pub layers: BTreeMap<usize, LayerSparsity>,
    pub estimator_rank: usize,
    pub token_split: TokenSplit,
    pub criteria: Criteria,
    pub metrics: GroupMetrics,
    /// `None` selects rotary pairs when the model uses rotary embeddings, channels otherwise.
    pub qk_granularity: Option<Granularity>,
    /// Fraction of the run kept dense at the start, at most 0.1.
    pub dense_warmup: f64,
    /// Include output tokens in score statistics when token splitting is on.
    pub estimator_all_tokens: bool,
}

impl Default for SparsityPlan {
    fn default() -> Self {
        SparsityPlan {
            layers: BTreeMap::new(),
            estimator_rank: 8,
            token_split: TokenSplit::On,
            criteria: Criteria::Svd,
            metrics: GroupMetrics::default(),
            qk_granularity: None,
            dense_warmup: 0.0,
            estimator_all_tokens: false,
        }
    }
}

pub const MAX_DENSE_WARMUP: f64 = 0.1;

impl SparsityPlan {
    pub fn dense() -> Self {
        SparsityPlan::default()
    }

    /// Same ratios on every layer in `0..n_layers`.
    pub fn uniform(n_layers: usize, ffn: f64, qkvo: f64) -> Self {
        let mut p = SparsityPlan::default();
        for l in 0..n_layers {
            p.layers.insert(l, LayerSparsity { ffn, qkvo });
        }
        p
    }

    pub fn layer(&self, l: usize) -> LayerSparsity {
        self.layers.get(&l).copied().unwrap_or_default()
    }

    pub fn set_layer(&mut self, l: usize, ls: LayerSparsity) {
        if ls.is_dense() {
            self.layers.remove(&l);
        } else {
            self.layers.insert(l, ls);
        }
    }

    pub fn is_all_dense(&self) -> bool {
        self.layers.values().all(LayerSparsity::is_dense)
    }

    pub fn qk_granularity(&self, rope: bool) -> Granularity {
        self.qk_granularity.unwrap_or(if rope {
            Granularity::RopePair
        } else {
            Granularity::Channel
        })
    }

    /// Groups `(ffn, qk, vo)` whose masks come from the SVD estimator.
    pub fn estimator_groups(&self) -> [bool; 3] {
        if self.criteria != Criteria::Svd {
            return [false; 3];
        }
        let m = self.metrics;
        [m.ffn, m.qk, m.vo].map(|x| x != Metric::Random)
    }

    pub fn validate(&self, n_layers: usize) -> Result<()> {
        let mut bad = Vec::new();
        for (&l, ls) in &self.layers {
            if l >= n_layers {
                bad.push(format!("layer L{l} outside model ({n_layers} layers)"));
            }
            for (name, v) in [("ffn", ls.ffn), ("qkvo", ls.qkvo)] {
                if !(0.0..=1.0).contains(&v) {
                    bad.push(format!("{name} sparsity {v} at L{l} not in [0, 1]"));
                }
            }
        }
        if !(0.0..=MAX_DENSE_WARMUP).contains(&self.dense_warmup) {
            bad.push(format!(
                "dense warmup fraction {} outside [0, {MAX_DENSE_WARMUP}]",
                self.dense_warmup
            ));
        }
        if self.estimator_rank == 0 {
            bad.push("estimator rank must be positive".into());
        }
        if self.metrics.qk == Metric::Wanda {
            bad.push("wanda metric applies to FFN only".into());
        }
        if self.metrics.ffn == Metric::QkNorm || self.metrics.vo == Metric::QkNorm {
            bad.push("qknorm metric applies to QK only".into());
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(bad.join("; ")))
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        text.parse()
    }

    /// Apply one `key = value` entry.
    pub fn set_key(&mut self, key: &str, value: &str, pending: &mut PendingGroups) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "ffn.layers" => pending.ffn_layers = Some(v.to_string()),
            "ffn.sparsity" => pending.ffn_sparsity = Some(v.to_string()),
            "qkvo.layers" => pending.qkvo_layers = Some(v.to_string()),
            "qkvo.sparsity" => pending.qkvo_sparsity = Some(v.to_string()),
            "step" | "dense_warmup" => self.dense_warmup = parse_percent(v)?,
            "rank" => self.estimator_rank = parse_num(v, "rank")?,
            "token_split" => self.token_split = v.parse()?,
            "criteria" => self.criteria = v.parse()?,
            "metric" => {
                let m: Metric = v.parse()?;
                self.metrics.apply_override(m);
            }
            "metric.ffn" => self.metrics.ffn = v.parse()?,
            "metric.qk" => self.metrics.qk = v.parse()?,
            "metric.vo" => self.metrics.vo = v.parse()?,
            "granularity" => {
                self.qk_granularity = match v {
                    "auto" => None,
                    other => Some(other.parse()?),
                }
            }
            "estimator_tokens" => {
                self.estimator_all_tokens = match v {
                    "context" => false,
                    "all" => true,
                    _ => return Err(Error::Config(format!("estimator_tokens must be context|all, got '{v}'"))),
                }
            }
            other => return Err(Error::Config(format!("unknown plan key '{other}'"))),
        }
        Ok(())
    }

    /// Render in the `key = value` format; `parse(render(p)) == p` for plans
    /// whose ratios are representable as percentages.
    pub fn render(&self) -> String {
        let mut s = String::new();
        for (group, pick) in [
            ("ffn", (|l: &LayerSparsity| l.ffn) as fn(&LayerSparsity) -> f64),
            ("qkvo", |l: &LayerSparsity| l.qkvo),
        ] {
            // Group consecutive runs of layers sharing one ratio.
            let mut by_ratio: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
            for (&l, ls) in &self.layers {
                let r = pick(ls);
                if r > 0.0 {
                    by_ratio.entry(r.to_bits()).or_default().push(l);
                }
            }
            if by_ratio.is_empty() {
                continue;
            }
            let mut groups: Vec<(Vec<usize>, f64)> = by_ratio
                .into_iter()
                .map(|(bits, ls)| (ls, f64::from_bits(bits)))
                .collect();
            groups.sort_by_key(|(ls, _)| ls[0]);
            let layers: Vec<String> = groups.iter().map(|(ls, _)| format_layers(ls)).collect();
            let ratios: Vec<String> = groups.iter().map(|(_, r)| format_percent(*r)).collect();
            let _ = writeln!(s, "{group}.layers = {}", layers.join(" / "));
            let _ = writeln!(s, "{group}.sparsity = {}", ratios.join(" / "));
        }
        let _ = writeln!(s, "step = {}", format_percent(self.dense_warmup));
        let _ = writeln!(s, "rank = {}", self.estimator_rank);
        let _ = writeln!(s, "token_split = {}", self.token_split.name());
        let _ = writeln!(s, "criteria = {}", self.criteria.name());
        let _ = writeln!(s, "metric.ffn = {}", self.metrics.ffn.name());
        let _ = writeln!(s, "metric.qk = {}", self.metrics.qk.name());
        let _ = writeln!(s, "metric.vo = {}", self.metrics.vo.name());
        let _ = writeln!(
            s,
            "granularity = {}",
            self.qk_granularity.map_or("auto", Granularity::name)
        );
        let _ = writeln!(
            s,
            "estimator_tokens = {}",
            if self.estimator_all_tokens { "all" } else { "context" }
        );
        s
    }
}

/// Layer/ratio keys are resolved together once the whole file has been read.
#[derive(Default)]
pub struct PendingGroups {
    ffn_layers: Option<String>,
    ffn_sparsity: Option<String>,
    qkvo_layers: Option<String>,
    qkvo_sparsity: Option<String>,
}

impl PendingGroups {
    pub fn apply(self, plan: &mut SparsityPlan) -> Result<()> {
        let groups = [
            ("ffn", self.ffn_layers, self.ffn_sparsity),
            ("qkvo", self.qkvo_layers, self.qkvo_sparsity),
        ];
        for (name, layers, ratios) in groups {
            let (layers, ratios) = match (layers, ratios) {
                (None, None) => continue,
                (Some(l), Some(r)) => (l, r),
                _ => {
                    return Err(Error::Config(format!(
                        "{name}.layers and {name}.sparsity must be given together"
                    )))
                }
            };
            let lg: Vec<&str> = layers.split('/').collect();
            let rg: Vec<&str> = ratios.split('/').collect();
            if lg.len() != rg.len() {
                return Err(Error::Config(format!(
                    "{name}: {} layer groups but {} sparsity values",
                    lg.len(),
                    rg.len()
                )));
            }
            for (l, r) in lg.iter().zip(&rg) {
                let ratio = parse_percent(r)?;
                for layer in parse_layers(l)? {
                    let mut ls = plan.layer(layer);
                    if name == "ffn" {
                        ls.ffn = ratio;
                    } else {
                        ls.qkvo = ratio;
                    }
                    plan.layers.insert(layer, ls);
                }
            }
        }
        plan.layers.retain(|_, ls| !ls.is_dense());
        Ok(())
    }
}

impl FromStr for SparsityPlan {
    type Err = Error;

    fn from_str(text: &str) -> Result<Self> {
        let mut plan = SparsityPlan::default();
        let mut pending = PendingGroups::default();
        for (key, value) in parse_kv(text)? {
            plan.set_key(&key, &value, &mut pending)?;
        }
        pending.apply(&mut plan)?;
        Ok(plan)
    }
}

/// Split `key = value` lines, dropping blanks and `#` comments.
pub fn parse_kv(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::Config(format!("line {}: expected key = value, got '{raw}'", n + 1)));
        };
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// `L3-L30,L32` → `[3, …, 30, 32]`.
pub fn parse_layers(s: &str) -> Result<Vec<usize>> {
    let mut out = Vec::new();
    for part in s.split(',') {
        let part = part.trim();
        if part.is_empty() {
            continue;
        }
        let parse_one = |p: &str| -> Result<usize> {
            let p = p.trim();
            let digits = p.strip_prefix('L').or_else(|| p.strip_prefix('l')).unwrap_or(p);
            digits
                .parse()
                .map_err(|_| Error::Config(format!("bad layer '{p}' in '{s}'")))
        };
        match part.split_once('-') {
            Some((a, b)) => {
                let (a, b) = (parse_one(a)?, parse_one(b)?);
                if a > b {
                    return Err(Error::Config(format!("descending layer range '{part}'")));
                }
                out.extend(a..=b);
            }
            None => out.push(parse_one(part)?),
        }
    }
    out.sort_unstable();
    out.dedup();
    Ok(out)
}

pub fn format_layers(layers: &[usize]) -> String {
    let mut parts = Vec::new();
    let mut i = 0;
    while i < layers.len() {
        let start = layers[i];
        let mut end = start;
        while i + 1 < layers.len() && layers[i + 1] == end + 1 {
            i += 1;
            end = layers[i];
        }
        parts.push(if start == end {
            format!("L{start}")
        } else {
            format!("L{start}-L{end}")
        });
        i += 1;
    }
    parts.join(",")
}

/// `"99"` → 0.99.
pub fn parse_percent(s: &str) -> Result<f64> {
    let s = s.trim().trim_end_matches('%');
    let v: f64 = s
        .parse()
        .map_err(|_| Error::Config(format!("bad percentage '{s}'")))?;
    Ok(v / 100.0)
}

pub fn format_percent(r: f64) -> String {
    let p = r * 100.0;
    if (p - p.round()).abs() < 1e-9 {
        format!("{}", p.round() as i64)
    } else {
        format!("{p}")
    }
}

fn parse_num<T: FromStr>(s: &str, what: &str) -> Result<T> {
    s.trim()
        .parse()
        .map_err(|_| Error::Config(format!("bad {what} '{s}'")))
}

macro_rules! named_enum {
    ($t:ty { $($v:ident => $($name:literal)|+),* $(,)? }) => {
        impl $t {
            pub fn name(self) -> &'static str {
                match self { $(<$t>::$v => named_enum!(@first $($name)|+),)* }
            }
        }
        impl FromStr for $t {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s.trim().to_ascii_lowercase().as_str() {
                    $($($name)|+ => Ok(<$t>::$v),)*
                    other => Err(Error::Config(format!(
                        concat!("unknown ", stringify!($t), " '{}'"), other
                    ))),
                }
            }
        }
    };
    (@first $first:literal $(| $rest:literal)*) => { $first };
}

named_enum!(Criteria { Oracle => "oracle", Svd => "svd" | "estimator" });
named_enum!(Metric { L2 => "l2", QkNorm => "qknorm" | "qk_norm" | "attention_norm", Wanda => "wanda", Random => "random" });
named_enum!(Granularity { Channel => "channel", RopePair => "pair" | "rope_pair", Head => "head" });
named_enum!(TokenSplit { Off => "off", On => "on", Random => "random" });

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn appendix_row_parses() {
        let p: SparsityPlan = "ffn.layers = L3-L30\nffn.sparsity = 99\n\
                               qkvo.layers = L14-L19,L21-L23,L25-L29\nqkvo.sparsity = 75\n\
                               step = 5\n"
            .parse()
            .unwrap();
        assert_eq!(p.layer(3).ffn, 0.99);
        assert_eq!(p.layer(3).qkvo, 0.0);
        assert_eq!(p.layer(14).qkvo, 0.75);
        assert_eq!(p.layer(20).qkvo, 0.0);
        assert_eq!(p.layer(31), LayerSparsity::default());
        assert_eq!(p.dense_warmup, 0.05);
        p.validate(32).unwrap();
        assert!(p.validate(16).is_err());
    }

    #[test]
    fn slash_groups() {
        let p: SparsityPlan = "ffn.layers = L17-L30 / L31\nffn.sparsity = 95 / 50\n".parse().unwrap();
        assert_eq!(p.layer(30).ffn, 0.95);
        assert_eq!(p.layer(31).ffn, 0.5);
        let bad: Result<SparsityPlan> = "ffn.layers = L1 / L2\nffn.sparsity = 95\n".parse();
        assert!(bad.is_err());
    }

    #[test]
    fn render_roundtrip() {
        let mut p = SparsityPlan::uniform(4, 0.9, 0.5);
        p.set_layer(0, LayerSparsity::default());
        p.dense_warmup = 0.05;
        p.metrics.qk = Metric::Random;
        p.qk_granularity = Some(Granularity::Head);
        let back: SparsityPlan = p.render().parse().unwrap();
        assert_eq!(back, p);
    }

    #[test]
    fn warmup_cap_and_metric_groups() {
        let mut p = SparsityPlan::dense();
        p.dense_warmup = 0.2;
        assert!(p.validate(1).is_err());
        p.dense_warmup = 0.1;
        p.validate(1).unwrap();
        p.metrics.qk = Metric::Wanda;
        assert!(p.validate(1).is_err());
    }

    #[test]
    fn layer_lists() {
        assert_eq!(parse_layers("L1-L3,L5").unwrap(), vec![1, 2, 3, 5]);
        assert_eq!(format_layers(&[1, 2, 3, 5, 7, 8]), "L1-L3,L5,L7-L8");
        assert!(parse_layers("L5-L2").is_err());
    }

    #[test]
    fn unknown_key_rejected() {
        assert!("bogus = 1".parse::<SparsityPlan>().is_err());
        assert!("granularity = diagonal".parse::<SparsityPlan>().is_err());
    }
}
