//! Hypothesis/reference file handling and metric reports.
//!
//! Both sides use the same JSONL shape, one {id, tokens} object per line;
//! a corpus manifest works directly as a reference file because extra
//! fields are ignored. Sequences are compared after stripping the begin
//! marker and everything from the end marker on.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use strata_data::{BOS, EOS};
use strata_metrics::{bleu, cider, meteor_lite, rouge_l, CiderVariant, EvalPair};

use crate::{cfg_err, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HypLine {
    pub id: String,
    pub tokens: Vec<u32>,
}

pub fn read_token_lines(path: &Path) -> Result<Vec<HypLine>> {
    let text = fs::read_to_string(path)
        .map_err(|e| cfg_err(format!("cannot read {}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parsed: HypLine = serde_json::from_str(line)
            .map_err(|e| cfg_err(format!("{}:{}: {e}", path.display(), i + 1)))?;
        out.push(parsed);
    }
    if out.is_empty() {
        return Err(cfg_err(format!("{} holds no samples", path.display())));
    }
    Ok(out)
}

pub fn write_token_lines(path: &Path, lines: &[HypLine]) -> Result<()> {
    let mut f = fs::File::create(path)
        .map_err(|e| cfg_err(format!("cannot write {}: {e}", path.display())))?;
    for line in lines {
        serde_json::to_writer(&mut f, line)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

/// Drops the begin marker and truncates at the first end marker.
pub fn strip_markers(tokens: &[u32]) -> &[u32] {
    let body = match tokens.first() {
        Some(&t) if t == BOS => &tokens[1..],
        _ => tokens,
    };
    match body.iter().position(|&t| t == EOS) {
        Some(i) => &body[..i],
        None => body,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    Bleu,
    Rouge,
    Meteor,
    Cider,
}

/// Comma-separated metric names, e.g. "bleu,rouge,meteor,cider".
pub fn parse_metric_list(s: &str) -> Result<Vec<Metric>> {
    let mut out = Vec::new();
    for name in s.split(',') {
        let m = match name.trim() {
            "bleu" => Metric::Bleu,
            "rouge" => Metric::Rouge,
            "meteor" => Metric::Meteor,
            "cider" => Metric::Cider,
            other => return Err(cfg_err(format!("unknown metric {other:?}"))),
        };
        if !out.contains(&m) {
            out.push(m);
        }
    }
    if out.is_empty() {
        return Err(cfg_err("empty metric list"));
    }
    Ok(out)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub pairs: usize,
    pub metrics: BTreeMap<String, f64>,
}

/// Pairs hypotheses with references by id and scores the requested
/// metrics. Every hypothesis must find its reference; ids may not repeat.
pub fn eval_pairs(
    hyps: &[HypLine],
    refs: &[HypLine],
    metrics: &[Metric],
) -> Result<EvalReport> {
    let mut by_id: BTreeMap<&str, &HypLine> = BTreeMap::new();
    for r in refs {
        if by_id.insert(&r.id, r).is_some() {
            return Err(cfg_err(format!("reference id {} repeats", r.id)));
        }
    }
    let mut seen = std::collections::BTreeSet::new();
    let mut pairs: Vec<EvalPair<u32>> = Vec::with_capacity(hyps.len());
    for h in hyps {
        if !seen.insert(&h.id) {
            return Err(cfg_err(format!("hypothesis id {} repeats", h.id)));
        }
        let r = by_id
            .get(h.id.as_str())
            .ok_or_else(|| cfg_err(format!("hypothesis {} has no reference", h.id)))?;
        pairs.push(EvalPair::new(
            strip_markers(&h.tokens).to_vec(),
            vec![strip_markers(&r.tokens).to_vec()],
        ));
    }

    let mut out = BTreeMap::new();
    for m in metrics {
        match m {
            Metric::Bleu => {
                for n in 1..=4 {
                    let v = bleu(&pairs, n).map_err(|e| cfg_err(e.to_string()))?;
                    out.insert(format!("bleu_{n}"), v);
                }
            }
            Metric::Rouge => {
                out.insert("rouge_l".to_string(), rouge_l(&pairs));
            }
            Metric::Meteor => {
                out.insert("meteor".to_string(), meteor_lite(&pairs));
            }
            Metric::Cider => {
                out.insert("cider".to_string(), cider(&pairs, CiderVariant::Plain));
            }
        }
    }
    Ok(EvalReport {
        pairs: pairs.len(),
        metrics: out,
    })
}

/// File-level wrapper: reads both JSONL files and scores them.
pub fn eval_files(hyp: &Path, reference: &Path, metrics: &[Metric]) -> Result<EvalReport> {
    let hyps = read_token_lines(hyp)?;
    let refs = read_token_lines(reference)?;
    eval_pairs(&hyps, &refs, metrics)
}
