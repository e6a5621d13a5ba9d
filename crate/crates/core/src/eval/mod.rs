//! Offline metrics: AUC, logloss and forward latency.

use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::EncodedExample;
use crate::model::{Batch, Model};
use crate::tensor::{Float, SIGMOID_FLOOR};

/// Integer rank-sum form of the Mann–Whitney statistic: returns
/// `(numerator, denominator)` with AUC = numerator / denominator, ties
/// counted as one half.
pub fn auc_fraction<T: Float>(scores: &[T], labels: &[u8]) -> Result<(u128, u128)> {
    if scores.len() != labels.len() {
        return Err(Error::shape(
            "auc",
            format!("{} scores for {} labels", scores.len(), labels.len()),
        ));
    }
    if let Some(i) = scores.iter().position(|s| !s.as_f64().is_finite()) {
        return Err(Error::NonFinite(format!("score {i}")));
    }
    let n_pos = labels.iter().filter(|&&l| l != 0).count() as u128;
    let n_neg = labels.len() as u128 - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::SingleClass {
            n_pos: n_pos as usize,
            n_neg: n_neg as usize,
        });
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].as_f64().total_cmp(&scores[b].as_f64()));
    // twice the positive rank sum; a tie group [i, j) shares rank (i+j+1)/2
    let mut twice_rank_sum: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && scores[order[j]].as_f64() == scores[order[i]].as_f64() {
            j += 1;
        }
        let pos = order[i..j].iter().filter(|&&k| labels[k] != 0).count() as u128;
        twice_rank_sum += pos * (i + j + 1) as u128;
        i = j;
    }
    Ok((twice_rank_sum - n_pos * (n_pos + 1), 2 * n_pos * n_neg))
}

pub fn auc<T: Float>(scores: &[T], labels: &[u8]) -> Result<f64> {
    let (num, den) = auc_fraction(scores, labels)?;
    Ok(num as f64 / den as f64)
}

/// Mean binary cross-entropy with probabilities clamped like the model's
/// sigmoid.
pub fn logloss<T: Float>(probs: &[T], labels: &[u8]) -> Result<f64> {
    if probs.len() != labels.len() || probs.is_empty() {
        return Err(Error::shape(
            "logloss",
            format!("{} probabilities for {} labels", probs.len(), labels.len()),
        ));
    }
    let total: f64 = probs
        .iter()
        .zip(labels)
        .map(|(p, &y)| {
            let p = p.as_f64().clamp(SIGMOID_FLOOR, 1.0 - SIGMOID_FLOOR);
            if y != 0 {
                -p.ln()
            } else {
                -(1.0 - p).ln()
            }
        })
        .sum();
    Ok(total / probs.len() as f64)
}

/// Per-example forward time in milliseconds.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LatencyStats {
    pub mean_ms: f64,
    pub p50_ms: f64,
    pub p99_ms: f64,
}

impl LatencyStats {
    pub fn from_samples(samples_ms: &[f64]) -> Option<Self> {
        if samples_ms.is_empty() {
            return None;
        }
        let mut s = samples_ms.to_vec();
        s.sort_by(f64::total_cmp);
        let at = |q: f64| s[((q * (s.len() - 1) as f64).round() as usize).min(s.len() - 1)];
        Some(LatencyStats {
            mean_ms: s.iter().sum::<f64>() / s.len() as f64,
            p50_ms: at(0.5),
            p99_ms: at(0.99),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Metrics {
    pub model: String,
    pub auc: f64,
    pub logloss: f64,
    pub n_pos: usize,
    pub n_neg: usize,
    /// Single-example forwards.
    pub latency_b1: Option<LatencyStats>,
    /// Batches of 256, reported per example.
    pub latency_b256: Option<LatencyStats>,
    /// Effective configuration the model was trained and scored with.
    pub config: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalOptions {
    pub batch_size: usize,
    pub warmup: usize,
    /// Timed single-example forwards; 0 skips latency measurement.
    pub latency_samples: usize,
    /// Timed 256-example batches.
    pub batch_latency_samples: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            batch_size: 256,
            warmup: 100,
            latency_samples: 500,
            batch_latency_samples: 10,
        }
    }
}

/// Eval-mode scores, AUC, logloss and latency of `model` on `examples`.
pub fn evaluate(
    model: &Model,
    examples: &[EncodedExample],
    options: &EvalOptions,
    tag: &str,
    config_echo: &str,
) -> Result<Metrics> {
    if examples.is_empty() {
        return Err(Error::EmptyDataset("no evaluation examples".into()));
    }
    let labels: Vec<u8> = examples.iter().map(|e| e.label).collect();
    let scores = model.predict_all(examples, options.batch_size)?;
    let auc = auc(&scores, &labels)?;
    let logloss = logloss(&scores, &labels)?;
    let n_pos = labels.iter().filter(|&&l| l != 0).count();
    let (latency_b1, latency_b256) = if options.latency_samples > 0 {
        (
            Some(measure_latency(model, examples, 1, options.warmup, options.latency_samples)?),
            Some(measure_latency(
                model,
                examples,
                256,
                options.warmup.min(options.batch_latency_samples.max(1)),
                options.batch_latency_samples.max(1),
            )?),
        )
    } else {
        (None, None)
    };
    Ok(Metrics {
        model: tag.to_string(),
        auc,
        logloss,
        n_pos,
        n_neg: labels.len() - n_pos,
        latency_b1: latency_b1.flatten(),
        latency_b256: latency_b256.flatten(),
        config: config_echo.to_string(),
    })
}

/// Times `samples` forwards of `batch` consecutive examples (wrapping
/// around the set) after `warmup` untimed ones.
pub fn measure_latency(
    model: &Model,
    examples: &[EncodedExample],
    batch: usize,
    warmup: usize,
    samples: usize,
) -> Result<Option<LatencyStats>> {
    let n = examples.len();
    let batches: Vec<Batch> = (0..warmup + samples)
        .map(|k| Batch::new((0..batch).map(|j| &examples[(k * batch + j) % n])))
        .collect::<Result<_>>()?;
    let mut times = Vec::with_capacity(samples);
    for (k, b) in batches.iter().enumerate() {
        let start = Instant::now();
        let out = model.predict(b)?;
        let elapsed = start.elapsed().as_secs_f64() * 1e3;
        std::hint::black_box(out);
        if k >= warmup {
            times.push(elapsed / batch as f64);
        }
    }
    Ok(LatencyStats::from_samples(&times))
}

fn fmt_opt(v: Option<f64>, digits: usize) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.digits$}"))
}

/// Aligned text table sorted by AUC, best first.
pub fn compare_report(metrics: &[Metrics]) -> String {
    let mut rows: Vec<&Metrics> = metrics.iter().collect();
    rows.sort_by(|a, b| b.auc.total_cmp(&a.auc));
    let header = ["model", "AUC", "logloss", "RT b1 (ms)", "RT b256 (ms/ex)"];
    let cells: Vec<[String; 5]> = rows
        .iter()
        .map(|m| {
            [
                m.model.clone(),
                format!("{:.4}", m.auc),
                format!("{:.4}", m.logloss),
                fmt_opt(m.latency_b1.map(|l| l.mean_ms), 3),
                fmt_opt(m.latency_b256.map(|l| l.mean_ms), 4),
            ]
        })
        .collect();
    let mut widths = header.map(str::len);
    for row in &cells {
        for (w, c) in widths.iter_mut().zip(row) {
            *w = (*w).max(c.len());
        }
    }
    let mut out = String::new();
    let line = |out: &mut String, row: &[&str]| {
        for (i, (c, w)) in row.iter().zip(widths).enumerate() {
            if i == 0 {
                let _ = write!(out, "{c:<w$}");
            } else {
                let _ = write!(out, "  {c:>w$}");
            }
        }
        out.push('\n');
    };
    line(&mut out, &header);
    let rule: Vec<String> = widths.iter().map(|&w| "-".repeat(w)).collect();
    line(&mut out, &rule.iter().map(String::as_str).collect::<Vec<_>>());
    for row in &cells {
        line(&mut out, &row.iter().map(String::as_str).collect::<Vec<_>>());
    }
    out
}

const LATENCY_KEYS: [&str; 3] = ["mean_ms", "p50_ms", "p99_ms"];

/// Flat `key = value` records, one per model, separated by blank lines.
/// Missing latency values are written as `-`.
pub fn metrics_records(metrics: &[Metrics]) -> String {
    let mut out = String::new();
    for (i, m) in metrics.iter().enumerate() {
        if i > 0 {
            out.push('\n');
        }
        let _ = writeln!(out, "model = {}", m.model);
        let _ = writeln!(out, "auc = {}", m.auc);
        let _ = writeln!(out, "logloss = {}", m.logloss);
        let _ = writeln!(out, "n_pos = {}", m.n_pos);
        let _ = writeln!(out, "n_neg = {}", m.n_neg);
        for (prefix, lat) in [("latency_b1", m.latency_b1), ("latency_b256", m.latency_b256)] {
            let vals = lat.map(|l| [l.mean_ms, l.p50_ms, l.p99_ms]);
            for (k, key) in LATENCY_KEYS.iter().enumerate() {
                let _ = writeln!(out, "{prefix}_{key} = {}", fmt_opt(vals.map(|v| v[k]), 6));
            }
        }
        let config = serde_json::to_string(&m.config).expect("string serializes");
        let _ = writeln!(out, "config = {config}");
    }
    out
}

/// Parses the output of [`metrics_records`].
pub fn parse_metrics_records(text: &str) -> Result<Vec<Metrics>> {
    let bad = |line: usize, msg: String| Error::Parse {
        path: "<metrics>".into(),
        line,
        msg,
    };
    let mut out = Vec::new();
    let mut fields: Vec<(usize, String, String)> = Vec::new();
    let lines = text.lines().map(Some).chain(std::iter::once(None));
    for (no, line) in (1..).zip(lines) {
        match line {
            Some(l) if !l.trim().is_empty() => {
                let (k, v) = l
                    .split_once(" = ")
                    .ok_or_else(|| bad(no, format!("expected `key = value`, got {l:?}")))?;
                fields.push((no, k.trim().to_string(), v.to_string()));
            }
            _ if fields.is_empty() => {}
            _ => {
                out.push(record_from_fields(&fields).map_err(|(line, msg)| bad(line, msg))?);
                fields.clear();
            }
        }
    }
    Ok(out)
}

fn record_from_fields(fields: &[(usize, String, String)]) -> std::result::Result<Metrics, (usize, String)> {
    let first = fields[0].0;
    let get = |key: &str| -> std::result::Result<(usize, &str), (usize, String)> {
        fields
            .iter()
            .find(|f| f.1 == key)
            .map(|f| (f.0, f.2.as_str()))
            .ok_or((first, format!("record is missing `{key}`")))
    };
    fn num<T: std::str::FromStr>(f: (usize, &str)) -> std::result::Result<T, (usize, String)> {
        f.1.parse().map_err(|_| (f.0, format!("bad number {:?}", f.1)))
    }
    let latency = |prefix: &str| -> std::result::Result<Option<LatencyStats>, (usize, String)> {
        let mut vals = [0.0; 3];
        let mut missing = 0;
        for (k, key) in LATENCY_KEYS.iter().enumerate() {
            let f = get(&format!("{prefix}_{key}"))?;
            if f.1 == "-" {
                missing += 1;
            } else {
                vals[k] = num(f)?;
            }
        }
        Ok((missing == 0).then_some(LatencyStats {
            mean_ms: vals[0],
            p50_ms: vals[1],
            p99_ms: vals[2],
        }))
    };
    let config = get("config")?;
    Ok(Metrics {
        model: get("model")?.1.to_string(),
        auc: num(get("auc")?)?,
        logloss: num(get("logloss")?)?,
        n_pos: num(get("n_pos")?)?,
        n_neg: num(get("n_neg")?)?,
        latency_b1: latency("latency_b1")?,
        latency_b256: latency("latency_b256")?,
        config: serde_json::from_str(config.1).map_err(|e| (config.0, format!("config: {e}")))?,
    })
}
