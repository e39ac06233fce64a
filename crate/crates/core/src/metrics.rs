//! Multi-label classification metrics and Pearson correlation.
//!
//! Label matrices are `N x L` rows of 0/1 bytes. Scores are `N x L` reals.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("metric undefined: {0}")]
    Undefined(String),
}

type Result<T> = std::result::Result<T, MetricError>;

fn check_matrix<T>(name: &str, rows: &[Vec<T>], width: Option<usize>) -> Result<usize> {
    let l = width.or_else(|| rows.first().map(Vec::len)).unwrap_or(0);
    if let Some(i) = rows.iter().position(|r| r.len() != l) {
        return Err(MetricError::Shape(format!(
            "{name} row {i} has {} columns, expected {l}",
            rows[i].len()
        )));
    }
    Ok(l)
}

fn check_pair<T, U>(gold: &[Vec<T>], other: &[Vec<U>]) -> Result<usize> {
    if gold.is_empty() {
        return Err(MetricError::Undefined("no samples".into()));
    }
    if gold.len() != other.len() {
        return Err(MetricError::Shape(format!(
            "{} gold rows vs {} predicted rows",
            gold.len(),
            other.len()
        )));
    }
    let l = check_matrix("gold", gold, None)?;
    check_matrix("prediction", other, Some(l))?;
    Ok(l)
}

/// Mean per-sample `|G ∩ P| / |G ∪ P|`; a sample with both sets empty
/// scores 1.
pub fn jaccard_accuracy(gold: &[Vec<u8>], pred: &[Vec<u8>]) -> Result<f64> {
    check_pair(gold, pred)?;
    let total: f64 = gold
        .iter()
        .zip(pred)
        .map(|(g, p)| {
            let (mut inter, mut union) = (0usize, 0usize);
            for (&a, &b) in g.iter().zip(p) {
                let (a, b) = (a != 0, b != 0);
                inter += usize::from(a && b);
                union += usize::from(a || b);
            }
            if union == 0 {
                1.0
            } else {
                inter as f64 / union as f64
            }
        })
        .sum();
    Ok(total / gold.len() as f64)
}

fn f1(tp: usize, fp: usize, fn_: usize) -> f64 {
    let denom = 2 * tp + fp + fn_;
    if denom == 0 {
        0.0
    } else {
        (2 * tp) as f64 / denom as f64
    }
}

/// Returns `(macro_f1, micro_f1)`. A label with no gold or predicted
/// positives contributes 0 to the macro average.
pub fn f1_scores(gold: &[Vec<u8>], pred: &[Vec<u8>]) -> Result<(f64, f64)> {
    let l = check_pair(gold, pred)?;
    if l == 0 {
        return Err(MetricError::Undefined("no labels".into()));
    }
    let mut counts = vec![(0usize, 0usize, 0usize); l];
    for (g, p) in gold.iter().zip(pred) {
        for (j, (&a, &b)) in g.iter().zip(p).enumerate() {
            match (a != 0, b != 0) {
                (true, true) => counts[j].0 += 1,
                (false, true) => counts[j].1 += 1,
                (true, false) => counts[j].2 += 1,
                (false, false) => {}
            }
        }
    }
    let macro_f1 = counts.iter().map(|&(t, p, n)| f1(t, p, n)).sum::<f64>() / l as f64;
    let (t, p, n) = counts
        .iter()
        .fold((0, 0, 0), |acc, c| (acc.0 + c.0, acc.1 + c.1, acc.2 + c.2));
    Ok((macro_f1, f1(t, p, n)))
}

/// Label-ranking average precision. Samples with no relevant label are
/// skipped; if every sample is skipped the metric is undefined.
pub fn lrap(gold: &[Vec<u8>], scores: &[Vec<f64>]) -> Result<f64> {
    check_pair(gold, scores)?;
    let mut total = 0.0;
    let mut used = 0usize;
    for (g, s) in gold.iter().zip(scores) {
        let n_rel = g.iter().filter(|&&x| x != 0).count();
        if n_rel == 0 {
            continue;
        }
        if s.iter().any(|v| v.is_nan()) {
            return Err(MetricError::Undefined("NaN score".into()));
        }
        let mut order: Vec<usize> = (0..s.len()).collect();
        order.sort_by(|&a, &b| s[b].total_cmp(&s[a]));
        // Walk groups of tied scores; rank and relevant-count are cumulative
        // through the end of each group.
        let (mut rank, mut rel_seen, mut acc) = (0usize, 0usize, 0.0);
        let mut i = 0;
        while i < order.len() {
            let mut j = i;
            while j < order.len() && s[order[j]] == s[order[i]] {
                j += 1;
            }
            let group_rel = order[i..j].iter().filter(|&&k| g[k] != 0).count();
            rank += j - i;
            rel_seen += group_rel;
            acc += group_rel as f64 * rel_seen as f64 / rank as f64;
            i = j;
        }
        total += acc / n_rel as f64;
        used += 1;
    }
    if used == 0 {
        return Err(MetricError::Undefined(
            "no sample has a relevant label".into(),
        ));
    }
    Ok(total / used as f64)
}

/// Returns `(hamming_loss, weak_accuracy)` with weak accuracy defined as
/// `1 - hamming_loss`.
pub fn hamming_and_weak_accuracy(gold: &[Vec<u8>], pred: &[Vec<u8>]) -> Result<(f64, f64)> {
    let l = check_pair(gold, pred)?;
    if l == 0 {
        return Err(MetricError::Undefined("no labels".into()));
    }
    let wrong: usize = gold
        .iter()
        .zip(pred)
        .map(|(g, p)| g.iter().zip(p).filter(|(a, b)| (**a != 0) != (**b != 0)).count())
        .sum();
    let h = wrong as f64 / (gold.len() * l) as f64;
    Ok((h, 1.0 - h))
}

/// Pearson correlation using centred sums. Undefined for fewer than two
/// points or a constant input.
pub fn pearson_r(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(MetricError::Shape(format!("{} vs {} values", x.len(), y.len())));
    }
    if x.len() < 2 {
        return Err(MetricError::Undefined("need at least two points".into()));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (&a, &b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(MetricError::Undefined("constant input".into()));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Evaluation summary. Metrics that are undefined on the given data, or
/// whose task had no data, are `None`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub jaccard_accuracy: Option<f64>,
    pub f1_macro: Option<f64>,
    pub f1_micro: Option<f64>,
    pub lrap: Option<f64>,
    pub hamming_loss: Option<f64>,
    pub weak_accuracy: Option<f64>,
    pub pearson_v: Option<f64>,
    pub pearson_a: Option<f64>,
    pub pearson_d: Option<f64>,
}

impl MetricsReport {
    pub fn fields(&self) -> [(&'static str, Option<f64>); 9] {
        [
            ("jaccard_accuracy", self.jaccard_accuracy),
            ("f1_macro", self.f1_macro),
            ("f1_micro", self.f1_micro),
            ("lrap", self.lrap),
            ("hamming_loss", self.hamming_loss),
            ("weak_accuracy", self.weak_accuracy),
            ("pearson_v", self.pearson_v),
            ("pearson_a", self.pearson_a),
            ("pearson_d", self.pearson_d),
        ]
    }

    /// `name=value` lines for the defined metrics.
    pub fn to_key_value(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.fields() {
            if let Some(v) = v {
                let _ = writeln!(out, "{k}={v}");
            }
        }
        out
    }

    /// Header line and one value line, defined metrics only.
    pub fn to_csv(&self) -> String {
        let present: Vec<_> = self.fields().into_iter().filter_map(|(k, v)| v.map(|v| (k, v))).collect();
        let header: Vec<&str> = present.iter().map(|(k, _)| *k).collect();
        let values: Vec<String> = present.iter().map(|(_, v)| v.to_string()).collect();
        format!("{}\n{}\n", header.join(","), values.join(","))
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.fields().into_iter().find(|(k, _)| *k == name).and_then(|(_, v)| v)
    }
}
