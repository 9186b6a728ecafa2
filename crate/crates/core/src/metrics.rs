//! Accuracy, override, correction, improvement-ratio, pattern-tally and
//! facet metrics over [`SampleResult`] lists.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::orchestrator::SampleResult;
use crate::parser::Pattern;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("metric undefined on an empty result list")]
    Empty,
    #[error("improvement ratio undefined for a zero baseline")]
    ZeroBaseline,
}

pub type Result<T> = std::result::Result<T, MetricsError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsBlock {
    pub accuracy: f64,
    pub n_total: usize,
    pub n_parsed: usize,
    pub n_failed: usize,
    pub n_correct: usize,
    /// Overrides over parsed results; 0 when nothing parsed.
    pub override_rate: f64,
    pub n_overrides: usize,
    /// `None` when there were no overrides.
    pub override_accuracy: Option<f64>,
    pub adoptions: usize,
    pub successful_corrections: usize,
    pub plugin_accuracy: f64,
}

impl MetricsBlock {
    pub fn compute(results: &[SampleResult]) -> Result<Self> {
        let accuracy = accuracy(results)?;
        let n_parsed = results.iter().filter(|r| r.llm_final.is_some()).count();
        let (override_rate, override_accuracy) = override_stats(results);
        let (adoptions, successful_corrections) = correction_stats(results);
        Ok(Self {
            accuracy,
            n_total: results.len(),
            n_parsed,
            n_failed: results.len() - n_parsed,
            n_correct: results.iter().filter(|r| r.is_correct()).count(),
            override_rate,
            n_overrides: results.iter().filter(|r| r.overridden == Some(true)).count(),
            override_accuracy,
            adoptions,
            successful_corrections,
            plugin_accuracy: plugin_accuracy(results)?,
        })
    }
}

/// Correct over total; failed parses count as incorrect.
pub fn accuracy(results: &[SampleResult]) -> Result<f64> {
    if results.is_empty() {
        return Err(MetricsError::Empty);
    }
    let correct = results.iter().filter(|r| r.is_correct()).count();
    Ok(correct as f64 / results.len() as f64)
}

pub fn plugin_accuracy(results: &[SampleResult]) -> Result<f64> {
    if results.is_empty() {
        return Err(MetricsError::Empty);
    }
    let correct = results.iter().filter(|r| r.plugin_pred == r.ground_truth).count();
    Ok(correct as f64 / results.len() as f64)
}

/// `(override_rate, override_accuracy)` over results with a parsed final
/// label.
pub fn override_stats(results: &[SampleResult]) -> (f64, Option<f64>) {
    let mut parsed = 0usize;
    let mut overrides = 0usize;
    let mut correct = 0usize;
    for r in results {
        let Some(f) = r.llm_final else { continue };
        parsed += 1;
        if f != r.plugin_pred {
            overrides += 1;
            if f == r.ground_truth {
                correct += 1;
            }
        }
    }
    let rate = if parsed == 0 {
        0.0
    } else {
        overrides as f64 / parsed as f64
    };
    let acc = (overrides > 0).then(|| correct as f64 / overrides as f64);
    (rate, acc)
}

/// `(adoptions, successful_corrections)` over results where both the
/// preliminary and final labels parsed.
pub fn correction_stats(results: &[SampleResult]) -> (usize, usize) {
    let mut adoptions = 0;
    let mut successes = 0;
    for r in results {
        if let (Some(p), Some(f)) = (r.llm_preliminary, r.llm_final) {
            if p != f {
                adoptions += 1;
                if f == r.ground_truth {
                    successes += 1;
                }
            }
        }
    }
    (adoptions, successes)
}

/// Signed percent change of `method_acc` over `baseline_acc`.
pub fn improvement_ratio(method_acc: f64, baseline_acc: f64) -> Result<f64> {
    if baseline_acc == 0.0 {
        return Err(MetricsError::ZeroBaseline);
    }
    Ok(100.0 * (method_acc - baseline_acc) / baseline_acc)
}

pub fn format_improvement(ratio: f64) -> String {
    let r = (ratio * 100.0).round() / 100.0;
    if r >= 0.0 {
        format!("+{:.2}%", r.abs())
    } else {
        format!("{r:.2}%")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatternTally {
    pub pattern: Pattern,
    pub count: usize,
    /// Share of all flags raised.
    pub weight: f64,
}

/// Patterns whose count reaches the k-th largest count, ties included.
/// Zero counts never qualify.
pub fn top_k_patterns(counts: &BTreeMap<Pattern, usize>, k: usize) -> Vec<PatternTally> {
    let total: usize = counts.values().sum();
    let mut sorted: Vec<usize> = counts.values().copied().filter(|&c| c > 0).collect();
    if k == 0 || sorted.is_empty() {
        return Vec::new();
    }
    sorted.sort_unstable_by(|a, b| b.cmp(a));
    let threshold = sorted[(k - 1).min(sorted.len() - 1)];
    let mut out: Vec<PatternTally> = Pattern::ALL
        .iter()
        .filter_map(|p| {
            let c = counts.get(p).copied().unwrap_or(0);
            (c > 0 && c >= threshold).then(|| PatternTally {
                pattern: *p,
                count: c,
                weight: c as f64 / total as f64,
            })
        })
        .collect();
    out.sort_by(|a, b| b.count.cmp(&a.count).then(a.pattern.cmp(&b.pattern)));
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Facet {
    ClassCount,
    SeriesLength,
    TokenBucket,
}

impl fmt::Display for Facet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Facet::ClassCount => "class_count",
            Facet::SeriesLength => "series_length",
            Facet::TokenBucket => "token_bucket",
        })
    }
}

/// Two cut points give three buckets: `< low`, `low..=high`, `> high`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Cuts {
    pub low: usize,
    pub high: usize,
}

impl Cuts {
    pub fn bucket(&self, v: usize) -> usize {
        if v < self.low {
            0
        } else if v <= self.high {
            1
        } else {
            2
        }
    }

    pub fn label(&self, bucket: usize) -> String {
        match bucket {
            0 => format!("<{}", self.low),
            1 => format!("{}-{}", self.low, self.high),
            _ => format!(">{}", self.high),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FacetBuckets {
    pub class_count: Cuts,
    pub series_length: Cuts,
    pub tokens: Cuts,
}

impl Default for FacetBuckets {
    fn default() -> Self {
        Self {
            class_count: Cuts { low: 4, high: 6 },
            series_length: Cuts { low: 80, high: 128 },
            tokens: Cuts {
                low: 6000,
                high: 10_000,
            },
        }
    }
}

impl FacetBuckets {
    pub fn cuts(&self, facet: Facet) -> Cuts {
        match facet {
            Facet::ClassCount => self.class_count,
            Facet::SeriesLength => self.series_length,
            Facet::TokenBucket => self.tokens,
        }
    }
}

/// Per-run facet inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FacetRun {
    pub dataset: String,
    pub num_classes: usize,
    pub series_length: usize,
    pub tokens: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FacetRow {
    pub bucket: String,
    pub runs: usize,
    pub mean_accuracy: f64,
    pub datasets: Vec<String>,
}

/// Mean accuracy per bucket; empty buckets are omitted.
pub fn facet_report(runs: &[FacetRun], facet: Facet, buckets: &FacetBuckets) -> Vec<FacetRow> {
    let cuts = buckets.cuts(facet);
    let mut grouped: BTreeMap<usize, Vec<&FacetRun>> = BTreeMap::new();
    for r in runs {
        let v = match facet {
            Facet::ClassCount => r.num_classes,
            Facet::SeriesLength => r.series_length,
            Facet::TokenBucket => r.tokens,
        };
        grouped.entry(cuts.bucket(v)).or_default().push(r);
    }
    grouped
        .into_iter()
        .map(|(b, rs)| FacetRow {
            bucket: cuts.label(b),
            runs: rs.len(),
            mean_accuracy: rs.iter().map(|r| r.accuracy).sum::<f64>() / rs.len() as f64,
            datasets: rs.iter().map(|r| r.dataset.clone()).collect(),
        })
        .collect()
}

/// Unweighted mean over datasets.
pub fn macro_average(values: &[f64]) -> Option<f64> {
    (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
}

/// Pooled `numerator / denominator` over datasets.
pub fn micro_average(pairs: &[(usize, usize)]) -> Option<f64> {
    let (num, den) = pairs
        .iter()
        .fold((0usize, 0usize), |(n, d), &(a, b)| (n + a, d + b));
    (den > 0).then(|| num as f64 / den as f64)
}
