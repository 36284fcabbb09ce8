//! Brand ranking correlation, rating time series, polarity-varying topic
//! tables and topic coherence / uniqueness / quality.

use std::collections::HashMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::corpus::{CountMatrix, SliceData, Vocabulary};
use crate::error::{DbtmError, Result};
use crate::matrix::Matrix;
use crate::numerics::{normal_cdf, spearman_from_scores};

/// Default polarity grid for topic tables.
pub const DEFAULT_GRID: [f64; 5] = [-1.0, -0.5, 0.0, 0.5, 1.0];

/// Mean raw rating (1..=5) per brand; `None` for brands without documents.
pub fn ground_truth_rating(data: &SliceData) -> Vec<Option<f64>> {
    let mut sum = vec![0.0; data.n_brands];
    let mut n = vec![0usize; data.n_brands];
    for (&b, &r) in data.brands.iter().zip(&data.ratings) {
        sum[b] += r as f64;
        n[b] += 1;
    }
    let absent = n.iter().filter(|&&c| c == 0).count();
    if absent > 0 {
        log::warn!("{absent} brand(s) have no documents and are excluded from the ranking");
    }
    sum.iter()
        .zip(&n)
        .map(|(&s, &c)| (c > 0).then(|| s / c as f64))
        .collect()
}

/// Predicted and true scores over the brands that have a ground truth.
pub fn paired_scores(predicted: &[f64], truth: &[Option<f64>]) -> (Vec<f64>, Vec<f64>) {
    predicted
        .iter()
        .zip(truth)
        .filter_map(|(&p, t)| t.map(|t| (p, t)))
        .unzip()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PValueMethod {
    /// Student t with `B - 2` degrees of freedom.
    #[default]
    StudentT,
    /// Normal approximation of `atanh(r)` with variance `1 / (B - 3)`.
    FisherZ,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankingCorrelation {
    pub corr: f64,
    /// Two-sided; `None` with fewer than 4 brands.
    pub p_value: Option<f64>,
    pub brands: usize,
}

pub fn correlation_p_value(corr: f64, brands: usize, method: PValueMethod) -> Option<f64> {
    if brands < 4 || !corr.is_finite() {
        return None;
    }
    if corr.abs() >= 1.0 {
        return Some(0.0);
    }
    let n = brands as f64;
    Some(match method {
        PValueMethod::StudentT => {
            let t = corr * ((n - 2.0) / (1.0 - corr * corr)).sqrt();
            let dist = StudentsT::new(0.0, 1.0, n - 2.0).expect("positive degrees of freedom");
            2.0 * (1.0 - dist.cdf(t.abs()))
        }
        PValueMethod::FisherZ => {
            let z = corr.atanh() * (n - 3.0).sqrt();
            2.0 * (1.0 - normal_cdf(z.abs()))
        }
    }
    .clamp(0.0, 1.0))
}

/// Spearman correlation of predicted scores against true means, with its
/// two-sided p-value.
pub fn ranking_correlation(predicted: &[f64], truth: &[f64], method: PValueMethod) -> Result<RankingCorrelation> {
    let corr = spearman_from_scores(predicted, truth)?;
    Ok(RankingCorrelation {
        corr,
        p_value: correlation_p_value(corr, predicted.len(), method),
        brands: predicted.len(),
    })
}

/// Like [`ranking_correlation`] but a constant score vector gives `corr = 0`
/// (with a warning) instead of an error.
pub fn ranking_correlation_or_zero(
    predicted: &[f64],
    truth: &[f64],
    method: PValueMethod,
) -> Result<RankingCorrelation> {
    match ranking_correlation(predicted, truth, method) {
        Err(DbtmError::Degenerate(msg)) => {
            log::warn!("ranking correlation undefined ({msg}); using 0");
            Ok(RankingCorrelation {
                corr: 0.0,
                p_value: correlation_p_value(0.0, predicted.len(), method),
                brands: predicted.len(),
            })
        }
        other => other,
    }
}

/// Centres a series on its mean and scales by the largest absolute value;
/// gaps stay gaps.
pub fn normalize_series(values: &[Option<f64>]) -> Vec<Option<f64>> {
    let present: Vec<f64> = values.iter().flatten().copied().collect();
    if present.is_empty() {
        return values.to_vec();
    }
    let mean = present.iter().sum::<f64>() / present.len() as f64;
    let max = present.iter().fold(0.0f64, |m, v| m.max((v - mean).abs()));
    values
        .iter()
        .map(|v| v.map(|v| if max > 0.0 { (v - mean) / max } else { 0.0 }))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesPoint {
    pub slice: usize,
    pub raw: Option<f64>,
    /// Max-abs normalised within the slice (across brands).
    pub slice_normalized: Option<f64>,
    /// Centred and max-abs normalised along the series.
    pub normalized: Option<f64>,
    pub truth: Option<f64>,
    pub truth_normalized: Option<f64>,
}

/// Per-slice score of `brand` next to its ground-truth mean rating, both
/// normalised to [-1, 1] along the series. `raw_scores[t]` holds every
/// brand's score at slice `t`; `truth[t]` the per-brand mean ratings.
pub fn rating_time_series(raw_scores: &[Vec<f64>], truth: &[Vec<Option<f64>>], brand: usize) -> Vec<SeriesPoint> {
    let raw: Vec<Option<f64>> = raw_scores.iter().map(|s| s.get(brand).copied()).collect();
    let truth_b: Vec<Option<f64>> = (0..raw_scores.len())
        .map(|t| truth.get(t).and_then(|tr| tr.get(brand).copied().flatten()))
        .collect();
    let normalized = normalize_series(&raw);
    let truth_normalized = normalize_series(&truth_b);
    raw_scores
        .iter()
        .enumerate()
        .map(|(t, scores)| {
            let max = scores.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            SeriesPoint {
                slice: t,
                raw: raw[t],
                slice_normalized: raw[t].map(|v| if max > 0.0 { v / max } else { 0.0 }),
                normalized: normalized[t],
                truth: truth_b[t],
                truth_normalized: truth_normalized[t],
            }
        })
        .collect()
}

pub fn series_csv(series: &[SeriesPoint]) -> String {
    let fmt = |v: Option<f64>| v.map_or_else(|| "NA".to_string(), |v| format!("{v}"));
    let mut out = String::from("slice,raw,slice_normalized,normalized,truth,truth_normalized\n");
    for p in series {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            p.slice,
            fmt(p.raw),
            fmt(p.slice_normalized),
            fmt(p.normalized),
            fmt(p.truth),
            fmt(p.truth_normalized)
        );
    }
    out
}

/// Top words of every topic at each polarity value of a grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopicTable {
    pub grid: Vec<f64>,
    /// `cells[k][g]`: word ids ranked by `beta_kv * exp(grid[g] * eta_kv)`.
    pub cells: Vec<Vec<Vec<usize>>>,
}

pub fn topic_top_words(beta: &Matrix, eta: &Matrix, grid: &[f64], n: usize) -> Result<TopicTable> {
    beta.ensure_same_shape(eta)?;
    if let Some(x) = grid.iter().find(|x| !(-1.0..=1.0).contains(*x)) {
        return Err(DbtmError::Domain(format!("polarity grid value {x} outside [-1, 1]")));
    }
    let n = n.min(beta.cols());
    let cells = (0..beta.rows())
        .map(|k| {
            grid.iter()
                .map(|&x| {
                    // Logs keep the ordering exact without overflow.
                    let score: Vec<f64> = beta
                        .row(k)
                        .iter()
                        .zip(eta.row(k))
                        .map(|(b, e)| b.ln() + x * e)
                        .collect();
                    top_n(&score, n)
                })
                .collect()
        })
        .collect();
    Ok(TopicTable {
        grid: grid.to_vec(),
        cells,
    })
}

fn top_n(score: &[f64], n: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..score.len()).collect();
    idx.sort_by(|&a, &b| score[b].total_cmp(&score[a]).then(a.cmp(&b)));
    idx.truncate(n);
    idx
}

impl TopicTable {
    pub fn topics(&self) -> usize {
        self.cells.len()
    }

    /// Word lists of the cell at polarity `x` (nearest grid point).
    pub fn at(&self, x: f64) -> Vec<Vec<usize>> {
        let g = self
            .grid
            .iter()
            .enumerate()
            .min_by(|a, b| (a.1 - x).abs().total_cmp(&(b.1 - x).abs()))
            .map(|(g, _)| g)
            .unwrap_or(0);
        self.cells.iter().map(|c| c[g].clone()).collect()
    }

    pub fn to_json(&self, vocab: &Vocabulary) -> serde_json::Value {
        let topics: Vec<serde_json::Value> = self
            .cells
            .iter()
            .enumerate()
            .map(|(k, rows)| {
                let cells: Vec<serde_json::Value> = rows
                    .iter()
                    .zip(&self.grid)
                    .map(|(words, x)| {
                        serde_json::json!({
                            "x": x,
                            "words": words.iter().map(|&v| vocab.term(v)).collect::<Vec<_>>(),
                        })
                    })
                    .collect();
                serde_json::json!({ "topic": k, "cells": cells })
            })
            .collect();
        serde_json::json!({ "grid": self.grid, "topics": topics })
    }

    /// One block per topic, one row per grid point.
    pub fn render_text(&self, vocab: &Vocabulary) -> String {
        let mut out = String::new();
        for (k, rows) in self.cells.iter().enumerate() {
            let _ = writeln!(out, "topic {k}");
            for (words, x) in rows.iter().zip(&self.grid) {
                let words: Vec<&str> = words.iter().map(|&v| vocab.term(v)).collect();
                let _ = writeln!(out, "  {x:>+5.2}  {}", words.join(" "));
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CoherenceVariant {
    /// Mean over pairs `i < j` of `log((D(w_i, w_j) + 1) / D(w_j))`.
    #[default]
    LogConditional,
    Npmi,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoherenceReport {
    /// Average over topics that had at least one scorable pair.
    pub mean: f64,
    pub per_topic: Vec<Option<f64>>,
    /// Pairs skipped because a word never occurs in the reference counts.
    pub skipped_pairs: usize,
}

/// Document co-occurrence coherence of ranked word lists against a
/// reference count matrix.
pub fn topic_coherence(topics: &[Vec<usize>], reference: &CountMatrix, variant: CoherenceVariant) -> Result<CoherenceReport> {
    let mut local: HashMap<usize, usize> = HashMap::new();
    for &w in topics.iter().flatten() {
        if w >= reference.cols() {
            return Err(DbtmError::Shape(format!("word {w} outside vocabulary of {}", reference.cols())));
        }
        let next = local.len();
        local.entry(w).or_insert(next);
    }
    let m = local.len();
    let mut df = vec![0usize; m];
    let mut co = vec![0usize; m * m];
    let mut present = Vec::new();
    for d in 0..reference.rows() {
        present.clear();
        let (idx, _) = reference.row(d);
        present.extend(idx.iter().filter_map(|&v| local.get(&(v as usize)).copied()));
        for (a, &i) in present.iter().enumerate() {
            df[i] += 1;
            for &j in &present[a + 1..] {
                co[i * m + j] += 1;
                co[j * m + i] += 1;
            }
        }
    }
    let n_docs = reference.rows() as f64;
    let mut skipped = 0;
    let per_topic: Vec<Option<f64>> = topics
        .iter()
        .map(|words| {
            let mut total = 0.0;
            let mut pairs = 0usize;
            for i in 0..words.len() {
                for j in i + 1..words.len() {
                    let (a, b) = (local[&words[i]], local[&words[j]]);
                    if df[a] == 0 || df[b] == 0 {
                        skipped += 1;
                        continue;
                    }
                    let dij = co[a * m + b] as f64;
                    total += match variant {
                        CoherenceVariant::LogConditional => ((dij + 1.0) / df[b] as f64).ln(),
                        CoherenceVariant::Npmi => {
                            if dij == 0.0 {
                                -1.0
                            } else {
                                let pij = dij / n_docs;
                                let pmi = (pij / ((df[a] as f64 / n_docs) * (df[b] as f64 / n_docs))).ln();
                                if pij >= 1.0 {
                                    1.0
                                } else {
                                    pmi / -pij.ln()
                                }
                            }
                        }
                    };
                    pairs += 1;
                }
            }
            (pairs > 0).then(|| total / pairs as f64)
        })
        .collect();
    if skipped > 0 {
        log::warn!("{skipped} word pair(s) skipped: word absent from the reference documents");
    }
    let scored: Vec<f64> = per_topic.iter().flatten().copied().collect();
    let mean = if scored.is_empty() {
        f64::NAN
    } else {
        scored.iter().sum::<f64>() / scored.len() as f64
    };
    Ok(CoherenceReport {
        mean,
        per_topic,
        skipped_pairs: skipped,
    })
}

/// `(1 / (K N)) sum_k sum_{w in top(k)} 1 / cnt(w)`.
pub fn topic_uniqueness(topics: &[Vec<usize>]) -> Result<f64> {
    let total: usize = topics.iter().map(Vec::len).sum();
    if total == 0 {
        return Err(DbtmError::Domain("no topic words".into()));
    }
    let mut cnt: HashMap<usize, usize> = HashMap::new();
    for words in topics {
        let mut seen: Vec<usize> = words.clone();
        seen.sort_unstable();
        seen.dedup();
        for w in seen {
            *cnt.entry(w).or_insert(0) += 1;
        }
    }
    let sum: f64 = topics.iter().flatten().map(|w| 1.0 / cnt[w] as f64).sum();
    Ok(sum / total as f64)
}

/// `uniqueness / |coherence|`.
pub fn topic_quality(coherence: f64, uniqueness: f64) -> Result<f64> {
    if coherence == 0.0 || !coherence.is_finite() {
        return Err(DbtmError::Domain(format!("topic quality needs a nonzero coherence, got {coherence}")));
    }
    Ok(uniqueness / coherence.abs())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub slice: String,
    pub corr: Option<f64>,
    pub p_value: Option<f64>,
    pub coherence: Option<f64>,
    pub uniqueness: Option<f64>,
    pub quality: Option<f64>,
}

impl MetricRow {
    pub fn new(
        slice: impl Into<String>,
        ranking: Option<RankingCorrelation>,
        coherence: Option<f64>,
        uniqueness: Option<f64>,
    ) -> Self {
        let quality = match (coherence, uniqueness) {
            (Some(c), Some(u)) => topic_quality(c, u).ok(),
            _ => None,
        };
        MetricRow {
            slice: slice.into(),
            corr: ranking.map(|r| r.corr),
            p_value: ranking.and_then(|r| r.p_value),
            coherence,
            uniqueness,
            quality,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub rows: Vec<MetricRow>,
    pub average: MetricRow,
}

fn mean_of(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = values.flatten().filter(|v| v.is_finite()).collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

impl MetricReport {
    /// Averages each column over the rows where it is present. The average
    /// quality is recomputed from the average coherence and uniqueness.
    pub fn from_rows(rows: Vec<MetricRow>) -> Self {
        let coherence = mean_of(rows.iter().map(|r| r.coherence));
        let uniqueness = mean_of(rows.iter().map(|r| r.uniqueness));
        let quality = match (coherence, uniqueness) {
            (Some(c), Some(u)) => topic_quality(c, u).ok(),
            _ => None,
        };
        let average = MetricRow {
            slice: "average".into(),
            corr: mean_of(rows.iter().map(|r| r.corr)),
            p_value: mean_of(rows.iter().map(|r| r.p_value)),
            coherence,
            uniqueness,
            quality,
        };
        MetricReport { rows, average }
    }

    pub fn to_csv(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or_else(|| "NA".to_string(), |v| format!("{v:.6}"));
        let mut out = String::from("slice,corr,p_value,coherence,uniqueness,quality\n");
        for r in self.rows.iter().chain(std::iter::once(&self.average)) {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                r.slice,
                fmt(r.corr),
                fmt(r.p_value),
                fmt(r.coherence),
                fmt(r.uniqueness),
                fmt(r.quality)
            );
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}
