//! Accuracy metrics (RMSSE, QL, MQL), stability metrics (sMAPC, QC, MQC),
//! aggregation and baseline normalization.
//!
//! Stability functions take the overlapping part of two forecast vectors:
//! `curr` holds the forecasts from origin `n` and `prev` those from the
//! preceding origin for the same target periods. With unit step and horizon
//! `h` each slice has `h - 1` entries; see [`overlap`].

use std::collections::BTreeMap;
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::panel::SeriesId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum MetricName {
    #[serde(rename = "RMSSE")]
    Rmsse,
    #[serde(rename = "QL")]
    Ql,
    #[serde(rename = "MQL")]
    Mql,
    #[serde(rename = "sMAPC")]
    Smapc,
    #[serde(rename = "QC")]
    Qc,
    #[serde(rename = "MQC")]
    Mqc,
}

impl MetricName {
    pub const ALL: [MetricName; 6] = [
        MetricName::Rmsse,
        MetricName::Ql,
        MetricName::Mql,
        MetricName::Smapc,
        MetricName::Qc,
        MetricName::Mqc,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            MetricName::Rmsse => "RMSSE",
            MetricName::Ql => "QL",
            MetricName::Mql => "MQL",
            MetricName::Smapc => "sMAPC",
            MetricName::Qc => "QC",
            MetricName::Mqc => "MQC",
        }
    }

    pub fn is_stability(&self) -> bool {
        matches!(self, MetricName::Smapc | MetricName::Qc | MetricName::Mqc)
    }
}

impl fmt::Display for MetricName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MetricName {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        MetricName::ALL
            .into_iter()
            .find(|m| m.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Input(format!("unknown metric `{s}`")))
    }
}

fn same_len(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Input(format!(
            "length mismatch: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    Ok(())
}

fn check_level(q: f64) -> Result<()> {
    if q > 0.0 && q < 1.0 {
        Ok(())
    } else {
        Err(Error::Input(format!("quantile level {q} outside (0, 1)")))
    }
}

/// Overlapping targets of two consecutive origins `shift` periods apart:
/// `curr[..h - shift]` and `prev[shift..]`.
pub fn overlap<'a>(curr: &'a [f64], prev: &'a [f64], shift: usize) -> Result<(&'a [f64], &'a [f64])> {
    same_len(curr, prev)?;
    let h = curr.len();
    if shift == 0 || shift >= h {
        return Err(Error::UndefinedMetric(format!(
            "origins {shift} apart share no targets at horizon {h}"
        )));
    }
    Ok((&curr[..h - shift], &prev[shift..]))
}

/// Root mean squared scaled error against the in-sample seasonal naive.
pub fn rmsse(actuals: &[f64], forecasts: &[f64], training: &[f64], season_length: usize) -> Result<f64> {
    same_len(actuals, forecasts)?;
    if actuals.is_empty() {
        return Err(Error::Input("empty forecast window".into()));
    }
    let s = season_length;
    if s == 0 || training.len() <= s {
        return Err(Error::UndefinedMetric(format!(
            "training length {} does not exceed season length {s}",
            training.len()
        )));
    }
    let num = actuals
        .iter()
        .zip(forecasts)
        .map(|(y, f)| (y - f).powi(2))
        .sum::<f64>()
        / actuals.len() as f64;
    let den = training
        .windows(s + 1)
        .map(|w| (w[s] - w[0]).powi(2))
        .sum::<f64>()
        / (training.len() - s) as f64;
    if den == 0.0 {
        return Err(Error::UndefinedMetric(
            "seasonal naive error is zero on the training window".into(),
        ));
    }
    Ok((num / den).sqrt())
}

fn pinball(target: f64, forecast: f64, q: f64) -> f64 {
    if target >= forecast {
        q * (target - forecast)
    } else {
        (1.0 - q) * (forecast - target)
    }
}

pub fn quantile_loss(actuals: &[f64], forecasts: &[f64], q: f64) -> Result<f64> {
    same_len(actuals, forecasts)?;
    check_level(q)?;
    if actuals.is_empty() {
        return Err(Error::Input("empty forecast window".into()));
    }
    let total: f64 = actuals
        .iter()
        .zip(forecasts)
        .map(|(y, f)| pinball(*y, *f, q))
        .sum();
    Ok(total / actuals.len() as f64)
}

pub fn multi_quantile_loss<T: AsRef<[f64]>>(actuals: &[f64], tracks: &[T], levels: &[f64]) -> Result<f64> {
    if tracks.len() != levels.len() {
        return Err(Error::Input(format!(
            "{} quantile tracks for {} levels",
            tracks.len(),
            levels.len()
        )));
    }
    if levels.is_empty() {
        return Err(Error::Input("empty quantile set".into()));
    }
    let mut total = 0.0;
    for (t, &q) in tracks.iter().zip(levels) {
        total += quantile_loss(actuals, t.as_ref(), q)?;
    }
    Ok(total / levels.len() as f64)
}

/// Denominator used in each sMAPC term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SmapcDenominator {
    /// `|a| + |b|`; bounded in `[0, 200]`.
    #[default]
    AbsoluteSum,
    /// `|a| - |b|`, kept for comparison with published figures. Can be
    /// negative and is undefined whenever the magnitudes match.
    AbsoluteDifference,
}

/// Symmetric mean absolute percentage change between overlapping forecasts.
/// A term where both forecasts are zero contributes zero.
pub fn smapc(curr: &[f64], prev: &[f64]) -> Result<f64> {
    smapc_with(curr, prev, SmapcDenominator::AbsoluteSum)
}

pub fn smapc_with(curr: &[f64], prev: &[f64], denominator: SmapcDenominator) -> Result<f64> {
    same_len(curr, prev)?;
    if curr.is_empty() {
        return Err(Error::UndefinedMetric(
            "sMAPC needs a horizon of at least 2".into(),
        ));
    }
    let mut total = 0.0;
    for (a, b) in curr.iter().zip(prev) {
        let num = (a - b).abs();
        let den = match denominator {
            SmapcDenominator::AbsoluteSum => a.abs() + b.abs(),
            SmapcDenominator::AbsoluteDifference => a.abs() - b.abs(),
        };
        if den == 0.0 {
            if num == 0.0 {
                continue;
            }
            return Err(Error::UndefinedMetric(format!(
                "sMAPC term with zero denominator ({a} vs {b})"
            )));
        }
        total += num / den;
    }
    Ok(200.0 * total / curr.len() as f64)
}

/// Pinball-style change of the level-`q` forecasts, with the previous
/// origin's forecasts standing in for the actuals.
pub fn quantile_change(curr: &[f64], prev: &[f64], q: f64) -> Result<f64> {
    same_len(curr, prev)?;
    check_level(q)?;
    if curr.is_empty() {
        return Err(Error::UndefinedMetric("QC needs a horizon of at least 2".into()));
    }
    let total: f64 = curr.iter().zip(prev).map(|(c, p)| pinball(*p, *c, q)).sum();
    Ok(total / curr.len() as f64)
}

pub fn multi_quantile_change<T: AsRef<[f64]>>(curr: &[T], prev: &[T], levels: &[f64]) -> Result<f64> {
    if curr.len() != levels.len() || prev.len() != levels.len() {
        return Err(Error::Input(format!(
            "quantile tracks ({} and {}) do not match {} levels",
            curr.len(),
            prev.len(),
            levels.len()
        )));
    }
    if levels.is_empty() {
        return Err(Error::Input("empty quantile set".into()));
    }
    let mut total = 0.0;
    for ((c, p), &q) in curr.iter().zip(prev).zip(levels) {
        total += quantile_change(c.as_ref(), p.as_ref(), q)?;
    }
    Ok(total / levels.len() as f64)
}

pub fn mean(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Aggregation("cannot average an empty set".into()));
    }
    Ok(values.iter().sum::<f64>() / values.len() as f64)
}

/// Unweighted mean per series, then unweighted mean over series. Series
/// with no values are skipped; an input with no values at all is an error.
pub fn aggregate(per_series: &BTreeMap<SeriesId, Vec<f64>>) -> Result<(BTreeMap<SeriesId, f64>, f64)> {
    let series_means: BTreeMap<SeriesId, f64> = per_series
        .iter()
        .filter(|(_, v)| !v.is_empty())
        .map(|(id, v)| Ok((id.clone(), mean(v)?)))
        .collect::<Result<_>>()?;
    let values: Vec<f64> = series_means.values().copied().collect();
    let overall = mean(&values)?;
    Ok((series_means, overall))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub model: String,
    pub metric: MetricName,
    pub r: usize,
    pub series_id: Option<SeriesId>,
    pub q: Option<f64>,
    pub value: f64,
    pub normalized: Option<f64>,
}

impl MetricRow {
    pub fn overall(model: &str, metric: MetricName, r: usize, value: f64) -> Self {
        MetricRow {
            model: model.to_string(),
            metric,
            r,
            series_id: None,
            q: None,
            value,
            normalized: None,
        }
    }

    fn scope_key(&self) -> (String, MetricName, Option<SeriesId>, Option<u64>) {
        (
            self.model.clone(),
            self.metric,
            self.series_id.clone(),
            self.q.map(f64::to_bits),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricTable {
    pub rows: Vec<MetricRow>,
    pub baseline_r: usize,
}

impl MetricTable {
    pub fn new(baseline_r: usize) -> Self {
        MetricTable {
            rows: Vec::new(),
            baseline_r,
        }
    }

    pub fn push(&mut self, row: MetricRow) -> Result<()> {
        if !row.value.is_finite() || row.value < 0.0 {
            return Err(Error::Input(format!(
                "{} {} r={}: metric value {} is not a finite non-negative number",
                row.model, row.metric, row.r, row.value
            )));
        }
        self.rows.push(row);
        Ok(())
    }

    /// Aggregate (all-series) rows only.
    pub fn overall(&self) -> impl Iterator<Item = &MetricRow> {
        self.rows
            .iter()
            .filter(|r| r.series_id.is_none() && r.q.is_none())
    }

    pub fn overall_value(&self, model: &str, metric: MetricName, r: usize) -> Option<f64> {
        self.overall()
            .find(|row| row.model == model && row.metric == metric && row.r == r)
            .map(|row| row.value)
    }

    pub fn models(&self) -> Vec<String> {
        let mut seen = Vec::new();
        for row in &self.rows {
            if !seen.contains(&row.model) {
                seen.push(row.model.clone());
            }
        }
        seen
    }

    pub fn scenarios(&self) -> Vec<usize> {
        let mut r: Vec<usize> = self.rows.iter().map(|row| row.r).collect();
        r.sort_unstable();
        r.dedup();
        r
    }

    pub fn metrics(&self) -> Vec<MetricName> {
        let mut m: Vec<MetricName> = self.rows.iter().map(|row| row.metric).collect();
        m.sort();
        m.dedup();
        m
    }
}

/// Divides every row by the matching baseline-scenario row of the same
/// scope, so baseline rows become exactly 1. Aggregate rows require a
/// positive baseline; per-series rows with a zero baseline stay
/// unnormalized.
pub fn normalize_to_baseline(table: &MetricTable) -> Result<MetricTable> {
    let (out, mut failures) = normalize_partial(table)?;
    match failures.is_empty() {
        true => Ok(out),
        false => Err(failures.swap_remove(0)),
    }
}

/// Like [`normalize_to_baseline`], but a zero aggregate baseline only fails
/// its own (model, metric): those rows keep no normalized value, the
/// baseline row itself stays 1, and one error per pair is returned
/// alongside the table. A missing baseline row is still fatal.
pub fn normalize_partial(table: &MetricTable) -> Result<(MetricTable, Vec<Error>)> {
    let baselines: BTreeMap<_, f64> = table
        .rows
        .iter()
        .filter(|r| r.r == table.baseline_r)
        .map(|r| (r.scope_key(), r.value))
        .collect();
    let mut out = table.clone();
    let mut failed = BTreeMap::new();
    for row in &mut out.rows {
        let base = baselines.get(&row.scope_key()).copied().ok_or_else(|| {
            Error::Normalization(format!(
                "no baseline r = {} row for {} {}",
                table.baseline_r, row.model, row.metric
            ))
        })?;
        row.normalized = if row.r == table.baseline_r {
            Some(1.0)
        } else if base > 0.0 {
            Some(row.value / base)
        } else {
            if row.series_id.is_none() {
                failed.entry((row.model.clone(), row.metric)).or_insert_with(|| {
                    Error::Normalization(format!("baseline {} for {} is zero", row.metric, row.model))
                });
            }
            None
        };
    }
    Ok((out, failed.into_values().collect()))
}

const TABLE_HEADER: [&str; 7] = ["model", "metric", "r", "series_id", "q", "value", "normalized_value"];

/// Long-format CSV: `model,metric,r,series_id,q,value,normalized_value`.
pub fn write_metric_table<W: Write>(table: &MetricTable, writer: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    wtr.write_record(TABLE_HEADER)?;
    for row in &table.rows {
        wtr.write_record([
            row.model.clone(),
            row.metric.to_string(),
            row.r.to_string(),
            row.series_id.as_ref().map(|s| s.to_string()).unwrap_or_default(),
            row.q.map(|q| q.to_string()).unwrap_or_default(),
            row.value.to_string(),
            row.normalized.map(|v| v.to_string()).unwrap_or_default(),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn read_metric_table<R: Read>(reader: R, baseline_r: usize) -> Result<MetricTable> {
    let mut rdr = csv::Reader::from_reader(reader);
    let headers = rdr.headers()?.clone();
    for (i, name) in TABLE_HEADER.iter().enumerate() {
        if headers.get(i) != Some(*name) {
            return Err(Error::Schema(format!("expected column `{name}` at position {i}")));
        }
    }
    let mut table = MetricTable::new(baseline_r);
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let row = i + 1;
        let bad = |what: &str| Error::Validation(format!("row {row}: bad {what}"));
        let opt = |s: &str| (!s.is_empty()).then(|| s.to_string());
        let parse_f = |s: &str, what: &str| s.parse::<f64>().map_err(|_| bad(what));
        table.push(MetricRow {
            model: rec[0].to_string(),
            metric: rec[1].parse()?,
            r: rec[2].parse().map_err(|_| bad("r"))?,
            series_id: opt(&rec[3]).map(SeriesId::new).transpose()?,
            q: opt(&rec[4]).map(|s| parse_f(&s, "q")).transpose()?,
            value: parse_f(&rec[5], "value")?,
            normalized: opt(&rec[6]).map(|s| parse_f(&s, "normalized_value")).transpose()?,
        })?;
    }
    Ok(table)
}
