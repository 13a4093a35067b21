//! Result tables and plot data.

use std::collections::BTreeMap;
use std::io::Write;
use std::str::FromStr;

use rust_decimal::{Decimal, RoundingStrategy};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{MetricName, MetricRow, MetricTable};

/// JSON schema that every emitted plot-data document satisfies.
pub const PLOT_DATA_SCHEMA: &str = include_str!("../schemas/plot_data.schema.json");

pub const DEFAULT_DECIMALS: u32 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TableLayout {
    /// One row per (method, metric, scenario).
    #[default]
    Long,
    /// One row per (metric, method) and one column per scenario.
    MethodsByScenario,
}

/// Which value the methods-by-scenario layout shows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValueColumn {
    Raw,
    #[default]
    Normalized,
}

/// Rounds half to even at `decimals` places and prints exactly that many.
///
/// The shortest decimal representation of `x` is rounded, so 0.0745 gives
/// 0.074 even though its binary value lies slightly above the midpoint.
pub fn round_half_even(x: f64, decimals: u32) -> String {
    match Decimal::from_str(&format!("{x}")) {
        Ok(d) => {
            let mut r = d.round_dp_with_strategy(decimals, RoundingStrategy::MidpointNearestEven);
            r.rescale(decimals);
            if r.is_zero() {
                r.set_sign_positive(true);
            }
            r.to_string()
        }
        // outside the decimal range: fall back to the float formatter
        Err(_) => format!("{x:.*}", decimals as usize),
    }
}

fn overall_rows(table: &MetricTable) -> Vec<&MetricRow> {
    let mut rows: Vec<&MetricRow> = table.overall().collect();
    rows.sort_by(|a, b| {
        (a.metric, &a.model, a.r).cmp(&(b.metric, &b.model, b.r))
    });
    rows
}

/// Writes the aggregate rows of `table` in the requested layout.
pub fn emit_table<W: Write>(
    table: &MetricTable,
    layout: TableLayout,
    values: ValueColumn,
    decimals: u32,
    writer: W,
) -> Result<()> {
    let rows = overall_rows(table);
    if rows.is_empty() {
        return Err(Error::Input("metric table has no aggregate rows".into()));
    }
    let mut wtr = csv::Writer::from_writer(writer);
    let fmt = |v: Option<f64>| v.map(|x| round_half_even(x, decimals)).unwrap_or_default();
    match layout {
        TableLayout::Long => {
            wtr.write_record(["model", "metric", "r", "value", "normalized_value"])?;
            for row in rows {
                wtr.write_record([
                    row.model.clone(),
                    row.metric.to_string(),
                    row.r.to_string(),
                    fmt(Some(row.value)),
                    fmt(row.normalized),
                ])?;
            }
        }
        TableLayout::MethodsByScenario => {
            let scenarios = table.scenarios();
            let mut header = vec!["metric".to_string(), "method".to_string()];
            header.extend(scenarios.iter().map(|r| format!("r={r}")));
            wtr.write_record(&header)?;
            let mut grid: BTreeMap<(MetricName, &str), BTreeMap<usize, Option<f64>>> = BTreeMap::new();
            for row in rows {
                let v = match values {
                    ValueColumn::Raw => Some(row.value),
                    ValueColumn::Normalized => row.normalized,
                };
                grid.entry((row.metric, row.model.as_str()))
                    .or_default()
                    .insert(row.r, v);
            }
            for ((metric, method), cells) in grid {
                let mut rec = vec![metric.to_string(), method.to_string()];
                rec.extend(
                    scenarios
                        .iter()
                        .map(|r| fmt(cells.get(r).copied().flatten())),
                );
                wtr.write_record(&rec)?;
            }
        }
    }
    wtr.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub r: usize,
    pub value: f64,
    pub normalized: Option<f64>,
}

/// Metric value against the retraining window for one method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityCurve {
    pub method: String,
    pub metric: MetricName,
    pub points: Vec<CurvePoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScatterPoint {
    pub method: String,
    pub r: usize,
    pub accuracy_metric: MetricName,
    pub accuracy: f64,
    pub stability_metric: MetricName,
    pub stability: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlotData {
    pub baseline_r: usize,
    pub scenarios: Vec<usize>,
    pub stability_curves: Vec<StabilityCurve>,
    pub accuracy_vs_stability: Vec<ScatterPoint>,
}

const SCATTER_PAIRS: [(MetricName, MetricName); 2] = [
    (MetricName::Rmsse, MetricName::Smapc),
    (MetricName::Mql, MetricName::Mqc),
];

impl PlotData {
    /// Curves for every (method, metric) and accuracy/stability pairs for
    /// every (method, r) where both metrics exist. Uses aggregate rows only.
    pub fn from_table(table: &MetricTable) -> Self {
        let mut curves: BTreeMap<(&str, MetricName), Vec<CurvePoint>> = BTreeMap::new();
        let mut values: BTreeMap<(&str, usize, MetricName), f64> = BTreeMap::new();
        for row in overall_rows(table) {
            curves
                .entry((row.model.as_str(), row.metric))
                .or_default()
                .push(CurvePoint {
                    r: row.r,
                    value: row.value,
                    normalized: row.normalized,
                });
            values.insert((row.model.as_str(), row.r, row.metric), row.value);
        }
        let stability_curves = curves
            .into_iter()
            .map(|((method, metric), mut points)| {
                points.sort_by_key(|p| p.r);
                StabilityCurve {
                    method: method.to_string(),
                    metric,
                    points,
                }
            })
            .collect();
        let mut keys: Vec<(&str, usize)> = values.keys().map(|(m, r, _)| (*m, *r)).collect();
        keys.dedup();
        let mut scatter = Vec::new();
        for (acc, stab) in SCATTER_PAIRS {
            for &(method, r) in &keys {
                if let (Some(a), Some(s)) = (values.get(&(method, r, acc)), values.get(&(method, r, stab))) {
                    scatter.push(ScatterPoint {
                        method: method.to_string(),
                        r,
                        accuracy_metric: acc,
                        accuracy: *a,
                        stability_metric: stab,
                        stability: *s,
                    });
                }
            }
        }
        PlotData {
            baseline_r: table.baseline_r,
            scenarios: table.scenarios(),
            stability_curves,
            accuracy_vs_stability: scatter,
        }
    }
}
