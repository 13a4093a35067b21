//! Split-conformal quantiles around point forecasts.
//!
//! Absolute residuals from validation origins are pooled per lead time. For
//! a central level `c` the half-width is the `ceil((m + 1) c)`-th smallest
//! of the `m` residuals, clamped to the largest residual when that rank
//! exceeds `m`.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forecast::{ForecastBlock, ForecastMatrix};
use crate::panel::{SeriesId, TimeSeriesPanel};

/// Maps central interval levels to the quantile set they imply: the median
/// plus `(1 - c) / 2` and `(1 + c) / 2` for every `c`, ascending. Levels are
/// rounded to 12 decimals so `0.6` yields exactly `0.2` and `0.8`.
pub fn central_levels_to_quantiles(levels: &[f64]) -> Result<Vec<f64>> {
    if let Some(c) = levels.iter().find(|&&c| !(c > 0.0 && c < 1.0)) {
        return Err(Error::Config(format!("central level {c} outside (0, 1)")));
    }
    let round = |x: f64| (x * 1e12).round() / 1e12;
    let mut q = vec![0.5];
    for &c in levels {
        q.push(round((1.0 - c) / 2.0));
        q.push(round((1.0 + c) / 2.0));
    }
    q.sort_by(f64::total_cmp);
    if q.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::Config(
            "central levels produce duplicate quantile levels".into(),
        ));
    }
    Ok(q)
}

/// Half-width for central level `c` from a set of absolute residuals.
/// Returns the width and whether the rank had to be clamped.
pub fn conformal_width(abs_residuals: &[f64], c: f64) -> Result<(f64, bool)> {
    let m = abs_residuals.len();
    if m == 0 {
        return Err(Error::Calibration("no residuals".into()));
    }
    let mut sorted = abs_residuals.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(width_from_sorted(&sorted, c))
}

fn width_from_sorted(sorted: &[f64], c: f64) -> (f64, bool) {
    let m = sorted.len();
    // guard against (m + 1) * c landing a hair above an integer
    let rank = (((m + 1) as f64) * c - 1e-9).ceil().max(1.0) as usize;
    if rank > m {
        (sorted[m - 1], true)
    } else {
        (sorted[rank - 1], false)
    }
}

/// Half-widths per lead (outer) and central level (inner, ascending).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeadWidths {
    pub widths: Vec<Vec<f64>>,
    pub sizes: Vec<usize>,
    pub clamped: usize,
}

impl LeadWidths {
    fn from_residuals(residuals: Vec<Vec<f64>>, levels: &[f64], what: &str) -> Result<Self> {
        let mut widths = Vec::with_capacity(residuals.len());
        let mut sizes = Vec::with_capacity(residuals.len());
        let mut clamped = 0;
        for (k, mut r) in residuals.into_iter().enumerate() {
            if r.is_empty() {
                return Err(Error::Calibration(format!(
                    "{what}: no residuals at lead {}",
                    k + 1
                )));
            }
            r.sort_by(f64::total_cmp);
            let row = levels
                .iter()
                .map(|&c| {
                    let (w, cl) = width_from_sorted(&r, c);
                    clamped += usize::from(cl);
                    w
                })
                .collect();
            widths.push(row);
            sizes.push(r.len());
        }
        Ok(LeadWidths {
            widths,
            sizes,
            clamped,
        })
    }

    pub fn horizon(&self) -> usize {
        self.widths.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResidualPooling {
    /// One residual pool per lead across all series.
    #[default]
    Pooled,
    /// One residual pool per (series, lead).
    PerSeries,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConformalCalibration {
    /// Central levels, ascending.
    pub levels: Vec<f64>,
    pub pooled: LeadWidths,
    /// Filled only under [`ResidualPooling::PerSeries`].
    pub per_series: BTreeMap<SeriesId, LeadWidths>,
}

impl ConformalCalibration {
    /// Residuals used at the least populated lead.
    pub fn calibration_size(&self) -> usize {
        self.pooled.sizes.iter().copied().min().unwrap_or(0)
    }

    pub fn clamped_ranks(&self) -> usize {
        self.pooled.clamped + self.per_series.values().map(|w| w.clamped).sum::<usize>()
    }

    pub fn quantile_levels(&self) -> Result<Vec<f64>> {
        central_levels_to_quantiles(&self.levels)
    }
}

fn sorted_levels(levels: &[f64]) -> Result<Vec<f64>> {
    central_levels_to_quantiles(levels)?;
    let mut l = levels.to_vec();
    l.sort_by(f64::total_cmp);
    Ok(l)
}

/// Learns per-lead half-widths from point forecasts at validation origins.
pub fn calibrate(
    points: &ForecastMatrix,
    panel: &TimeSeriesPanel,
    levels: &[f64],
    pooling: ResidualPooling,
) -> Result<ConformalCalibration> {
    let levels = sorted_levels(levels)?;
    let h = points.horizon();
    let mut pooled = vec![Vec::new(); h];
    let mut by_series: BTreeMap<SeriesId, Vec<Vec<f64>>> = BTreeMap::new();
    for ((id, origin), block) in points.iter() {
        let series = panel
            .get(id)
            .ok_or_else(|| Error::Calibration(format!("series {id} not in panel")))?;
        let n = panel
            .position(id, *origin)
            .ok_or_else(|| Error::Calibration(format!("origin {origin} not on the grid of {id}")))?
            + 1;
        for (k, yhat) in block.point.iter().enumerate() {
            let y = series.values.get(n + k).ok_or_else(|| {
                Error::Calibration(format!(
                    "series {id}, origin {origin}: no actual for lead {}",
                    k + 1
                ))
            })?;
            let r = (y - yhat).abs();
            pooled[k].push(r);
            if pooling == ResidualPooling::PerSeries {
                by_series
                    .entry(id.clone())
                    .or_insert_with(|| vec![Vec::new(); h])[k]
                    .push(r);
            }
        }
    }
    let per_series = by_series
        .into_iter()
        .map(|(id, res)| {
            let w = LeadWidths::from_residuals(res, &levels, &format!("series {id}"))?;
            Ok((id, w))
        })
        .collect::<Result<_>>()?;
    Ok(ConformalCalibration {
        pooled: LeadWidths::from_residuals(pooled, &levels, "pooled")?,
        levels,
        per_series,
    })
}

/// Builds symmetric quantile tracks around each point forecast.
pub fn apply(calibration: &ConformalCalibration, points: &ForecastMatrix) -> Result<ForecastMatrix> {
    let q_levels = calibration.quantile_levels()?;
    let h = points.horizon();
    let n_c = calibration.levels.len();
    let mut out = ForecastMatrix::new(h, q_levels)?;
    for ((id, origin), block) in points.iter() {
        let widths = if calibration.per_series.is_empty() {
            &calibration.pooled
        } else {
            calibration.per_series.get(id).ok_or_else(|| {
                Error::Calibration(format!("no per-series calibration for {id}"))
            })?
        };
        if widths.horizon() < h {
            return Err(Error::Calibration(format!(
                "calibration covers {} leads but forecasts have {h}",
                widths.horizon()
            )));
        }
        // lower bounds from the widest interval inward, the median, then upper bounds
        let mut tracks = vec![vec![0.0; h]; 2 * n_c + 1];
        for (k, &p) in block.point.iter().enumerate().take(h) {
            for (j, &w) in widths.widths[k].iter().enumerate().take(n_c) {
                tracks[n_c - 1 - j][k] = p - w;
                tracks[n_c + 1 + j][k] = p + w;
            }
            tracks[n_c][k] = p;
        }
        out.insert(
            id.clone(),
            *origin,
            ForecastBlock {
                point: block.point.clone(),
                quantiles: tracks,
            },
        )?;
    }
    Ok(out)
}

/// Audit dump with columns `lead,level,width,m` (pooled widths), followed
/// by per-series rows with a `series_id` column when present.
pub fn write_calibration_csv<W: Write>(cal: &ConformalCalibration, writer: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    wtr.write_record(["series_id", "lead", "level", "width", "m"])?;
    let mut dump = |id: &str, w: &LeadWidths| -> Result<()> {
        for (k, row) in w.widths.iter().enumerate() {
            for (c, width) in cal.levels.iter().zip(row) {
                wtr.write_record([
                    id.to_string(),
                    (k + 1).to_string(),
                    c.to_string(),
                    width.to_string(),
                    w.sizes[k].to_string(),
                ])?;
            }
        }
        Ok(())
    };
    dump("", &cal.pooled)?;
    for (id, w) in &cal.per_series {
        dump(id.as_str(), w)?;
    }
    wtr.flush()?;
    Ok(())
}
