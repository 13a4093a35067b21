//! Feature engineering for pooled global models.
//!
//! Every feature for target index `t` only looks at history strictly before
//! `t` (lags, rolling and expanding means) or at information known in
//! advance (calendar, static attributes, exogenous columns).

use std::collections::{BTreeMap, BTreeSet};

use chrono::{Datelike, NaiveDate};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::panel::{FrequencyProfile, Series, SeriesId, TimeSeriesPanel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CalendarFeature {
    /// Calendar year as a number.
    Year,
    /// Month, one-hot with January as the reference level.
    Month,
    /// ISO week number as a number.
    Week,
    /// Day of week, one-hot with Monday as the reference level.
    DayOfWeek,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct FeatureRecipe {
    pub lags: Vec<usize>,
    pub rolling_mean_windows: Vec<usize>,
    pub expanding_mean: bool,
    pub calendar: BTreeSet<CalendarFeature>,
    pub static_columns: Vec<String>,
    pub external_columns: Vec<String>,
}

impl FeatureRecipe {
    /// Lags `1..=s`, rolling means over `s` and `2s`, and an expanding mean.
    pub fn seasonal_default(season_length: usize) -> Self {
        FeatureRecipe {
            lags: (1..=season_length).collect(),
            rolling_mean_windows: vec![season_length, 2 * season_length],
            expanding_mean: true,
            ..Default::default()
        }
    }

    /// Smallest target index with every feature defined.
    pub fn warmup(&self) -> usize {
        let lag = self.lags.iter().copied().max().unwrap_or(0);
        let win = self.rolling_mean_windows.iter().copied().max().unwrap_or(0);
        lag.max(win).max(usize::from(self.expanding_mean))
    }

    pub fn validate(&self, panel: &TimeSeriesPanel) -> Result<()> {
        if self.lags.contains(&0) || self.rolling_mean_windows.contains(&0) {
            return Err(Error::Config("lags and windows must be at least 1".into()));
        }
        let statics = panel.attribute_columns();
        if let Some(c) = self.static_columns.iter().find(|c| !statics.contains(*c)) {
            return Err(Error::Schema(format!("static column `{c}` not present in panel")));
        }
        let exo = panel.exogenous_columns();
        if let Some(c) = self.external_columns.iter().find(|c| !exo.contains(*c)) {
            return Err(Error::Schema(format!("exogenous column `{c}` not present in panel")));
        }
        Ok(())
    }
}

/// Categorical levels seen when the encoder was built. Kept fixed for the
/// lifetime of a model so reused parameters always see the same columns.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureEncoder {
    recipe: FeatureRecipe,
    static_levels: BTreeMap<String, Vec<String>>,
    columns: Vec<String>,
}

impl FeatureEncoder {
    pub fn new(panel: &TimeSeriesPanel, recipe: &FeatureRecipe) -> Result<Self> {
        recipe.validate(panel)?;
        let mut static_levels = BTreeMap::new();
        for c in &recipe.static_columns {
            let levels: BTreeSet<String> = panel
                .iter()
                .filter_map(|(_, s)| s.attributes.get(c).cloned())
                .collect();
            static_levels.insert(c.clone(), levels.into_iter().collect::<Vec<_>>());
        }
        let mut columns = Vec::new();
        columns.extend(recipe.lags.iter().map(|l| format!("lag_{l}")));
        columns.extend(recipe.rolling_mean_windows.iter().map(|w| format!("rolling_mean_{w}")));
        if recipe.expanding_mean {
            columns.push("expanding_mean".into());
        }
        for cal in &recipe.calendar {
            match cal {
                CalendarFeature::Year => columns.push("year".into()),
                CalendarFeature::Week => columns.push("week".into()),
                CalendarFeature::Month => columns.extend((2..=12).map(|m| format!("month_{m}"))),
                CalendarFeature::DayOfWeek => columns.extend((1..7).map(|d| format!("dow_{d}"))),
            }
        }
        for c in &recipe.static_columns {
            for level in static_levels[c].iter().skip(1) {
                columns.push(format!("{c}={level}"));
            }
        }
        columns.extend(recipe.external_columns.iter().map(|c| format!("ext_{c}")));
        Ok(FeatureEncoder {
            recipe: recipe.clone(),
            static_levels,
            columns,
        })
    }

    pub fn recipe(&self) -> &FeatureRecipe {
        &self.recipe
    }

    pub fn columns(&self) -> &[String] {
        &self.columns
    }

    pub fn width(&self) -> usize {
        self.columns.len()
    }

    /// Appends the features for target index `t` to `out`. `history` must
    /// hold at least `t` values; entries at or after `t` are ignored.
    pub(crate) fn encode_row(
        &self,
        series: &Series,
        history: &[f64],
        prefix: &[f64],
        t: usize,
        date: NaiveDate,
        out: &mut Vec<f64>,
    ) -> Result<()> {
        let r = &self.recipe;
        for &l in &r.lags {
            out.push(history[t - l]);
        }
        for &w in &r.rolling_mean_windows {
            out.push(history[t - w..t].iter().sum::<f64>() / w as f64);
        }
        if r.expanding_mean {
            out.push(prefix[t] / t as f64);
        }
        for cal in &r.calendar {
            match cal {
                CalendarFeature::Year => out.push(f64::from(date.year())),
                CalendarFeature::Week => out.push(f64::from(date.iso_week().week())),
                CalendarFeature::Month => {
                    let m = date.month();
                    out.extend((2..=12).map(|j| f64::from(u8::from(j == m))));
                }
                CalendarFeature::DayOfWeek => {
                    let d = date.weekday().num_days_from_monday();
                    out.extend((1..7).map(|j| f64::from(u8::from(j == d))));
                }
            }
        }
        for c in &r.static_columns {
            let value = series.attributes.get(c);
            for level in self.static_levels[c].iter().skip(1) {
                out.push(f64::from(u8::from(value == Some(level))));
            }
        }
        for c in &r.external_columns {
            let col = series
                .exogenous
                .get(c)
                .ok_or_else(|| Error::Schema(format!("exogenous column `{c}` missing")))?;
            let v = col.get(t).ok_or_else(|| {
                Error::Input(format!(
                    "exogenous column `{c}` has no value at index {t} (length {})",
                    col.len()
                ))
            })?;
            out.push(*v);
        }
        Ok(())
    }
}

pub(crate) fn prefix_sums(values: &[f64]) -> Vec<f64> {
    let mut p = Vec::with_capacity(values.len() + 1);
    p.push(0.0);
    let mut acc = 0.0;
    for v in values {
        acc += v;
        p.push(acc);
    }
    p
}

/// Where the training data of each series ends.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Cutoff {
    /// The first `n` observations of every series.
    Origin(usize),
    /// Every series minus its last `k` observations; series are aligned at
    /// their end.
    FromEnd(usize),
}

impl Cutoff {
    pub fn resolve(&self, len: usize) -> Option<usize> {
        match *self {
            Cutoff::Origin(n) => (n <= len).then_some(n),
            Cutoff::FromEnd(k) => len.checked_sub(k),
        }
    }
}

/// Pooled training rows across all series.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignTable {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
    pub targets: Vec<f64>,
    pub keys: Vec<(SeriesId, usize)>,
}

impl DesignTable {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

pub(crate) fn date_at(freq: &FrequencyProfile, series: &Series, t: usize) -> NaiveDate {
    series.start + freq.step() * t as i32
}

/// Calls `f(series_id, row_features, target)` for every defined training row.
pub(crate) fn for_each_row(
    panel: &TimeSeriesPanel,
    encoder: &FeatureEncoder,
    cutoff: Cutoff,
    mut f: impl FnMut(&SeriesId, usize, &[f64], f64),
) -> Result<()> {
    let warmup = encoder.recipe().warmup();
    let mut row = Vec::with_capacity(encoder.width());
    for (id, s) in panel.iter() {
        let Some(n) = cutoff.resolve(s.len()) else {
            continue;
        };
        let prefix = prefix_sums(&s.values[..n]);
        for t in warmup..n {
            row.clear();
            encoder.encode_row(s, &s.values, &prefix, t, date_at(panel.frequency(), s, t), &mut row)?;
            f(id, t, &row, s.values[t]);
        }
    }
    Ok(())
}

/// Materializes the pooled design table for all targets before the cutoff.
/// Rows whose lags or windows reach before the start of a series are dropped.
pub fn build_features(
    panel: &TimeSeriesPanel,
    recipe: &FeatureRecipe,
    cutoff: Cutoff,
) -> Result<DesignTable> {
    let encoder = FeatureEncoder::new(panel, recipe)?;
    let mut table = DesignTable {
        columns: encoder.columns().to_vec(),
        rows: Vec::new(),
        targets: Vec::new(),
        keys: Vec::new(),
    };
    for_each_row(panel, &encoder, cutoff, |id, t, row, y| {
        table.rows.push(row.to_vec());
        table.targets.push(y);
        table.keys.push((id.clone(), t));
    })?;
    Ok(table)
}
