//! Multi-series panel: data model, CSV ingestion, validation, filtering.
//!
//! A panel holds contiguous, equally spaced series. Each series is stored as
//! a start date plus a dense value vector, so interior gaps are impossible by
//! construction; the loader rejects inputs that have them.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;

use chrono::{Duration, NaiveDate};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const DATE_FORMAT: &str = "%Y-%m-%d";

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct SeriesId(String);

impl SeriesId {
    pub fn new(id: impl Into<String>) -> Result<Self> {
        let id = id.into();
        if id.is_empty() {
            return Err(Error::Validation("series id must be non-empty".into()));
        }
        Ok(SeriesId(id))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl TryFrom<String> for SeriesId {
    type Error = Error;
    fn try_from(value: String) -> Result<Self> {
        SeriesId::new(value)
    }
}

impl From<SeriesId> for String {
    fn from(id: SeriesId) -> String {
        id.0
    }
}

impl fmt::Display for SeriesId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FrequencyLabel {
    Daily,
    Weekly,
    Custom,
}

impl fmt::Display for FrequencyLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            FrequencyLabel::Daily => "daily",
            FrequencyLabel::Weekly => "weekly",
            FrequencyLabel::Custom => "custom",
        };
        f.write_str(s)
    }
}

/// Sampling frequency of a panel.
///
/// `step_days` is the calendar spacing between consecutive observations:
/// 1 for daily and 7 for weekly data. In config files a bare `"daily"` or
/// `"weekly"` expands to the full profile.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "FrequencyConfig")]
pub struct FrequencyProfile {
    pub label: FrequencyLabel,
    pub season_length: usize,
    pub periods_per_year: usize,
    pub step_days: u32,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum FrequencyConfig {
    Label(FrequencyLabel),
    Full {
        label: FrequencyLabel,
        season_length: usize,
        periods_per_year: usize,
        step_days: u32,
    },
}

impl TryFrom<FrequencyConfig> for FrequencyProfile {
    type Error = Error;
    fn try_from(c: FrequencyConfig) -> Result<Self> {
        let f = match c {
            FrequencyConfig::Label(label) => FrequencyProfile::from_label(label).ok_or_else(|| {
                Error::Config("custom frequency needs season_length, periods_per_year and step_days".into())
            })?,
            FrequencyConfig::Full {
                label,
                season_length,
                periods_per_year,
                step_days,
            } => FrequencyProfile {
                label,
                season_length,
                periods_per_year,
                step_days,
            },
        };
        f.validate()?;
        Ok(f)
    }
}

impl FrequencyProfile {
    pub fn daily() -> Self {
        FrequencyProfile {
            label: FrequencyLabel::Daily,
            season_length: 7,
            periods_per_year: 365,
            step_days: 1,
        }
    }

    pub fn weekly() -> Self {
        FrequencyProfile {
            label: FrequencyLabel::Weekly,
            season_length: 52,
            periods_per_year: 52,
            step_days: 7,
        }
    }

    pub fn custom(season_length: usize, periods_per_year: usize, step_days: u32) -> Result<Self> {
        let f = FrequencyProfile {
            label: FrequencyLabel::Custom,
            season_length,
            periods_per_year,
            step_days,
        };
        f.validate()?;
        Ok(f)
    }

    pub fn from_label(label: FrequencyLabel) -> Option<Self> {
        match label {
            FrequencyLabel::Daily => Some(Self::daily()),
            FrequencyLabel::Weekly => Some(Self::weekly()),
            FrequencyLabel::Custom => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.season_length == 0 || self.periods_per_year == 0 || self.step_days == 0 {
            return Err(Error::Config(
                "season length, periods per year and step must all be positive".into(),
            ));
        }
        match self.label {
            FrequencyLabel::Daily if self.season_length != 7 || self.step_days != 1 => Err(
                Error::Config("daily frequency requires season length 7 and a 1-day step".into()),
            ),
            FrequencyLabel::Weekly if self.season_length != 52 || self.step_days != 7 => Err(
                Error::Config("weekly frequency requires season length 52 and a 7-day step".into()),
            ),
            _ => Ok(()),
        }
    }

    pub fn step(&self) -> Duration {
        Duration::days(i64::from(self.step_days))
    }
}

/// One contiguous series with optional exogenous columns and static attributes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Series {
    pub start: NaiveDate,
    pub values: Vec<f64>,
    #[serde(default)]
    pub exogenous: BTreeMap<String, Vec<f64>>,
    #[serde(default)]
    pub attributes: BTreeMap<String, String>,
}

impl Series {
    pub fn new(start: NaiveDate, values: Vec<f64>) -> Self {
        Series {
            start,
            values,
            exogenous: BTreeMap::new(),
            attributes: BTreeMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeSeriesPanel {
    frequency: FrequencyProfile,
    series: BTreeMap<SeriesId, Series>,
}

impl TimeSeriesPanel {
    /// Builds a panel, checking finiteness and column alignment.
    pub fn new(frequency: FrequencyProfile, series: BTreeMap<SeriesId, Series>) -> Result<Self> {
        frequency.validate()?;
        for (id, s) in &series {
            if let Some(i) = s.values.iter().position(|v| !v.is_finite()) {
                return Err(Error::Validation(format!(
                    "series {id}: non-finite value at position {i}"
                )));
            }
            for (name, col) in &s.exogenous {
                if col.len() != s.values.len() {
                    return Err(Error::Validation(format!(
                        "series {id}: exogenous column `{name}` has length {} but target has {}",
                        col.len(),
                        s.values.len()
                    )));
                }
                if let Some(i) = col.iter().position(|v| !v.is_finite()) {
                    return Err(Error::Validation(format!(
                        "series {id}: non-finite exogenous `{name}` at position {i}"
                    )));
                }
            }
        }
        Ok(TimeSeriesPanel { frequency, series })
    }

    pub fn frequency(&self) -> &FrequencyProfile {
        &self.frequency
    }

    pub fn len(&self) -> usize {
        self.series.len()
    }

    pub fn is_empty(&self) -> bool {
        self.series.is_empty()
    }

    pub fn get(&self, id: &SeriesId) -> Option<&Series> {
        self.series.get(id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&SeriesId, &Series)> {
        self.series.iter()
    }

    pub fn ids(&self) -> impl Iterator<Item = &SeriesId> {
        self.series.keys()
    }

    pub fn timestamp(&self, id: &SeriesId, position: usize) -> Option<NaiveDate> {
        let s = self.series.get(id)?;
        Some(s.start + self.frequency.step() * position as i32)
    }

    /// Index of `date` inside series `id`, if the date lies on its grid.
    /// Dates past the end are allowed (future target dates).
    pub fn position(&self, id: &SeriesId, date: NaiveDate) -> Option<usize> {
        let s = self.series.get(id)?;
        let days = (date - s.start).num_days();
        let step = i64::from(self.frequency.step_days);
        if days < 0 || days % step != 0 {
            return None;
        }
        Some((days / step) as usize)
    }

    /// Names of exogenous columns present on every series.
    pub fn exogenous_columns(&self) -> BTreeSet<String> {
        let mut it = self.series.values();
        let Some(first) = it.next() else {
            return BTreeSet::new();
        };
        let mut cols: BTreeSet<String> = first.exogenous.keys().cloned().collect();
        for s in it {
            cols.retain(|c| s.exogenous.contains_key(c));
        }
        cols
    }

    pub fn attribute_columns(&self) -> BTreeSet<String> {
        let mut it = self.series.values();
        let Some(first) = it.next() else {
            return BTreeSet::new();
        };
        let mut cols: BTreeSet<String> = first.attributes.keys().cloned().collect();
        for s in it {
            cols.retain(|c| s.attributes.contains_key(c));
        }
        cols
    }

    pub fn into_series(self) -> BTreeMap<SeriesId, Series> {
        self.series
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PanelSummary {
    pub n_series: usize,
    pub min_length: usize,
    pub max_length: usize,
    pub frequency: FrequencyLabel,
}

/// Column-name mapping for the long-format CSV.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct PanelSchema {
    pub series_id: String,
    pub timestamp: String,
    pub value: String,
    pub exogenous: Vec<String>,
    pub static_columns: Vec<String>,
}

impl Default for PanelSchema {
    fn default() -> Self {
        PanelSchema {
            series_id: "series_id".into(),
            timestamp: "timestamp".into(),
            value: "value".into(),
            exogenous: Vec::new(),
            static_columns: Vec::new(),
        }
    }
}

fn column_index(headers: &csv::StringRecord, name: &str) -> Result<usize> {
    headers
        .iter()
        .position(|h| h == name)
        .ok_or_else(|| Error::Schema(format!("missing column `{name}`")))
}

fn parse_finite(raw: &str, what: &str, row: usize) -> Result<f64> {
    let v: f64 = raw
        .trim()
        .parse()
        .map_err(|_| Error::Validation(format!("row {row}: cannot parse {what} `{raw}`")))?;
    if !v.is_finite() {
        return Err(Error::Validation(format!("row {row}: non-finite {what} `{raw}`")));
    }
    Ok(v)
}

struct RawRow {
    date: NaiveDate,
    value: f64,
    exogenous: Vec<f64>,
    attributes: Vec<String>,
    row: usize,
}

pub fn load_panel(
    path: impl AsRef<Path>,
    schema: &PanelSchema,
    frequency: FrequencyProfile,
) -> Result<TimeSeriesPanel> {
    let file = std::fs::File::open(path.as_ref())?;
    read_panel(file, schema, frequency)
}

/// Reads a long-format panel. Row numbers in errors are 1-based data rows
/// (the header is not counted).
pub fn read_panel<R: Read>(
    reader: R,
    schema: &PanelSchema,
    frequency: FrequencyProfile,
) -> Result<TimeSeriesPanel> {
    frequency.validate()?;
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let id_col = column_index(&headers, &schema.series_id)?;
    let ts_col = column_index(&headers, &schema.timestamp)?;
    let val_col = column_index(&headers, &schema.value)?;
    let exo_cols = schema
        .exogenous
        .iter()
        .map(|c| column_index(&headers, c))
        .collect::<Result<Vec<_>>>()?;
    let static_cols = schema
        .static_columns
        .iter()
        .map(|c| column_index(&headers, c))
        .collect::<Result<Vec<_>>>()?;

    let mut grouped: BTreeMap<SeriesId, Vec<RawRow>> = BTreeMap::new();
    for (i, record) in rdr.records().enumerate() {
        let row = i + 1;
        let record = record?;
        let field = |c: usize| record.get(c).unwrap_or("");
        let id = SeriesId::new(field(id_col).trim())
            .map_err(|_| Error::Validation(format!("row {row}: empty series id")))?;
        let raw_ts = field(ts_col).trim();
        let date = NaiveDate::parse_from_str(raw_ts, DATE_FORMAT)
            .map_err(|_| Error::Validation(format!("row {row}: cannot parse timestamp `{raw_ts}`")))?;
        let value = parse_finite(field(val_col), "value", row)?;
        let exogenous = exo_cols
            .iter()
            .zip(&schema.exogenous)
            .map(|(&c, name)| parse_finite(field(c), name, row))
            .collect::<Result<Vec<_>>>()?;
        let attributes = static_cols.iter().map(|&c| field(c).to_string()).collect();
        grouped.entry(id).or_default().push(RawRow {
            date,
            value,
            exogenous,
            attributes,
            row,
        });
    }
    if grouped.is_empty() {
        return Err(Error::EmptyPanel("input contains no rows".into()));
    }

    let step = frequency.step();
    let mut series = BTreeMap::new();
    for (id, mut rows) in grouped {
        rows.sort_by_key(|r| r.date);
        for pair in rows.windows(2) {
            if pair[0].date == pair[1].date {
                return Err(Error::Validation(format!(
                    "duplicate timestamp {} for series \"{id}\" (rows {} and {})",
                    pair[0].date, pair[0].row, pair[1].row
                )));
            }
            if pair[1].date - pair[0].date != step {
                return Err(Error::Validation(format!(
                    "series \"{id}\": gap between {} and {} (expected spacing of {} days)",
                    pair[0].date, pair[1].date, frequency.step_days
                )));
            }
        }
        let mut s = Series::new(rows[0].date, rows.iter().map(|r| r.value).collect());
        for (j, name) in schema.exogenous.iter().enumerate() {
            s.exogenous
                .insert(name.clone(), rows.iter().map(|r| r.exogenous[j]).collect());
        }
        for (j, name) in schema.static_columns.iter().enumerate() {
            let first = &rows[0].attributes[j];
            if let Some(r) = rows.iter().find(|r| &r.attributes[j] != first) {
                return Err(Error::Validation(format!(
                    "series \"{id}\": static column `{name}` changes value at row {}",
                    r.row
                )));
            }
            s.attributes.insert(name.clone(), first.clone());
        }
        series.insert(id, s);
    }
    TimeSeriesPanel::new(frequency, series)
}

/// Writes a panel in the same long-format schema it can be read back from.
/// Values use the shortest representation that parses back to the same f64.
pub fn write_panel<W: Write>(panel: &TimeSeriesPanel, schema: &PanelSchema, writer: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    let mut header = vec![
        schema.series_id.as_str(),
        schema.timestamp.as_str(),
        schema.value.as_str(),
    ];
    header.extend(schema.exogenous.iter().map(String::as_str));
    header.extend(schema.static_columns.iter().map(String::as_str));
    wtr.write_record(&header)?;
    for (id, s) in panel.iter() {
        for (i, v) in s.values.iter().enumerate() {
            let date = s.start + panel.frequency.step() * i as i32;
            let mut rec = vec![
                id.to_string(),
                date.format(DATE_FORMAT).to_string(),
                v.to_string(),
            ];
            for name in &schema.exogenous {
                let col = s
                    .exogenous
                    .get(name)
                    .ok_or_else(|| Error::Schema(format!("series {id} lacks exogenous `{name}`")))?;
                rec.push(col[i].to_string());
            }
            for name in &schema.static_columns {
                let a = s
                    .attributes
                    .get(name)
                    .ok_or_else(|| Error::Schema(format!("series {id} lacks static `{name}`")))?;
                rec.push(a.clone());
            }
            wtr.write_record(&rec)?;
        }
    }
    wtr.flush()?;
    Ok(())
}

/// Keeps exactly the series with at least `min_obs` observations.
pub fn filter_min_length(panel: &TimeSeriesPanel, min_obs: usize) -> Result<TimeSeriesPanel> {
    if min_obs < 1 {
        return Err(Error::Config("min_obs must be at least 1".into()));
    }
    let series: BTreeMap<_, _> = panel
        .series
        .iter()
        .filter(|(_, s)| s.len() >= min_obs)
        .map(|(id, s)| (id.clone(), s.clone()))
        .collect();
    if series.is_empty() {
        return Err(Error::EmptyPanel(format!(
            "no series has at least {min_obs} observations"
        )));
    }
    Ok(TimeSeriesPanel {
        frequency: panel.frequency,
        series,
    })
}

pub fn summarize(panel: &TimeSeriesPanel) -> Result<PanelSummary> {
    let lengths = panel.series.values().map(Series::len);
    let min_length = lengths.clone().min().ok_or_else(|| Error::EmptyPanel("cannot summarize".into()))?;
    let max_length = lengths.max().unwrap_or(min_length);
    Ok(PanelSummary {
        n_series: panel.len(),
        min_length,
        max_length,
        frequency: panel.frequency.label,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn d(s: &str) -> NaiveDate {
        NaiveDate::parse_from_str(s, DATE_FORMAT).unwrap()
    }

    fn panel_of(lengths: &[(&str, usize)]) -> TimeSeriesPanel {
        let series = lengths
            .iter()
            .map(|(id, n)| {
                (
                    SeriesId::new(*id).unwrap(),
                    Series::new(d("2020-01-01"), (0..*n).map(|i| i as f64).collect()),
                )
            })
            .collect();
        TimeSeriesPanel::new(FrequencyProfile::daily(), series).unwrap()
    }

    #[test]
    fn three_row_file_loads_one_series() {
        let csv = "series_id,timestamp,value\nA,2020-01-01,1\nA,2020-01-02,2\nA,2020-01-03,3\n";
        let p = read_panel(csv.as_bytes(), &PanelSchema::default(), FrequencyProfile::daily()).unwrap();
        assert_eq!(p.len(), 1);
        let s = p.get(&SeriesId::new("A").unwrap()).unwrap();
        assert_eq!(s.values, vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn rows_are_sorted_by_timestamp() {
        let csv = "series_id,timestamp,value\nA,2020-01-03,3\nA,2020-01-01,1\nA,2020-01-02,2\n";
        let p = read_panel(csv.as_bytes(), &PanelSchema::default(), FrequencyProfile::daily()).unwrap();
        assert_eq!(p.get(&SeriesId::new("A").unwrap()).unwrap().values, vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn duplicate_timestamp_names_series() {
        let csv = "series_id,timestamp,value\nA,2020-01-01,1\nA,2020-01-01,2\n";
        let err = read_panel(csv.as_bytes(), &PanelSchema::default(), FrequencyProfile::daily())
            .unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
        assert!(err.to_string().contains("\"A\""), "{err}");
    }

    #[test]
    fn missing_column_is_named() {
        let csv = "id,timestamp,value\nA,2020-01-01,1\n";
        let err = read_panel(csv.as_bytes(), &PanelSchema::default(), FrequencyProfile::daily())
            .unwrap_err();
        assert!(matches!(err, Error::Schema(ref m) if m.contains("series_id")));
    }

    #[test]
    fn non_finite_value_reports_row() {
        let csv = "series_id,timestamp,value\nA,2020-01-01,1\nA,2020-01-02,NaN\n";
        let err = read_panel(csv.as_bytes(), &PanelSchema::default(), FrequencyProfile::daily())
            .unwrap_err();
        assert!(err.to_string().contains("row 2"), "{err}");
    }

    #[test]
    fn interior_gap_is_rejected() {
        let csv = "series_id,timestamp,value\nA,2020-01-01,1\nA,2020-01-03,2\n";
        let err = read_panel(csv.as_bytes(), &PanelSchema::default(), FrequencyProfile::daily())
            .unwrap_err();
        assert!(err.to_string().contains("gap"), "{err}");
    }

    #[test]
    fn weekly_spacing_is_enforced() {
        let ok = "series_id,timestamp,value\nA,2024-01-01,1\nA,2024-01-08,2\n";
        assert!(read_panel(ok.as_bytes(), &PanelSchema::default(), FrequencyProfile::weekly()).is_ok());
        let bad = "series_id,timestamp,value\nA,2024-01-01,1\nA,2024-01-02,2\n";
        assert!(read_panel(bad.as_bytes(), &PanelSchema::default(), FrequencyProfile::weekly()).is_err());
    }

    #[test]
    fn exogenous_and_static_columns_attach() {
        let csv = "sku,date,sales,price,store\nA,2020-01-01,1,2.5,s1\nA,2020-01-02,2,2.0,s1\n";
        let schema = PanelSchema {
            series_id: "sku".into(),
            timestamp: "date".into(),
            value: "sales".into(),
            exogenous: vec!["price".into()],
            static_columns: vec!["store".into()],
        };
        let p = read_panel(csv.as_bytes(), &schema, FrequencyProfile::daily()).unwrap();
        let s = p.get(&SeriesId::new("A").unwrap()).unwrap();
        assert_eq!(s.exogenous["price"], vec![2.5, 2.0]);
        assert_eq!(s.attributes["store"], "s1");
    }

    #[test]
    fn changing_static_value_is_rejected() {
        let csv = "series_id,timestamp,value,store\nA,2020-01-01,1,s1\nA,2020-01-02,2,s2\n";
        let schema = PanelSchema {
            static_columns: vec!["store".into()],
            ..PanelSchema::default()
        };
        assert!(read_panel(csv.as_bytes(), &schema, FrequencyProfile::daily()).is_err());
    }

    #[test]
    fn filter_keeps_series_at_threshold() {
        let p = panel_of(&[("A", 730), ("B", 729)]);
        let f = filter_min_length(&p, 730).unwrap();
        assert_eq!(f.ids().map(|i| i.as_str()).collect::<Vec<_>>(), vec!["A"]);

        let p = panel_of(&[("A", 157), ("B", 156)]);
        let f = filter_min_length(&p, 157).unwrap();
        assert_eq!(f.ids().map(|i| i.as_str()).collect::<Vec<_>>(), vec!["A"]);
    }

    #[test]
    fn filter_with_one_is_identity() {
        let p = panel_of(&[("A", 3), ("B", 5)]);
        assert_eq!(filter_min_length(&p, 1).unwrap(), p);
    }

    #[test]
    fn filter_to_nothing_errors() {
        let p = panel_of(&[("A", 3)]);
        assert!(matches!(filter_min_length(&p, 4), Err(Error::EmptyPanel(_))));
        assert!(matches!(filter_min_length(&p, 0), Err(Error::Config(_))));
    }

    #[test]
    fn summary_counts() {
        let s = summarize(&panel_of(&[("A", 3), ("B", 5)])).unwrap();
        assert_eq!((s.n_series, s.min_length, s.max_length), (2, 3, 5));

        let series = [(
            SeriesId::new("C").unwrap(),
            Series::new(d("2020-01-01"), vec![4.0; 10]),
        )]
        .into_iter()
        .collect();
        let p = TimeSeriesPanel::new(FrequencyProfile::daily(), series).unwrap();
        let s = summarize(&p).unwrap();
        assert_eq!((s.n_series, s.min_length, s.max_length), (1, 10, 10));
    }

    #[test]
    fn frequency_invariants() {
        assert!(FrequencyProfile::custom(0, 12, 30).is_err());
        let mut f = FrequencyProfile::daily();
        f.season_length = 5;
        assert!(f.validate().is_err());
    }

    #[test]
    fn position_maps_dates_to_indices() {
        let p = panel_of(&[("A", 5)]);
        let id = SeriesId::new("A").unwrap();
        assert_eq!(p.position(&id, d("2020-01-04")), Some(3));
        assert_eq!(p.position(&id, d("2019-12-31")), None);
        assert_eq!(p.timestamp(&id, 3), Some(d("2020-01-04")));
    }
}
