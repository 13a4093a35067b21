//! Forecast matrices: point and quantile forecasts per (series, origin, lead).

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::panel::SeriesId;

/// Forecasts issued for one series from one origin. `quantiles[j][k]` is
/// the forecast at level `levels[j]` for lead `k + 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastBlock {
    pub point: Vec<f64>,
    pub quantiles: Vec<Vec<f64>>,
}

impl ForecastBlock {
    pub fn point_only(point: Vec<f64>) -> Self {
        ForecastBlock {
            point,
            quantiles: Vec::new(),
        }
    }

    /// Values at every level for one lead (0-based).
    pub fn quantiles_at(&self, lead: usize) -> impl Iterator<Item = f64> + '_ {
        self.quantiles.iter().map(move |t| t[lead])
    }
}

pub type BlockKey = (SeriesId, NaiveDate);

/// Point forecasts and optional quantile tracks keyed by series and origin
/// timestamp (the date of the last training observation).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastMatrix {
    horizon: usize,
    levels: Vec<f64>,
    blocks: BTreeMap<BlockKey, ForecastBlock>,
}

impl ForecastMatrix {
    pub fn new(horizon: usize, levels: Vec<f64>) -> Result<Self> {
        if horizon == 0 {
            return Err(Error::Input("horizon must be positive".into()));
        }
        if levels.windows(2).any(|w| w[0] >= w[1]) || levels.iter().any(|&q| !(q > 0.0 && q < 1.0)) {
            return Err(Error::Input(
                "quantile levels must be strictly increasing inside (0, 1)".into(),
            ));
        }
        Ok(ForecastMatrix {
            horizon,
            levels,
            blocks: BTreeMap::new(),
        })
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn levels(&self) -> &[f64] {
        &self.levels
    }

    pub fn has_quantiles(&self) -> bool {
        !self.levels.is_empty()
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn insert(&mut self, id: SeriesId, origin: NaiveDate, block: ForecastBlock) -> Result<()> {
        if block.point.len() != self.horizon {
            return Err(Error::Completeness(format!(
                "series {id}, origin {origin}: {} point leads, expected {}",
                block.point.len(),
                self.horizon
            )));
        }
        if block.quantiles.len() != self.levels.len()
            || block.quantiles.iter().any(|t| t.len() != self.horizon)
        {
            return Err(Error::Completeness(format!(
                "series {id}, origin {origin}: quantile tracks do not cover every level and lead"
            )));
        }
        if let Some(k) = first_crossing(&block) {
            return Err(Error::Monotonicity(format!(
                "series {id}, origin {origin}: quantile tracks cross at lead {}",
                k + 1
            )));
        }
        self.blocks.insert((id, origin), block);
        Ok(())
    }

    pub fn get(&self, id: &SeriesId, origin: NaiveDate) -> Option<&ForecastBlock> {
        self.blocks.get(&(id.clone(), origin))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&BlockKey, &ForecastBlock)> {
        self.blocks.iter()
    }

    pub fn keys(&self) -> impl Iterator<Item = &BlockKey> {
        self.blocks.keys()
    }

    /// Origins present for one series, ascending.
    pub fn origins_for<'a>(&'a self, id: &'a SeriesId) -> impl Iterator<Item = NaiveDate> + 'a {
        self.blocks
            .range((id.clone(), NaiveDate::MIN)..=(id.clone(), NaiveDate::MAX))
            .map(|((_, o), _)| *o)
    }

    /// Keeps only blocks whose key satisfies `keep`.
    pub fn filtered(&self, mut keep: impl FnMut(&BlockKey) -> bool) -> ForecastMatrix {
        ForecastMatrix {
            horizon: self.horizon,
            levels: self.levels.clone(),
            blocks: self
                .blocks
                .iter()
                .filter(|(k, _)| keep(k))
                .map(|(k, b)| (k.clone(), b.clone()))
                .collect(),
        }
    }

    /// Index of the level equal to `q` within 1e-12.
    pub fn level_index(&self, q: f64) -> Option<usize> {
        self.levels.iter().position(|&l| (l - q).abs() < 1e-12)
    }

    /// Moves every block of `other` into `self`. Both must share horizon and
    /// quantile levels; a key present in both is an error.
    pub fn merge(&mut self, other: ForecastMatrix) -> Result<()> {
        if other.horizon != self.horizon || other.levels != self.levels {
            return Err(Error::Alignment(
                "cannot merge forecast matrices with different horizons or levels".into(),
            ));
        }
        for (key, block) in other.blocks {
            if self.blocks.contains_key(&key) {
                return Err(Error::Alignment(format!(
                    "duplicate block for series {}, origin {}",
                    key.0, key.1
                )));
            }
            self.blocks.insert(key, block);
        }
        Ok(())
    }
}

/// Lead (0-based) of the first non-monotone quantile column, if any.
pub fn first_crossing(block: &ForecastBlock) -> Option<usize> {
    let h = block.point.len();
    (0..h).find(|&k| block.quantiles.windows(2).any(|w| w[0][k] > w[1][k]))
}

/// What to do with quantile tracks that cross.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CrossingPolicy {
    #[default]
    Reject,
    /// Sort values across levels at each lead.
    Sort,
}

/// Column names of the forecast CSV.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ForecastSchema {
    pub model: String,
    pub series_id: String,
    pub origin: String,
    pub lead: String,
    pub value: String,
    pub quantile: String,
}

impl Default for ForecastSchema {
    fn default() -> Self {
        ForecastSchema {
            model: "model".into(),
            series_id: "series_id".into(),
            origin: "origin_timestamp".into(),
            lead: "lead".into(),
            value: "value".into(),
            quantile: "q".into(),
        }
    }
}

#[derive(Default)]
struct RawBlock {
    point: BTreeMap<usize, f64>,
    quantiles: BTreeMap<u64, BTreeMap<usize, f64>>,
}

/// Reads forecasts for one or more models. Point rows leave the quantile
/// column empty (or omit it entirely).
pub fn ingest_external_forecasts(
    path: impl AsRef<Path>,
    schema: &ForecastSchema,
    policy: CrossingPolicy,
) -> Result<BTreeMap<String, ForecastMatrix>> {
    let file = std::fs::File::open(path.as_ref())?;
    read_forecasts(file, schema, policy)
}

pub fn read_forecasts<R: Read>(
    reader: R,
    schema: &ForecastSchema,
    policy: CrossingPolicy,
) -> Result<BTreeMap<String, ForecastMatrix>> {
    let mut rdr = csv::Reader::from_reader(reader);
    let headers = rdr.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Schema(format!("missing column `{name}`")))
    };
    let model_col = col(&schema.model)?;
    let id_col = col(&schema.series_id)?;
    let origin_col = col(&schema.origin)?;
    let lead_col = col(&schema.lead)?;
    let value_col = col(&schema.value)?;
    let q_col = headers.iter().position(|h| h == schema.quantile);

    let mut models: BTreeMap<String, BTreeMap<BlockKey, RawBlock>> = BTreeMap::new();
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 1;
        let rec = rec?;
        let field = |c: usize| rec.get(c).unwrap_or("").trim();
        let model = field(model_col).to_string();
        let id = SeriesId::new(field(id_col))
            .map_err(|_| Error::Validation(format!("row {row}: empty series id")))?;
        let origin = NaiveDate::parse_from_str(field(origin_col), "%Y-%m-%d").map_err(|_| {
            Error::Validation(format!("row {row}: bad origin `{}`", field(origin_col)))
        })?;
        let lead: usize = field(lead_col)
            .parse()
            .ok()
            .filter(|&l| l >= 1)
            .ok_or_else(|| Error::Validation(format!("row {row}: bad lead `{}`", field(lead_col))))?;
        let value: f64 = field(value_col)
            .parse()
            .ok()
            .filter(|v: &f64| v.is_finite())
            .ok_or_else(|| {
                Error::Validation(format!("row {row}: bad value `{}`", field(value_col)))
            })?;
        let q = match q_col.map(field) {
            None | Some("") => None,
            Some(raw) => {
                let q: f64 = raw
                    .parse()
                    .ok()
                    .filter(|q| *q > 0.0 && *q < 1.0)
                    .ok_or_else(|| Error::Validation(format!("row {row}: bad quantile `{raw}`")))?;
                Some(q)
            }
        };
        let block = models.entry(model).or_default().entry((id, origin)).or_default();
        let slot = match q {
            None => block.point.insert(lead, value),
            Some(q) => block.quantiles.entry(q.to_bits()).or_default().insert(lead, value),
        };
        if slot.is_some() {
            return Err(Error::Validation(format!("row {row}: duplicate forecast row")));
        }
    }

    models
        .into_iter()
        .map(|(name, blocks)| assemble(&name, blocks, policy).map(|m| (name, m)))
        .collect()
}

fn assemble(
    model: &str,
    raw: BTreeMap<BlockKey, RawBlock>,
    policy: CrossingPolicy,
) -> Result<ForecastMatrix> {
    let horizon = raw
        .values()
        .flat_map(|b| {
            b.point
                .keys()
                .chain(b.quantiles.values().flat_map(|t| t.keys()))
                .copied()
        })
        .max()
        .unwrap_or(0);
    let mut level_bits: Vec<u64> = raw
        .values()
        .flat_map(|b| b.quantiles.keys().copied())
        .collect();
    level_bits.sort_by(|a, b| f64::from_bits(*a).total_cmp(&f64::from_bits(*b)));
    level_bits.dedup();
    let levels: Vec<f64> = level_bits.iter().map(|b| f64::from_bits(*b)).collect();
    let median = levels.iter().position(|&q| q == 0.5);

    let mut matrix = ForecastMatrix::new(horizon, levels.clone())?;
    for ((id, origin), b) in raw {
        let full = |track: &BTreeMap<usize, f64>| -> Result<Vec<f64>> {
            (1..=horizon)
                .map(|k| {
                    track.get(&k).copied().ok_or_else(|| {
                        Error::Completeness(format!(
                            "model {model}: series {id}, origin {origin} is missing lead {k} of {horizon}"
                        ))
                    })
                })
                .collect()
        };
        let mut quantiles = Vec::with_capacity(levels.len());
        for bits in &level_bits {
            let track = b.quantiles.get(bits).ok_or_else(|| {
                Error::Completeness(format!(
                    "model {model}: series {id}, origin {origin} lacks quantile {}",
                    f64::from_bits(*bits)
                ))
            })?;
            quantiles.push(full(track)?);
        }
        let point = if b.point.is_empty() {
            match median {
                Some(j) => quantiles[j].clone(),
                None => full(&b.point)?,
            }
        } else {
            full(&b.point)?
        };
        let mut block = ForecastBlock { point, quantiles };
        if policy == CrossingPolicy::Sort {
            sort_tracks(&mut block);
        }
        matrix.insert(id, origin, block)?;
    }
    Ok(matrix)
}

/// Rearranges quantile values so every lead is non-decreasing in level.
pub fn sort_tracks(block: &mut ForecastBlock) {
    let h = block.point.len();
    for k in 0..h {
        let mut col: Vec<f64> = block.quantiles.iter().map(|t| t[k]).collect();
        col.sort_by(f64::total_cmp);
        for (t, v) in block.quantiles.iter_mut().zip(col) {
            t[k] = v;
        }
    }
}

/// Writes one or more models in the forecast CSV schema.
pub fn write_forecasts<'a, W: Write>(
    writer: W,
    schema: &ForecastSchema,
    models: impl IntoIterator<Item = (&'a str, &'a ForecastMatrix)>,
) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    wtr.write_record([
        &schema.model,
        &schema.series_id,
        &schema.origin,
        &schema.lead,
        &schema.value,
        &schema.quantile,
    ])?;
    for (name, m) in models {
        for ((id, origin), b) in m.iter() {
            let origin = origin.format("%Y-%m-%d").to_string();
            for k in 0..m.horizon() {
                let lead = (k + 1).to_string();
                wtr.write_record([name, id.as_str(), &origin, &lead, &b.point[k].to_string(), ""])?;
                for (q, t) in m.levels().iter().zip(&b.quantiles) {
                    wtr.write_record([
                        name,
                        id.as_str(),
                        &origin,
                        &lead,
                        &t[k].to_string(),
                        &q.to_string(),
                    ])?;
                }
            }
        }
    }
    wtr.flush()?;
    Ok(())
}
