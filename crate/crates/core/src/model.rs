//! Reference global models: one parameter vector shared by every series.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{date_at, for_each_row, prefix_sums, Cutoff, FeatureEncoder, FeatureRecipe};
use crate::forecast::{ForecastBlock, ForecastMatrix};
use crate::panel::TimeSeriesPanel;

pub const DEFAULT_RIDGE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelKind {
    PooledLinear { lambda: f64 },
    SeasonalNaive { season_length: usize },
    /// Forecasts produced outside the engine and ingested from CSV.
    External,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GlobalModel {
    pub kind: ModelKind,
    /// Intercept first, then one coefficient per encoder column. Empty for
    /// models without parameters.
    pub coefficients: Vec<f64>,
    pub encoder: Option<FeatureEncoder>,
    pub fitted_at: Cutoff,
}

/// Fits ridge-regularized least squares on the pooled rows of every series.
/// The intercept is not penalized.
pub fn fit_pooled_linear(
    panel: &TimeSeriesPanel,
    encoder: &FeatureEncoder,
    cutoff: Cutoff,
    lambda: f64,
) -> Result<GlobalModel> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::Config(format!("ridge penalty must be non-negative, got {lambda}")));
    }
    let p = encoder.width() + 1;
    let mut xtx = DMatrix::<f64>::zeros(p, p);
    let mut xty = DVector::<f64>::zeros(p);
    let mut x = vec![0.0; p];
    let mut rows = 0usize;
    for_each_row(panel, encoder, cutoff, |_, _, feats, y| {
        x[0] = 1.0;
        x[1..].copy_from_slice(feats);
        for i in 0..p {
            let xi = x[i];
            if xi == 0.0 {
                continue;
            }
            xty[i] += xi * y;
            for j in i..p {
                xtx[(i, j)] += xi * x[j];
            }
        }
        rows += 1;
    })?;
    if rows == 0 {
        return Err(Error::Fit("design table has no rows".into()));
    }
    for i in 0..p {
        for j in 0..i {
            xtx[(i, j)] = xtx[(j, i)];
        }
        if i > 0 {
            xtx[(i, i)] += lambda;
        }
    }
    let beta = solve_symmetric(xtx, xty)?;
    Ok(GlobalModel {
        kind: ModelKind::PooledLinear { lambda },
        coefficients: beta.iter().copied().collect(),
        encoder: Some(encoder.clone()),
        fitted_at: cutoff,
    })
}

fn solve_symmetric(a: DMatrix<f64>, b: DVector<f64>) -> Result<DVector<f64>> {
    if let Some(chol) = a.clone().cholesky() {
        let x = chol.solve(&b);
        if x.iter().all(|v| v.is_finite()) {
            return Ok(x);
        }
    }
    // rank-deficient normal equations: minimum-norm solution
    let svd = a.svd(true, true);
    let tol = svd.singular_values.max() * 1e-12;
    let x = svd
        .solve(&b, tol)
        .map_err(|e| Error::Fit(format!("least-squares solve failed: {e}")))?;
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Fit("non-finite coefficients".into()));
    }
    Ok(x)
}

pub fn fit_seasonal_naive(season_length: usize, cutoff: Cutoff) -> Result<GlobalModel> {
    if season_length == 0 {
        return Err(Error::Config("season length must be positive".into()));
    }
    Ok(GlobalModel {
        kind: ModelKind::SeasonalNaive { season_length },
        coefficients: Vec::new(),
        encoder: None,
        fitted_at: cutoff,
    })
}

/// Convenience wrapper building the encoder from `recipe`.
pub fn fit_pooled_linear_recipe(
    panel: &TimeSeriesPanel,
    recipe: &FeatureRecipe,
    cutoff: Cutoff,
    lambda: f64,
) -> Result<GlobalModel> {
    let encoder = FeatureEncoder::new(panel, recipe)?;
    fit_pooled_linear(panel, &encoder, cutoff, lambda)
}

impl GlobalModel {
    /// Recursive `h`-step forecasts for every series from `origin`.
    ///
    /// Parameters stay as fitted; inputs use every observation before the
    /// origin, and lead `k` feeds the forecasts for leads `1..k` back into
    /// its lag and window features.
    pub fn predict(
        &self,
        panel: &TimeSeriesPanel,
        origin: Cutoff,
        horizon: usize,
    ) -> Result<ForecastMatrix> {
        let mut out = ForecastMatrix::new(horizon, Vec::new())?;
        let mut blocks = BTreeMap::new();
        let freq = panel.frequency();
        for (id, s) in panel.iter() {
            let n = origin.resolve(s.len()).ok_or_else(|| {
                Error::Input(format!(
                    "origin {origin:?} lies beyond the {} observations of series {id}",
                    s.len()
                ))
            })?;
            if n == 0 {
                return Err(Error::Input(format!("series {id}: empty history at origin")));
            }
            let mut history = s.values[..n].to_vec();
            history.reserve(horizon);
            let point = match &self.kind {
                ModelKind::SeasonalNaive { season_length } => {
                    let sl = *season_length;
                    if n < sl {
                        return Err(Error::Input(format!(
                            "series {id}: {n} observations, seasonal naive needs {sl}"
                        )));
                    }
                    for t in n..n + horizon {
                        history.push(history[t - sl]);
                    }
                    history[n..].to_vec()
                }
                ModelKind::PooledLinear { .. } => {
                    let enc = self
                        .encoder
                        .as_ref()
                        .ok_or_else(|| Error::Fit("pooled model without encoder".into()))?;
                    if n < enc.recipe().warmup() {
                        return Err(Error::Input(format!(
                            "series {id}: {n} observations, features need {}",
                            enc.recipe().warmup()
                        )));
                    }
                    let mut prefix = prefix_sums(&history);
                    let mut row = Vec::with_capacity(enc.width());
                    for t in n..n + horizon {
                        row.clear();
                        enc.encode_row(s, &history, &prefix, t, date_at(freq, s, t), &mut row)?;
                        let yhat = self.coefficients[0]
                            + row
                                .iter()
                                .zip(&self.coefficients[1..])
                                .map(|(x, b)| x * b)
                                .sum::<f64>();
                        history.push(yhat);
                        prefix.push(prefix[t] + yhat);
                    }
                    history[n..].to_vec()
                }
                ModelKind::External => {
                    return Err(Error::Input(
                        "external models carry ingested forecasts and cannot predict".into(),
                    ))
                }
            };
            let origin_date = date_at(freq, s, n - 1);
            blocks.insert((id.clone(), origin_date), ForecastBlock::point_only(point));
        }
        for ((id, o), b) in blocks {
            out.insert(id, o, b)?;
        }
        Ok(out)
    }
}
