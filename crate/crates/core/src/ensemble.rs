//! Top-k simple-average ensembles.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forecast::{ForecastBlock, ForecastMatrix};
use crate::metrics::{MetricName, MetricTable};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelRanking {
    pub metric: MetricName,
    /// Ascending by score; ties broken by model name.
    pub entries: Vec<(String, f64)>,
}

impl ModelRanking {
    pub fn from_scores(metric: MetricName, scores: impl IntoIterator<Item = (String, f64)>) -> Result<Self> {
        let mut entries: Vec<(String, f64)> = scores.into_iter().collect();
        if let Some((m, v)) = entries.iter().find(|(_, v)| !v.is_finite()) {
            return Err(Error::Input(format!("model {m} has non-finite score {v}")));
        }
        entries.sort_by(|a, b| a.1.total_cmp(&b.1).then_with(|| a.0.cmp(&b.0)));
        Ok(ModelRanking { metric, entries })
    }

    pub fn top(&self, k: usize) -> Vec<String> {
        self.entries.iter().take(k).map(|(m, _)| m.clone()).collect()
    }
}

/// Ranks `models` by their aggregate `metric` value at scenario `r`.
pub fn rank_models(table: &MetricTable, models: &[String], metric: MetricName, r: usize) -> Result<ModelRanking> {
    let scores = models
        .iter()
        .map(|m| {
            table
                .overall_value(m, metric, r)
                .map(|v| (m.clone(), v))
                .ok_or_else(|| Error::Input(format!("no {metric} value for model {m} at r = {r}")))
        })
        .collect::<Result<Vec<_>>>()?;
    ModelRanking::from_scores(metric, scores)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnsembleSpec {
    pub name: String,
    pub members: Vec<String>,
}

pub const MIN_MEMBERS: usize = 2;
pub const MAX_MEMBERS: usize = 5;

/// `Ens{k}A` built from the top `k` models of the ranking.
pub fn top_k_spec(ranking: &ModelRanking, k: usize) -> Result<EnsembleSpec> {
    if !(MIN_MEMBERS..=MAX_MEMBERS).contains(&k) {
        return Err(Error::Config(format!(
            "ensemble size {k} outside {MIN_MEMBERS}..={MAX_MEMBERS}"
        )));
    }
    if ranking.entries.len() < k {
        return Err(Error::Config(format!(
            "ensemble of {k} requested but only {} models are ranked",
            ranking.entries.len()
        )));
    }
    Ok(EnsembleSpec {
        name: format!("Ens{k}A"),
        members: ranking.top(k),
    })
}

/// Cell-wise unweighted mean of the members' point forecasts and of each
/// quantile level.
pub fn build_ensemble_forecasts(members: &[&ForecastMatrix], spec: &EnsembleSpec) -> Result<ForecastMatrix> {
    if members.len() != spec.members.len() || members.is_empty() {
        return Err(Error::Alignment(format!(
            "{} expects {} member matrices, got {}",
            spec.name,
            spec.members.len(),
            members.len()
        )));
    }
    let first = members[0];
    for (m, name) in members.iter().zip(&spec.members).skip(1) {
        if m.horizon() != first.horizon() || m.levels() != first.levels() {
            return Err(Error::Alignment(format!(
                "member {name} has a different horizon or quantile set"
            )));
        }
        if let Some((id, o)) = first.keys().find(|(id, o)| m.get(id, *o).is_none()) {
            return Err(Error::Alignment(format!(
                "member {name} lacks series {id}, origin {o}"
            )));
        }
        if let Some((id, o)) = m.keys().find(|(id, o)| first.get(id, *o).is_none()) {
            return Err(Error::Alignment(format!(
                "member {} lacks series {id}, origin {o}",
                spec.members[0]
            )));
        }
    }
    let weight = 1.0 / members.len() as f64;
    let mut out = ForecastMatrix::new(first.horizon(), first.levels().to_vec())?;
    let mut blocks = BTreeMap::new();
    for ((id, origin), b0) in first.iter() {
        let mut point = vec![0.0; b0.point.len()];
        let mut quantiles = vec![vec![0.0; b0.point.len()]; b0.quantiles.len()];
        for m in members {
            let b = m.get(id, *origin).expect("coverage checked above");
            for (acc, v) in point.iter_mut().zip(&b.point) {
                *acc += v;
            }
            for (acc_t, t) in quantiles.iter_mut().zip(&b.quantiles) {
                for (acc, v) in acc_t.iter_mut().zip(t) {
                    *acc += v;
                }
            }
        }
        point.iter_mut().for_each(|v| *v *= weight);
        quantiles.iter_mut().flatten().for_each(|v| *v *= weight);
        blocks.insert((id.clone(), *origin), ForecastBlock { point, quantiles });
    }
    for ((id, o), b) in blocks {
        out.insert(id, o, b)?;
    }
    Ok(out)
}
