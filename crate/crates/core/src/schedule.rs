//! Rolling-origin evaluation grid and retrain/reuse plans.
//!
//! An origin `n` is the number of observations available when a forecast is
//! issued: the training window is `values[..n]` and the forecast targets are
//! `values[n..n + h]`. The test window is the last `T` observations, so a
//! series of length `L` has origins `L - T ..= L - h`.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The six central interval levels used to derive the default 13 quantiles.
pub const DEFAULT_CENTRAL_LEVELS: [f64; 6] = [0.60, 0.70, 0.80, 0.90, 0.95, 0.99];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationConfig {
    pub horizon: usize,
    pub test_window: usize,
    #[serde(default = "default_step")]
    pub step: usize,
    pub retrain_windows: Vec<usize>,
    pub baseline_r: usize,
    pub season_length: usize,
    #[serde(default = "default_quantiles")]
    pub quantile_levels: Vec<f64>,
    pub validation_window: usize,
}

fn default_step() -> usize {
    1
}

impl EvaluationConfig {
    /// Daily setting: h = 28, T = 364, baseline r = 7.
    pub fn m5() -> Self {
        EvaluationConfig {
            horizon: 28,
            test_window: 364,
            step: 1,
            retrain_windows: vec![7, 14, 21, 30, 60, 90, 120, 150, 180, 364],
            baseline_r: 7,
            season_length: 7,
            quantile_levels: default_quantiles(),
            validation_window: 56,
        }
    }

    /// Weekly setting: h = 13, T = 52, baseline r = 1.
    pub fn vn1() -> Self {
        EvaluationConfig {
            horizon: 13,
            test_window: 52,
            step: 1,
            retrain_windows: vec![1, 2, 3, 4, 6, 8, 10, 13, 26, 52],
            baseline_r: 1,
            season_length: 52,
            quantile_levels: default_quantiles(),
            validation_window: 26,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.horizon == 0 || self.test_window == 0 || self.step == 0 || self.season_length == 0 {
            return err("horizon, test window, step and season length must be positive".into());
        }
        if self.horizon > self.test_window {
            return err(format!(
                "horizon {} exceeds test window {}",
                self.horizon, self.test_window
            ));
        }
        if self.retrain_windows.is_empty() {
            return err("at least one retraining window is required".into());
        }
        if let Some(r) = self
            .retrain_windows
            .iter()
            .find(|&&r| r < 1 || r > self.test_window)
        {
            return err(format!(
                "retraining window {r} outside 1..={}",
                self.test_window
            ));
        }
        if !self.retrain_windows.contains(&self.baseline_r) {
            return err(format!(
                "baseline r = {} is not among the retraining windows",
                self.baseline_r
            ));
        }
        let mut sorted = self.retrain_windows.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.retrain_windows.len() {
            return err("retraining windows must be distinct".into());
        }
        if self.quantile_levels.is_empty() {
            return err("quantile set must not be empty".into());
        }
        if self
            .quantile_levels
            .iter()
            .any(|&q| !(q > 0.0 && q < 1.0))
        {
            return err("quantile levels must lie in (0, 1)".into());
        }
        if self.quantile_levels.windows(2).any(|w| w[0] >= w[1]) {
            return err("quantile levels must be strictly increasing".into());
        }
        if self.validation_window < 2 * self.horizon {
            return err(format!(
                "validation window {} is shorter than twice the horizon ({})",
                self.validation_window,
                2 * self.horizon
            ));
        }
        Ok(())
    }

    /// Smallest series length that admits the full validation and test grids
    /// with at least `min_train` training observations at the first
    /// validation origin.
    pub fn required_length(&self, min_train: usize) -> usize {
        self.test_window + self.validation_window + min_train.max(1)
    }

    /// The same config with the test window replaced by the validation window,
    /// used to build the calibration grid that precedes the test grid.
    pub fn validation_view(&self) -> EvaluationConfig {
        EvaluationConfig {
            test_window: self.validation_window,
            retrain_windows: self
                .retrain_windows
                .iter()
                .map(|&r| r.min(self.validation_window))
                .collect(),
            ..self.clone()
        }
    }
}

fn default_quantiles() -> Vec<f64> {
    crate::conformal::central_levels_to_quantiles(&DEFAULT_CENTRAL_LEVELS)
        .expect("default central levels are valid")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OriginGrid {
    pub origins: Vec<usize>,
    pub step: usize,
}

impl OriginGrid {
    pub fn len(&self) -> usize {
        self.origins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.origins.is_empty()
    }
}

pub fn build_origin_grid(series_length: usize, config: &EvaluationConfig) -> Result<OriginGrid> {
    let (t, h) = (config.test_window, config.horizon);
    if h == 0 || t < h || config.step == 0 {
        return Err(Error::Config(format!(
            "invalid grid parameters: T = {t}, h = {h}, step = {}",
            config.step
        )));
    }
    if series_length <= t {
        return Err(Error::Config(format!(
            "series of length {series_length} is too short: need more than {t} observations"
        )));
    }
    let first = series_length - t;
    let last = series_length - h;
    Ok(OriginGrid {
        origins: (first..=last).step_by(config.step).collect(),
        step: config.step,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Decision {
    Retrain,
    Reuse,
}

impl Decision {
    pub fn as_str(&self) -> &'static str {
        match self {
            Decision::Retrain => "retrain",
            Decision::Reuse => "reuse",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetrainPlan {
    pub r: usize,
    pub decisions: Vec<Decision>,
}

impl RetrainPlan {
    pub fn retrain_count(&self) -> usize {
        self.decisions
            .iter()
            .filter(|d| **d == Decision::Retrain)
            .count()
    }

    pub fn retrain_positions(&self) -> Vec<usize> {
        self.decisions
            .iter()
            .enumerate()
            .filter(|(_, d)| **d == Decision::Retrain)
            .map(|(k, _)| k)
            .collect()
    }

    /// Grid position of the fit that serves origin position `k`.
    pub fn fitted_at(&self, k: usize) -> usize {
        (0..=k)
            .rev()
            .find(|&j| self.decisions[j] == Decision::Retrain)
            .unwrap_or(0)
    }
}

/// Retrains at the first origin and whenever at least `r` observations have
/// arrived since the last fit. With unit step this is position `k` with
/// `k % r == 0`.
pub fn build_retrain_plan(grid: &OriginGrid, r: usize) -> Result<RetrainPlan> {
    if r < 1 {
        return Err(Error::Config("retraining window must be at least 1".into()));
    }
    let mut decisions = Vec::with_capacity(grid.len());
    let mut last_fit: Option<usize> = None;
    for &n in &grid.origins {
        let d = match last_fit {
            Some(prev) if n - prev < r => Decision::Reuse,
            _ => {
                last_fit = Some(n);
                Decision::Retrain
            }
        };
        decisions.push(d);
    }
    Ok(RetrainPlan { r, decisions })
}

pub fn consecutive_origin_pairs(grid: &OriginGrid) -> Result<Vec<(usize, usize)>> {
    if grid.len() < 2 {
        return Err(Error::Input(
            "stability needs at least two forecast origins".into(),
        ));
    }
    Ok(grid.origins.windows(2).map(|w| (w[0], w[1])).collect())
}

/// Audit table with columns `origin_index,time_index,decision`.
pub fn write_plan_csv<W: Write>(grid: &OriginGrid, plan: &RetrainPlan, writer: W) -> Result<()> {
    if grid.len() != plan.decisions.len() {
        return Err(Error::Input("plan does not match grid".into()));
    }
    let mut wtr = csv::Writer::from_writer(writer);
    wtr.write_record(["origin_index", "time_index", "decision"])?;
    for (k, (n, d)) in grid.origins.iter().zip(&plan.decisions).enumerate() {
        wtr.write_record([k.to_string(), n.to_string(), d.as_str().to_string()])?;
    }
    wtr.flush()?;
    Ok(())
}
