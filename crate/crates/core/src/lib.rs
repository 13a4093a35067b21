//! Measure how forecasts of global models move between consecutive origins
//! when the model is retrained on different schedules.
//!
//! The crate covers the full evaluation path: panel ingestion, the
//! rolling-origin grid with retrain/reuse plans, reference pooled models,
//! split-conformal quantiles, accuracy and stability metrics, top-k
//! ensembles, Friedman-Nemenyi testing and an orchestrating pipeline that
//! writes result tables and plot data.

pub mod conformal;
pub mod ensemble;
pub mod error;
pub mod features;
pub mod forecast;
pub mod metrics;
pub mod model;
pub mod panel;
pub mod pipeline;
pub mod report;
pub mod schedule;
pub mod stats;
pub mod synth;

pub use error::{Error, Result};
pub use forecast::{ForecastBlock, ForecastMatrix};
pub use metrics::{MetricName, MetricRow, MetricTable};
pub use panel::{FrequencyProfile, SeriesId, TimeSeriesPanel};
pub use pipeline::{RunConfig, RunManifest};
pub use schedule::{EvaluationConfig, OriginGrid, RetrainPlan};
