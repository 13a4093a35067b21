//! Run configuration and the end-to-end evaluation pipeline.
//!
//! Stages run in order and synchronize at barriers: load, validate,
//! forecast (model x scenario cells fan out to a worker pool), external
//! ingestion, metrics, ensembles, normalization, tests and report. Every
//! artifact is rendered in memory and written once all stages succeed.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::time::Instant;

use chrono::NaiveDate;
use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::conformal::{self, ConformalCalibration, ResidualPooling};
use crate::ensemble::{self, EnsembleSpec};
use crate::error::{Error, Result};
use crate::features::{Cutoff, FeatureEncoder, FeatureRecipe};
use crate::forecast::{self, CrossingPolicy, ForecastMatrix, ForecastSchema};
use crate::metrics::{self, MetricName, MetricRow, MetricTable, SmapcDenominator};
use crate::model::{self, GlobalModel, DEFAULT_RIDGE};
use crate::panel::{self, FrequencyProfile, PanelSchema, SeriesId, TimeSeriesPanel};
use crate::report::{self, PlotData, TableLayout, ValueColumn};
use crate::schedule::{self, EvaluationConfig, OriginGrid};
use crate::stats::{self, TestReport};
use crate::synth::{self, SynthSpec};

pub const ENGINE_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Metrics computed for every method and scenario, in output order.
pub const REPORTED_METRICS: [MetricName; 4] =
    [MetricName::Rmsse, MetricName::Mql, MetricName::Smapc, MetricName::Mqc];

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    /// Long-format CSV panel.
    #[serde(default)]
    pub path: Option<PathBuf>,
    /// Synthetic panel generated in memory.
    #[serde(default)]
    pub synth: Option<SynthSpec>,
    /// Required with `path`; ignored for synthetic data.
    #[serde(default)]
    pub frequency: Option<FrequencyProfile>,
    #[serde(default)]
    pub schema: PanelSchema,
    /// Minimum series length; shorter series are dropped. Defaults to the
    /// shortest length that fits the validation and test grids.
    #[serde(default)]
    pub min_length: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BuiltinModel {
    PooledLinear,
    SeasonalNaive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub name: String,
    pub kind: BuiltinModel,
    #[serde(default = "default_ridge")]
    pub lambda: f64,
    /// Defaults to seasonal lags and windows for pooled models.
    #[serde(default)]
    pub recipe: Option<FeatureRecipe>,
    /// Defaults to the evaluation season length.
    #[serde(default)]
    pub season_length: Option<usize>,
}

fn default_ridge() -> f64 {
    DEFAULT_RIDGE
}

/// Forecasts produced elsewhere. Without `r` the same forecasts stand in
/// for every scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExternalSource {
    pub path: PathBuf,
    #[serde(default)]
    pub r: Option<usize>,
    #[serde(default)]
    pub schema: ForecastSchema,
    #[serde(default)]
    pub crossing: CrossingPolicy,
}

/// Unit of the Friedman blocks; treatments are always the scenarios.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Blocking {
    /// One test per method with series as blocks.
    #[default]
    Series,
    /// One test per metric with (series, method) cells as blocks.
    SeriesModel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConformalSettings {
    #[serde(default)]
    pub pooling: ResidualPooling,
    /// Recalibrate at every test retrain event on the validation window
    /// just before it, instead of once before the test window.
    #[serde(default)]
    pub recalibrate_on_retrain: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetConfig,
    pub evaluation: EvaluationConfig,
    #[serde(default)]
    pub models: Vec<ModelSpec>,
    #[serde(default)]
    pub external: Vec<ExternalSource>,
    /// Top-k ensemble sizes, each in 2..=5.
    #[serde(default)]
    pub ensemble_sizes: Vec<usize>,
    #[serde(default = "default_ranking_metric")]
    pub ranking_metric: MetricName,
    /// Scenario used for ranking; defaults to the baseline.
    #[serde(default)]
    pub ranking_r: Option<usize>,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    /// Report no significant pairs when the Friedman test does not reject.
    #[serde(default = "default_true")]
    pub friedman_gate: bool,
    #[serde(default)]
    pub blocking: Blocking,
    #[serde(default)]
    pub conformal: ConformalSettings,
    #[serde(default)]
    pub smapc_denominator: SmapcDenominator,
    #[serde(default = "default_decimals")]
    pub decimals: u32,
    /// Also write forecasts, retrain plans and conformal widths.
    #[serde(default)]
    pub audit: bool,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    /// Worker threads; all cores when absent.
    #[serde(default)]
    pub threads: Option<usize>,
    /// Overrides the seed of a synthetic dataset.
    #[serde(default)]
    pub seed: Option<u64>,
}

fn default_ranking_metric() -> MetricName {
    MetricName::Rmsse
}

fn default_alpha() -> f64 {
    0.05
}

fn default_true() -> bool {
    true
}

fn default_decimals() -> u32 {
    report::DEFAULT_DECIMALS
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("vstab-output")
}

fn resolve(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Reads a TOML config; relative paths resolve against its directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::from_toml_str(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        if let Some(p) = cfg.dataset.path.as_mut() {
            resolve(base, p);
        }
        for ext in &mut cfg.external {
            resolve(base, &mut ext.path);
        }
        resolve(base, &mut cfg.output_dir);
        Ok(cfg)
    }

    /// Central interval levels implied by the symmetric quantile set.
    pub fn central_levels(&self) -> Result<Vec<f64>> {
        let q = &self.evaluation.quantile_levels;
        let levels: Vec<f64> = q
            .iter()
            .filter(|&&x| x > 0.5)
            .map(|&x| ((2.0 * x - 1.0) * 1e12).round() / 1e12)
            .collect();
        let rebuilt = conformal::central_levels_to_quantiles(&levels)
            .map_err(|e| Error::Config(format!("quantile levels: {e}")))?;
        let matches = rebuilt.len() == q.len()
            && rebuilt.iter().zip(q).all(|(a, b)| (a - b).abs() < 1e-9);
        if !matches {
            return Err(Error::Config(
                "quantile levels must contain 0.5 and be symmetric around it".into(),
            ));
        }
        Ok(levels)
    }

    fn ranking_r(&self) -> usize {
        self.ranking_r.unwrap_or(self.evaluation.baseline_r)
    }

    pub fn validate(&self) -> Result<()> {
        let ev = &self.evaluation;
        ev.validate()?;
        if ev.step >= ev.horizon {
            return Err(Error::Config(format!(
                "step {} leaves no overlap between consecutive origins at horizon {}",
                ev.step, ev.horizon
            )));
        }
        self.central_levels()?;
        match (&self.dataset.path, &self.dataset.synth) {
            (Some(p), None) => {
                if !p.is_file() {
                    return Err(Error::Config(format!("dataset {} does not exist", p.display())));
                }
                let freq = self
                    .dataset
                    .frequency
                    .ok_or_else(|| Error::Config("a CSV dataset needs a frequency".into()))?;
                freq.validate()?;
            }
            (None, Some(s)) => s.validate()?,
            _ => {
                return Err(Error::Config(
                    "dataset needs exactly one of `path` and `synth`".into(),
                ))
            }
        }
        if self.models.is_empty() && self.external.is_empty() {
            return Err(Error::Config(
                "at least one model or external forecast source is required".into(),
            ));
        }
        let mut names = BTreeSet::new();
        for m in &self.models {
            if m.name.trim().is_empty() || !names.insert(m.name.as_str()) {
                return Err(Error::Config(format!("model name `{}` is empty or repeated", m.name)));
            }
            if !(m.lambda >= 0.0 && m.lambda.is_finite()) {
                return Err(Error::Config(format!("model {}: lambda must be non-negative", m.name)));
            }
            if m.season_length == Some(0) {
                return Err(Error::Config(format!("model {}: season length must be positive", m.name)));
            }
        }
        for ext in &self.external {
            if !ext.path.is_file() {
                return Err(Error::Config(format!(
                    "external forecasts {} do not exist",
                    ext.path.display()
                )));
            }
            if let Some(r) = ext.r {
                if !ev.retrain_windows.contains(&r) {
                    return Err(Error::Config(format!(
                        "external source {} targets r = {r}, which is not a scenario",
                        ext.path.display()
                    )));
                }
            }
        }
        for &k in &self.ensemble_sizes {
            if !(ensemble::MIN_MEMBERS..=ensemble::MAX_MEMBERS).contains(&k) {
                return Err(Error::Config(format!(
                    "ensemble size {k} outside {}..={}",
                    ensemble::MIN_MEMBERS,
                    ensemble::MAX_MEMBERS
                )));
            }
        }
        // with external sources the method count is known only after ingestion
        let too_big = self.ensemble_sizes.iter().find(|&&k| k > self.models.len());
        if let (true, Some(&k)) = (self.external.is_empty(), too_big) {
            return Err(Error::Config(format!(
                "ensemble size {k} exceeds the {} configured models",
                self.models.len()
            )));
        }
        if !ev.retrain_windows.contains(&self.ranking_r()) {
            return Err(Error::Config(format!(
                "ranking scenario r = {} is not a scenario",
                self.ranking_r()
            )));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::Config(format!("alpha = {} outside (0, 1)", self.alpha)));
        }
        if self.decimals > 12 {
            return Err(Error::Config("at most 12 decimals are supported".into()));
        }
        if self.threads == Some(0) {
            return Err(Error::Config("threads must be positive".into()));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form, ignoring where outputs go and
    /// how many threads compute them.
    pub fn hash(&self) -> Result<String> {
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        c.threads = None;
        let bytes = serde_json::to_vec(&c)?;
        Ok(hex::encode(Sha256::digest(&bytes)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: String,
    pub millis: f64,
    pub rows: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileRecord {
    pub path: String,
    pub sha256: String,
    pub bytes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub engine_version: String,
    pub stages: Vec<StageRecord>,
    pub warnings: Vec<String>,
    pub files: Vec<FileRecord>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

/// Test reports for one metric, serialized as `tests_<metric>.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricTests {
    pub metric: MetricName,
    pub blocking: Blocking,
    pub reports: Vec<MethodTest>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodTest {
    /// Absent when methods are pooled into the blocks.
    pub method: Option<String>,
    pub report: TestReport,
}

/// Series positions of the origins of a grid, as offsets from each
/// series' end, with the plan indices they map to.
struct Schedule {
    grid: OriginGrid,
    offsets: Vec<usize>,
}

impl Schedule {
    fn new(cfg: &EvaluationConfig, shift: usize) -> Result<Self> {
        let reference = cfg.test_window + 1;
        let grid = schedule::build_origin_grid(reference, cfg)?;
        let offsets = grid.origins.iter().map(|n| reference - n + shift).collect();
        Ok(Schedule { grid, offsets })
    }
}

fn origin_date(panel: &TimeSeriesPanel, id: &SeriesId, offset: usize) -> Result<NaiveDate> {
    let len = panel.get(id).map(|s| s.len()).unwrap_or(0);
    let n = len
        .checked_sub(offset)
        .filter(|n| *n > 0)
        .ok_or_else(|| Error::Input(format!("series {id} is too short for offset {offset}")))?;
    panel
        .timestamp(id, n - 1)
        .ok_or_else(|| Error::Input(format!("series {id}: no timestamp at {}", n - 1)))
}

struct Prepared {
    spec: ModelSpec,
    encoder: Option<FeatureEncoder>,
    season_length: usize,
}

impl Prepared {
    fn fit(&self, panel: &TimeSeriesPanel, cutoff: Cutoff) -> Result<GlobalModel> {
        match (&self.spec.kind, &self.encoder) {
            (BuiltinModel::PooledLinear, Some(enc)) => model::fit_pooled_linear(panel, enc, cutoff, self.spec.lambda),
            (BuiltinModel::SeasonalNaive, _) => model::fit_seasonal_naive(self.season_length, cutoff),
            (BuiltinModel::PooledLinear, None) => Err(Error::Fit("pooled model without features".into())),
        }
    }

    /// Point forecasts at every origin of `sched`, refitting per plan.
    fn forecast(&self, panel: &TimeSeriesPanel, sched: &Schedule, r: usize, horizon: usize) -> Result<ForecastMatrix> {
        let plan = schedule::build_retrain_plan(&sched.grid, r)?;
        let mut out = ForecastMatrix::new(horizon, Vec::new())?;
        let mut fitted: Option<GlobalModel> = None;
        for (k, &offset) in sched.offsets.iter().enumerate() {
            let cutoff = Cutoff::FromEnd(offset);
            if plan.decisions[k] == schedule::Decision::Retrain || fitted.is_none() {
                fitted = Some(self.fit(panel, cutoff)?);
            }
            let m = fitted.as_ref().expect("fitted above");
            out.merge(m.predict(panel, cutoff, horizon)?)?;
        }
        Ok(out)
    }
}

struct Cell {
    method: String,
    r: usize,
    forecasts: ForecastMatrix,
    /// One calibration, or one per retrain segment when recalibrating.
    calibrations: Vec<ConformalCalibration>,
}

struct Context<'a> {
    cfg: &'a RunConfig,
    panel: TimeSeriesPanel,
    test: Schedule,
    levels: Vec<f64>,
}

#[derive(Default)]
struct Stages {
    records: Vec<StageRecord>,
}

impl Stages {
    fn run<T>(
        &mut self,
        name: &'static str,
        f: impl FnOnce() -> Result<T>,
        rows: impl FnOnce(&T) -> usize,
    ) -> Result<T> {
        let start = Instant::now();
        let out = f().map_err(|e| e.in_stage(name))?;
        let record = StageRecord {
            stage: name.to_string(),
            millis: start.elapsed().as_secs_f64() * 1e3,
            rows: rows(&out),
        };
        info!("stage {name}: {} rows in {:.1} ms", record.rows, record.millis);
        self.records.push(record);
        Ok(out)
    }
}

fn load_dataset(cfg: &RunConfig) -> Result<TimeSeriesPanel> {
    let ds = &cfg.dataset;
    if let Some(spec) = &ds.synth {
        let mut spec = spec.clone();
        if let Some(seed) = cfg.seed {
            spec.seed = seed;
        }
        return synth::generate(&spec);
    }
    let path = ds
        .path
        .as_ref()
        .ok_or_else(|| Error::Config("dataset has no source".into()))?;
    let freq = ds
        .frequency
        .ok_or_else(|| Error::Config("a CSV dataset needs a frequency".into()))?;
    panel::load_panel(path, &ds.schema, freq)
}

fn prepare_models(cfg: &RunConfig, panel: &TimeSeriesPanel) -> Result<Vec<Prepared>> {
    let s = cfg.evaluation.season_length;
    cfg.models
        .iter()
        .map(|spec| {
            let encoder = match spec.kind {
                BuiltinModel::PooledLinear => {
                    let recipe = spec.recipe.clone().unwrap_or_else(|| FeatureRecipe::seasonal_default(s));
                    recipe.validate(panel)?;
                    Some(FeatureEncoder::new(panel, &recipe)?)
                }
                BuiltinModel::SeasonalNaive => None,
            };
            Ok(Prepared {
                spec: spec.clone(),
                encoder,
                season_length: spec.season_length.unwrap_or(s),
            })
        })
        .collect()
}

/// Shortest training history the models need at the first validation
/// origin.
fn min_train(cfg: &RunConfig) -> usize {
    let s = cfg.evaluation.season_length;
    let model_need = cfg
        .models
        .iter()
        .map(|m| match m.kind {
            BuiltinModel::PooledLinear => {
                m.recipe
                    .clone()
                    .unwrap_or_else(|| FeatureRecipe::seasonal_default(s))
                    .warmup()
                    + 1
            }
            BuiltinModel::SeasonalNaive => m.season_length.unwrap_or(s),
        })
        .max()
        .unwrap_or(1);
    // the in-sample scale of RMSSE needs more than one season
    model_need.max(s + 1)
}

fn required_length(cfg: &RunConfig) -> usize {
    cfg.dataset
        .min_length
        .unwrap_or(0)
        .max(cfg.evaluation.required_length(min_train(cfg)))
}

fn forecast_cells(ctx: &Context, models: &[Prepared]) -> Result<Vec<Cell>> {
    let ev = &ctx.cfg.evaluation;
    let validation_cfg = ev.validation_view();
    let jobs: Vec<(&Prepared, usize, usize)> = models
        .iter()
        .flat_map(|m| {
            ev.retrain_windows
                .iter()
                .zip(&validation_cfg.retrain_windows)
                .map(move |(&r, &rv)| (m, r, rv))
        })
        .collect();
    let calibrate_before = |m: &Prepared, rv: usize, offset: usize| -> Result<ConformalCalibration> {
        let validation = Schedule::new(&validation_cfg, offset)?;
        let points = m.forecast(&ctx.panel, &validation, rv, ev.horizon)?;
        conformal::calibrate(&points, &ctx.panel, &ctx.levels, ctx.cfg.conformal.pooling)
    };
    jobs.into_par_iter()
        .map(|(m, r, rv)| {
            let points = m.forecast(&ctx.panel, &ctx.test, r, ev.horizon)?;
            let (forecasts, calibrations) = if ctx.cfg.conformal.recalibrate_on_retrain {
                let plan = schedule::build_retrain_plan(&ctx.test.grid, r)?;
                let starts = plan.retrain_positions();
                let mut out: Option<ForecastMatrix> = None;
                let mut cals = Vec::with_capacity(starts.len());
                for (i, &k0) in starts.iter().enumerate() {
                    let k1 = starts.get(i + 1).copied().unwrap_or(ctx.test.offsets.len());
                    let cal = calibrate_before(m, rv, ctx.test.offsets[k0])?;
                    let mut keys = BTreeSet::new();
                    for id in ctx.panel.ids() {
                        for &off in &ctx.test.offsets[k0..k1] {
                            keys.insert((id.clone(), origin_date(&ctx.panel, id, off)?));
                        }
                    }
                    let part = conformal::apply(&cal, &points.filtered(|k| keys.contains(k)))?;
                    match out.as_mut() {
                        Some(o) => o.merge(part)?,
                        None => out = Some(part),
                    }
                    cals.push(cal);
                }
                (out.ok_or_else(|| Error::Input("empty test grid".into()))?, cals)
            } else {
                let cal = calibrate_before(m, rv, ev.test_window)?;
                (conformal::apply(&cal, &points)?, vec![cal])
            };
            Ok(Cell {
                method: m.spec.name.clone(),
                r,
                forecasts,
                calibrations,
            })
        })
        .collect()
}

type ForecastSet = BTreeMap<(String, usize), ForecastMatrix>;

fn ingest_external(ctx: &Context, known: &BTreeSet<String>, warnings: &mut Vec<String>) -> Result<ForecastSet> {
    let ev = &ctx.cfg.evaluation;
    let mut out = ForecastSet::new();
    let mut seen: BTreeSet<String> = BTreeSet::new();
    for src in &ctx.cfg.external {
        let models = forecast::ingest_external_forecasts(&src.path, &src.schema, src.crossing)?;
        for (name, matrix) in models {
            if known.contains(&name) {
                return Err(Error::Config(format!(
                    "external model `{name}` collides with a built-in model"
                )));
            }
            if matrix.horizon() != ev.horizon {
                return Err(Error::Alignment(format!(
                    "external model {name} has horizon {}, expected {}",
                    matrix.horizon(),
                    ev.horizon
                )));
            }
            if matrix.has_quantiles() {
                let same = matrix.levels().len() == ctx.levels_q().len()
                    && matrix.levels().iter().zip(ctx.levels_q()).all(|(a, b)| (a - b).abs() < 1e-9);
                if !same {
                    return Err(Error::Alignment(format!(
                        "external model {name} uses quantile levels {:?}, expected {:?}",
                        matrix.levels(),
                        ctx.levels_q()
                    )));
                }
            } else {
                warnings.push(format!(
                    "external model {name} has no quantile forecasts; MQL and MQC are skipped"
                ));
            }
            let mut wanted = BTreeSet::new();
            for id in ctx.panel.ids() {
                for &off in &ctx.test.offsets {
                    let o = origin_date(&ctx.panel, id, off)?;
                    if matrix.get(id, o).is_none() {
                        return Err(Error::Completeness(format!(
                            "external model {name} lacks series {id}, origin {o}"
                        )));
                    }
                    wanted.insert((id.clone(), o));
                }
            }
            let matrix = matrix.filtered(|k| wanted.contains(k));
            let scenarios: Vec<usize> = match src.r {
                Some(r) => vec![r],
                None => ev.retrain_windows.clone(),
            };
            for r in scenarios {
                if out.insert((name.clone(), r), matrix.clone()).is_some() {
                    return Err(Error::Alignment(format!(
                        "external model {name} supplied twice for r = {r}"
                    )));
                }
            }
            seen.insert(name);
        }
    }
    for name in &seen {
        for &r in &ev.retrain_windows {
            if !out.contains_key(&(name.clone(), r)) {
                return Err(Error::Completeness(format!(
                    "external model {name} has no forecasts for r = {r}"
                )));
            }
        }
    }
    Ok(out)
}

impl Context<'_> {
    fn levels_q(&self) -> &[f64] {
        &self.cfg.evaluation.quantile_levels
    }
}

/// Per-series metric values for one method and scenario.
#[derive(Default)]
struct SeriesScores {
    values: BTreeMap<MetricName, BTreeMap<SeriesId, Vec<f64>>>,
    per_quantile: BTreeMap<(MetricName, u64), Vec<f64>>,
}

fn score(ctx: &Context, matrix: &ForecastMatrix, excluded: &BTreeSet<SeriesId>) -> Result<SeriesScores> {
    let ev = &ctx.cfg.evaluation;
    let (h, step) = (ev.horizon, ev.step);
    let levels = matrix.levels();
    let quantiles = matrix.has_quantiles();
    let mut out = SeriesScores::default();
    for (id, s) in ctx.panel.iter() {
        let mut prev: Option<&forecast::ForecastBlock> = None;
        for &off in &ctx.test.offsets {
            let n = s.len() - off;
            let o = origin_date(&ctx.panel, id, off)?;
            let block = matrix
                .get(id, o)
                .ok_or_else(|| Error::Completeness(format!("no forecast for series {id}, origin {o}")))?;
            let actual = &s.values[n..n + h];
            let mut push = |m: MetricName, v: f64| {
                out.values
                    .entry(m)
                    .or_default()
                    .entry(id.clone())
                    .or_default()
                    .push(v)
            };
            if !excluded.contains(id) {
                push(
                    MetricName::Rmsse,
                    metrics::rmsse(actual, &block.point, &s.values[..n], ev.season_length)?,
                );
            }
            if quantiles {
                push(MetricName::Mql, metrics::multi_quantile_loss(actual, &block.quantiles, levels)?);
            }
            if let Some(p) = prev {
                let (c, q) = metrics::overlap(&block.point, &p.point, step)?;
                push(
                    MetricName::Smapc,
                    metrics::smapc_with(c, q, ctx.cfg.smapc_denominator)?,
                );
                if quantiles {
                    let mut curr_t = Vec::with_capacity(levels.len());
                    let mut prev_t = Vec::with_capacity(levels.len());
                    for (ct, pt) in block.quantiles.iter().zip(&p.quantiles) {
                        let (c, q) = metrics::overlap(ct, pt, step)?;
                        curr_t.push(c);
                        prev_t.push(q);
                    }
                    push(MetricName::Mqc, metrics::multi_quantile_change(&curr_t, &prev_t, levels)?);
                    for (j, &lvl) in levels.iter().enumerate() {
                        out.per_quantile
                            .entry((MetricName::Qc, lvl.to_bits()))
                            .or_default()
                            .push(metrics::quantile_change(curr_t[j], prev_t[j], lvl)?);
                    }
                }
            }
            if quantiles {
                for (j, &lvl) in levels.iter().enumerate() {
                    out.per_quantile
                        .entry((MetricName::Ql, lvl.to_bits()))
                        .or_default()
                        .push(metrics::quantile_loss(actual, &block.quantiles[j], lvl)?);
                }
            }
            prev = Some(block);
        }
    }
    Ok(out)
}

/// Per-series and aggregate rows. Per-quantile rows are averaged over
/// every (series, origin) cell, which equals the mean of series means since
/// each series contributes the same number of cells.
fn score_rows(method: &str, r: usize, scores: SeriesScores) -> Result<Vec<MetricRow>> {
    let mut rows = Vec::new();
    for (metric, per_series) in scores.values {
        let (means, overall) = metrics::aggregate(&per_series)?;
        for (id, v) in means {
            rows.push(MetricRow {
                series_id: Some(id),
                ..MetricRow::overall(method, metric, r, v)
            });
        }
        rows.push(MetricRow::overall(method, metric, r, overall));
    }
    for ((metric, bits), vals) in scores.per_quantile {
        rows.push(MetricRow {
            q: Some(f64::from_bits(bits)),
            ..MetricRow::overall(method, metric, r, metrics::mean(&vals)?)
        });
    }
    Ok(rows)
}

fn score_all(ctx: &Context, set: &ForecastSet, excluded: &BTreeSet<SeriesId>) -> Result<Vec<MetricRow>> {
    let parts = set
        .par_iter()
        .map(|((method, r), m)| score_rows(method, *r, score(ctx, m, excluded)?))
        .collect::<Result<Vec<_>>>()?;
    Ok(parts.into_iter().flatten().collect())
}

/// Series whose in-sample scale is zero at some test origin.
fn rmsse_exclusions(ctx: &Context) -> BTreeSet<SeriesId> {
    let s = ctx.cfg.evaluation.season_length;
    ctx.panel
        .iter()
        .filter(|(_, series)| {
            ctx.test.offsets.iter().any(|&off| {
                let train = &series.values[..series.len() - off];
                train.len() <= s || train.windows(s + 1).all(|w| w[s] == w[0])
            })
        })
        .map(|(id, _)| id.clone())
        .collect()
}

fn build_ensembles(
    cfg: &RunConfig,
    table: &MetricTable,
    set: &ForecastSet,
    methods: &[String],
) -> Result<(Vec<EnsembleSpec>, ForecastSet)> {
    let mut specs = Vec::new();
    let mut out = ForecastSet::new();
    if cfg.ensemble_sizes.is_empty() {
        return Ok((specs, out));
    }
    let ranking = ensemble::rank_models(table, methods, cfg.ranking_metric, cfg.ranking_r())?;
    for &k in &cfg.ensemble_sizes {
        if k > ranking.entries.len() {
            return Err(Error::Config(format!(
                "ensemble size {k} exceeds the {} ranked methods",
                ranking.entries.len()
            )));
        }
        let spec = ensemble::top_k_spec(&ranking, k)?;
        if methods.contains(&spec.name) {
            return Err(Error::Config(format!("ensemble name {} collides with a model", spec.name)));
        }
        for &r in &cfg.evaluation.retrain_windows {
            let members = spec
                .members
                .iter()
                .map(|m| {
                    set.get(&(m.clone(), r))
                        .ok_or_else(|| Error::Alignment(format!("no forecasts for {m} at r = {r}")))
                })
                .collect::<Result<Vec<_>>>()?;
            out.insert((spec.name.clone(), r), ensemble::build_ensemble_forecasts(&members, &spec)?);
        }
        info!("{} = {:?}", spec.name, spec.members);
        specs.push(spec);
    }
    Ok((specs, out))
}

fn scenario_label(r: usize) -> String {
    format!("r={r}")
}

/// Per-series values of `metric` for `method`, one column per scenario;
/// series missing any scenario are left out.
fn block_rows(table: &MetricTable, metric: MetricName, method: &str, scenarios: &[usize]) -> Vec<Vec<f64>> {
    let mut by_series: BTreeMap<&SeriesId, BTreeMap<usize, f64>> = BTreeMap::new();
    for row in &table.rows {
        if row.metric == metric && row.model == method && row.q.is_none() {
            if let Some(id) = &row.series_id {
                by_series.entry(id).or_default().insert(row.r, row.value);
            }
        }
    }
    by_series
        .into_values()
        .filter_map(|cells| scenarios.iter().map(|r| cells.get(r).copied()).collect())
        .collect()
}

fn run_tests(cfg: &RunConfig, table: &MetricTable, warnings: &mut Vec<String>) -> Result<Vec<MetricTests>> {
    let scenarios = table.scenarios();
    let labels: Vec<String> = scenarios.iter().map(|&r| scenario_label(r)).collect();
    let k = scenarios.len();
    if !(2..=stats::MAX_TREATMENTS).contains(&k) {
        warnings.push(format!(
            "significance tests skipped: {k} scenarios, tests need 2..={}",
            stats::MAX_TREATMENTS
        ));
        return Ok(Vec::new());
    }
    let methods = table.models();
    let mut out = Vec::new();
    for metric in REPORTED_METRICS {
        let mut groups: Vec<(Option<String>, Vec<Vec<f64>>)> = Vec::new();
        match cfg.blocking {
            Blocking::Series => {
                for m in &methods {
                    groups.push((Some(m.clone()), block_rows(table, metric, m, &scenarios)));
                }
            }
            Blocking::SeriesModel => {
                let rows = methods
                    .iter()
                    .flat_map(|m| block_rows(table, metric, m, &scenarios))
                    .collect();
                groups.push((None, rows));
            }
        }
        let mut reports = Vec::new();
        for (method, rows) in groups {
            if rows.len() < 2 {
                if !rows.is_empty() || metric_present(table, metric, method.as_deref()) {
                    warnings.push(format!(
                        "{metric} test for {} skipped: {} complete blocks",
                        method.as_deref().unwrap_or("all methods"),
                        rows.len()
                    ));
                }
                continue;
            }
            let report = stats::friedman_nemenyi(&rows, &labels, true, cfg.alpha, cfg.friedman_gate)?;
            reports.push(MethodTest { method, report });
        }
        if !reports.is_empty() {
            out.push(MetricTests {
                metric,
                blocking: cfg.blocking,
                reports,
            });
        }
    }
    Ok(out)
}

fn metric_present(table: &MetricTable, metric: MetricName, method: Option<&str>) -> bool {
    table
        .overall()
        .any(|r| r.metric == metric && method.is_none_or(|m| r.model == m))
}

fn pairwise_csv(tests: &MetricTests) -> Result<Vec<u8>> {
    let mut wtr = csv::Writer::from_writer(Vec::new());
    if let Some(first) = tests.reports.first() {
        let mut header = vec!["method".to_string(), "treatment".to_string()];
        header.extend(first.report.treatments.iter().cloned());
        wtr.write_record(&header)?;
    }
    for t in &tests.reports {
        let method = t.method.clone().unwrap_or_else(|| "all".into());
        for (label, row) in t.report.treatments.iter().zip(&t.report.significant) {
            let mut rec = vec![method.clone(), label.clone()];
            rec.extend(row.iter().map(|s| u8::from(*s).to_string()));
            wtr.write_record(&rec)?;
        }
    }
    wtr.into_inner()
        .map_err(|e| Error::Io(e.into_error()))
}

fn json_bytes<T: Serialize>(value: &T) -> Result<Vec<u8>> {
    let mut v = serde_json::to_vec_pretty(value)?;
    v.push(b'\n');
    Ok(v)
}

fn csv_bytes(f: impl FnOnce(&mut Vec<u8>) -> Result<()>) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    f(&mut buf)?;
    Ok(buf)
}

/// What a run would see after loading and filtering, without forecasting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Preflight {
    pub loaded: panel::PanelSummary,
    pub retained: panel::PanelSummary,
    pub required_length: usize,
    pub cells: usize,
}

/// Validates the config, loads the dataset and applies the length filter.
pub fn preflight(cfg: &RunConfig) -> Result<Preflight> {
    cfg.validate().map_err(|e| e.in_stage("validate"))?;
    let raw = load_dataset(cfg).map_err(|e| e.in_stage("load"))?;
    let required = required_length(cfg);
    let panel = panel::filter_min_length(&raw, required).map_err(|e| e.in_stage("filter"))?;
    prepare_models(cfg, &panel).map_err(|e| e.in_stage("filter"))?;
    Ok(Preflight {
        loaded: panel::summarize(&raw)?,
        retained: panel::summarize(&panel)?,
        required_length: required,
        cells: cfg.models.len() * cfg.evaluation.retrain_windows.len(),
    })
}

/// Files produced by a successful run, rendered but not yet written.
#[derive(Debug, Clone, PartialEq)]
pub struct RunArtifacts {
    pub files: Vec<(String, Vec<u8>)>,
    pub manifest: RunManifest,
}

/// Executes every stage and renders the artifacts in memory.
pub fn execute(cfg: &RunConfig) -> Result<RunArtifacts> {
    cfg.validate().map_err(|e| e.in_stage("validate"))?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads.unwrap_or(0))
        .build()
        .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))?;
    pool.install(|| execute_stages(cfg))
}

fn execute_stages(cfg: &RunConfig) -> Result<RunArtifacts> {
    let ev = &cfg.evaluation;
    let mut stages = Stages::default();
    let mut warnings = Vec::new();

    let raw = stages.run("load", || load_dataset(cfg), |p| p.iter().map(|(_, s)| s.len()).sum())?;

    let required = required_length(cfg);
    let (panel, models) = stages.run(
        "filter",
        || {
            let panel = panel::filter_min_length(&raw, required)?;
            let models = prepare_models(cfg, &panel)?;
            Ok((panel, models))
        },
        |(p, _)| p.len(),
    )?;
    let dropped = raw.len() - panel.len();
    drop(raw);
    if dropped > 0 {
        warnings.push(format!("{dropped} series shorter than {required} observations excluded"));
    }

    let ctx = Context {
        cfg,
        test: Schedule::new(ev, 0).map_err(|e| e.in_stage("filter"))?,
        levels: cfg.central_levels()?,
        panel,
    };

    let cells = stages.run("forecast", || forecast_cells(&ctx, &models), Vec::len)?;
    let mut set = ForecastSet::new();
    let mut calibrations = Vec::new();
    for c in cells {
        let clamped: usize = c.calibrations.iter().map(|cal| cal.clamped_ranks()).sum();
        if clamped > 0 {
            warnings.push(format!(
                "{} r={}: {clamped} conformal ranks clamped to the largest residual",
                c.method, c.r
            ));
        }
        calibrations.push((c.method.clone(), c.r, c.calibrations));
        set.insert((c.method, c.r), c.forecasts);
    }

    let builtin: BTreeSet<String> = cfg.models.iter().map(|m| m.name.clone()).collect();
    let external = stages.run(
        "external",
        || ingest_external(&ctx, &builtin, &mut warnings),
        BTreeMap::len,
    )?;
    set.extend(external);
    let mut methods: Vec<String> = set.keys().map(|(m, _)| m.clone()).collect();
    methods.dedup();

    let excluded = rmsse_exclusions(&ctx);
    for id in &excluded {
        warnings.push(format!("series {id} excluded from RMSSE: zero in-sample seasonal error"));
    }
    let mut table = MetricTable::new(ev.baseline_r);
    stages.run(
        "metrics",
        || {
            for row in score_all(&ctx, &set, &excluded)? {
                table.push(row)?;
            }
            Ok(table.rows.len())
        },
        |n| *n,
    )?;

    let ensembles = stages.run(
        "ensemble",
        || {
            let (specs, ens) = build_ensembles(cfg, &table, &set, &methods)?;
            for row in score_all(&ctx, &ens, &excluded)? {
                table.push(row)?;
            }
            set.extend(ens);
            Ok(specs)
        },
        Vec::len,
    )?;

    let normalized = stages.run(
        "normalize",
        || {
            let (t, failures) = metrics::normalize_partial(&table)?;
            warnings.extend(failures.iter().map(|e| format!("{e}; its scenarios stay unnormalized")));
            Ok(t)
        },
        |t| t.rows.len(),
    )?;

    let tests = stages.run("tests", || run_tests(cfg, &normalized, &mut warnings), Vec::len)?;

    let files = stages.run(
        "report",
        || {
            let mut files = vec![
                (
                    "metrics_raw.csv".to_string(),
                    csv_bytes(|b| metrics::write_metric_table(&normalized, b))?,
                ),
                (
                    "metrics_long.csv".to_string(),
                    csv_bytes(|b| report::emit_table(&normalized, TableLayout::Long, ValueColumn::Raw, cfg.decimals, b))?,
                ),
                (
                    "metrics_normalized.csv".to_string(),
                    csv_bytes(|b| {
                        report::emit_table(
                            &normalized,
                            TableLayout::MethodsByScenario,
                            ValueColumn::Normalized,
                            cfg.decimals,
                            b,
                        )
                    })?,
                ),
                ("plot_data.json".to_string(), json_bytes(&PlotData::from_table(&normalized))?),
                ("ensembles.json".to_string(), json_bytes(&ensembles)?),
            ];
            for t in &tests {
                files.push((format!("tests_{}.json", t.metric), json_bytes(t)?));
                files.push((format!("pairwise_{}.csv", t.metric), pairwise_csv(t)?));
            }
            if cfg.audit {
                for &r in &ev.retrain_windows {
                    let plan = schedule::build_retrain_plan(&ctx.test.grid, r)?;
                    files.push((
                        format!("plan_r{r}.csv"),
                        csv_bytes(|b| schedule::write_plan_csv(&ctx.test.grid, &plan, b))?,
                    ));
                    let models = set
                        .iter()
                        .filter(|((_, rr), _)| *rr == r)
                        .map(|((m, _), f)| (m.as_str(), f));
                    files.push((
                        format!("forecasts_r{r}.csv"),
                        csv_bytes(|b| forecast::write_forecasts(b, &ForecastSchema::default(), models))?,
                    ));
                }
                for (method, r, cals) in &calibrations {
                    for (i, cal) in cals.iter().enumerate() {
                        let suffix = if cals.len() > 1 { format!("_seg{i}") } else { String::new() };
                        files.push((
                            format!("calibration_{}_r{r}{suffix}.csv", sanitize(method)),
                            csv_bytes(|b| conformal::write_calibration_csv(cal, b))?,
                        ));
                    }
                }
            }
            Ok(files)
        },
        Vec::len,
    )?;

    for w in &warnings {
        warn!("{w}");
    }
    let manifest = RunManifest {
        config_hash: cfg.hash()?,
        engine_version: ENGINE_VERSION.to_string(),
        stages: stages.records,
        warnings,
        files: files
            .iter()
            .map(|(name, bytes)| FileRecord {
                path: name.clone(),
                sha256: hex::encode(Sha256::digest(bytes)),
                bytes: bytes.len(),
            })
            .collect(),
    };
    Ok(RunArtifacts { files, manifest })
}

fn sanitize(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

/// Writes artifacts and the manifest into `dir`. Files written before a
/// failure are removed again.
pub fn write_artifacts(artifacts: &RunArtifacts, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut written: Vec<PathBuf> = Vec::new();
    let result = (|| -> Result<()> {
        for (name, bytes) in &artifacts.files {
            let path = dir.join(name);
            std::fs::write(&path, bytes)?;
            written.push(path);
        }
        let path = dir.join(MANIFEST_FILE);
        std::fs::write(&path, json_bytes(&artifacts.manifest)?)?;
        written.push(path);
        Ok(())
    })();
    if result.is_err() {
        for p in &written {
            let _ = std::fs::remove_file(p);
        }
    }
    result.map_err(|e| e.in_stage("write"))
}

/// Runs the pipeline and writes every artifact to the configured output
/// directory.
pub fn run(cfg: &RunConfig) -> Result<RunManifest> {
    let artifacts = execute(cfg)?;
    write_artifacts(&artifacts, &cfg.output_dir)?;
    Ok(artifacts.manifest)
}
