//! Seeded generator of intermittent, overdispersed demand panels.
//!
//! Series `i` draws from a ChaCha8 stream seeded with `seed` and stream id
//! `i`, so every series is reproducible on its own and generation order
//! does not matter. For each series:
//!
//! 1. level = `base_level * exp(level_jitter * z)`, `z ~ N(0, 1)`;
//!    amplitude = `seasonal_amplitude * U(0.5, 1.5)`; phase ~ `U(0, 2 pi)`.
//! 2. mean at `t`: `level * max(0, 1 + amplitude * sin(2 pi t / s + phase))`.
//! 3. with probability `zero_inflation` the value is 0; otherwise a
//!    negative binomial draw with that mean and variance
//!    `mean + noise_dispersion * mean^2` (gamma-Poisson mixture).

use std::collections::BTreeMap;
use std::f64::consts::PI;

use chrono::NaiveDate;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Poisson, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::panel::{FrequencyProfile, Series, SeriesId, TimeSeriesPanel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n_series: usize,
    pub length: usize,
    pub frequency: FrequencyProfile,
    #[serde(default = "default_zero_inflation")]
    pub zero_inflation: f64,
    #[serde(default = "default_base_level")]
    pub base_level: f64,
    #[serde(default = "default_amplitude")]
    pub seasonal_amplitude: f64,
    #[serde(default = "default_dispersion")]
    pub noise_dispersion: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_jitter")]
    pub level_jitter: f64,
    #[serde(default = "default_start")]
    pub start: NaiveDate,
}

fn default_zero_inflation() -> f64 {
    0.3
}

fn default_base_level() -> f64 {
    5.0
}

fn default_amplitude() -> f64 {
    0.5
}

fn default_dispersion() -> f64 {
    0.5
}

fn default_jitter() -> f64 {
    0.25
}

fn default_start() -> NaiveDate {
    NaiveDate::from_ymd_opt(2020, 1, 6).expect("valid date")
}

impl SynthSpec {
    pub fn new(n_series: usize, length: usize, frequency: FrequencyProfile, seed: u64) -> Self {
        SynthSpec {
            n_series,
            length,
            frequency,
            zero_inflation: default_zero_inflation(),
            base_level: default_base_level(),
            seasonal_amplitude: default_amplitude(),
            noise_dispersion: default_dispersion(),
            seed,
            level_jitter: default_jitter(),
            start: default_start(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("synthetic spec: {m}")));
        if self.n_series == 0 || self.length == 0 {
            return bad("n_series and length must be positive");
        }
        if !(0.0..1.0).contains(&self.zero_inflation) {
            return bad("zero_inflation must lie in [0, 1)");
        }
        if !(self.base_level > 0.0 && self.base_level.is_finite()) {
            return bad("base_level must be positive");
        }
        if !(self.seasonal_amplitude >= 0.0 && self.seasonal_amplitude.is_finite()) {
            return bad("seasonal_amplitude must be non-negative");
        }
        if !(self.noise_dispersion > 0.0 && self.noise_dispersion.is_finite()) {
            return bad("noise_dispersion must be positive");
        }
        if !(self.level_jitter >= 0.0 && self.level_jitter.is_finite()) {
            return bad("level_jitter must be non-negative");
        }
        self.frequency.validate()
    }
}

fn negative_binomial(rng: &mut ChaCha8Rng, mean: f64, dispersion: f64) -> Result<f64> {
    if mean <= 0.0 {
        return Ok(0.0);
    }
    let shape = 1.0 / dispersion;
    let gamma = Gamma::new(shape, mean * dispersion).map_err(|e| Error::Config(e.to_string()))?;
    let lambda: f64 = gamma.sample(rng);
    if lambda <= 0.0 {
        return Ok(0.0);
    }
    let poisson = Poisson::new(lambda).map_err(|e| Error::Config(e.to_string()))?;
    Ok(poisson.sample(rng))
}

fn generate_series(spec: &SynthSpec, index: usize) -> Result<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index as u64);
    let z: f64 = rng.sample(StandardNormal);
    let level = spec.base_level * (spec.level_jitter * z).exp();
    let amplitude = spec.seasonal_amplitude * rng.random_range(0.5..1.5);
    let phase = rng.random_range(0.0..2.0 * PI);
    let s = spec.frequency.season_length as f64;
    (0..spec.length)
        .map(|t| {
            let mean = level * (1.0 + amplitude * (2.0 * PI * t as f64 / s + phase).sin()).max(0.0);
            if rng.random_bool(spec.zero_inflation) {
                Ok(0.0)
            } else {
                negative_binomial(&mut rng, mean, spec.noise_dispersion)
            }
        })
        .collect()
}

pub fn generate(spec: &SynthSpec) -> Result<TimeSeriesPanel> {
    spec.validate()?;
    let width = spec.n_series.to_string().len().max(4);
    let values = (0..spec.n_series)
        .into_par_iter()
        .map(|i| generate_series(spec, i))
        .collect::<Result<Vec<_>>>()?;
    let series: BTreeMap<SeriesId, Series> = values
        .into_iter()
        .enumerate()
        .map(|(i, v)| {
            let id = SeriesId::new(format!("S{i:0width$}")).expect("non-empty id");
            (id, Series::new(spec.start, v))
        })
        .collect();
    TimeSeriesPanel::new(spec.frequency, series)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_panel() {
        let spec = SynthSpec::new(5, 100, FrequencyProfile::daily(), 42);
        assert_eq!(generate(&spec).unwrap(), generate(&spec).unwrap());
        let other = SynthSpec { seed: 43, ..spec.clone() };
        assert_ne!(generate(&spec).unwrap(), generate(&other).unwrap());
    }

    #[test]
    fn heavy_zero_inflation() {
        let spec = SynthSpec {
            zero_inflation: 0.9,
            ..SynthSpec::new(10, 1000, FrequencyProfile::daily(), 7)
        };
        let p = generate(&spec).unwrap();
        let (zeros, total) = p.iter().fold((0usize, 0usize), |(z, n), (_, s)| {
            (z + s.values.iter().filter(|v| **v == 0.0).count(), n + s.len())
        });
        assert_eq!(total, 10_000);
        // expected share >= 0.9; 0.8 is more than 30 binomial standard errors away
        assert!(zeros as f64 / total as f64 >= 0.8, "{zeros}");
    }

    #[test]
    fn degenerate_spec_is_near_constant() {
        let spec = SynthSpec {
            zero_inflation: 0.0,
            base_level: 10_000.0,
            seasonal_amplitude: 0.0,
            noise_dispersion: 1e-9,
            level_jitter: 0.0,
            ..SynthSpec::new(3, 500, FrequencyProfile::daily(), 1)
        };
        for (_, s) in generate(&spec).unwrap().iter() {
            // only Poisson noise remains: sd = 100 = 1% of the level
            let m = s.values.iter().sum::<f64>() / s.len() as f64;
            let sd = (s.values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / s.len() as f64).sqrt();
            assert!((m / 10_000.0 - 1.0).abs() < 0.01, "{m}");
            assert!(sd / 10_000.0 < 0.02, "{sd}");
        }
    }

    #[test]
    fn output_is_count_valued_and_valid() {
        let spec = SynthSpec::new(4, 60, FrequencyProfile::weekly(), 3);
        let p = generate(&spec).unwrap();
        assert_eq!(p.len(), 4);
        for (_, s) in p.iter() {
            assert!(s.values.iter().all(|v| *v >= 0.0 && v.fract() == 0.0));
        }
    }

    #[test]
    fn invalid_specs() {
        let base = SynthSpec::new(1, 10, FrequencyProfile::daily(), 0);
        assert!(generate(&SynthSpec { zero_inflation: 1.0, ..base.clone() }).is_err());
        assert!(generate(&SynthSpec { noise_dispersion: 0.0, ..base.clone() }).is_err());
        assert!(generate(&SynthSpec { n_series: 0, ..base }).is_err());
    }
}
