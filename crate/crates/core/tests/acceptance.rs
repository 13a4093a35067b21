//! Acceptance suite: one PASS/FAIL line per criterion, then a single
//! assertion that all of them passed.

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use chrono::NaiveDate;
use proptest::prelude::*;
use proptest::test_runner::{Config as PropConfig, TestCaseError, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use vstab_core::conformal::{self, ResidualPooling};
use vstab_core::ensemble::{rank_models, top_k_spec};
use vstab_core::forecast::first_crossing;
use vstab_core::metrics::{self, normalize_to_baseline, MetricName, MetricRow, MetricTable};
use vstab_core::panel::Series;
use vstab_core::pipeline::{self, RunConfig, MANIFEST_FILE};
use vstab_core::schedule::{
    build_origin_grid, build_retrain_plan, consecutive_origin_pairs, EvaluationConfig, DEFAULT_CENTRAL_LEVELS,
};
use vstab_core::stats::{friedman_nemenyi, friedman_test, rank_blocks};
use vstab_core::{ForecastBlock, ForecastMatrix, FrequencyProfile, SeriesId, TimeSeriesPanel};

type Outcome = Result<(), String>;

fn check(cond: bool, msg: impl FnOnce() -> String) -> Outcome {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn close(got: f64, want: f64, rel: f64, what: &str) -> Outcome {
    let err = (got - want).abs() / want.abs().max(f64::MIN_POSITIVE);
    check(err <= rel, || format!("{what}: got {got}, want {want} (rel err {err:e})"))
}

fn ok<T, E: std::fmt::Display>(r: Result<T, E>) -> Result<T, String> {
    r.map_err(|e| e.to_string())
}

fn sid(s: &str) -> SeriesId {
    SeriesId::new(s).unwrap()
}

fn metric_exactness() -> Outcome {
    let start = Instant::now();
    let tol = 1e-9;
    close(ok(metrics::rmsse(&[5.0, 7.0], &[5.0, 5.0], &[1.0, 2.0, 3.0, 4.0], 1))?, 2f64.sqrt(), tol, "RMSSE")?;
    close(ok(metrics::quantile_loss(&[2.0, 4.0], &[0.0, 0.0], 0.5))?, 1.5, tol, "QL median")?;
    close(ok(metrics::quantile_loss(&[10.0], &[12.0], 0.9))?, 0.2, tol, "QL single term")?;
    let two = [vec![0.0, 0.0], vec![10.0, 10.0]];
    let mql = ok(metrics::multi_quantile_loss(&[2.0, 2.0], &two, &[0.1, 0.9]))?;
    close(mql, (0.2 + 0.8) / 2.0, tol, "MQL mean of levels")?;
    close(ok(metrics::smapc(&[10.0, 20.0], &[10.0, 10.0]))?, 100.0 / 3.0, tol, "sMAPC")?;
    close(ok(metrics::smapc(&[5.0], &[-5.0]))?, 200.0, tol, "sMAPC upper bound")?;
    close(ok(metrics::quantile_change(&[10.0, 12.0], &[10.0, 10.0], 0.9))?, 0.1, tol, "QC")?;
    let mqc = ok(metrics::multi_quantile_change(&[vec![3.0, 3.0]], &[vec![1.0, 1.0]], &[0.5]))?;
    close(mqc, 1.0, tol, "MQC median")?;

    // QC at the median against half the mean absolute change
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..200 {
        let n = rng.random_range(1..30);
        let c: Vec<f64> = (0..n).map(|_| rng.random_range(-50.0..50.0)).collect();
        let p: Vec<f64> = (0..n).map(|_| rng.random_range(-50.0..50.0)).collect();
        let half_mad = 0.5 * c.iter().zip(&p).map(|(a, b)| (a - b).abs()).sum::<f64>() / n as f64;
        close(ok(metrics::quantile_change(&c, &p, 0.5))?, half_mad, tol, "QC median identity")?;
    }

    // aggregation skips a series whose RMSSE is undefined
    let actual = [3.0, 4.0];
    let mut per_series = BTreeMap::new();
    for (id, train) in [("A", vec![1.0, 2.0, 3.0]), ("B", vec![2.0, 2.0, 2.0]), ("C", vec![1.0, 3.0, 5.0])] {
        match metrics::rmsse(&actual, &[3.0, 3.0], &train, 1) {
            Ok(v) => {
                per_series.insert(sid(id), vec![v]);
            }
            Err(vstab_core::Error::UndefinedMetric(_)) => {}
            Err(e) => return Err(e.to_string()),
        }
    }
    let (means, overall) = ok(metrics::aggregate(&per_series))?;
    check(means.len() == 2, || "constant series not excluded".into())?;
    let a = (0.5f64).sqrt();
    let c = (0.5f64 / 4.0).sqrt();
    close(overall, (a + c) / 2.0, tol, "aggregate over remaining series")?;

    // baseline normalization of two published sMAPC values
    let mut t = MetricTable::new(7);
    ok(t.push(MetricRow::overall("XGBoost", MetricName::Smapc, 7, 0.075)))?;
    ok(t.push(MetricRow::overall("XGBoost", MetricName::Smapc, 364, 0.073)))?;
    let n = ok(normalize_to_baseline(&t))?;
    check(n.rows[0].normalized == Some(1.0), || "baseline not 1".into())?;
    close(n.rows[1].normalized.unwrap_or(f64::NAN), 0.073 / 0.075, tol, "normalized sMAPC")?;
    close(0.073 / 0.075, 0.973_333_333_333_333_3, tol, "normalized sMAPC literal")?;

    let elapsed = start.elapsed();
    check(elapsed < Duration::from_secs(1), || format!("took {elapsed:?}"))
}

fn pinball(y: f64, f: f64, q: f64) -> f64 {
    if y >= f {
        q * (y - f)
    } else {
        (1.0 - q) * (f - y)
    }
}

/// Mean over levels of the mean pinball change, indexing the full tracks of
/// two origins one step apart directly.
fn naive_mqc(curr: &[Vec<f64>], prev: &[Vec<f64>], levels: &[f64]) -> f64 {
    let h = curr[0].len();
    let mut total = 0.0;
    for (j, &q) in levels.iter().enumerate() {
        let mut s = 0.0;
        for t in 0..h - 1 {
            s += pinball(prev[j][t + 1], curr[j][t], q);
        }
        total += s / (h - 1) as f64;
    }
    total / levels.len() as f64
}

fn naive_friedman(values: &[Vec<f64>]) -> f64 {
    let n = values.len() as f64;
    let k = values[0].len();
    let mut sums = vec![0.0; k];
    for row in values {
        for j in 0..k {
            let below = row.iter().filter(|&&v| v < row[j]).count() as f64;
            let ties = row.iter().filter(|&&v| v == row[j]).count() as f64 - 1.0;
            sums[j] += 1.0 + below + ties / 2.0;
        }
    }
    let kf = k as f64;
    12.0 / (n * kf * (kf + 1.0)) * sums.iter().map(|r| r * r).sum::<f64>() - 3.0 * n * (kf + 1.0)
}

fn oracle_equivalence() -> Outcome {
    let levels = ok(conformal::central_levels_to_quantiles(&DEFAULT_CENTRAL_LEVELS))?;
    check(levels.len() == 13, || "quantile set is not 13 levels".into())?;
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for case in 0..1000 {
        let h = rng.random_range(2..=40);
        let track = |rng: &mut ChaCha8Rng| -> Vec<Vec<f64>> {
            (0..13).map(|_| (0..h).map(|_| rng.random_range(-100.0..100.0)).collect()).collect()
        };
        let (curr, prev) = (track(&mut rng), track(&mut rng));
        let mut c_ov = Vec::new();
        let mut p_ov = Vec::new();
        for (c, p) in curr.iter().zip(&prev) {
            let (a, b) = ok(metrics::overlap(c, p, 1))?;
            c_ov.push(a);
            p_ov.push(b);
        }
        let engine = ok(metrics::multi_quantile_change(&c_ov, &p_ov, &levels))?;
        close(engine, naive_mqc(&curr, &prev, &levels), 1e-12, &format!("MQC fixture {case}"))?;
    }
    for case in 0..100 {
        // one decimal place so ties and midranks occur
        let m: Vec<Vec<f64>> = (0..50)
            .map(|_| (0..4).map(|_| (rng.random_range(0.0..2.0f64) * 10.0).round() / 10.0).collect())
            .collect();
        let engine = ok(friedman_test(&ok(rank_blocks(&m, true))?))?.statistic;
        let naive = naive_friedman(&m);
        let err = (engine - naive).abs() / naive.abs().max(1e-300);
        check(err <= 1e-12 || (engine - naive).abs() < 1e-12, || {
            format!("Friedman fixture {case}: engine {engine}, naive {naive}")
        })?;
    }
    Ok(())
}

fn vec_in(range: std::ops::Range<f64>, len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(range, len)
}

fn run_property<S: Strategy>(
    name: &str,
    strategy: S,
    test: impl Fn(S::Value) -> Result<(), TestCaseError>,
) -> Outcome {
    let mut runner = TestRunner::new(PropConfig {
        cases: 10_000,
        failure_persistence: None,
        ..PropConfig::default()
    });
    runner.run(&strategy, test).map_err(|e| format!("{name}: {e}"))
}

fn metric_properties() -> Outcome {
    let pairs = (1usize..30).prop_flat_map(|n| (vec_in(-1e3..1e3, n), vec_in(-1e3..1e3, n), 1e-3..1e3f64));
    run_property("sMAPC range and scale invariance", pairs.clone(), |(a, b, k)| {
        let v = metrics::smapc(&a, &b).unwrap();
        prop_assert!((0.0..=200.0 + 1e-9).contains(&v));
        let scaled = metrics::smapc(
            &a.iter().map(|x| x * k).collect::<Vec<_>>(),
            &b.iter().map(|x| x * k).collect::<Vec<_>>(),
        )
        .unwrap();
        prop_assert!((scaled - v).abs() <= 1e-9 * v.max(1.0));
        Ok(())
    })?;
    run_property("QC at the median", pairs.clone(), |(a, b, _)| {
        let qc = metrics::quantile_change(&a, &b, 0.5).unwrap();
        let half = 0.5 * a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64;
        prop_assert!((qc - half).abs() <= 1e-9 * half.max(1.0));
        Ok(())
    })?;
    run_property("QL and QC homogeneity", (pairs, 0.01..0.99f64), |((a, b, k), q)| {
        let sa: Vec<f64> = a.iter().map(|x| x * k).collect();
        let sb: Vec<f64> = b.iter().map(|x| x * k).collect();
        let ql = metrics::quantile_loss(&a, &b, q).unwrap();
        let qls = metrics::quantile_loss(&sa, &sb, q).unwrap();
        prop_assert!((qls - k * ql).abs() <= 1e-9 * (k * ql).max(1.0));
        let qc = metrics::quantile_change(&a, &b, q).unwrap();
        let qcs = metrics::quantile_change(&sa, &sb, q).unwrap();
        prop_assert!((qcs - k * qc).abs() <= 1e-9 * (k * qc).max(1.0));
        Ok(())
    })?;
    let same = (2usize..30).prop_flat_map(|n| (vec_in(-1e3..1e3, n), vec_in(-1e3..1e3, 8), 0.01..0.99f64));
    run_property("zero on identical inputs", same, |(y, train, q)| {
        let tracks = vec![y.clone(), y.clone()];
        let levels = [q.min(0.5), q.max(0.5) + 1e-6];
        let train_ok = train.windows(2).any(|w| w[0] != w[1]);
        if train_ok {
            prop_assert_eq!(metrics::rmsse(&y, &y, &train, 1).unwrap(), 0.0);
        }
        prop_assert_eq!(metrics::quantile_loss(&y, &y, q).unwrap(), 0.0);
        prop_assert_eq!(metrics::multi_quantile_loss(&y, &tracks, &levels).unwrap(), 0.0);
        prop_assert_eq!(metrics::smapc(&y, &y).unwrap(), 0.0);
        prop_assert_eq!(metrics::quantile_change(&y, &y, q).unwrap(), 0.0);
        prop_assert_eq!(metrics::multi_quantile_change(&tracks, &tracks, &levels).unwrap(), 0.0);
        Ok(())
    })
}

fn scheduler_counting() -> Outcome {
    let m5 = EvaluationConfig::m5();
    let grid = ok(build_origin_grid(1941, &m5))?;
    check(grid.len() == 337, || format!("M5 origins {}", grid.len()))?;
    let pairs = ok(consecutive_origin_pairs(&grid))?;
    check(pairs.len() == 336, || format!("M5 pairs {}", pairs.len()))?;
    let r7 = ok(build_retrain_plan(&grid, 7))?.retrain_count();
    check(r7 == 49, || format!("r=7 retrains {r7}"))?;
    let r364 = ok(build_retrain_plan(&grid, 364))?.retrain_count();
    check(r364 == 1, || format!("r=364 retrains {r364}"))?;
    let vn1 = ok(build_origin_grid(200, &EvaluationConfig::vn1()))?;
    check(vn1.len() == 40, || format!("VN1 origins {}", vn1.len()))
}

fn conformal_coverage() -> Outcome {
    let (n_series, len, h, mu) = (100usize, 200usize, 4usize, 50.0);
    let start = NaiveDate::from_ymd_opt(2022, 1, 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let series: BTreeMap<SeriesId, Series> = (0..n_series)
        .map(|i| {
            let v = (0..len).map(|_| mu + 2.0 * rng.sample::<f64, _>(StandardNormal)).collect();
            (sid(&format!("S{i:03}")), Series::new(start, v))
        })
        .collect();
    let panel = ok(TimeSeriesPanel::new(FrequencyProfile::daily(), series))?;
    let points = |origins: std::ops::RangeInclusive<usize>| -> Result<ForecastMatrix, String> {
        let mut m = ok(ForecastMatrix::new(h, Vec::new()))?;
        for id in panel.ids() {
            for n in origins.clone() {
                let date = panel.timestamp(id, n - 1).unwrap();
                ok(m.insert(id.clone(), date, ForecastBlock::point_only(vec![mu; h])))?;
            }
        }
        Ok(m)
    };
    let levels = DEFAULT_CENTRAL_LEVELS;
    let cal = ok(conformal::calibrate(&points(60..=120)?, &panel, &levels, ResidualPooling::Pooled))?;
    let test = ok(conformal::apply(&cal, &points(130..=len - h)?))?;
    let mut crossings = 0;
    let mut scored = 0usize;
    let mut covered = BTreeMap::new();
    for ((id, origin), block) in test.iter() {
        if first_crossing(block).is_some() {
            crossings += 1;
        }
        let n = panel.position(id, *origin).unwrap() + 1;
        let y = &panel.get(id).unwrap().values[n..n + h];
        for c in [0.6, 0.8, 0.9] {
            let lo = test.level_index((1.0 - c) / 2.0).ok_or("missing lower level")?;
            let hi = test.level_index((1.0 + c) / 2.0).ok_or("missing upper level")?;
            let inside = (0..h)
                .filter(|&k| block.quantiles[lo][k] <= y[k] && y[k] <= block.quantiles[hi][k])
                .count();
            *covered.entry((c * 10.0) as u32).or_insert(0usize) += inside;
        }
        scored += h;
    }
    check(scored >= 5000, || format!("only {scored} scored points"))?;
    check(crossings == 0, || format!("{crossings} crossing blocks"))?;
    for (c10, hits) in covered {
        let c = f64::from(c10) / 10.0;
        let rate = hits as f64 / scored as f64;
        check((rate - c).abs() <= 0.03, || format!("coverage at {c}: {rate:.4}"))?;
    }
    Ok(())
}

fn friedman_nemenyi_fixture() -> Outcome {
    let labels: Vec<String> = ["A", "B", "C"].iter().map(|s| s.to_string()).collect();
    let values = vec![vec![0.1, 0.2, 0.3], vec![1.0, 2.0, 3.0], vec![5.0, 6.0, 9.0], vec![0.0, 0.5, 0.7]];
    let rep = ok(friedman_nemenyi(&values, &labels, true, 0.05, true))?;
    close(rep.friedman_statistic, 8.0, 1e-12, "chi-squared")?;
    check((rep.p_value - 0.01832).abs() <= 1e-4, || format!("p = {}", rep.p_value))?;
    check((rep.nemenyi_critical_difference - 1.657).abs() <= 1e-3, || {
        format!("CD = {}", rep.nemenyi_critical_difference)
    })?;
    let s = &rep.significant;
    check(s[0][2] && s[2][0] && !s[0][1] && !s[1][2], || format!("pairwise {s:?}"))?;
    let transformed: Vec<Vec<f64>> = values
        .iter()
        .enumerate()
        .map(|(i, row)| row.iter().map(|x| (x * 3.0 + i as f64).exp() + x.powi(3)).collect())
        .collect();
    let rep2 = ok(friedman_nemenyi(&transformed, &labels, true, 0.05, true))?;
    check(rep == rep2, || "monotone transform changed the report".into())
}

fn ensemble_sanity() -> Outcome {
    let m5_rmsse = [
        ("LR", 0.777),
        ("XGBoost", 0.755),
        ("LGBM", 0.771),
        ("CatBoost", 0.947),
        ("MLP", 0.821),
        ("TCN", 0.865),
        ("NBEATSx", 0.815),
        ("NHITS", 0.828),
    ];
    let mut table = MetricTable::new(7);
    for (m, v) in m5_rmsse {
        ok(table.push(MetricRow::overall(m, MetricName::Rmsse, 7, v)))?;
    }
    let models: Vec<String> = m5_rmsse.iter().map(|(m, _)| m.to_string()).collect();
    let ranking = ok(rank_models(&table, &models, MetricName::Rmsse, 7))?;
    let spec = ok(top_k_spec(&ranking, 5))?;
    let mut got = spec.members.clone();
    got.sort();
    let mut want = vec!["XGBoost", "LGBM", "LR", "NBEATSx", "MLP"];
    want.sort();
    check(got == want, || format!("top-5 {:?}", spec.members))
}

fn e2e_config(dir: &std::path::Path) -> Result<RunConfig, String> {
    let text = format!(
        r#"
ensemble_sizes = [2]
seed = 7
output_dir = "{}"

[dataset.synth]
n_series = 50
length = 200
frequency = "daily"

[evaluation]
horizon = 7
test_window = 28
validation_window = 14
retrain_windows = [1, 7, 28]
baseline_r = 7
season_length = 7

[[models]]
name = "LR"
kind = "pooled_linear"

[[models]]
name = "SNaive"
kind = "seasonal_naive"
"#,
        dir.display()
    );
    ok(RunConfig::from_toml_str(&text))
}

fn end_to_end() -> Outcome {
    let dirs = [ok(tempfile::tempdir())?, ok(tempfile::tempdir())?];
    let mut manifests = Vec::new();
    for d in &dirs {
        let cfg = e2e_config(d.path())?;
        check(cfg.evaluation.quantile_levels.len() == 13, || "expected 13 quantiles".into())?;
        let t0 = Instant::now();
        let m = ok(pipeline::run(&cfg))?;
        let took = t0.elapsed();
        check(took < Duration::from_secs(60), || format!("run took {took:?}"))?;
        manifests.push(m);
    }
    // timings differ between runs; every listed file must not
    check(manifests[0].files == manifests[1].files, || "file checksums differ".into())?;
    check(manifests[0].config_hash == manifests[1].config_hash, || "config hash differs".into())?;
    for f in &manifests[0].files {
        let a = ok(std::fs::read(dirs[0].path().join(&f.path)))?;
        let b = ok(std::fs::read(dirs[1].path().join(&f.path)))?;
        check(a == b, || format!("{} differs", f.path))?;
    }
    check(dirs[0].path().join(MANIFEST_FILE).is_file(), || "manifest missing".into())?;
    for name in ["metrics_raw.csv", "metrics_normalized.csv", "tests_RMSSE.json", "plot_data.json"] {
        check(manifests[0].files.iter().any(|f| f.path == name), || format!("{name} missing"))?;
    }
    let raw = ok(std::fs::File::open(dirs[0].path().join("metrics_raw.csv")))?;
    let table = ok(metrics::read_metric_table(raw, 7))?;
    let methods = table.models();
    check(methods.iter().any(|m| m == "Ens2A"), || format!("methods {methods:?}"))?;
    let baseline: Vec<_> = table.rows.iter().filter(|r| r.r == 7).collect();
    check(!baseline.is_empty() && baseline.iter().all(|r| r.normalized == Some(1.0)), || {
        "baseline rows are not exactly 1.0".into()
    })?;
    let wide = ok(std::fs::read_to_string(dirs[0].path().join("metrics_normalized.csv")))?;
    let mut lines = wide.lines();
    let header: Vec<&str> = lines.next().unwrap_or_default().split(',').collect();
    let col = header.iter().position(|h| *h == "r=7").ok_or("no baseline column")?;
    for line in lines {
        let cell = line.split(',').nth(col).unwrap_or_default();
        check(cell == "1.000", || format!("baseline cell `{cell}` in `{line}`"))?;
    }
    Ok(())
}

#[test]
fn acceptance() {
    type Criterion = (&'static str, fn() -> Outcome);
    let criteria: [Criterion; 8] = [
        ("metric exactness", metric_exactness),
        ("oracle equivalence", oracle_equivalence),
        ("metric properties", metric_properties),
        ("scheduler counting", scheduler_counting),
        ("conformal coverage", conformal_coverage),
        ("friedman-nemenyi", friedman_nemenyi_fixture),
        ("ensemble sanity", ensemble_sanity),
        ("end-to-end determinism and scale", end_to_end),
    ];
    let mut failed = Vec::new();
    for (name, f) in criteria {
        let t0 = Instant::now();
        match f() {
            Ok(()) => println!("PASS {name} ({:.2?})", t0.elapsed()),
            Err(e) => {
                println!("FAIL {name}: {e}");
                failed.push(name);
            }
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
