//! Friedman rank test with the Nemenyi post-hoc critical difference.

use std::io::Write;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::error::{Error, Result};

/// Within-block ranks: `ranks[i][j]` is the rank of treatment `j` in block
/// `i`, 1 = best, ties sharing their mean rank.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankMatrix {
    pub ranks: Vec<Vec<f64>>,
}

impl RankMatrix {
    pub fn n_blocks(&self) -> usize {
        self.ranks.len()
    }

    pub fn n_treatments(&self) -> usize {
        self.ranks.first().map_or(0, Vec::len)
    }

    pub fn mean_ranks(&self) -> Vec<f64> {
        let n = self.n_blocks() as f64;
        (0..self.n_treatments())
            .map(|j| self.ranks.iter().map(|row| row[j]).sum::<f64>() / n)
            .collect()
    }
}

fn midranks(row: &[f64], lower_is_better: bool) -> Vec<f64> {
    let mut order: Vec<usize> = (0..row.len()).collect();
    order.sort_by(|&a, &b| {
        let c = row[a].total_cmp(&row[b]);
        if lower_is_better {
            c
        } else {
            c.reverse()
        }
    });
    let mut ranks = vec![0.0; row.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && row[order[j + 1]] == row[order[i]] {
            j += 1;
        }
        // positions i..=j (0-based) share ranks i+1..=j+1
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = avg;
        }
        i = j + 1;
    }
    ranks
}

pub fn rank_blocks(values: &[Vec<f64>], lower_is_better: bool) -> Result<RankMatrix> {
    let n = values.len();
    let k = values.first().map_or(0, Vec::len);
    if n < 2 || k < 2 {
        return Err(Error::Config(format!(
            "rank test needs at least 2 blocks and 2 treatments, got {n} x {k}"
        )));
    }
    if let Some(i) = values.iter().position(|r| r.len() != k) {
        return Err(Error::Input(format!("block {i} has {} treatments, expected {k}", values[i].len())));
    }
    if let Some(i) = values.iter().position(|r| r.iter().any(|v| !v.is_finite())) {
        return Err(Error::Input(format!("block {i} contains a non-finite value")));
    }
    Ok(RankMatrix {
        ranks: values.iter().map(|r| midranks(r, lower_is_better)).collect(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FriedmanResult {
    pub statistic: f64,
    pub degrees_of_freedom: usize,
    pub p_value: f64,
}

/// `12N / (k(k+1)) * sum_j (Rbar_j - (k+1)/2)^2`, referred to a chi-squared
/// distribution with `k - 1` degrees of freedom. The approximation is
/// reasonable for roughly ten or more blocks.
pub fn friedman_test(ranks: &RankMatrix) -> Result<FriedmanResult> {
    let (n, k) = (ranks.n_blocks(), ranks.n_treatments());
    if k < 2 || n < 2 {
        return Err(Error::Config(format!(
            "Friedman test needs k >= 2 treatments and N >= 2 blocks, got k = {k}, N = {n}"
        )));
    }
    let (nf, kf) = (n as f64, k as f64);
    let centre = (kf + 1.0) / 2.0;
    let ss: f64 = ranks.mean_ranks().iter().map(|r| (r - centre).powi(2)).sum();
    let statistic = 12.0 * nf / (kf * (kf + 1.0)) * ss;
    let dist = ChiSquared::new(kf - 1.0).map_err(|e| Error::Config(e.to_string()))?;
    let p_value = dist.sf(statistic).clamp(0.0, 1.0);
    Ok(FriedmanResult {
        statistic,
        degrees_of_freedom: k - 1,
        p_value,
    })
}

/// Two-tailed Nemenyi critical values `q_alpha` (studentized range at
/// infinite degrees of freedom divided by sqrt 2) for k = 2..=20.
const Q_ALPHA_01: [f64; 19] = [
    2.576, 2.913, 3.113, 3.255, 3.364, 3.452, 3.526, 3.590, 3.646, 3.696, 3.741, 3.781, 3.818,
    3.853, 3.884, 3.914, 3.941, 3.967, 3.992,
];
const Q_ALPHA_05: [f64; 19] = [
    1.960, 2.343, 2.569, 2.728, 2.850, 2.949, 3.031, 3.102, 3.164, 3.219, 3.268, 3.313, 3.354,
    3.391, 3.426, 3.458, 3.489, 3.517, 3.544,
];
const Q_ALPHA_10: [f64; 19] = [
    1.645, 2.052, 2.291, 2.459, 2.589, 2.693, 2.780, 2.855, 2.920, 2.978, 3.030, 3.077, 3.120,
    3.159, 3.196, 3.230, 3.261, 3.291, 3.319,
];

pub const MAX_TREATMENTS: usize = 20;

pub fn nemenyi_q(k: usize, alpha: f64) -> Result<f64> {
    let table = if (alpha - 0.01).abs() < 1e-12 {
        &Q_ALPHA_01
    } else if (alpha - 0.05).abs() < 1e-12 {
        &Q_ALPHA_05
    } else if (alpha - 0.10).abs() < 1e-12 {
        &Q_ALPHA_10
    } else {
        return Err(Error::TableBounds(format!(
            "alpha = {alpha} not tabulated (use 0.01, 0.05 or 0.10)"
        )));
    };
    if !(2..=MAX_TREATMENTS).contains(&k) {
        return Err(Error::TableBounds(format!(
            "k = {k} outside the tabulated range 2..={MAX_TREATMENTS}"
        )));
    }
    Ok(table[k - 2])
}

/// `CD = q_alpha(k) * sqrt(k (k + 1) / (6 N))`.
pub fn nemenyi_cd(k: usize, n: usize, alpha: f64) -> Result<f64> {
    if n < 2 {
        return Err(Error::Config(format!("need at least 2 blocks, got {n}")));
    }
    let q = nemenyi_q(k, alpha)?;
    let kf = k as f64;
    Ok(q * (kf * (kf + 1.0) / (6.0 * n as f64)).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairwiseSignificance {
    pub significant: Vec<Vec<bool>>,
    pub critical_difference: f64,
    /// False when the Friedman gate suppressed the post-hoc comparison.
    pub friedman_rejected: bool,
}

/// Pair `(i, j)` differs when `|Rbar_i - Rbar_j| > CD`. With `gate` on and
/// a Friedman p-value above `alpha`, every pair is reported as not
/// significant.
pub fn pairwise_significance(ranks: &RankMatrix, alpha: f64, gate: bool) -> Result<PairwiseSignificance> {
    let k = ranks.n_treatments();
    let cd = nemenyi_cd(k, ranks.n_blocks(), alpha)?;
    let rejected = friedman_test(ranks)?.p_value <= alpha;
    let mean = ranks.mean_ranks();
    let allow = rejected || !gate;
    let significant = (0..k)
        .map(|i| {
            (0..k)
                .map(|j| allow && i != j && (mean[i] - mean[j]).abs() > cd)
                .collect()
        })
        .collect();
    Ok(PairwiseSignificance {
        significant,
        critical_difference: cd,
        friedman_rejected: rejected,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestReport {
    pub treatments: Vec<String>,
    pub n_blocks: usize,
    pub mean_ranks: Vec<f64>,
    pub friedman_statistic: f64,
    pub degrees_of_freedom: usize,
    pub p_value: f64,
    pub alpha: f64,
    pub nemenyi_critical_difference: f64,
    pub friedman_rejected: bool,
    pub significant: Vec<Vec<bool>>,
}

/// Ranks `values` (blocks x treatments) and runs both tests.
pub fn friedman_nemenyi(
    values: &[Vec<f64>],
    treatments: &[String],
    lower_is_better: bool,
    alpha: f64,
    gate: bool,
) -> Result<TestReport> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Config(format!("alpha = {alpha} outside (0, 1)")));
    }
    let ranks = rank_blocks(values, lower_is_better)?;
    if treatments.len() != ranks.n_treatments() {
        return Err(Error::Input(format!(
            "{} labels for {} treatments",
            treatments.len(),
            ranks.n_treatments()
        )));
    }
    let f = friedman_test(&ranks)?;
    let pw = pairwise_significance(&ranks, alpha, gate)?;
    Ok(TestReport {
        treatments: treatments.to_vec(),
        n_blocks: ranks.n_blocks(),
        mean_ranks: ranks.mean_ranks(),
        friedman_statistic: f.statistic,
        degrees_of_freedom: f.degrees_of_freedom,
        p_value: f.p_value,
        alpha,
        nemenyi_critical_difference: pw.critical_difference,
        friedman_rejected: pw.friedman_rejected,
        significant: pw.significant,
    })
}

/// Square CSV with 1 for significant pairs.
pub fn write_pairwise_csv<W: Write>(report: &TestReport, writer: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    let mut header = vec!["treatment".to_string()];
    header.extend(report.treatments.iter().cloned());
    wtr.write_record(&header)?;
    for (label, row) in report.treatments.iter().zip(&report.significant) {
        let mut rec = vec![label.clone()];
        rec.extend(row.iter().map(|s| u8::from(*s).to_string()));
        wtr.write_record(&rec)?;
    }
    wtr.flush()?;
    Ok(())
}
