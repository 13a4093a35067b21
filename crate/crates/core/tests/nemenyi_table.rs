//! The embedded critical values against the studentized range distribution
//! at infinite degrees of freedom, integrated numerically.

use statrs::distribution::{Continuous, ContinuousCDF, Normal};
use vstab_core::stats::{nemenyi_cd, nemenyi_q, MAX_TREATMENTS};

/// P(range of k standard normals <= w) = k * int phi(z) (Phi(z + w) - Phi(z))^(k-1) dz.
fn range_cdf(k: usize, w: f64) -> f64 {
    let n = Normal::standard();
    let (lo, hi, steps) = (-9.0, 9.0, 1600);
    let dz = (hi - lo) / steps as f64;
    // Simpson's rule
    let f = |z: f64| n.pdf(z) * (n.cdf(z + w) - n.cdf(z)).powi(k as i32 - 1);
    let mut s = f(lo) + f(hi);
    for i in 1..steps {
        let z = lo + i as f64 * dz;
        s += if i % 2 == 1 { 4.0 } else { 2.0 } * f(z);
    }
    k as f64 * s * dz / 3.0
}

fn oracle_q(k: usize, alpha: f64) -> f64 {
    let (mut a, mut b) = (0.0, 12.0);
    for _ in 0..80 {
        let m = 0.5 * (a + b);
        if range_cdf(k, m) < 1.0 - alpha {
            a = m;
        } else {
            b = m;
        }
    }
    0.5 * (a + b) / 2f64.sqrt()
}

#[test]
fn table_matches_integrated_distribution() {
    for alpha in [0.01, 0.05, 0.10] {
        for k in 2..=MAX_TREATMENTS {
            let table = nemenyi_q(k, alpha).unwrap();
            let oracle = oracle_q(k, alpha);
            // tabulated to three decimals
            assert!((table - oracle).abs() <= 1.5e-3, "k={k} alpha={alpha}: {table} vs {oracle}");
        }
    }
}

#[test]
fn critical_difference_scaling() {
    let cd = nemenyi_cd(2, 9, 0.05).unwrap();
    assert!((cd - 1.960 / 3.0).abs() < 1e-12);
    let a = nemenyi_cd(5, 10, 0.05).unwrap();
    let b = nemenyi_cd(5, 40, 0.05).unwrap();
    assert!((a / b - 2.0).abs() < 1e-12);
    assert!(nemenyi_q(MAX_TREATMENTS + 1, 0.05).is_err());
    assert!(nemenyi_q(3, 0.2).is_err());
}
