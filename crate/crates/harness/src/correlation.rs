//! Pearson correlation with a seeded two-sided permutation p-value.

use crate::sweep::SweepRecord;
use crate::{HarnessError, Result};
use advicl::RngStream;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

pub const PERMUTATIONS: usize = 10_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationReport {
    pub pcc: f64,
    pub p_value: f64,
    pub n_points: usize,
    pub method: String,
}

fn all_equal(v: &[f64]) -> bool {
    v.iter().all(|x| *x == v[0])
}

pub fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    (sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0)
}

/// PCC between `x` and `y` and the permutation p-value
/// `(1 + #{|r_π| ≥ |r|}) / (1 + permutations)` over shuffles of `y`.
pub fn correlate(
    x: &[f64],
    y: &[f64],
    permutations: usize,
    stream: RngStream,
) -> Result<CorrelationReport> {
    if x.len() != y.len() || x.len() < 3 {
        return Err(HarnessError::DegenerateInput(format!(
            "need at least 3 paired points, got {} and {}",
            x.len(),
            y.len()
        )));
    }
    if all_equal(x) || all_equal(y) {
        return Err(HarnessError::DegenerateInput("a column is constant".into()));
    }
    let r = pearson(x, y);
    let tol = 1e-12;
    let mut rng = stream.rng();
    let mut shuffled = y.to_vec();
    let mut extreme = 0usize;
    for _ in 0..permutations {
        shuffled.shuffle(&mut rng);
        if pearson(x, &shuffled).abs() >= r.abs() - tol {
            extreme += 1;
        }
    }
    Ok(CorrelationReport {
        pcc: r,
        p_value: (1 + extreme) as f64 / (1 + permutations) as f64,
        n_points: x.len(),
        method: format!("permutation({permutations})"),
    })
}

/// Correlation between robust error and `√M_test/M_train` over the records
/// with `M_train ≥ 1` that did not fail.
pub fn correlation(records: &[SweepRecord], seed: u64) -> Result<CorrelationReport> {
    let used: Vec<&SweepRecord> = records
        .iter()
        .filter(|r| r.m_train >= 1 && !r.failed() && r.ratio.is_some())
        .collect();
    let x: Vec<f64> = used.iter().map(|r| r.ratio.unwrap()).collect();
    let y: Vec<f64> = used.iter().map(|r| r.robust_err).collect();
    correlate(&x, &y, PERMUTATIONS, RngStream::new(seed, 0xC0_44E1))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_line() {
        let x: Vec<f64> = (0..12).map(|i| i as f64 * 0.3).collect();
        let y: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
        let rep = correlate(&x, &y, PERMUTATIONS, RngStream::new(0, 0)).unwrap();
        assert!((rep.pcc - 1.0).abs() < 1e-12);
        assert!(rep.p_value <= 1e-4);
        assert_eq!(rep.method, "permutation(10000)");
    }

    #[test]
    fn constant_errors_are_degenerate() {
        let r = correlate(
            &[1.0, 2.0, 3.0],
            &[5.0, 5.0, 5.0],
            100,
            RngStream::new(0, 0),
        );
        assert!(matches!(r, Err(HarnessError::DegenerateInput(_))));
        let r = correlate(
            &[1.0, 1.0, 1.0],
            &[5.0, 4.0, 5.0],
            100,
            RngStream::new(0, 0),
        );
        assert!(matches!(r, Err(HarnessError::DegenerateInput(_))));
    }

    #[test]
    fn anti_correlated() {
        let x = [1.0, 2.0, 3.0, 4.0];
        let y = [4.0, 3.0, 2.0, 1.0];
        assert!((pearson(&x, &y) + 1.0).abs() < 1e-15);
    }

    #[test]
    fn hand_pearson() {
        // x = (1,2,3), y = (1,3,2): cov = 0.5, var_x = var_y = 1 → r = 0.5.
        assert!((pearson(&[1.0, 2.0, 3.0], &[1.0, 3.0, 2.0]) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn p_value_is_reproducible() {
        let x = [0.1, 0.5, 0.2, 0.9, 0.4, 0.7];
        let y = [1.0, 1.2, 0.8, 2.0, 1.1, 1.3];
        let a = correlate(&x, &y, 2000, RngStream::new(4, 0)).unwrap();
        let b = correlate(&x, &y, 2000, RngStream::new(4, 0)).unwrap();
        assert_eq!(a, b);
        assert!(a.p_value > 0.0 && a.p_value <= 1.0);
    }
}
