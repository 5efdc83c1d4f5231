//! Small statistics helpers for multi-seed aggregation.

use serde::{Deserialize, Serialize};
use statrs::distribution::{Binomial, ContinuousCDF, DiscreteCDF, ChiSquared};

/// Mean and sample standard deviation (zero for fewer than two values).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Outcome of a paired one-sided sign test of "candidate > baseline".
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SignTest {
    pub wins: usize,
    pub losses: usize,
    pub ties: usize,
    /// `P(X ≥ wins)` for `X ~ Bin(wins + losses, 1/2)`; ties are dropped.
    pub p_value: f64,
}

pub fn sign_test(candidate: &[f64], baseline: &[f64]) -> SignTest {
    let mut wins = 0;
    let mut losses = 0;
    let mut ties = 0;
    for (c, b) in candidate.iter().zip(baseline) {
        if c > b {
            wins += 1;
        } else if c < b {
            losses += 1;
        } else {
            ties += 1;
        }
    }
    let n = (wins + losses) as u64;
    let p_value = if n == 0 || wins == 0 {
        1.0
    } else {
        let bin = Binomial::new(0.5, n).unwrap();
        1.0 - bin.cdf(wins as u64 - 1)
    };
    SignTest {
        wins,
        losses,
        ties,
        p_value,
    }
}

/// Upper tail of the chi-square distribution.
pub fn chi_square_sf(statistic: f64, df: f64) -> f64 {
    let d = ChiSquared::new(df).unwrap();
    1.0 - d.cdf(statistic)
}
