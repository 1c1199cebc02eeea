//! Summary statistics and the one-sided one-sample t-test.

use serde::{Deserialize, Serialize};
use statrs::function::beta::beta_reg;

use crate::error::{Error, Result};

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample standard deviation (divides by `n - 1`). Zero for fewer than two
/// values.
pub fn sample_std(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TTest {
    pub t: f64,
    pub df: f64,
    /// `P(T >= t)` under the null of zero mean.
    pub p: f64,
}

/// Upper tail `P(T >= t)` of Student's t with `df` degrees of freedom.
pub fn student_t_sf(t: f64, df: f64) -> f64 {
    if t == 0.0 {
        return 0.5;
    }
    let x = df / (df + t * t);
    let tail = 0.5 * beta_reg(df / 2.0, 0.5, x);
    if t > 0.0 {
        tail
    } else {
        1.0 - tail
    }
}

/// Tests whether the mean of `deltas` is greater than zero.
pub fn one_sample_t_test(deltas: &[f64]) -> Result<TTest> {
    let n = deltas.len();
    if n < 2 {
        return Err(Error::TooFewSamples(n));
    }
    if deltas.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("t-test input".into()));
    }
    let sd = sample_std(deltas);
    if sd == 0.0 {
        return Err(Error::ZeroVariance { value: deltas[0] });
    }
    let t = mean(deltas) / (sd / (n as f64).sqrt());
    let df = (n - 1) as f64;
    Ok(TTest { t, df, p: student_t_sf(t, df) })
}
