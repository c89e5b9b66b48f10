//! Wald-type agreement check between direct and model-based estimates.

use log::warn;
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::error::{Error, Result};
use crate::model::Dataset;

#[derive(Debug, Clone, PartialEq)]
pub struct WaldResult {
    pub statistic: f64,
    pub df: usize,
    pub p_value: f64,
    /// indices of areas dropped because their denominator was zero
    pub excluded: Vec<usize>,
}

/// `W = sum_i (direct_i - model_i)^2 / (var_i + mse_i)` against a chi-square
/// with one degree of freedom per compared area.
pub fn wald_gof(direct: &[f64], predictions: &[f64], variances: &[f64], mses: &[f64]) -> Result<WaldResult> {
    let n = direct.len();
    if predictions.len() != n || variances.len() != n || mses.len() != n {
        return Err(Error::Dimension("direct estimates, predictions, variances and MSEs differ in length".into()));
    }
    let mut w = 0.0;
    let mut df = 0;
    let mut excluded = Vec::new();
    for i in 0..n {
        let den = variances[i] + mses[i];
        if !(den > 0.0) || !den.is_finite() {
            excluded.push(i);
            continue;
        }
        w += (direct[i] - predictions[i]).powi(2) / den;
        df += 1;
    }
    if !excluded.is_empty() {
        warn!("{} area(s) with zero denominator excluded from the Wald statistic", excluded.len());
    }
    if df == 0 {
        return Err(Error::InvalidInput("no area has a positive denominator".into()));
    }
    let chi = ChiSquared::new(df as f64).map_err(|e| Error::Numerical(e.to_string()))?;
    Ok(WaldResult { statistic: w, df, p_value: chi.sf(w), excluded })
}

/// Sample proportion of every sampled area with variance `p(1 - p) / n_i`.
pub fn direct_estimates(data: &Dataset) -> Vec<(String, f64, f64)> {
    data.areas
        .iter()
        .filter(|a| !a.is_empty())
        .map(|a| {
            let n = a.n() as f64;
            let p = a.successes() as f64 / n;
            (a.area_id.clone(), p, p * (1.0 - p) / n)
        })
        .collect()
}

/// Upper `alpha` critical value of the chi-square with `df` degrees of freedom.
pub fn critical_value(df: usize, alpha: f64) -> Result<f64> {
    let chi = ChiSquared::new(df as f64).map_err(|e| Error::Numerical(e.to_string()))?;
    Ok(chi.inverse_cdf(1.0 - alpha))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn identical_vectors_give_zero() {
        let r = wald_gof(&[0.1, 0.2], &[0.1, 0.2], &[0.01, 0.02], &[0.001, 0.002]).unwrap();
        assert_eq!(r.statistic, 0.0);
        assert_eq!(r.df, 2);
        assert_relative_eq!(r.p_value, 1.0);
    }

    #[test]
    fn unit_ratio() {
        let r = wald_gof(&[0.3], &[0.2], &[0.006], &[0.004]).unwrap();
        assert_relative_eq!(r.statistic, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn zero_denominator_is_excluded() {
        let r = wald_gof(&[0.0, 0.3], &[0.1, 0.2], &[0.0, 0.006], &[0.0, 0.004]).unwrap();
        assert_eq!(r.excluded, vec![0]);
        assert_eq!(r.df, 1);
    }

    #[test]
    fn critical_value_scale() {
        // 452 degrees of freedom at the 5% level
        assert_relative_eq!(critical_value(452, 0.05).unwrap(), 502.56, epsilon = 0.01);
        let r = wald_gof(&vec![0.1; 452], &vec![0.1 + 0.0089; 452], &vec![1e-4; 452], &vec![0.0; 452]).unwrap();
        assert!(r.statistic < 502.56 && r.p_value > 0.05);
    }
}
