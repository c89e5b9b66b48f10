//! Semi-parametric empirical best prediction of area proportions.

use std::collections::{HashMap, HashSet};

use crate::error::{Error, Result};
use crate::model::{logistic, AreaSample, Dataset, MixtureParams, PopulationCrossTab};

pub use crate::em::area_posterior;

#[derive(Debug, Clone, PartialEq)]
pub struct AreaPrediction {
    pub area_id: String,
    pub p_hat: f64,
    pub component_means: Vec<f64>,
    pub tau: Vec<f64>,
    pub alpha_hat: f64,
    pub n_sampled: usize,
    pub out_of_sample: bool,
}

/// `p_ig = N_i^{-1} sum_profiles count * logistic(x' beta + xi_g)`.
pub fn component_population_means(params: &MixtureParams, crosstab: &PopulationCrossTab) -> Result<Vec<f64>> {
    if crosstab.p() != params.p() {
        return Err(Error::Dimension(format!(
            "cross-tabulation for {} has p = {}, fit has p = {}",
            crosstab.area_id,
            crosstab.p(),
            params.p()
        )));
    }
    let n = crosstab.population_size();
    if n == 0 {
        return Err(Error::InvalidInput(format!("area {} has zero population", crosstab.area_id)));
    }
    let offsets = crosstab.offsets(&params.beta);
    Ok(params
        .xi
        .iter()
        .map(|&xi| {
            let s: f64 = offsets
                .iter()
                .zip(crosstab.counts())
                .map(|(o, &c)| c as f64 * logistic(o + xi))
                .sum();
            s / n as f64
        })
        .collect())
}

/// Centered posterior-mean intercept `sum_g (xi_g - xi_bar) tau_g`.
pub fn posterior_mean_intercept(params: &MixtureParams, tau: &[f64]) -> f64 {
    let bar = params.mean_intercept();
    params.xi.iter().zip(tau).map(|(x, t)| (x - bar) * t).sum()
}

/// Prediction for one area; `sample` is `None` for an out-of-sample area.
pub fn sp_ebp(params: &MixtureParams, sample: Option<&AreaSample>, crosstab: &PopulationCrossTab) -> Result<AreaPrediction> {
    let component_means = component_population_means(params, crosstab)?;
    let tau = match sample {
        Some(a) => {
            if a.p() != params.p() {
                return Err(Error::Dimension(format!("sample for {} has p = {}", a.area_id, a.p())));
            }
            area_posterior(a, params)
        }
        None => params.pi.clone(),
    };
    let p_hat = component_means.iter().zip(&tau).map(|(a, b)| a * b).sum::<f64>().clamp(0.0, 1.0);
    let n_sampled = sample.map_or(0, AreaSample::n);
    Ok(AreaPrediction {
        area_id: crosstab.area_id.clone(),
        p_hat,
        alpha_hat: posterior_mean_intercept(params, &tau),
        component_means,
        tau,
        n_sampled,
        out_of_sample: n_sampled == 0,
    })
}

/// Matches cross-tabulations to sample areas. Every sampled area needs a
/// cross-tabulation; cross-tabulated areas without a sample are out of sample.
pub fn pair_areas<'a>(
    data: &'a Dataset,
    crosstabs: &'a [PopulationCrossTab],
) -> Result<Vec<(Option<&'a AreaSample>, &'a PopulationCrossTab)>> {
    let mut seen = HashSet::new();
    for c in crosstabs {
        if !seen.insert(c.area_id.as_str()) {
            return Err(Error::InvalidInput(format!("duplicate cross-tabulation for area {}", c.area_id)));
        }
    }
    let by_id: HashMap<&str, &AreaSample> = data.areas.iter().map(|a| (a.area_id.as_str(), a)).collect();
    for a in &data.areas {
        if !seen.contains(a.area_id.as_str()) {
            return Err(Error::InvalidInput(format!("no population cross-tabulation for sampled area {}", a.area_id)));
        }
    }
    Ok(crosstabs.iter().map(|c| (by_id.get(c.area_id.as_str()).copied(), c)).collect())
}

/// Predictions for every cross-tabulated area, in cross-tabulation order.
pub fn predict_areas(params: &MixtureParams, data: &Dataset, crosstabs: &[PopulationCrossTab]) -> Result<Vec<AreaPrediction>> {
    pair_areas(data, crosstabs)?
        .into_iter()
        .map(|(s, c)| sp_ebp(params, s, c))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn params2() -> MixtureParams {
        MixtureParams::new(vec![0.5], vec![-1.0, 0.8], vec![0.6, 0.4]).unwrap()
    }

    #[test]
    fn one_profile_at_zero() {
        let params = MixtureParams::new(vec![1.0], vec![0.0], vec![1.0]).unwrap();
        let c = PopulationCrossTab::new("a", 1, vec![0.0], vec![7]).unwrap();
        assert_eq!(component_population_means(&params, &c).unwrap(), vec![0.5]);
    }

    #[test]
    fn crosstab_equals_unit_enumeration() {
        let params = params2();
        let c = PopulationCrossTab::new("a", 1, vec![-0.4, 0.3, 1.2], vec![3, 1, 2]).unwrap();
        let means = component_population_means(&params, &c).unwrap();
        let units = [-0.4, -0.4, -0.4, 0.3, 1.2, 1.2];
        for (g, &xi) in params.xi.iter().enumerate() {
            let direct = units.iter().map(|x| logistic(0.5 * x + xi)).sum::<f64>() / 6.0;
            assert_relative_eq!(means[g], direct, epsilon = 1e-15);
        }
    }

    #[test]
    fn out_of_sample_uses_prior() {
        let params = params2();
        let c = PopulationCrossTab::new("a", 1, vec![0.1], vec![10]).unwrap();
        let pred = sp_ebp(&params, None, &c).unwrap();
        assert!(pred.out_of_sample);
        let expect: f64 = pred.component_means.iter().zip(&params.pi).map(|(a, b)| a * b).sum();
        assert_relative_eq!(pred.p_hat, expect, epsilon = 1e-15);
        assert!(pred.alpha_hat.abs() < 1e-15);
    }

    #[test]
    fn hand_instance_with_explicit_products() {
        let params = params2();
        let s = AreaSample::new("a", 1, vec![1, 0, 1], vec![0.2, -0.7, 1.5]).unwrap();
        let c = PopulationCrossTab::new("a", 1, vec![0.0, 1.0], vec![4, 6]).unwrap();
        let pred = sp_ebp(&params, Some(&s), &c).unwrap();
        let f: Vec<f64> = params
            .xi
            .iter()
            .map(|&xi| {
                let p1 = logistic(0.5 * 0.2 + xi);
                let p2 = logistic(0.5 * -0.7 + xi);
                let p3 = logistic(0.5 * 1.5 + xi);
                p1 * (1.0 - p2) * p3
            })
            .collect();
        let den = 0.6 * f[0] + 0.4 * f[1];
        let tau = [0.6 * f[0] / den, 0.4 * f[1] / den];
        let pig: Vec<f64> = params.xi.iter().map(|&xi| (4.0 * logistic(xi) + 6.0 * logistic(0.5 + xi)) / 10.0).collect();
        assert_relative_eq!(pred.p_hat, pig[0] * tau[0] + pig[1] * tau[1], epsilon = 1e-14);
        let bar = -0.6 + 0.4 * 0.8;
        assert_relative_eq!(pred.alpha_hat, tau[0] * (-1.0 - bar) + tau[1] * (0.8 - bar), epsilon = 1e-14);
    }

    #[test]
    fn missing_crosstab_is_error() {
        let s = AreaSample::new("a", 1, vec![1], vec![0.0]).unwrap();
        let d = Dataset::new(1, vec![s]).unwrap();
        let c = PopulationCrossTab::new("b", 1, vec![0.0], vec![3]).unwrap();
        assert!(predict_areas(&params2(), &d, &[c]).is_err());
    }

    #[test]
    fn degenerate_weight_gives_centered_location() {
        let params = params2();
        let a = posterior_mean_intercept(&params, &[0.0, 1.0]);
        assert_relative_eq!(a, 0.8 - params.mean_intercept(), epsilon = 1e-15);
    }

    proptest! {
        #[test]
        fn prediction_is_convex_combination(
            ys in proptest::collection::vec(0u8..2, 1..12),
            b in -2.0f64..2.0,
            x0 in -3.0f64..0.0,
            x1 in 0.0f64..3.0,
        ) {
            let params = MixtureParams::new(vec![b], vec![-1.5, 0.0, 2.0], vec![0.2, 0.5, 0.3]).unwrap();
            let xs: Vec<f64> = (0..ys.len()).map(|k| if k % 2 == 0 { x0 } else { x1 }).collect();
            let s = AreaSample::new("a", 1, ys.clone(), xs.clone()).unwrap();
            let c = PopulationCrossTab::new("a", 1, vec![x0, x1], vec![5, 9]).unwrap();
            let pred = sp_ebp(&params, Some(&s), &c).unwrap();
            let lo = pred.component_means.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = pred.component_means.iter().copied().fold(0.0, f64::max);
            prop_assert!(pred.p_hat >= lo - 1e-15 && pred.p_hat <= hi + 1e-15);

            // one more success never lowers the weight on the largest location
            let mut ys2 = ys.clone();
            ys2.push(1);
            let mut xs2 = xs.clone();
            xs2.push(x1);
            let mut ys3 = ys;
            ys3.push(0);
            let s2 = AreaSample::new("a", 1, ys2, xs2.clone()).unwrap();
            let s3 = AreaSample::new("a", 1, ys3, xs2).unwrap();
            let t_hi = area_posterior(&s2, &params)[2];
            let t_lo = area_posterior(&s3, &params)[2];
            prop_assert!(t_hi >= t_lo);
        }

        #[test]
        fn permutation_within_covariate_class(seed in 0u64..1000) {
            let params = params2();
            let ys = vec![1, 0, 0, 1, 1];
            let xs = vec![0.3, 0.3, 0.3, -1.0, -1.0];
            let mut ys_perm = ys.clone();
            ys_perm.swap(0, (seed % 3) as usize);
            let c = PopulationCrossTab::new("a", 1, vec![0.3, -1.0], vec![2, 2]).unwrap();
            let a = sp_ebp(&params, Some(&AreaSample::new("a", 1, ys, xs.clone()).unwrap()), &c).unwrap();
            let b = sp_ebp(&params, Some(&AreaSample::new("a", 1, ys_perm, xs).unwrap()), &c).unwrap();
            prop_assert!((a.p_hat - b.p_hat).abs() < 1e-15);
        }
    }
}
