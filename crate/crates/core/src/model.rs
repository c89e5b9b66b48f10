//! Domain types and likelihood of the finite-mixture mixed logistic model.
//!
//! Conditional on an area sitting in mixture component `g`, responses are
//! independent Bernoulli with `logit p_ijg = x_ij' beta + xi_g`. There is no
//! separate fixed intercept: the locations `xi_g` absorb it, and the overall
//! intercept is reported as `sum_g pi_g xi_g`.

use crate::error::{Error, Result};

/// Logistic function, evaluated without overflow for any finite `eta`.
#[inline]
pub fn logistic(eta: f64) -> f64 {
    if eta >= 0.0 {
        1.0 / (1.0 + (-eta).exp())
    } else {
        let e = eta.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + e^eta)` as `max(eta, 0) + log(1 + e^{-|eta|})`.
#[inline]
pub fn log1pexp(eta: f64) -> f64 {
    eta.max(0.0) + (-eta.abs()).exp().ln_1p()
}

/// `log(sum_k exp(v_k))`; `-inf` for an empty slice or all `-inf` entries.
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Normalizes log-weights in place into probabilities. Returns the log normalizer.
pub fn softmax_in_place(log_w: &mut [f64]) -> f64 {
    let lse = log_sum_exp(log_w);
    for w in log_w.iter_mut() {
        *w = (*w - lse).exp();
    }
    lse
}

/// One sampled unit.
#[derive(Debug, Clone, PartialEq)]
pub struct UnitRecord {
    pub area_id: String,
    pub y: u8,
    pub x: Vec<f64>,
}

/// The sampled units of one small area. Covariates are stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct AreaSample {
    pub area_id: String,
    pub y: Vec<u8>,
    x: Vec<f64>,
    p: usize,
}

impl AreaSample {
    pub fn new(area_id: impl Into<String>, p: usize, y: Vec<u8>, x: Vec<f64>) -> Result<Self> {
        if x.len() != y.len() * p {
            return Err(Error::Dimension(format!(
                "area sample has {} responses but {} covariate values (p = {p})",
                y.len(),
                x.len()
            )));
        }
        if let Some(bad) = y.iter().find(|&&v| v > 1) {
            return Err(Error::InvalidInput(format!("response {bad} is not binary")));
        }
        Ok(Self { area_id: area_id.into(), y, x, p })
    }

    /// An area with no sampled units.
    pub fn empty(area_id: impl Into<String>, p: usize) -> Self {
        Self { area_id: area_id.into(), y: Vec::new(), x: Vec::new(), p }
    }

    /// Sample size `n_i`.
    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    /// Covariate vector of unit `j`.
    pub fn x(&self, j: usize) -> &[f64] {
        &self.x[j * self.p..(j + 1) * self.p]
    }

    pub fn x_flat(&self) -> &[f64] {
        &self.x
    }

    /// Number of successes `y_i.`.
    pub fn successes(&self) -> usize {
        self.y.iter().map(|&v| v as usize).sum()
    }

    pub fn records(&self) -> impl Iterator<Item = UnitRecord> + '_ {
        (0..self.n()).map(move |j| UnitRecord {
            area_id: self.area_id.clone(),
            y: self.y[j],
            x: self.x(j).to_vec(),
        })
    }

    /// `x_ij' beta` for every sampled unit.
    pub fn offsets(&self, beta: &[f64]) -> Vec<f64> {
        if self.p == 0 {
            return vec![0.0; self.n()];
        }
        self.x.chunks_exact(self.p).map(|row| dot(row, beta)).collect()
    }
}

/// A full sample: `m` areas sharing the covariate dimension `p`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    p: usize,
    pub areas: Vec<AreaSample>,
}

impl Dataset {
    pub fn new(p: usize, areas: Vec<AreaSample>) -> Result<Self> {
        if let Some(a) = areas.iter().find(|a| a.p != p) {
            return Err(Error::Dimension(format!(
                "area {} has p = {}, dataset has p = {p}",
                a.area_id, a.p
            )));
        }
        Ok(Self { p, areas })
    }

    /// Groups records by area, keeping areas in order of first appearance.
    pub fn from_records(records: &[UnitRecord]) -> Result<Self> {
        let p = records
            .first()
            .map(|r| r.x.len())
            .ok_or_else(|| Error::InvalidInput("no records".into()))?;
        let mut order: Vec<String> = Vec::new();
        let mut index = std::collections::HashMap::new();
        let mut ys: Vec<Vec<u8>> = Vec::new();
        let mut xs: Vec<Vec<f64>> = Vec::new();
        for r in records {
            if r.x.len() != p {
                return Err(Error::Dimension(format!(
                    "record in area {} has {} covariates, expected {p}",
                    r.area_id,
                    r.x.len()
                )));
            }
            let k = *index.entry(r.area_id.clone()).or_insert_with(|| {
                order.push(r.area_id.clone());
                ys.push(Vec::new());
                xs.push(Vec::new());
                order.len() - 1
            });
            ys[k].push(r.y);
            xs[k].extend_from_slice(&r.x);
        }
        let areas = order
            .into_iter()
            .zip(ys.into_iter().zip(xs))
            .map(|(id, (y, x))| AreaSample::new(id, p, y, x))
            .collect::<Result<Vec<_>>>()?;
        Self::new(p, areas)
    }

    pub fn p(&self) -> usize {
        self.p
    }

    /// Number of areas `m`.
    pub fn m(&self) -> usize {
        self.areas.len()
    }

    /// Total sample size.
    pub fn n_total(&self) -> usize {
        self.areas.iter().map(AreaSample::n).sum()
    }

    pub fn area(&self, id: &str) -> Option<&AreaSample> {
        self.areas.iter().find(|a| a.area_id == id)
    }
}

/// Population counts of an area by covariate profile.
#[derive(Debug, Clone, PartialEq)]
pub struct PopulationCrossTab {
    pub area_id: String,
    x: Vec<f64>,
    counts: Vec<u64>,
    p: usize,
}

impl PopulationCrossTab {
    pub fn new(area_id: impl Into<String>, p: usize, x: Vec<f64>, counts: Vec<u64>) -> Result<Self> {
        if x.len() != counts.len() * p {
            return Err(Error::Dimension(format!(
                "crosstab has {} profiles but {} covariate values (p = {p})",
                counts.len(),
                x.len()
            )));
        }
        Ok(Self { area_id: area_id.into(), x, counts, p })
    }

    /// One profile per unit, each with count 1.
    pub fn from_units(area_id: impl Into<String>, p: usize, x: Vec<f64>) -> Result<Self> {
        if p == 0 {
            return Err(Error::Dimension("unit-level population needs p >= 1".into()));
        }
        let n = x.len() / p;
        Self::new(area_id, p, x, vec![1; n])
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn n_profiles(&self) -> usize {
        self.counts.len()
    }

    pub fn profile(&self, k: usize) -> (&[f64], u64) {
        (&self.x[k * self.p..(k + 1) * self.p], self.counts[k])
    }

    pub fn profiles(&self) -> impl Iterator<Item = (&[f64], u64)> + '_ {
        (0..self.n_profiles()).map(move |k| self.profile(k))
    }

    /// Area population size `N_i`.
    pub fn population_size(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// `x' beta` for each profile.
    pub fn offsets(&self, beta: &[f64]) -> Vec<f64> {
        (0..self.n_profiles()).map(|k| dot(self.profile(k).0, beta)).collect()
    }

    /// Mean of `logistic(x' beta + shift)` over the population units.
    pub fn mean_probability(&self, beta: &[f64], shift: f64) -> f64 {
        let total: f64 = self
            .profiles()
            .map(|(x, c)| c as f64 * logistic(dot(x, beta) + shift))
            .sum();
        total / self.population_size() as f64
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }
}

/// Parameters `(beta, xi, pi)` of the finite-mixture model.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureParams {
    pub beta: Vec<f64>,
    pub xi: Vec<f64>,
    pub pi: Vec<f64>,
}

impl MixtureParams {
    /// Validates masses and puts components in ascending-location order.
    pub fn new(beta: Vec<f64>, xi: Vec<f64>, pi: Vec<f64>) -> Result<Self> {
        if xi.is_empty() || xi.len() != pi.len() {
            return Err(Error::Dimension(format!(
                "need G >= 1 locations and masses, got {} and {}",
                xi.len(),
                pi.len()
            )));
        }
        if pi.iter().any(|&w| !(w > 0.0)) {
            return Err(Error::InvalidInput("mixture masses must be positive".into()));
        }
        let total: f64 = pi.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidInput(format!("mixture masses sum to {total}, not 1")));
        }
        let mut out = Self { beta, xi, pi };
        out.canonicalize();
        Ok(out)
    }

    /// Builds parameters without validation or reordering.
    pub fn from_parts(beta: Vec<f64>, xi: Vec<f64>, pi: Vec<f64>) -> Self {
        Self { beta, xi, pi }
    }

    pub fn p(&self) -> usize {
        self.beta.len()
    }

    pub fn g(&self) -> usize {
        self.xi.len()
    }

    /// Number of free parameters `K = p + G + (G - 1)`.
    pub fn n_free(&self) -> usize {
        n_free(self.p(), self.g())
    }

    /// Sorts components by ascending location. Returns the permutation applied
    /// (`new[k] = old[perm[k]]`).
    pub fn canonicalize(&mut self) -> Vec<usize> {
        let mut perm: Vec<usize> = (0..self.g()).collect();
        perm.sort_by(|&a, &b| self.xi[a].total_cmp(&self.xi[b]));
        self.xi = perm.iter().map(|&k| self.xi[k]).collect();
        self.pi = perm.iter().map(|&k| self.pi[k]).collect();
        perm
    }

    /// Overall intercept `sum_g pi_g xi_g`.
    pub fn mean_intercept(&self) -> f64 {
        self.xi.iter().zip(&self.pi).map(|(x, w)| x * w).sum()
    }

    /// Variance of the estimated mixing distribution; a convenience summary.
    pub fn implied_variance(&self) -> f64 {
        let mean = self.mean_intercept();
        self.xi.iter().zip(&self.pi).map(|(x, w)| w * (x - mean).powi(2)).sum()
    }

    /// Free-parameter vector `(beta, xi, pi_1..pi_{G-1})`.
    pub fn to_free(&self) -> Vec<f64> {
        let g = self.g();
        let mut v = Vec::with_capacity(self.n_free());
        v.extend_from_slice(&self.beta);
        v.extend_from_slice(&self.xi);
        v.extend_from_slice(&self.pi[..g - 1]);
        v
    }

    /// Inverse of [`to_free`](Self::to_free) with `pi_G = 1 - sum`. No validation.
    pub fn from_free(p: usize, g: usize, free: &[f64]) -> Self {
        assert_eq!(free.len(), n_free(p, g), "free vector length");
        let beta = free[..p].to_vec();
        let xi = free[p..p + g].to_vec();
        let mut pi = free[p + g..].to_vec();
        let last = 1.0 - pi.iter().sum::<f64>();
        pi.push(last);
        Self { beta, xi, pi }
    }

    /// Ensures the parameters are usable for likelihood evaluation.
    pub fn check_against(&self, data_p: usize) -> Result<()> {
        if self.p() != data_p {
            return Err(Error::Dimension(format!(
                "parameters have p = {}, data has p = {data_p}",
                self.p()
            )));
        }
        if self.xi.len() != self.pi.len() || self.xi.is_empty() {
            return Err(Error::Dimension("mismatched locations and masses".into()));
        }
        Ok(())
    }
}

/// Free-parameter count for `p` slopes and `g` components.
pub fn n_free(p: usize, g: usize) -> usize {
    p + g + g.saturating_sub(1)
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `eta = x' beta + xi_g`.
pub fn linear_predictor(beta: &[f64], xi_g: f64, x: &[f64]) -> Result<f64> {
    if beta.len() != x.len() {
        return Err(Error::Dimension(format!(
            "covariate vector has length {}, beta has length {}",
            x.len(),
            beta.len()
        )));
    }
    Ok(dot(x, beta) + xi_g)
}

/// `log f_ig`: Bernoulli log-likelihood of an area's sample given component location `xi_g`.
pub fn area_component_loglik(area: &AreaSample, beta: &[f64], xi_g: f64) -> Result<f64> {
    if area.p() != beta.len() {
        return Err(Error::Dimension(format!(
            "area has p = {}, beta has length {}",
            area.p(),
            beta.len()
        )));
    }
    Ok(component_loglik_from_offsets(&area.offsets(beta), &area.y, xi_g))
}

#[inline]
pub(crate) fn component_loglik_from_offsets(offsets: &[f64], y: &[u8], xi_g: f64) -> f64 {
    offsets
        .iter()
        .zip(y)
        .map(|(&o, &yy)| {
            let eta = o + xi_g;
            yy as f64 * eta - log1pexp(eta)
        })
        .sum()
}

/// `log pi_g + log f_ig` for every component.
pub(crate) fn joint_log_weights(area: &AreaSample, params: &MixtureParams) -> Vec<f64> {
    let offsets = area.offsets(&params.beta);
    params
        .xi
        .iter()
        .zip(&params.pi)
        .map(|(&xi, &w)| w.ln() + component_loglik_from_offsets(&offsets, &area.y, xi))
        .collect()
}

/// Contribution `log sum_g pi_g f_ig` of one area (0 for an empty area).
pub fn area_loglik(area: &AreaSample, params: &MixtureParams) -> f64 {
    if area.is_empty() {
        return 0.0;
    }
    log_sum_exp(&joint_log_weights(area, params))
}

/// Observed-data log-likelihood `sum_i log sum_g pi_g f_ig`.
pub fn observed_loglik(params: &MixtureParams, data: &Dataset) -> Result<f64> {
    params.check_against(data.p())?;
    Ok(data.areas.iter().map(|a| area_loglik(a, params)).sum())
}

/// Penalized-likelihood criteria.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InfoCriteria {
    pub aic: f64,
    pub bic: f64,
}

/// AIC and BIC with `K = p + G + (G - 1)` free parameters over `m` areas.
pub fn aic_bic(loglik: f64, p: usize, g: usize, m: usize) -> InfoCriteria {
    let k = n_free(p, g) as f64;
    InfoCriteria { aic: -2.0 * loglik + 2.0 * k, bic: -2.0 * loglik + k * (m as f64).ln() }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn toy_area() -> AreaSample {
        AreaSample::new("a", 2, vec![1, 0, 1], vec![0.5, -1.0, 1.5, 0.2, -0.3, 0.0]).unwrap()
    }

    #[test]
    fn identity_predictor() {
        let eta = linear_predictor(&[0.0, 0.0], 0.0, &[3.0, -2.0]).unwrap();
        assert_eq!(eta, 0.0);
        assert_eq!(logistic(eta), 0.5);
    }

    #[test]
    fn fitted_coefficients_compose() {
        // intercept -3.052; M:25-34 +0.118; middle school +0.206; log U-count slope 0.113 at 1
        let beta = [0.118, 0.206, 0.113];
        let eta = linear_predictor(&beta, -3.052, &[1.0, 1.0, 1.0]).unwrap();
        assert_relative_eq!(eta, -2.615, epsilon = 1e-12);
        assert!((logistic(eta) - 0.0683).abs() < 2e-4);
    }

    #[test]
    fn predictor_dimension_mismatch() {
        assert!(linear_predictor(&[1.0], 0.0, &[1.0, 2.0]).is_err());
    }

    #[test]
    fn logistic_stable_at_extremes() {
        assert_eq!(logistic(-800.0), 0.0);
        assert_eq!(logistic(800.0), 1.0);
        assert!(logistic(-30.0) > 0.0 && logistic(30.0) < 1.0);
        assert_relative_eq!(log1pexp(-800.0), 0.0);
        assert_relative_eq!(log1pexp(800.0), 800.0);
        assert_relative_eq!(log1pexp(0.3), (1.0 + 0.3f64.exp()).ln(), epsilon = 1e-15);
    }

    #[test]
    fn single_record_loglik() {
        let a = AreaSample::new("a", 1, vec![1], vec![0.0]).unwrap();
        let l = area_component_loglik(&a, &[2.0], 0.0).unwrap();
        assert_relative_eq!(l, -std::f64::consts::LN_2, epsilon = 1e-15);
    }

    #[test]
    fn all_zero_loglik() {
        let a = AreaSample::new("a", 1, vec![0; 7], vec![0.0; 7]).unwrap();
        let l = area_component_loglik(&a, &[1.0], 0.4).unwrap();
        assert_relative_eq!(l, -7.0 * (1.0 + 0.4f64.exp()).ln(), epsilon = 1e-13);
    }

    #[test]
    fn loglik_matches_bernoulli_product() {
        let a = toy_area();
        let beta = [0.7, -0.4];
        let xi = -0.25;
        let mut prod = 1.0;
        for j in 0..a.n() {
            let x = a.x(j);
            let q = 1.0 / (1.0 + (-(x[0] * beta[0] + x[1] * beta[1] + xi)).exp());
            prod *= if a.y[j] == 1 { q } else { 1.0 - q };
        }
        let l = area_component_loglik(&a, &beta, xi).unwrap();
        assert_relative_eq!(l, prod.ln(), epsilon = 1e-13);
    }

    #[test]
    fn empty_area_contributes_nothing() {
        let params = MixtureParams::new(vec![1.0], vec![-1.0, 1.0], vec![0.4, 0.6]).unwrap();
        assert_eq!(area_loglik(&AreaSample::empty("z", 1), &params), 0.0);
    }

    #[test]
    fn info_criteria_accounting() {
        let ic = aic_bic(-21833.599, 9, 3, 611);
        assert_eq!(n_free(9, 3), 14);
        assert!((ic.aic - 43695.199).abs() < 2e-3);
        assert_eq!(aic_bic(0.0, 0, 0, 10).aic, 0.0);
        assert_eq!(n_free(0, 1), 1);
    }

    #[test]
    fn canonical_order_and_free_chart() {
        let params = MixtureParams::new(vec![0.3], vec![2.0, -1.0, 0.5], vec![0.2, 0.5, 0.3]).unwrap();
        assert_eq!(params.xi, vec![-1.0, 0.5, 2.0]);
        assert_eq!(params.pi, vec![0.5, 0.3, 0.2]);
        let free = params.to_free();
        assert_eq!(free.len(), 6);
        let back = MixtureParams::from_free(1, 3, &free);
        assert_eq!(back.beta, params.beta);
        assert_eq!(back.xi, params.xi);
        assert_relative_eq!(back.pi[2], 0.2, epsilon = 1e-15);
    }

    #[test]
    fn invalid_masses_rejected() {
        assert!(MixtureParams::new(vec![], vec![0.0, 1.0], vec![0.5, 0.6]).is_err());
        assert!(MixtureParams::new(vec![], vec![0.0, 1.0], vec![1.0, 0.0]).is_err());
        assert!(MixtureParams::new(vec![], vec![], vec![]).is_err());
    }

    #[test]
    fn records_grouped_by_area() {
        let recs = vec![
            UnitRecord { area_id: "b".into(), y: 1, x: vec![1.0] },
            UnitRecord { area_id: "a".into(), y: 0, x: vec![2.0] },
            UnitRecord { area_id: "b".into(), y: 0, x: vec![3.0] },
        ];
        let d = Dataset::from_records(&recs).unwrap();
        assert_eq!(d.m(), 2);
        assert_eq!(d.areas[0].area_id, "b");
        assert_eq!(d.areas[0].n(), 2);
        assert_eq!(d.areas[0].x(1), &[3.0]);
        let bad = vec![
            UnitRecord { area_id: "b".into(), y: 1, x: vec![1.0] },
            UnitRecord { area_id: "a".into(), y: 0, x: vec![2.0, 1.0] },
        ];
        assert!(Dataset::from_records(&bad).is_err());
        assert!(AreaSample::new("a", 1, vec![2], vec![0.0]).is_err());
    }
}
