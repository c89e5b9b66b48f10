//! Comparator predictors under Gaussian random effects.

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::glm::fit_logistic;
use crate::inference::score;
use crate::model::{
    logistic, observed_loglik, softmax_in_place, component_loglik_from_offsets, AreaSample, Dataset,
    MixtureParams, PopulationCrossTab,
};
use crate::predict::posterior_mean_intercept;
use crate::quadrature::gauss_hermite;
use crate::seed;

/// ML fit of the logistic model with `alpha_i ~ N(0, sigma^2)` and intercept `mu`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianFit {
    pub beta: Vec<f64>,
    pub mu: f64,
    /// 0 when the fit collapsed to the homogeneous model
    pub sigma: f64,
    pub loglik: f64,
    pub aic: f64,
    pub bic: f64,
    pub n_quad: usize,
    pub boundary: bool,
    pub iterations: usize,
    pub converged: bool,
}

impl GaussianFit {
    pub fn n_free(&self) -> usize {
        self.beta.len() + 2
    }
}

fn quadrature_params(beta: &[f64], mu: f64, sigma: f64, nodes: &[f64], weights: &[f64]) -> MixtureParams {
    MixtureParams::from_parts(beta.to_vec(), nodes.iter().map(|z| mu + sigma * z).collect(), weights.to_vec())
}

/// Quadrature approximation of the Gaussian random-intercept log-likelihood.
pub fn gaussian_loglik(data: &Dataset, beta: &[f64], mu: f64, sigma: f64, n_quad: usize) -> Result<f64> {
    let (nodes, weights) = gauss_hermite(n_quad);
    observed_loglik(&quadrature_params(beta, mu, sigma, &nodes, &weights), data)
}

/// Objective and gradient in `(beta, mu, log sigma)`.
fn objective(data: &Dataset, theta: &[f64], nodes: &[f64], weights: &[f64]) -> Result<(f64, DVector<f64>)> {
    let p = data.p();
    let g = nodes.len();
    let sigma = theta[p + 1].exp();
    let params = quadrature_params(&theta[..p], theta[p], sigma, nodes, weights);
    let ll = observed_loglik(&params, data)?;
    let s = score(&params, data)?;
    let mut grad = DVector::zeros(p + 2);
    for a in 0..p {
        grad[a] = s[a];
    }
    for c in 0..g {
        grad[p] += s[p + c];
        grad[p + 1] += sigma * nodes[c] * s[p + c];
    }
    Ok((ll, grad))
}

struct Bfgs {
    theta: Vec<f64>,
    value: f64,
    iterations: usize,
    converged: bool,
}

/// Maximizes `f` by BFGS with a backtracking Armijo line search.
fn bfgs_maximize<F>(f: F, start: Vec<f64>, max_iter: usize, grad_tol: f64) -> Result<Bfgs>
where
    F: Fn(&[f64]) -> Result<(f64, DVector<f64>)>,
{
    let k = start.len();
    let mut x = DVector::from_vec(start);
    let (mut fx, mut gx) = f(x.as_slice())?;
    let mut h = DMatrix::<f64>::identity(k, k);
    let mut iterations = 0;
    let mut converged = gx.amax() < grad_tol;
    while !converged && iterations < max_iter {
        iterations += 1;
        let mut dir = &h * &gx;
        if dir.dot(&gx) <= 0.0 {
            h = DMatrix::identity(k, k);
            dir = gx.clone();
        }
        let slope = dir.dot(&gx);
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..50 {
            let cand = &x + &dir * t;
            if let Ok((fc, gc)) = f(cand.as_slice()) {
                if fc.is_finite() && fc >= fx + 1e-4 * t * slope {
                    accepted = Some((cand, fc, gc));
                    break;
                }
            }
            t *= 0.5;
        }
        let Some((xn, fxn, gxn)) = accepted else { break };
        let s = &xn - &x;
        let y = &gx - &gxn; // gradient of -f
        let sy = s.dot(&y);
        let rel = (fxn - fx).abs() / (1.0 + fx.abs());
        x = xn;
        fx = fxn;
        gx = gxn;
        if sy > 1e-12 {
            let rho = 1.0 / sy;
            let id = DMatrix::<f64>::identity(k, k);
            let left = &id - &s * y.transpose() * rho;
            let right = &id - &y * s.transpose() * rho;
            h = &left * &h * &right + &s * s.transpose() * rho;
        }
        converged = gx.amax() < grad_tol || rel < 1e-13;
    }
    Ok(Bfgs { theta: x.as_slice().to_vec(), value: fx, iterations, converged })
}

/// Below this the random-effect scale is treated as zero.
pub const SIGMA_BOUNDARY: f64 = 1e-4;

/// ML fit by fixed Gauss-Hermite quadrature (`n_quad >= 5`, typically 15).
pub fn fit_gaussian(data: &Dataset, n_quad: usize) -> Result<GaussianFit> {
    if n_quad < 5 {
        return Err(Error::InvalidInput(format!("n_quad must be at least 5, got {n_quad}")));
    }
    let p = data.p();
    let m = data.m();
    let hom = fit_logistic(data)?;
    let (nodes, weights) = gauss_hermite(n_quad);
    let mut start = hom.beta.clone();
    start.push(hom.intercept);
    start.push(0.5f64.ln());
    let run = bfgs_maximize(|t| objective(data, t, &nodes, &weights), start, 500, 1e-6)?;
    let sigma = run.theta[p + 1].exp();
    let k = p + 2;
    let ic = |ll: f64| (-2.0 * ll + 2.0 * k as f64, -2.0 * ll + k as f64 * (m as f64).ln());
    if sigma < SIGMA_BOUNDARY || run.value < hom.loglik {
        let (aic, bic) = ic(hom.loglik);
        return Ok(GaussianFit {
            beta: hom.beta,
            mu: hom.intercept,
            sigma: 0.0,
            loglik: hom.loglik,
            aic,
            bic,
            n_quad,
            boundary: true,
            iterations: run.iterations,
            converged: run.converged,
        });
    }
    let (aic, bic) = ic(run.value);
    Ok(GaussianFit {
        beta: run.theta[..p].to_vec(),
        mu: run.theta[p],
        sigma,
        loglik: run.value,
        aic,
        bic,
        n_quad,
        boundary: false,
        iterations: run.iterations,
        converged: run.converged,
    })
}

/// `N^{-1} sum count * logistic(x' beta + shift)`.
fn plugin_mean(crosstab: &PopulationCrossTab, beta: &[f64], shift: f64) -> Result<f64> {
    if crosstab.p() != beta.len() {
        return Err(Error::Dimension(format!("cross-tabulation for {} has p = {}", crosstab.area_id, crosstab.p())));
    }
    if crosstab.population_size() == 0 {
        return Err(Error::InvalidInput(format!("area {} has zero population", crosstab.area_id)));
    }
    Ok(crosstab.mean_probability(beta, shift))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EbpOptions {
    /// `B`; `2B` values of the random effect are used in total
    pub draws: usize,
    pub antithetic: bool,
}

impl Default for EbpOptions {
    fn default() -> Self {
        Self { draws: 2500, antithetic: true }
    }
}

/// Monte Carlo EBP under the Gaussian fit.
///
/// Draws `alpha ~ N(0, sigma^2)` (and their negatives when antithetic) and
/// weights each plug-in mean by the area's sample likelihood, normalized in
/// log space. The stream is keyed by `(seed, area_id)`.
pub fn gaussian_ebp(
    fit: &GaussianFit,
    sample: Option<&AreaSample>,
    crosstab: &PopulationCrossTab,
    options: EbpOptions,
    rng_seed: u64,
) -> Result<f64> {
    if options.draws == 0 {
        return Err(Error::InvalidInput("need at least one Monte Carlo draw".into()));
    }
    if fit.sigma == 0.0 {
        return plugin_mean(crosstab, &fit.beta, fit.mu);
    }
    let mut rng = seed::rng(seed::derive_label(rng_seed, &crosstab.area_id));
    let total = 2 * options.draws;
    let mut alphas = Vec::with_capacity(total);
    for _ in 0..options.draws {
        let z: f64 = StandardNormal.sample(&mut rng);
        alphas.push(fit.sigma * z);
        if options.antithetic {
            alphas.push(-fit.sigma * z);
        } else {
            let z2: f64 = StandardNormal.sample(&mut rng);
            alphas.push(fit.sigma * z2);
        }
    }
    let offsets = sample.filter(|a| !a.is_empty()).map(|a| a.offsets(&fit.beta));
    let mut log_w: Vec<f64> = alphas
        .iter()
        .map(|&a| match (&offsets, sample) {
            (Some(o), Some(s)) => component_loglik_from_offsets(o, &s.y, fit.mu + a),
            _ => 0.0,
        })
        .collect();
    softmax_in_place(&mut log_w);
    plugin_mean(crosstab, &fit.beta, fit.mu)?;
    // logistic(o + s) = 1 / (1 + e^{-o} e^{-s}) saves one exp per profile and draw
    let pop_offsets = crosstab.offsets(&fit.beta);
    let exp_neg: Vec<f64> = pop_offsets.iter().map(|o| (-o).exp()).collect();
    let counts = crosstab.counts();
    let n_pop = crosstab.population_size() as f64;
    let mut est = 0.0;
    for (w, &a) in log_w.iter().zip(&alphas) {
        let shift = fit.mu + a;
        let es = (-shift).exp();
        let mut total = 0.0;
        for ((e, &c), o) in exp_neg.iter().zip(counts).zip(&pop_offsets) {
            let prod = e * es;
            let pr = if prod.is_nan() { logistic(o + shift) } else { 1.0 / (1.0 + prod) };
            total += c as f64 * pr;
        }
        est += w * total / n_pop;
    }
    Ok(est)
}

/// Posterior mode of `alpha_i` under the Gaussian fit (0 without a sample).
pub fn gaussian_posterior_mode(fit: &GaussianFit, sample: Option<&AreaSample>) -> f64 {
    let Some(area) = sample.filter(|a| !a.is_empty()) else { return 0.0 };
    if fit.sigma == 0.0 {
        return 0.0;
    }
    let prec = 1.0 / (fit.sigma * fit.sigma);
    let offsets = area.offsets(&fit.beta);
    let mut a = 0.0;
    for _ in 0..100 {
        let (mut grad, mut curv) = (-prec * a, prec);
        for (j, &o) in offsets.iter().enumerate() {
            let pr = logistic(o + fit.mu + a);
            grad += area.y[j] as f64 - pr;
            curv += pr * (1.0 - pr);
        }
        let step = grad / curv;
        a += step;
        if step.abs() < 1e-12 {
            break;
        }
    }
    a
}

/// Where the area effect of the plug-in predictor comes from.
#[derive(Debug, Clone, Copy)]
pub enum NaiveSource<'a> {
    Gaussian(&'a GaussianFit),
    Mixture(&'a MixtureParams),
}

/// Plug-in predictor `N^{-1} sum logistic(alpha_hat + x' beta)`.
pub fn naive_plugin(source: NaiveSource<'_>, sample: Option<&AreaSample>, crosstab: &PopulationCrossTab) -> Result<f64> {
    match source {
        NaiveSource::Gaussian(fit) => {
            let a = gaussian_posterior_mode(fit, sample);
            plugin_mean(crosstab, &fit.beta, fit.mu + a)
        }
        NaiveSource::Mixture(params) => {
            let tau = match sample {
                Some(s) => crate::em::area_posterior(s, params),
                None => params.pi.clone(),
            };
            let a = posterior_mean_intercept(params, &tau);
            plugin_mean(crosstab, &params.beta, params.mean_intercept() + a)
        }
    }
}
