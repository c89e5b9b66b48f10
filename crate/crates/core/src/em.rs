//! Nonparametric maximum likelihood by EM.
//!
//! Each iteration computes posterior component weights (E-step), updates the
//! masses in closed form and takes one damped Newton pass on the expected
//! complete-data log-likelihood for `(beta, xi)` (a generalized EM step, so
//! the observed log-likelihood never decreases). Several starts are run and the
//! best converged one is kept.

use log::{debug, warn};
use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, Exp1, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::glm::fit_logistic;
use crate::inference::{information_matrices, InformationMatrices};
use crate::linalg::solve_spd;
use crate::model::{
    aic_bic, component_loglik_from_offsets, joint_log_weights, logistic, n_free, Dataset,
    MixtureParams,
};
use crate::quadrature::gauss_hermite;
use crate::seed;

/// Posterior component weights, one row per area.
pub type Tau = DMatrix<f64>;

#[derive(Debug, Clone, PartialEq)]
pub struct EmConfig {
    pub max_iter: usize,
    /// Stop when `|delta loglik| / (1 + |loglik|)` falls below this.
    pub tol_rel_loglik: f64,
    pub n_random_starts: usize,
    /// Scale of the quadrature-node spread and of random location perturbations.
    pub perturb_scale: f64,
    /// Components lighter than this at convergence are dropped.
    pub min_mass: f64,
    pub rng_seed: u64,
}

impl Default for EmConfig {
    fn default() -> Self {
        Self {
            max_iter: 500,
            tol_rel_loglik: 1e-8,
            n_random_starts: 10,
            perturb_scale: 0.5,
            min_mass: 1e-6,
            rng_seed: 20_190_101,
        }
    }
}

impl EmConfig {
    pub fn validate(&self, g: usize) -> Result<()> {
        if g == 0 {
            return Err(Error::InvalidInput("G must be at least 1".into()));
        }
        if !(self.tol_rel_loglik > 0.0) {
            return Err(Error::InvalidInput("tolerance must be positive".into()));
        }
        if self.max_iter == 0 {
            return Err(Error::InvalidInput("max_iter must be at least 1".into()));
        }
        if !(self.min_mass > 0.0 && self.min_mass < 1.0 / g as f64) {
            return Err(Error::InvalidInput(format!("min_mass must lie in (0, 1/{g})")));
        }
        if !(self.perturb_scale >= 0.0) {
            return Err(Error::InvalidInput("perturb_scale must be non-negative".into()));
        }
        Ok(())
    }
}

/// Posterior weights of one area; the prior masses for an empty area.
pub fn area_posterior(area: &crate::model::AreaSample, params: &MixtureParams) -> Vec<f64> {
    if area.is_empty() {
        return params.pi.clone();
    }
    let mut w = joint_log_weights(area, params);
    crate::model::softmax_in_place(&mut w);
    w
}

pub(crate) fn e_step_with_loglik(params: &MixtureParams, data: &Dataset) -> (Tau, f64) {
    let g = params.g();
    let mut tau = Tau::zeros(data.m(), g);
    let mut ll = 0.0;
    for (i, area) in data.areas.iter().enumerate() {
        if area.is_empty() {
            for k in 0..g {
                tau[(i, k)] = params.pi[k];
            }
            continue;
        }
        let mut w = joint_log_weights(area, params);
        ll += crate::model::softmax_in_place(&mut w);
        for k in 0..g {
            tau[(i, k)] = w[k];
        }
    }
    (tau, ll)
}

/// E-step: `tau_ig = pi_g f_ig / sum_l pi_l f_il`.
pub fn e_step(params: &MixtureParams, data: &Dataset) -> Result<Tau> {
    params.check_against(data.p())?;
    Ok(e_step_with_loglik(params, data).0)
}

/// Closed-form mass update: column means of `tau`.
pub fn m_step_masses(tau: &Tau) -> Vec<f64> {
    let m = tau.nrows() as f64;
    tau.column_iter().map(|c| c.sum() / m).collect()
}

/// Expected complete-data log-likelihood restricted to `(beta, xi)`.
pub fn q_regression(tau: &Tau, data: &Dataset, beta: &[f64], xi: &[f64]) -> f64 {
    let mut q = 0.0;
    for (i, area) in data.areas.iter().enumerate() {
        if area.is_empty() {
            continue;
        }
        let offsets = area.offsets(beta);
        for (k, &x) in xi.iter().enumerate() {
            let t = tau[(i, k)];
            if t > 0.0 {
                q += t * component_loglik_from_offsets(&offsets, &area.y, x);
            }
        }
    }
    q
}

/// Gradient and negative Hessian of [`q_regression`] for the stacked `(beta, xi)`.
pub fn q_regression_derivatives(
    tau: &Tau,
    data: &Dataset,
    beta: &[f64],
    xi: &[f64],
) -> (DVector<f64>, DMatrix<f64>) {
    let p = beta.len();
    let g = xi.len();
    let k = p + g;
    let mut grad = DVector::<f64>::zeros(k);
    let mut info = DMatrix::<f64>::zeros(k, k);
    let mut rx = vec![0.0; p];
    let mut wx = vec![0.0; p];
    let mut wxx = vec![0.0; p * p];
    for (i, area) in data.areas.iter().enumerate() {
        if area.is_empty() {
            continue;
        }
        let offsets = area.offsets(beta);
        for c in 0..g {
            let t = tau[(i, c)];
            if t == 0.0 {
                continue;
            }
            let (mut r_sum, mut w_sum) = (0.0, 0.0);
            rx.iter_mut().for_each(|v| *v = 0.0);
            wx.iter_mut().for_each(|v| *v = 0.0);
            wxx.iter_mut().for_each(|v| *v = 0.0);
            for (j, &o) in offsets.iter().enumerate() {
                let mu = logistic(o + xi[c]);
                let r = area.y[j] as f64 - mu;
                let w = mu * (1.0 - mu);
                r_sum += r;
                w_sum += w;
                let x = area.x(j);
                for a in 0..p {
                    rx[a] += r * x[a];
                    wx[a] += w * x[a];
                    for b in 0..=a {
                        wxx[a * p + b] += w * x[a] * x[b];
                    }
                }
            }
            for a in 0..p {
                grad[a] += t * rx[a];
                info[(a, p + c)] += t * wx[a];
                for b in 0..=a {
                    info[(a, b)] += t * wxx[a * p + b];
                }
            }
            grad[p + c] += t * r_sum;
            info[(p + c, p + c)] += t * w_sum;
        }
    }
    for a in 0..k {
        for b in 0..a {
            let v = info[(a, b)] + info[(b, a)];
            info[(a, b)] = v;
            info[(b, a)] = v;
        }
    }
    (grad, info)
}

/// `log f_ig` for every area and component (zero rows for empty areas).
pub(crate) fn component_logliks(data: &Dataset, beta: &[f64], xi: &[f64]) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(data.m(), xi.len());
    for (i, area) in data.areas.iter().enumerate() {
        if area.is_empty() {
            continue;
        }
        let offsets = area.offsets(beta);
        for (k, &x) in xi.iter().enumerate() {
            out[(i, k)] = component_loglik_from_offsets(&offsets, &area.y, x);
        }
    }
    out
}

/// E-step from precomputed component log-likelihoods.
fn e_step_from_logliks(logf: &DMatrix<f64>, pi: &[f64]) -> (Tau, f64) {
    let g = pi.len();
    let log_pi: Vec<f64> = pi.iter().map(|w| w.ln()).collect();
    let mut tau = Tau::zeros(logf.nrows(), g);
    let mut ll = 0.0;
    let mut w = vec![0.0; g];
    for i in 0..logf.nrows() {
        for k in 0..g {
            w[k] = log_pi[k] + logf[(i, k)];
        }
        ll += crate::model::softmax_in_place(&mut w);
        for k in 0..g {
            tau[(i, k)] = w[k];
        }
    }
    (tau, ll)
}

fn weighted_sum(tau: &Tau, logf: &DMatrix<f64>) -> f64 {
    tau.iter().zip(logf.iter()).filter(|(t, _)| **t > 0.0).map(|(t, l)| t * l).sum()
}

/// Damped Newton pass; returns the new `(beta, xi)` and their component log-likelihoods.
fn newton_pass(
    tau: &Tau,
    data: &Dataset,
    params: &MixtureParams,
    logf: &DMatrix<f64>,
) -> Result<(Vec<f64>, Vec<f64>, DMatrix<f64>)> {
    let p = params.p();
    let (grad, info) = q_regression_derivatives(tau, data, &params.beta, &params.xi);
    let step = solve_spd(&info, &grad)?;
    let q0 = weighted_sum(tau, logf);
    let mut t = 1.0;
    for _ in 0..=30 {
        let beta: Vec<f64> = params.beta.iter().zip(step.iter()).map(|(b, s)| b + t * s).collect();
        let xi: Vec<f64> = params.xi.iter().zip(step.iter().skip(p)).map(|(x, s)| x + t * s).collect();
        let cand = component_logliks(data, &beta, &xi);
        if weighted_sum(tau, &cand) >= q0 {
            return Ok((beta, xi, cand));
        }
        t *= 0.5;
    }
    Ok((params.beta.clone(), params.xi.clone(), logf.clone()))
}

/// One damped Newton pass on `(beta, xi)` with `tau` held fixed.
///
/// The step is halved (at most 30 times) until the expected complete-data
/// log-likelihood does not decrease; if no such step exists the input is returned.
pub fn m_step_regression(tau: &Tau, data: &Dataset, params: &MixtureParams) -> Result<(Vec<f64>, Vec<f64>)> {
    params.check_against(data.p())?;
    let logf = component_logliks(data, &params.beta, &params.xi);
    let (beta, xi, _) = newton_pass(tau, data, params, &logf)?;
    Ok((beta, xi))
}

/// Repeats [`m_step_regression`] until the Newton step is below `tol`.
pub fn maximize_regression(
    tau: &Tau,
    data: &Dataset,
    params: &MixtureParams,
    max_passes: usize,
    tol: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut cur = params.clone();
    for _ in 0..max_passes {
        let (beta, xi) = m_step_regression(tau, data, &cur)?;
        let change = beta
            .iter()
            .chain(&xi)
            .zip(cur.beta.iter().chain(&cur.xi))
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        cur.beta = beta;
        cur.xi = xi;
        if change < tol {
            break;
        }
    }
    Ok((cur.beta, cur.xi))
}

/// Outcome of EM from a single start.
#[derive(Debug, Clone)]
pub struct EmRun {
    pub params: MixtureParams,
    pub tau: Tau,
    pub loglik: f64,
    pub loglik_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub final_delta: f64,
    /// Largest single-iteration decrease of the log-likelihood (0 if monotone).
    pub max_decrease: f64,
}

/// Runs EM from `start` until convergence or `max_iter`.
pub fn run_em(data: &Dataset, start: MixtureParams, config: &EmConfig) -> Result<EmRun> {
    start.check_against(data.p())?;
    let mut params = start;
    let mut logf = component_logliks(data, &params.beta, &params.xi);
    let (mut tau, mut ll) = e_step_from_logliks(&logf, &params.pi);
    let mut trace = vec![ll];
    let mut converged = false;
    let mut final_delta = f64::NAN;
    let mut max_decrease = 0.0f64;
    let mut iterations = 0;
    for it in 1..=config.max_iter {
        iterations = it;
        let pi = m_step_masses(&tau);
        let (beta, xi, new_logf) = newton_pass(&tau, data, &params, &logf)?;
        params = MixtureParams::from_parts(beta, xi, pi);
        logf = new_logf;
        let (new_tau, new_ll) = e_step_from_logliks(&logf, &params.pi);
        if !new_ll.is_finite() {
            return Err(Error::Numerical(format!("log-likelihood became {new_ll} at iteration {it}")));
        }
        final_delta = new_ll - ll;
        max_decrease = max_decrease.max(-final_delta);
        tau = new_tau;
        ll = new_ll;
        trace.push(ll);
        if final_delta.abs() / (1.0 + ll.abs()) < config.tol_rel_loglik {
            converged = true;
            break;
        }
    }
    let perm = params.canonicalize();
    let tau = Tau::from_fn(tau.nrows(), tau.ncols(), |i, k| tau[(i, perm[k])]);
    Ok(EmRun { params, tau, loglik: ll, loglik_trace: trace, iterations, converged, final_delta, max_decrease })
}

/// Homogeneous logistic start with locations spread over quadrature nodes.
pub fn deterministic_start(data: &Dataset, g: usize, config: &EmConfig) -> Result<MixtureParams> {
    let hom = fit_logistic(data)?;
    let (nodes, weights) = gauss_hermite(g);
    let xi = nodes.iter().map(|z| hom.intercept + config.perturb_scale * z).collect();
    Ok(MixtureParams::from_parts(hom.beta, xi, weights))
}

/// Perturbs the locations of `base` and redraws masses from a flat Dirichlet.
pub fn random_start(base: &MixtureParams, config: &EmConfig, index: u64) -> MixtureParams {
    let mut rng = seed::rng(seed::derive(config.rng_seed, index));
    let xi = base
        .xi
        .iter()
        .map(|x| {
            let z: f64 = StandardNormal.sample(&mut rng);
            x + config.perturb_scale * z
        })
        .collect();
    let draws: Vec<f64> = (0..base.g()).map(|_| Exp1.sample(&mut rng)).map(|e: f64| e.max(1e-12)).collect();
    let total: f64 = draws.iter().sum();
    let pi = draws.iter().map(|d| d / total).collect();
    MixtureParams::from_parts(base.beta.clone(), xi, pi)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitDiagnostics {
    pub requested_g: usize,
    pub iterations: usize,
    pub final_delta: f64,
    pub converged: bool,
    /// Index of the winning start (0 = deterministic).
    pub start_index: usize,
    pub n_starts: usize,
    pub dropped_components: usize,
    pub loglik_trace: Vec<f64>,
    pub max_decrease: f64,
}

/// A fitted finite-mixture model.
#[derive(Debug, Clone)]
pub struct FitResult {
    pub params: MixtureParams,
    pub tau: Tau,
    pub loglik: f64,
    pub aic: f64,
    pub bic: f64,
    pub n_free: usize,
    pub diagnostics: FitDiagnostics,
    /// `None` when the information matrix could not be inverted.
    pub information: Option<InformationMatrices>,
}

impl FitResult {
    pub fn g(&self) -> usize {
        self.params.g()
    }

    pub(crate) fn assemble(run: EmRun, data: &Dataset, diagnostics: FitDiagnostics) -> Self {
        let ic = aic_bic(run.loglik, run.params.p(), run.params.g(), data.m());
        let information = match information_matrices(&run.params, data) {
            Ok(info) => Some(info),
            Err(e) => {
                warn!("covariance unavailable for G = {}: {e}", run.params.g());
                None
            }
        };
        Self {
            n_free: n_free(run.params.p(), run.params.g()),
            params: run.params,
            tau: run.tau,
            loglik: run.loglik,
            aic: ic.aic,
            bic: ic.bic,
            diagnostics,
            information,
        }
    }
}

fn drop_light_components(params: &MixtureParams, min_mass: f64) -> Option<MixtureParams> {
    let keep: Vec<usize> = (0..params.g()).filter(|&k| params.pi[k] >= min_mass).collect();
    if keep.len() == params.g() || keep.is_empty() {
        return None;
    }
    let total: f64 = keep.iter().map(|&k| params.pi[k]).sum();
    Some(MixtureParams::from_parts(
        params.beta.clone(),
        keep.iter().map(|&k| params.xi[k]).collect(),
        keep.iter().map(|&k| params.pi[k] / total).collect(),
    ))
}

/// Fits a `G`-component model with multiple starts.
pub fn fit(data: &Dataset, g: usize, config: &EmConfig) -> Result<FitResult> {
    config.validate(g)?;
    if data.n_total() == 0 {
        return Err(Error::InvalidInput("no area has sampled units".into()));
    }
    let det = deterministic_start(data, g, config)?;
    let n_starts = 1 + if g > 1 { config.n_random_starts } else { 0 };
    let starts: Vec<MixtureParams> = (0..n_starts)
        .map(|s| if s == 0 { det.clone() } else { random_start(&det, config, s as u64) })
        .collect();
    let runs: Vec<Result<EmRun>> = starts.into_par_iter().map(|s| run_em(data, s, config)).collect();

    let mut best: Option<(usize, EmRun)> = None;
    let mut first_err = None;
    for (idx, run) in runs.into_iter().enumerate() {
        match run {
            Ok(run) => {
                let better = match &best {
                    None => true,
                    Some((_, b)) => (run.converged, run.loglik) > (b.converged, b.loglik),
                };
                if better {
                    best = Some((idx, run));
                }
            }
            Err(e) => {
                debug!("start {idx} failed: {e}");
                first_err.get_or_insert(e);
            }
        }
    }
    let Some((start_index, mut run)) = best else {
        return Err(first_err.unwrap_or_else(|| Error::Numerical("no EM start produced a fit".into())));
    };

    let mut dropped = 0;
    let mut iterations = run.iterations;
    let mut max_decrease = run.max_decrease;
    while let Some(reduced) = drop_light_components(&run.params, config.min_mass) {
        dropped += run.params.g() - reduced.g();
        debug!("dropping {} light component(s), refitting with G = {}", run.params.g() - reduced.g(), reduced.g());
        run = run_em(data, reduced, config)?;
        iterations += run.iterations;
        max_decrease = max_decrease.max(run.max_decrease);
    }
    if !run.converged {
        warn!("EM did not converge within {} iterations (G = {g})", config.max_iter);
    }
    let diagnostics = FitDiagnostics {
        requested_g: g,
        iterations,
        final_delta: run.final_delta,
        converged: run.converged,
        start_index,
        n_starts,
        dropped_components: dropped,
        loglik_trace: run.loglik_trace.clone(),
        max_decrease,
    };
    Ok(FitResult::assemble(run, data, diagnostics))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Criterion {
    #[default]
    Aic,
    Bic,
}

impl std::str::FromStr for Criterion {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "aic" => Ok(Criterion::Aic),
            "bic" => Ok(Criterion::Bic),
            other => Err(Error::InvalidInput(format!("unknown criterion {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub requested_g: usize,
    pub g: usize,
    pub loglik: f64,
    pub aic: f64,
    pub bic: f64,
    pub converged: bool,
}

#[derive(Debug, Clone)]
pub struct Selection {
    pub best: FitResult,
    pub candidates: Vec<Candidate>,
}

/// Fits every `G` in `g_min..=g_max` and keeps the one minimizing `criterion`.
/// Ties go to the smaller `G`.
pub fn select_g(data: &Dataset, g_min: usize, g_max: usize, config: &EmConfig, criterion: Criterion) -> Result<Selection> {
    if g_min == 0 || g_min > g_max {
        return Err(Error::InvalidInput(format!("invalid G range {g_min}..={g_max}")));
    }
    let fits: Vec<Result<FitResult>> = (g_min..=g_max).into_par_iter().map(|g| fit(data, g, config)).collect();
    let fits = fits.into_iter().collect::<Result<Vec<_>>>()?;
    let candidates = fits
        .iter()
        .map(|f| Candidate {
            requested_g: f.diagnostics.requested_g,
            g: f.g(),
            loglik: f.loglik,
            aic: f.aic,
            bic: f.bic,
            converged: f.diagnostics.converged,
        })
        .collect();
    let score = |f: &FitResult| match criterion {
        Criterion::Aic => f.aic,
        Criterion::Bic => f.bic,
    };
    let mut best: Option<FitResult> = None;
    for f in fits {
        let replace = match &best {
            None => true,
            Some(b) => score(&f) < score(b) || (score(&f) == score(b) && f.g() < b.g()),
        };
        if replace {
            best = Some(f);
        }
    }
    Ok(Selection { best: best.expect("non-empty range"), candidates })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::AreaSample;
    use approx::assert_relative_eq;

    fn small_data() -> Dataset {
        let areas = vec![
            AreaSample::new("a", 1, vec![1, 0, 1], vec![0.2, -0.5, 1.0]).unwrap(),
            AreaSample::new("b", 1, vec![0, 0], vec![0.7, -1.2]).unwrap(),
            AreaSample::new("c", 1, vec![1], vec![0.1]).unwrap(),
        ];
        Dataset::new(1, areas).unwrap()
    }

    #[test]
    fn single_component_posterior_is_one() {
        let d = small_data();
        let params = MixtureParams::new(vec![0.3], vec![-0.2], vec![1.0]).unwrap();
        let tau = e_step(&params, &d).unwrap();
        assert!(tau.iter().all(|&t| t == 1.0));
    }

    #[test]
    fn identical_components_split_evenly() {
        let d = small_data();
        let params = MixtureParams::new(vec![0.3], vec![0.4, 0.4], vec![0.5, 0.5]).unwrap();
        let tau = e_step(&params, &d).unwrap();
        for t in tau.iter() {
            assert_relative_eq!(*t, 0.5, epsilon = 1e-15);
        }
    }

    #[test]
    fn empty_area_gets_prior_weights() {
        let mut d = small_data();
        d.areas.push(AreaSample::empty("z", 1));
        let params = MixtureParams::new(vec![0.3], vec![-1.0, 1.0], vec![0.3, 0.7]).unwrap();
        let tau = e_step(&params, &d).unwrap();
        assert_eq!(tau[(3, 0)], 0.3);
        assert_eq!(tau[(3, 1)], 0.7);
    }

    #[test]
    fn masses_are_column_means() {
        let tau = Tau::from_row_slice(3, 2, &[1.0, 0.0, 1.0, 0.0, 1.0, 0.0]);
        assert_eq!(m_step_masses(&tau), vec![1.0, 0.0]);
        let tau = Tau::from_element(4, 3, 1.0 / 3.0);
        for w in m_step_masses(&tau) {
            assert_relative_eq!(w, 1.0 / 3.0, epsilon = 1e-15);
        }
    }

    #[test]
    fn intercept_only_weighted_mle() {
        // all weight on component 0: xi_0 solves the weighted intercept-only problem
        let areas = vec![
            AreaSample::new("a", 0, vec![1, 0, 1, 1], vec![]).unwrap(),
            AreaSample::new("b", 0, vec![0, 0, 1], vec![]).unwrap(),
        ];
        let d = Dataset::new(0, areas).unwrap();
        let tau = Tau::from_row_slice(2, 2, &[1.0, 0.0, 1.0, 0.0]);
        let params = MixtureParams::from_parts(vec![], vec![0.0, 1.0], vec![1.0, 0.0]);
        let (_, xi) = maximize_regression(&tau, &d, &params, 100, 1e-13).unwrap();
        assert_relative_eq!(xi[0], (4.0f64 / 3.0).ln(), epsilon = 1e-10);
    }

    #[test]
    fn criterion_parses() {
        assert_eq!("AIC".parse::<Criterion>().unwrap(), Criterion::Aic);
        assert!("foo".parse::<Criterion>().is_err());
    }

    #[test]
    fn config_validation() {
        let c = EmConfig::default();
        assert!(c.validate(3).is_ok());
        assert!(c.validate(0).is_err());
        let bad = EmConfig { min_mass: 0.6, ..EmConfig::default() };
        assert!(bad.validate(2).is_err());
        let bad = EmConfig { tol_rel_loglik: 0.0, ..EmConfig::default() };
        assert!(bad.validate(2).is_err());
    }
}
