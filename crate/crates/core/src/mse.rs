//! Analytic MSE of the semi-parametric EBP for binary responses.
//!
//! Everything conditions on the sample count `h = y_i.` of an area: given the
//! fitted parameters, the posterior weights depend on the data only through
//! `h`, so expectations over `y` become exact sums over `h = 0..n_i` weighted
//! by a mixture of Poisson-Binomial laws.

use log::warn;
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::inference::{outer_product_of_scores, per_area_scores, score};
use crate::linalg::{sym_inverse, trace_of_product};
use crate::model::{log1pexp, logistic, softmax_in_place, AreaSample, Dataset, MixtureParams, PopulationCrossTab};
use crate::predict::{pair_areas, sp_ebp};

/// Distribution of the number of successes in independent Bernoulli trials.
#[derive(Debug, Clone, PartialEq)]
pub struct PoissonBinomialPmf {
    pub probs: Vec<f64>,
}

impl PoissonBinomialPmf {
    pub fn n(&self) -> usize {
        self.probs.len() - 1
    }
}

/// Convolution DP over the trials, `O(n^2)`.
pub fn poisson_binomial(p: &[f64]) -> PoissonBinomialPmf {
    let mut pmf = vec![0.0; p.len() + 1];
    pmf[0] = 1.0;
    for (j, &q) in p.iter().enumerate() {
        let q = q.clamp(0.0, 1.0);
        for k in (1..=j + 1).rev() {
            pmf[k] = pmf[k] * (1.0 - q) + pmf[k - 1] * q;
        }
        pmf[0] *= 1.0 - q;
    }
    PoissonBinomialPmf { probs: pmf }
}

/// Per-component quantities of the sampled units of an area.
struct SampleSums {
    /// `sum_r log(1 + e^{eta_rg})`
    log_norm: Vec<f64>,
    /// `sum_r p_rg`
    p_sum: Vec<f64>,
    /// `sum_r p_rg x_r`, one row per component
    px_sum: Vec<Vec<f64>>,
    pmf: Vec<Vec<f64>>,
}

fn sample_sums(params: &MixtureParams, sample: Option<&AreaSample>) -> SampleSums {
    let g = params.g();
    let p = params.p();
    let mut out = SampleSums {
        log_norm: vec![0.0; g],
        p_sum: vec![0.0; g],
        px_sum: vec![vec![0.0; p]; g],
        pmf: Vec::with_capacity(g),
    };
    let Some(area) = sample else {
        out.pmf = vec![vec![1.0]; g];
        return out;
    };
    let offsets = area.offsets(&params.beta);
    for c in 0..g {
        let mut probs = Vec::with_capacity(offsets.len());
        for (r, &o) in offsets.iter().enumerate() {
            let eta = o + params.xi[c];
            let pr = logistic(eta);
            out.log_norm[c] += log1pexp(eta);
            out.p_sum[c] += pr;
            for (acc, &x) in out.px_sum[c].iter_mut().zip(area.x(r)) {
                *acc += pr * x;
            }
            probs.push(pr);
        }
        out.pmf.push(poisson_binomial(&probs).probs);
    }
    out
}

/// Population means per component and their derivatives in `xi_g` and `beta`.
struct PopulationSums {
    mean: Vec<f64>,
    d_xi: Vec<f64>,
    d_beta: Vec<Vec<f64>>,
}

fn population_sums(params: &MixtureParams, crosstab: &PopulationCrossTab) -> Result<PopulationSums> {
    if crosstab.p() != params.p() {
        return Err(Error::Dimension(format!(
            "cross-tabulation for {} has p = {}, fit has p = {}",
            crosstab.area_id,
            crosstab.p(),
            params.p()
        )));
    }
    let n = crosstab.population_size() as f64;
    if n == 0.0 {
        return Err(Error::InvalidInput(format!("area {} has zero population", crosstab.area_id)));
    }
    let g = params.g();
    let offsets = crosstab.offsets(&params.beta);
    let mut out = PopulationSums { mean: vec![0.0; g], d_xi: vec![0.0; g], d_beta: vec![vec![0.0; params.p()]; g] };
    for c in 0..g {
        for (k, &o) in offsets.iter().enumerate() {
            let (x, count) = crosstab.profile(k);
            let w = count as f64 / n;
            let pr = logistic(o + params.xi[c]);
            let v = w * pr * (1.0 - pr);
            out.mean[c] += w * pr;
            out.d_xi[c] += v;
            for (acc, &xa) in out.d_beta[c].iter_mut().zip(x) {
                *acc += v * xa;
            }
        }
    }
    Ok(out)
}

/// Every `h`-indexed quantity of one area.
#[derive(Debug, Clone)]
pub struct AreaTerms {
    /// `Pr(Y_i. = h)`, `h = 0..n_i`
    pub count_pmf: Vec<f64>,
    /// `tau_g(h)`, one vector per `h`
    pub tau: Vec<Vec<f64>>,
    /// conditional best predictor for each `h`
    pub p_tilde: Vec<f64>,
    pub component_means: Vec<f64>,
    /// gradient of `p_tilde(h)` in the free chart, if requested
    pub gradients: Option<Vec<DVector<f64>>>,
}

impl AreaTerms {
    pub fn compute(
        params: &MixtureParams,
        sample: Option<&AreaSample>,
        crosstab: &PopulationCrossTab,
        with_gradients: bool,
    ) -> Result<Self> {
        if let Some(a) = sample {
            if a.p() != params.p() {
                return Err(Error::Dimension(format!("sample for {} has p = {}", a.area_id, a.p())));
            }
        }
        let (p, g) = (params.p(), params.g());
        let pop = population_sums(params, crosstab)?;
        let ss = sample_sums(params, sample);
        let n = sample.map_or(0, AreaSample::n);

        let mut count_pmf = vec![0.0; n + 1];
        for c in 0..g {
            for (acc, v) in count_pmf.iter_mut().zip(&ss.pmf[c]) {
                *acc += params.pi[c] * v;
            }
        }
        let log_pi: Vec<f64> = params.pi.iter().map(|w| w.ln()).collect();
        let mut taus = Vec::with_capacity(n + 1);
        let mut p_tilde = Vec::with_capacity(n + 1);
        let mut grads = with_gradients.then(|| Vec::with_capacity(n + 1));
        for h in 0..=n {
            let hf = h as f64;
            let mut tau: Vec<f64> = (0..g).map(|c| log_pi[c] + params.xi[c] * hf - ss.log_norm[c]).collect();
            softmax_in_place(&mut tau);
            let pt: f64 = tau.iter().zip(&pop.mean).map(|(t, m)| t * m).sum();
            if let Some(gs) = grads.as_mut() {
                let mut grad = DVector::zeros(params.n_free());
                // beta block
                let mut s_bar = vec![0.0; p];
                for c in 0..g {
                    for a in 0..p {
                        s_bar[a] -= tau[c] * ss.px_sum[c][a];
                    }
                }
                for c in 0..g {
                    for a in 0..p {
                        let s_beta = -ss.px_sum[c][a];
                        grad[a] += tau[c] * pop.d_beta[c][a] + pop.mean[c] * tau[c] * (s_beta - s_bar[a]);
                    }
                }
                // xi block
                for c in 0..g {
                    let s_xi = hf - ss.p_sum[c];
                    grad[p + c] = tau[c] * pop.d_xi[c] + tau[c] * s_xi * (pop.mean[c] - pt);
                }
                // free masses pi_1..pi_{G-1}
                let last = tau[g - 1] * (pop.mean[g - 1] - pt) / params.pi[g - 1];
                for c in 0..g - 1 {
                    grad[p + g + c] = tau[c] * (pop.mean[c] - pt) / params.pi[c] - last;
                }
                gs.push(grad);
            }
            taus.push(tau);
            p_tilde.push(pt);
        }
        Ok(Self { count_pmf, tau: taus, p_tilde, component_means: pop.mean, gradients: grads })
    }

    /// `sum_g p_g^2 pi_g - sum_h p_tilde(h)^2 Pr(h)`.
    pub fn d_term(&self, pi: &[f64]) -> f64 {
        let prior: f64 = self.component_means.iter().zip(pi).map(|(m, w)| m * m * w).sum();
        let post: f64 = self.p_tilde.iter().zip(&self.count_pmf).map(|(t, w)| t * t * w).sum();
        prior - post
    }

    /// `sum_h grad(h)' V grad(h) Pr(h)`, i.e. the e-term divided by `m`.
    pub fn expected_quadratic_form(&self, v: &DMatrix<f64>) -> f64 {
        let grads = self.gradients.as_ref().expect("gradients were not computed");
        grads
            .iter()
            .zip(&self.count_pmf)
            .map(|(gr, w)| w * (gr.transpose() * v * gr)[(0, 0)])
            .sum()
    }
}

/// `Pr(Y_i. = h)` for `h = 0..n_i`; a point mass at 0 when nothing is sampled.
pub fn marginal_count_pmf(params: &MixtureParams, sample: Option<&AreaSample>) -> Vec<f64> {
    let ss = sample_sums(params, sample);
    let n = sample.map_or(0, AreaSample::n);
    let mut out = vec![0.0; n + 1];
    for (c, pmf) in ss.pmf.iter().enumerate() {
        for (acc, v) in out.iter_mut().zip(pmf) {
            *acc += params.pi[c] * v;
        }
    }
    out
}

fn check_h(sample: Option<&AreaSample>, h: usize) -> Result<()> {
    let n = sample.map_or(0, AreaSample::n);
    if h > n {
        return Err(Error::InvalidInput(format!("count {h} exceeds sample size {n}")));
    }
    Ok(())
}

/// Best predictor of the area proportion given `y_i. = h`.
pub fn conditional_bp(params: &MixtureParams, sample: Option<&AreaSample>, crosstab: &PopulationCrossTab, h: usize) -> Result<f64> {
    check_h(sample, h)?;
    Ok(AreaTerms::compute(params, sample, crosstab, false)?.p_tilde[h])
}

pub fn d_term(params: &MixtureParams, sample: Option<&AreaSample>, crosstab: &PopulationCrossTab) -> Result<f64> {
    Ok(AreaTerms::compute(params, sample, crosstab, false)?.d_term(&params.pi))
}

/// Analytic gradient of [`conditional_bp`] in the free chart.
pub fn bp_derivatives(
    params: &MixtureParams,
    sample: Option<&AreaSample>,
    crosstab: &PopulationCrossTab,
    h: usize,
) -> Result<DVector<f64>> {
    check_h(sample, h)?;
    let mut terms = AreaTerms::compute(params, sample, crosstab, true)?;
    Ok(terms.gradients.take().expect("requested").swap_remove(h))
}

/// `m * sum_h grad' V grad Pr(h)`; contributes `e / m` to the MSE.
pub fn e_term(
    params: &MixtureParams,
    sample: Option<&AreaSample>,
    crosstab: &PopulationCrossTab,
    v: &DMatrix<f64>,
    m: usize,
) -> Result<f64> {
    check_cov(params, v)?;
    Ok(m as f64 * AreaTerms::compute(params, sample, crosstab, true)?.expected_quadratic_form(v))
}

fn check_cov(params: &MixtureParams, v: &DMatrix<f64>) -> Result<()> {
    let k = params.n_free();
    if v.nrows() != k || v.ncols() != k {
        return Err(Error::Dimension(format!("covariance is {}x{}, expected {k}x{k}", v.nrows(), v.ncols())));
    }
    Ok(())
}

/// Step for free coordinate `k`, kept inside the simplex for mass coordinates.
fn fd_step(theta: &[f64], k: usize, scale: f64, params: &MixtureParams) -> f64 {
    let h = scale * (1.0 + theta[k].abs());
    if k >= params.p() + params.g() {
        let min_pi = params.pi.iter().copied().fold(f64::INFINITY, f64::min);
        h.min(0.25 * min_pi)
    } else {
        h
    }
}

const FIRST_STEP: f64 = 1e-5;
const SECOND_STEP: f64 = 1e-4;

fn perturbed(params: &MixtureParams, theta: &[f64], moves: &[(usize, f64)]) -> MixtureParams {
    let mut t = theta.to_vec();
    for &(k, h) in moves {
        t[k] += h;
    }
    MixtureParams::from_free(params.p(), params.g(), &t)
}

/// Central-difference gradient of the area's d-term.
fn d_gradient(params: &MixtureParams, sample: Option<&AreaSample>, crosstab: &PopulationCrossTab) -> Result<DVector<f64>> {
    let theta = params.to_free();
    let d = |q: &MixtureParams| d_term(q, sample, crosstab);
    let mut out = DVector::zeros(theta.len());
    for k in 0..theta.len() {
        let h = fd_step(&theta, k, FIRST_STEP, params);
        out[k] = (d(&perturbed(params, &theta, &[(k, h)]))? - d(&perturbed(params, &theta, &[(k, -h)]))?) / (2.0 * h);
    }
    Ok(out)
}

/// Central second-difference Hessian of the area's d-term.
fn d_hessian(params: &MixtureParams, sample: Option<&AreaSample>, crosstab: &PopulationCrossTab) -> Result<DMatrix<f64>> {
    let theta = params.to_free();
    let k = theta.len();
    let d = |moves: &[(usize, f64)]| d_term(&perturbed(params, &theta, moves), sample, crosstab);
    let d0 = d(&[])?;
    let steps: Vec<f64> = (0..k).map(|a| fd_step(&theta, a, SECOND_STEP, params)).collect();
    let mut hess = DMatrix::zeros(k, k);
    for a in 0..k {
        let ha = steps[a];
        hess[(a, a)] = (d(&[(a, ha)])? - 2.0 * d0 + d(&[(a, -ha)])?) / (ha * ha);
        for b in 0..a {
            let hb = steps[b];
            let v = (d(&[(a, ha), (b, hb)])? - d(&[(a, ha), (b, -hb)])? - d(&[(a, -ha), (b, hb)])?
                + d(&[(a, -ha), (b, -hb)])?)
                / (4.0 * ha * hb);
            hess[(a, b)] = v;
            hess[(b, a)] = v;
        }
    }
    Ok(hess)
}

/// Data-level pieces of the first bias term, shared by every area.
#[derive(Debug, Clone)]
pub struct BiasGlobals {
    /// `I_e = sum_i S_i S_i'`
    pub ie: DMatrix<f64>,
    /// first-order bias of the estimator, `E(theta_hat - theta)`, in the free chart
    pub direction: DVector<f64>,
    pub m: usize,
}

fn score_jacobian(params: &MixtureParams, data: &Dataset) -> Result<DMatrix<f64>> {
    let theta = params.to_free();
    let k = theta.len();
    let base = MixtureParams::from_free(params.p(), params.g(), &theta);
    let mut jac = DMatrix::zeros(k, k);
    for a in 0..k {
        let h = fd_step(&theta, a, FIRST_STEP, &base);
        let up = score(&perturbed(&base, &theta, &[(a, h)]), data)?;
        let dn = score(&perturbed(&base, &theta, &[(a, -h)]), data)?;
        jac.set_column(a, &((up - dn) / (2.0 * h)));
    }
    Ok(jac)
}

/// Expanding `0 = S^k(theta_hat)` to second order and taking expectations gives
///
/// `J E(theta_hat - theta) = c`, `c_k = tr(Sigma T_k) / 2 + tr(J^{-1} M_k)`
///
/// with `J = -dS / dtheta'`, `Sigma = J^{-1} I_e J^{-1}`, `T_k = d2 S^k / dtheta dtheta'`
/// (nested differences of the analytic score) and `M_k[a][b] = sum_i S_ia dS_ik / dtheta_b`
/// estimating `E[S (dS^k)']`. The sandwich form keeps the bias bounded when `I_e` and `J`
/// disagree, as they do for weakly separated components; with `J = I_e` it is Cox-Snell.
pub fn bias_globals(params: &MixtureParams, data: &Dataset) -> Result<BiasGlobals> {
    params.check_against(data.p())?;
    let theta = params.to_free();
    let k = theta.len();
    let s0 = per_area_scores(params, data)?;
    let ie = outer_product_of_scores(&s0);
    // skipped when I_e is singular, even if J is not
    sym_inverse(&ie)?;
    // observed information; in expectation it equals I_e when the model holds
    let j_inv = sym_inverse(&-crate::linalg::symmetrize(&score_jacobian(params, data)?))?;
    let sigma = &j_inv * &ie * &j_inv;
    // per direction b: (d jacobian / d theta_b, sum_i S_i (dS_i / dtheta_b)')
    let per_dir: Vec<Result<(DMatrix<f64>, DMatrix<f64>)>> = (0..k)
        .into_par_iter()
        .map(|b| {
            let h2 = fd_step(&theta, b, SECOND_STEP, params);
            let up = perturbed(params, &theta, &[(b, h2)]);
            let dn = perturbed(params, &theta, &[(b, -h2)]);
            let d_jac = (score_jacobian(&up, data)? - score_jacobian(&dn, data)?) / (2.0 * h2);
            let h1 = fd_step(&theta, b, FIRST_STEP, params);
            let up = per_area_scores(&perturbed(params, &theta, &[(b, h1)]), data)?;
            let dn = per_area_scores(&perturbed(params, &theta, &[(b, -h1)]), data)?;
            let cross = s0.transpose() * ((up - dn) / (2.0 * h1));
            Ok((d_jac, cross))
        })
        .collect();
    let per_dir = per_dir.into_iter().collect::<Result<Vec<_>>>()?;
    let mut c = DVector::zeros(k);
    for kk in 0..k {
        let mut t_k = DMatrix::zeros(k, k);
        let mut m_k = DMatrix::zeros(k, k);
        for (b, (d_jac, cross)) in per_dir.iter().enumerate() {
            for a in 0..k {
                t_k[(a, b)] = d_jac[(kk, a)];
                m_k[(a, b)] = cross[(a, kk)];
            }
        }
        let t_k = crate::linalg::symmetrize(&t_k);
        c[kk] = 0.5 * trace_of_product(&sigma, &t_k) + trace_of_product(&j_inv, &m_k);
    }
    Ok(BiasGlobals { direction: &j_inv * c, ie, m: data.m() })
}

/// `(b1, b2)` for one area: `b1 = m grad(d)' E(theta_hat - theta)`, `b2 = (m/2) tr(H_d V)`.
pub fn bias_correction(
    params: &MixtureParams,
    sample: Option<&AreaSample>,
    crosstab: &PopulationCrossTab,
    v: &DMatrix<f64>,
    globals: Option<&BiasGlobals>,
    m: usize,
) -> Result<(f64, f64)> {
    check_cov(params, v)?;
    let half_m = 0.5 * m as f64;
    let b1 = match globals {
        Some(gl) => m as f64 * d_gradient(params, sample, crosstab)?.dot(&gl.direction),
        None => 0.0,
    };
    let b2 = half_m * trace_of_product(&d_hessian(params, sample, crosstab)?, v);
    Ok((b1, b2))
}

/// Bias-corrected MSE and whether the floor was applied.
///
/// A negative raw value is replaced by `0.25 * mse_plain`.
pub fn mse_star(d: f64, e: f64, b1: f64, b2: f64, m: usize) -> (f64, f64, bool) {
    let m = m as f64;
    let plain = d + e / m;
    let raw = d + (e - b1 - b2) / m;
    if raw < 0.0 {
        (raw.max(0.25 * plain), raw, true)
    } else {
        (raw, raw, false)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AreaMse {
    pub area_id: String,
    pub p_hat: f64,
    pub d_term: f64,
    pub e_term: f64,
    pub b1: f64,
    pub b2: f64,
    pub mse_plain: f64,
    pub mse_star: f64,
    pub mse_star_raw: f64,
    pub floored: bool,
    pub bias_corrected: bool,
    pub cv_percent: f64,
    pub out_of_sample: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MseOptions {
    pub bias_correction: bool,
}

impl Default for MseOptions {
    fn default() -> Self {
        Self { bias_correction: true }
    }
}

/// MSE estimates for every cross-tabulated area. `v` is the covariance of
/// the free parameters (sandwich by default).
pub fn mse_report(
    params: &MixtureParams,
    data: &Dataset,
    crosstabs: &[PopulationCrossTab],
    v: &DMatrix<f64>,
    options: MseOptions,
) -> Result<Vec<AreaMse>> {
    check_cov(params, v)?;
    let pairs = pair_areas(data, crosstabs)?;
    let m = data.m();
    let globals = if options.bias_correction {
        match bias_globals(params, data) {
            Ok(g) => Some(g),
            Err(Error::Singular { cond }) => {
                warn!("information is singular (condition {cond:.3e}); bias correction skipped");
                None
            }
            Err(e) => return Err(e),
        }
    } else {
        None
    };
    let bias_on = globals.is_some();
    pairs
        .into_par_iter()
        .map(|(sample, crosstab)| {
            let pred = sp_ebp(params, sample, crosstab)?;
            let terms = AreaTerms::compute(params, sample, crosstab, true)?;
            let d = terms.d_term(&params.pi);
            let e = m as f64 * terms.expected_quadratic_form(v);
            let mse_plain = d + e / m as f64;
            let (b1, b2) = if bias_on {
                bias_correction(params, sample, crosstab, v, globals.as_ref(), m)?
            } else {
                (0.0, 0.0)
            };
            let (star, raw, floored) = if bias_on { mse_star(d, e, b1, b2, m) } else { (mse_plain, mse_plain, false) };
            Ok(AreaMse {
                area_id: crosstab.area_id.clone(),
                p_hat: pred.p_hat,
                d_term: d,
                e_term: e,
                b1,
                b2,
                mse_plain,
                mse_star: star,
                mse_star_raw: raw,
                floored,
                bias_corrected: bias_on,
                cv_percent: 100.0 * star.max(0.0).sqrt() / pred.p_hat,
                out_of_sample: pred.out_of_sample,
            })
        })
        .collect()
}
